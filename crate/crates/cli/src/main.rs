use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use clipdiff::downstream::Composition;
use clipdiff::metrics::ExtractorKind;
use clipdiff::pipeline::{
    DownstreamOptions, FilterOptions, GenerateOptions, MetricsOptions, Pipeline, PipelineConfig, RunManifest, Stage,
};
use clipdiff::Error;

/// Two-stage latent video diffusion for rebalancing imbalanced video data.
#[derive(Parser)]
#[command(name = "clipdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config (TOML). Relative paths inside resolve against its directory.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config as TOML.
    DefaultConfig,
    /// Render the toy imbalanced video dataset.
    MakeData(ConfigArg),
    /// Train the frame autoencoder.
    TrainCodec(ConfigArg),
    /// Train the spatial denoiser on single frames.
    TrainStage1(ConfigArg),
    /// Freeze the spatial denoiser and train temporal blocks on 16-frame clips.
    TrainStage2(ConfigArg),
    /// Sample synthetic clips from stage-2 checkpoints.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Class name; defaults to every under-represented class.
        #[arg(long = "class")]
        class: Option<String>,
        /// Clips per class.
        #[arg(long)]
        num: Option<usize>,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for frames and the clip manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep synthetic clips whose label is in the classifier's top-k.
    Filter {
        #[command(flatten)]
        config: ConfigArg,
        /// Filter classifier directory; trained on real clips when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        in_manifest: Option<PathBuf>,
        #[arg(long)]
        out_manifest: Option<PathBuf>,
        /// Candidates considered per class, in manifest order.
        #[arg(long)]
        num_candidates: Option<usize>,
        /// Accepted clips kept per class.
        #[arg(long)]
        target_accepted: Option<usize>,
    },
    /// Fréchet distance, MMD and density/coverage of synthetic vs real clips.
    EvalMetrics {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory.
        #[arg(long)]
        real_dir: Option<PathBuf>,
        /// Directory holding a clip manifest.
        #[arg(long)]
        synth_dir: Option<PathBuf>,
        /// pixel_pca or classifier.
        #[arg(long)]
        extractor: Option<String>,
        #[arg(long)]
        knn: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train downstream recognizers and write the ablation table.
    Downstream {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory, or a TOML/JSON dataset spec to render.
        #[arg(long)]
        dataset_spec: Option<PathBuf>,
        /// real_only or real_plus_synth.
        #[arg(long)]
        composition: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order and print the ablation table.
    FullPipeline(ConfigArg),
}

/// Failure with its exit status: 2 for invalid configuration, 1 otherwise.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn classify(stage: &str, e: Error) -> Failure {
    let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
    Failure {
        code,
        error: anyhow::Error::new(e).context(format!("stage {stage} failed")),
    }
}

fn config_failure(e: anyhow::Error) -> Failure {
    Failure { code: 2, error: e }
}

fn load(arg: &ConfigArg) -> Result<Pipeline, Failure> {
    Pipeline::from_file(&arg.config).map_err(|e| Failure {
        code: 2,
        error: anyhow::Error::new(e).context(format!("invalid config {}", arg.config.display())),
    })
}

fn report(m: &RunManifest) {
    println!("{}: seed {} config {} ({:.1}s)", m.command, m.seed, &m.config_hash[..12], m.wall_time_secs);
}

fn run(cli: Cli) -> Result<(), Failure> {
    let stage_result = |stage: Stage, r: clipdiff::Result<RunManifest>| -> Result<(), Failure> {
        let m = r.map_err(|e| classify(stage.id(), e))?;
        report(&m);
        Ok(())
    };
    match cli.command {
        Command::DefaultConfig => {
            let text = PipelineConfig::default()
                .to_toml()
                .context("serializing default config")
                .map_err(config_failure)?;
            print!("{text}");
            Ok(())
        }
        Command::MakeData(c) => stage_result(Stage::MakeData, load(&c)?.make_data()),
        Command::TrainCodec(c) => stage_result(Stage::TrainCodec, load(&c)?.train_codec()),
        Command::TrainStage1(c) => stage_result(Stage::TrainStage1, load(&c)?.train_stage1()),
        Command::TrainStage2(c) => stage_result(Stage::TrainStage2, load(&c)?.train_stage2()),
        Command::Generate {
            config,
            ckpt,
            class,
            num,
            steps,
            seed,
            out,
        } => {
            let opts = GenerateOptions {
                ckpt,
                class,
                num,
                steps,
                seed,
                out,
            };
            stage_result(Stage::Generate, load(&config)?.generate(&opts))
        }
        Command::Filter {
            config,
            ckpt,
            k,
            in_manifest,
            out_manifest,
            num_candidates,
            target_accepted,
        } => {
            let opts = FilterOptions {
                ckpt,
                k,
                in_manifest,
                out_manifest,
                num_candidates,
                target_accepted,
            };
            stage_result(Stage::Filter, load(&config)?.filter(&opts))
        }
        Command::EvalMetrics {
            config,
            real_dir,
            synth_dir,
            extractor,
            knn,
            out,
        } => {
            let extractor = extractor
                .map(|s| s.parse::<ExtractorKind>())
                .transpose()
                .map_err(|e| classify(Stage::EvalMetrics.id(), Error::Config(e.to_string())))?;
            let opts = MetricsOptions {
                real_dir,
                synth_dir,
                extractor,
                knn,
                out,
            };
            stage_result(Stage::EvalMetrics, load(&config)?.eval_metrics(&opts))
        }
        Command::Downstream {
            config,
            dataset_spec,
            composition,
            seeds,
            out,
        } => {
            let composition = composition
                .map(|s| s.parse::<Composition>())
                .transpose()
                .map_err(|e| classify(Stage::Downstream.id(), Error::Config(e.to_string())))?;
            let opts = DownstreamOptions {
                dataset_spec,
                composition,
                seeds,
                out: out.clone(),
            };
            let p = load(&config)?;
            stage_result(Stage::Downstream, p.downstream(&opts))?;
            let dir = out.unwrap_or_else(|| p.output_dir("downstream"));
            let table = std::fs::read_to_string(dir.join("ablation.txt"))
                .context("reading ablation table")
                .map_err(|error| Failure { code: 1, error })?;
            print!("{table}");
            Ok(())
        }
        Command::FullPipeline(c) => {
            let p = load(&c)?;
            let manifests = p.full().map_err(|(stage, e)| classify(stage.id(), e))?;
            manifests.iter().for_each(report);
            let table = p.ablation_table().map_err(|e| classify(Stage::Downstream.id(), e))?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
