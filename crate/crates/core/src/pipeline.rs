//! Config-driven stage runner shared by the command-line tool and the
//! end-to-end tests. Every stage reads earlier artifacts, writes its own
//! directory and a `run_manifest.json` carrying the config hash and seed.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointKind};
use crate::codec::{train_codec, Codec, CodecKind, CodecSpec, CodecTrainConfig, LatentScaling};
use crate::conditioning::{TaskKind, Vocabulary};
use crate::dataset::{derive_seed, MotionClass, Split, ToyDataset, ToyDatasetSpec};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{Parameterization, ScheduleSpec};
use crate::downstream::{oracle_pool, run_ablation, video_windows, Composition, DownstreamConfig, SyntheticPool};
use crate::error::{invalid, Error, Result};
use crate::io::{dir_digest, read_frames, read_json, sha256_hex, write_atomic, write_json};
use crate::metrics::{
    evaluate, format_table, subset_frames, ExtractorKind, FeatureSet, MetricReport, PixelPca, Source, FRAME_SUBSET,
};
use crate::nn::ParamStore;
use crate::recognizer::{ClassifierTrainConfig, Recognizer};
use crate::rejection::{filter, load_classifier, save_classifier, train_filter_classifier, Candidate, RejectionPolicy};
use crate::sampler::{generate, read_clip_manifest, write_clips, ClipManifest, SampleRequest, SamplerKind, CLIP_MANIFEST};
use crate::trainer::{
    encode_videos, train_stage1, train_stage2, DenoiserCheckpoint, Stage2Mode, TrainConfig, TrainSetup, CLIP_LENGTH,
};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    MakeData,
    TrainCodec,
    TrainStage1,
    TrainStage2,
    Generate,
    Filter,
    EvalMetrics,
    Downstream,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::MakeData,
        Stage::TrainCodec,
        Stage::TrainStage1,
        Stage::TrainStage2,
        Stage::Generate,
        Stage::Filter,
        Stage::EvalMetrics,
        Stage::Downstream,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Stage::MakeData => "make-data",
            Stage::TrainCodec => "train-codec",
            Stage::TrainStage1 => "train-stage1",
            Stage::TrainStage2 => "train-stage2",
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::EvalMetrics => "eval-metrics",
            Stage::Downstream => "downstream",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.id() == s)
            .ok_or_else(|| invalid!("unknown stage {s:?}"))
    }
}

/// Root seed XOR a hash of the stage id.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    derive_seed(root, stage.id())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            output: "output".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: Vec<MotionClass>,
    pub counts: Vec<usize>,
    pub frames: usize,
    pub resolution: usize,
    pub task: TaskKind,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = ToyDatasetSpec::default();
        Self {
            classes: s.classes,
            counts: s.counts,
            frames: s.frames,
            resolution: s.resolution,
            task: s.task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub kind: CodecKind,
    pub spatial_downsample: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        let t = CodecTrainConfig::default();
        Self {
            kind: CodecKind::ConvAutoencoder,
            spatial_downsample: 2,
            latent_channels: 4,
            hidden: 16,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

impl CodecSection {
    pub fn spec(&self) -> CodecSpec {
        match self.kind {
            CodecKind::Identity => CodecSpec::identity(3),
            CodecKind::ConvAutoencoder => {
                CodecSpec::conv(3, self.spatial_downsample, self.latent_channels, self.hidden)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub widths: Vec<usize>,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub temporal_heads: usize,
    pub mlp_ratio: usize,
    pub positional_encoding: bool,
    pub parameterization: Parameterization,
    pub max_groups: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            widths: vec![16, 32],
            text_dim: 16,
            vocab_size: d.vocab_size,
            max_tokens: d.max_tokens,
            temporal_heads: d.temporal_heads,
            mlp_ratio: d.mlp_ratio,
            positional_encoding: d.positional_encoding,
            parameterization: d.parameterization,
            max_groups: d.max_groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Section {
    pub mode: Stage2Mode,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            mode: Stage2Mode::PerClass,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    /// Candidates generated per under-represented class before filtering.
    pub num_candidates: usize,
    pub steps: usize,
    pub sampler: SamplerKind,
    pub guidance_scale: f64,
    pub batch_size: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            num_candidates: 32,
            steps: 50,
            sampler: SamplerKind::Ddim,
            guidance_scale: 1.0,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Top-k threshold; unset means 3 for action tasks and 1 for event
    /// tasks, capped at one below the class count.
    pub k: Option<usize>,
    pub classifier_width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cap on accepted clips kept per class.
    pub target_accepted: Option<usize>,
}

impl Default for FilterSection {
    fn default() -> Self {
        let t = ClassifierTrainConfig::default();
        Self {
            k: None,
            classifier_width: 8,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            target_accepted: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub extractor: ExtractorKind,
    pub knn: usize,
    pub pca_dim: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            extractor: ExtractorKind::PixelPca,
            knn: 3,
            pca_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamSection {
    pub seeds: usize,
    /// Held-out real minority clips in the positive-control row.
    pub oracle_clips_per_class: usize,
    #[serde(flatten)]
    pub recognizer: DownstreamConfig,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self {
            seeds: 3,
            oracle_clips_per_class: 16,
            recognizer: DownstreamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub dataset: DatasetSection,
    pub codec: CodecSection,
    pub denoiser: DenoiserSection,
    pub schedule: ScheduleSpec,
    pub stage1: TrainConfig,
    pub stage2: Stage2Section,
    pub generate: GenerateSection,
    pub filter: FilterSection,
    pub metrics: MetricsSection,
    pub downstream: DownstreamSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            dataset: DatasetSection::default(),
            codec: CodecSection::default(),
            denoiser: DenoiserSection::default(),
            schedule: ScheduleSpec::default(),
            stage1: TrainConfig::default(),
            stage2: Stage2Section::default(),
            generate: GenerateSection::default(),
            filter: FilterSection::default(),
            metrics: MetricsSection::default(),
            downstream: DownstreamSection::default(),
        }
    }
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) | Error::Shape(m) => Error::Config(m),
        other => other,
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn dataset_spec(&self) -> ToyDatasetSpec {
        ToyDatasetSpec {
            classes: self.dataset.classes.clone(),
            counts: self.dataset.counts.clone(),
            frames: self.dataset.frames,
            resolution: self.dataset.resolution,
            task: self.dataset.task,
            seed: stage_seed(self.seed, Stage::MakeData),
        }
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        let spec = self.codec.spec();
        Ok(DenoiserConfig {
            latent_channels: spec.latent_shape(self.dataset.resolution, self.dataset.resolution)?.0,
            widths: self.denoiser.widths.clone(),
            text_dim: self.denoiser.text_dim,
            vocab_size: self.denoiser.vocab_size,
            max_tokens: self.denoiser.max_tokens,
            num_classes: self.dataset.classes.len(),
            frames: CLIP_LENGTH,
            temporal_heads: self.denoiser.temporal_heads,
            mlp_ratio: self.denoiser.mlp_ratio,
            positional_encoding: self.denoiser.positional_encoding,
            parameterization: self.denoiser.parameterization,
            max_groups: self.denoiser.max_groups,
        })
    }

    pub fn rejection_k(&self) -> usize {
        let n = self.dataset.classes.len();
        self.filter.k.unwrap_or_else(|| {
            let default = match self.dataset.task {
                TaskKind::Action => 3,
                TaskKind::Event => 1,
            };
            default.min(n.saturating_sub(1)).max(1)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate().map_err(cfg_err)?;
        if self.dataset.frames < CLIP_LENGTH {
            return Err(Error::Config(format!(
                "videos need at least {CLIP_LENGTH} frames, got {}",
                self.dataset.frames
            )));
        }
        let spec = self.codec.spec();
        spec.validate().map_err(cfg_err)?;
        let (_, lh, _) = spec
            .latent_shape(self.dataset.resolution, self.dataset.resolution)
            .map_err(cfg_err)?;
        let den = self.denoiser_config()?;
        if den.widths.is_empty() || lh % den.spatial_multiple() != 0 {
            return Err(Error::Config(format!(
                "latent size {lh} is not divisible by the denoiser's {}",
                den.spatial_multiple()
            )));
        }
        if self.denoiser.text_dim == 0 || self.denoiser.vocab_size < 4 || self.denoiser.max_tokens == 0 {
            return Err(Error::Config("denoiser text settings must be positive".into()));
        }
        crate::diffusion::NoiseSchedule::from_spec(self.schedule).map_err(cfg_err)?;
        self.stage1.validate().map_err(cfg_err)?;
        self.stage2.train.validate().map_err(cfg_err)?;
        if self.stage2.train.clip_length != CLIP_LENGTH {
            return Err(Error::Config(format!(
                "stage 2 clip length must be {CLIP_LENGTH}, got {}",
                self.stage2.train.clip_length
            )));
        }
        let g = &self.generate;
        if g.num_candidates == 0 || g.batch_size == 0 || g.steps == 0 || g.steps > self.schedule.steps {
            return Err(Error::Config("generation counts and steps must lie in range".into()));
        }
        if !(g.guidance_scale >= 1.0) {
            return Err(Error::Config("guidance scale must be >= 1".into()));
        }
        RejectionPolicy::new(self.rejection_k(), self.dataset.classes.len(), "").map_err(cfg_err)?;
        if self.filter.classifier_width == 0 || self.filter.steps == 0 || self.filter.batch_size == 0 {
            return Err(Error::Config("filter classifier sizes must be positive".into()));
        }
        if self.metrics.knn == 0 || self.metrics.pca_dim == 0 {
            return Err(Error::Config("metrics knn and pca_dim must be positive".into()));
        }
        if self.downstream.seeds == 0 {
            return Err(Error::Config("downstream needs at least one seed".into()));
        }
        self.downstream.recognizer.validate()?;
        for p in [&self.paths.data, &self.paths.checkpoints, &self.paths.output] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config("paths must be non-empty".into()));
            }
        }
        Ok(())
    }
}

/// Record written next to every stage's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    /// Digest of the stage directory, excluding this file.
    pub artifact_digest: String,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub ckpt: Option<PathBuf>,
    pub class: Option<String>,
    pub num: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOptions {
    pub ckpt: Option<PathBuf>,
    pub k: Option<usize>,
    pub in_manifest: Option<PathBuf>,
    pub out_manifest: Option<PathBuf>,
    pub num_candidates: Option<usize>,
    pub target_accepted: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsOptions {
    pub real_dir: Option<PathBuf>,
    pub synth_dir: Option<PathBuf>,
    pub extractor: Option<ExtractorKind>,
    pub knn: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct DownstreamOptions {
    pub dataset_spec: Option<PathBuf>,
    pub composition: Option<Composition>,
    pub seeds: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodecMeta {
    spec: CodecSpec,
    scaling: LatentScaling,
    train: CodecTrainConfig,
    final_loss: Option<f32>,
}

/// Load a trained codec with its latent scaling.
pub fn load_codec(dir: &Path) -> Result<Codec> {
    let (manifest, mut store) = checkpoint::load_kind(dir, CheckpointKind::Codec)?;
    let meta: CodecMeta = manifest.metadata_as()?;
    let mut codec = Codec::new(&mut store, meta.spec, 0)?;
    codec.set_scaling(meta.scaling);
    Ok(codec)
}

/// `target` relative to `base`, both made absolute first.
fn relative_path(target: &Path, base: &Path) -> Result<PathBuf> {
    let t = std::path::absolute(target).map_err(|e| Error::io(target, e))?;
    let b = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
    let tc: Vec<Component<'_>> = t.components().filter(|c| *c != Component::CurDir).collect();
    let bc: Vec<Component<'_>> = b.components().filter(|c| *c != Component::CurDir).collect();
    let common = tc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c.as_os_str());
    }
    Ok(out)
}

/// Clips referenced by a manifest as (path, label, tensor (c, f, h, w)).
pub fn load_manifest_clips(manifest_path: &Path) -> Result<Vec<(String, usize, Tensor)>> {
    let manifest = read_clip_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .clips
        .iter()
        .map(|r| {
            let (data, c, h, w) = read_frames(&dir.join(&r.path), r.frames)?;
            let t = Tensor::from_vec(data, (r.frames, c, h, w), &Device::Cpu)?
                .permute((1, 0, 2, 3))?
                .contiguous()?;
            Ok((r.path.clone(), r.label, t))
        })
        .collect()
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub base: PathBuf,
    pub config_hash: String,
}

impl Pipeline {
    /// Validate `config`; relative paths resolve against `base`.
    pub fn new(config: PipelineConfig, base: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash()?;
        Ok(Self {
            config,
            base: base.into(),
            config_hash,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = PipelineConfig::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.data)
    }

    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.resolve(&self.config.paths.checkpoints).join(name)
    }

    pub fn output_dir(&self, name: &str) -> PathBuf {
        self.resolve(&self.config.paths.output).join(name)
    }

    pub fn stage2_dir(&self, class: Option<&str>) -> PathBuf {
        self.checkpoint_dir("stage2").join(class.unwrap_or("shared"))
    }

    pub fn seed(&self, stage: Stage) -> u64 {
        stage_seed(self.config.seed, stage)
    }

    fn finish(&self, stage: Stage, dir: &Path, start: Instant, summary: serde_json::Value) -> Result<RunManifest> {
        let skip = |p: &Path| p.file_name().is_some_and(|n| n == RUN_MANIFEST);
        let manifest = RunManifest {
            command: stage.id().to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed(stage),
            wall_time_secs: start.elapsed().as_secs_f64(),
            artifact_digest: dir_digest(dir, &skip)?,
            summary,
        };
        write_json(&dir.join(RUN_MANIFEST), &manifest)?;
        log::info!("{} done in {:.1}s", stage.id(), manifest.wall_time_secs);
        Ok(manifest)
    }

    fn dataset(&self) -> Result<ToyDataset> {
        ToyDataset::load(&self.data_dir())
    }

    fn minority(&self, ds: &ToyDataset) -> Vec<(usize, String)> {
        ds.spec
            .under_represented()
            .into_iter()
            .map(|l| (l, ds.registry.name_of(l).unwrap_or("?").to_string()))
            .collect()
    }

    pub fn make_data(&self) -> Result<RunManifest> {
        let start = Instant::now();
        let dir = self.data_dir();
        reset_dir(&dir)?;
        let ds = ToyDataset::generate(&self.config.dataset_spec())?;
        ds.save(&dir)?;
        let summary = serde_json::json!({ "class_histogram": ds.class_histogram(), "videos": ds.videos.len() });
        self.finish(Stage::MakeData, &dir, start, summary)
    }

    pub fn train_codec(&self) -> Result<RunManifest> {
        let start = Instant::now();
        let ds = self.dataset()?;
        let dir = self.checkpoint_dir("codec");
        reset_dir(&dir)?;
        let frames = ToyDataset::frames_tensor(&ds.split(Split::Train))?;
        let c = &self.config.codec;
        let train = CodecTrainConfig {
            steps: c.steps,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            seed: self.seed(Stage::TrainCodec),
        };
        let mut store = ParamStore::new(DType::F32);
        let (codec, report) = train_codec(&mut store, c.spec(), &frames, &train)?;
        let mse = crate::codec::reconstruction_mse(&codec, &frames)?;
        let meta = CodecMeta {
            spec: c.spec(),
            scaling: report.scaling,
            train,
            final_loss: report.losses.last().copied(),
        };
        checkpoint::save(&dir, CheckpointKind::Codec, &store, meta.train.seed, &meta)?;
        let summary = serde_json::json!({ "reconstruction_mse": mse, "scaling": report.scaling });
        self.finish(Stage::TrainCodec, &dir, start, summary)
    }

    pub fn train_stage1(&self) -> Result<RunManifest> {
        let start = Instant::now();
        let ds = self.dataset()?;
        let codec = load_codec(&self.checkpoint_dir("codec"))?;
        let dir = self.checkpoint_dir("stage1");
        reset_dir(&dir)?;
        let latents = encode_videos(&codec, &ds.split(Split::Train), DType::F32)?;
        let den = self.config.denoiser_config()?;
        let vocab = Vocabulary::for_registry(&ds.registry, den.vocab_size, den.max_tokens)?;
        let setup = TrainSetup {
            config: &den,
            schedule: self.config.schedule,
            codec: &codec,
            registry: &ds.registry,
            vocab: &vocab,
        };
        let cfg = TrainConfig {
            seed: self.seed(Stage::TrainStage1),
            ..self.config.stage1.clone()
        };
        let (ckpt, report) = train_stage1(&setup, &latents, &cfg, DType::F32)?;
        ckpt.save(&dir)?;
        write_json(&dir.join("losses.json"), &report.losses)?;
        let summary = serde_json::json!({
            "initial_loss": report.initial_mean(),
            "final_loss": report.final_mean(),
        });
        self.finish(Stage::TrainStage1, &dir, start, summary)
    }

    pub fn train_stage2(&self) -> Result<RunManifest> {
        let start = Instant::now();
        let ds = self.dataset()?;
        let codec = load_codec(&self.checkpoint_dir("codec"))?;
        let stage1 = DenoiserCheckpoint::load(&self.checkpoint_dir("stage1"))?;
        let root = self.checkpoint_dir("stage2");
        reset_dir(&root)?;
        let latents = encode_videos(&codec, &ds.split(Split::Train), DType::F32)?;
        let base = self.seed(Stage::TrainStage2);
        let targets: Vec<(Option<usize>, Option<String>)> = match self.config.stage2.mode {
            Stage2Mode::PerClass => self
                .minority(&ds)
                .into_iter()
                .map(|(l, n)| (Some(l), Some(n)))
                .collect(),
            Stage2Mode::Shared => vec![(None, None)],
        };
        let mut summary = Vec::new();
        for (label, name) in targets {
            let cfg = TrainConfig {
                seed: derive_seed(base, &format!("class/{}", name.as_deref().unwrap_or("shared"))),
                ..self.config.stage2.train.clone()
            };
            let (ckpt, report) = train_stage2(&stage1, &latents, label, &cfg)?;
            let dir = self.stage2_dir(name.as_deref());
            ckpt.save(&dir)?;
            write_json(&dir.join("losses.json"), &report.losses)?;
            summary.push(serde_json::json!({
                "class": name,
                "initial_loss": report.initial_mean(),
                "final_loss": report.final_mean(),
                "trainable_params": ckpt.store.trainable_count(),
            }));
        }
        self.finish(Stage::TrainStage2, &root, start, serde_json::Value::Array(summary))
    }

    pub fn generate(&self, opts: &GenerateOptions) -> Result<RunManifest> {
        let start = Instant::now();
        let ds = self.dataset()?;
        let codec = load_codec(&self.checkpoint_dir("codec"))?;
        let g = &self.config.generate;
        let targets: Vec<(usize, String)> = match &opts.class {
            Some(name) => {
                let l = ds
                    .registry
                    .id_of(name)
                    .ok_or_else(|| invalid!("unknown class {name:?}"))?;
                vec![(l, name.clone())]
            }
            None => self.minority(&ds),
        };
        let base = opts.seed.unwrap_or_else(|| self.seed(Stage::Generate));
        let mut clips = Vec::new();
        for (label, name) in &targets {
            let ckpt_dir = opts.ckpt.clone().unwrap_or_else(|| match self.config.stage2.mode {
                Stage2Mode::PerClass => self.stage2_dir(Some(name)),
                Stage2Mode::Shared => self.stage2_dir(None),
            });
            let mut ckpt = DenoiserCheckpoint::load(&ckpt_dir)?;
            let req = SampleRequest {
                steps: opts.steps.unwrap_or(g.steps),
                kind: g.sampler,
                guidance_scale: g.guidance_scale,
                batch_size: g.batch_size,
                ..SampleRequest::new(*label, opts.num.unwrap_or(g.num_candidates), derive_seed(base, &format!("class/{name}")))
            };
            clips.extend(generate(&mut ckpt, &codec, &req)?);
        }
        let dir = opts.out.clone().unwrap_or_else(|| self.output_dir("synth"));
        reset_dir(&dir)?;
        let names = |l: usize| ds.registry.name_of(l).unwrap_or("?").to_string();
        let manifest = write_clips(&dir, &clips, &names)?;
        let tv: Vec<f64> = clips.iter().map(|c| c.temporal_variance()).collect();
        let summary = serde_json::json!({
            "clips": manifest.clips.len(),
            "min_temporal_variance": tv.iter().copied().fold(f64::INFINITY, f64::min),
        });
        self.finish(Stage::Generate, &dir, start, summary)
    }

    fn real_train_clips(&self, ds: &ToyDataset) -> Result<Vec<(Tensor, usize)>> {
        video_windows(&ds.split(Split::Train), self.config.downstream.recognizer.train_stride)
    }

    /// Load the filter classifier, training and saving it on first use.
    pub fn classifier(&self, dir: &Path, ds: &ToyDataset) -> Result<(Recognizer, String)> {
        if dir.join(checkpoint::MANIFEST_FILE).exists() {
            let (model, _store, _meta, manifest) = load_classifier(dir)?;
            return Ok((model, manifest.payload_sha256));
        }
        let f = &self.config.filter;
        let train = ClassifierTrainConfig {
            steps: f.steps,
            batch_size: f.batch_size,
            learning_rate: f.learning_rate,
            seed: derive_seed(self.seed(Stage::Filter), "classifier"),
        };
        let clips = self.real_train_clips(ds)?;
        let (model, store, meta) = train_filter_classifier(&clips, ds.registry.len(), f.classifier_width, &train)?;
        let manifest = save_classifier(dir, &store, &meta)?;
        log::info!(
            "filter classifier: train accuracy {:.3} (majority {:.3})",
            meta.report.train_accuracy,
            meta.report.majority_baseline
        );
        Ok((model, manifest.payload_sha256))
    }

    pub fn filter(&self, opts: &FilterOptions) -> Result<RunManifest> {
        let start = Instant::now();
        let in_manifest = opts
            .in_manifest
            .clone()
            .unwrap_or_else(|| self.output_dir("synth").join(CLIP_MANIFEST));
        let input = read_clip_manifest(&in_manifest)?;
        let ds = self.dataset()?;
        let ckpt = opts.ckpt.clone().unwrap_or_else(|| self.checkpoint_dir("classifier"));
        let (model, classifier_id) = self.classifier(&ckpt, &ds)?;

        let mut taken = vec![0usize; ds.registry.len()];
        let mut records = Vec::new();
        for r in input.clips {
            if r.label >= taken.len() {
                return Err(invalid!("clip {} has label {} out of range", r.path, r.label));
            }
            if opts.num_candidates.is_none_or(|n| taken[r.label] < n) {
                taken[r.label] += 1;
                records.push(r);
            }
        }
        let in_dir = in_manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut tensors = Vec::with_capacity(records.len());
        for r in &records {
            let (data, c, h, w) = read_frames(&in_dir.join(&r.path), r.frames)?;
            tensors.push(
                Tensor::from_vec(data, (r.frames, c, h, w), &Device::Cpu)?
                    .permute((1, 0, 2, 3))?
                    .contiguous()?,
            );
        }
        let scores = model.score_clips(&tensors, DType::F32, 32)?;
        let candidates: Vec<Candidate> = records
            .iter()
            .zip(scores)
            .map(|(r, s)| (r.path.clone(), r.label, s))
            .collect();
        let k = opts.k.unwrap_or_else(|| self.config.rejection_k());
        let policy = RejectionPolicy::new(k, ds.registry.len(), classifier_id)?;
        let outcome = filter(&candidates, &policy)?;

        let out_manifest = opts
            .out_manifest
            .clone()
            .unwrap_or_else(|| self.output_dir("filter").join(CLIP_MANIFEST));
        let out_dir = out_manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        reset_dir(&out_dir)?;
        let target = opts.target_accepted.or(self.config.filter.target_accepted);
        let mut kept = vec![0usize; ds.registry.len()];
        let mut accepted_records = Vec::new();
        for s in &outcome.accepted {
            if target.is_some_and(|t| kept[s.label] >= t) {
                continue;
            }
            kept[s.label] += 1;
            let mut r = records.iter().find(|r| r.path == s.clip).cloned().expect("record exists");
            r.path = relative_path(&in_dir.join(&r.path), &out_dir)?.to_string_lossy().into_owned();
            accepted_records.push(r);
        }
        write_json(&out_manifest, &ClipManifest { clips: accepted_records })?;
        write_json(&out_dir.join("filter_report.json"), &outcome)?;
        let mut text = format!("top-{} rejection, classifier {}\n", policy.k, policy.classifier_id);
        text.push_str(&format!("{:<12} {:>10} {:>9} {:>9} {:>6}\n", "class", "generated", "accepted", "rejected", "kept"));
        for c in outcome.per_class.iter().filter(|c| c.generated > 0) {
            text.push_str(&format!(
                "{:<12} {:>10} {:>9} {:>9} {:>6}\n",
                ds.registry.name_of(c.label).unwrap_or("?"),
                c.generated,
                c.accepted,
                c.rejected,
                kept[c.label]
            ));
        }
        write_atomic(&out_dir.join("filter_report.txt"), text.as_bytes())?;
        let summary = serde_json::json!({
            "k": policy.k,
            "accepted": outcome.accepted.len(),
            "rejected": outcome.rejected.len(),
            "kept": kept.iter().sum::<usize>(),
        });
        self.finish(Stage::Filter, &out_dir, start, summary)
    }

    pub fn eval_metrics(&self, opts: &MetricsOptions) -> Result<RunManifest> {
        let start = Instant::now();
        let real_dir = opts.real_dir.clone().unwrap_or_else(|| self.data_dir());
        let ds = ToyDataset::load(&real_dir)?;
        let sets: Vec<(String, PathBuf)> = match &opts.synth_dir {
            Some(d) => vec![(d.display().to_string(), d.join(CLIP_MANIFEST))],
            None => {
                let mut v = vec![("before_rs".to_string(), self.output_dir("synth").join(CLIP_MANIFEST))];
                let after = self.output_dir("filter").join(CLIP_MANIFEST);
                if after.exists() {
                    v.push(("after_rs".to_string(), after));
                }
                v
            }
        };
        let extractor = opts.extractor.unwrap_or(self.config.metrics.extractor);
        let knn = opts.knn.unwrap_or(self.config.metrics.knn);
        let classifier = match extractor {
            ExtractorKind::Classifier => Some(load_classifier(&self.checkpoint_dir("classifier"))?.0),
            ExtractorKind::PixelPca => None,
        };
        let minority = ds.spec.under_represented();
        let mut rows: Vec<(String, MetricReport)> = Vec::new();
        let mut skipped: Vec<(String, String)> = Vec::new();
        for (name, path) in sets {
            let synth = load_manifest_clips(&path)?;
            let mut labels: Vec<usize> = synth.iter().map(|(_, l, _)| *l).collect();
            labels.sort_unstable();
            labels.dedup();
            if labels.is_empty() {
                labels = minority.clone();
            }
            if synth.len() < 2 {
                skipped.push((name, format!("{} synthetic clips, need at least 2", synth.len())));
                continue;
            }
            let real: Vec<Tensor> = video_windows(&ds.split(Split::Train), self.config.downstream.recognizer.train_stride)?
                .into_iter()
                .filter(|(_, l)| labels.contains(l))
                .map(|(t, _)| t)
                .collect();
            let synth: Vec<Tensor> = synth.into_iter().map(|(_, _, t)| t).collect();
            let (fr, fs) = match &classifier {
                Some(model) => (
                    model.feature_rows(&real, DType::F32, 32)?,
                    model.feature_rows(&synth, DType::F32, 32)?,
                ),
                None => pca_features(&real, &synth, self.config.metrics.pca_dim)?,
            };
            let id = match extractor {
                ExtractorKind::PixelPca => "pixel_pca",
                ExtractorKind::Classifier => "classifier",
            };
            let real = FeatureSet::new(fr, id, Source::Real)?;
            let synth = FeatureSet::new(fs, id, Source::Synthetic)?;
            rows.push((name, evaluate(&real, &synth, knn, None)?));
        }
        let out = opts.out.clone().unwrap_or_else(|| self.output_dir("metrics"));
        reset_dir(&out)?;
        let mut text = format_table(&rows);
        for (name, why) in &skipped {
            text.push_str(&format!("{name}: skipped ({why})\n"));
        }
        let summary = serde_json::json!({ "reports": rows, "skipped": skipped });
        write_json(&out.join("metrics.json"), &summary)?;
        write_atomic(&out.join("metrics.txt"), text.as_bytes())?;
        self.finish(Stage::EvalMetrics, &out, start, summary)
    }

    pub fn downstream(&self, opts: &DownstreamOptions) -> Result<RunManifest> {
        let start = Instant::now();
        let ds = match &opts.dataset_spec {
            None => self.dataset()?,
            Some(p) if p.is_dir() => ToyDataset::load(p)?,
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let spec: ToyDatasetSpec = if p.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text)?
                } else {
                    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                };
                ToyDataset::generate(&spec)?
            }
        };
        let composition = opts.composition.unwrap_or(Composition::RealPlusSynth);
        let mut pools = Vec::new();
        if composition == Composition::RealPlusSynth {
            let load = |p: PathBuf| -> Result<Vec<(Tensor, usize)>> {
                Ok(load_manifest_clips(&p)?.into_iter().map(|(_, l, t)| (t, l)).collect())
            };
            pools.push(SyntheticPool {
                name: "with_rs".into(),
                clips: load(self.output_dir("filter").join(CLIP_MANIFEST))?,
            });
            pools.push(SyntheticPool {
                name: "without_rs".into(),
                clips: load(self.output_dir("synth").join(CLIP_MANIFEST))?,
            });
            pools.push(SyntheticPool {
                name: "oracle".into(),
                clips: oracle_pool(&ds, self.config.downstream.oracle_clips_per_class, "oracle")?,
            });
        }
        let base = self.seed(Stage::Downstream);
        let seeds: Vec<u64> = (0..opts.seeds.unwrap_or(self.config.downstream.seeds))
            .map(|i| derive_seed(base, &format!("seed/{i}")))
            .collect();
        let table = run_ablation(&ds, &pools, &self.config.downstream.recognizer, &seeds)?;
        let out = opts.out.clone().unwrap_or_else(|| self.output_dir("downstream"));
        reset_dir(&out)?;
        write_json(&out.join("ablation.json"), &table)?;
        let text = table.render();
        write_atomic(&out.join("ablation.txt"), text.as_bytes())?;
        let minority: serde_json::Map<String, serde_json::Value> = table
            .rows
            .iter()
            .map(|r| (r.name.clone(), serde_json::json!(table.minority_jaccard(&r.name))))
            .collect();
        let summary = serde_json::json!({ "minority_jaccard": minority });
        self.finish(Stage::Downstream, &out, start, summary)
    }

    pub fn run(&self, stage: Stage) -> Result<RunManifest> {
        match stage {
            Stage::MakeData => self.make_data(),
            Stage::TrainCodec => self.train_codec(),
            Stage::TrainStage1 => self.train_stage1(),
            Stage::TrainStage2 => self.train_stage2(),
            Stage::Generate => self.generate(&GenerateOptions::default()),
            Stage::Filter => self.filter(&FilterOptions::default()),
            Stage::EvalMetrics => self.eval_metrics(&MetricsOptions::default()),
            Stage::Downstream => self.downstream(&DownstreamOptions::default()),
        }
    }

    /// Run every stage in order, stopping at the first failure.
    pub fn full(&self) -> std::result::Result<Vec<RunManifest>, (Stage, Error)> {
        Stage::ALL
            .into_iter()
            .map(|s| self.run(s).map_err(|e| (s, e)))
            .collect()
    }

    pub fn ablation_table(&self) -> Result<String> {
        let p = self.output_dir("downstream").join("ablation.txt");
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
        read_json(&dir.join(RUN_MANIFEST))
    }
}

/// Pixel PCA fitted on the real clips' subset frames; one row per frame.
fn pca_features(real: &[Tensor], synth: &[Tensor], dim: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let frames = |clips: &[Tensor]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for c in clips {
            let f = c.dim(1)?;
            let data: Vec<f32> = c.permute((1, 0, 2, 3))?.contiguous()?.flatten_all()?.to_vec1()?;
            out.extend(subset_frames(&data, f)?);
        }
        Ok(out)
    };
    let rf = frames(real)?;
    let sf = frames(synth)?;
    let d = rf.first().map_or(0, Vec::len);
    let pca = PixelPca::fit(&rf, dim.min(d).min(rf.len().saturating_sub(1)).max(1))?;
    let project = |rows: &[Vec<f64>]| rows.iter().map(|r| pca.project(r)).collect::<Result<Vec<_>>>();
    debug_assert_eq!(rf.len() % FRAME_SUBSET.len(), 0);
    Ok((project(&rf)?, project(&sf)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_ids_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.id().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn stage_seeds_are_xor_of_hash() {
        let a = stage_seed(0, Stage::Generate);
        assert_eq!(stage_seed(5, Stage::Generate), a ^ 5);
        assert_ne!(a, stage_seed(0, Stage::Filter));
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        assert!(matches!(PipelineConfig::from_toml("seed = \"x\""), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        let mut cfg = PipelineConfig::default();
        cfg.dataset.counts = vec![10, 10, 10];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = PipelineConfig::default();
        cfg.stage2.train.clip_length = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_k_follows_task() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.rejection_k(), 2);
        cfg.dataset.task = TaskKind::Event;
        assert_eq!(cfg.rejection_k(), 1);
        cfg.filter.k = Some(3);
        assert_eq!(cfg.rejection_k(), 3);
    }

    #[test]
    fn relative_paths() {
        let r = relative_path(Path::new("/a/synth/clip_1"), Path::new("/a/filter")).unwrap();
        assert_eq!(r, PathBuf::from("../synth/clip_1"));
    }
}
