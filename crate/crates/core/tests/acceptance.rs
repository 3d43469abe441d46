//! Acceptance suite. Each `criterion_NN_*` test checks one criterion at its
//! stated tolerance and prints a `PASS` or `FAIL` line with the measured
//! values; run with `--nocapture` to see the lines.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use clipdiff::conditioning::{ConditioningContext, Vocabulary};
use clipdiff::dataset::{ToyDataset, ToyDatasetSpec, Video};
use clipdiff::denoiser::{
    is_temporal_param, DenoiseMode, Denoiser, DenoiserConfig, TemporalBlock, TemporalBlockConfig,
};
use clipdiff::diffusion::{make_schedule, training_loss, NoiseSchedule, Parameterization, ScheduleKind, ScheduleSpec};
use clipdiff::downstream::{balanced_accuracy_from_recalls, f1_from_counts, AblationTable, ConfusionMatrix};
use clipdiff::io::dir_digest;
use clipdiff::metrics::{density_coverage, frechet_distance, mmd, FeatureSet, Source, COV_EPS};
use clipdiff::nn::{scalar_f64, to_vec_f64, ParamStore};
use clipdiff::pipeline::{Pipeline, PipelineConfig, Stage, RUN_MANIFEST};
use clipdiff::rejection::{filter, Candidate, RejectionPolicy};
use clipdiff::sampler::{sample_loop, SamplerKind};
use clipdiff::toy1d::{self, mode_stats, Toy1dConfig};
use clipdiff::trainer::{encode_videos, prepare_stage2, train_stage1, train_stage2, LatentVideo, TrainConfig, TrainSetup};
use clipdiff::codec::Codec;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(id: u32, name: &str, ok: bool, detail: &str, start: Instant) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!(
        "criterion {id:>2} {verdict} {name}: {detail} ({:.1}s)",
        start.elapsed().as_secs_f64()
    );
}

fn cpu_f64(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn linear_schedule() -> NoiseSchedule {
    make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap()
}

/// Small stage-1 setup on 8x8 identity latents.
struct Tiny {
    cfg: DenoiserConfig,
    vocab: Vocabulary,
    dataset: ToyDataset,
    latents: Vec<LatentVideo>,
    codec: Codec,
}

fn tiny() -> Tiny {
    let spec = ToyDatasetSpec {
        counts: vec![5, 5, 1],
        frames: 16,
        resolution: 8,
        ..ToyDatasetSpec::default()
    };
    let dataset = ToyDataset::generate(&spec).unwrap();
    let vocab = Vocabulary::for_registry(&dataset.registry, 64, 16).unwrap();
    let cfg = DenoiserConfig {
        latent_channels: 3,
        widths: vec![8, 16],
        text_dim: 8,
        num_classes: 3,
        max_groups: 4,
        ..DenoiserConfig::default()
    };
    let codec = Codec::identity(3);
    let videos: Vec<&Video> = dataset.videos.iter().collect();
    let latents = encode_videos(&codec, &videos, DType::F32).unwrap();
    Tiny {
        cfg,
        vocab,
        dataset,
        latents,
        codec,
    }
}

fn contexts(t: &Tiny, rng: &mut ChaCha8Rng, b: usize) -> Vec<ConditioningContext> {
    (0..b)
        .map(|_| {
            let l = rng.random_range(0..t.cfg.num_classes);
            ConditioningContext::new(&t.vocab, &t.dataset.registry.prompt_for(l).unwrap(), Some(l))
        })
        .collect()
}

#[test]
fn criterion_01_diffusion_algebra() {
    let start = Instant::now();
    let s = linear_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let z0 = [0.8, -1.5, 2.0];
    let mut worst_se = 0.0f64;
    for &t in &[1usize, 10, 250, 600, 1000] {
        let ab = s.alpha_bar(t);
        for &x0 in &z0 {
            let eps = normals(&mut rng, n);
            let zt = s
                .forward_diffuse_batch(&cpu_f64(vec![x0; n], &[n, 1]), &vec![t; n], &cpu_f64(eps, &[n, 1]))
                .unwrap();
            let (m, v) = mean_var(&to_vec_f64(&zt).unwrap());
            let var = 1.0 - ab;
            let se_mean = (var / n as f64).sqrt();
            let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
            worst_se = worst_se.max(((m - ab.sqrt() * x0) / se_mean).abs());
            worst_se = worst_se.max(((v - var) / se_var).abs());
        }
    }
    // Two-step composition: z_t1 then q(z_t2 | z_t1) has the z_t2 marginal.
    let (t1, t2) = (300usize, 700usize);
    let ratio = s.alpha_bar(t2) / s.alpha_bar(t1);
    for &x0 in &z0 {
        let e1 = normals(&mut rng, n);
        let e2 = normals(&mut rng, n);
        let z1 = s
            .forward_diffuse_batch(&cpu_f64(vec![x0; n], &[n, 1]), &vec![t1; n], &cpu_f64(e1, &[n, 1]))
            .unwrap();
        let z2: Vec<f64> = to_vec_f64(&z1)
            .unwrap()
            .iter()
            .zip(&e2)
            .map(|(z, e)| ratio.sqrt() * z + (1.0 - ratio).sqrt() * e)
            .collect();
        let (m, v) = mean_var(&z2);
        let var = 1.0 - s.alpha_bar(t2);
        worst_se = worst_se.max(((m - s.alpha_bar(t2).sqrt() * x0) / (var / n as f64).sqrt()).abs());
        worst_se = worst_se.max(((v - var) / (var * (2.0 / (n as f64 - 1.0)).sqrt())).abs());
    }

    let mut worst_v = 0.0f64;
    let d = 8;
    for t in 1..=1000 {
        let z = normals(&mut rng, d);
        let e = normals(&mut rng, d);
        let (zt, et) = (cpu_f64(z.clone(), &[1, d]), cpu_f64(e.clone(), &[1, d]));
        let x = s.forward_diffuse_batch(&zt, &[t], &et).unwrap();
        let v = s.make_target_batch(&zt, &et, &[t], Parameterization::Velocity).unwrap().target;
        let (zh, eh) = s.split_prediction(&x, &[t], &v, Parameterization::Velocity).unwrap();
        for (a, b) in to_vec_f64(&zh).unwrap().iter().zip(&z) {
            worst_v = worst_v.max((a - b).abs());
        }
        for (a, b) in to_vec_f64(&eh).unwrap().iter().zip(&e) {
            worst_v = worst_v.max((a - b).abs());
        }
    }

    let mut worst_loss = 0.0f64;
    for trial in 0..20 {
        let shape = [2, 3, 4, 1 + trial % 3];
        let len: usize = shape.iter().product();
        let (z, e, p) = (normals(&mut rng, len), normals(&mut rng, len), normals(&mut rng, len));
        let ts = [rng.random_range(1..=1000), rng.random_range(1..=1000)];
        let param = if trial % 2 == 0 { Parameterization::Velocity } else { Parameterization::Epsilon };
        let target = s
            .make_target_batch(&cpu_f64(z.clone(), &shape), &cpu_f64(e.clone(), &shape), &ts, param)
            .unwrap();
        let got = scalar_f64(&training_loss(&cpu_f64(p.clone(), &shape), &target).unwrap()).unwrap();
        let per = len / 2;
        let mut sum = 0.0;
        for i in 0..len {
            let ab = s.alpha_bar(ts[i / per]);
            let want = match param {
                Parameterization::Epsilon => e[i],
                Parameterization::Velocity => ab.sqrt() * e[i] - (1.0 - ab).sqrt() * z[i],
            };
            sum += (p[i] - want) * (p[i] - want);
        }
        worst_loss = worst_loss.max((got - sum / len as f64).abs());
    }
    let ok = worst_se <= 3.0 && worst_v <= 1e-6 && worst_loss <= 1e-10;
    report(
        1,
        "diffusion algebra",
        ok,
        &format!("max |moment error|/SE {worst_se:.2}, v round trip {worst_v:.2e}, loss {worst_loss:.2e}"),
        start,
    );
    assert!(ok);
}

#[test]
fn criterion_02_bootstrap_identity() {
    let start = Instant::now();
    let t = tiny();
    let setup = TrainSetup {
        config: &t.cfg,
        schedule: ScheduleSpec::default(),
        codec: &t.codec,
        registry: &t.dataset.registry,
        vocab: &t.vocab,
    };
    let train = TrainConfig {
        batch_size: 2,
        learning_rate: 1e-3,
        steps: 3,
        ..TrainConfig::default()
    };
    let (mut s1, _) = train_stage1(&setup, &t.latents, &train, DType::F64).unwrap();
    let base = s1.model().unwrap();
    let (st, _, _) = prepare_stage2(&s1, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for probe in 0..20 {
        let b = 1 + probe % 2;
        let f = [16, 8, 3][probe % 3];
        let shape = [b, 3, f, 8, 8];
        let z = cpu_f64(normals(&mut rng, shape.iter().product()), &shape);
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=1000)).collect();
        let ctx = contexts(&t, &mut rng, b);
        let a = base.forward(&z, &ts, &ctx, DenoiseMode::SpatialOnly).unwrap();
        let c = st.forward(&z, &ts, &ctx, DenoiseMode::Spatiotemporal).unwrap();
        for (x, y) in to_vec_f64(&a).unwrap().iter().zip(to_vec_f64(&c).unwrap()) {
            worst = worst.max((x - y).abs());
        }
    }
    let ok = worst <= 1e-6;
    report(2, "bootstrap identity", ok, &format!("max abs diff {worst:.2e} over 20 probes"), start);
    assert!(ok);
}

#[test]
fn criterion_03_freeze_integrity() {
    let start = Instant::now();
    let t = tiny();
    let setup = TrainSetup {
        config: &t.cfg,
        schedule: ScheduleSpec::default(),
        codec: &t.codec,
        registry: &t.dataset.registry,
        vocab: &t.vocab,
    };
    let cfg = |steps| TrainConfig {
        batch_size: 2,
        learning_rate: 1e-3,
        steps,
        ..TrainConfig::default()
    };
    let (s1, _) = train_stage1(&setup, &t.latents, &cfg(5), DType::F32).unwrap();
    let (s2, _) = train_stage2(&s1, &t.latents, Some(2), &cfg(100)).unwrap();
    let mut changed = Vec::new();
    for name in s1.store.names() {
        let same = s1.store.values_f64(name).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            == s2.store.values_f64(name).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if !same || !s2.store.is_frozen(name) {
            changed.push(name.to_string());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = s2.save(dir.path()).unwrap();
    let trainable = s2.store.trainable_names();
    let freeze = s2.meta.freeze.clone().unwrap();
    let census_ok = !trainable.is_empty()
        && trainable.iter().all(|n| is_temporal_param(n))
        && manifest.trainable_names() == trainable.iter().map(String::as_str).collect::<Vec<_>>()
        && manifest.trainable_count() == s2.store.trainable_count()
        && freeze.trainable == trainable
        && freeze.trainable_count == s2.store.trainable_count();
    let moved = trainable
        .iter()
        .filter(|n| s2.store.values_f64(n).unwrap().iter().any(|v| *v != 0.0))
        .count();
    let ok = changed.is_empty() && census_ok && moved > 0;
    report(
        3,
        "freeze integrity",
        ok,
        &format!(
            "{} frozen tensors unchanged ({} violations), {} trainable tensors / {} values match the manifest",
            s1.store.len(),
            changed.len(),
            trainable.len(),
            manifest.trainable_count()
        ),
        start,
    );
    assert!(ok, "changed: {changed:?}");
}

fn block(store: &mut ParamStore, heads: usize, pe: bool, c: usize, seed: u64) -> TemporalBlock {
    TemporalBlock::new(
        store,
        &mut ChaCha8Rng::seed_from_u64(seed),
        "blk",
        TemporalBlockConfig {
            channels: c,
            heads,
            mlp_ratio: 2,
            max_frames: 16,
            positional_encoding: pe,
        },
    )
    .unwrap()
}

#[test]
fn criterion_04_attention() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = 8;
    let mut worst_row = 0.0f64;
    for heads in [1, 2] {
        for f in [1, 2, 7, 16] {
            let mut store = ParamStore::new(DType::F64);
            let b = block(&mut store, heads, true, c, 10 + f as u64);
            let x = cpu_f64(normals(&mut rng, 3 * f * c), &[3, f, c]);
            let w = to_vec_f64(&b.attention_weights(&x).unwrap()).unwrap();
            for row in w.chunks(f) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }

    // f = 2 with one head, computed by hand from the stored weights.
    let mut store = ParamStore::new(DType::F64);
    let b = block(&mut store, 1, true, c, 5);
    let x = normals(&mut rng, 2 * c);
    let got = to_vec_f64(&b.attend(&cpu_f64(x.clone(), &[1, 2, c])).unwrap()).unwrap();
    let wq = store.values_f64("blk.w_q.weight").unwrap();
    let wk = store.values_f64("blk.w_k.weight").unwrap();
    let wv = store.values_f64("blk.w_v.weight").unwrap();
    let pe = |p: usize, j: usize| {
        let angle = p as f64 / 10000f64.powf((j / 2 * 2) as f64 / c as f64);
        if j % 2 == 0 { angle.sin() } else { angle.cos() }
    };
    let h: Vec<Vec<f64>> = (0..2).map(|p| (0..c).map(|j| x[p * c + j] + pe(p, j)).collect()).collect();
    let proj = |w: &[f64], v: &[f64]| -> Vec<f64> { (0..c).map(|o| (0..c).map(|i| w[o * c + i] * v[i]).sum()).collect() };
    let q: Vec<Vec<f64>> = h.iter().map(|v| proj(&wq, v)).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|v| proj(&wk, v)).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|v| proj(&wv, v)).collect();
    let mut worst_hand = 0.0f64;
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let m = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z = e[0] + e[1];
        for ch in 0..c {
            let want = (e[0] * v[0][ch] + e[1] * v[1][ch]) / z;
            worst_hand = worst_hand.max((got[i * c + ch] - want).abs());
        }
    }

    // Permutation equivariance of the attention output.
    let f = 6;
    let perm = [3usize, 0, 5, 1, 4, 2];
    let x = normals(&mut rng, f * c);
    let xp: Vec<f64> = perm.iter().flat_map(|&p| x[p * c..(p + 1) * c].to_vec()).collect();
    let equivariance_gap = |pe: bool| -> f64 {
        let mut store = ParamStore::new(DType::F64);
        let b = block(&mut store, 2, pe, c, 6);
        let y = to_vec_f64(&b.attend(&cpu_f64(x.clone(), &[1, f, c])).unwrap()).unwrap();
        let yp = to_vec_f64(&b.attend(&cpu_f64(xp.clone(), &[1, f, c])).unwrap()).unwrap();
        let mut gap = 0.0f64;
        for (i, &p) in perm.iter().enumerate() {
            for ch in 0..c {
                gap = gap.max((yp[i * c + ch] - y[p * c + ch]).abs());
            }
        }
        gap
    };
    let (gap_plain, gap_pe) = (equivariance_gap(false), equivariance_gap(true));
    let ok = worst_row <= 1e-6 && worst_hand <= 1e-8 && gap_plain <= 1e-10 && gap_pe > 1e-3;
    report(
        4,
        "attention",
        ok,
        &format!(
            "row sum error {worst_row:.2e}, f=2 oracle {worst_hand:.2e}, permutation gap {gap_plain:.2e} without PE / {gap_pe:.2e} with PE"
        ),
        start,
    );
    assert!(ok);
}

#[test]
fn criterion_05_gradient_check() {
    let start = Instant::now();
    let t = tiny();
    let mut store = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Denoiser::spatiotemporal(&mut store, &mut rng, &t.cfg, t.vocab.clone()).unwrap();
    // Replace zero-initialized tensors so every path carries gradient.
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        let vals = store.values_f64(n).unwrap();
        if vals.iter().all(|v| *v == 0.0) {
            let shape = store.var(n).unwrap().dims().to_vec();
            let noise: Vec<f64> = normals(&mut rng, vals.len()).iter().map(|v| 0.1 * v).collect();
            store.assign(n, &cpu_f64(noise, &shape)).unwrap();
        }
    }
    let sched = linear_schedule();
    let shape = [2, 3, 4, 8, 8];
    let len: usize = shape.iter().product();
    let z0 = cpu_f64(normals(&mut rng, len), &shape);
    let eps = cpu_f64(normals(&mut rng, len), &shape);
    let ts = [137usize, 702];
    let ctx = contexts(&t, &mut rng, 2);
    let zt = sched.forward_diffuse_batch(&z0, &ts, &eps).unwrap();
    let target = sched.make_target_batch(&z0, &eps, &ts, Parameterization::Velocity).unwrap();
    let loss = || training_loss(&model.forward(&zt, &ts, &ctx, DenoiseMode::Spatiotemporal).unwrap(), &target).unwrap();
    let grads = loss().backward().unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let name = &names[rng.random_range(0..names.len())];
        let var = store.var(name).unwrap();
        let shape = var.dims().to_vec();
        let mut vals = store.values_f64(name).unwrap();
        let i = rng.random_range(0..vals.len());
        let analytic = to_vec_f64(grads.get(var.as_tensor()).unwrap()).unwrap()[i];
        let orig = vals[i];
        vals[i] = orig + h;
        store.assign(name, &cpu_f64(vals.clone(), &shape)).unwrap();
        let up = scalar_f64(&loss()).unwrap();
        vals[i] = orig - h;
        store.assign(name, &cpu_f64(vals.clone(), &shape)).unwrap();
        let down = scalar_f64(&loss()).unwrap();
        vals[i] = orig;
        store.assign(name, &cpu_f64(vals, &shape)).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let ok = worst <= 1e-3;
    report(5, "gradient check", ok, &format!("max relative error {worst:.2e} over 50 parameters"), start);
    assert!(ok);
}

#[test]
fn criterion_06_sampler() {
    let start = Instant::now();
    let s = linear_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z0 = cpu_f64(normals(&mut rng, 12), &[3, 4]);
    let mut worst = 0.0f64;
    for param in [Parameterization::Velocity, Parameterization::Epsilon] {
        for steps in [10, 50, 1000] {
            let start_z = cpu_f64(normals(&mut rng, 12), &[3, 4]);
            let oracle = |z: &Tensor, t: usize| -> clipdiff::Result<Tensor> {
                let ab = s.alpha_bar(t);
                let eps = ((z - (&z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
                Ok(match param {
                    Parameterization::Epsilon => eps,
                    Parameterization::Velocity => ((eps * ab.sqrt())? - (&z0 * (1.0 - ab).sqrt())?)?,
                })
            };
            let out = sample_loop(start_z, &s, steps, SamplerKind::Ddim, param, oracle, || unreachable!()).unwrap();
            for (a, b) in to_vec_f64(&out).unwrap().iter().zip(to_vec_f64(&z0).unwrap()) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    let cfg = Toy1dConfig::default();
    let (model, _, _) = toy1d::train(&cfg, &s).unwrap();
    let samples = toy1d::sample(&model, &s, cfg.parameterization, 4000, 100, SamplerKind::Ddim, 61).unwrap();
    let stats = mode_stats(&samples, &cfg.modes);
    let mean_err = (0..2)
        .map(|m| ((stats.mean[m] - cfg.modes.means[m]) / cfg.modes.means[m]).abs())
        .fold(0.0f64, f64::max);
    let mut finite = true;
    for seed in 0..100 {
        for kind in [SamplerKind::Ddim, SamplerKind::Ancestral] {
            let x = toy1d::sample(&model, &s, cfg.parameterization, 8, 20, kind, seed).unwrap();
            finite &= x.iter().all(|v| v.is_finite());
        }
    }
    let ok = worst <= 1e-4 && mean_err <= 0.10 && finite;
    report(
        6,
        "sampler",
        ok,
        &format!(
            "oracle DDIM error {worst:.2e}; two-mode means {:.3} / {:.3} (max rel error {:.1}%), weights {:.2} / {:.2}; 100-seed sweep finite: {finite}",
            stats.mean[0],
            stats.mean[1],
            100.0 * mean_err,
            stats.weight[0],
            stats.weight[1]
        ),
        start,
    );
    assert!(ok);
}

#[test]
fn criterion_07_rejection() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0usize;
    let mut monotone_violations = 0usize;
    for _ in 0..1000 {
        let classes = rng.random_range(2..=6);
        let n = rng.random_range(1..=24);
        let levels = rng.random_range(1..=4);
        let cands: Vec<Candidate> = (0..n)
            .map(|i| {
                let scores = (0..classes).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
                (format!("clip{i}"), rng.random_range(0..classes), scores)
            })
            .collect();
        let mut prev: Option<Vec<bool>> = None;
        for k in 1..=classes {
            let out = filter(&cands, &RejectionPolicy::new(k, classes, "oracle").unwrap()).unwrap();
            let got: Vec<bool> = cands
                .iter()
                .map(|(c, _, _)| out.accepted.iter().any(|s| &s.clip == c))
                .collect();
            for (i, (_, label, scores)) in cands.iter().enumerate() {
                let mut order: Vec<usize> = (0..classes).collect();
                order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
                if order[..k].contains(label) != got[i] {
                    mismatches += 1;
                }
            }
            if let Some(p) = &prev {
                monotone_violations += p.iter().zip(&got).filter(|(a, b)| **a && !**b).count();
            }
            prev = Some(got);
        }
    }
    let ok = mismatches == 0 && monotone_violations == 0;
    report(
        7,
        "rejection sampling",
        ok,
        &format!("{mismatches} verdict mismatches, {monotone_violations} monotonicity violations over 1000 matrices"),
        start,
    );
    assert!(ok);
}

fn naive_mean_cov(x: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let s: f64 = x.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum();
            cov[(a, b)] = s / (n as f64 - 1.0) + if a == b { COV_EPS } else { 0.0 };
        }
    }
    (mean, cov)
}

/// Trace of the square root of `A B` through the Cholesky factor of `A`:
/// `L^T B L` is similar to `A B` and symmetric.
fn oracle_frechet(r: &[Vec<f64>], s: &[Vec<f64>]) -> f64 {
    let (mr, cr) = naive_mean_cov(r);
    let (ms, cs) = naive_mean_cov(s);
    let l = cr.clone().cholesky().unwrap().l();
    let m = l.transpose() * &cs * &l;
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let tr: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff: f64 = mr.iter().zip(&ms).map(|(a, b)| (a - b) * (a - b)).sum();
    (diff + cr.trace() + cs.trace() - 2.0 * tr).max(0.0)
}

fn oracle_mmd(x: &[Vec<f64>], y: &[Vec<f64>], bw: f64) -> f64 {
    let kernel_mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                let mut d2 = 0.0;
                for j in 0..p.len() {
                    d2 += (p[j] - q[j]) * (p[j] - q[j]);
                }
                s += (-d2 / (2.0 * bw * bw)).exp();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    kernel_mean(x, x) + kernel_mean(y, y) - 2.0 * kernel_mean(x, y)
}

fn oracle_density_coverage(real: &[Vec<f64>], synth: &[Vec<f64>], k: usize) -> (f64, f64) {
    let d = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let radius: Vec<f64> = (0..real.len())
        .map(|i| {
            let mut ds: Vec<f64> = (0..real.len()).filter(|&j| j != i).map(|j| d(&real[i], &real[j])).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds[k - 1]
        })
        .collect();
    let mut members = 0usize;
    for y in synth {
        for (i, x) in real.iter().enumerate() {
            if d(y, x) <= radius[i] {
                members += 1;
            }
        }
    }
    let covered = (0..real.len())
        .filter(|&i| synth.iter().any(|y| d(y, &real[i]) <= radius[i]))
        .count();
    (
        members as f64 / (k * synth.len()) as f64,
        covered as f64 / real.len() as f64,
    )
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64, grid: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if grid {
                        // Coarse grid makes distance ties and boundary hits common.
                        rng.random_range(-3i32..=3) as f64 + shift
                    } else {
                        rng.sample::<f64, _>(StandardNormal) + shift
                    }
                })
                .collect()
        })
        .collect()
}

fn fset(rows: &[Vec<f64>]) -> FeatureSet {
    FeatureSet::new(rows.to_vec(), "oracle", Source::Real).unwrap()
}

#[test]
fn criterion_08_metrics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fd_err = 0.0f64;
    let mut mmd_err = 0.0f64;
    let mut mmd_self = 0.0f64;
    let mut dc_mismatch = 0usize;
    let mut cov_identical = true;
    for trial in 0..50 {
        let d = 1 + trial % 5;
        let nr = rng.random_range(3..15);
        let ns = rng.random_range(2..15);
        let grid = trial % 2 == 0;
        let real = random_rows(&mut rng, nr, d, 0.0, grid);
        let synth = random_rows(&mut rng, ns, d, 0.5 * (trial % 3) as f64, grid);
        let (fr, fs) = (fset(&real), fset(&synth));

        fd_err = fd_err.max((frechet_distance(&fr, &fs).unwrap() - oracle_frechet(&real, &synth)).abs());
        let bw = rng.random_range(0.3..3.0);
        mmd_err = mmd_err.max((mmd(&fr, &fs, bw).unwrap() - oracle_mmd(&real, &synth, bw).max(0.0)).abs());
        mmd_self = mmd_self.max(mmd(&fr, &fr, bw).unwrap());
        for k in 1..nr.min(4) {
            if density_coverage(&fr, &fs, k).unwrap() != oracle_density_coverage(&real, &synth, k) {
                dc_mismatch += 1;
            }
        }
        cov_identical &= density_coverage(&fr, &fr, 1).unwrap().1 == 1.0;
    }
    let ok = fd_err <= 1e-8 && mmd_err <= 1e-10 && mmd_self == 0.0 && dc_mismatch == 0 && cov_identical;
    report(
        8,
        "metric oracles",
        ok,
        &format!(
            "FD error {fd_err:.2e}, MMD error {mmd_err:.2e}, MMD on identical sets {mmd_self:.1e}, D/C mismatches {dc_mismatch}, coverage on identical sets = 1: {cov_identical}"
        ),
        start,
    );
    assert!(ok);
}

#[test]
fn criterion_09_downstream_formulas() {
    let start = Instant::now();
    let cm = ConfusionMatrix::new(vec![vec![8, 2], vec![1, 9]]).unwrap();
    let j = cm.jaccard();
    let jaccard_ok = j == vec![Some(8.0 / 11.0), Some(9.0 / 12.0)];
    let ba_ok = balanced_accuracy_from_recalls(&[1.0, 0.5]) == 0.75 && cm.balanced_accuracy() == (0.8 + 0.9) / 2.0;
    let f1_ok = f1_from_counts(7, 3, 1) == 14.0 / 18.0;
    let ok = jaccard_ok && ba_ok && f1_ok;
    report(
        9,
        "downstream formulas",
        ok,
        &format!(
            "Jaccard {j:?}, balanced accuracy {}, F1 {}",
            balanced_accuracy_from_recalls(&[1.0, 0.5]),
            f1_from_counts(7, 3, 1)
        ),
        start,
    );
    assert!(ok);
}

/// Toy-scale configuration for the directional experiment.
const E2E_CONFIG: &str = r#"
seed = 0
[dataset]
classes = ["orbit", "sweep", "zigzag"]
counts = [40, 40, 8]
frames = 24
resolution = 16
[codec]
steps = 400
[stage1]
learning_rate = 0.001
steps = 1000
[stage2]
learning_rate = 0.001
steps = 1000
[generate]
num_candidates = 32
steps = 50
[filter]
k = 1
[downstream]
seeds = 3
oracle_clips_per_class = 16
"#;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_10_end_to_end_direction() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_toml(E2E_CONFIG).unwrap();
    let p = Pipeline::new(cfg, dir.path()).unwrap();
    if let Err((stage, e)) = p.full() {
        panic!("stage {} failed: {e}", stage.id());
    }
    println!("{}", p.ablation_table().unwrap());
    let table: AblationTable =
        clipdiff::io::read_json(&p.output_dir("downstream").join("ablation.json")).unwrap();
    let get = |name: &str| table.minority_jaccard(name).unwrap();
    let (real, with_rs, without_rs, oracle) = (get("real_only"), get("with_rs"), get("without_rs"), get("oracle"));
    let wins = |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x > y).count();
    let vs_real = wins(&with_rs, &real);
    let vs_norm = wins(&with_rs, &without_rs);
    let ok = mean(&with_rs) >= mean(&real)
        && mean(&with_rs) >= mean(&without_rs)
        && vs_real >= 2
        && vs_norm >= 2
        && mean(&oracle) > mean(&real);
    report(
        10,
        "end-to-end direction",
        ok,
        &format!(
            "minority Jaccard means: real_only {:.3}, with_rs {:.3}, without_rs {:.3}, oracle {:.3}; with_rs beats real_only in {vs_real}/3 seeds and without_rs in {vs_norm}/3",
            mean(&real),
            mean(&with_rs),
            mean(&without_rs),
            mean(&oracle)
        ),
        start,
    );
    assert!(ok);
}

/// Smallest configuration that exercises every stage.
const TINY_CONFIG: &str = r#"
seed = 11
[dataset]
counts = [6, 6, 1]
frames = 16
resolution = 8
[codec]
steps = 5
batch_size = 4
hidden = 4
[denoiser]
widths = [8, 16]
text_dim = 8
max_groups = 4
[schedule]
steps = 100
[stage1]
steps = 4
batch_size = 2
[stage2]
steps = 4
batch_size = 2
[generate]
num_candidates = 4
steps = 5
[filter]
k = 1
steps = 5
[metrics]
knn = 2
pca_dim = 4
[downstream]
seeds = 2
steps = 5
width = 4
oracle_clips_per_class = 2
"#;

fn stage_digests(root: &Path) -> Vec<(Stage, String)> {
    let cfg = PipelineConfig::from_toml(TINY_CONFIG).unwrap();
    let p = Pipeline::new(cfg, root).unwrap();
    let skip = |f: &Path| f.file_name().is_some_and(|n| n == RUN_MANIFEST);
    Stage::ALL
        .into_iter()
        .map(|s| {
            let m = p.run(s).unwrap();
            // The manifest's own digest covers the stage outputs; the tree
            // digest covers everything written so far.
            (s, format!("{} {}", m.artifact_digest, dir_digest(root, &skip).unwrap()))
        })
        .collect()
}

#[test]
fn criterion_11_determinism() {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = stage_digests(a.path());
    let db = stage_digests(b.path());
    let differing: Vec<&str> = da
        .iter()
        .zip(&db)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.id())
        .collect();
    let ok = differing.is_empty();
    report(
        11,
        "determinism",
        ok,
        &format!("{} stages re-run, differing: {differing:?}", da.len()),
        start,
    );
    assert!(ok);
}
