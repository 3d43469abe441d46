//! Downstream recognizers trained on real clips with or without added
//! synthetic minority clips, their per-class metrics, and the ablation table.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{window_starts, Split, ToyDataset, Video};
use crate::error::{invalid, Error, Result};
use crate::recognizer::{argmax, train_recognizer, Architecture, ClassifierTrainConfig, RecognizerConfig};
use crate::trainer::CLIP_LENGTH;

/// Rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<usize>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(invalid!("confusion matrix must be square and non-empty"));
        }
        Ok(Self { counts })
    }

    pub fn from_pairs(num_classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(invalid!("{} labels but {} predictions", truth.len(), pred.len()));
        }
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(invalid!("label out of range for {num_classes} classes"));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn tp(&self, c: usize) -> usize {
        self.counts[c][c]
    }

    pub fn fp(&self, c: usize) -> usize {
        (0..self.num_classes()).filter(|&r| r != c).map(|r| self.counts[r][c]).sum()
    }

    pub fn fn_(&self, c: usize) -> usize {
        (0..self.num_classes()).filter(|&p| p != c).map(|p| self.counts[c][p]).sum()
    }

    pub fn support(&self, c: usize) -> usize {
        self.counts[c].iter().sum()
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the denominator is zero.
    pub fn jaccard(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let den = self.tp(c) + self.fp(c) + self.fn_(c);
                (den > 0).then(|| self.tp(c) as f64 / den as f64)
            })
            .collect()
    }

    /// Per-class recall; `None` for classes without support.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let s = self.support(c);
                (s > 0).then(|| self.tp(c) as f64 / s as f64)
            })
            .collect()
    }

    pub fn balanced_accuracy(&self) -> f64 {
        mean_defined(&self.recalls()).unwrap_or(0.0)
    }

    /// One-vs-rest F1 of `positive`; 0 when it is neither present nor predicted.
    pub fn f1(&self, positive: usize) -> f64 {
        let tp = self.tp(positive);
        let den = 2 * tp + self.fp(positive) + self.fn_(positive);
        if den == 0 {
            0.0
        } else {
            2.0 * tp as f64 / den as f64
        }
    }
}

pub fn balanced_accuracy_from_recalls(recalls: &[f64]) -> f64 {
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class Jaccard averaged over videos. Each video contributes its own
/// confusion matrix over its clips; a class whose per-video denominator is
/// zero (absent and never predicted) is skipped for that video.
pub fn video_wise_jaccard(num_classes: usize, videos: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<Option<f64>>> {
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (truth, pred) in videos {
        let cm = ConfusionMatrix::from_pairs(num_classes, truth, pred)?;
        for (c, j) in cm.jaccard().into_iter().enumerate() {
            if let Some(j) = j {
                sums[c] += j;
                counts[c] += 1;
            }
        }
    }
    Ok((0..num_classes)
        .map(|c| (counts[c] > 0).then(|| sums[c] / counts[c] as f64))
        .collect())
}

/// Uniformly random predictions, the chance baseline.
pub fn random_guess(n: usize, num_classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..num_classes)).collect()
}

/// Nearest-centroid classifier over fixed-length feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestCentroid {
    pub centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn fit(num_classes: usize, samples: &[(Vec<f64>, usize)]) -> Result<Self> {
        let d = samples.first().ok_or_else(|| invalid!("no samples"))?.0.len();
        let mut sums = vec![vec![0.0; d]; num_classes];
        let mut n = vec![0usize; num_classes];
        for (x, y) in samples {
            if *y >= num_classes || x.len() != d {
                return Err(invalid!("bad sample for nearest centroid"));
            }
            n[*y] += 1;
            sums[*y].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        if n.contains(&0) {
            return Err(invalid!("every class needs a sample"));
        }
        for (s, &k) in sums.iter_mut().zip(&n) {
            s.iter_mut().for_each(|v| *v /= k as f64);
        }
        Ok(Self { centroids: sums })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let d: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        argmax(&d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    RealOnly,
    RealPlusSynth,
}

impl std::str::FromStr for Composition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real_only" => Ok(Self::RealOnly),
            "real_plus_synth" => Ok(Self::RealPlusSynth),
            other => Err(invalid!("unknown composition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognizerTask {
    /// Multi-class prediction per 16-frame clip, 3D CNN.
    Clip,
    /// One prediction per video from averaged window probabilities,
    /// per-frame CNN plus LSTM.
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub task: RecognizerTask,
    pub width: usize,
    /// LSTM state size for the video task.
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_stride: usize,
    pub eval_stride: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            task: RecognizerTask::Clip,
            width: 8,
            hidden: 16,
            steps: 300,
            batch_size: 16,
            learning_rate: 5e-3,
            train_stride: 4,
            eval_stride: 2,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.hidden == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("downstream sizes must be positive".into()));
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("window strides must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("downstream learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub tag: String,
    pub seed: u64,
    pub per_class_jaccard: Vec<Option<f64>>,
    pub average_jaccard: f64,
    pub balanced_accuracy: f64,
    /// One-vs-rest F1 of `positive_class`.
    pub f1: f64,
    pub positive_class: usize,
    pub confusion: ConfusionMatrix,
    pub synthetic_clips: usize,
    pub train_accuracy: f64,
}

/// 16-frame windows of the given videos.
pub fn video_windows(videos: &[&Video], stride: usize) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::new();
    for v in videos {
        for s in window_starts(v.frames, CLIP_LENGTH, stride) {
            out.push((v.clip_tensor(s, CLIP_LENGTH)?, v.label));
        }
    }
    Ok(out)
}

/// Train one recognizer on real training windows plus `synthetic` clips and
/// evaluate on the test split.
///
/// Synthetic clips may only carry under-represented labels.
pub fn train_and_evaluate(
    dataset: &ToyDataset,
    synthetic: &[(Tensor, usize)],
    cfg: &DownstreamConfig,
    seed: u64,
    tag: &str,
) -> Result<EvalResult> {
    cfg.validate()?;
    let k = dataset.spec.classes.len();
    let minority = dataset.spec.under_represented();
    for (clip, label) in synthetic {
        if !minority.contains(label) {
            return Err(invalid!("synthetic clip for class {label}, which is not under-represented"));
        }
        let dims = clip.dims();
        if dims.len() != 4 || dims[1] != CLIP_LENGTH {
            return Err(Error::Shape(format!("synthetic clip has shape {dims:?}")));
        }
    }
    let mut train = video_windows(&dataset.split(Split::Train), cfg.train_stride)?;
    if train.is_empty() {
        return Err(invalid!("videos shorter than {CLIP_LENGTH} frames"));
    }
    train.extend(synthetic.iter().cloned());
    let arch = match cfg.task {
        RecognizerTask::Clip => Architecture::Conv3d { width: cfg.width },
        RecognizerTask::Video => Architecture::FrameLstm {
            width: cfg.width,
            hidden: cfg.hidden,
        },
    };
    let rcfg = RecognizerConfig {
        arch,
        in_channels: train[0].0.dim(0)?,
        num_classes: k,
    };
    let tcfg = ClassifierTrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed,
    };
    let (model, _store, report) = train_recognizer(rcfg, &train, &tcfg, DType::F32)?;

    let mut per_video = Vec::new();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for v in dataset.split(Split::Test) {
        let windows = video_windows(&[v], cfg.eval_stride)?;
        let clips: Vec<Tensor> = windows.into_iter().map(|(t, _)| t).collect();
        let scores = model.score_clips(&clips, DType::F32, 32)?;
        let preds: Vec<usize> = match cfg.task {
            RecognizerTask::Clip => scores.iter().map(|s| argmax(s)).collect(),
            RecognizerTask::Video => {
                let mut mean = vec![0.0; k];
                for s in &scores {
                    mean.iter_mut().zip(s).for_each(|(m, x)| *m += x / scores.len() as f64);
                }
                vec![argmax(&mean)]
            }
        };
        truth.extend(std::iter::repeat_n(v.label, preds.len()));
        pred.extend(preds.iter().copied());
        per_video.push((vec![v.label; preds.len()], preds));
    }
    if per_video.is_empty() {
        return Err(invalid!("test split is empty"));
    }
    let confusion = ConfusionMatrix::from_pairs(k, &truth, &pred)?;
    let per_class_jaccard = video_wise_jaccard(k, &per_video)?;
    let positive = minority.first().copied().unwrap_or(k - 1);
    Ok(EvalResult {
        tag: tag.to_string(),
        seed,
        average_jaccard: mean_defined(&per_class_jaccard).unwrap_or(0.0),
        per_class_jaccard,
        balanced_accuracy: confusion.balanced_accuracy(),
        f1: confusion.f1(positive),
        positive_class: positive,
        confusion,
        synthetic_clips: synthetic.len(),
        train_accuracy: report.train_accuracy,
    })
}

/// One row of the ablation: a training composition evaluated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub results: Vec<EvalResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl AblationRow {
    /// Jaccard of `class` per seed, 0 when undefined.
    pub fn class_jaccard(&self, class: usize) -> Vec<f64> {
        self.results
            .iter()
            .map(|r| r.per_class_jaccard[class].unwrap_or(0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub class_names: Vec<String>,
    pub minority: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Mean Jaccard over the under-represented classes, per seed.
    pub fn minority_jaccard(&self, name: &str) -> Option<Vec<f64>> {
        let row = self.row(name)?;
        let per: Vec<Vec<f64>> = self.minority.iter().map(|&c| row.class_jaccard(c)).collect();
        Some(
            (0..self.seeds.len())
                .map(|s| per.iter().map(|v| v[s]).sum::<f64>() / per.len() as f64)
                .collect(),
        )
    }

    /// Plain-text table: one line per row and seed, then mean and std.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut header = format!("{:<16} {:>20} {:>7}", "composition", "seed", "synth");
        for n in &self.class_names {
            let _ = write!(header, " {:>10}", format!("J[{n}]"));
        }
        let _ = write!(header, " {:>8} {:>8} {:>8}", "avg_J", "bal_acc", "F1");
        out.push_str(&header);
        out.push('\n');
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for row in &self.rows {
            for r in &row.results {
                let mut line = format!("{:<16} {:>20} {:>7}", row.name, r.seed, r.synthetic_clips);
                for j in &r.per_class_jaccard {
                    let _ = write!(line, " {:>10}", fmt_opt(*j));
                }
                let _ = write!(line, " {:>8.4} {:>8.4} {:>8.4}", r.average_jaccard, r.balanced_accuracy, r.f1);
                out.push_str(&line);
                out.push('\n');
            }
            let mut line = format!("{:<16} {:>20} {:>7}", row.name, "mean", "");
            let mut sd = format!("{:<16} {:>20} {:>7}", row.name, "std", "");
            for c in 0..self.class_names.len() {
                let (m, s) = mean_std(&row.class_jaccard(c));
                let _ = write!(line, " {m:>10.4}");
                let _ = write!(sd, " {s:>10.4}");
            }
            for f in [
                |r: &EvalResult| r.average_jaccard,
                |r: &EvalResult| r.balanced_accuracy,
                |r: &EvalResult| r.f1,
            ] {
                let (m, s) = mean_std(&row.results.iter().map(f).collect::<Vec<_>>());
                let _ = write!(line, " {m:>8.4}");
                let _ = write!(sd, " {s:>8.4}");
            }
            out.push_str(&line);
            out.push('\n');
            out.push_str(&sd);
            out.push('\n');
        }
        out
    }
}

/// A named set of synthetic minority clips for one ablation row.
pub struct SyntheticPool {
    pub name: String,
    pub clips: Vec<(Tensor, usize)>,
}

/// Train and evaluate `real_only` plus one row per pool, with the same
/// recognizer seeds across rows so seeds are paired.
pub fn run_ablation(
    dataset: &ToyDataset,
    pools: &[SyntheticPool],
    cfg: &DownstreamConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(invalid!("ablation needs at least one seed"));
    }
    let mut rows = vec![AblationRow {
        name: "real_only".into(),
        results: seeds
            .iter()
            .map(|&s| train_and_evaluate(dataset, &[], cfg, s, "real_only"))
            .collect::<Result<_>>()?,
    }];
    for pool in pools {
        rows.push(AblationRow {
            name: pool.name.clone(),
            results: seeds
                .iter()
                .map(|&s| train_and_evaluate(dataset, &pool.clips, cfg, s, &pool.name))
                .collect::<Result<_>>()?,
        });
    }
    Ok(AblationTable {
        class_names: dataset.registry.classes().iter().map(|c| c.name.clone()).collect(),
        minority: dataset.spec.under_represented(),
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Held-out real minority clips standing in for a perfect generator.
pub fn oracle_pool(dataset: &ToyDataset, per_class: usize, stream: &str) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::new();
    for c in dataset.spec.under_represented() {
        let videos = dataset.render_extra(c, per_class, stream)?;
        for v in &videos {
            let starts = window_starts(v.frames, CLIP_LENGTH, 1);
            let start = starts[starts.len() / 2];
            out.push((v.clip_tensor(start, CLIP_LENGTH)?, c));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{displacement_stats, MotionClass, ToyDatasetSpec};

    #[test]
    fn jaccard_arithmetic() {
        let cm = ConfusionMatrix::new(vec![vec![8, 2], vec![1, 9]]).unwrap();
        assert_eq!(cm.jaccard(), vec![Some(8.0 / 11.0), Some(9.0 / 12.0)]);
        let perfect = ConfusionMatrix::from_pairs(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert!(perfect.jaccard().iter().all(|j| *j == Some(1.0)));
        let majority = ConfusionMatrix::from_pairs(2, &[0, 0, 1], &[0, 0, 0]).unwrap();
        assert_eq!(majority.jaccard()[1], Some(0.0));
    }

    #[test]
    fn balanced_accuracy_and_f1() {
        assert_eq!(balanced_accuracy_from_recalls(&[1.0, 0.5]), 0.75);
        let cm = ConfusionMatrix::new(vec![vec![2, 0], vec![1, 1]]).unwrap();
        assert_eq!(cm.balanced_accuracy(), 0.75);
        assert_eq!(f1_from_counts(7, 3, 1), 14.0 / 18.0);
        let cm = ConfusionMatrix::new(vec![vec![5, 3], vec![1, 7]]).unwrap();
        assert_eq!(cm.f1(1), 14.0 / 18.0);
    }

    #[test]
    fn video_wise_exclusion() {
        // Video of class 0 with no class-1 predictions: class 1 excluded.
        let j = video_wise_jaccard(2, &[(vec![0, 0], vec![0, 0])]).unwrap();
        assert_eq!(j, vec![Some(1.0), None]);
        // A false positive makes the absent class count as 0.
        let j = video_wise_jaccard(2, &[(vec![0, 0], vec![0, 1]), (vec![1, 1], vec![1, 1])]).unwrap();
        assert_eq!(j, vec![Some(0.5), Some(0.5)]);
    }

    #[test]
    fn random_guess_is_near_chance() {
        let truth: Vec<usize> = (0..400).map(|i| usize::from(i % 5 == 0)).collect();
        let mean: f64 = (0..5)
            .map(|s| {
                ConfusionMatrix::from_pairs(2, &truth, &random_guess(truth.len(), 2, s))
                    .unwrap()
                    .balanced_accuracy()
            })
            .sum::<f64>()
            / 5.0;
        assert!((0.35..=0.65).contains(&mean), "{mean}");
    }

    #[test]
    fn displacement_centroids_separate_classes() {
        let spec = ToyDatasetSpec {
            classes: vec![MotionClass::Orbit, MotionClass::Blink, MotionClass::Sweep],
            counts: vec![12, 12, 2],
            frames: 16,
            resolution: 16,
            ..ToyDatasetSpec::default()
        };
        let ds = ToyDataset::generate(&spec).unwrap();
        let sample = |split| -> Vec<(Vec<f64>, usize)> {
            ds.split(split)
                .into_iter()
                .filter(|v| v.label < 2)
                .map(|v| (displacement_stats(v).to_vec(), v.label))
                .collect()
        };
        let train = sample(Split::Train);
        let test = [sample(Split::Test), sample(Split::Val)].concat();
        let nc = NearestCentroid::fit(2, &train).unwrap();
        let acc = test.iter().filter(|(x, y)| nc.predict(x) == *y).count() as f64 / test.len() as f64;
        assert!(acc > 0.5, "{acc}");
    }

    fn tiny() -> ToyDataset {
        ToyDataset::generate(&ToyDatasetSpec {
            counts: vec![6, 6, 1],
            frames: 16,
            resolution: 8,
            ..ToyDatasetSpec::default()
        })
        .unwrap()
    }

    fn quick() -> DownstreamConfig {
        DownstreamConfig {
            width: 4,
            steps: 3,
            batch_size: 4,
            ..DownstreamConfig::default()
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let ds = tiny();
        let a = train_and_evaluate(&ds, &[], &quick(), 1, "real_only").unwrap();
        let b = train_and_evaluate(&ds, &[], &quick(), 1, "real_only").unwrap();
        assert_eq!(a, b);
        for v in a.per_class_jaccard.iter().flatten().chain([&a.balanced_accuracy, &a.f1]) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn synthetic_clips_limited_to_minority() {
        let ds = tiny();
        let clip = ds.videos[0].clip_tensor(0, CLIP_LENGTH).unwrap();
        assert!(train_and_evaluate(&ds, &[(clip.clone(), 0)], &quick(), 0, "x").is_err());
        let r = train_and_evaluate(&ds, &[(clip, 2)], &quick(), 0, "x").unwrap();
        assert_eq!(r.synthetic_clips, 1);
    }

    #[test]
    fn video_task_runs() {
        let ds = ToyDataset::generate(&ToyDatasetSpec {
            classes: vec![MotionClass::Sweep, MotionClass::Blink],
            counts: vec![6, 1],
            frames: 16,
            resolution: 8,
            ..ToyDatasetSpec::default()
        })
        .unwrap();
        let cfg = DownstreamConfig {
            task: RecognizerTask::Video,
            ..quick()
        };
        let r = train_and_evaluate(&ds, &[], &cfg, 0, "real_only").unwrap();
        let n_test = ds.split(Split::Test).len();
        assert_eq!(r.confusion.counts.iter().flatten().sum::<usize>(), n_test);
        assert_eq!(r.positive_class, 1);
    }

    #[test]
    fn ablation_rows_and_render() {
        let ds = tiny();
        let pool = SyntheticPool {
            name: "oracle".into(),
            clips: oracle_pool(&ds, 2, "t").unwrap(),
        };
        let t = run_ablation(&ds, &[pool], &quick(), &[0, 1]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.minority_jaccard("oracle").unwrap().len(), 2);
        let text = t.render();
        assert!(text.contains("real_only") && text.contains("mean") && text.contains("std"));
    }
}
