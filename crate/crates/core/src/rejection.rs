//! Top-k rejection of synthetic clips: a clip generated for label `l` is
//! kept only if a classifier trained on real clips ranks `l` among its `k`
//! best classes.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointKind, CheckpointManifest};
use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;
use crate::recognizer::{
    train_recognizer, Architecture, ClassifierReport, ClassifierTrainConfig, Recognizer, RecognizerConfig,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionPolicy {
    pub k: usize,
    pub num_classes: usize,
    /// Identifies the scoring classifier (for example its payload digest).
    pub classifier_id: String,
}

impl RejectionPolicy {
    pub fn new(k: usize, num_classes: usize, classifier_id: impl Into<String>) -> Result<Self> {
        if k == 0 || k > num_classes {
            return Err(invalid!("k must lie in 1..={num_classes}, got {k}"));
        }
        Ok(Self {
            k,
            num_classes,
            classifier_id: classifier_id.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub clip: String,
    pub label: usize,
    pub scores: Vec<f64>,
    /// 1-based rank of `label` under the tie-break.
    pub rank: usize,
    pub verdict: Verdict,
}

/// 1-based rank of `label`: one plus the number of classes that score
/// higher, or equal with a lower id.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < label))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub label: usize,
    pub generated: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub policy: RejectionPolicy,
    pub accepted: Vec<SyntheticSample>,
    pub rejected: Vec<SyntheticSample>,
    pub per_class: Vec<ClassCounts>,
}

/// Candidate clip: reference, target label, classifier scores.
pub type Candidate = (String, usize, Vec<f64>);

pub fn filter(candidates: &[Candidate], policy: &RejectionPolicy) -> Result<FilterOutcome> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut per_class: Vec<ClassCounts> = (0..policy.num_classes)
        .map(|label| ClassCounts {
            label,
            generated: 0,
            accepted: 0,
            rejected: 0,
        })
        .collect();
    for (clip, label, scores) in candidates {
        if *label >= policy.num_classes {
            return Err(invalid!("label {label} out of range for {} classes", policy.num_classes));
        }
        if scores.len() != policy.num_classes {
            return Err(invalid!(
                "clip {clip} has {} scores for {} classes",
                scores.len(),
                policy.num_classes
            ));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(invalid!("clip {clip} has non-finite scores"));
        }
        let rank = rank_of(scores, *label);
        let verdict = if rank <= policy.k {
            Verdict::Accepted
        } else {
            Verdict::Rejected
        };
        let sample = SyntheticSample {
            clip: clip.clone(),
            label: *label,
            scores: scores.clone(),
            rank,
            verdict,
        };
        let counts = &mut per_class[*label];
        counts.generated += 1;
        match verdict {
            Verdict::Accepted => {
                counts.accepted += 1;
                accepted.push(sample);
            }
            Verdict::Rejected => {
                counts.rejected += 1;
                rejected.push(sample);
            }
        }
    }
    Ok(FilterOutcome {
        policy: policy.clone(),
        accepted,
        rejected,
        per_class,
    })
}

/// Metadata stored with a classifier checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub config: RecognizerConfig,
    pub report: ClassifierReport,
    pub train: ClassifierTrainConfig,
}

/// The real-data filter classifier: a 4-layer 3D CNN.
pub fn train_filter_classifier(
    clips: &[(Tensor, usize)],
    num_classes: usize,
    width: usize,
    train: &ClassifierTrainConfig,
) -> Result<(Recognizer, ParamStore, ClassifierMeta)> {
    let channels = clips.first().ok_or_else(|| invalid!("no clips"))?.0.dim(0)?;
    let config = RecognizerConfig {
        arch: Architecture::Conv3d { width },
        in_channels: channels,
        num_classes,
    };
    let (model, store, report) = train_recognizer(config, clips, train, DType::F32)?;
    Ok((
        model,
        store,
        ClassifierMeta {
            config,
            report,
            train: train.clone(),
        },
    ))
}

pub fn save_classifier(dir: &Path, store: &ParamStore, meta: &ClassifierMeta) -> Result<CheckpointManifest> {
    checkpoint::save(dir, CheckpointKind::Classifier, store, meta.train.seed, meta)
}

pub fn load_classifier(dir: &Path) -> Result<(Recognizer, ParamStore, ClassifierMeta, CheckpointManifest)> {
    let (manifest, mut store) = checkpoint::load_kind(dir, CheckpointKind::Classifier)
        .map_err(|e| match e {
            Error::MissingArtifact(m) => Error::MissingArtifact(format!("filter classifier: {m}")),
            other => other,
        })?;
    let meta: ClassifierMeta = manifest.metadata_as()?;
    let model = Recognizer::new(&mut store, meta.config, 0)?;
    Ok((model, store, meta, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(rows: &[(usize, Vec<f64>)]) -> Vec<Candidate> {
        rows.iter()
            .enumerate()
            .map(|(i, (l, s))| (format!("c{i}"), *l, s.clone()))
            .collect()
    }

    #[test]
    fn rank_arithmetic() {
        let s = [0.5, 0.3, 0.2];
        assert_eq!(rank_of(&s, 1), 2);
        let c = cands(&[(1, s.to_vec())]);
        let k1 = filter(&c, &RejectionPolicy::new(1, 3, "x").unwrap()).unwrap();
        assert_eq!(k1.rejected.len(), 1);
        let k2 = filter(&c, &RejectionPolicy::new(2, 3, "x").unwrap()).unwrap();
        assert_eq!(k2.accepted.len(), 1);
        assert_eq!(k2.accepted[0].rank, 2);
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let s = [0.4, 0.4, 0.2];
        assert_eq!(rank_of(&s, 0), 1);
        assert_eq!(rank_of(&s, 1), 2);
    }

    #[test]
    fn k_equal_to_class_count_accepts_all() {
        let c = cands(&[(0, vec![0.0, 1.0, 0.0]), (2, vec![0.9, 0.1, 0.0])]);
        let out = filter(&c, &RejectionPolicy::new(3, 3, "x").unwrap()).unwrap();
        assert_eq!(out.accepted.len(), 2);
        assert_eq!(out.per_class[2].generated, 1);
    }

    #[test]
    fn policy_and_input_errors() {
        assert!(RejectionPolicy::new(0, 3, "x").is_err());
        assert!(RejectionPolicy::new(4, 3, "x").is_err());
        let p = RejectionPolicy::new(1, 3, "x").unwrap();
        assert!(filter(&cands(&[(3, vec![0.2, 0.3, 0.5])]), &p).is_err());
        assert!(filter(&cands(&[(0, vec![0.5, 0.5])]), &p).is_err());
    }
}
