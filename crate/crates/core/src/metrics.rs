//! Distribution metrics over feature embeddings: Fréchet distance, biased
//! Gaussian-kernel MMD², and k-NN density/coverage, plus the feature
//! extractors they run on.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

/// An n x d matrix of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub extractor: String,
    pub source: Source,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, extractor: impl Into<String>, source: Source) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.len();
            if rows.iter().any(|r| r.len() != d) {
                return Err(Error::Shape("feature rows have different lengths".into()));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid!("feature set contains non-finite values"));
            }
        }
        Ok(Self {
            rows,
            extractor: extractor.into(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.rows[i][j])
    }
}

fn check_pair(a: &FeatureSet, b: &FeatureSet, min: usize) -> Result<()> {
    if a.len() < min || b.len() < min {
        return Err(invalid!("need at least {min} rows per set, got {} and {}", a.len(), b.len()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean and (n - 1)-normalized covariance.
pub fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Covariance regularizer added to both sets.
pub const COV_EPS: f64 = 1e-6;

/// `|mu_r - mu_s|^2 + Tr(S_r + S_s - 2 (S_r S_s)^{1/2})`.
///
/// The trace of the product square root is computed as the trace of the
/// symmetric matrix `(S_r^{1/2} S_s S_r^{1/2})^{1/2}`, which has the same
/// eigenvalues. Results within rounding of zero are clamped to 0.
pub fn frechet_distance(real: &FeatureSet, synth: &FeatureSet) -> Result<f64> {
    check_pair(real, synth, 2)?;
    let d = real.dim();
    let reg = DMatrix::<f64>::identity(d, d) * COV_EPS;
    let (mr, cr) = mean_cov(&real.matrix());
    let (ms, cs) = mean_cov(&synth.matrix());
    let (cr, cs) = (cr + &reg, cs + &reg);
    let root_r = psd_sqrt(&cr);
    let inner = &root_r * &cs * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged(format!(
            "matrix square root failed even with a {COV_EPS} covariance regularizer"
        )));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &mr - &ms;
    let value = diff.dot(&diff) + cr.trace() + cs.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Median of the pooled pairwise Euclidean distances.
pub fn median_bandwidth(real: &FeatureSet, synth: &FeatureSet) -> f64 {
    let pooled: Vec<&Vec<f64>> = real.rows.iter().chain(&synth.rows).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    let med = if d.len() % 2 == 1 { d[m] } else { 0.5 * (d[m - 1] + d[m]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Biased MMD² with `k(x, y) = exp(-|x - y|^2 / (2 bandwidth^2))`.
pub fn mmd(real: &FeatureSet, synth: &FeatureSet, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(invalid!("bandwidth must be positive, got {bandwidth}"));
    }
    check_pair(real, synth, 1)?;
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp();
    let mean_kernel = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in xs {
            for y in ys {
                s += k(x, y);
            }
        }
        s / (xs.len() * ys.len()) as f64
    };
    let v = mean_kernel(&real.rows, &real.rows) + mean_kernel(&synth.rows, &synth.rows)
        - 2.0 * mean_kernel(&real.rows, &synth.rows);
    Ok(v.max(0.0))
}

/// Density and coverage with k-NN balls around real points.
///
/// The radius of real point `i` is the distance to its `k`-th nearest other
/// real point; a synthetic point on the boundary counts as inside.
pub fn density_coverage(real: &FeatureSet, synth: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    check_pair(real, synth, 2)?;
    if k == 0 || k >= real.len() {
        return Err(invalid!("k_nn must lie in 1..{}, got {k}", real.len()));
    }
    let radii: Vec<f64> = real
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut d: Vec<f64> = real
                .rows
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| dist(r, o))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut inside = 0usize;
    let mut covered = vec![false; real.len()];
    for g in &synth.rows {
        for (i, r) in real.rows.iter().enumerate() {
            if dist(g, r) <= radii[i] {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    let density = inside as f64 / (k * synth.len()) as f64;
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / real.len() as f64;
    Ok((density, coverage))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cfid: f64,
    pub cmmd: f64,
    pub density: f64,
    pub coverage: f64,
    pub k_nn: usize,
    pub bandwidth: f64,
    pub extractor: String,
    pub n_real: usize,
    pub n_synth: usize,
}

pub fn evaluate(real: &FeatureSet, synth: &FeatureSet, k_nn: usize, bandwidth: Option<f64>) -> Result<MetricReport> {
    let bandwidth = bandwidth.unwrap_or_else(|| median_bandwidth(real, synth));
    let (density, coverage) = density_coverage(real, synth, k_nn)?;
    let report = MetricReport {
        cfid: frechet_distance(real, synth)?,
        cmmd: mmd(real, synth, bandwidth)?,
        density,
        coverage,
        k_nn,
        bandwidth,
        extractor: real.extractor.clone(),
        n_real: real.len(),
        n_synth: synth.len(),
    };
    if ![report.cfid, report.cmmd, report.density, report.coverage]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::Diverged("metric report contains non-finite values".into()));
    }
    Ok(report)
}

/// Table-style rendering of several labelled reports.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = format!(
        "{:<24} {:>10} {:>9} {:>9} {:>10}\n",
        "method", "CFID", "Density", "Coverage", "CMMD"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<24} {:>10.4} {:>9.4} {:>9.4} {:>10.6}\n",
            name, r.cfid, r.density, r.coverage, r.cmmd
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Projection of raw frames onto principal components of real frames.
    PixelPca,
    /// Penultimate features of the filter classifier, one row per clip.
    Classifier,
}

impl FromStr for ExtractorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_pca" | "pixel-pca" => Ok(Self::PixelPca),
            "classifier" => Ok(Self::Classifier),
            other => Err(invalid!("unknown extractor {other:?}")),
        }
    }
}

/// Frames taken from each clip by frame-level extractors.
pub const FRAME_SUBSET: [usize; 4] = [0, 5, 10, 15];

/// Pixel-space PCA fitted on real frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelPca {
    pub mean: Vec<f64>,
    /// `dim` components, each of the frame length.
    pub components: Vec<Vec<f64>>,
}

impl PixelPca {
    /// Fit on flattened frames via an SVD of the centered data, which stays
    /// well defined when some pixels never vary. Component signs are fixed
    /// so that each component's largest-magnitude entry is positive.
    pub fn fit(frames: &[Vec<f64>], dim: usize) -> Result<Self> {
        if frames.len() < 2 {
            return Err(invalid!("PCA needs at least two frames"));
        }
        let d = frames[0].len();
        if dim == 0 || dim > d.min(frames.len()) {
            return Err(invalid!("PCA dimension {dim} outside 1..={}", d.min(frames.len())));
        }
        let mut x = DMatrix::from_fn(frames.len(), d, |i, j| frames[i][j]);
        let mean = x.row_mean();
        for mut row in x.row_iter_mut() {
            row -= &mean;
        }
        let svd = x.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Diverged("PCA decomposition failed".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        let components = order[..dim]
            .iter()
            .map(|&c| {
                let mut v: Vec<f64> = v_t.row(c).iter().copied().collect();
                let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if lead < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect::<Vec<_>>();
        if components.iter().flatten().any(|v: &f64| !v.is_finite()) {
            return Err(Error::Diverged("PCA produced non-finite components".into()));
        }
        Ok(Self {
            mean: mean.iter().copied().collect(),
            components,
        })
    }

    pub fn project(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.mean.len() {
            return Err(Error::Shape(format!("frame of {} values, PCA fitted on {}", frame.len(), self.mean.len())));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(frame).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect())
    }
}

/// Frames of a frame-major clip (f, c, h, w) selected by [`FRAME_SUBSET`].
pub fn subset_frames(clip: &[f32], frames: usize) -> Result<Vec<Vec<f64>>> {
    if frames == 0 || clip.len() % frames != 0 {
        return Err(Error::Shape(format!("{} values cannot hold {frames} frames", clip.len())));
    }
    let n = clip.len() / frames;
    FRAME_SUBSET
        .iter()
        .map(|&i| {
            if i >= frames {
                return Err(invalid!("clip of {frames} frames has no frame {i}"));
            }
            Ok(clip[i * n..(i + 1) * n].iter().map(|&v| v as f64).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(rows: Vec<Vec<f64>>) -> FeatureSet {
        FeatureSet::new(rows, "test", Source::Real).unwrap()
    }

    #[test]
    fn identical_sets() {
        let a = fs(vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        assert!(mmd(&a, &a, 1.0).unwrap().abs() < 1e-10);
        assert_eq!(density_coverage(&a, &a, 1).unwrap().1, 1.0);
    }

    #[test]
    fn singleton_mmd_closed_form() {
        let x = fs(vec![vec![0.0, 0.0]]);
        let y = fs(vec![vec![3.0, 4.0]]);
        let k = (-25.0f64 / 8.0).exp();
        assert!((mmd(&x, &y, 2.0).unwrap() - (2.0 - 2.0 * k)).abs() < 1e-15);
        assert!(mmd(&x, &y, 0.0).is_err());
    }

    #[test]
    fn one_dimensional_shift() {
        let a = fs((0..200).map(|i| vec![(i as f64 * 0.37).sin()]).collect());
        let b = fs(a.rows.iter().map(|r| vec![r[0] + 1.0]).collect());
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn far_points_have_no_density() {
        let real = fs(vec![vec![0.0], vec![1.0], vec![2.0]]);
        let synth = fs(vec![vec![100.0], vec![200.0]]);
        assert_eq!(density_coverage(&real, &synth, 1).unwrap(), (0.0, 0.0));
        assert!(density_coverage(&real, &synth, 3).is_err());
    }

    #[test]
    fn boundary_counts_as_inside() {
        let real = fs(vec![vec![0.0], vec![1.0]]);
        let synth = fs(vec![vec![1.0], vec![-1.0]]);
        // Both radii are 1; -1 lies on the ball of 0 and 1 is the duplicate.
        let (d, c) = density_coverage(&real, &synth, 1).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(d, 3.0 / 2.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = fs(vec![vec![0.0], vec![1.0]]);
        let b = fs(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(frechet_distance(&a, &b).is_err());
        assert!(FeatureSet::new(vec![vec![f64::NAN]], "x", Source::Real).is_err());
    }

    #[test]
    fn pca_projection() {
        let frames: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let pca = PixelPca::fit(&frames, 1).unwrap();
        let c = &pca.components[0];
        assert!((c[0] - 1.0 / 5f64.sqrt()).abs() < 1e-9);
        assert!((c[1] - 2.0 / 5f64.sqrt()).abs() < 1e-9);
        let p = pca.project(&frames[0]).unwrap();
        assert!((p[0] + 9.5 * 5f64.sqrt()).abs() < 1e-9);
        assert_eq!(pca.project(&frames[3]).unwrap(), pca.project(&frames[3]).unwrap());
    }

    #[test]
    fn frame_subset() {
        let clip: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(
            subset_frames(&clip, 16).unwrap(),
            vec![vec![0.0], vec![5.0], vec![10.0], vec![15.0]]
        );
        assert!(subset_frames(&clip[..8], 8).is_err());
    }
}
