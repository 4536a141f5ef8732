//! Matching precision and transform error metrics.

use std::io::Write;

use crate::assignment::PermutationMatrix;
use crate::cloud::{distance, nearest_neighbors, PointCloud};
use crate::error::{config, contract, Error, Result};
use crate::gradcore::Tensor;
use crate::rigid::{euler_from_rotation, RigidTransform};

fn check_sizes(pred: &PermutationMatrix, gt: &PermutationMatrix) -> Result<usize> {
    if pred.n() != gt.n() {
        return Err(contract(format!("prediction has {} rows, ground truth {}", pred.n(), gt.n())));
    }
    Ok(pred.n())
}

/// Percentage of rows matched to their ground-truth column.
pub fn strict_precision(pred: &PermutationMatrix, gt: &PermutationMatrix) -> Result<f64> {
    let n = check_sizes(pred, gt)?;
    if n == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * (pred.agreement(gt) as f64 / n as f64))
}

/// [`strict_precision`] on dense matrices, which must both be permutations.
pub fn strict_precision_dense(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    strict_precision(&PermutationMatrix::from_dense(pred)?, &PermutationMatrix::from_dense(gt)?)
}

/// `τ_i`: mean distance from point `i` to its `k` nearest neighbours.
pub fn adaptive_threshold(points: &PointCloud, k: usize) -> Result<Vec<f64>> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(config(format!("threshold neighbourhood size must be in 1..{n}, got {k}")));
    }
    let knn = nearest_neighbors(points, k);
    Ok(knn
        .iter()
        .enumerate()
        .map(|(i, nb)| nb.iter().map(|&j| distance(points.point(i), points.point(j))).sum::<f64>() / k as f64)
        .collect())
}

/// Percentage of rows whose predicted target lies within `τ` of the true
/// target; `τ` is computed on `target` and read at the true target point.
/// `k = 0` is the strict precision.
pub fn relaxed_precision(
    pred: &PermutationMatrix,
    gt: &PermutationMatrix,
    target: &PointCloud,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return strict_precision(pred, gt);
    }
    let n = check_sizes(pred, gt)?;
    if target.len() != n {
        return Err(Error::Input(format!("target has {} points, matching has {n} rows", target.len())));
    }
    let tau = adaptive_threshold(target, k)?;
    Ok(100.0 * (relaxed_hits(pred, gt, target, &tau) as f64 / n as f64))
}

fn relaxed_hits(pred: &PermutationMatrix, gt: &PermutationMatrix, target: &PointCloud, tau: &[f64]) -> usize {
    (0..pred.n())
        .filter(|&i| {
            let (p, g) = (pred.col_of(i), gt.col_of(i));
            p == g || distance(target.point(p), target.point(g)) <= tau[g]
        })
        .count()
}

/// Strict and relaxed precision of one matching.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionReport {
    pub strict: f64,
    /// `(K, percent)` in the order requested.
    pub relaxed: Vec<(usize, f64)>,
    /// `(K, τ)` for every `K > 0`.
    pub thresholds: Vec<(usize, Vec<f64>)>,
}

impl PrecisionReport {
    pub fn compute(
        pred: &PermutationMatrix,
        gt: &PermutationMatrix,
        target: &PointCloud,
        ks: &[usize],
    ) -> Result<Self> {
        let strict = strict_precision(pred, gt)?;
        let mut relaxed = Vec::with_capacity(ks.len());
        let mut thresholds = Vec::new();
        for &k in ks {
            if k == 0 {
                relaxed.push((0, strict));
                continue;
            }
            let v = relaxed_precision(pred, gt, target, k)?;
            relaxed.push((k, v));
            thresholds.push((k, adaptive_threshold(target, k)?));
        }
        Ok(Self { strict, relaxed, thresholds })
    }

    pub fn relaxed_at(&self, k: usize) -> Option<f64> {
        self.relaxed.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }

    /// Mean over reports, component by component. All reports must share the K list.
    pub fn mean(reports: &[PrecisionReport]) -> Option<PrecisionReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let strict = reports.iter().map(|r| r.strict).sum::<f64>() / n;
        let relaxed = first
            .relaxed
            .iter()
            .enumerate()
            .map(|(idx, &(k, _))| (k, reports.iter().map(|r| r.relaxed[idx].1).sum::<f64>() / n))
            .collect();
        Some(PrecisionReport { strict, relaxed, thresholds: Vec::new() })
    }
}

/// Per-component absolute differences for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransformErrors {
    /// Yaw, pitch, roll in degrees, wrapped into `[0, 180]`.
    pub angles: [f64; 3],
    pub translation: [f64; 3],
}

fn wrap_degrees(d: f64) -> f64 {
    (d + 180.0).rem_euclid(360.0) - 180.0
}

fn rmse(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn mae(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

impl TransformErrors {
    pub fn rmse_rotation(&self) -> f64 {
        rmse(&self.angles)
    }

    pub fn mae_rotation(&self) -> f64 {
        mae(&self.angles)
    }

    pub fn rmse_translation(&self) -> f64 {
        rmse(&self.translation)
    }

    pub fn mae_translation(&self) -> f64 {
        mae(&self.translation)
    }
}

/// Euler-angle and translation errors of `pred` against `gt`.
pub fn transform_errors(pred: &RigidTransform, gt: &RigidTransform) -> Result<TransformErrors> {
    let ep = euler_from_rotation(&pred.rotation)?.as_array();
    let eg = euler_from_rotation(&gt.rotation)?.as_array();
    let d = pred.translation - gt.translation;
    Ok(TransformErrors {
        angles: [0, 1, 2].map(|k| wrap_degrees(ep[k] - eg[k]).abs()),
        translation: [d.x.abs(), d.y.abs(), d.z.abs()],
    })
}

/// Dataset-level errors over all components of all pairs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransformSummary {
    pub rmse_rotation: f64,
    pub mae_rotation: f64,
    pub rmse_translation: f64,
    pub mae_translation: f64,
    pub pairs: usize,
}

impl TransformSummary {
    pub fn aggregate(errors: &[TransformErrors]) -> Self {
        let angles: Vec<f64> = errors.iter().flat_map(|e| e.angles).collect();
        let trans: Vec<f64> = errors.iter().flat_map(|e| e.translation).collect();
        Self {
            rmse_rotation: rmse(&angles),
            mae_rotation: mae(&angles),
            rmse_translation: rmse(&trans),
            mae_translation: mae(&trans),
            pairs: errors.len(),
        }
    }
}

/// One `(pair, metric, value)` line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub pair: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(pair: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Self { pair: pair.into(), metric: metric.into(), value }
    }
}

/// Rows for a precision report, named `strict` and `relaxed_K{k}`.
pub fn precision_rows(pair: &str, report: &PrecisionReport) -> Vec<MetricRow> {
    let mut rows = vec![MetricRow::new(pair, "strict", report.strict)];
    rows.extend(report.relaxed.iter().map(|&(k, v)| MetricRow::new(pair, format!("relaxed_K{k}"), v)));
    rows
}

pub fn transform_rows(pair: &str, e: &TransformErrors) -> Vec<MetricRow> {
    vec![
        MetricRow::new(pair, "rmse_rotation_deg", e.rmse_rotation()),
        MetricRow::new(pair, "mae_rotation_deg", e.mae_rotation()),
        MetricRow::new(pair, "rmse_translation", e.rmse_translation()),
        MetricRow::new(pair, "mae_translation", e.mae_translation()),
    ]
}

pub fn write_metric_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Input(format!("writing metric csv: {e}"));
    w.write_record(["pair", "metric", "value"]).map_err(err)?;
    for r in rows {
        w.write_record([r.pair.as_str(), r.metric.as_str(), &format!("{:?}", r.value)]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Input(format!("writing metric csv: {e}")))?;
    Ok(())
}
