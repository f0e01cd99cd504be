//! AUC, ROC curves, cross-seed aggregation, and report emission.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{ensure_dir, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    /// 1 marks the positive class.
    pub labels: Vec<u8>,
    pub positive_class_meaning: String,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        Self {
            scores,
            labels,
            positive_class_meaning: String::from("class 1"),
        }
    }

    fn check(&self) -> Result<(u64, u64)> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::Input(format!(
                "{} scores but {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if let Some(i) = self.scores.iter().position(|s| s.is_nan()) {
            return Err(Error::Numeric(format!("score {i} is NaN")));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Input(format!("label {l} is not 0 or 1")));
        }
        let pos = self.labels.iter().filter(|&&l| l == 1).count() as u64;
        let neg = self.labels.len() as u64 - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::UndefinedAuc(format!(
                "need both classes, got {pos} positive and {neg} negative"
            )));
        }
        Ok((pos, neg))
    }

    /// (score, label) pairs sorted by descending score.
    fn sorted_desc(&self) -> Vec<(f64, u8)> {
        let mut v: Vec<(f64, u8)> = self.scores.iter().copied().zip(self.labels.iter().copied()).collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v
    }
}

/// Walks tie groups in descending score order, yielding (positives, negatives)
/// per group.
fn tie_groups(sorted: &[(f64, u8)]) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0, 0);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        out.push((p, n));
        i = j;
    }
    out
}

/// Mann-Whitney AUC with ties counted half. The pair counts are kept as
/// integers so the result is a single rounding of `(2·correct + ties) / 2PN`.
pub fn compute_auc(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = s.check()?;
    let mut twice: u128 = 0;
    let mut neg_below: u64 = neg;
    for (p, n) in tie_groups(&s.sorted_desc()) {
        neg_below -= n;
        twice += 2 * p as u128 * neg_below as u128 + p as u128 * n as u128;
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Threshold sweep from the highest score down; tied scores move together.
pub fn roc_curve(s: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = s.check()?;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n) in tie_groups(&s.sorted_desc()) {
        tp += p;
        fp += n;
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Mean and sample standard deviation (n−1); std is 0 for a single value.
pub fn aggregate_runs(aucs: &[f64]) -> Result<(f64, f64)> {
    if aucs.is_empty() {
        return Err(Error::Input("cannot aggregate an empty list".into()));
    }
    let n = aucs.len() as f64;
    let mean = aucs.iter().sum::<f64>() / n;
    if aucs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocBand {
    pub fpr_grid: Vec<f64>,
    pub mean_tpr: Vec<f64>,
    pub std_tpr: Vec<f64>,
}

pub fn default_fpr_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Piecewise-linear interpolation of an ROC curve at `x`. Where the curve
/// has a vertical segment at `x`, the highest tpr is taken.
fn interpolate(curve: &[(f64, f64)], x: f64) -> f64 {
    let at: Vec<f64> = curve.iter().filter(|p| p.0 == x).map(|p| p.1).collect();
    if !at.is_empty() {
        return at.into_iter().fold(f64::NEG_INFINITY, f64::max);
    }
    let before = curve.iter().filter(|p| p.0 < x).last();
    let after = curve.iter().find(|p| p.0 > x);
    match (before, after) {
        (Some(a), Some(b)) => a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0),
        (Some(a), None) => a.1,
        (None, Some(b)) => b.1,
        (None, None) => 0.0,
    }
}

pub fn build_roc_band(curves: &[Vec<(f64, f64)>], fpr_grid: &[f64]) -> Result<RocBand> {
    if curves.is_empty() {
        return Err(Error::Input("ROC band needs at least one curve".into()));
    }
    let mut mean_tpr = Vec::with_capacity(fpr_grid.len());
    let mut std_tpr = Vec::with_capacity(fpr_grid.len());
    for &x in fpr_grid {
        let vals: Vec<f64> = curves.iter().map(|c| interpolate(c, x).clamp(0.0, 1.0)).collect();
        let (m, s) = aggregate_runs(&vals)?;
        mean_tpr.push(m);
        std_tpr.push(s);
    }
    Ok(RocBand {
        fpr_grid: fpr_grid.to_vec(),
        mean_tpr,
        std_tpr,
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub arch: String,
    /// `none` for conditions trained without teacher saliency.
    pub saliency_method: String,
    /// Student or teacher α; absent for cross-entropy cohorts.
    pub alpha: Option<f64>,
    /// Split the AUCs were measured on.
    pub eval_split: String,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub n_seeds: usize,
    pub roc_curves: Vec<Vec<(f64, f64)>>,
}

impl ConditionSummary {
    /// File-name key, unique per (condition, arch).
    pub fn key(&self) -> String {
        format!("{}_{}", self.condition, self.arch)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub conditions: Vec<ConditionSummary>,
}

impl ExperimentSummary {
    pub fn get(&self, condition: &str, arch: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.condition == condition && c.arch == arch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Full,
    JsonOnly,
}

/// Writes `results.csv`, one `roc_<condition>_<arch>.csv` per row, and
/// `summary.json` into `dir`. Output depends only on `summary`.
pub fn emit_report(summary: &ExperimentSummary, dir: &Path, format: ReportFormat) -> Result<()> {
    ensure_dir(dir)?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes") + "\n";
    write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    if format == ReportFormat::JsonOnly {
        return Ok(());
    }
    let mut csv = String::from("condition,arch,saliency_method,alpha,mean_auc,std_auc,n_seeds\n");
    for c in &summary.conditions {
        let alpha = c.alpha.map(|a| format!("{a}")).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{}",
            c.condition, c.arch, c.saliency_method, alpha, c.mean_auc, c.std_auc, c.n_seeds
        )
        .unwrap();
    }
    write_atomic(&dir.join("results.csv"), csv.as_bytes())?;
    let grid = default_fpr_grid();
    for c in &summary.conditions {
        if c.roc_curves.is_empty() {
            continue;
        }
        let band = build_roc_band(&c.roc_curves, &grid)?;
        let mut out = String::from("fpr,mean_tpr,std_tpr\n");
        for i in 0..grid.len() {
            writeln!(out, "{:.2},{:.6},{:.6}", band.fpr_grid[i], band.mean_tpr[i], band.std_tpr[i]).unwrap();
        }
        write_atomic(&dir.join(format!("roc_{}.csv", c.key())), out.as_bytes())?;
    }
    Ok(())
}
