//! Saliency-guided loss and the plain cross-entropy baseline.
//!
//! Per sample the guided loss is
//! `(1 - α) · ‖s_teacher - s_model‖² + α · (-log p[y])`, averaged over the
//! batch. The squared norm is summed over map cells.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cyborg,
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Cyborg => "cyborg",
            LossKind::CrossEntropy => "cross_entropy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the classification term; ignored for cross-entropy.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.5
}

impl LossConfig {
    pub fn cyborg(alpha: f64) -> Self {
        Self {
            kind: LossKind::Cyborg,
            alpha,
        }
    }

    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::Cyborg && !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn uses_saliency(&self) -> bool {
        self.kind == LossKind::Cyborg
    }
}

/// Inputs for one batch. Maps are flattened grids of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossInputs {
    pub class_probabilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub teacher_maps: Vec<Vec<f64>>,
    pub model_maps: Vec<Vec<f64>>,
}

/// Loss value and its gradients with respect to the probabilities and the
/// model maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_probabilities: Vec<Vec<f64>>,
    pub d_model_maps: Vec<Vec<f64>>,
}

pub fn saliency_term(teacher_map: &[f64], model_map: &[f64]) -> Result<f64> {
    if teacher_map.len() != model_map.len() {
        return Err(Error::Input(format!(
            "map sizes differ: teacher {} vs model {}",
            teacher_map.len(),
            model_map.len()
        )));
    }
    Ok(teacher_map
        .iter()
        .zip(model_map)
        .map(|(t, m)| (t - m) * (t - m))
        .sum())
}

fn check_probabilities(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if probabilities.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} probability rows but {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    for (k, (row, &y)) in probabilities.iter().zip(labels).enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!("row {k} is not a probability distribution")));
        }
        if y >= row.len() {
            return Err(Error::Input(format!("label {y} out of range for row {k}")));
        }
    }
    Ok(())
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Mean negative log-likelihood of the labels.
pub fn cross_entropy(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_probabilities(probabilities, labels)?;
    let n = labels.len() as f64;
    Ok(probabilities
        .iter()
        .zip(labels)
        .map(|(row, &y)| neg_log(row[y]))
        .sum::<f64>()
        / n)
}

fn check_maps(inputs: &BatchLossInputs) -> Result<()> {
    let k = inputs.labels.len();
    if inputs.teacher_maps.len() != k || inputs.model_maps.len() != k {
        return Err(Error::Input(format!(
            "batch of {k} has {} teacher and {} model maps",
            inputs.teacher_maps.len(),
            inputs.model_maps.len()
        )));
    }
    Ok(())
}

/// Dispatches on `cfg.kind`; for cross-entropy the maps are ignored.
pub fn cyborg_loss(inputs: &BatchLossInputs, cfg: &LossConfig) -> Result<f64> {
    Ok(cyborg_loss_grad(inputs, cfg)?.loss)
}

pub fn cyborg_loss_grad(inputs: &BatchLossInputs, cfg: &LossConfig) -> Result<LossGrad> {
    cfg.validate()?;
    check_probabilities(&inputs.class_probabilities, &inputs.labels)?;
    let k = inputs.labels.len() as f64;
    let (w_sal, w_cls) = match cfg.kind {
        LossKind::Cyborg => {
            check_maps(inputs)?;
            (1.0 - cfg.alpha, cfg.alpha)
        }
        LossKind::CrossEntropy => (0.0, 1.0),
    };
    let mut loss = 0.0;
    let mut d_probabilities = Vec::with_capacity(inputs.labels.len());
    let mut d_model_maps = Vec::with_capacity(inputs.labels.len());
    for (i, (row, &y)) in inputs.class_probabilities.iter().zip(&inputs.labels).enumerate() {
        let mut dp = vec![0.0; row.len()];
        loss += w_cls * neg_log(row[y]);
        if row[y] > PROB_FLOOR {
            dp[y] = -w_cls / (k * row[y]);
        }
        d_probabilities.push(dp);
        if cfg.kind == LossKind::Cyborg {
            let t = &inputs.teacher_maps[i];
            let m = &inputs.model_maps[i];
            loss += w_sal * saliency_term(t, m)?;
            d_model_maps.push(
                t.iter()
                    .zip(m)
                    .map(|(t, m)| w_sal * 2.0 * (m - t) / k)
                    .collect(),
            );
        } else {
            d_model_maps.push(Vec::new());
        }
    }
    Ok(LossGrad {
        loss: loss / k,
        d_probabilities,
        d_model_maps,
    })
}

/// Pulls a gradient on softmax outputs back onto the logits.
pub fn softmax_backward(probabilities: &[f64], d_probabilities: &[f64]) -> Vec<f64> {
    let dot: f64 = probabilities.iter().zip(d_probabilities).map(|(p, g)| p * g).sum();
    probabilities
        .iter()
        .zip(d_probabilities)
        .map(|(p, g)| p * (g - dot))
        .collect()
}
