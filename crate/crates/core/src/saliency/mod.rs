//! Model saliency: CAM (white box), RISE (black box), and min-max
//! normalization.

pub mod archive;
pub mod rise;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Provenance, SalienceMap};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

pub use archive::{generate_teacher_saliency, ArchiveIndexEntry, SaliencyArchive, SaliencyGenConfig};
pub use rise::{rise, rise_raw, RiseConfig, Upsample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMethod {
    Cam,
    Rise,
}

impl SaliencyMethod {
    pub fn provenance(&self) -> Provenance {
        match self {
            SaliencyMethod::Cam => Provenance::TeacherCam,
            SaliencyMethod::Rise => Provenance::TeacherRise,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SaliencyMethod::Cam => "cam",
            SaliencyMethod::Rise => "rise",
        }
    }
}

impl fmt::Display for SaliencyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SaliencyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(SaliencyMethod::Cam),
            "rise" => Ok(SaliencyMethod::Rise),
            other => Err(Error::Config(format!("unknown saliency method `{other}`"))),
        }
    }
}

/// Which class's classifier row weights the feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSelector {
    TrueLabel,
    Predicted,
}

fn argminmax(raw: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &v) in raw.iter().enumerate() {
        if v < raw[lo] {
            lo = i;
        }
        if v > raw[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Min-max normalization to `[0, 1]`; a constant input maps to all zeros.
/// Assumes finite input.
pub fn normalize_values(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = argminmax(raw);
    let span = raw[hi] - raw[lo];
    if span > 0.0 {
        raw.iter().map(|v| ((v - raw[lo]) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Vector-Jacobian product of [`normalize_values`].
pub fn normalize_backward(raw: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (lo, hi) = argminmax(raw);
    let span = raw[hi] - raw[lo];
    let mut grad = vec![0.0; raw.len()];
    if !(span > 0.0) {
        return grad;
    }
    let mut to_lo = 0.0;
    let mut to_hi = 0.0;
    for (i, (&r, &g)) in raw.iter().zip(grad_out).enumerate() {
        // The argmin and argmax outputs are pinned to 0 and 1.
        if i == lo || i == hi {
            continue;
        }
        let n = (r - raw[lo]) / span;
        grad[i] += g / span;
        to_lo += g * (n - 1.0) / span;
        to_hi -= g * n / span;
    }
    grad[lo] += to_lo;
    grad[hi] += to_hi;
    grad
}

pub fn normalize_map(raw: &[f64], resolution: (usize, usize), provenance: Provenance) -> Result<SalienceMap> {
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite raw saliency value at index {i}")));
    }
    if raw.is_empty() {
        return Err(Error::Numeric("empty saliency map".into()));
    }
    SalienceMap::new(resolution.0, resolution.1, normalize_values(raw), provenance)
}

/// Raw class activation map `Σ_f w_f · A_f` at feature-grid resolution.
pub fn raw_cam(features: &Tensor, weights: &[f64]) -> Vec<f64> {
    debug_assert_eq!(features.channels, weights.len());
    let mut out = vec![0.0; features.plane_len()];
    for (f, &w) in weights.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(features.plane(f)) {
            *o += w * a;
        }
    }
    out
}

/// Gradients of [`raw_cam`] with respect to the feature maps and the weights.
pub fn raw_cam_backward(features: &Tensor, weights: &[f64], grad_raw: &[f64]) -> (Tensor, Vec<f64>) {
    let mut gf = Tensor::zeros(features.channels, features.height, features.width);
    let mut gw = vec![0.0; weights.len()];
    for (f, &w) in weights.iter().enumerate() {
        let plane = features.plane(f);
        gw[f] = plane.iter().zip(grad_raw).map(|(a, g)| a * g).sum();
        for (d, &g) in gf.plane_mut(f).iter_mut().zip(grad_raw) {
            *d = w * g;
        }
    }
    (gf, gw)
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > values[best] { i } else { best })
}

/// Class activation map of `image`, min-max normalized.
pub fn cam(model: &Classifier, image: &Tensor, selector: ClassSelector, true_label: Option<usize>) -> Result<SalienceMap> {
    let spec = model.spec();
    if spec.num_feature_maps == 0 {
        return Err(Error::Unsupported("model has no GAP + linear head".into()));
    }
    let pass = model.forward_one(image)?;
    let class = match selector {
        ClassSelector::TrueLabel => {
            true_label.ok_or_else(|| Error::Input("true_label selector requires a label".into()))?
        }
        ClassSelector::Predicted => argmax(&pass.logits),
    };
    let weights = model.classifier_weights(class)?;
    let raw = raw_cam(pass.features(), weights);
    normalize_map(&raw, spec.feature_grid, Provenance::TeacherCam)
}
