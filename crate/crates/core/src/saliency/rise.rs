//! Randomized input sampling (RISE) for black-box saliency.
//!
//! Each cell of the coarse mask grid is kept in exactly `k` of the `N` masks,
//! where `k` is `N·p` rounded stochastically per cell. Every mask therefore
//! keeps each cell with probability `p`, cells are independent of each
//! other, and when `N·p` is an integer every cell has identical coverage.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::normalize_map;
use crate::data::resize::bilinear_grid;
use crate::data::{Provenance, SalienceMap};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiseConfig {
    pub num_masks: usize,
    pub grid_size: usize,
    pub keep_probability: f64,
    pub upsample: Upsample,
    pub random_shift: bool,
    pub seed: u64,
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            num_masks: 4000,
            grid_size: 6,
            keep_probability: 0.5,
            upsample: Upsample::Bilinear,
            random_shift: true,
            seed: 0,
        }
    }
}

impl RiseConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.num_masks == 0 {
            return Err(Error::Config("rise.num_masks must be >= 1".into()));
        }
        if self.grid_size == 0 || self.grid_size > height.min(width) {
            return Err(Error::Config(format!(
                "rise.grid_size must lie in [1, {}]",
                height.min(width)
            )));
        }
        if !(self.keep_probability > 0.0 && self.keep_probability < 1.0) {
            return Err(Error::Config("rise.keep_probability must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Mask family for one image size; masks are regenerated on demand.
struct MaskSet {
    height: usize,
    width: usize,
    cells: usize,
    cell_h: usize,
    cell_w: usize,
    /// `keep[i * cells² + c]`
    keep: Vec<bool>,
    shifts: Vec<(usize, usize)>,
    upsample: Upsample,
}

impl MaskSet {
    fn new(cfg: &RiseConfig, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.num_masks;
        let cells = if cfg.random_shift { cfg.grid_size + 1 } else { cfg.grid_size };
        let cell_h = height.div_ceil(cfg.grid_size);
        let cell_w = width.div_ceil(cfg.grid_size);
        let nc = cells * cells;
        let mut keep = vec![false; n * nc];
        let expected = n as f64 * cfg.keep_probability;
        for c in 0..nc {
            let frac = expected - expected.floor();
            let k = (expected.floor() as usize + usize::from(rng.gen::<f64>() < frac)).min(n);
            for i in sample_indices(&mut rng, n, k) {
                keep[i * nc + c] = true;
            }
        }
        let shifts = (0..n)
            .map(|_| {
                if cfg.random_shift {
                    (rng.gen_range(0..cell_h), rng.gen_range(0..cell_w))
                } else {
                    (0, 0)
                }
            })
            .collect();
        Self {
            height,
            width,
            cells,
            cell_h,
            cell_w,
            keep,
            shifts,
            upsample: cfg.upsample,
        }
    }

    fn mask(&self, i: usize) -> Vec<f64> {
        let nc = self.cells * self.cells;
        let grid: Vec<f64> = self.keep[i * nc..(i + 1) * nc]
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect();
        let (dy, dx) = self.shifts[i];
        let (h, w) = (self.height, self.width);
        match self.upsample {
            Upsample::Nearest => {
                let mut out = Vec::with_capacity(h * w);
                for y in 0..h {
                    let gy = ((y + dy) / self.cell_h).min(self.cells - 1);
                    for x in 0..w {
                        let gx = ((x + dx) / self.cell_w).min(self.cells - 1);
                        out.push(grid[gy * self.cells + gx]);
                    }
                }
                out
            }
            Upsample::Bilinear => {
                let (uh, uw) = (self.cells * self.cell_h, self.cells * self.cell_w);
                let up = bilinear_grid(&grid, (self.cells, self.cells), (uh, uw));
                let mut out = Vec::with_capacity(h * w);
                for y in 0..h {
                    let row = &up[(y + dy) * uw..(y + dy + 1) * uw];
                    out.extend_from_slice(&row[dx..dx + w]);
                }
                out
            }
        }
    }
}

fn apply_mask(image: &Tensor, mask: &[f64]) -> Tensor {
    let mut t = image.clone();
    for c in 0..t.channels {
        for (v, m) in t.plane_mut(c).iter_mut().zip(mask) {
            *v *= m;
        }
    }
    t
}

/// Unnormalized RISE map `(1 / (N·p)) Σ_i score(image ⊙ M_i) · M_i`.
pub fn rise_raw<F>(score_fn: F, image: &Tensor, cfg: &RiseConfig) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> f64 + Sync + Send,
{
    let (_, h, w) = image.shape();
    cfg.validate(h, w)?;
    let masks = MaskSet::new(cfg, h, w);
    let scores = par::map_range(cfg.num_masks, |i| score_fn(&apply_mask(image, &masks.mask(i))));
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score function returned {} for mask {i}", scores[i])));
    }
    let mut acc = vec![0.0; h * w];
    for (i, y) in scores.iter().enumerate() {
        for (a, m) in acc.iter_mut().zip(masks.mask(i)) {
            *a += y * m;
        }
    }
    let norm = cfg.num_masks as f64 * cfg.keep_probability;
    Ok(acc.into_iter().map(|a| a / norm).collect())
}

pub fn rise<F>(score_fn: F, image: &Tensor, cfg: &RiseConfig) -> Result<SalienceMap>
where
    F: Fn(&Tensor) -> f64 + Sync + Send,
{
    let raw = rise_raw(score_fn, image, cfg)?;
    normalize_map(&raw, (image.height, image.width), Provenance::TeacherRise)
}
