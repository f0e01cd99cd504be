//! Planted-salience synthetic task.
//!
//! The label is carried only by an oriented stripe texture inside a fixed
//! "causal" patch. A second, disjoint "spurious" patch is shifted in
//! brightness towards one class. With probability `ρ` the cue shows the true
//! class, otherwise a uniformly random one, so for two classes `ρ` is the
//! correlation between cue and label and `ρ = 0` makes the cue independent
//! of the label. `ρ` differs between the training splits and EAIS.
//! Ground-truth salience for TAIT-train is the causal patch mask.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Provenance, SalienceMap, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rectangle given by its top-left corner and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.row && y < self.row + self.height && x >= self.col && x < self.col + self.width
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Vertical,
    DiagonalDown,
    DiagonalUp,
}

/// Square-wave stripes with a random phase per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub orientation: Orientation,
    pub period: usize,
    pub amplitude: f64,
}

impl Texture {
    fn value(&self, y: usize, x: usize, phase: usize) -> f64 {
        let coord = match self.orientation {
            Orientation::Horizontal => y,
            Orientation::Vertical => x,
            Orientation::DiagonalDown => x + y,
            Orientation::DiagonalUp => x + self.period * 64 - y,
        };
        if (coord + phase) % self.period < self.period / 2 {
            self.amplitude
        } else {
            -self.amplitude
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalPatch {
    pub region: Region,
    /// One texture per class.
    pub textures: Vec<Texture>,
    /// Per-sample amplitude is scaled by a factor drawn from `[1 - jitter, 1]`.
    #[serde(default)]
    pub amplitude_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousCue {
    pub region: Region,
    /// Brightness offset added inside the region, one per class.
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTaskSpec {
    #[serde(default = "default_task_name")]
    pub task_name: String,
    /// (H, W)
    pub image_size: (usize, usize),
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Sizes of TAIT-train, TAIT-val, TAIS, EAIS.
    pub num_per_split: [usize; 4],
    pub causal_patch: CausalPatch,
    pub spurious_cue: SpuriousCue,
    pub spurious_correlation_train: f64,
    #[serde(default)]
    pub spurious_correlation_eais: f64,
    pub noise_std: f64,
    #[serde(default = "default_background")]
    pub background: f64,
    pub seed: u64,
}

fn default_task_name() -> String {
    "planted".into()
}
fn default_channels() -> usize {
    1
}
fn default_classes() -> usize {
    2
}
fn default_background() -> f64 {
    0.5
}

impl Default for PlantedTaskSpec {
    fn default() -> Self {
        Self {
            task_name: default_task_name(),
            image_size: (24, 24),
            channels: 1,
            num_classes: 2,
            num_per_split: [100, 100, 600, 200],
            causal_patch: CausalPatch {
                region: Region {
                    row: 2,
                    col: 2,
                    height: 7,
                    width: 7,
                },
                textures: vec![
                    Texture {
                        orientation: Orientation::Horizontal,
                        period: 2,
                        amplitude: 0.12,
                    },
                    Texture {
                        orientation: Orientation::Vertical,
                        period: 2,
                        amplitude: 0.12,
                    },
                ],
                amplitude_jitter: 0.5,
            },
            spurious_cue: SpuriousCue {
                region: Region {
                    row: 14,
                    col: 14,
                    height: 7,
                    width: 7,
                },
                levels: vec![-0.15, 0.15],
            },
            spurious_correlation_train: 0.95,
            spurious_correlation_eais: 0.0,
            noise_std: 0.1,
            background: 0.5,
            seed: 0,
        }
    }
}

impl PlantedTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::invalid_spec("image_size", "must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::invalid_spec("channels", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid_spec("num_classes", "at least two classes are required"));
        }
        for (name, n) in Split::ALL.iter().zip(self.num_per_split) {
            if n == 0 {
                return Err(Error::invalid_spec(
                    format!("num_per_split.{name}"),
                    "split size must be positive",
                ));
            }
        }
        for (name, r) in [
            ("causal_patch.region", &self.causal_patch.region),
            ("spurious_cue.region", &self.spurious_cue.region),
        ] {
            if r.height == 0 || r.width == 0 || r.row + r.height > h || r.col + r.width > w {
                return Err(Error::invalid_spec(name, format!("region {r:?} does not fit a {h}x{w} image")));
            }
        }
        if self.causal_patch.region.overlaps(&self.spurious_cue.region) {
            return Err(Error::invalid_spec(
                "causal_patch.region, spurious_cue.region",
                "causal and spurious regions overlap",
            ));
        }
        if self.causal_patch.textures.len() != self.num_classes {
            return Err(Error::invalid_spec("causal_patch.textures", "need one texture per class"));
        }
        if self.causal_patch.textures.iter().any(|t| t.period < 2 || !t.amplitude.is_finite()) {
            return Err(Error::invalid_spec("causal_patch.textures", "period must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.causal_patch.amplitude_jitter) {
            return Err(Error::invalid_spec("causal_patch.amplitude_jitter", "must lie in [0, 1]"));
        }
        if self.spurious_cue.levels.len() != self.num_classes {
            return Err(Error::invalid_spec("spurious_cue.levels", "need one level per class"));
        }
        for (name, p) in [
            ("spurious_correlation_train", self.spurious_correlation_train),
            ("spurious_correlation_eais", self.spurious_correlation_eais),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid_spec(name, "must lie in [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid_spec("noise_std", "must be non-negative"));
        }
        Ok(())
    }

    /// Ground-truth salience: ones inside the causal region.
    pub fn ground_truth_salience(&self) -> SalienceMap {
        let (h, w) = self.image_size;
        let r = self.causal_patch.region;
        let grid = (0..h * w)
            .map(|i| if r.contains(i / w, i % w) { 1.0 } else { 0.0 })
            .collect();
        SalienceMap::new(h, w, grid, Provenance::GroundTruth).expect("binary mask")
    }

    fn correlation(&self, split: Split) -> f64 {
        match split {
            Split::Eais => self.spurious_correlation_eais,
            _ => self.spurious_correlation_train,
        }
    }

    fn render(&self, rng: &mut ChaCha8Rng, label: usize, cue_class: usize) -> Tensor {
        let (h, w) = self.image_size;
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("valid std");
        let texture = self.causal_patch.textures[label];
        let phase = rng.gen_range(0..texture.period);
        let jitter = self.causal_patch.amplitude_jitter;
        let scale = if jitter > 0.0 { rng.gen_range(1.0 - jitter..=1.0) } else { 1.0 };
        let cue_level = self.spurious_cue.levels[cue_class];
        let mut img = Tensor::zeros(self.channels, h, w);
        for y in 0..h {
            for x in 0..w {
                let mut base = self.background;
                if self.causal_patch.region.contains(y, x) {
                    base += scale * texture.value(y - self.causal_patch.region.row, x - self.causal_patch.region.col, phase);
                }
                if self.spurious_cue.region.contains(y, x) {
                    base += cue_level;
                }
                for c in 0..self.channels {
                    let v = if self.noise_std > 0.0 { base + noise.sample(rng) } else { base };
                    // 8-bit quantization keeps the PNG round trip exact.
                    img.set(c, y, x, (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                }
            }
        }
        img
    }
}

/// Generates the four splits. Labels are balanced by construction and
/// generation is a pure function of `spec`.
pub fn generate_planted_dataset(spec: &PlantedTaskSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let gt = spec.ground_truth_salience();
    let mut bundle = DatasetBundle {
        task_name: spec.task_name.clone(),
        num_classes: spec.num_classes,
        tait_train: Vec::new(),
        tait_val: Vec::new(),
        tais: Vec::new(),
        eais: Vec::new(),
    };
    for (idx, split) in Split::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64 + 1);
        let n = spec.num_per_split[idx];
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        labels.shuffle(&mut rng);
        let rho = spec.correlation(split);
        let samples = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let cue_class = if rng.gen_bool(rho) {
                    label
                } else {
                    rng.gen_range(0..spec.num_classes)
                };
                let image = spec.render(&mut rng, label, cue_class);
                Sample {
                    id: format!("{}-{i:05}", split.as_str()),
                    image,
                    label,
                    salience: (split == Split::TaitTrain).then(|| gt.clone()),
                    cue_class: Some(cue_class),
                }
            })
            .collect();
        *bundle.split_mut(split) = samples;
    }
    bundle.validate()?;
    Ok(bundle)
}
