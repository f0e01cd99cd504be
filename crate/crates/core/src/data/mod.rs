//! Samples, salience maps and the four-way split structure
//! (TAIT-train / TAIT-val / TAIS / EAIS).

pub mod manifest;
pub mod planted;
pub mod resize;
pub mod salience_io;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{load_manifest, write_bundle, LoadOptions};
pub use planted::{generate_planted_dataset, PlantedTaskSpec};
pub use resize::{resize_salience, ResizeMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    TeacherCam,
    TeacherRise,
}

/// A 2-D map with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceMap {
    height: usize,
    width: usize,
    grid: Vec<f64>,
    provenance: Provenance,
}

impl SalienceMap {
    pub fn new(height: usize, width: usize, grid: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation("salience map must be at least 1x1".into()));
        }
        if grid.len() != height * width {
            return Err(Error::Validation(format!(
                "salience grid has {} values, expected {height}x{width}",
                grid.len()
            )));
        }
        if let Some(bad) = grid.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Validation(format!(
                "salience value {} at index {bad} is outside [0, 1]",
                grid[bad]
            )));
        }
        Ok(Self {
            height,
            width,
            grid,
            provenance,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, provenance: Provenance) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], provenance)
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn into_grid(self) -> Vec<f64> {
        self.grid
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.grid[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.grid.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
    pub salience: Option<SalienceMap>,
    /// Class shown by the planted spurious cue, when known.
    pub cue_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TaitTrain,
    TaitVal,
    Tais,
    Eais,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TaitTrain, Split::TaitVal, Split::Tais, Split::Eais];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::TaitTrain => "tait_train",
            Split::TaitVal => "tait_val",
            Split::Tais => "tais",
            Split::Eais => "eais",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split tag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub task_name: String,
    pub num_classes: usize,
    pub tait_train: Vec<Sample>,
    pub tait_val: Vec<Sample>,
    pub tais: Vec<Sample>,
    pub eais: Vec<Sample>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::TaitTrain => &self.tait_train,
            Split::TaitVal => &self.tait_val,
            Split::Tais => &self.tais,
            Split::Eais => &self.eais,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::TaitTrain => &mut self.tait_train,
            Split::TaitVal => &mut self.tait_val,
            Split::Tais => &mut self.tais,
            Split::Eais => &mut self.eais,
        }
    }

    /// (C, H, W) of the first sample.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        Split::ALL
            .iter()
            .flat_map(|s| self.split(*s).first())
            .next()
            .map(|s| s.image.shape())
    }

    /// Structural invariants: disjoint ids, label and pixel ranges, salience
    /// on every TAIT-train sample and none on TAIS.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let shape = self.image_shape();
        for split in Split::ALL {
            for s in self.split(split) {
                if !seen.insert(s.id.as_str()) {
                    return Err(Error::Validation(format!("sample id `{}` appears more than once", s.id)));
                }
                if s.label >= self.num_classes {
                    return Err(Error::Validation(format!(
                        "sample `{}` has label {} >= num_classes {}",
                        s.id, s.label, self.num_classes
                    )));
                }
                if Some(s.image.shape()) != shape {
                    return Err(Error::Validation(format!("sample `{}` has a different image shape", s.id)));
                }
                if s.image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Validation(format!("sample `{}` has pixels outside [0, 1]", s.id)));
                }
                match split {
                    Split::TaitTrain if s.salience.is_none() => {
                        return Err(Error::Validation(format!(
                            "tait_train sample `{}` has no salience map",
                            s.id
                        )))
                    }
                    Split::Tais if s.salience.is_some() => {
                        return Err(Error::Validation(format!(
                            "tais sample `{}` already carries a salience map",
                            s.id
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Per-split class counts, indexed `[split][class]`.
    pub fn class_counts(&self) -> [Vec<usize>; 4] {
        Split::ALL.map(|sp| {
            let mut counts = vec![0; self.num_classes];
            for s in self.split(sp) {
                counts[s.label] += 1;
            }
            counts
        })
    }

    pub fn is_class_balanced(&self) -> bool {
        self.class_counts().iter().all(|c| {
            let lo = c.iter().min().copied().unwrap_or(0);
            let hi = c.iter().max().copied().unwrap_or(0);
            hi - lo <= 1
        })
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.split(split).iter().map(|s| s.id.as_str())
    }
}
