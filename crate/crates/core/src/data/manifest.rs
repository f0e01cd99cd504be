//! JSON-lines dataset manifests.
//!
//! One record per line:
//!
//! ```json
//! {"id": "a1", "split": "tait_train", "image_path": "images/a1.png", "label": 0,
//!  "salience_path": "salience/a1.png", "annotator_correct": true}
//! ```
//!
//! `salience_path` may also be a list; the maps are resized to the image,
//! averaged pixel-wise and clamped. Relative paths resolve against the
//! manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::resize::{resize_salience, ResizeMode};
use super::salience_io::{encode_png_image, encode_png_salience, read_png_image, read_salience};
use super::{DatasetBundle, Provenance, SalienceMap, Sample, Split};
use crate::error::{Error, Result};
use crate::io_util::{read_to_string, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SaliencePaths {
    One(String),
    Many(Vec<String>),
}

impl SaliencePaths {
    fn paths(&self) -> Vec<&str> {
        match self {
            SaliencePaths::One(p) => vec![p.as_str()],
            SaliencePaths::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub image_path: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salience_path: Option<SaliencePaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_correct: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Drop annotated samples whose annotator misclassified the image.
    #[serde(default)]
    pub filter_correct: bool,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Merges several annotators' maps: resize each to `(h, w)`, average, clamp.
fn merge_salience(maps: &[SalienceMap], h: usize, w: usize) -> SalienceMap {
    let mut acc = vec![0.0; h * w];
    for m in maps {
        let mode = if m.height() >= h && m.width() >= w {
            ResizeMode::AreaAverage
        } else {
            ResizeMode::Bilinear
        };
        let r = resize_salience(m, (h, w), mode);
        for (a, v) in acc.iter_mut().zip(r.grid()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    let grid = acc.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect();
    SalienceMap::new(h, w, grid, Provenance::GroundTruth).expect("clamped mean")
}

pub fn load_manifest(path: &Path, options: LoadOptions) -> Result<DatasetBundle> {
    let text = read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let task_name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("manifest")
        .to_string();
    let mut bundle = DatasetBundle {
        task_name,
        num_classes: 2,
        tait_train: Vec::new(),
        tait_val: Vec::new(),
        tais: Vec::new(),
        eais: Vec::new(),
    };
    let mut max_label = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let split: Split = rec.split.parse().map_err(|_| at(format!("unknown split tag `{}`", rec.split)))?;
        if options.filter_correct && rec.salience_path.is_some() && rec.annotator_correct == Some(false) {
            continue;
        }
        if split == Split::TaitTrain && rec.salience_path.is_none() {
            return Err(Error::Validation(format!(
                "{}: line {}: tait_train sample `{}` lacks salience_path",
                path.display(),
                lineno + 1,
                rec.id
            )));
        }
        let image = read_png_image(&resolve(base, &rec.image_path))?;
        let (_, h, w) = image.shape();
        let salience = match &rec.salience_path {
            None => None,
            Some(paths) => {
                let mut maps = Vec::new();
                for p in paths.paths() {
                    let full = resolve(base, p);
                    let m = read_salience(&full, Provenance::GroundTruth)?;
                    // Only pure rescaling is allowed: aspect ratios must agree.
                    if m.height() * w != m.width() * h {
                        return Err(Error::format(
                            &full,
                            format!(
                                "salience {}x{} cannot be resized to image {h}x{w}",
                                m.height(),
                                m.width()
                            ),
                        ));
                    }
                    maps.push(m);
                }
                if maps.is_empty() {
                    return Err(at("empty salience_path list".into()));
                }
                Some(merge_salience(&maps, h, w))
            }
        };
        max_label = max_label.max(rec.label);
        bundle.split_mut(split).push(Sample {
            id: rec.id,
            image,
            label: rec.label,
            salience,
            cue_class: None,
        });
    }
    bundle.num_classes = (max_label + 1).max(2);
    bundle.validate()?;
    Ok(bundle)
}

/// Materializes a bundle as PNG files plus `manifest.jsonl` under `out_dir`.
/// Returns the manifest path.
pub fn write_bundle(bundle: &DatasetBundle, out_dir: &Path) -> Result<PathBuf> {
    let mut lines = String::new();
    for split in Split::ALL {
        for s in bundle.split(split) {
            let image_rel = format!("images/{}.png", s.id);
            write_atomic(&out_dir.join(&image_rel), &encode_png_image(&s.image)?)?;
            let salience_path = match &s.salience {
                Some(m) => {
                    let rel = format!("salience/{}.png", s.id);
                    write_atomic(&out_dir.join(&rel), &encode_png_salience(m)?)?;
                    Some(SaliencePaths::One(rel))
                }
                None => None,
            };
            let rec = ManifestRecord {
                id: s.id.clone(),
                split: split.as_str().to_string(),
                image_path: image_rel,
                label: s.label,
                salience_path,
                annotator_correct: None,
            };
            lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            lines.push('\n');
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_atomic(&manifest, lines.as_bytes())?;
    Ok(manifest)
}
