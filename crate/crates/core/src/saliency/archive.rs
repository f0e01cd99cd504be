//! Teacher saliency archives: one raw salience file per sample plus an
//! `index.jsonl` listing `{id, method, checkpoint_hash, file}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cam, rise, ClassSelector, RiseConfig, SaliencyMethod};
use crate::data::salience_io::{quantize_f32, read_raw, write_raw, RAW_EXTENSION};
use crate::data::{Sample, SalienceMap};
use crate::error::{Error, Result};
use crate::io_util::{read_to_string, write_atomic};
use crate::model::{softmax, Classifier};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyGenConfig {
    pub method: SaliencyMethod,
    /// Class whose evidence is mapped.
    pub selector: ClassSelector,
    pub rise: RiseConfig,
}

impl Default for SaliencyGenConfig {
    fn default() -> Self {
        Self {
            method: SaliencyMethod::Cam,
            selector: ClassSelector::Predicted,
            rise: RiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveIndexEntry {
    pub id: String,
    pub method: SaliencyMethod,
    pub checkpoint_hash: String,
    pub file: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationReport {
    pub written: usize,
    pub skipped: usize,
}

fn sample_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn map_file(id: &str) -> String {
    format!("maps/{id}.{RAW_EXTENSION}")
}

fn sample_saliency(teacher: &Classifier, sample: &Sample, cfg: &SaliencyGenConfig) -> Result<SalienceMap> {
    match cfg.method {
        SaliencyMethod::Cam => cam(teacher, &sample.image, cfg.selector, Some(sample.label)),
        SaliencyMethod::Rise => {
            let class = match cfg.selector {
                ClassSelector::TrueLabel => sample.label,
                ClassSelector::Predicted => {
                    let l = teacher.logits(&sample.image)?;
                    (0..l.len()).fold(0, |b, i| if l[i] > l[b] { i } else { b })
                }
            };
            let rcfg = RiseConfig {
                seed: sample_seed(cfg.rise.seed, &sample.id),
                ..cfg.rise.clone()
            };
            let score = |img: &crate::tensor::Tensor| match teacher.logits(img) {
                Ok(l) => softmax(&l)[class],
                Err(_) => f64::NAN,
            };
            rise(score, &sample.image, &rcfg)
        }
    }
}

/// Computes teacher saliency for every sample and persists it under
/// `archive_dir`. Existing per-sample files are kept unless `overwrite`.
/// Each file is written atomically, so an interrupted run leaves only
/// complete maps behind and a rerun resumes where it stopped.
pub fn generate_teacher_saliency(
    teacher: &Classifier,
    checkpoint_hash: &str,
    samples: &[Sample],
    cfg: &SaliencyGenConfig,
    archive_dir: &Path,
    overwrite: bool,
) -> Result<GenerationReport> {
    if let SaliencyMethod::Rise = cfg.method {
        let (h, w, _) = teacher.spec().input_shape;
        cfg.rise.validate(h, w)?;
    }
    let todo: Vec<&Sample> = samples
        .iter()
        .filter(|s| overwrite || !archive_dir.join(map_file(&s.id)).exists())
        .collect();
    let results = par::map(&todo, |s| -> Result<()> {
        let map = quantize_f32(&sample_saliency(teacher, s, cfg)?);
        write_raw(&map, &archive_dir.join(map_file(&s.id)))
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let mut entries: Vec<ArchiveIndexEntry> = samples
        .iter()
        .map(|s| ArchiveIndexEntry {
            id: s.id.clone(),
            method: cfg.method,
            checkpoint_hash: checkpoint_hash.to_string(),
            file: map_file(&s.id),
        })
        .collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let mut text = String::new();
    for e in &entries {
        text.push_str(&serde_json::to_string(e).expect("entry serializes"));
        text.push('\n');
    }
    write_atomic(&archive_dir.join("index.jsonl"), text.as_bytes())?;
    Ok(GenerationReport {
        written: todo.len(),
        skipped: samples.len() - todo.len(),
    })
}

/// Read access to a persisted archive. Counts map reads so callers can audit
/// which runs touched teacher saliency.
#[derive(Debug)]
pub struct SaliencyArchive {
    dir: PathBuf,
    entries: BTreeMap<String, ArchiveIndexEntry>,
    reads: AtomicUsize,
}

impl SaliencyArchive {
    pub fn open(dir: &Path) -> Result<Self> {
        let index = dir.join("index.jsonl");
        let text = read_to_string(&index)?;
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ArchiveIndexEntry = serde_json::from_str(line)
                .map_err(|err| Error::format(&index, format!("line {}: {err}", n + 1)))?;
            entries.insert(e.id.clone(), e);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ArchiveIndexEntry> {
        self.entries.values()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn checkpoint_hash(&self) -> Option<&str> {
        self.entries.values().next().map(|e| e.checkpoint_hash.as_str())
    }

    pub fn load(&self, id: &str) -> Result<SalienceMap> {
        let e = self
            .entries
            .get(id)
            .ok_or_else(|| Error::Validation(format!("archive has no map for `{id}`")))?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        read_raw(&self.dir.join(&e.file), e.method.provenance())
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// Attaches archived maps to `samples`, failing on the first missing id.
    pub fn attach(&self, samples: &mut [Sample]) -> Result<()> {
        let missing: Vec<&str> = samples
            .iter()
            .filter(|s| !self.contains(&s.id))
            .map(|s| s.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "archive is missing {} ids, e.g. {:?}",
                missing.len(),
                &missing[..missing.len().min(5)]
            )));
        }
        for s in samples.iter_mut() {
            s.salience = Some(self.load(&s.id)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::planted::{generate_planted_dataset, PlantedTaskSpec};
    use crate::data::Provenance;
    use crate::model::{build_model, ArchId, ArchitectureSpec};
    use crate::saliency::Upsample;

    fn setup() -> (Classifier, Vec<Sample>) {
        let spec = PlantedTaskSpec {
            num_per_split: [4, 4, 30, 4],
            ..Default::default()
        };
        let b = generate_planted_dataset(&spec).unwrap();
        let a = ArchitectureSpec::new(ArchId::Plain, (24, 24, 1), 2).unwrap();
        (build_model(&a, 0).unwrap(), b.tais)
    }

    #[test]
    fn cam_archive_covers_every_sample_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let (teacher, tais) = setup();
        let cfg = SaliencyGenConfig::default();
        let r = generate_teacher_saliency(&teacher, "abc", &tais, &cfg, dir.path(), false).unwrap();
        assert_eq!(r, GenerationReport { written: 30, skipped: 0 });
        let archive = SaliencyArchive::open(dir.path()).unwrap();
        assert_eq!(archive.len(), 30);
        for s in &tais {
            let m = archive.load(&s.id).unwrap();
            assert_eq!(m.provenance(), Provenance::TeacherCam);
            assert!(m.grid().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(archive.entries().all(|e| e.checkpoint_hash == "abc"));
        let again = generate_teacher_saliency(&teacher, "abc", &tais, &cfg, dir.path(), false).unwrap();
        assert_eq!(again, GenerationReport { written: 0, skipped: 30 });
    }

    #[test]
    fn resumes_after_partial_run() {
        let dir = tempfile::tempdir().unwrap();
        let (teacher, tais) = setup();
        let cfg = SaliencyGenConfig::default();
        generate_teacher_saliency(&teacher, "h", &tais[..10], &cfg, dir.path(), false).unwrap();
        let r = generate_teacher_saliency(&teacher, "h", &tais, &cfg, dir.path(), false).unwrap();
        assert_eq!(r, GenerationReport { written: 20, skipped: 10 });
    }

    #[test]
    fn rise_archive_tags_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let (teacher, tais) = setup();
        let cfg = SaliencyGenConfig {
            method: SaliencyMethod::Rise,
            selector: ClassSelector::TrueLabel,
            rise: RiseConfig {
                num_masks: 40,
                grid_size: 4,
                upsample: Upsample::Bilinear,
                ..Default::default()
            },
        };
        generate_teacher_saliency(&teacher, "h", &tais[..3], &cfg, dir.path(), false).unwrap();
        let archive = SaliencyArchive::open(dir.path()).unwrap();
        for s in &tais[..3] {
            let m = archive.load(&s.id).unwrap();
            assert_eq!(m.provenance(), Provenance::TeacherRise);
            assert_eq!(m.resolution(), (24, 24));
        }
        assert_eq!(archive.reads(), 3);
    }
}
