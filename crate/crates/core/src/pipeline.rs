//! Experiment orchestration: teacher cohorts, teacher selection, TAIS
//! annotation, student cohorts, the two baselines, and the
//! cross-architecture transfer matrix.
//!
//! Everything an experiment produces lives under one directory:
//!
//! ```text
//! config.toml                  snapshot of the effective config
//! cohorts/<name>/seed_<s>/     one training run each
//! cohorts/<name>/cohort.json   CohortResult
//! archives/<name>/             teacher saliency archives
//! conditions.json              report rows -> cohorts
//! selected_teacher.json
//! transfer.json
//! eais_access.jsonl            every evaluation on EAIS
//! report/                      results.csv, roc_*.csv, summary.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{generate_planted_dataset, load_manifest, DatasetBundle, LoadOptions, PlantedTaskSpec, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, emit_report, ConditionSummary, ExperimentSummary, ReportFormat};
use crate::io_util::{ensure_dir, read_json, read_to_string, write_atomic, write_json};
use crate::loss::{LossConfig, LossKind};
use crate::model::{checkpoint, ArchId, ArchitectureSpec, Classifier};
use crate::par;
use crate::saliency::{generate_teacher_saliency, ClassSelector, RiseConfig, SaliencyArchive, SaliencyGenConfig, SaliencyMethod};
use crate::training::{evaluate_roc, load_run, train_model, TrainConfig, TrainedModelRecord, LOADER_LOG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Planted(PlantedTaskSpec),
    Manifest {
        path: PathBuf,
        #[serde(default)]
        filter_correct: bool,
    },
}

impl DataConfig {
    pub fn load(&self) -> Result<DatasetBundle> {
        let bundle = match self {
            DataConfig::Planted(spec) => generate_planted_dataset(spec)?,
            DataConfig::Manifest { path, filter_correct } => load_manifest(
                path,
                LoadOptions {
                    filter_correct: *filter_correct,
                },
            )?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Best,
    Worst,
}

/// How the "worst" teacher of the transfer matrix is identified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorstMode {
    /// Lowest validation AUC among all teachers.
    TeacherVal,
    /// Among the per-architecture selected teachers, the one whose
    /// same-architecture students score lowest on EAIS.
    StudentEais,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    pub teacher_arch: ArchId,
    pub student_arch: ArchId,
    pub teacher_loss: LossConfig,
    pub student_alpha: f64,
    pub saliency_method: SaliencyMethod,
    /// Class whose CAM or RISE map the teacher emits for each TAIS image.
    pub saliency_selector: ClassSelector,
    pub rise: RiseConfig,
    pub num_seeds: usize,
    /// Explicit seed list; overrides `num_seeds` when set.
    pub seeds: Option<Vec<u64>>,
    pub selection: Selection,
    pub worst_mode: WorstMode,
    pub transfer_archs: Vec<ArchId>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            teacher_arch: ArchId::Plain,
            student_arch: ArchId::Plain,
            teacher_loss: LossConfig::cyborg(0.5),
            student_alpha: 0.5,
            saliency_method: SaliencyMethod::Cam,
            saliency_selector: ClassSelector::Predicted,
            rise: RiseConfig::default(),
            num_seeds: 5,
            seeds: None,
            selection: Selection::Best,
            worst_mode: WorstMode::TeacherVal,
            transfer_archs: ArchId::REGISTERED.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentSettings,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.experiment.seeds {
            Some(s) => s.clone(),
            None => (0..self.experiment.num_seeds as u64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if self.seeds().is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        let mut uniq = self.seeds();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds().len() {
            return Err(Error::Config("seed list has duplicates".into()));
        }
        if !(0.0..=1.0).contains(&e.student_alpha) {
            return Err(Error::Config("student_alpha must lie in [0, 1]".into()));
        }
        if e.transfer_archs.is_empty() {
            return Err(Error::Config("transfer_archs is empty".into()));
        }
        for a in e.transfer_archs.iter().chain([&e.teacher_arch, &e.student_arch]) {
            if !ArchId::REGISTERED.contains(a) {
                return Err(Error::Config(format!("architecture `{a}` is not registered")));
            }
        }
        e.teacher_loss.validate()?;
        self.train.validate()
    }
}

/// Reference to the teacher whose maps trained a student cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRef {
    pub cohort: String,
    pub arch: ArchId,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub selected_val_auc: f64,
}

impl TeacherRef {
    pub fn tag(&self) -> String {
        format!("{}-s{}", self.arch, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortRole {
    Teacher,
    Baseline1,
    Baseline2,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortResult {
    pub name: String,
    pub role: CohortRole,
    pub arch: ArchId,
    pub loss: LossConfig,
    pub saliency_method: Option<SaliencyMethod>,
    pub teacher: Option<TeacherRef>,
    pub records: Vec<TrainedModelRecord>,
    /// Split `aucs` were measured on: TAIT-val for teachers, EAIS otherwise.
    pub eval_split: Split,
    pub aucs: Vec<f64>,
    pub roc_curves: Vec<Vec<(f64, f64)>>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub train_size: usize,
    /// Teacher-saliency maps read from an archive while training.
    pub salience_reads: usize,
}

impl CohortResult {
    pub fn seeds(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.seed).collect()
    }
}

/// Teacher with the highest selected validation AUC; ties go to the lowest
/// seed.
pub fn select_teacher(records: &[TrainedModelRecord]) -> Result<&TrainedModelRecord> {
    rank_teacher(records, Selection::Best)
}

fn rank_teacher(records: &[TrainedModelRecord], selection: Selection) -> Result<&TrainedModelRecord> {
    records
        .iter()
        .reduce(|a, b| {
            let better = match selection {
                Selection::Best => b.selected_val_auc > a.selected_val_auc,
                Selection::Worst => b.selected_val_auc < a.selected_val_auc,
            };
            let tie = b.selected_val_auc == a.selected_val_auc && b.seed < a.seed;
            if better || tie {
                b
            } else {
                a
            }
        })
        .ok_or_else(|| Error::Input("cannot select a teacher from an empty cohort".into()))
}

/// One EAIS evaluation, logged for the hygiene audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EaisAccess {
    pub cohort: String,
    pub role: CohortRole,
    pub seed: u64,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub condition: String,
    pub arch: ArchId,
    pub cohort: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub student_arch: ArchId,
    pub condition: String,
    pub teacher: TeacherRef,
    pub cohort: String,
    pub mean_auc: f64,
}

/// Handle on an experiment directory plus the loaded dataset.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub bundle: DatasetBundle,
    pub resume: bool,
    log_lock: Mutex<()>,
    /// Cohorts finished by this process.
    finished: Mutex<BTreeSet<String>>,
}

const CONDITION_ORDER: [&str; 8] = [
    "teacher",
    "teacher_ce",
    "baseline1",
    "baseline2",
    "student",
    "transfer_same",
    "transfer_best",
    "transfer_worst",
];

fn condition_rank(c: &str) -> usize {
    CONDITION_ORDER.iter().position(|x| *x == c).unwrap_or(CONDITION_ORDER.len())
}

impl Experiment {
    /// Opens (creating if needed) an experiment directory and writes the
    /// config snapshot. With `resume`, an existing snapshot must match.
    pub fn open(config: ExperimentConfig, dir: &Path, resume: bool) -> Result<Self> {
        config.validate()?;
        ensure_dir(dir)?;
        let snapshot = dir.join("config.toml");
        let text = config.to_toml();
        if resume && snapshot.exists() {
            let old = ExperimentConfig::from_toml_str(&read_to_string(&snapshot)?)?;
            if old != config {
                return Err(Error::Config(format!(
                    "{} holds a different config; refusing to resume",
                    snapshot.display()
                )));
            }
        } else {
            write_atomic(&snapshot, text.as_bytes())?;
        }
        let bundle = config.data.load()?;
        Ok(Self {
            config,
            dir: dir.to_path_buf(),
            bundle,
            resume,
            log_lock: Mutex::new(()),
            finished: Mutex::new(BTreeSet::new()),
        })
    }

    fn arch_spec(&self, arch: ArchId) -> Result<ArchitectureSpec> {
        let (c, h, w) = self
            .bundle
            .image_shape()
            .ok_or_else(|| Error::Validation("dataset is empty".into()))?;
        ArchitectureSpec::new(arch, (h, w, c), self.bundle.num_classes)
    }

    pub fn cohort_dir(&self, name: &str) -> PathBuf {
        self.dir.join("cohorts").join(name)
    }

    pub fn archive_dir(&self, name: &str) -> PathBuf {
        self.dir.join("archives").join(name)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }

    fn load_cohort_if_done(&self, name: &str) -> Result<Option<CohortResult>> {
        let path = self.cohort_dir(name).join("cohort.json");
        let here = self.finished.lock().expect("cohort set").contains(name);
        if (self.resume || here) && path.exists() {
            if !here {
                info!("resume: cohort {name} already complete");
            }
            return Ok(Some(read_json(&path)?));
        }
        Ok(None)
    }

    fn log_eais(&self, entry: &EaisAccess) -> Result<()> {
        let _guard = self.log_lock.lock().expect("log lock");
        let path = self.dir.join("eais_access.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(entry).expect("entry serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn evaluate_eais(
        &self,
        cohort: &str,
        role: CohortRole,
        record: &TrainedModelRecord,
        model: &Classifier,
    ) -> Result<(f64, Vec<(f64, f64)>)> {
        self.log_eais(&EaisAccess {
            cohort: cohort.to_string(),
            role,
            seed: record.seed,
            checkpoint_hash: record.checkpoint_hash.clone(),
        })?;
        evaluate_roc(model, &self.bundle.eais)
    }

    /// Trains (or, when resuming, reloads) one run per seed.
    fn train_runs(
        &self,
        name: &str,
        arch: ArchId,
        loss: LossConfig,
        train: &[Sample],
        archive: Option<&SaliencyArchive>,
    ) -> Result<Vec<(TrainedModelRecord, Classifier)>> {
        let spec = self.arch_spec(arch)?;
        let seeds = self.config.seeds();
        par::try_map(&seeds, |&seed| {
            let run_dir = self.cohort_dir(name).join(format!("seed_{seed}"));
            if self.resume && run_dir.join(crate::training::RECORD_FILE).exists() {
                return load_run(&run_dir);
            }
            let cfg = TrainConfig {
                seed,
                loss,
                ..self.config.train.clone()
            };
            train_model(&spec, train, &self.bundle.tait_val, &cfg, archive, &run_dir)
        })
    }

    fn finish_cohort(&self, mut result: CohortResult) -> Result<CohortResult> {
        let (m, s) = aggregate_runs(&result.aucs)?;
        result.mean_auc = m;
        result.std_auc = s;
        write_json(&self.cohort_dir(&result.name).join("cohort.json"), &result)?;
        self.finished.lock().expect("cohort set").insert(result.name.clone());
        info!("cohort {}: mean AUC {:.4} ± {:.4} on {}", result.name, m, s, result.eval_split);
        Ok(result)
    }

    pub fn teacher_cohort_name(arch: ArchId, loss: &LossConfig) -> String {
        match loss.kind {
            LossKind::Cyborg => format!("teacher_{arch}_cyborg_a{}", loss.alpha),
            LossKind::CrossEntropy => format!("teacher_{arch}_ce"),
        }
    }

    /// Teachers train on TAIT-train and are scored on TAIT-val only.
    pub fn train_teacher_cohort(&self, arch: ArchId, loss: LossConfig) -> Result<CohortResult> {
        let name = Self::teacher_cohort_name(arch, &loss);
        if let Some(done) = self.load_cohort_if_done(&name)? {
            return Ok(done);
        }
        let runs = self.train_runs(&name, arch, loss, &self.bundle.tait_train, None)?;
        let mut curves = Vec::new();
        for (_, m) in &runs {
            curves.push(evaluate_roc(m, &self.bundle.tait_val)?.1);
        }
        let records: Vec<TrainedModelRecord> = runs.into_iter().map(|(r, _)| r).collect();
        self.finish_cohort(CohortResult {
            name,
            role: CohortRole::Teacher,
            arch,
            loss,
            saliency_method: None,
            teacher: None,
            aucs: records.iter().map(|r| r.selected_val_auc).collect(),
            records,
            eval_split: Split::TaitVal,
            roc_curves: curves,
            mean_auc: 0.0,
            std_auc: 0.0,
            train_size: self.bundle.tait_train.len(),
            salience_reads: 0,
        })
    }

    pub fn teacher_ref(&self, cohort: &CohortResult, record: &TrainedModelRecord) -> TeacherRef {
        TeacherRef {
            cohort: cohort.name.clone(),
            arch: cohort.arch,
            seed: record.seed,
            checkpoint_hash: record.checkpoint_hash.clone(),
            selected_val_auc: record.selected_val_auc,
        }
    }

    pub fn pick_teacher(&self, cohort: &CohortResult, selection: Selection) -> Result<TeacherRef> {
        let r = rank_teacher(&cohort.records, selection)?;
        Ok(self.teacher_ref(cohort, r))
    }

    fn load_teacher(&self, teacher: &TeacherRef) -> Result<Classifier> {
        let run = self.cohort_dir(&teacher.cohort).join(format!("seed_{}", teacher.seed));
        let (record, model) = load_run(&run)?;
        if record.checkpoint_hash != teacher.checkpoint_hash {
            return Err(Error::Validation(format!("teacher {} checkpoint changed", teacher.tag())));
        }
        Ok(model)
    }

    fn archive_name(&self, teacher: &TeacherRef) -> String {
        format!("{}_{}", teacher.tag(), self.config.experiment.saliency_method)
    }

    /// Teacher saliency for every TAIS sample.
    pub fn annotate_tais(&self, teacher: &TeacherRef) -> Result<SaliencyArchive> {
        let dir = self.archive_dir(&self.archive_name(teacher));
        let e = &self.config.experiment;
        let cfg = SaliencyGenConfig {
            method: e.saliency_method,
            selector: e.saliency_selector,
            rise: e.rise.clone(),
        };
        let model = self.load_teacher(teacher)?;
        // Maps left behind by a different teacher checkpoint are regenerated.
        let stale = dir.join("index.jsonl").exists()
            && SaliencyArchive::open(&dir)?.checkpoint_hash() != Some(teacher.checkpoint_hash.as_str());
        let report = generate_teacher_saliency(&model, &teacher.checkpoint_hash, &self.bundle.tais, &cfg, &dir, stale)?;
        info!("archive {}: {} written, {} reused", dir.display(), report.written, report.skipped);
        SaliencyArchive::open(&dir)
    }

    pub fn student_cohort_name(&self, student_arch: ArchId, teacher: &TeacherRef, alpha: f64) -> String {
        format!(
            "student_{student_arch}_{}_a{alpha}_t{}",
            self.config.experiment.saliency_method,
            teacher.tag()
        )
    }

    /// Students train on TAIS with the teacher's maps and are scored on EAIS.
    pub fn train_student_cohort(
        &self,
        student_arch: ArchId,
        teacher: &TeacherRef,
        alpha: f64,
        archive: &SaliencyArchive,
    ) -> Result<CohortResult> {
        let name = self.student_cohort_name(student_arch, teacher, alpha);
        if let Some(done) = self.load_cohort_if_done(&name)? {
            return Ok(done);
        }
        let missing: Vec<&str> = self
            .bundle
            .tais
            .iter()
            .filter(|s| !archive.contains(&s.id))
            .map(|s| s.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!("archive misses {} TAIS ids", missing.len())));
        }
        let before = archive.reads();
        let loss = LossConfig::cyborg(alpha);
        let runs = self.train_runs(&name, student_arch, loss, &self.bundle.tais, Some(archive))?;
        let reads = archive.reads() - before;
        self.eais_cohort(
            name,
            CohortRole::Student,
            student_arch,
            loss,
            Some(self.config.experiment.saliency_method),
            Some(teacher.clone()),
            runs,
            self.bundle.tais.len(),
            reads,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn eais_cohort(
        &self,
        name: String,
        role: CohortRole,
        arch: ArchId,
        loss: LossConfig,
        saliency_method: Option<SaliencyMethod>,
        teacher: Option<TeacherRef>,
        runs: Vec<(TrainedModelRecord, Classifier)>,
        train_size: usize,
        salience_reads: usize,
    ) -> Result<CohortResult> {
        let mut aucs = Vec::new();
        let mut curves = Vec::new();
        for (r, m) in &runs {
            let (auc, curve) = self.evaluate_eais(&name, role, r, m)?;
            aucs.push(auc);
            curves.push(curve);
        }
        self.finish_cohort(CohortResult {
            name,
            role,
            arch,
            loss,
            saliency_method,
            teacher,
            records: runs.into_iter().map(|(r, _)| r).collect(),
            eval_split: Split::Eais,
            aucs,
            roc_curves: curves,
            mean_auc: 0.0,
            std_auc: 0.0,
            train_size,
            salience_reads,
        })
    }

    /// Human-guided models on the small annotated split, scored directly on
    /// EAIS: the guided teacher cohort of the student architecture.
    pub fn run_baseline1(&self) -> Result<CohortResult> {
        let arch = self.config.experiment.student_arch;
        let loss = self.guided_teacher_loss();
        let name = format!("baseline1_{arch}");
        if let Some(done) = self.load_cohort_if_done(&name)? {
            return Ok(done);
        }
        let teachers = self.train_teacher_cohort(arch, loss)?;
        let mut runs = Vec::new();
        for r in &teachers.records {
            let (_, m) = load_run(&self.cohort_dir(&teachers.name).join(format!("seed_{}", r.seed)))?;
            runs.push((r.clone(), m));
        }
        self.eais_cohort(
            name,
            CohortRole::Baseline1,
            arch,
            loss,
            None,
            None,
            runs,
            self.bundle.tait_train.len(),
            0,
        )
    }

    fn guided_teacher_loss(&self) -> LossConfig {
        match self.config.experiment.teacher_loss.kind {
            LossKind::Cyborg => self.config.experiment.teacher_loss,
            LossKind::CrossEntropy => LossConfig::cyborg(0.5),
        }
    }

    /// Conventional cross-entropy models on TAIT-train ∪ TAIS.
    pub fn run_baseline2(&self) -> Result<CohortResult> {
        let arch = self.config.experiment.student_arch;
        let name = format!("baseline2_{arch}");
        if let Some(done) = self.load_cohort_if_done(&name)? {
            return Ok(done);
        }
        let mut train: Vec<Sample> = self.bundle.tait_train.clone();
        train.extend(self.bundle.tais.iter().cloned());
        for s in &mut train {
            s.salience = None;
        }
        let loss = LossConfig::cross_entropy();
        let runs = self.train_runs(&name, arch, loss, &train, None)?;
        self.eais_cohort(name, CohortRole::Baseline2, arch, loss, None, None, runs, train.len(), 0)
    }

    /// Teacher cohort, selection, annotation and student cohort.
    pub fn run_student_condition(&self) -> Result<CohortResult> {
        let e = &self.config.experiment;
        let teachers = self.train_teacher_cohort(e.teacher_arch, e.teacher_loss)?;
        self.record_condition(teacher_condition(&e.teacher_loss), e.teacher_arch, &teachers.name)?;
        let teacher = self.pick_teacher(&teachers, e.selection)?;
        write_json(&self.dir.join("selected_teacher.json"), &teacher)?;
        let archive = self.annotate_tais(&teacher)?;
        let students = self.train_student_cohort(e.student_arch, &teacher, e.student_alpha, &archive)?;
        self.record_condition("student", e.student_arch, &students.name)?;
        Ok(students)
    }

    /// For each student architecture, student cohorts trained on maps from
    /// the same-architecture teacher, the best teacher overall, and the
    /// worst teacher overall. Coinciding teachers share one cohort.
    pub fn run_transfer_matrix(&self) -> Result<Vec<TransferCell>> {
        let e = &self.config.experiment;
        let loss = self.guided_teacher_loss();
        let mut cohorts = Vec::new();
        for &arch in &e.transfer_archs {
            cohorts.push(self.train_teacher_cohort(arch, loss)?);
        }
        let mut same = BTreeMap::new();
        let mut pool = Vec::new();
        for c in &cohorts {
            same.insert(c.arch.name(), self.pick_teacher(c, Selection::Best)?);
            for r in &c.records {
                pool.push(self.teacher_ref(c, r));
            }
        }
        let by_val = |sel: Selection| -> TeacherRef {
            pool.iter()
                .reduce(|a, b| {
                    let better = match sel {
                        Selection::Best => b.selected_val_auc > a.selected_val_auc,
                        Selection::Worst => b.selected_val_auc < a.selected_val_auc,
                    };
                    if better {
                        b
                    } else {
                        a
                    }
                })
                .expect("non-empty pool")
                .clone()
        };
        let best = by_val(Selection::Best);
        let mut cells = Vec::new();
        let mut run = |student: ArchId, condition: &str, teacher: &TeacherRef| -> Result<CohortResult> {
            let archive = self.annotate_tais(teacher)?;
            let c = self.train_student_cohort(student, teacher, e.student_alpha, &archive)?;
            cells.push(TransferCell {
                student_arch: student,
                condition: condition.to_string(),
                teacher: teacher.clone(),
                cohort: c.name.clone(),
                mean_auc: c.mean_auc,
            });
            Ok(c)
        };
        let mut same_means = Vec::new();
        for &s in &e.transfer_archs {
            let c = run(s, "transfer_same", &same[s.name()])?;
            same_means.push((c.mean_auc, same[s.name()].clone()));
            run(s, "transfer_best", &best)?;
        }
        let worst = match e.worst_mode {
            WorstMode::TeacherVal => by_val(Selection::Worst),
            WorstMode::StudentEais => same_means
                .iter()
                .reduce(|a, b| if b.0 < a.0 { b } else { a })
                .expect("non-empty")
                .1
                .clone(),
        };
        for &s in &e.transfer_archs {
            run(s, "transfer_worst", &worst)?;
        }
        for c in &cells {
            self.record_condition(&c.condition, c.student_arch, &c.cohort)?;
        }
        write_json(&self.dir.join("transfer.json"), &cells)?;
        Ok(cells)
    }

    pub fn record_condition(&self, condition: &str, arch: ArchId, cohort: &str) -> Result<()> {
        let path = self.dir.join("conditions.json");
        let mut entries: Vec<ConditionEntry> = if path.exists() { read_json(&path)? } else { Vec::new() };
        entries.retain(|e| !(e.condition == condition && e.arch == arch));
        entries.push(ConditionEntry {
            condition: condition.to_string(),
            arch,
            cohort: cohort.to_string(),
        });
        entries.sort_by(|a, b| {
            (condition_rank(&a.condition), &a.condition, a.arch.name()).cmp(&(
                condition_rank(&b.condition),
                &b.condition,
                b.arch.name(),
            ))
        });
        write_json(&path, &entries)
    }

    pub fn run_teacher_condition(&self) -> Result<CohortResult> {
        let e = &self.config.experiment;
        let c = self.train_teacher_cohort(e.teacher_arch, e.teacher_loss)?;
        self.record_condition(teacher_condition(&e.teacher_loss), e.teacher_arch, &c.name)?;
        let t = self.pick_teacher(&c, e.selection)?;
        write_json(&self.dir.join("selected_teacher.json"), &t)?;
        Ok(c)
    }

    pub fn run_baseline1_condition(&self) -> Result<CohortResult> {
        let c = self.run_baseline1()?;
        self.record_condition("baseline1", c.arch, &c.name)?;
        Ok(c)
    }

    pub fn run_baseline2_condition(&self) -> Result<CohortResult> {
        let c = self.run_baseline2()?;
        self.record_condition("baseline2", c.arch, &c.name)?;
        Ok(c)
    }

    /// Teacher cohort → selection → annotation → students → both baselines.
    pub fn run_full(&self) -> Result<()> {
        self.run_student_condition()?;
        self.run_baseline1_condition()?;
        self.run_baseline2_condition()?;
        Ok(())
    }
}

fn teacher_condition(loss: &LossConfig) -> &'static str {
    match loss.kind {
        LossKind::Cyborg => "teacher",
        LossKind::CrossEntropy => "teacher_ce",
    }
}

fn saliency_label(c: &CohortResult) -> String {
    match (c.role, c.saliency_method) {
        (_, Some(m)) => m.to_string(),
        (CohortRole::Teacher | CohortRole::Baseline1, None) if c.loss.kind == LossKind::Cyborg => "ground_truth".into(),
        _ => "none".into(),
    }
}

/// Rebuilds the experiment summary from persisted cohort files.
pub fn load_summary(dir: &Path) -> Result<ExperimentSummary> {
    let path = dir.join("conditions.json");
    if !path.exists() {
        return Err(Error::Input(format!(
            "{} is not an experiment directory (no conditions.json)",
            dir.display()
        )));
    }
    let entries: Vec<ConditionEntry> = read_json(&path)?;
    let mut conditions = Vec::new();
    for e in entries {
        let c: CohortResult = read_json(&dir.join("cohorts").join(&e.cohort).join("cohort.json"))?;
        let (mean, std) = aggregate_runs(&c.aucs)?;
        conditions.push(ConditionSummary {
            condition: e.condition.clone(),
            arch: e.arch.to_string(),
            saliency_method: saliency_label(&c),
            alpha: (c.loss.kind == LossKind::Cyborg).then_some(c.loss.alpha),
            eval_split: c.eval_split.to_string(),
            seeds: c.seeds(),
            n_seeds: c.aucs.len(),
            aucs: c.aucs,
            mean_auc: mean,
            std_auc: std,
            roc_curves: c.roc_curves,
        });
    }
    Ok(ExperimentSummary { conditions })
}

pub fn write_report(dir: &Path, format: ReportFormat) -> Result<ExperimentSummary> {
    let summary = load_summary(dir)?;
    emit_report(&summary, &dir.join("report"), format)?;
    Ok(summary)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HygieneReport {
    pub runs_checked: usize,
    pub loader_lines_checked: usize,
    /// `(run dir, id)` for every EAIS id found in a loader log.
    pub eais_ids_in_loaders: Vec<(String, String)>,
    pub eais_accesses: usize,
    /// EAIS evaluations of teacher checkpoints outside Baseline 1.
    pub teacher_eais_violations: Vec<EaisAccess>,
    /// Archives holding maps for ids outside TAIS.
    pub archive_violations: Vec<String>,
}

impl HygieneReport {
    pub fn is_clean(&self) -> bool {
        self.runs_checked > 0
            && self.eais_ids_in_loaders.is_empty()
            && self.teacher_eais_violations.is_empty()
            && self.archive_violations.is_empty()
    }
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Scans loader logs, the EAIS access log and archive indexes.
pub fn audit_hygiene(dir: &Path, bundle: &DatasetBundle) -> Result<HygieneReport> {
    let eais: BTreeSet<&str> = bundle.ids(Split::Eais).collect();
    let tais: BTreeSet<&str> = bundle.ids(Split::Tais).collect();
    let mut report = HygieneReport::default();
    let mut teacher_hashes = BTreeSet::new();
    for cohort in subdirs(&dir.join("cohorts"))? {
        let meta = cohort.join("cohort.json");
        if meta.exists() {
            let c: CohortResult = read_json(&meta)?;
            if c.role == CohortRole::Teacher {
                teacher_hashes.extend(c.records.iter().map(|r| r.checkpoint_hash.clone()));
            }
        }
        for run in subdirs(&cohort)? {
            let log = run.join(LOADER_LOG);
            if !log.exists() {
                continue;
            }
            report.runs_checked += 1;
            for line in read_to_string(&log)?.lines() {
                report.loader_lines_checked += 1;
                let id = line.split('\t').nth(1).unwrap_or("");
                if eais.contains(id) {
                    report.eais_ids_in_loaders.push((run.display().to_string(), id.to_string()));
                }
            }
        }
    }
    let access = dir.join("eais_access.jsonl");
    if access.exists() {
        for line in read_to_string(&access)?.lines().filter(|l| !l.trim().is_empty()) {
            let a: EaisAccess = serde_json::from_str(line).map_err(|e| Error::format(&access, e.to_string()))?;
            report.eais_accesses += 1;
            if teacher_hashes.contains(&a.checkpoint_hash) && a.role != CohortRole::Baseline1 {
                report.teacher_eais_violations.push(a);
            }
        }
    }
    for archive in subdirs(&dir.join("archives"))? {
        let a = SaliencyArchive::open(&archive)?;
        for e in a.entries() {
            if !tais.contains(e.id.as_str()) {
                report.archive_violations.push(format!("{}: {}", archive.display(), e.id));
            }
        }
    }
    Ok(report)
}

/// Human-readable one-line summary of a cohort.
pub fn describe(c: &CohortResult) -> String {
    let mut s = String::new();
    write!(s, "{} [{}] {} seeds: {:.4} ± {:.4}", c.name, c.eval_split, c.aucs.len(), c.mean_auc, c.std_auc).unwrap();
    s
}

/// Checks that a checkpoint file still matches its recorded hash.
pub fn verify_checkpoint(run_dir: &Path, record: &TrainedModelRecord) -> Result<bool> {
    Ok(checkpoint::file_hash(&run_dir.join(&record.checkpoint_ref))? == record.checkpoint_hash)
}
