//! One training job: minibatch SGD with a step learning-rate schedule,
//! per-epoch validation AUC, and best-epoch checkpointing.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resize_salience, ResizeMode, Sample, SalienceMap};
use crate::data::resize::bilinear_grid;
use crate::error::{Error, Result};
use crate::eval::{compute_auc, roc_curve, ScoredSet};
use crate::io_util::{ensure_dir, read_json, write_atomic, write_json};
use crate::loss::{cyborg_loss_grad, softmax_backward, BatchLossInputs, LossConfig, LossKind};
use crate::model::{checkpoint, softmax, ArchId, ArchitectureSpec, Classifier};
use crate::par;
use crate::saliency::{normalize_backward, normalize_values, raw_cam, raw_cam_backward, SaliencyArchive};
use crate::tensor::Tensor;

/// Class whose probability is the positive score for AUC.
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonResolution {
    /// Teacher maps are resampled to the model's feature grid.
    FeatureGrid,
    /// The model's CAM is upsampled to the input size.
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Rescale each batch gradient to at most this L2 norm. Off when `None`.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
    pub saliency_comparison_resolution: ComparisonResolution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            base_lr: 0.005,
            lr_decay_factor: 0.1,
            lr_decay_every: 12,
            batch_size: 32,
            momentum: 0.0,
            grad_clip_norm: None,
            seed: 0,
            loss: LossConfig::cyborg(0.5),
            saliency_comparison_resolution: ComparisonResolution::FeatureGrid,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config("max_epochs, batch_size and lr_decay_every must be positive".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        self.loss.validate()
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModelRecord {
    pub arch_id: ArchId,
    pub seed: u64,
    pub loss: LossConfig,
    /// Checkpoint path relative to the run directory.
    pub checkpoint_ref: String,
    pub checkpoint_hash: String,
    pub train_loss_history: Vec<f64>,
    pub val_auc_history: Vec<f64>,
    pub selected_epoch: usize,
    pub selected_val_auc: f64,
}

/// Training target for one sample, prepared once per run.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub image: &'a Tensor,
    pub label: usize,
    /// Teacher map already at the comparison resolution.
    pub target: Option<Vec<f64>>,
}

/// Dense matrix for the bilinear upsampling of a feature-grid map to the
/// input, stored row-major as `target × source`.
#[derive(Debug, Clone)]
struct Upsampler {
    source: usize,
    matrix: Vec<f64>,
}

impl Upsampler {
    fn new(source: (usize, usize), target: (usize, usize)) -> Self {
        let n = source.0 * source.1;
        let t = target.0 * target.1;
        let mut matrix = vec![0.0; t * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for (i, v) in bilinear_grid(&e, source, target).into_iter().enumerate() {
                matrix[i * n + j] = v;
            }
        }
        Self { source: n, matrix }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks_exact(self.source)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn transpose_apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.source];
        for (row, gi) in self.matrix.chunks_exact(self.source).zip(g) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * gi;
            }
        }
        out
    }
}

/// Loss and gradient machinery bound to one model geometry.
#[derive(Debug, Clone)]
pub struct Objective {
    loss: LossConfig,
    resolution: (usize, usize),
    upsampler: Option<Upsampler>,
}

impl Objective {
    pub fn new(spec: &ArchitectureSpec, loss: LossConfig, comparison: ComparisonResolution) -> Self {
        let (h, w, _) = spec.input_shape;
        let (resolution, upsampler) = match (loss.kind, comparison) {
            (LossKind::Cyborg, ComparisonResolution::Input) if spec.feature_grid != (h, w) => {
                ((h, w), Some(Upsampler::new(spec.feature_grid, (h, w))))
            }
            (_, ComparisonResolution::Input) => ((h, w), None),
            (_, ComparisonResolution::FeatureGrid) => (spec.feature_grid, None),
        };
        Self {
            loss,
            resolution,
            upsampler,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    /// Resamples a teacher map to the comparison resolution and stretches it
    /// back to `[0, 1]`.
    pub fn prepare_target(&self, map: &SalienceMap) -> Vec<f64> {
        let (h, w) = map.resolution();
        let mode = if h >= self.resolution.0 && w >= self.resolution.1 {
            ResizeMode::AreaAverage
        } else {
            ResizeMode::Bilinear
        };
        normalize_values(resize_salience(map, self.resolution, mode).grid())
    }

    /// Loss of one sample scaled by `1 / batch`, accumulating its gradient
    /// into `grads`.
    fn sample_loss_grad(&self, model: &Classifier, item: &TrainItem, batch: usize, grads: &mut [f64]) -> Result<f64> {
        let pass = model.forward_one(item.image)?;
        let probs = softmax(&pass.logits);
        let y = item.label;
        let cyborg = self.loss.kind == LossKind::Cyborg;
        let (raw, model_map) = if cyborg {
            let raw = raw_cam(pass.features(), model.classifier_weights(y)?);
            let norm = normalize_values(&raw);
            let m = match &self.upsampler {
                Some(u) => u.apply(&norm),
                None => norm,
            };
            (raw, m)
        } else {
            (Vec::new(), Vec::new())
        };
        let inputs = BatchLossInputs {
            class_probabilities: vec![probs.clone()],
            labels: vec![y],
            teacher_maps: vec![item.target.clone().unwrap_or_default()],
            model_maps: vec![model_map],
        };
        let lg = cyborg_loss_grad(&inputs, &self.loss)?;
        let scale = 1.0 / batch as f64;
        let mut dlogits = softmax_backward(&probs, &lg.d_probabilities[0]);
        for d in &mut dlogits {
            *d *= scale;
        }
        if !cyborg {
            model.backward(&pass, &dlogits, None, grads);
            return Ok(lg.loss * scale);
        }
        let mut dmap: Vec<f64> = lg.d_model_maps[0].iter().map(|g| g * scale).collect();
        if let Some(u) = &self.upsampler {
            dmap = u.transpose_apply(&dmap);
        }
        let draw = normalize_backward(&raw, &dmap);
        let (gf, gw) = raw_cam_backward(pass.features(), model.classifier_weights(y)?, &draw);
        model.backward(&pass, &dlogits, Some(&gf), grads);
        for (g, d) in grads[model.head_row_range(y)].iter_mut().zip(gw) {
            *g += d;
        }
        Ok(lg.loss * scale)
    }

    /// Mean loss over `items` and its gradient with respect to every model
    /// parameter. Per-sample work runs in parallel; the reduction is ordered.
    pub fn batch_loss_and_grad(&self, model: &Classifier, items: &[TrainItem]) -> Result<(f64, Vec<f64>)> {
        let n = model.num_parameters();
        let k = items.len();
        let parts = par::try_map(items, |item| -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; n];
            let l = self.sample_loss_grad(model, item, k, &mut g)?;
            Ok((l, g))
        })?;
        let mut grads = vec![0.0; n];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((loss, grads))
    }
}

/// Softmax score of the positive class for every sample.
pub fn positive_scores(model: &Classifier, samples: &[Sample]) -> Result<ScoredSet> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let (logits, _) = model.forward(&images)?;
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label > 1 {
            return Err(Error::Input(format!("sample `{}` has non-binary label {}", s.id, s.label)));
        }
        labels.push(u8::from(s.label == POSITIVE_CLASS));
    }
    Ok(ScoredSet::new(
        logits.iter().map(|l| softmax(l)[POSITIVE_CLASS]).collect(),
        labels,
    ))
}

pub fn evaluate_auc(model: &Classifier, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::UndefinedAuc("empty split".into()));
    }
    compute_auc(&positive_scores(model, samples)?)
}

/// AUC plus the ROC curve, for reporting.
pub fn evaluate_roc(model: &Classifier, samples: &[Sample]) -> Result<(f64, Vec<(f64, f64)>)> {
    let s = positive_scores(model, samples)?;
    Ok((compute_auc(&s)?, roc_curve(&s)?))
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RECORD_FILE: &str = "record.json";
pub const LOADER_LOG: &str = "loader.log";

fn build_items<'a>(
    samples: &'a [Sample],
    objective: &Objective,
    archive: Option<&SaliencyArchive>,
) -> Result<Vec<TrainItem<'a>>> {
    if !objective.loss.uses_saliency() {
        return Ok(samples
            .iter()
            .map(|s| TrainItem {
                image: &s.image,
                label: s.label,
                target: None,
            })
            .collect());
    }
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| match archive {
            Some(a) => !a.contains(&s.id),
            None => s.salience.is_none(),
        })
        .map(|s| s.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "guided loss needs salience for every training sample; {} missing: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    samples
        .iter()
        .map(|s| {
            let map = match archive {
                Some(a) => a.load(&s.id)?,
                None => s.salience.clone().expect("checked above"),
            };
            Ok(TrainItem {
                image: &s.image,
                label: s.label,
                target: Some(objective.prepare_target(&map)),
            })
        })
        .collect()
}

fn write_loader_log(run_dir: &Path, train: &[Sample], val: &[Sample]) -> Result<()> {
    let mut log = String::new();
    for s in train {
        writeln!(log, "train\t{}", s.id).unwrap();
    }
    for s in val {
        writeln!(log, "val\t{}", s.id).unwrap();
    }
    write_atomic(&run_dir.join(LOADER_LOG), log.as_bytes())
}

/// Trains one model and persists `config.json`, `metrics.csv`, `loader.log`,
/// the best-epoch checkpoint, and `record.json` under `run_dir`.
///
fn clip_norm(g: &mut [f64], max: f64) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// When `teacher_saliency` is given, guided-loss targets come from the archive
/// rather than from the samples' own maps.
pub fn train_model(
    arch: &ArchitectureSpec,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    teacher_saliency: Option<&SaliencyArchive>,
    run_dir: &Path,
) -> Result<(TrainedModelRecord, Classifier)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let objective = Objective::new(arch, cfg.loss, cfg.saliency_comparison_resolution);
    let items = build_items(train, &objective, teacher_saliency)?;
    ensure_dir(run_dir)?;
    write_json(&run_dir.join("config.json"), &(arch, cfg))?;
    write_loader_log(run_dir, train, val)?;

    let mut model = crate::model::build_model(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut velocity = vec![0.0; model.num_parameters()];
    let mut metrics = String::from("epoch,lr,train_loss,val_auc\n");
    let mut train_loss_history = Vec::with_capacity(cfg.max_epochs);
    let mut val_auc_history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, String)> = None;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);

    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, mut grads) = objective.batch_loss_and_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            if let Some(max) = cfg.grad_clip_norm {
                clip_norm(&mut grads, max);
            }
            for ((p, v), g) in model.parameters_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        let train_loss = epoch_loss / items.len() as f64;
        let val_auc = evaluate_auc(&model, val)?;
        debug!("epoch {epoch}: lr {lr:e} loss {train_loss:.6} val_auc {val_auc:.6}");
        writeln!(metrics, "{epoch},{lr:e},{train_loss:.9},{val_auc:.9}").unwrap();
        train_loss_history.push(train_loss);
        val_auc_history.push(val_auc);
        if best.as_ref().map_or(true, |b| val_auc > b.1) {
            let hash = checkpoint::save(&model, epoch, &ckpt_path)?;
            best = Some((epoch, val_auc, hash));
        }
    }
    write_atomic(&run_dir.join("metrics.csv"), metrics.as_bytes())?;
    let (selected_epoch, selected_val_auc, checkpoint_hash) = best.expect("at least one epoch");
    let record = TrainedModelRecord {
        arch_id: arch.arch_id,
        seed: cfg.seed,
        loss: cfg.loss,
        checkpoint_ref: CHECKPOINT_FILE.to_string(),
        checkpoint_hash,
        train_loss_history,
        val_auc_history,
        selected_epoch,
        selected_val_auc,
    };
    write_json(&run_dir.join(RECORD_FILE), &record)?;
    info!(
        "{} seed {}: best val AUC {:.4} at epoch {}",
        arch.arch_id, cfg.seed, selected_val_auc, selected_epoch
    );
    let (best_model, _) = checkpoint::load(&ckpt_path)?;
    Ok((record, best_model))
}

/// Loads a finished run, verifying its checkpoint hash.
pub fn load_run(run_dir: &Path) -> Result<(TrainedModelRecord, Classifier)> {
    let record: TrainedModelRecord = read_json(&run_dir.join(RECORD_FILE))?;
    let path = run_dir.join(&record.checkpoint_ref);
    let hash = checkpoint::file_hash(&path)?;
    if hash != record.checkpoint_hash {
        return Err(Error::Validation(format!(
            "checkpoint {} hash {hash} does not match record",
            path.display()
        )));
    }
    let (model, _) = checkpoint::load(&path)?;
    Ok((record, model))
}
