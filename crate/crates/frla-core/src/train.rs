//! Pretraining, the adaptation loop, evaluation, and CAM export.
//!
//! The adaptation loop follows the fixed recipe: refresh the memory bank
//! before each epoch (no augmentation), then per shuffled batch compute the
//! distillation loss against the frozen teacher, the forgetting-resistant
//! loss over the bank's confident subset, and — while the attenuating
//! weight is positive — the patch loss over filtered and rectified teacher
//! patches; sum, backprop, and take an SGD-momentum step. Teacher
//! parameters and bank contents never receive gradients.

use crate::bank::MemoryBank;
use crate::config::RunConfig;
use crate::data::{augment, batch_ids, LabeledDataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::losses::{
    lesion_weight, loss_dis, loss_fr, loss_im, loss_la, total_loss, LossReport,
};
use crate::models::{
    target_forward_patches, MockViL, TargetModel,
};
use crate::patches::{filter_inconsistent, rectify_class_balance, target_patches_aligned};
use crate::rng::derive_seed;
use crate::tensor::{Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

// seed-derivation tags, one per random decision stream
const TAG_SRC_SHUFFLE: u64 = 0x10;
const TAG_SRC_AUG: u64 = 0x11;
const TAG_VIL_SHUFFLE: u64 = 0x20;
const TAG_VIL_AUG: u64 = 0x21;
const TAG_ADAPT_SHUFFLE: u64 = 0x30;
const TAG_ADAPT_AUG: u64 = 0x31;

/// Classical heavy-ball SGD: v ← μ·v + g; p ← p − lr·v.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// One update over all parameters; each tensor must hold its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!(
                    "optimizer tracks {} parameters, got {}",
                    self.velocity.len(),
                    params.len()
                ),
            ));
        }
        for (v, p) in self.velocity.iter_mut().zip(params.iter_mut()) {
            if v.len() != p.numel() {
                return Err(Error::shape(
                    "sgd_momentum_step",
                    format!("velocity {} vs parameter {}", v.len(), p.numel()),
                ));
            }
            let g = p
                .grad()
                .ok_or_else(|| Error::usage("sgd_momentum_step", "parameter missing gradient"))?
                .to_vec();
            let lr = self.lr;
            let mu = self.momentum;
            let values = p.values_mut();
            for i in 0..values.len() {
                v[i] = mu * v[i] + g[i];
                values[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Per-class accuracy in percent plus the unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class_accuracy: Vec<f64>,
    pub average: f64,
    pub n_per_class: Vec<usize>,
}

/// Accuracy counting from prediction/label streams; the forward-pass-free
/// core of `evaluate`.
pub fn metrics_from_predictions(preds: &[usize], labels: &[u16], k: usize) -> Result<Metrics> {
    assert_eq!(preds.len(), labels.len());
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        total[y as usize] += 1;
        if p == y as usize {
            correct[y as usize] += 1;
        }
    }
    if let Some(class) = total.iter().position(|&t| t == 0) {
        return Err(Error::EmptyClass { class });
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| 100.0 * correct[c] as f64 / total[c] as f64)
        .collect();
    let average = per_class.iter().sum::<f64>() / k as f64;
    Ok(Metrics {
        per_class_accuracy: per_class,
        average,
        n_per_class: total,
    })
}

/// Average class accuracy on a labeled dataset; no augmentation.
pub fn evaluate(model: &TargetModel, ds: &LabeledDataset, batch_size: usize) -> Result<Metrics> {
    if ds.num_classes != model.arch.num_classes {
        return Err(Error::shape(
            "evaluate",
            format!(
                "dataset has {} classes, model {}",
                ds.num_classes, model.arch.num_classes
            ),
        ));
    }
    let k = model.arch.num_classes;
    let ids: Vec<usize> = (0..ds.n).collect();
    let mut preds = Vec::with_capacity(ds.n);
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = ds.batch_images(chunk)?;
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let f = staged.features(&mut tape, &batch)?;
        let probs = staged.image_head(&mut tape, &f)?;
        for row in tape.value(probs).chunks(k) {
            preds.push(argmax(row));
        }
    }
    metrics_from_predictions(&preds, ds.labels(), k)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

// ── run log ─────────────────────────────────────────────────────────────

/// One line of the JSON-lines run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record")]
pub enum LogRecord {
    #[serde(rename = "iter")]
    Iter {
        iter: usize,
        l_dis: f64,
        l_fr: f64,
        l_la: f64,
        total: f64,
        b_prime: usize,
        l_patches: usize,
        lesion_weight: f64,
    },
    #[serde(rename = "epoch")]
    Epoch {
        epoch: usize,
        per_class: Vec<f64>,
        average: f64,
    },
}

/// Everything one adaptation run produced: the per-iteration loss stream,
/// per-epoch metrics (epoch 0 is the unadapted source model), and wall
/// time. Wall time stays out of the JSON-lines artifact so identical
/// configs produce bit-identical logs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub reports: Vec<LossReport>,
    pub epoch_metrics: Vec<(usize, Metrics)>,
    pub batches_per_epoch: usize,
    pub elapsed_seconds: f64,
}

impl RunLog {
    pub fn records(&self) -> Vec<LogRecord> {
        let mut out = Vec::new();
        let mut iter_idx = 0usize;
        for (epoch, m) in &self.epoch_metrics {
            if *epoch > 0 {
                let end = (iter_idx + self.batches_per_epoch).min(self.reports.len());
                for (i, r) in self.reports[iter_idx..end].iter().enumerate() {
                    out.push(LogRecord::Iter {
                        iter: iter_idx + i,
                        l_dis: r.l_dis,
                        l_fr: r.l_fr,
                        l_la: r.l_la,
                        total: r.total,
                        b_prime: r.b_prime,
                        l_patches: r.l_patches,
                        lesion_weight: r.lesion_weight,
                    });
                }
                iter_idx = end;
            }
            out.push(LogRecord::Epoch {
                epoch: *epoch,
                per_class: m.per_class_accuracy.clone(),
                average: m.average,
            });
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for rec in self.records() {
            text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn mean_b_prime(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.reports.iter().map(|r| r.b_prime as f64).sum::<f64>() / self.reports.len() as f64
    }

    pub fn mean_l_patches(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.reports.iter().map(|r| r.l_patches as f64).sum::<f64>() / self.reports.len() as f64
    }
}

// ── cross-entropy pretraining ───────────────────────────────────────────

fn cross_entropy(tape: &mut Tape, probs: TensorId, labels: &[u16], k: usize) -> Result<TensorId> {
    let b = labels.len();
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y as usize] = 1.0;
    }
    let oh = tape.constant(onehot, vec![b, k])?;
    let lp = tape.log_clamped(probs);
    let picked = tape.mul(lp, oh)?;
    let s = tape.sum_all(picked);
    Ok(tape.mul_const(s, -1.0 / b as f64))
}

#[allow(clippy::too_many_arguments)]
fn augmented_batch(
    ds_images: &dyn Fn(usize) -> Vec<f64>,
    ids: &[usize],
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
    tag: u64,
    iter: usize,
) -> Result<Tensor> {
    let mut values = Vec::with_capacity(ids.len() * c * h * w);
    for (slot, &id) in ids.iter().enumerate() {
        let img = ds_images(id);
        let aug = augment(&img, c, h, w, derive_seed(seed, tag, iter as u64, slot as u64));
        values.extend_from_slice(&aug);
    }
    Tensor::new(vec![ids.len(), c, h, w], values)
}

/// Source pretraining outcome: the best-validation model, its validation
/// metrics, and the mean training loss per epoch.
pub struct PretrainOutcome {
    pub model: TargetModel,
    pub val_metrics: Metrics,
    pub epoch_losses: Vec<f64>,
}

/// Plain cross-entropy training of the target model on labeled source data,
/// keeping the best-validation checkpoint.
pub fn pretrain_source(
    config: &RunConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<PretrainOutcome> {
    let arch = crate::models::ModelArch::desk_default(config.image_size, config.num_classes)?;
    let mut model = TargetModel::init(arch, config.target_logit_scale, config.seed)?;
    model.bottleneck_relu = config.bottleneck_relu;
    let mut opt = SgdMomentum::new(config.lr, config.momentum);
    let (c, h, w) = (train.channels, train.height, train.width);
    let mut best: Option<(f64, TargetModel, Metrics)> = None;
    let mut epoch_losses = Vec::new();
    let mut iter = 0usize;
    for epoch in 0..config.pretrain_epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for ids in batch_ids(
            train.n,
            config.batch_size,
            derive_seed(config.seed, TAG_SRC_SHUFFLE, epoch as u64, 0),
            false,
        ) {
            let images = augmented_batch(
                &|id| train.image(id).to_vec(),
                &ids,
                c,
                h,
                w,
                config.seed,
                TAG_SRC_AUG,
                iter,
            )?;
            let labels = train.batch_labels(&ids);
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape);
            let f = staged.features(&mut tape, &images)?;
            let probs = staged.image_head(&mut tape, &f)?;
            let loss = cross_entropy(&mut tape, probs, &labels, config.num_classes)?;
            let loss_val = tape.scalar(loss)?;
            if loss_val.is_nan() {
                return Err(Error::Training(format!(
                    "source pretraining loss is NaN at iteration {iter}"
                )));
            }
            loss_sum += loss_val;
            batches += 1;
            tape.backward(loss)?;
            let ids_p = staged.param_ids();
            let mut params = model.parameters_mut();
            for (pid, p) in ids_p.iter().zip(params.iter_mut()) {
                tape.export_grad(*pid, p);
            }
            opt.step(&mut params)?;
            iter += 1;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
        let metrics = evaluate(&model, val, config.batch_size)?;
        let better = match &best {
            Some((best_avg, _, _)) => metrics.average > *best_avg,
            None => true,
        };
        if better {
            best = Some((metrics.average, model.clone(), metrics));
        }
    }
    let (_, model, val_metrics) =
        best.ok_or_else(|| Error::Training("pretraining ran zero epochs".into()))?;
    Ok(PretrainOutcome {
        model,
        val_metrics,
        epoch_losses,
    })
}

/// Trains the teacher's vision encoder and projection against its frozen
/// unit-normalized class matrix on a pooled corpus, then freezes everything.
pub fn pretrain_teacher(config: &RunConfig, corpus: &LabeledDataset) -> Result<(MockViL, Vec<f64>)> {
    let arch = crate::models::ModelArch::desk_default(config.image_size, config.num_classes)?;
    let mut vil = MockViL::init_trainable(arch, config.teacher_logit_scale, config.seed)?;
    let mut opt = SgdMomentum::new(config.teacher_pretrain_lr, config.momentum);
    let (c, h, w) = (corpus.channels, corpus.height, corpus.width);
    let mut epoch_losses = Vec::new();
    let mut iter = 0usize;
    for epoch in 0..config.pretrain_epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for ids in batch_ids(
            corpus.n,
            config.batch_size,
            derive_seed(config.seed, TAG_VIL_SHUFFLE, epoch as u64, 0),
            false,
        ) {
            let images = augmented_batch(
                &|id| corpus.image(id).to_vec(),
                &ids,
                c,
                h,
                w,
                config.seed,
                TAG_VIL_AUG,
                iter,
            )?;
            let labels = corpus.batch_labels(&ids);
            let mut tape = Tape::new();
            let staged = vil.stage(&mut tape);
            let vis = staged.vision_features(&mut tape, &images)?;
            let f = staged.projected(&mut tape, &vis)?;
            let probs = staged.image_head(&mut tape, &f)?;
            let loss = cross_entropy(&mut tape, probs, &labels, config.num_classes)?;
            let loss_val = tape.scalar(loss)?;
            if loss_val.is_nan() {
                return Err(Error::Training(format!(
                    "teacher pretraining loss is NaN at iteration {iter}"
                )));
            }
            loss_sum += loss_val;
            batches += 1;
            tape.backward(loss)?;
            let pids = staged.pretrain_param_ids();
            let mut params = vil.pretrain_parameters_mut();
            for (pid, p) in pids.iter().zip(params.iter_mut()) {
                tape.export_grad(*pid, p);
            }
            opt.step(&mut params)?;
            iter += 1;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    vil.freeze();
    Ok((vil, epoch_losses))
}

// ── adaptation ──────────────────────────────────────────────────────────

/// Stateful adaptation core; [`adapt`] drives it, tests can step it.
pub struct AdaptEngine<'a> {
    pub model: TargetModel,
    pub bank: MemoryBank,
    teacher: &'a MockViL,
    config: &'a RunConfig,
    opt: SgdMomentum,
    pub i_max: usize,
    dump_dir: Option<PathBuf>,
}

impl<'a> AdaptEngine<'a> {
    pub fn new(
        config: &'a RunConfig,
        source: &TargetModel,
        teacher: &'a MockViL,
        target: &UnlabeledView<'_>,
        i_max: usize,
    ) -> Result<Self> {
        if !teacher.is_frozen() {
            return Err(Error::usage(
                "adapt",
                "teacher carries gradient flags; freeze it first",
            ));
        }
        let mut model = source.clone();
        model.logit_scale = config.target_logit_scale;
        model.bottleneck_relu = config.bottleneck_relu;
        let bank = MemoryBank::refreshed(&model, target, config.batch_size, 0)?;
        Ok(AdaptEngine {
            model,
            bank,
            teacher,
            config,
            opt: SgdMomentum::new(config.lr, config.momentum),
            i_max,
            dump_dir: None,
        })
    }

    pub fn with_dump_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.dump_dir = dir;
        self
    }

    pub fn refresh_bank(&mut self, target: &UnlabeledView<'_>, epoch: usize) -> Result<()> {
        self.bank
            .refresh(&self.model, target, self.config.batch_size, epoch)?;
        if self.config.dump_bank {
            if let Some(dir) = &self.dump_dir {
                self.bank.dump_csv(&dir.join(format!("bank_epoch{epoch}.csv")))?;
            }
        }
        Ok(())
    }

    /// One optimizer step over an already-augmented batch.
    pub fn step(&mut self, ids: &[usize], images: &Tensor, iter: usize) -> Result<LossReport> {
        let mut tape = Tape::new();
        let staged_t = self.model.stage(&mut tape);
        let dump = if self.config.dump_patches {
            self.dump_dir
                .as_ref()
                .map(|d| d.join(format!("patches_iter{iter}.csv")))
        } else {
            None
        };
        let losses = build_step_losses(
            &mut tape,
            &staged_t,
            self.teacher,
            &self.bank,
            ids,
            images,
            iter,
            self.i_max,
            self.config,
        )?;
        if let Some(path) = dump {
            if let Some(rect) = &losses.rectified {
                rect.dump_csv(&path)?;
            }
        }
        let report = losses.report(&tape)?;
        if report.total.is_nan() {
            return Err(Error::Training(format!("loss is NaN at iteration {iter}")));
        }

        tape.backward(losses.total)?;
        let pids = staged_t.param_ids();
        let mut params = self.model.parameters_mut();
        for (pid, p) in pids.iter().zip(params.iter_mut()) {
            tape.export_grad(*pid, p);
        }
        self.opt.step(&mut params)?;
        Ok(report)
    }
}

/// Tape handles of one step's loss terms plus the selection counts.
pub struct StepLosses {
    pub l_dis: TensorId,
    pub l_fr: TensorId,
    pub l_la: TensorId,
    pub l_im: TensorId,
    pub total: TensorId,
    pub b_prime: usize,
    pub l_patches: usize,
    pub lesion_weight: f64,
    /// Rectified teacher patches fed into the patch loss, when any.
    pub rectified: Option<crate::patches::PatchBatch>,
}

impl StepLosses {
    pub fn report(&self, tape: &Tape) -> Result<LossReport> {
        Ok(LossReport {
            l_dis: tape.scalar(self.l_dis)?,
            l_fr: tape.scalar(self.l_fr)?,
            l_im: tape.scalar(self.l_im)?,
            l_la: tape.scalar(self.l_la)?,
            total: tape.scalar(self.total)?,
            b_prime: self.b_prime,
            l_patches: self.l_patches,
            lesion_weight: self.lesion_weight,
        })
    }
}

/// Builds the full loss graph of one adaptation step on `tape`: the
/// distillation term against the frozen teacher, the forgetting-resistant
/// term over the bank's confident subset, and the scheduled patch term over
/// filtered and rectified teacher patches. Disabled or empty terms are
/// exact zero constants. The staged target is passed in so callers control
/// which leaves carry gradient (the gradient checker substitutes one).
#[allow(clippy::too_many_arguments)]
pub fn build_step_losses(
    tape: &mut Tape,
    staged_t: &crate::models::StagedTarget,
    teacher: &MockViL,
    bank: &MemoryBank,
    ids: &[usize],
    images: &Tensor,
    iter: usize,
    i_max: usize,
    cfg: &RunConfig,
) -> Result<StepLosses> {
    let k = teacher.arch.num_classes;
    let feats = staged_t.features(tape, images)?;
    let img_probs = staged_t.image_head(tape, &feats)?;

    let staged_v = teacher.stage(tape);
    let vis = staged_v.vision_features(tape, images)?;
    let vfeats = staged_v.projected(tape, &vis)?;

    let l_dis_id = if cfg.enable_dis {
        let v_img = staged_v.image_head(tape, &vfeats)?;
        loss_dis(tape, img_probs, v_img)?
    } else {
        tape.scalar_const(0.0)
    };

    let subset = bank.confident_subset(ids, cfg.tau)?;
    let b_prime = subset.len();
    let l_fr_id = if cfg.enable_fr && b_prime > 0 {
        let current = tape.gather_rows(img_probs, &subset.batch_positions)?;
        let stored = tape.watch(&subset.stored_probs);
        loss_fr(tape, current, stored)?
    } else {
        tape.scalar_const(0.0)
    };

    let weight = lesion_weight(iter, i_max, cfg.lambda_la)?;
    let mut l_patches = 0usize;
    let mut rectified = None;
    let l_la_id = if cfg.enable_la && weight > 0.0 {
        let v_patches = staged_v.patch_head(tape, &vfeats)?;
        let vshape = tape.shape(v_patches).to_vec();
        let v_values = tape.value(v_patches).to_vec();
        let filtered = filter_inconsistent(
            &v_values,
            vshape[0],
            vshape[1],
            vshape[2],
            k,
            bank,
            ids,
            cfg.tau,
            cfg.drop_unconfident_patches,
        )?;
        if filtered.is_empty() {
            tape.scalar_const(0.0)
        } else {
            let rect = rectify_class_balance(&filtered)?;
            l_patches = rect.len();
            let t_patches = staged_t.patch_head(tape, &feats)?;
            let aligned = target_patches_aligned(tape, t_patches, &rect.provenance)?;
            let rect_const = tape.constant(rect.probs.clone(), vec![rect.len(), k])?;
            let id = loss_la(tape, aligned, rect_const, weight)?;
            rectified = Some(rect);
            id
        }
    } else {
        tape.scalar_const(0.0)
    };

    let l_im_id = loss_im(tape, l_dis_id, l_fr_id)?;
    let total_id = total_loss(tape, l_im_id, l_la_id)?;
    Ok(StepLosses {
        l_dis: l_dis_id,
        l_fr: l_fr_id,
        l_la: l_la_id,
        l_im: l_im_id,
        total: total_id,
        b_prime,
        l_patches,
        lesion_weight: weight,
        rectified,
    })
}

/// Full adaptation: bank refresh per epoch, shuffled augmented batches,
/// dual MI losses plus scheduled patch loss, per-epoch evaluation.
/// Labels of `target_eval` flow only into the metrics.
pub fn adapt(
    config: &RunConfig,
    source: &TargetModel,
    teacher: &MockViL,
    target: &UnlabeledView<'_>,
    target_eval: &LabeledDataset,
) -> Result<(TargetModel, RunLog)> {
    adapt_with_dump_dir(config, source, teacher, target, target_eval, None)
}

pub fn adapt_with_dump_dir(
    config: &RunConfig,
    source: &TargetModel,
    teacher: &MockViL,
    target: &UnlabeledView<'_>,
    target_eval: &LabeledDataset,
    dump_dir: Option<PathBuf>,
) -> Result<(TargetModel, RunLog)> {
    let start = Instant::now();
    let batches_per_epoch = if config.epochs == 0 {
        0
    } else {
        batch_ids(target.n, config.batch_size, 0, false).len()
    };
    let i_max = config.epochs * batches_per_epoch;

    let mut log = RunLog {
        reports: Vec::new(),
        epoch_metrics: Vec::new(),
        batches_per_epoch,
        elapsed_seconds: 0.0,
    };
    log.epoch_metrics
        .push((0, evaluate(source, target_eval, config.batch_size)?));

    if config.epochs == 0 {
        log.elapsed_seconds = start.elapsed().as_secs_f64();
        return Ok((source.clone(), log));
    }

    let mut engine =
        AdaptEngine::new(config, source, teacher, target, i_max)?.with_dump_dir(dump_dir);
    let (c, h, w) = (target.channels, target.height, target.width);
    let mut iter = 0usize;
    for epoch in 0..config.epochs {
        if epoch == 0 || !config.freeze_bank {
            engine.refresh_bank(target, epoch)?;
        }
        for ids in batch_ids(
            target.n,
            config.batch_size,
            derive_seed(config.seed, TAG_ADAPT_SHUFFLE, epoch as u64, 0),
            false,
        ) {
            let images = augmented_batch(
                &|id| target.image(id).to_vec(),
                &ids,
                c,
                h,
                w,
                config.seed,
                TAG_ADAPT_AUG,
                iter,
            )?;
            let report = engine.step(&ids, &images, iter)?;
            log.reports.push(report);
            iter += 1;
        }
        log.epoch_metrics
            .push((epoch + 1, evaluate(&engine.model, target_eval, config.batch_size)?));
    }
    log.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok((engine.model, log))
}

// ── CAM export ──────────────────────────────────────────────────────────

/// Min-max-normalized per-patch probability map for one class.
pub struct CamExport {
    /// grid×grid values in [0,1]; all zeros when the raw map is constant.
    pub heatmap: Vec<f64>,
    pub grid: usize,
    /// Set when the raw map was constant (normalization impossible).
    pub constant: bool,
}

pub fn export_cam(model: &TargetModel, image: &[f64], class_index: usize) -> Result<CamExport> {
    let k = model.arch.num_classes;
    if class_index >= k {
        return Err(Error::usage(
            "export_cam",
            format!("class {class_index} outside 0..{k}"),
        ));
    }
    let (c, s) = (model.arch.in_channels, model.arch.image_size);
    if image.len() != c * s * s {
        return Err(Error::shape(
            "export_cam",
            format!("{} pixels for geometry {}x{}x{}", image.len(), c, s, s),
        ));
    }
    let batch = Tensor::new(vec![1, c, s, s], image.to_vec())?;
    let mut tape = Tape::new();
    let patches = target_forward_patches(&mut tape, model, &batch)?;
    let grid = tape.shape(patches)[1];
    let values = tape.value(patches);
    let mut raw = Vec::with_capacity(grid * grid);
    for p in 0..grid * grid {
        raw.push(values[p * k + class_index]);
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(CamExport {
            heatmap: vec![0.0; grid * grid],
            grid,
            constant: true,
        });
    }
    let heatmap = raw.iter().map(|v| (v - lo) / (hi - lo)).collect();
    Ok(CamExport {
        heatmap,
        grid,
        constant: false,
    })
}

/// Fraction of CAM mass falling on patch cells that overlap the lesion
/// mask. The pixel mask is reduced to the patch grid by uniform blocks.
pub fn cam_lesion_mass(cam: &CamExport, mask: &[bool], image_size: usize) -> f64 {
    let grid = cam.grid;
    let block = image_size / grid;
    let mut lesion_cells = vec![false; grid * grid];
    for (gy, cell_row) in lesion_cells.chunks_mut(grid).enumerate() {
        for (gx, cell) in cell_row.iter_mut().enumerate() {
            'scan: for y in gy * block..((gy + 1) * block).min(image_size) {
                for x in gx * block..((gx + 1) * block).min(image_size) {
                    if mask[y * image_size + x] {
                        *cell = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    let total: f64 = cam.heatmap.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = cam
        .heatmap
        .iter()
        .zip(&lesion_cells)
        .filter(|(_, &l)| l)
        .map(|(v, _)| v)
        .sum();
    inside / total
}
