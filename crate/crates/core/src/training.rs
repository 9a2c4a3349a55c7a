//! Training: edge ground truth, the multi-scale multi-task loss, AdamW with
//! cosine annealing over per-group learning rates, and the fit loop with
//! JSONL metrics and best/last checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::archive::ArchiveEntry;
use crate::data::{build_patch_sample, to_batch, Dataset, NormParams, PatchSample, SampleMode};
use crate::decoder::PyramidIds;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::geometry::{HBox, RamParams};
use crate::mask::BinMask;
use crate::model::{PromptInputs, SegModel};
use crate::tensor::{Element, Grads, Id, ParamGroup, ParamStore, Tape, TensorData};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_decoder: f64,
    pub lr_refine: f64,
    /// Learning rate for a trainable backbone+prompt group; falls back to
    /// `lr_decoder` when unset. Ignored entirely under a frozen backbone.
    pub lr_backbone: Option<f64>,
    pub epochs: usize,
    /// Desk-scale default is 8; the reference recipe uses 24.
    pub batch_size: usize,
    pub lambda_iou: f64,
    pub weight_decay: f64,
    pub smooth_l1_beta: f64,
    /// Cosine-annealing horizon in steps; defaults to the full training run.
    pub cosine_horizon: Option<usize>,
    pub seed: u64,
    /// Ablation switch: drop the edge losses from the objective.
    pub edge_supervision: bool,
    pub flip_augment: bool,
    /// Stop early once validation mIoU reaches this value.
    pub stop_at_val_miou: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_decoder: 5e-5,
            lr_refine: 1e-3,
            lr_backbone: None,
            epochs: 32,
            batch_size: 8,
            lambda_iou: 5.0,
            weight_decay: 0.01,
            smooth_l1_beta: 1.0,
            cosine_horizon: None,
            seed: 0,
            edge_supervision: true,
            flip_augment: true,
            stop_at_val_miou: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_decoder <= 0.0 || self.lr_refine <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if self.lambda_iou < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("lambda_iou and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Edge ground truth
// ---------------------------------------------------------------------------

/// Soft edge map of a binary mask: the 3x3 morphological gradient (dilation
/// minus erosion, image border counting as background) smoothed with a 3x3
/// Gaussian (sigma 1.0) and clipped to `[0, 1]`. Support never extends more
/// than 2 px (Chebyshev) from the mask boundary.
pub fn edge_target<T: Element>(mask: &BinMask) -> TensorData<T> {
    let (h, w) = (mask.height(), mask.width());
    let dil = mask.dilate3();
    let ero = mask.erode3();
    // normalized 3x3 Gaussian, sigma = 1
    let c0 = 1.0f64;
    let c1 = (-0.5f64).exp();
    let c2 = (-1.0f64).exp();
    let norm = c0 + 4.0 * c1 + 4.0 * c2;
    let kernel = [
        [c2 / norm, c1 / norm, c2 / norm],
        [c1 / norm, c0 / norm, c1 / norm],
        [c2 / norm, c1 / norm, c2 / norm],
    ];
    let grad_at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return 0.0;
        }
        let (xu, yu) = (x as usize, y as usize);
        if dil.get(xu, yu) && !ero.get(xu, yu) {
            1.0
        } else {
            0.0
        }
    };
    TensorData::from_fn(vec![h, w], |i| {
        let y = (i / w) as i64;
        let x = (i % w) as i64;
        let mut acc = 0.0;
        for (dy, row) in kernel.iter().enumerate() {
            for (dx, &kv) in row.iter().enumerate() {
                acc += kv * grad_at(x + dx as i64 - 1, y + dy as i64 - 1);
            }
        }
        T::from_f64(acc.clamp(0.0, 1.0))
    })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

pub const DICE_EPS: f64 = 1e-6;

/// Mean binary cross-entropy on logits plus the soft Dice complement:
/// `1 - 2*sum(p*t) / (sum(p) + sum(t) + eps)` with `p = sigmoid(logits)`.
pub fn bce_dice<T: Element>(tape: &mut Tape<'_, T>, logits: Id, target: Id) -> Id {
    let bce = tape.bce_with_logits(logits, target);
    let p = tape.sigmoid(logits);
    let pt = tape.mul(p, target);
    let inter = tape.sum_all(pt);
    let num = tape.scale(inter, 2.0);
    let sp = tape.sum_all(p);
    let st = tape.sum_all(target);
    let denom = tape.add(sp, st);
    let denom = tape.add_scalar(denom, DICE_EPS);
    let frac = tape.div(num, denom);
    let one = tape.constant(TensorData::scalar(T::ONE));
    let dice = tape.sub(one, frac);
    tape.add(bce, dice)
}

/// Smooth-L1 between the predicted quality score and the measured IoU.
pub fn iou_loss<T: Element>(tape: &mut Tape<'_, T>, pred: Id, actual: Id, beta: f64) -> Id {
    tape.smooth_l1(pred, actual, beta)
}

/// Per-part loss values; `total` is the tape scalar actually optimized.
#[derive(Clone, Debug)]
pub struct LossBreakdown<T> {
    /// Mask losses at scales [1/1, 1/2, 1/4].
    pub mask: [T; 3],
    /// Edge losses at the same scales (zeros when edge supervision is off).
    pub edge: [T; 3],
    pub iou: T,
    pub lambda_iou: f64,
    pub total: T,
    pub total_id: Id,
}

impl<T: Element> LossBreakdown<T> {
    /// Re-sum the parts in exactly the fold order the tape used:
    /// `((m1+e1) + (m2+e2) + (m4+e4)) + lambda*iou`. Bit-identical to
    /// `total` by construction.
    pub fn recomputed_total(&self) -> T {
        let pair = |i: usize| self.mask[i] + self.edge[i];
        let sum = pair(0) + pair(1) + pair(2);
        sum + self.iou * T::from_f64(self.lambda_iou)
    }
}

/// The full objective over a prediction pyramid: per-scale mask and edge
/// BCE+Dice (targets downsampled per scale, edge targets regenerated from
/// the downsampled mask), plus the scaled quality loss against the measured
/// full-resolution IoU. The stage-1 coarse maps receive no direct
/// supervision; their gradients arrive through the refinement path.
pub fn multi_scale_loss<T: Element>(
    tape: &mut Tape<'_, T>,
    pyr: &PyramidIds,
    gt_masks: &[BinMask],
    cfg: &TrainConfig,
) -> Result<LossBreakdown<T>> {
    let s = tape.value(pyr.p1).shape().to_vec();
    let (b, s_in) = (s[0], s[2]);
    if gt_masks.len() != b {
        return Err(Error::shape(format!(
            "{} ground-truth masks for batch of {b}",
            gt_masks.len()
        )));
    }
    for m in gt_masks {
        if m.height() != s_in || m.width() != s_in {
            return Err(Error::shape("ground-truth mask must match patch resolution"));
        }
    }

    let stack_targets = |masks: &[BinMask], side: usize| -> (TensorData<T>, TensorData<T>) {
        let mut mdata = Vec::with_capacity(b * side * side);
        let mut edata = Vec::with_capacity(b * side * side);
        for m in masks {
            let scaled = if side == s_in { m.clone() } else { m.resize(side, side) };
            mdata.extend(scaled.to_tensor::<T>().into_data());
            edata.extend(edge_target::<T>(&scaled).into_data());
        }
        (
            TensorData::new(vec![b, 1, side, side], mdata),
            TensorData::new(vec![b, 1, side, side], edata),
        )
    };

    let mut mask_parts = [T::ZERO; 3];
    let mut edge_parts = [T::ZERO; 3];
    let mut pair_ids = Vec::with_capacity(3);
    for (idx, (pred, factor)) in [(pyr.p1, 1usize), (pyr.p2, 2), (pyr.p4, 4)]
        .into_iter()
        .enumerate()
    {
        let side = s_in / factor;
        let (mt, et) = stack_targets(gt_masks, side);
        let mask_logits = tape.slice(pred, 1, 0, 1);
        let edge_logits = tape.slice(pred, 1, 1, 1);
        let mt = tape.constant(mt);
        let mask_loss = bce_dice(tape, mask_logits, mt);
        let edge_loss = if cfg.edge_supervision {
            let et = tape.constant(et);
            bce_dice(tape, edge_logits, et)
        } else {
            tape.constant(TensorData::scalar(T::ZERO))
        };
        mask_parts[idx] = tape.value(mask_loss).item();
        edge_parts[idx] = tape.value(edge_loss).item();
        pair_ids.push(tape.add(mask_loss, edge_loss));
    }

    // measured IoU of the thresholded full-resolution prediction
    let p1_val = tape.value(pyr.p1).clone();
    let hw = s_in * s_in;
    let mut actual = Vec::with_capacity(b);
    for (bi, gt) in gt_masks.iter().enumerate() {
        let logits = &p1_val.data()[(bi * 2) * hw..(bi * 2 + 1) * hw];
        let pred_mask = BinMask::from_logits(s_in, s_in, logits);
        actual.push(T::from_f64(crate::evaluation::mask_iou(&pred_mask, gt)?));
    }
    let actual = tape.constant(TensorData::new(vec![b], actual));
    let pred_iou = tape.reshape(pyr.p_iou, vec![b]);
    let iou = iou_loss(tape, pred_iou, actual, cfg.smooth_l1_beta);

    let sum_a = tape.add(pair_ids[0], pair_ids[1]);
    let sum_b = tape.add(sum_a, pair_ids[2]);
    let iou_scaled = tape.scale(iou, cfg.lambda_iou);
    let total_id = tape.add(sum_b, iou_scaled);

    Ok(LossBreakdown {
        mask: mask_parts,
        edge: edge_parts,
        iou: tape.value(iou).item(),
        lambda_iou: cfg.lambda_iou,
        total: tape.value(total_id).item(),
        total_id,
    })
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Cosine annealing from `base` at step 0 to 0 at `horizon`.
pub fn cosine_lr(base: f64, step: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return base;
    }
    let t = (step as f64 / horizon as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay and per-group learning rates.
pub struct AdamW<T> {
    m: Vec<TensorData<T>>,
    v: Vec<TensorData<T>>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        AdamW {
            m: (0..store.len())
                .map(|i| TensorData::zeros(store.value(i).shape().to_vec()))
                .collect(),
            v: (0..store.len())
                .map(|i| TensorData::zeros(store.value(i).shape().to_vec()))
                .collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn apply(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &mut Grads<T>,
        lr_for: impl Fn(ParamGroup) -> f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let eps = T::from_f64(self.eps);
        for pid in 0..store.len() {
            if !store.trainable(pid) {
                continue;
            }
            let Some(g) = grads.take(pid) else { continue };
            let lr = lr_for(store.entry(pid).group);
            if lr == 0.0 {
                continue;
            }
            let lr_t = T::from_f64(lr);
            let wd = T::from_f64(lr * self.weight_decay);
            let inv_bc1 = T::from_f64(1.0 / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let m = self.m[pid].data_mut();
            let v = self.v[pid].data_mut();
            let p = store.value_mut(pid).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                p[i] = p[i] - lr_t * (mhat / (vhat.sqrt() + eps)) - wd * p[i];
            }
        }
    }

    /// Serialize moments and step for training resume.
    pub fn state_entries(&self, store: &ParamStore<T>) -> Vec<ArchiveEntry> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        out.push(ArchiveEntry::new("opt.step", vec![1], vec![self.step as f32]));
        for (pid, entry) in store.iter() {
            out.push(ArchiveEntry::new(
                format!("opt.m.{}", entry.name),
                self.m[pid].shape().to_vec(),
                self.m[pid].data().iter().map(|x| x.to_f64() as f32).collect(),
            ));
            out.push(ArchiveEntry::new(
                format!("opt.v.{}", entry.name),
                self.v[pid].shape().to_vec(),
                self.v[pid].data().iter().map(|x| x.to_f64() as f32).collect(),
            ));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, entries: &[ArchiveEntry]) -> Result<()> {
        for e in entries {
            if e.name == "opt.step" {
                self.step = e.data[0] as usize;
            } else if let Some(rest) = e.name.strip_prefix("opt.m.") {
                let pid = store
                    .lookup(rest)
                    .ok_or_else(|| Error::data(format!("optimizer state for unknown param {rest}")))?;
                self.m[pid] = TensorData::new(
                    e.shape.clone(),
                    e.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
                );
            } else if let Some(rest) = e.name.strip_prefix("opt.v.") {
                let pid = store
                    .lookup(rest)
                    .ok_or_else(|| Error::data(format!("optimizer state for unknown param {rest}")))?;
                self.v[pid] = TensorData::new(
                    e.shape.clone(),
                    e.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
                );
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
struct EpochLog {
    epoch: usize,
    steps: usize,
    train_loss: f64,
    mask_loss: f64,
    edge_loss: f64,
    iou_loss: f64,
    val_miou: Option<f64>,
    val_mbiou: Option<f64>,
    lr_decoder: f64,
    lr_refine: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub final_val_miou: Option<f64>,
    pub final_val_mbiou: Option<f64>,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn derive_seed(seed: u64, epoch: u64, idx: u64) -> u64 {
    // splitmix64 over a simple combination
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(idx.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn flip_sample<T: Element>(s: &PatchSample<T>) -> PatchSample<T> {
    let shape = s.image.shape().to_vec();
    let (hh, ww) = (shape[1], shape[2]);
    let image = TensorData::from_fn(shape.clone(), |i| {
        let ci = i / (hh * ww);
        let rest = i % (hh * ww);
        let (y, x) = (rest / ww, rest % ww);
        s.image.data()[(ci * hh + y) * ww + (ww - 1 - x)]
    });
    let side = ww as f64;
    let flip_pt = |p: crate::geometry::Point| crate::geometry::Point::new(side - p.x, p.y);
    PatchSample {
        image,
        prompt: PromptInputs {
            bbox: HBox {
                x: side - (s.prompt.bbox.x + s.prompt.bbox.w),
                y: s.prompt.bbox.y,
                w: s.prompt.bbox.w,
                h: s.prompt.bbox.h,
            },
            points: crate::geometry::PromptPoints {
                p1: flip_pt(s.prompt.points.p1),
                c: flip_pt(s.prompt.points.c),
                p2: flip_pt(s.prompt.points.p2),
            },
        },
        gt_mask: s.gt_mask.as_ref().map(|m| m.flip_horizontal()),
        window: s.window,
        class_label: s.class_label.clone(),
        instance_id: s.instance_id,
        image_id: s.image_id,
    }
}

/// Run evaluation-mode prediction over a dataset and aggregate the report.
pub fn evaluate_model<T: Element>(
    model: &SegModel<T>,
    ds: &Dataset,
    ram: &RamParams,
    norm: &NormParams,
    batch_size: usize,
) -> Result<EvalReport> {
    evaluate(|batch| model.predict(batch), ds, ram, norm, batch_size)
}

/// Train a model. Parameter groups: the backbone and prompt embeddings train
/// at the backbone rate unless frozen; the two-way decoder and coarse heads
/// at `lr_decoder`; the refinement stack at `lr_refine`. All rates follow
/// one cosine schedule. Aborts with a numerical error on non-finite loss.
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Element>(
    model: &mut SegModel<T>,
    train: &Dataset,
    val: &Dataset,
    ram: &RamParams,
    norm: &NormParams,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<FitReport> {
    cfg.validate()?;
    ram.validate()?;
    if train.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let best_path = out_dir.join("checkpoint_best.tnsa");
    let last_path = out_dir.join("checkpoint_last.tnsa");

    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    if let Some(path) = resume_from {
        let extra = model.load_weights(path)?;
        opt.load_state(model.store(), &extra)?;
    }

    let n = train.records.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let horizon = cfg.cosine_horizon.unwrap_or(total_steps);

    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(resume_from.is_some())
        .truncate(resume_from.is_none())
        .write(true)
        .open(&metrics_path)?;

    let start_epoch = (opt.step / steps_per_epoch.max(1)).min(cfg.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut last_val: Option<EvalReport> = None;
    let mut epochs_run = 0usize;

    for epoch in start_epoch..cfg.epochs {
        // deterministic shuffle per (seed, epoch)
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // total, mask, edge, iou
        let mut batches = 0usize;
        let mut lr_now = (cfg.lr_decoder, cfg.lr_refine);

        for chunk in order.chunks(cfg.batch_size) {
            let mut samples: Vec<PatchSample<T>> = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let rec = &train.records[idx];
                if rec.gt_mask.is_none() {
                    continue;
                }
                let img = train.image(rec.image_id)?;
                let mut rng =
                    ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, idx as u64));
                match build_patch_sample::<T>(img, rec, ram, norm, SampleMode::Train, &mut rng) {
                    Ok(mut s) => {
                        if cfg.flip_augment && rng.random_range(0..2) == 1 {
                            s = flip_sample(&s);
                        }
                        samples.push(s);
                    }
                    Err(Error::Domain(msg)) => {
                        eprintln!("skipping instance {}: {msg}", rec.instance_id);
                    }
                    Err(e) => return Err(e),
                }
            }
            if samples.is_empty() {
                continue;
            }
            let batch = to_batch(&samples);
            let gts: Vec<BinMask> = samples
                .iter()
                .map(|s| s.gt_mask.clone().expect("filtered above"))
                .collect();

            let (loss, mut grads) = {
                let mut tape = Tape::new(model.store());
                let pyr = model.forward(&mut tape, &batch)?;
                let loss = multi_scale_loss(&mut tape, &pyr, &gts, cfg)?;
                if !loss.total.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite loss at epoch {epoch} step {}: mask={:?} edge={:?} iou={}",
                        opt.step, loss.mask, loss.edge, loss.iou
                    )));
                }
                let grads = tape.backward(loss.total_id);
                (loss, grads)
            };

            let factor = cosine_lr(1.0, opt.step, horizon);
            lr_now = (cfg.lr_decoder * factor, cfg.lr_refine * factor);
            let backbone_lr = cfg.lr_backbone.unwrap_or(cfg.lr_decoder) * factor;
            let (dec_lr, ref_lr) = lr_now;
            opt.apply(model.store_mut(), &mut grads, |group| match group {
                ParamGroup::Backbone | ParamGroup::Prompt => backbone_lr,
                ParamGroup::Decoder => dec_lr,
                ParamGroup::Refine => ref_lr,
                ParamGroup::Buffer => 0.0,
            });

            sums.0 += loss.total.to_f64();
            sums.1 += loss.mask.iter().map(|v| v.to_f64()).sum::<f64>();
            sums.2 += loss.edge.iter().map(|v| v.to_f64()).sum::<f64>();
            sums.3 += loss.iou.to_f64();
            batches += 1;
        }

        let val_report = if val.is_empty() {
            None
        } else {
            Some(evaluate_model(model, val, ram, norm, cfg.batch_size)?)
        };

        let denom = batches.max(1) as f64;
        let log = EpochLog {
            epoch,
            steps: opt.step,
            train_loss: sums.0 / denom,
            mask_loss: sums.1 / denom,
            edge_loss: sums.2 / denom,
            iou_loss: sums.3 / denom,
            val_miou: val_report.as_ref().map(|r| r.miou),
            val_mbiou: val_report.as_ref().map(|r| r.mbiou),
            lr_decoder: lr_now.0,
            lr_refine: lr_now.1,
        };
        writeln!(metrics, "{}", serde_json::to_string(&log)?)?;
        metrics.flush()?;

        model.save_with_extra(&last_path, &opt.state_entries(model.store()))?;
        let score = val_report.as_ref().map(|r| r.miou).unwrap_or(-sums.0 / denom);
        if score > best_val {
            best_val = score;
            best_epoch = epoch;
            model.save(&best_path)?;
        }
        epochs_run = epoch + 1;
        last_val = val_report;

        if let (Some(stop), Some(r)) = (cfg.stop_at_val_miou, last_val.as_ref()) {
            if r.miou >= stop {
                break;
            }
        }
    }

    Ok(FitReport {
        epochs_run,
        steps: opt.step,
        best_epoch,
        best_val_miou: best_val,
        final_val_miou: last_val.as_ref().map(|r| r.miou),
        final_val_mbiou: last_val.as_ref().map(|r| r.mbiou),
        metrics_path,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}
