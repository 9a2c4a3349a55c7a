//! Instance-level mask IoU, boundary IoU, and per-class report aggregation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_patch_sample, to_batch, Dataset, NormParams, PatchSample, SampleMode};
use crate::decoder::PyramidOutputs;
use crate::error::{Error, Result};
use crate::geometry::RamParams;
use crate::mask::BinMask;
use crate::model::PatchBatch;
use crate::tensor::Element;

/// Default boundary-band dilation ratio relative to the image diagonal.
pub const BOUNDARY_DILATION_RATIO: f64 = 0.005;

/// Plain intersection-over-union; 1.0 when both masks are empty.
pub fn mask_iou(a: &BinMask, b: &BinMask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(format!(
            "mask_iou shape mismatch: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// Band width in pixels for a given mask size: `max(1, round(ratio * diag))`.
/// The floor keeps tiny patches from degenerating to a zero-width band.
pub fn boundary_band_width(h: usize, w: usize, dilation_ratio: f64) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((dilation_ratio * diag).round() as usize).max(1)
}

/// IoU restricted to each mask's inner boundary band (mask minus `d`
/// erosions with the 3x3 element, `d` from [`boundary_band_width`]).
pub fn boundary_iou(a: &BinMask, b: &BinMask, dilation_ratio: f64) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape("boundary_iou shape mismatch"));
    }
    let d = boundary_band_width(a.height(), a.width(), dilation_ratio);
    mask_iou(&a.boundary_band(d), &b.boundary_band(d))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean_iou: f64,
    pub mean_biou: f64,
    pub instances: usize,
}

/// Per-class means plus macro averages over classes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassStats>,
    pub miou: f64,
    pub mbiou: f64,
    pub instances: usize,
}

impl EvalReport {
    /// Aggregate per-instance scores into per-class and macro means.
    pub fn from_instances(scores: &[(String, f64, f64)]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::data("no instances to evaluate"));
        }
        let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        for (class, iou, biou) in scores {
            let e = acc.entry(class.clone()).or_insert((0.0, 0.0, 0));
            e.0 += iou;
            e.1 += biou;
            e.2 += 1;
        }
        let per_class: BTreeMap<String, ClassStats> = acc
            .into_iter()
            .map(|(k, (si, sb, n))| {
                (
                    k,
                    ClassStats {
                        mean_iou: si / n as f64,
                        mean_biou: sb / n as f64,
                        instances: n,
                    },
                )
            })
            .collect();
        let nc = per_class.len() as f64;
        let miou = per_class.values().map(|c| c.mean_iou).sum::<f64>() / nc;
        let mbiou = per_class.values().map(|c| c.mean_biou).sum::<f64>() / nc;
        Ok(EvalReport {
            miou,
            mbiou,
            instances: scores.len(),
            per_class,
        })
    }

    /// Aligned text table, one row per class plus the macro means.
    pub fn to_table(&self) -> String {
        let name_w = self
            .per_class
            .keys()
            .map(|k| k.len())
            .chain(["class".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>9}  {:>9}  {:>9}\n",
            "class", "IoU", "BIoU", "count"
        ));
        for (k, c) in &self.per_class {
            out.push_str(&format!(
                "{:<name_w$}  {:>9.4}  {:>9.4}  {:>9}\n",
                k, c.mean_iou, c.mean_biou, c.instances
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>9.4}  {:>9.4}  {:>9}\n",
            "mean", self.miou, self.mbiou, self.instances
        ));
        out
    }
}

/// Evaluate a predictor over a dataset: eval-mode patches, thresholded
/// full-resolution masks, IoU/BIoU per instance in crop space, per-class and
/// macro means. `predict` is any batch predictor (the model, or an oracle in
/// tests). Instances without ground truth are rejected.
pub fn evaluate<T, F>(
    predict: F,
    ds: &Dataset,
    ram: &RamParams,
    norm: &NormParams,
    batch_size: usize,
) -> Result<EvalReport>
where
    T: Element,
    F: Fn(&PatchBatch<T>) -> Result<PyramidOutputs<T>>,
{
    if ds.is_empty() {
        return Err(Error::data("evaluation dataset is empty"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0); // unused in eval mode
    let mut samples: Vec<PatchSample<T>> = Vec::new();
    for rec in &ds.records {
        if rec.gt_mask.is_none() {
            return Err(Error::data(format!(
                "instance {} has no ground-truth mask",
                rec.instance_id
            )));
        }
        let img = ds.image(rec.image_id)?;
        match build_patch_sample::<T>(img, rec, ram, norm, SampleMode::Eval, &mut rng) {
            Ok(s) => samples.push(s),
            Err(Error::Domain(msg)) => eprintln!("skipping instance {}: {msg}", rec.instance_id),
            Err(e) => return Err(e),
        }
    }
    if samples.is_empty() {
        return Err(Error::data("no usable instances after patch assembly"));
    }

    let mut scores: Vec<(String, f64, f64)> = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = to_batch(chunk);
        let out = predict(&batch)?;
        let side = out.p1.shape()[3];
        for (bi, sample) in chunk.iter().enumerate() {
            let pred = BinMask::from_logits(side, side, &out.mask_logits(bi));
            let gt = sample.gt_mask.as_ref().expect("checked above");
            let iou = mask_iou(&pred, gt)?;
            let biou = boundary_iou(&pred, gt, BOUNDARY_DILATION_RATIO)?;
            scores.push((sample.class_label.clone(), iou, biou));
        }
    }
    EvalReport::from_instances(&scores)
}
