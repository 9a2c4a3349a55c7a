//! High-level workflows shared by the CLI: automatic mask generation from
//! box-only annotations (with a quality-score review list) and
//! single-instance inference.

use serde::{Deserialize, Serialize};

use crate::data::{
    back_project_mask, build_patch_sample, to_batch, Dataset, ExportItem, NormParams, PatchSample,
    SampleMode,
};
use crate::error::{Error, Result};
use crate::geometry::{CropWindow, OrientedBox, RamParams};
use crate::mask::BinMask;
use crate::model::SegModel;
use crate::tensor::Element;

/// An instance whose predicted quality fell below the review threshold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlaggedInstance {
    pub instance_id: u64,
    pub image_id: u64,
    pub class: String,
    pub p_iou: f64,
}

pub struct AnnotateOutcome {
    /// One predicted mask per usable input instance, in crop space with its
    /// back-projection window.
    pub items: Vec<ExportItem>,
    /// Instances with `p_iou < tau`, for manual review.
    pub flagged: Vec<FlaggedInstance>,
    /// Instances that could not be processed (id, reason).
    pub skipped: Vec<(u64, String)>,
}

/// Generate a mask and quality score for every oriented-box annotation.
/// Ground-truth masks are not required; records never get mutated. `tau`
/// controls the review list: `tau = 1.0` flags everything, `0.0` nothing.
pub fn annotate_records<T: Element>(
    model: &SegModel<T>,
    ds: &Dataset,
    ram: &RamParams,
    norm: &NormParams,
    tau: f64,
    batch_size: usize,
) -> Result<AnnotateOutcome> {
    if ds.is_empty() {
        return Err(Error::data("no instances to annotate"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config(format!("tau must lie in [0,1], got {tau}")));
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    use rand::SeedableRng;

    let mut samples: Vec<PatchSample<T>> = Vec::new();
    let mut skipped = Vec::new();
    for rec in &ds.records {
        let img = ds.image(rec.image_id)?;
        match build_patch_sample::<T>(img, rec, ram, norm, SampleMode::Eval, &mut rng) {
            Ok(s) => samples.push(s),
            Err(Error::Domain(msg)) => skipped.push((rec.instance_id, msg)),
            Err(e) => return Err(e),
        }
    }
    if samples.is_empty() {
        return Err(Error::data("no usable instances after patch assembly"));
    }

    let mut items = Vec::with_capacity(samples.len());
    let mut flagged = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = to_batch(chunk);
        let out = model.predict(&batch)?;
        let side = out.p1.shape()[3];
        for (bi, sample) in chunk.iter().enumerate() {
            let mask = BinMask::from_logits(side, side, &out.mask_logits(bi));
            let p_iou = out.p_iou[bi].to_f64();
            let meta = &ds.image_meta[&sample.image_id];
            if p_iou < tau {
                flagged.push(FlaggedInstance {
                    instance_id: sample.instance_id,
                    image_id: sample.image_id,
                    class: sample.class_label.clone(),
                    p_iou,
                });
            }
            items.push(ExportItem {
                instance_id: sample.instance_id,
                image_id: sample.image_id,
                class_label: sample.class_label.clone(),
                p_iou,
                mask,
                window: sample.window,
                img_w: meta.w as usize,
                img_h: meta.h as usize,
            });
        }
    }
    Ok(AnnotateOutcome {
        items,
        flagged,
        skipped,
    })
}

pub struct InferOutcome {
    /// Mask in original image coordinates.
    pub full_mask: BinMask,
    /// Mask in crop space at the network input side.
    pub crop_mask: BinMask,
    pub window: CropWindow,
    pub score: f64,
}

/// Segment a single instance given its image and oriented box.
pub fn infer_instance<T: Element>(
    model: &SegModel<T>,
    img: &crate::data::ImageData,
    obox: &OrientedBox,
    ram: &RamParams,
    norm: &NormParams,
) -> Result<InferOutcome> {
    let rec = crate::data::SampleRecord {
        instance_id: 0,
        image_id: 0,
        class_label: String::new(),
        obox: *obox,
        gt_mask: None,
    };
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let sample = build_patch_sample::<T>(img, &rec, ram, norm, SampleMode::Eval, &mut rng)?;
    let batch = to_batch(std::slice::from_ref(&sample));
    let out = model.predict(&batch)?;
    let side = out.p1.shape()[3];
    let crop_mask = BinMask::from_logits(side, side, &out.mask_logits(0));
    let full_mask = back_project_mask(&crop_mask, &sample.window, img.w, img.h);
    Ok(InferOutcome {
        full_mask,
        crop_mask,
        window: sample.window,
        score: out.p_iou[0].to_f64(),
    })
}
