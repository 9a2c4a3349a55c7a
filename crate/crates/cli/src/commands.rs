//! Implementations behind the CLI subcommands. Each command resolves its
//! configuration, does the work through the library crate, and drops a
//! resolved `config.toml` next to its outputs.

use std::path::Path;

use aeroseg_core::data::{
    export_masks, generate_synthetic, load_annotations, load_image_rgb, load_mask_png, rle_decode,
    save_dataset, save_mask_png, Dataset, ExportManifest, ImageData, SynthConfig,
};
use aeroseg_core::error::{Error, Result};
use aeroseg_core::geometry::{OrientedBox, Point};
use aeroseg_core::mask::BinMask;
use aeroseg_core::model::SegModel;
use aeroseg_core::pipeline::{annotate_records, infer_instance};
use aeroseg_core::training::{evaluate_model, fit};

use crate::config::ResolvedConfig;

type Model = SegModel<f32>;

fn load_model(checkpoint: &Path) -> Result<Model> {
    let (model, _extra) = Model::load(checkpoint)?;
    Ok(model)
}

fn synth_cfg(base: &crate::config::SynthSection, images: usize, first_id: u64) -> SynthConfig {
    SynthConfig {
        images,
        instances_per_image: base.instances_per_image,
        img_side: base.img_side,
        size_min: base.size_min,
        size_max: base.size_max,
        noise: base.noise,
        first_image_id: first_id,
        ..SynthConfig::default()
    }
}

pub fn cmd_synth(rc: &ResolvedConfig, out: &Path) -> Result<()> {
    rc.validate()?;
    let s = &rc.cfg.synth;
    // disjoint id ranges per split
    let train = generate_synthetic(&synth_cfg(s, s.train_images, 1), rc.cfg.seed)?;
    let val = generate_synthetic(
        &synth_cfg(s, s.val_images, 1_000_001),
        rc.cfg.seed.wrapping_add(1),
    )?;
    let train_path = save_dataset(&train, &out.join("train"))?;
    let val_path = save_dataset(&val, &out.join("val"))?;
    rc.write_into(out)?;
    println!(
        "wrote {} train instances ({}) and {} val instances ({})",
        train.len(),
        train_path.display(),
        val.len(),
        val_path.display()
    );
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Dataset> {
    load_annotations(&data.join(split).join("annotations.json"))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    rc: &ResolvedConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    rc.validate()?;
    let train = load_split(data, "train")?;
    let val = match load_split(data, "val") {
        Ok(ds) => ds,
        Err(_) => Dataset::default(),
    };
    let mut model = Model::new(rc.cfg.model.clone(), rc.cfg.seed)?;
    let report = fit(
        &mut model,
        &train,
        &val,
        &rc.cfg.ram,
        &rc.cfg.norm,
        &rc.cfg.train,
        out,
        resume,
    )?;
    rc.write_into(out)?;
    println!(
        "trained {} epochs ({} steps); best val mIoU {:.4} at epoch {}",
        report.epochs_run, report.steps, report.best_val_miou, report.best_epoch
    );
    println!("best checkpoint: {}", report.best_checkpoint.display());
    println!("metrics log: {}", report.metrics_path.display());
    Ok(())
}

pub fn cmd_eval(
    rc: &ResolvedConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    out: &Path,
) -> Result<()> {
    rc.validate()?;
    let model = load_model(checkpoint)?;
    let ds = load_split(data, split)?;
    let report = evaluate_model(
        &model,
        &ds,
        &rc.cfg.ram,
        &rc.cfg.norm,
        rc.cfg.train.batch_size,
    )?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("report.txt"), report.to_table())?;
    rc.write_into(out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn parse_obb(spec: &str) -> Result<OrientedBox> {
    let vals: Vec<f64> = spec
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number '{t}' in --obb")))
        })
        .collect::<Result<_>>()?;
    match vals.len() {
        5 => OrientedBox::from_sides(vals[0], vals[1], vals[2], vals[3], vals[4])
            .map_err(|e| Error::config(e.to_string())),
        8 => {
            let pts = [
                Point::new(vals[0], vals[1]),
                Point::new(vals[2], vals[3]),
                Point::new(vals[4], vals[5]),
                Point::new(vals[6], vals[7]),
            ];
            OrientedBox::from_corners(&pts).map_err(|e| Error::config(e.to_string()))
        }
        n => Err(Error::config(format!(
            "--obb needs 5 values (cx,cy,long,short,theta) or 8 corner values, got {n}"
        ))),
    }
}

#[derive(serde::Serialize)]
struct InferSummary {
    score: f64,
    mask_path: String,
    mask_pixels: usize,
    window: aeroseg_core::geometry::CropWindow,
}

pub fn cmd_infer(
    rc: &ResolvedConfig,
    checkpoint: &Path,
    image: &Path,
    obb: &str,
    out: &Path,
) -> Result<()> {
    rc.validate()?;
    let model = load_model(checkpoint)?;
    let img = load_image_rgb(image)?;
    let obox = parse_obb(obb)?;
    let result = infer_instance(&model, &img, &obox, &rc.cfg.ram, &rc.cfg.norm)?;
    std::fs::create_dir_all(out)?;
    save_mask_png(&out.join("mask.png"), &result.full_mask)?;
    let summary = InferSummary {
        score: result.score,
        mask_path: "mask.png".into(),
        mask_pixels: result.full_mask.count_ones(),
        window: result.window,
    };
    std::fs::write(out.join("result.json"), serde_json::to_string_pretty(&summary)?)?;
    rc.write_into(out)?;
    println!(
        "mask: {} ({} px), score {:.4}",
        out.join("mask.png").display(),
        summary.mask_pixels,
        result.score
    );
    Ok(())
}

pub fn cmd_annotate(
    rc: &ResolvedConfig,
    checkpoint: &Path,
    annotations: &Path,
    out: &Path,
) -> Result<()> {
    rc.validate()?;
    let model = load_model(checkpoint)?;
    let ds = load_annotations(annotations)?;
    let tau = rc.cfg.annotate.tau;
    let outcome = annotate_records(
        &model,
        &ds,
        &rc.cfg.ram,
        &rc.cfg.norm,
        tau,
        rc.cfg.train.batch_size,
    )?;
    let manifest_path = export_masks(&outcome.items, out, rc.cfg.annotate.format)?;
    std::fs::write(
        out.join("review_flagged.json"),
        serde_json::to_string_pretty(&outcome.flagged)?,
    )?;
    if !outcome.skipped.is_empty() {
        std::fs::write(
            out.join("skipped.json"),
            serde_json::to_string_pretty(
                &outcome
                    .skipped
                    .iter()
                    .map(|(id, why)| serde_json::json!({"instance_id": id, "reason": why}))
                    .collect::<Vec<_>>(),
            )?,
        )?;
    }

    // overlays of flagged instances for manual review
    let review_dir = out.join("review");
    std::fs::create_dir_all(&review_dir)?;
    for flagged in &outcome.flagged {
        let item = outcome
            .items
            .iter()
            .find(|i| i.instance_id == flagged.instance_id)
            .expect("flagged instances come from items");
        let img = ds.image(item.image_id)?;
        let full =
            aeroseg_core::data::back_project_mask(&item.mask, &item.window, img.w, img.h);
        let mut overlay = img.clone();
        blend_mask(&mut overlay, &full, instance_color(0), 0.5);
        aeroseg_core::data::save_image_rgb(
            &review_dir.join(format!(
                "img_{:06}_inst_{:06}.png",
                item.image_id, item.instance_id
            )),
            &overlay,
        )?;
    }

    rc.write_into(out)?;
    println!(
        "annotated {} instances ({} skipped); {} flagged for review at tau={}",
        outcome.items.len(),
        outcome.skipped.len(),
        outcome.flagged.len(),
        tau
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn instance_color(i: usize) -> [f32; 3] {
    // golden-angle hue walk, full saturation
    let h = (i as f32 * 137.507_8) % 360.0;
    let c = 1.0;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    match (h / 60.0) as usize {
        0 => [c, x, 0.0],
        1 => [x, c, 0.0],
        2 => [0.0, c, x],
        3 => [0.0, x, c],
        4 => [x, 0.0, c],
        _ => [c, 0.0, x],
    }
}

fn blend_mask(img: &mut ImageData, mask: &BinMask, color: [f32; 3], alpha: f32) {
    for y in 0..img.h.min(mask.height()) {
        for x in 0..img.w.min(mask.width()) {
            if mask.get(x, y) {
                for c in 0..3 {
                    let v = img.get(c, x, y) * (1.0 - alpha) + color[c] * alpha;
                    img.set(c, x, y, v.clamp(0.0, 1.0));
                }
            }
        }
    }
}

pub fn cmd_visualize(manifest_path: &Path, annotations: &Path, out: &Path) -> Result<()> {
    let manifest: ExportManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let ds = load_annotations(annotations)?;
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out)?;

    let mut by_image: std::collections::BTreeMap<u64, Vec<&aeroseg_core::data::ManifestInstance>> =
        std::collections::BTreeMap::new();
    for inst in &manifest.instances {
        by_image.entry(inst.image_id).or_default().push(inst);
    }

    let mut written = 0usize;
    for (image_id, instances) in &by_image {
        let img = ds.image(*image_id)?;
        let mut overlay = img.clone();
        for (i, inst) in instances.iter().enumerate() {
            let mask = match (&inst.mask_rle, &inst.mask_png) {
                (Some(rle), _) => rle_decode(rle)?,
                (None, Some(rel)) => load_mask_png(&manifest_dir.join(rel))?,
                (None, None) => {
                    return Err(Error::data(format!(
                        "manifest instance {} carries no mask",
                        inst.instance_id
                    )))
                }
            };
            blend_mask(&mut overlay, &mask, instance_color(i), 0.45);
        }
        aeroseg_core::data::save_image_rgb(
            &out.join(format!("overlay_{image_id:06}.png")),
            &overlay,
        )?;
        written += 1;
    }
    println!("wrote {written} overlays to {}", out.display());
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Json(_) => 3,
        Error::Numerical(_) => 4,
    }
}
