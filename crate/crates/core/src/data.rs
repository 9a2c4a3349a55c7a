//! Dataset plumbing: synthetic scene generation for desk-scale verification,
//! annotation I/O (JSON + PNG + run-length masks), patch assembly for the
//! model, and back-projection of predictions into image coordinates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    clamp_window, crop_window, horizontal_envelope, oriented_prompts, region_size, CropWindow,
    OrientedBox, Point, RamParams,
};
use crate::mask::BinMask;
use crate::model::{PatchBatch, PromptInputs};
use crate::tensor::{kernels, Element, TensorData};

// ---------------------------------------------------------------------------
// In-memory dataset
// ---------------------------------------------------------------------------

/// RGB image stored channels-first (`[3, h, w]`) with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageData {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<f32>,
}

impl ImageData {
    pub fn new(w: usize, h: usize) -> Self {
        ImageData {
            w,
            h,
            rgb: vec![0.0; 3 * w * h],
        }
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.rgb[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.rgb[(c * self.h + y) * self.w + x] = v;
    }
}

/// One annotated instance. `gt_mask` is absent for box-only annotations
/// (the automatic mask-generation workflow fills those in).
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub instance_id: u64,
    pub image_id: u64,
    pub class_label: String,
    pub obox: OrientedBox,
    pub gt_mask: Option<BinMask>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: u64,
    pub path: String,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub images: BTreeMap<u64, ImageData>,
    pub image_meta: BTreeMap<u64, ImageMeta>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn image(&self, id: u64) -> Result<&ImageData> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::data(format!("no image with id {id}")))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .records
            .iter()
            .map(|r| r.class_label.clone())
            .collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

// ---------------------------------------------------------------------------
// Run-length encoding (column-major, leading zero run)
// ---------------------------------------------------------------------------

/// Uncompressed column-major run-length mask: `counts` holds alternating
/// background/foreground run lengths (starting with background) over the
/// mask scanned column by column, serialized as space-separated integers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: String,
}

pub fn rle_encode(mask: &BinMask) -> RleMask {
    let (h, w) = (mask.height(), mask.width());
    let mut counts: Vec<usize> = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x, y);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    RleMask {
        size: [h, w],
        counts: counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinMask> {
    let [h, w] = rle.size;
    if h == 0 || w == 0 {
        return Err(Error::data("rle mask with zero dimension"));
    }
    let mut flat = Vec::with_capacity(h * w);
    let mut value = false;
    for tok in rle.counts.split_whitespace() {
        let run: usize = tok
            .parse()
            .map_err(|_| Error::data(format!("bad rle run '{tok}'")))?;
        flat.extend(std::iter::repeat(value).take(run));
        value = !value;
    }
    if flat.len() != h * w {
        return Err(Error::data(format!(
            "rle length {} does not cover {h}x{w}",
            flat.len()
        )));
    }
    // counts are column-major; transpose into row-major storage
    let mut mask = BinMask::new(h, w);
    for x in 0..w {
        for y in 0..h {
            mask.set(x, y, flat[x * h + y]);
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Annotation files
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskEntry {
    Rle { rle: RleMask },
    Png { png: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: u64,
    pub image_id: u64,
    pub class: String,
    /// Corner form `[x1,y1,x2,y2,x3,y3,x4,y4]` in polygon order.
    pub obb: [f64; 8],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageMeta>,
    pub instances: Vec<InstanceEntry>,
}

fn obb_to_box(obb: &[f64; 8]) -> Result<OrientedBox> {
    let pts = [
        Point::new(obb[0], obb[1]),
        Point::new(obb[2], obb[3]),
        Point::new(obb[4], obb[5]),
        Point::new(obb[6], obb[7]),
    ];
    OrientedBox::from_corners(&pts)
}

fn box_to_obb(b: &OrientedBox) -> [f64; 8] {
    let c = b.corners();
    [c[0].x, c[0].y, c[1].x, c[1].y, c[2].x, c[2].y, c[3].x, c[3].y]
}

/// Read an annotation file and its referenced images/masks. Paths inside the
/// file are resolved relative to the file's directory. Malformed entries are
/// rejected with the offending instance identified.
pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| {
        Error::data(format!(
            "{}: line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut ds = Dataset::default();
    for img in &file.images {
        if ds.image_meta.contains_key(&img.id) {
            return Err(Error::data(format!("duplicate image id {}", img.id)));
        }
        let data = load_image_rgb(&base.join(&img.path))?;
        if data.w != img.w as usize || data.h != img.h as usize {
            return Err(Error::data(format!(
                "image {} ({}) is {}x{}, annotation says {}x{}",
                img.id, img.path, data.w, data.h, img.w, img.h
            )));
        }
        ds.images.insert(img.id, data);
        ds.image_meta.insert(img.id, img.clone());
    }

    for (idx, inst) in file.instances.iter().enumerate() {
        let context = |msg: String| Error::data(format!("instance[{idx}] (id {}): {msg}", inst.id));
        let meta = ds
            .image_meta
            .get(&inst.image_id)
            .ok_or_else(|| context(format!("unknown image_id {}", inst.image_id)))?
            .clone();
        let obox = obb_to_box(&inst.obb).map_err(|e| context(e.to_string()))?;
        let gt_mask = match &inst.mask {
            None => None,
            Some(MaskEntry::Rle { rle }) => {
                let m = rle_decode(rle).map_err(|e| context(e.to_string()))?;
                if m.height() != meta.h as usize || m.width() != meta.w as usize {
                    return Err(context(format!(
                        "mask is {}x{}, image is {}x{}",
                        m.height(),
                        m.width(),
                        meta.h,
                        meta.w
                    )));
                }
                Some(m)
            }
            Some(MaskEntry::Png { png }) => {
                let m = load_mask_png(&base.join(png)).map_err(|e| context(e.to_string()))?;
                if m.height() != meta.h as usize || m.width() != meta.w as usize {
                    return Err(context("mask/image shape mismatch".into()));
                }
                Some(m)
            }
        };
        ds.records.push(SampleRecord {
            instance_id: inst.id,
            image_id: inst.image_id,
            class_label: inst.class.clone(),
            obox,
            gt_mask,
        });
    }
    Ok(ds)
}

/// Write a dataset as PNG images plus one annotation JSON with inline
/// run-length masks. Returns the annotation file path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut images = Vec::new();
    for (&id, img) in &ds.images {
        let rel = format!("images/img_{id:06}.png");
        save_image_rgb(&dir.join(&rel), img)?;
        images.push(ImageMeta {
            id,
            path: rel,
            w: img.w as u32,
            h: img.h as u32,
        });
    }
    let instances = ds
        .records
        .iter()
        .map(|r| InstanceEntry {
            id: r.instance_id,
            image_id: r.image_id,
            class: r.class_label.clone(),
            obb: box_to_obb(&r.obox),
            mask: r.gt_mask.as_ref().map(|m| MaskEntry::Rle { rle: rle_encode(m) }),
        })
        .collect();
    let file = AnnotationFile { images, instances };
    let path = dir.join("annotations.json");
    std::fs::write(&path, serde_json::to_string_pretty(&file)?)?;
    Ok(path)
}

pub fn load_image_rgb(path: &Path) -> Result<ImageData> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageData::new(w, h);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, x as usize, y as usize, p.0[c] as f32 / 255.0);
        }
    }
    Ok(out)
}

pub fn save_image_rgb(path: &Path, img: &ImageData) -> Result<()> {
    let mut buf = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let px = [
                (img.get(0, x, y).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(1, x, y).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(2, x, y).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// 8-bit grayscale mask PNG: foreground is 255, background 0.
pub fn save_mask_png(path: &Path, mask: &BinMask) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask.get(x, y) { 255 } else { 0 }]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<BinMask> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinMask::from_fn(h, w, |x, y| {
        img.get_pixel(x as u32, y as u32).0[0] >= 128
    }))
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    LShape,
}

impl ShapeKind {
    pub fn label(&self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::LShape => "l-shape",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: usize,
    pub instances_per_image: usize,
    pub img_side: usize,
    /// Long-side range of generated shapes, in pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Standard deviation of the background noise (image values are 0..1).
    pub noise: f64,
    pub shapes: Vec<ShapeKind>,
    pub first_image_id: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 50,
            instances_per_image: 3,
            img_side: 256,
            size_min: 8.0,
            size_max: 64.0,
            noise: 0.04,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::LShape],
            first_image_id: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.instances_per_image == 0 {
            return Err(Error::config("synthetic counts must be positive"));
        }
        if !(self.size_min > 0.0 && self.size_max >= self.size_min) {
            return Err(Error::config(format!(
                "invalid size range [{}, {}]",
                self.size_min, self.size_max
            )));
        }
        if self.img_side < self.size_max as usize * 2 {
            return Err(Error::config(
                "image side must be at least twice the maximum object size",
            ));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("at least one shape kind required"));
        }
        Ok(())
    }
}

/// Point-in-shape test in box-local coordinates (u along the long axis).
fn inside_shape(kind: ShapeKind, u: f64, v: f64, half_l: f64, half_s: f64) -> bool {
    match kind {
        ShapeKind::Rectangle => u.abs() <= half_l && v.abs() <= half_s,
        ShapeKind::Ellipse => (u / half_l).powi(2) + (v / half_s).powi(2) <= 1.0,
        // rectangle minus one corner quadrant
        ShapeKind::LShape => u.abs() <= half_l && v.abs() <= half_s && !(u > 0.0 && v > 0.0),
    }
}

fn rasterize_shape(kind: ShapeKind, obox: &OrientedBox, w: usize, h: usize) -> BinMask {
    let (ux, uy) = obox.axis();
    let half_l = obox.len_long / 2.0;
    let half_s = obox.len_short / 2.0;
    let env = horizontal_envelope(obox);
    let x0 = env.x.floor().max(0.0) as usize;
    let y0 = env.y.floor().max(0.0) as usize;
    let x1 = (env.right().ceil() as usize).min(w);
    let y1 = (env.bottom().ceil() as usize).min(h);
    let mut mask = BinMask::new(h, w);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 + 0.5) - obox.cx;
            let dy = (y as f64 + 0.5) - obox.cy;
            let u = dx * ux + dy * uy;
            let v = -dx * uy + dy * ux;
            if inside_shape(kind, u, v, half_l, half_s) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Deterministic synthetic dataset: noisy background, colored rotated
/// shapes, exact raster masks, and the generating rectangle as the oriented
/// box annotation.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    use rand::SeedableRng;
    let noise = Normal::new(0.0, cfg.noise.max(1e-9)).unwrap();
    let side = cfg.img_side;
    let mut ds = Dataset::default();
    let mut instance_id = 1u64;

    for i in 0..cfg.images {
        let image_id = cfg.first_image_id + i as u64;
        let mut img = ImageData::new(side, side);
        let base = [
            0.30 + rng.random_range(0.0..0.12),
            0.32 + rng.random_range(0.0..0.12),
            0.30 + rng.random_range(0.0..0.12),
        ];
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let v = (base[c] + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
                    img.set(c, x, y, v);
                }
            }
        }

        let mut occupancy = BinMask::new(side, side);
        for _ in 0..cfg.instances_per_image {
            let mut placed = false;
            for _attempt in 0..60 {
                let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
                let long = rng.random_range(cfg.size_min..=cfg.size_max);
                let aspect = rng.random_range(0.35..0.9);
                let short = (long * aspect).max(3.0);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let margin = long / 2.0 + 2.0;
                let cx = rng.random_range(margin..side as f64 - margin);
                let cy = rng.random_range(margin..side as f64 - margin);
                let obox = OrientedBox::from_sides(cx, cy, long, short, theta)?;
                let mask = rasterize_shape(kind, &obox, side, side);
                if mask.count_ones() < 6 {
                    continue;
                }
                // keep instances separated so crops see one object
                if mask.dilate3().intersection_count(&occupancy) > 0 {
                    continue;
                }
                let color = [
                    rng.random_range(0.55..0.95) as f32,
                    rng.random_range(0.15..0.95) as f32,
                    rng.random_range(0.15..0.95) as f32,
                ];
                for y in 0..side {
                    for x in 0..side {
                        if mask.get(x, y) {
                            for c in 0..3 {
                                img.set(c, x, y, color[c]);
                            }
                        }
                    }
                }
                for y in 0..side {
                    for x in 0..side {
                        if mask.get(x, y) {
                            occupancy.set(x, y, true);
                        }
                    }
                }
                ds.records.push(SampleRecord {
                    instance_id,
                    image_id,
                    class_label: kind.label().to_string(),
                    obox,
                    gt_mask: Some(mask),
                });
                instance_id += 1;
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::data(
                    "could not place a non-overlapping shape after 60 attempts",
                ));
            }
        }

        ds.image_meta.insert(
            image_id,
            ImageMeta {
                id: image_id,
                path: format!("images/img_{image_id:06}.png"),
                w: side as u32,
                h: side as u32,
            },
        );
        ds.images.insert(image_id, img);
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Patch assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NormParams {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormParams {
    fn default() -> Self {
        NormParams {
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Placement fractions drawn uniformly from [0.3, 0.7].
    Train,
    /// Centered placement (0.5, 0.5).
    Eval,
}

/// One model-ready instance: normalized patch, prompts in crop coordinates,
/// the transformed ground-truth mask, and the window for back-projection.
#[derive(Clone, Debug)]
pub struct PatchSample<T> {
    pub image: TensorData<T>,
    pub prompt: PromptInputs,
    pub gt_mask: Option<BinMask>,
    pub window: CropWindow,
    pub class_label: String,
    pub instance_id: u64,
    pub image_id: u64,
}

/// Crop, pad, resize and normalize one instance.
///
/// The fractional window from the sizing rule is rasterized here, once:
/// `x_s`, `y_s` and `S` round to the nearest integer, and that integer
/// window is what the returned `window` records. Padding regions are zero
/// after normalization.
pub fn build_patch_sample<T: Element>(
    img: &ImageData,
    rec: &SampleRecord,
    ram: &RamParams,
    norm: &NormParams,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<PatchSample<T>> {
    let envelope = horizontal_envelope(&rec.obox);
    let d = envelope.long_side();
    if d < 1.0 {
        return Err(Error::domain(format!(
            "instance {} is degenerate ({d:.2} px)",
            rec.instance_id
        )));
    }
    let s = region_size(d, ram)?;
    let (a_x, a_y) = match mode {
        SampleMode::Train => (rng.random_range(0.3..=0.7), rng.random_range(0.3..=0.7)),
        SampleMode::Eval => (0.5, 0.5),
    };
    let win = crop_window(&envelope, s, a_x, a_y)?;

    // rasterize once: nearest-integer origin and side
    let s_r = win.s.round().max(1.0);
    let raster = CropWindow::new(win.x_s.round(), win.y_s.round(), s_r);
    let clamped = clamp_window(&raster, img.w as f64, img.h as f64);

    let s_in = ram.s_in as usize;
    let s_px = s_r as usize;
    let (wx, wy) = (clamped.x_s as i64, clamped.y_s as i64);

    // normalized crop with zero-valued padding, then one bilinear resize
    let mut crop: TensorData<T> = TensorData::zeros(vec![1, 3, s_px, s_px]);
    for c in 0..3 {
        let mean = norm.mean[c];
        let std = norm.std[c];
        for y in 0..s_px {
            let iy = wy + y as i64;
            if iy < 0 || iy >= img.h as i64 {
                continue;
            }
            for x in 0..s_px {
                let ix = wx + x as i64;
                if ix < 0 || ix >= img.w as i64 {
                    continue;
                }
                let raw = img.get(c, ix as usize, iy as usize) as f64;
                crop.data_mut()[(c * s_px + y) * s_px + x] = T::from_f64((raw - mean) / std);
            }
        }
    }
    let patch = kernels::bilinear_resize(&crop, s_in, s_in).reshaped(vec![3, s_in, s_in]);

    let gt_mask = match &rec.gt_mask {
        None => None,
        Some(full) => {
            let cropped = BinMask::from_fn(s_px, s_px, |x, y| {
                let ix = wx + x as i64;
                let iy = wy + y as i64;
                ix >= 0
                    && iy >= 0
                    && ix < img.w as i64
                    && iy < img.h as i64
                    && full.get(ix as usize, iy as usize)
            });
            let resized = cropped.resize(s_in, s_in);
            if resized.is_empty() {
                return Err(Error::domain(format!(
                    "instance {}: mask vanished after crop/resize",
                    rec.instance_id
                )));
            }
            Some(resized)
        }
    };

    let clamp_pt = |p: Point| Point {
        x: p.x.clamp(0.0, s_in as f64),
        y: p.y.clamp(0.0, s_in as f64),
    };
    let points = oriented_prompts(&rec.obox);
    let points = clamped.to_crop_prompts(&points, ram.s_in);
    let points = crate::geometry::PromptPoints {
        p1: clamp_pt(points.p1),
        c: clamp_pt(points.c),
        p2: clamp_pt(points.p2),
    };
    let bbox = clamped.to_crop_box(&envelope, ram.s_in);

    Ok(PatchSample {
        image: patch,
        prompt: PromptInputs { bbox, points },
        gt_mask,
        window: clamped,
        class_label: rec.class_label.clone(),
        instance_id: rec.instance_id,
        image_id: rec.image_id,
    })
}

/// Stack samples into one batch (shapes must agree).
pub fn to_batch<T: Element>(samples: &[PatchSample<T>]) -> PatchBatch<T> {
    assert!(!samples.is_empty());
    let s = samples[0].image.shape().to_vec();
    let per = samples[0].image.numel();
    let mut data = Vec::with_capacity(per * samples.len());
    for sample in samples {
        assert_eq!(sample.image.shape(), s.as_slice(), "mixed patch sizes");
        data.extend_from_slice(sample.image.data());
    }
    PatchBatch {
        images: TensorData::new(vec![samples.len(), s[0], s[1], s[2]], data),
        prompts: samples.iter().map(|p| p.prompt).collect(),
    }
}

// ---------------------------------------------------------------------------
// Back-projection and mask export
// ---------------------------------------------------------------------------

/// Map a crop-space mask back to full-image coordinates: nearest-neighbor
/// sampling of the `s_in` grid over the integer window, respecting pads.
pub fn back_project_mask(
    pred: &BinMask,
    window: &CropWindow,
    img_w: usize,
    img_h: usize,
) -> BinMask {
    let s_in = pred.height();
    let s_px = window.s as usize;
    let mut out = BinMask::new(img_h, img_w);
    for wy in 0..s_px {
        let iy = window.y_s as i64 + wy as i64;
        if iy < 0 || iy >= img_h as i64 {
            continue;
        }
        let py = if s_px == 1 {
            0
        } else {
            ((wy as f64) * (s_in - 1) as f64 / (s_px - 1) as f64).round() as usize
        };
        for wxp in 0..s_px {
            let ix = window.x_s as i64 + wxp as i64;
            if ix < 0 || ix >= img_w as i64 {
                continue;
            }
            let px = if s_px == 1 {
                0
            } else {
                ((wxp as f64) * (s_in - 1) as f64 / (s_px - 1) as f64).round() as usize
            };
            if pred.get(px, py) {
                out.set(ix as usize, iy as usize, true);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Png,
    Rle,
}

/// One predicted instance ready for export. `mask` is in crop space; the
/// window carries it back to image coordinates.
pub struct ExportItem {
    pub instance_id: u64,
    pub image_id: u64,
    pub class_label: String,
    pub p_iou: f64,
    pub mask: BinMask,
    pub window: CropWindow,
    pub img_w: usize,
    pub img_h: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub instance_id: u64,
    pub image_id: u64,
    pub class: String,
    pub p_iou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<RleMask>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportManifest {
    pub instances: Vec<ManifestInstance>,
}

/// Back-project and write every instance mask, producing `manifest.json` in
/// `dir`. PNG masks land under `dir/masks/`.
pub fn export_masks(items: &[ExportItem], dir: &Path, format: ExportFormat) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    if format == ExportFormat::Png {
        std::fs::create_dir_all(dir.join("masks"))?;
    }
    let mut instances = Vec::with_capacity(items.len());
    for item in items {
        let full = back_project_mask(&item.mask, &item.window, item.img_w, item.img_h);
        let (mask_png, mask_rle) = match format {
            ExportFormat::Png => {
                let rel = format!("masks/img_{:06}_inst_{:06}.png", item.image_id, item.instance_id);
                save_mask_png(&dir.join(&rel), &full)?;
                (Some(rel), None)
            }
            ExportFormat::Rle => (None, Some(rle_encode(&full))),
        };
        instances.push(ManifestInstance {
            instance_id: item.instance_id,
            image_id: item.image_id,
            class: item.class_label.clone(),
            p_iou: item.p_iou,
            mask_png,
            mask_rle,
        });
    }
    let manifest = ExportManifest { instances };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            images: 4,
            instances_per_image: 2,
            img_side: 160,
            size_min: 8.0,
            size_max: 48.0,
            noise: 0.03,
            ..SynthConfig::default()
        }
    }

    fn dataset_checksum(ds: &Dataset) -> u64 {
        let mut acc = 0u64;
        for (_, img) in &ds.images {
            for &v in &img.rgb {
                acc = acc
                    .wrapping_mul(31)
                    .wrapping_add((v * 1e6) as i64 as u64);
            }
        }
        for r in &ds.records {
            acc = acc.wrapping_mul(37).wrapping_add(
                r.gt_mask.as_ref().map(|m| m.count_ones() as u64).unwrap_or(0),
            );
            acc = acc.wrapping_add((r.obox.theta * 1e9) as i64 as u64);
        }
        acc
    }

    #[test]
    fn synth_is_deterministic() {
        let a = generate_synthetic(&small_cfg(), 11).unwrap();
        let b = generate_synthetic(&small_cfg(), 11).unwrap();
        assert_eq!(dataset_checksum(&a), dataset_checksum(&b));
        let c = generate_synthetic(&small_cfg(), 12).unwrap();
        assert_ne!(dataset_checksum(&a), dataset_checksum(&c));
    }

    #[test]
    fn synth_rectangle_area_matches_analytic() {
        let cfg = SynthConfig {
            shapes: vec![ShapeKind::Rectangle],
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg, 5).unwrap();
        for r in &ds.records {
            let area = r.obox.len_long * r.obox.len_short;
            let perimeter = 2.0 * (r.obox.len_long + r.obox.len_short);
            let count = r.gt_mask.as_ref().unwrap().count_ones() as f64;
            assert!(
                (count - area).abs() <= perimeter,
                "raster count {count} vs area {area} (perimeter {perimeter})"
            );
        }
    }

    #[test]
    fn synth_masks_inside_obox() {
        let ds = generate_synthetic(&small_cfg(), 6).unwrap();
        for r in &ds.records {
            let m = r.gt_mask.as_ref().unwrap();
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if m.get(x, y) {
                        let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                        assert!(
                            r.obox.contains(p),
                            "mask pixel ({x},{y}) outside obox for instance {}",
                            r.instance_id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rle_round_trip_random_masks() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let h = rng.random_range(1..24);
            let w = rng.random_range(1..24);
            let m = BinMask::from_fn(h, w, |_, _| rng.random_range(0..3) == 0);
            let rle = rle_encode(&m);
            assert_eq!(rle_decode(&rle).unwrap(), m);
        }
    }

    #[test]
    fn rle_rejects_bad_counts() {
        let bad = RleMask {
            size: [4, 4],
            counts: "3 2".into(),
        };
        assert!(rle_decode(&bad).is_err());
        let junk = RleMask {
            size: [4, 4],
            counts: "3 x".into(),
        };
        assert!(rle_decode(&junk).is_err());
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small_cfg(), 21).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        let back = load_annotations(&path).unwrap();
        assert_eq!(back.records.len(), ds.records.len());
        assert_eq!(back.images.len(), ds.images.len());
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.instance_id, b.instance_id);
            assert_eq!(a.class_label, b.class_label);
            assert!((a.obox.cx - b.obox.cx).abs() < 1e-6);
            assert!((a.obox.len_long - b.obox.len_long).abs() < 1e-6);
            assert!((a.obox.theta - b.obox.theta).abs() < 1e-6);
            assert_eq!(a.gt_mask, b.gt_mask);
        }
        // PNG round trip quantizes to 8 bits
        for (id, img) in &ds.images {
            let loaded = &back.images[id];
            for (x, y) in [(0usize, 0usize), (50, 80), (100, 10)] {
                assert!((img.get(0, x, y) - loaded.get(0, x, y)).abs() < 1.0 / 254.0);
            }
        }
    }

    #[test]
    fn malformed_annotations_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small_cfg(), 2).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        let mut file: AnnotationFile =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        // degenerate box: all corners identical
        file.instances[0].obb = [5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0];
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load_annotations(&path).unwrap_err();
        assert!(err.to_string().contains("instance[0]"), "{err}");
    }

    #[test]
    fn unknown_image_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small_cfg(), 2).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        let mut file: AnnotationFile =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        file.instances[1].image_id = 999_999;
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(load_annotations(&path).is_err());
    }

    #[test]
    fn mask_png_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let m = BinMask::from_fn(33, 17, |_, _| rng.random_range(0..2) == 0);
        let path = dir.path().join("m.png");
        save_mask_png(&path, &m).unwrap();
        assert_eq!(load_mask_png(&path).unwrap(), m);
    }

    fn one_instance_scene(obox: OrientedBox) -> (ImageData, SampleRecord) {
        let side = 256;
        let mask = rasterize_shape(ShapeKind::Rectangle, &obox, side, side);
        let mut img = ImageData::new(side, side);
        for y in 0..side {
            for x in 0..side {
                let v = if mask.get(x, y) { 0.9 } else { 0.2 };
                for c in 0..3 {
                    img.set(c, x, y, v);
                }
            }
        }
        let rec = SampleRecord {
            instance_id: 1,
            image_id: 1,
            class_label: "rectangle".into(),
            obox,
            gt_mask: Some(mask),
        };
        (img, rec)
    }

    #[test]
    fn patch_magnifies_small_object_four_times() {
        // 32-px object -> 64-px region -> 4x magnification at s_in=256
        let obox = OrientedBox::from_sides(120.0, 140.0, 32.0, 20.0, 0.0).unwrap();
        let (img, rec) = one_instance_scene(obox);
        let ram = RamParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let p: PatchSample<f64> = build_patch_sample(
            &img,
            &rec,
            &ram,
            &NormParams::default(),
            SampleMode::Eval,
            &mut rng,
        )
        .unwrap();
        assert_eq!(p.image.shape(), &[3, 256, 256]);
        let gt = p.gt_mask.as_ref().unwrap();
        // mask long extent should be about 32 * 4 = 128 px
        let mut min_x = usize::MAX;
        let mut max_x = 0usize;
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if gt.get(x, y) {
                    min_x = min_x.min(x);
                    max_x = max_x.max(x);
                }
            }
        }
        let extent = (max_x - min_x + 1) as f64;
        assert!(
            (extent - 128.0).abs() <= 6.0,
            "object spans {extent} px, expected about 128"
        );
    }

    #[test]
    fn eval_mode_centers_envelope() {
        // integer-friendly case: exact centering
        let obox = OrientedBox::from_sides(120.0, 140.0, 32.0, 16.0, 0.0).unwrap();
        let (img, rec) = one_instance_scene(obox);
        let ram = RamParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let p: PatchSample<f64> = build_patch_sample(
            &img,
            &rec,
            &ram,
            &NormParams::default(),
            SampleMode::Eval,
            &mut rng,
        )
        .unwrap();
        let center = p.prompt.points.c;
        assert!((center.x - 128.0).abs() <= 1.0, "center.x = {}", center.x);
        assert!((center.y - 128.0).abs() <= 1.0, "center.y = {}", center.y);
    }

    #[test]
    fn train_mode_is_seed_reproducible() {
        let obox = OrientedBox::from_sides(120.0, 140.0, 24.0, 12.0, 0.7).unwrap();
        let (img, rec) = one_instance_scene(obox);
        let ram = RamParams::default();
        let build = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            build_patch_sample::<f64>(
                &img,
                &rec,
                &ram,
                &NormParams::default(),
                SampleMode::Train,
                &mut rng,
            )
            .unwrap()
        };
        let a = build(5);
        let b = build(5);
        assert_eq!(a.window, b.window);
        assert_eq!(a.image.data(), b.image.data());
        let c = build(6);
        assert_ne!(a.window, c.window);
    }

    #[test]
    fn prompt_points_inside_envelope_box() {
        let ds = generate_synthetic(&small_cfg(), 33).unwrap();
        let ram = RamParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for rec in ds.records.iter().take(6) {
            let img = ds.image(rec.image_id).unwrap();
            let p: PatchSample<f64> = build_patch_sample(
                img,
                rec,
                &ram,
                &NormParams::default(),
                SampleMode::Train,
                &mut rng,
            )
            .unwrap();
            for pt in [p.prompt.points.p1, p.prompt.points.c, p.prompt.points.p2] {
                assert!(
                    p.prompt.bbox.contains(pt),
                    "point {pt:?} outside envelope {:?}",
                    p.prompt.bbox
                );
            }
        }
    }

    #[test]
    fn mask_area_preserved_under_crop_resize() {
        let ds = generate_synthetic(&small_cfg(), 44).unwrap();
        let ram = RamParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for rec in ds.records.iter().take(8) {
            let img = ds.image(rec.image_id).unwrap();
            let p: PatchSample<f64> = build_patch_sample(
                img,
                rec,
                &ram,
                &NormParams::default(),
                SampleMode::Eval,
                &mut rng,
            )
            .unwrap();
            let scale = ram.s_in as f64 / p.window.s;
            let expected = rec.gt_mask.as_ref().unwrap().count_ones() as f64 * scale * scale;
            let got = p.gt_mask.as_ref().unwrap().count_ones() as f64;
            assert!(
                (got - expected).abs() / expected < 0.10,
                "area {got} vs expected {expected}"
            );
        }
    }

    #[test]
    fn degenerate_instances_are_skipped() {
        let obox = OrientedBox::from_sides(50.0, 50.0, 0.5, 0.3, 0.0).unwrap();
        let (img, rec) = one_instance_scene(obox);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let r: Result<PatchSample<f64>> = build_patch_sample(
            &img,
            &rec,
            &RamParams::default(),
            &NormParams::default(),
            SampleMode::Eval,
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn back_projection_lands_on_ground_truth() {
        let ds = generate_synthetic(&small_cfg(), 55).unwrap();
        let ram = RamParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for rec in ds.records.iter().take(6) {
            let img = ds.image(rec.image_id).unwrap();
            let p: PatchSample<f64> = build_patch_sample(
                img,
                rec,
                &ram,
                &NormParams::default(),
                SampleMode::Eval,
                &mut rng,
            )
            .unwrap();
            let back = back_project_mask(p.gt_mask.as_ref().unwrap(), &p.window, img.w, img.h);
            let gt = rec.gt_mask.as_ref().unwrap();
            // 1-px boundary tolerance in both directions
            let gt_dilated = gt.dilate3();
            let gt_eroded = gt.erode3();
            for y in 0..gt.height() {
                for x in 0..gt.width() {
                    if back.get(x, y) {
                        assert!(gt_dilated.get(x, y), "spurious pixel at ({x},{y})");
                    }
                    if gt_eroded.get(x, y) {
                        assert!(back.get(x, y), "missing interior pixel at ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn export_round_trip_png_and_rle() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mask = BinMask::from_fn(64, 64, |x, y| {
            let dx = x as f64 - 32.0;
            let dy = y as f64 - 30.0;
            (dx * dx + dy * dy).sqrt() < 14.0 && rng.random_range(0..50) != 0
        });
        let item = ExportItem {
            instance_id: 7,
            image_id: 3,
            class_label: "ellipse".into(),
            p_iou: 0.83,
            mask: mask.clone(),
            window: CropWindow::new(10.0, 20.0, 64.0),
            img_w: 128,
            img_h: 128,
        };
        // full-image mask after back-projection (window scale 1:1 here)
        let expected = back_project_mask(&mask, &item.window, 128, 128);

        let p = export_masks(&[item], &dir.path().join("png"), ExportFormat::Png).unwrap();
        let manifest: ExportManifest =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let rel = manifest.instances[0].mask_png.as_ref().unwrap();
        let loaded = load_mask_png(&dir.path().join("png").join(rel)).unwrap();
        assert_eq!(loaded, expected);

        let item2 = ExportItem {
            instance_id: 7,
            image_id: 3,
            class_label: "ellipse".into(),
            p_iou: 0.83,
            mask,
            window: CropWindow::new(10.0, 20.0, 64.0),
            img_w: 128,
            img_h: 128,
        };
        let p = export_masks(&[item2], &dir.path().join("rle"), ExportFormat::Rle).unwrap();
        let manifest: ExportManifest =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let decoded = rle_decode(manifest.instances[0].mask_rle.as_ref().unwrap()).unwrap();
        assert_eq!(decoded, expected);
    }
}
