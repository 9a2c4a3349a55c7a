//! Image-encoder backbone: a compact ViT producing deep patch features plus a
//! shallow early-block tap, both at 1/16 stride, for arbitrary square input
//! sides via positional-embedding interpolation.
//!
//! The same architecture serves as a frozen pretrained backend (weights
//! loaded from a tensor archive, `freeze = true`) and as a trainable
//! desk-scale backend.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Conv2d, LayerNorm, TransformerBlock};
use crate::tensor::{kernels, Element, Id, ParamGroup, ParamStore, Tape, TensorData};

/// Patch stride of the backbone; features come out at `side / 16`.
pub const PATCH_STRIDE: usize = 16;

/// A learned positional-embedding grid of shape `[side, side, C]` where
/// `side = source_side / 16`.
#[derive(Clone, Debug)]
pub struct PeGrid<T> {
    pub values: TensorData<T>,
    pub source_side: u32,
}

impl<T: Element> PeGrid<T> {
    pub fn new(values: TensorData<T>, source_side: u32) -> Result<Self> {
        if values.shape().len() != 3 || values.shape()[0] != values.shape()[1] {
            return Err(Error::shape(format!(
                "positional grid must be [side, side, C], got {:?}",
                values.shape()
            )));
        }
        let expected = source_side as usize / PATCH_STRIDE;
        if values.shape()[0] != expected {
            return Err(Error::shape(format!(
                "grid side {} does not match source side {source_side}/16",
                values.shape()[0]
            )));
        }
        Ok(PeGrid { values, source_side })
    }

    pub fn grid_side(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Bilinearly resample a positional grid to the grid side implied by
/// `target_side`. Align-corners; exact identity when the sides match.
pub fn interpolate_pe<T: Element>(pe: &PeGrid<T>, target_side: u32) -> Result<PeGrid<T>> {
    if target_side as usize % PATCH_STRIDE != 0 {
        return Err(Error::config(format!(
            "target side {target_side} is not divisible by the patch stride {PATCH_STRIDE}"
        )));
    }
    if target_side == pe.source_side {
        return Ok(pe.clone());
    }
    let side = target_side as usize / PATCH_STRIDE;
    let (h, w, c) = (
        pe.values.shape()[0],
        pe.values.shape()[1],
        pe.values.shape()[2],
    );
    // [H,W,C] -> [1,C,H,W] -> resize -> back
    let chw = kernels::permute(&pe.values, &[2, 0, 1]).reshaped(vec![1, c, h, w]);
    let resized = kernels::bilinear_resize(&chw, side, side);
    let hwc = kernels::permute(&resized.reshaped(vec![c, side, side]), &[1, 2, 0]);
    PeGrid::new(hwc, target_side)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Token width; also the channel width of both feature outputs.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Input side the learned positional grid is sized for.
    pub pe_source_side: u32,
    /// Block index whose output becomes the shallow feature tap.
    pub shallow_tap: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            width: 192,
            blocks: 4,
            heads: 3,
            mlp_ratio: 4,
            pe_source_side: 256,
            shallow_tap: 0,
            in_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.blocks == 0 || self.heads == 0 {
            return Err(Error::config("encoder width/blocks/heads must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.pe_source_side as usize % PATCH_STRIDE != 0 {
            return Err(Error::config("pe_source_side must be divisible by 16"));
        }
        if self.shallow_tap >= self.blocks {
            return Err(Error::config(format!(
                "shallow_tap {} out of range for {} blocks",
                self.shallow_tap, self.blocks
            )));
        }
        Ok(())
    }
}

/// Deep and shallow feature maps, both `[B, C, side/16, side/16]`.
pub struct EncoderOutput {
    pub f_deep: Id,
    pub f_shallow: Id,
}

pub struct TinyVit {
    cfg: EncoderConfig,
    patch_embed: Conv2d,
    pos: usize,
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNorm,
}

impl TinyVit {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let group = ParamGroup::Backbone;
        let patch_embed = Conv2d::new(
            store,
            rng,
            "encoder.patch_embed",
            group,
            cfg.in_channels,
            cfg.width,
            PATCH_STRIDE,
            PATCH_STRIDE,
            0,
        );
        let pe_side = cfg.pe_source_side as usize / PATCH_STRIDE;
        let pos = store.register(
            "encoder.pos_embed",
            group,
            trunc_normal(vec![pe_side, pe_side, cfg.width], 0.02, rng),
        );
        let blocks = (0..cfg.blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    rng,
                    &format!("encoder.blocks.{i}"),
                    group,
                    cfg.width,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        let ln_out = LayerNorm::new(store, "encoder.ln_out", group, cfg.width);
        Ok(TinyVit {
            cfg,
            patch_embed,
            pos,
            blocks,
            ln_out,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Validate a normalized input batch and run the backbone.
    pub fn encode<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        image: &TensorData<T>,
    ) -> Result<EncoderOutput> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "expected [B,{},S,S] input, got {s:?}",
                self.cfg.in_channels
            )));
        }
        if s[2] != s[3] {
            return Err(Error::shape(format!("input must be square, got {}x{}", s[2], s[3])));
        }
        if s[2] % PATCH_STRIDE != 0 {
            return Err(Error::shape(format!(
                "input side {} not divisible by the patch stride {PATCH_STRIDE}",
                s[2]
            )));
        }
        if !image.all_finite() {
            return Err(Error::numerical("encoder input contains NaN/Inf"));
        }
        let x = tape.constant(image.clone());
        Ok(self.forward(tape, x))
    }

    /// Backbone forward on an already-placed tape value.
    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, image: Id) -> EncoderOutput {
        let s = tape.value(image).shape().to_vec();
        let (b, side) = (s[0], s[2]);
        let hs = side / PATCH_STRIDE;
        let c = self.cfg.width;
        let n = hs * hs;

        let x = self.patch_embed.forward(tape, image); // [B,C,hs,hs]
        let x = tape.reshape(x, vec![b, c, n]);
        let mut x = tape.permute(x, &[0, 2, 1]); // [B,N,C]

        // positional grid, interpolated in-graph so a trainable grid still
        // receives gradients through the resampling
        let pos = tape.param(self.pos);
        let pe_side = self.cfg.pe_source_side as usize / PATCH_STRIDE;
        let pos = tape.permute(pos, &[2, 0, 1]);
        let pos = tape.reshape(pos, vec![1, c, pe_side, pe_side]);
        let pos = tape.bilinear(pos, hs, hs);
        let pos = tape.reshape(pos, vec![c, n]);
        let pos = tape.permute(pos, &[1, 0]); // [N,C]
        let pos = tape.broadcast_batch(pos, b);
        x = tape.add(x, pos);

        let mut shallow = None;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x);
            if i == self.cfg.shallow_tap {
                shallow = Some(x);
            }
        }
        let deep = self.ln_out.forward(tape, x);

        let to_map = |tape: &mut Tape<'_, T>, t: Id| {
            let t = tape.permute(t, &[0, 2, 1]);
            tape.reshape(t, vec![b, c, hs, hs])
        };
        let f_deep = to_map(tape, deep);
        let f_shallow = to_map(tape, shallow.expect("shallow_tap < blocks"));
        EncoderOutput { f_deep, f_shallow }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn micro_cfg() -> EncoderConfig {
        EncoderConfig {
            width: 16,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            pe_source_side: 64,
            shallow_tap: 0,
            in_channels: 3,
        }
    }

    #[test]
    fn pe_identity_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let grid = trunc_normal::<f64>(vec![64, 64, 8], 0.02, &mut rng);
        let pe = PeGrid::new(grid, 1024).unwrap();
        let out = interpolate_pe(&pe, 1024).unwrap();
        assert_eq!(out.values.data(), pe.values.data());
    }

    #[test]
    fn pe_target_shape() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let grid = trunc_normal::<f64>(vec![64, 64, 8], 0.02, &mut rng);
        let pe = PeGrid::new(grid, 1024).unwrap();
        let out = interpolate_pe(&pe, 256).unwrap();
        assert_eq!(out.values.shape(), &[16, 16, 8]);
        assert_eq!(out.source_side, 256);
    }

    #[test]
    fn pe_affine_grids_are_exact() {
        // grid values affine in (i, j) stay affine under bilinear resampling
        let side = 8;
        let c = 2;
        let grid = TensorData::from_fn(vec![side, side, c], |idx| {
            let i = idx / (side * c);
            let j = (idx / c) % side;
            let ch = idx % c;
            3.0 * i as f64 + 2.0 * j as f64 + 10.0 * ch as f64
        });
        let pe = PeGrid::new(grid, (side * PATCH_STRIDE) as u32).unwrap();
        for target in [4usize, 16, 23] {
            let out = interpolate_pe(&pe, (target * PATCH_STRIDE) as u32).unwrap();
            for i in 0..target {
                for j in 0..target {
                    let fi = if target == 1 { 0.0 } else { i as f64 * (side - 1) as f64 / (target - 1) as f64 };
                    let fj = if target == 1 { 0.0 } else { j as f64 * (side - 1) as f64 / (target - 1) as f64 };
                    for ch in 0..c {
                        let expect = 3.0 * fi + 2.0 * fj + 10.0 * ch as f64;
                        let got = out.values.data()[(i * target + j) * c + ch];
                        assert!((got - expect).abs() < 1e-6, "at {i},{j},{ch}: {got} vs {expect}");
                    }
                }
            }
        }
    }

    #[test]
    fn pe_norm_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let grid = trunc_normal::<f64>(vec![16, 16, 4], 1.0, &mut rng);
        let pe = PeGrid::new(grid, 256).unwrap();
        let max_in = pe.values.max_abs();
        for target in [64u32, 128, 512] {
            let out = interpolate_pe(&pe, target).unwrap();
            assert!(out.values.max_abs() <= max_in + 1e-12);
        }
    }

    #[test]
    fn pe_rejects_non_divisible_side() {
        let grid = TensorData::<f64>::zeros(vec![4, 4, 2]);
        let pe = PeGrid::new(grid, 64).unwrap();
        assert!(matches!(interpolate_pe(&pe, 100), Err(Error::Config(_))));
    }

    #[test]
    fn encode_feature_sides() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let vit = TinyVit::new(&mut store, &mut rng, micro_cfg()).unwrap();
        for side in [128usize, 256] {
            let mut tape = Tape::inference(&store);
            let img = TensorData::zeros(vec![1, 3, side, side]);
            let out = vit.encode(&mut tape, &img).unwrap();
            let expect = side / 16;
            assert_eq!(tape.value(out.f_deep).shape(), &[1, 16, expect, expect]);
            assert_eq!(tape.value(out.f_shallow).shape(), &[1, 16, expect, expect]);
        }
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let vit = TinyVit::new(&mut store, &mut rng, micro_cfg()).unwrap();
        let mut tape = Tape::inference(&store);
        let rect = TensorData::zeros(vec![1, 3, 64, 128]);
        assert!(matches!(vit.encode(&mut tape, &rect), Err(Error::Shape(_))));
        let odd = TensorData::zeros(vec![1, 3, 50, 50]);
        assert!(matches!(vit.encode(&mut tape, &odd), Err(Error::Shape(_))));
        let mut nan = TensorData::zeros(vec![1, 3, 64, 64]);
        nan.data_mut()[0] = f64::NAN;
        assert!(matches!(vit.encode(&mut tape, &nan), Err(Error::Numerical(_))));
    }

    #[test]
    fn encode_deterministic_and_finite() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let vit = TinyVit::new(&mut store, &mut rng, micro_cfg()).unwrap();
        store.set_group_trainable(ParamGroup::Backbone, false);
        let mut img_rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..3 {
            let img = trunc_normal::<f64>(vec![2, 3, 64, 64], 1.5, &mut img_rng);
            let mut t1 = Tape::inference(&store);
            let o1 = vit.encode(&mut t1, &img).unwrap();
            let mut t2 = Tape::inference(&store);
            let o2 = vit.encode(&mut t2, &img).unwrap();
            assert_eq!(t1.value(o1.f_deep).data(), t2.value(o2.f_deep).data());
            assert!(t1.value(o1.f_deep).all_finite());
            assert!(t1.value(o1.f_shallow).all_finite());
        }
    }
}
