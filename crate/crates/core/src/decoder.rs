//! Edge-aware decoder: a two-way transformer updates one mask token and one
//! edge token against the image features (stage 1), parallel hypernetwork
//! heads emit coarse mask/edge logits at 1/4 scale, and a three-step residual
//! refinement cascade carries both maps to full resolution (stage 2) together
//! with a scalar mask-quality estimate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, ChannelNorm, Conv2d, ConvT2d, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{Element, Id, ParamGroup, ParamStore, Tape, TensorData};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// Transformer width; must equal the encoder feature width.
    pub c_enc: usize,
    pub heads: usize,
    /// Number of two-way attention blocks.
    pub depth: usize,
    /// Channel width of the refinement cascade.
    pub c_refine: usize,
    pub in_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            c_enc: 192,
            heads: 4,
            depth: 2,
            c_refine: 32,
            in_channels: 3,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_enc % self.heads != 0 {
            return Err(Error::config(format!(
                "decoder width {} not divisible by heads {}",
                self.c_enc, self.heads
            )));
        }
        if self.c_enc % 8 != 0 {
            return Err(Error::config("decoder width must be divisible by 8"));
        }
        if self.depth == 0 || self.c_refine == 0 {
            return Err(Error::config("decoder depth and refine width must be positive"));
        }
        Ok(())
    }
}

/// One two-way block: token self-attention, token->image cross attention,
/// token MLP, image->token cross attention. Pre-norm residuals throughout,
/// with positional terms added to queries/keys only.
struct TwoWayBlock {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_t2i: LayerNorm,
    t2i: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
    ln_i2t: LayerNorm,
    i2t: MultiHeadAttention,
}

impl TwoWayBlock {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        let g = ParamGroup::Decoder;
        TwoWayBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), g, dim),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), g, dim, heads),
            ln_t2i: LayerNorm::new(store, &format!("{name}.ln_t2i"), g, dim),
            t2i: MultiHeadAttention::new(store, rng, &format!("{name}.t2i"), g, dim, heads),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), g, dim),
            mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.mlp"),
                g,
                &[dim, dim * 4, dim],
                Activation::Gelu,
            ),
            ln_i2t: LayerNorm::new(store, &format!("{name}.ln_i2t"), g, dim),
            i2t: MultiHeadAttention::new(store, rng, &format!("{name}.i2t"), g, dim, heads),
        }
    }

    fn forward<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: Id,
        token_pe: Id,
        image: Id,
        image_pe: Id,
    ) -> (Id, Id) {
        // token self-attention
        let tn = self.ln_self.forward(tape, tokens);
        let q = tape.add(tn, token_pe);
        let a = self.self_attn.forward(tape, q, q, tn);
        let tokens = tape.add(tokens, a);

        // tokens attend to image
        let tn = self.ln_t2i.forward(tape, tokens);
        let q = tape.add(tn, token_pe);
        let k = tape.add(image, image_pe);
        let a = self.t2i.forward(tape, q, k, image);
        let tokens = tape.add(tokens, a);

        // token mlp
        let tn = self.ln_mlp.forward(tape, tokens);
        let m = self.mlp.forward(tape, tn);
        let tokens = tape.add(tokens, m);

        // image attends to tokens
        let im_n = self.ln_i2t.forward(tape, image);
        let q = tape.add(im_n, image_pe);
        let k = tape.add(tokens, token_pe);
        let a = self.i2t.forward(tape, q, k, tokens);
        let image = tape.add(image, a);

        (tokens, image)
    }
}

struct TwoWayTransformer {
    blocks: Vec<TwoWayBlock>,
    ln_final: LayerNorm,
    final_attn: MultiHeadAttention,
}

impl TwoWayTransformer {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| TwoWayBlock::new(store, rng, &format!("decoder.twoway.{i}"), dim, heads))
            .collect();
        TwoWayTransformer {
            blocks,
            ln_final: LayerNorm::new(store, "decoder.twoway.ln_final", ParamGroup::Decoder, dim),
            final_attn: MultiHeadAttention::new(
                store,
                rng,
                "decoder.twoway.final_attn",
                ParamGroup::Decoder,
                dim,
                heads,
            ),
        }
    }

    fn forward<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        mut tokens: Id,
        token_pe: Id,
        mut image: Id,
        image_pe: Id,
    ) -> (Id, Id) {
        for block in &self.blocks {
            (tokens, image) = block.forward(tape, tokens, token_pe, image, image_pe);
        }
        let tn = self.ln_final.forward(tape, tokens);
        let q = tape.add(tn, token_pe);
        let k = tape.add(image, image_pe);
        let a = self.final_attn.forward(tape, q, k, image);
        tokens = tape.add(tokens, a);
        (tokens, image)
    }
}

/// Feature upscaler for the hypernetwork heads: two stride-2 transposed
/// convs taking the attended features from 1/16 to 1/4 scale at `C/8`
/// channels.
struct UpscaleHead {
    ct1: ConvT2d,
    norm: ChannelNorm,
    ct2: ConvT2d,
}

impl UpscaleHead {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        let g = ParamGroup::Decoder;
        UpscaleHead {
            ct1: ConvT2d::new(store, rng, &format!("{name}.up1"), g, dim, dim / 4, 2),
            norm: ChannelNorm::new(store, &format!("{name}.norm"), g, dim / 4),
            ct2: ConvT2d::new(store, rng, &format!("{name}.up2"), g, dim / 4, dim / 8, 2),
        }
    }

    fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let x = self.ct1.forward(tape, x);
        let x = self.norm.forward(tape, x);
        let x = tape.gelu(x);
        let x = self.ct2.forward(tape, x);
        tape.gelu(x)
    }
}

/// Conv + norm + relu + 2x bilinear, mapping an encoder-width map to the
/// refinement width at double resolution.
struct ProjectBlock {
    conv: Conv2d,
    norm: ChannelNorm,
}

impl ProjectBlock {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let g = ParamGroup::Refine;
        ProjectBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), g, cin, cout, 3, 1, 1),
            norm: ChannelNorm::new(store, &format!("{name}.norm"), g, cout),
        }
    }

    fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let x = self.conv.forward(tape, x);
        let x = self.norm.forward(tape, x);
        let x = tape.relu(x);
        let s = tape.value(x).shape().to_vec();
        tape.bilinear(x, s[2] * 2, s[3] * 2)
    }
}

/// Residual refinement block: 2x bilinear upsample of the concatenated
/// input, two 3x3 conv + norm stages, and a 1x1-projected residual skip.
pub(crate) struct RefineBlock {
    pub(crate) conv_a: Conv2d,
    norm_a: ChannelNorm,
    conv_b: Conv2d,
    norm_b: ChannelNorm,
    skip: Conv2d,
}

impl RefineBlock {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let g = ParamGroup::Refine;
        RefineBlock {
            conv_a: Conv2d::new(store, rng, &format!("{name}.conv_a"), g, cin, cout, 3, 1, 1),
            norm_a: ChannelNorm::new(store, &format!("{name}.norm_a"), g, cout),
            conv_b: Conv2d::new(store, rng, &format!("{name}.conv_b"), g, cout, cout, 3, 1, 1),
            norm_b: ChannelNorm::new(store, &format!("{name}.norm_b"), g, cout),
            skip: Conv2d::new(store, rng, &format!("{name}.skip"), g, cin, cout, 1, 1, 0),
        }
    }

    fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let s = tape.value(x).shape().to_vec();
        let up = tape.bilinear(x, s[2] * 2, s[3] * 2);
        let y = self.conv_a.forward(tape, up);
        let y = self.norm_a.forward(tape, y);
        let y = tape.relu(y);
        let y = self.conv_b.forward(tape, y);
        let y = self.norm_b.forward(tape, y);
        let skip = self.skip.forward(tape, up);
        let z = tape.add(y, skip);
        tape.relu(z)
    }
}

/// Stage-1 outputs: coarse mask/edge logits at 1/4 scale and the attended
/// image features at 1/16 scale.
pub struct CoarseIds {
    pub m0: Id,
    pub e0: Id,
    pub f_attn: Id,
}

/// Mask/edge logit pairs at 1/4, 1/2 and full scale plus the quality score.
pub struct PyramidIds {
    pub p4: Id,
    pub p2: Id,
    pub p1: Id,
    pub p_iou: Id,
}

/// Materialized prediction pyramid for one batch.
#[derive(Clone, Debug)]
pub struct PyramidOutputs<T> {
    pub p4: TensorData<T>,
    pub p2: TensorData<T>,
    pub p1: TensorData<T>,
    pub p_iou: Vec<T>,
}

impl<T: Element> PyramidOutputs<T> {
    pub fn from_tape(tape: &Tape<'_, T>, ids: &PyramidIds) -> Self {
        let p_iou = tape.value(ids.p_iou).data().to_vec();
        PyramidOutputs {
            p4: tape.value(ids.p4).clone(),
            p2: tape.value(ids.p2).clone(),
            p1: tape.value(ids.p1).clone(),
            p_iou,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.p1.shape()[0]
    }

    /// Full-resolution mask logits for one sample.
    pub fn mask_logits(&self, b: usize) -> Vec<T> {
        let s = self.p1.shape();
        let hw = s[2] * s[3];
        self.p1.data()[(b * 2) * hw..(b * 2 + 1) * hw].to_vec()
    }

    /// Binary mask from the full-resolution logits, thresholded at logit 0
    /// (probability one half) — the documented output contract.
    pub fn binary_mask(&self, b: usize) -> Vec<bool> {
        self.mask_logits(b).iter().map(|v| *v > T::ZERO).collect()
    }
}

pub struct EdgeDecoder {
    cfg: DecoderConfig,
    pub(crate) t_mask: usize,
    pub(crate) t_edge: usize,
    twoway: TwoWayTransformer,
    upscale_mask: UpscaleHead,
    upscale_edge: UpscaleHead,
    hyper_mask: Mlp,
    hyper_edge: Mlp,
    proj_shallow: ProjectBlock,
    proj_deep: ProjectBlock,
    pub(crate) r1: RefineBlock,
    r2: RefineBlock,
    r3: RefineBlock,
    phi1: Conv2d,
    phi2: Conv2d,
    phi3: Conv2d,
    iou_conv: Conv2d,
    iou_fc: Linear,
}

impl EdgeDecoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: DecoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c_enc;
        let cr = cfg.c_refine;
        let dg = ParamGroup::Decoder;
        let rg = ParamGroup::Refine;
        let t_mask = store.register("decoder.token.mask", dg, crate::nn::trunc_normal(vec![c], 0.02, rng));
        let t_edge = store.register("decoder.token.edge", dg, crate::nn::trunc_normal(vec![c], 0.02, rng));
        let twoway = TwoWayTransformer::new(store, rng, c, cfg.heads, cfg.depth);
        let upscale_mask = UpscaleHead::new(store, rng, "decoder.upscale.mask", c);
        let upscale_edge = UpscaleHead::new(store, rng, "decoder.upscale.edge", c);
        let hyper_mask = Mlp::new(store, rng, "decoder.hyper.mask", dg, &[c, c, c / 8], Activation::Relu);
        let hyper_edge = Mlp::new(store, rng, "decoder.hyper.edge", dg, &[c, c, c / 8], Activation::Relu);
        // R1 consumes both projected feature maps, the image and two
        // prediction channels; later blocks consume the previous state.
        let r1_in = 2 * cr + cfg.in_channels + 2;
        let ri_in = cr + cfg.in_channels + 2;
        Ok(EdgeDecoder {
            t_mask,
            t_edge,
            twoway,
            upscale_mask,
            upscale_edge,
            hyper_mask,
            hyper_edge,
            proj_shallow: ProjectBlock::new(store, rng, "refine.proj_shallow", c, cr),
            proj_deep: ProjectBlock::new(store, rng, "refine.proj_deep", c, cr),
            r1: RefineBlock::new(store, rng, "refine.r1", r1_in, cr),
            r2: RefineBlock::new(store, rng, "refine.r2", ri_in, cr),
            r3: RefineBlock::new(store, rng, "refine.r3", ri_in, cr),
            phi1: Conv2d::new(store, rng, "refine.phi1", rg, cr, 2, 3, 1, 1),
            phi2: Conv2d::new(store, rng, "refine.phi2", rg, cr, 2, 3, 1, 1),
            phi3: Conv2d::new(store, rng, "refine.phi3", rg, cr, 2, 3, 1, 1),
            iou_conv: Conv2d::new(store, rng, "refine.iou.conv", rg, cr, cr, 3, 1, 1),
            iou_fc: Linear::new(store, rng, "refine.iou.fc", rg, cr, 1),
            cfg,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Stage 1 attention: returns updated mask/edge tokens `[B, C]` and the
    /// attended image features at 1/16 scale.
    pub fn two_way_decode<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        f_deep: Id,
        prompt: Id,
        image_pe: &TensorData<T>,
    ) -> (Id, Id, Id) {
        let s = tape.value(f_deep).shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c, self.cfg.c_enc, "feature width mismatch");
        assert_eq!(tape.value(prompt).shape(), &[b, 5, c], "prompt shape mismatch");
        let n = h * w;

        let tm = tape.param(self.t_mask);
        let tm = tape.reshape(tm, vec![1, c]);
        let te = tape.param(self.t_edge);
        let te = tape.reshape(te, vec![1, c]);
        let task = tape.concat(0, &[tm, te]);
        let task = tape.broadcast_batch(task, b); // [B,2,C]
        let tokens = tape.concat(1, &[task, prompt]); // [B,7,C]

        let image = tape.reshape(f_deep, vec![b, c, n]);
        let image = tape.permute(image, &[0, 2, 1]); // [B,N,C]

        let pe = tape.constant(image_pe.clone());
        let pe = tape.broadcast_batch(pe, b); // [B,N,C]

        // the initial token states double as their positional terms
        let token_pe = tokens;
        let (tokens, image) = self.twoway.forward(tape, tokens, token_pe, image, pe);

        let t_mask = tape.slice(tokens, 1, 0, 1);
        let t_mask = tape.reshape(t_mask, vec![b, c]);
        let t_edge = tape.slice(tokens, 1, 1, 1);
        let t_edge = tape.reshape(t_edge, vec![b, c]);
        let f_attn = tape.permute(image, &[0, 2, 1]);
        let f_attn = tape.reshape(f_attn, vec![b, c, h, w]);
        (t_mask, t_edge, f_attn)
    }

    /// Parallel hypernetwork heads: upscale the attended features to 1/4 and
    /// contract against MLP-mapped tokens. The mask and edge paths share no
    /// parameters, so editing one token never changes the other map.
    pub fn coarse_heads<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        t_mask: Id,
        t_edge: Id,
        f_attn: Id,
    ) -> (Id, Id) {
        let head = |tape: &mut Tape<'_, T>, up: &UpscaleHead, hyper: &Mlp, tok: Id| {
            let feats = up.forward(tape, f_attn); // [B, C/8, 4h, 4w]
            let fs = tape.value(feats).shape().to_vec();
            let (b, c8, oh, ow) = (fs[0], fs[1], fs[2], fs[3]);
            let hv = hyper.forward(tape, tok); // [B, C/8]
            let hv = tape.reshape(hv, vec![b, 1, c8]);
            let fr = tape.reshape(feats, vec![b, c8, oh * ow]);
            let logits = tape.bmm(hv, fr); // [B, 1, oh*ow]
            tape.reshape(logits, vec![b, 1, oh, ow])
        };
        let m0 = head(tape, &self.upscale_mask, &self.hyper_mask, t_mask);
        let e0 = head(tape, &self.upscale_edge, &self.hyper_edge, t_edge);
        (m0, e0)
    }

    /// Map shallow and attended-deep features to the refinement width at 1/8.
    pub fn project_features<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        f_shallow: Id,
        f_attn: Id,
    ) -> (Id, Id) {
        let f8s = self.proj_shallow.forward(tape, f_shallow);
        let f8d = self.proj_deep.forward(tape, f_attn);
        (f8s, f8d)
    }

    /// Stage-2 cascade. `image` is the normalized input patch at full
    /// resolution; `m0`/`e0` are the stage-1 maps at 1/4 scale. Returns the
    /// final refined feature and the three prediction pairs (quality score
    /// not yet attached).
    pub fn refine<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        f8s: Id,
        f8d: Id,
        image: Id,
        m0: Id,
        e0: Id,
    ) -> (Id, Id, Id, Id) {
        let side = tape.value(image).shape()[2];
        assert_eq!(side % 8, 0, "input side must be divisible by 8");
        let p0 = tape.concat(1, &[m0, e0]); // [B,2,s/4,s/4]

        let img8 = tape.bilinear(image, side / 8, side / 8);
        let p8 = tape.bilinear(p0, side / 8, side / 8);
        let x4_in = tape.concat(1, &[f8s, f8d, img8, p8]);
        let x4 = self.r1.forward(tape, x4_in); // -> 1/4
        let p4 = self.phi1.forward(tape, x4);

        let img4 = tape.bilinear(image, side / 4, side / 4);
        let x2_in = tape.concat(1, &[x4, img4, p4]);
        let x2 = self.r2.forward(tape, x2_in); // -> 1/2
        let p2 = self.phi2.forward(tape, x2);

        let img2 = tape.bilinear(image, side / 2, side / 2);
        let x1_in = tape.concat(1, &[x2, img2, p2]);
        let x1 = self.r3.forward(tape, x1_in); // -> 1/1
        let p1 = self.phi3.forward(tape, x1);

        (x1, p4, p2, p1)
    }

    /// Quality head on the final refined feature: conv, relu, global average
    /// pool, linear, sigmoid.
    pub fn predict_iou<T: Element>(&self, tape: &mut Tape<'_, T>, x1: Id) -> Id {
        let y = self.iou_conv.forward(tape, x1);
        let y = tape.relu(y);
        let y = tape.mean_hw(y);
        let y = self.iou_fc.forward(tape, y);
        tape.sigmoid(y)
    }

    /// Full stage-1 + stage-2 pass.
    pub fn decode<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        f_deep: Id,
        f_shallow: Id,
        image: Id,
        prompt: Id,
        image_pe: &TensorData<T>,
    ) -> PyramidIds {
        let (t_mask, t_edge, f_attn) = self.two_way_decode(tape, f_deep, prompt, image_pe);
        let (m0, e0) = self.coarse_heads(tape, t_mask, t_edge, f_attn);
        let (f8s, f8d) = self.project_features(tape, f_shallow, f_attn);
        let (x1, p4, p2, p1) = self.refine(tape, f8s, f8d, image, m0, e0);
        let p_iou = self.predict_iou(tape, x1);
        PyramidIds { p4, p2, p1, p_iou }
    }
}
