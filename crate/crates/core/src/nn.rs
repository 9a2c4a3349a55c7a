//! Layers over the autodiff tape: linear, norms, convolutions, attention.
//!
//! A layer owns parameter ids in the [`ParamStore`]; forward methods take the
//! store only implicitly through the tape. Construction order fixes parameter
//! order, which checkpoints and the optimizer rely on.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Id, ParamGroup, ParamStore, Tape, TensorData};

pub const LN_EPS: f64 = 1e-5;

/// Normal(0, std) truncated at two standard deviations.
pub fn trunc_normal<T: Element>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> TensorData<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    TensorData::from_fn(shape, |_| {
        let mut v = dist.sample(rng);
        while v.abs() > 2.0 * std {
            v = dist.sample(rng);
        }
        T::from_f64(v)
    })
}

/// He-style init for conv/linear weights: Normal(0, sqrt(2 / fan_in)).
pub fn kaiming<T: Element>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> TensorData<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    TensorData::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.weight"),
            group,
            kaiming(vec![in_dim, out_dim], in_dim, rng),
        );
        let b = store.register(format!("{name}.bias"), group, TensorData::zeros(vec![out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let shape = tape.value(x).shape().to_vec();
        let rows = tape.value(x).numel() / self.in_dim;
        assert_eq!(
            *shape.last().unwrap(),
            self.in_dim,
            "linear expects trailing dim {}, got {shape:?}",
            self.in_dim
        );
        let flat = tape.reshape(x, vec![rows, self.in_dim]);
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(flat, w);
        let y = tape.add_bias_last(y, b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, out_shape)
    }
}

pub struct LayerNorm {
    pub g: usize,
    pub b: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        let g = store.register(format!("{name}.gamma"), group, TensorData::full(vec![dim], T::ONE));
        let b = store.register(format!("{name}.beta"), group, TensorData::zeros(vec![dim]));
        LayerNorm { g, b }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let g = tape.param(self.g);
        let b = tape.param(self.b);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Per-location channel normalization for `[B,C,H,W]` maps. Statistics are
/// per sample, so batched and single-sample runs agree exactly.
pub struct ChannelNorm {
    pub g: usize,
    pub b: usize,
}

impl ChannelNorm {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        let g = store.register(format!("{name}.gamma"), group, TensorData::full(vec![dim], T::ONE));
        let b = store.register(format!("{name}.beta"), group, TensorData::zeros(vec![dim]));
        ChannelNorm { g, b }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let g = tape.param(self.g);
        let b = tape.param(self.b);
        tape.channel_norm(x, g, b, LN_EPS)
    }
}

pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.weight"),
            group,
            kaiming(vec![cout, cin, k, k], cin * k * k, rng),
        );
        let b = store.register(format!("{name}.bias"), group, TensorData::zeros(vec![cout]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed conv with kernel == stride, the 2x upscaling block.
pub struct ConvT2d {
    pub w: usize,
    pub b: usize,
    pub k: usize,
}

impl ConvT2d {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.weight"),
            group,
            kaiming(vec![cin, cout, k, k], cin, rng),
        );
        let b = store.register(format!("{name}.bias"), group, TensorData::zeros(vec![cout]));
        ConvT2d { w, b, k }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.convt2d(x, w, b, self.k)
    }
}

/// Stack of linear layers with an activation between them (none after the
/// last), the hypernetwork/MLP shape used by the decoder heads.
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        act: Activation,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::new(store, rng, &format!("{name}.{i}"), group, dims[i], dims[i + 1]))
            .collect();
        Mlp { layers, act }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, mut x: Id) -> Id {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x);
            if i + 1 < self.layers.len() {
                x = match self.act {
                    Activation::Relu => tape.relu(x),
                    Activation::Gelu => tape.gelu(x),
                };
            }
        }
        x
    }
}

pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), group, dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), group, dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), group, dim, dim),
            o: Linear::new(store, rng, &format!("{name}.out"), group, dim, dim),
            heads,
            head_dim: dim / heads,
        }
    }

    /// Cross attention: queries `[B,Nq,C]`, keys/values `[B,Nk,C]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, q_in: Id, k_in: Id, v_in: Id) -> Id {
        let (b, nq) = (tape.value(q_in).shape()[0], tape.value(q_in).shape()[1]);
        let nk = tape.value(k_in).shape()[1];
        let h = self.heads;
        let dh = self.head_dim;
        let c = h * dh;

        let split = |tape: &mut Tape<'_, T>, x: Id, n: usize| -> Id {
            let x = tape.reshape(x, vec![b, n, h, dh]);
            let x = tape.permute(x, &[0, 2, 1, 3]);
            tape.reshape(x, vec![b * h, n, dh])
        };

        let q = self.q.forward(tape, q_in);
        let k = self.k.forward(tape, k_in);
        let v = self.v.forward(tape, v_in);
        let q = split(tape, q, nq);
        let k = split(tape, k, nk);
        let v = split(tape, v, nk);

        let kt = tape.permute(k, &[0, 2, 1]);
        let scores = tape.bmm(q, kt);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores);
        let out = tape.bmm(attn, v);

        let out = tape.reshape(out, vec![b, h, nq, dh]);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, vec![b, nq, c]);
        self.o.forward(tape, out)
    }
}

/// Pre-norm ViT block: `x + attn(ln(x))`, `x + mlp(ln(x))`. The pre-norm
/// arrangement keeps the residual path exactly identity when projections are
/// zeroed, which the decoder tests exploit.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), group, dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.mlp"),
                group,
                &[dim, dim * mlp_ratio, dim],
                Activation::Gelu,
            ),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Id) -> Id {
        let n = self.ln1.forward(tape, x);
        let a = self.attn.forward(tape, n, n, n);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, x);
        let m = self.mlp.forward(tape, n);
        tape.add(x, m)
    }
}
