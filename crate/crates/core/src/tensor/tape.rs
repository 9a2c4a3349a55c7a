//! The autodiff tape: forward builders push nodes, `backward` walks them in
//! reverse and accumulates gradients into parameter slots.

use super::kernels as k;
use super::{Element, ParamStore, TensorData};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Id(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(usize),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    AddBiasLast,
    MatMul,
    BatchMatMul,
    Relu,
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm { eps: f64 },
    ChannelNorm { eps: f64 },
    Conv2d { stride: usize, pad: usize },
    ConvT2d { k: usize },
    Bilinear,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Permute(Vec<usize>),
    Reshape,
    BroadcastBatch(usize),
    MeanAll,
    SumAll,
    MeanHw,
    BceWithLogits,
    SmoothL1 { beta: f64 },
}

struct Node<T> {
    op: Op,
    inputs: Vec<Id>,
    value: TensorData<T>,
    needs_grad: bool,
}

/// Gradients per parameter id, produced by [`Tape::backward`].
pub struct Grads<T> {
    slots: Vec<Option<TensorData<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, pid: usize) -> Option<&TensorData<T>> {
        self.slots.get(pid).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, pid: usize) -> Option<TensorData<T>> {
        self.slots.get_mut(pid).and_then(|s| s.take())
    }
}

/// A single forward pass under construction. Rebuilt every step; dropping it
/// frees all intermediate activations.
pub struct Tape<'p, T: Element> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    /// When false, parameters enter as constants and `backward` is unavailable
    /// (inference mode; keeps needs_grad flags all-false so no graph metadata
    /// is retained beyond values).
    grad_enabled: bool,
}

impl<'p, T: Element> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Inference-mode tape: no gradients tracked.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, id: Id) -> &TensorData<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<Id>, value: TensorData<T>) -> Id {
        let needs_grad = self.grad_enabled
            && match op {
                Op::Const => false,
                Op::Param(pid) => self.params.trainable(pid),
                _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
            };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Id(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: TensorData<T>) -> Id {
        self.push(Op::Const, vec![], value)
    }

    pub fn param(&mut self, pid: usize) -> Id {
        let value = self.params.value(pid).clone();
        self.push(Op::Param(pid), vec![], value)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let v = TensorData::from_fn(self.value(a).shape().to_vec(), |i| {
            self.value(a).data()[i] - self.value(b).data()[i]
        });
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let v = TensorData::from_fn(self.value(a).shape().to_vec(), |i| {
            self.value(a).data()[i] * self.value(b).data()[i]
        });
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn div(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "div shape mismatch");
        let v = TensorData::from_fn(self.value(a).shape().to_vec(), |i| {
            self.value(a).data()[i] / self.value(b).data()[i]
        });
        self.push(Op::Div, vec![a, b], v)
    }

    pub fn neg(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg, vec![a], v)
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let cv = T::from_f64(c);
        let v = self.value(a).map(|x| x * cv);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: Id, c: f64) -> Id {
        let cv = T::from_f64(c);
        let v = self.value(a).map(|x| x + cv);
        self.push(Op::AddScalar, vec![a], v)
    }

    /// `x [..., C] + bias [C]`.
    pub fn add_bias_last(&mut self, x: Id, bias: Id) -> Id {
        let c = *self.value(x).shape().last().unwrap();
        assert_eq!(self.value(bias).numel(), c, "bias length mismatch");
        let bd = self.value(bias).data();
        let v = TensorData::from_fn(self.value(x).shape().to_vec(), |i| {
            self.value(x).data()[i] + bd[i % c]
        });
        self.push(Op::AddBiasLast, vec![x, bias], v)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = k::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul, vec![a, b], v)
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Id, b: Id) -> Id {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-d");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm inner dim mismatch");
        let (bn, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = TensorData::zeros(vec![bn, m, n]);
        for i in 0..bn {
            T::gemm_strided(
                m,
                kk,
                n,
                T::ONE,
                &self.value(a).data()[i * m * kk..],
                kk as isize,
                1,
                &self.value(b).data()[i * kk * n..],
                n as isize,
                1,
                T::ZERO,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Op::BatchMatMul, vec![a, b], out)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| x.maximum(T::ZERO));
        self.push(Op::Relu, vec![a], v)
    }

    pub fn gelu(&mut self, a: Id) -> Id {
        let v = self.value(a).map(k::gelu);
        self.push(Op::Gelu, vec![a], v)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = self.value(a).map(k::sigmoid);
        self.push(Op::Sigmoid, vec![a], v)
    }

    pub fn softmax(&mut self, a: Id) -> Id {
        let v = k::softmax_last_dim(self.value(a));
        self.push(Op::Softmax, vec![a], v)
    }

    /// LayerNorm over the last dimension.
    pub fn layer_norm(&mut self, x: Id, gamma: Id, beta: Id, eps: f64) -> Id {
        let n = *self.value(x).shape().last().unwrap();
        let outer = self.value(x).numel() / n;
        let v = k::norm_axis_forward(self.value(x), self.value(gamma), self.value(beta), outer, n, 1, eps);
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], v)
    }

    /// Normalize across channels of `[B,C,H,W]` per spatial location.
    pub fn channel_norm(&mut self, x: Id, gamma: Id, beta: Id, eps: f64) -> Id {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 4, "channel_norm expects [B,C,H,W]");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let v = k::norm_axis_forward(self.value(x), self.value(gamma), self.value(beta), b, c, hw, eps);
        self.push(Op::ChannelNorm { eps }, vec![x, gamma, beta], v)
    }

    pub fn conv2d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Id {
        let v = k::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(Op::Conv2d { stride, pad }, vec![x, w, b], v)
    }

    pub fn convt2d(&mut self, x: Id, w: Id, b: Id, kk: usize) -> Id {
        let v = k::convt2d_forward(self.value(x), self.value(w), self.value(b), kk);
        self.push(Op::ConvT2d { k: kk }, vec![x, w, b], v)
    }

    pub fn bilinear(&mut self, x: Id, oh: usize, ow: usize) -> Id {
        let v = k::bilinear_resize(self.value(x), oh, ow);
        self.push(Op::Bilinear, vec![x], v)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let base = self.value(parts[0]).shape().to_vec();
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), base.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&base).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch on dim {d}");
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = TensorData::zeros(shape);
        let mut offset = 0usize;
        for &p in parts {
            let alen = self.value(p).shape()[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * alen * inner;
                out.data_mut()[dst_start..dst_start + alen * inner]
                    .copy_from_slice(&src[src_start..src_start + alen * inner]);
            }
            offset += alen;
        }
        self.push(Op::Concat { axis }, parts.to_vec(), out)
    }

    pub fn slice(&mut self, x: Id, axis: usize, start: usize, len: usize) -> Id {
        let s = self.value(x).shape().to_vec();
        assert!(start + len <= s[axis], "slice out of range");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut out = TensorData::zeros(shape);
        for o in 0..outer {
            let src_start = (o * s[axis] + start) * inner;
            let dst_start = o * len * inner;
            out.data_mut()[dst_start..dst_start + len * inner]
                .copy_from_slice(&self.value(x).data()[src_start..src_start + len * inner]);
        }
        self.push(Op::Slice { axis, start, len }, vec![x], out)
    }

    pub fn permute(&mut self, x: Id, perm: &[usize]) -> Id {
        let v = permute_data(self.value(x), perm);
        self.push(Op::Permute(perm.to_vec()), vec![x], v)
    }

    pub fn reshape(&mut self, x: Id, shape: Vec<usize>) -> Id {
        let v = self.value(x).clone().reshaped(shape);
        self.push(Op::Reshape, vec![x], v)
    }

    /// Tile `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Id, b: usize) -> Id {
        let mut shape = vec![b];
        shape.extend_from_slice(self.value(x).shape());
        let n = self.value(x).numel();
        let mut out = TensorData::zeros(shape);
        for i in 0..b {
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(self.value(x).data());
        }
        self.push(Op::BroadcastBatch(b), vec![x], out)
    }

    pub fn mean_all(&mut self, x: Id) -> Id {
        let n = self.value(x).numel();
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let v = TensorData::scalar(s / T::from_f64(n as f64));
        self.push(Op::MeanAll, vec![x], v)
    }

    pub fn sum_all(&mut self, x: Id) -> Id {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Op::SumAll, vec![x], TensorData::scalar(s))
    }

    /// Global average pool `[B,C,H,W] -> [B,C]`.
    pub fn mean_hw(&mut self, x: Id) -> Id {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 4);
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::from_f64(1.0 / hw as f64);
        let mut out = TensorData::zeros(vec![b, c]);
        for i in 0..b * c {
            let mut acc = T::ZERO;
            for &v in &self.value(x).data()[i * hw..(i + 1) * hw] {
                acc += v;
            }
            out.data_mut()[i] = acc * inv;
        }
        self.push(Op::MeanHw, vec![x], out)
    }

    /// Mean binary cross-entropy on logits against (possibly soft) targets.
    pub fn bce_with_logits(&mut self, logits: Id, target: Id) -> Id {
        assert_eq!(
            self.value(logits).shape(),
            self.value(target).shape(),
            "bce shape mismatch"
        );
        let n = self.value(logits).numel();
        let mut acc = T::ZERO;
        for i in 0..n {
            let x = self.value(logits).data()[i];
            let t = self.value(target).data()[i];
            acc += x.maximum(T::ZERO) - x * t + k::log1p_exp_neg_abs(x);
        }
        let v = TensorData::scalar(acc / T::from_f64(n as f64));
        self.push(Op::BceWithLogits, vec![logits, target], v)
    }

    /// Mean smooth-L1: `0.5 d^2` for `|d| < beta`, else `|d| - 0.5 beta`.
    pub fn smooth_l1(&mut self, pred: Id, target: Id, beta: f64) -> Id {
        assert_eq!(self.value(pred).shape(), self.value(target).shape());
        let n = self.value(pred).numel();
        let bt = T::from_f64(beta);
        let half = T::from_f64(0.5);
        let mut acc = T::ZERO;
        for i in 0..n {
            let d = self.value(pred).data()[i] - self.value(target).data()[i];
            acc += if d.abs() < bt {
                half * d * d
            } else {
                d.abs() - half * bt
            };
        }
        let v = TensorData::scalar(acc / T::from_f64(n as f64));
        self.push(Op::SmoothL1 { beta }, vec![pred, target], v)
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Reverse sweep from a scalar loss; returns per-parameter gradients.
    pub fn backward(&self, loss: Id) -> Grads<T> {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.value(loss).numel(), 1, "loss must be scalar");
        let mut grads = Grads {
            slots: (0..self.params.len()).map(|_| None).collect(),
        };
        if !self.nodes[loss.0].needs_grad {
            return grads;
        }
        let mut node_grads: Vec<Option<TensorData<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(TensorData::scalar(T::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let input_val = |j: usize| &self.nodes[node.inputs[j].0].value;
            let send = |slot_idx: usize, delta: TensorData<T>, node_grads: &mut Vec<Option<TensorData<T>>>| {
                let target = node.inputs[slot_idx].0;
                if !self.nodes[target].needs_grad {
                    return;
                }
                match &mut node_grads[target] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };

            match &node.op {
                Op::Const => {}
                Op::Param(pid) => {
                    match &mut grads.slots[*pid] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
                Op::Add => {
                    send(0, g.clone(), &mut node_grads);
                    send(1, g, &mut node_grads);
                }
                Op::Sub => {
                    send(0, g.clone(), &mut node_grads);
                    send(1, g.map(|v| -v), &mut node_grads);
                }
                Op::Mul => {
                    let da = TensorData::from_fn(g.shape().to_vec(), |j| g.data()[j] * input_val(1).data()[j]);
                    let db = TensorData::from_fn(g.shape().to_vec(), |j| g.data()[j] * input_val(0).data()[j]);
                    send(0, da, &mut node_grads);
                    send(1, db, &mut node_grads);
                }
                Op::Div => {
                    let (a, b) = (input_val(0), input_val(1));
                    let da = TensorData::from_fn(g.shape().to_vec(), |j| g.data()[j] / b.data()[j]);
                    let db = TensorData::from_fn(g.shape().to_vec(), |j| {
                        -g.data()[j] * a.data()[j] / (b.data()[j] * b.data()[j])
                    });
                    send(0, da, &mut node_grads);
                    send(1, db, &mut node_grads);
                }
                Op::Neg => send(0, g.map(|v| -v), &mut node_grads),
                Op::Scale(c) => {
                    let cv = T::from_f64(*c);
                    send(0, g.map(|v| v * cv), &mut node_grads);
                }
                Op::AddScalar => send(0, g, &mut node_grads),
                Op::AddBiasLast => {
                    let c = *input_val(1).shape().first().unwrap_or(&input_val(1).numel());
                    let c = if input_val(1).shape().len() == 1 { input_val(1).numel() } else { c };
                    let mut db = TensorData::zeros(vec![c]);
                    for (j, &v) in g.data().iter().enumerate() {
                        db.data_mut()[j % c] += v;
                    }
                    send(0, g, &mut node_grads);
                    send(1, db, &mut node_grads);
                }
                Op::MatMul => {
                    let (a, b) = (input_val(0), input_val(1));
                    let da = k::matmul_nt(&g, b);
                    let db = k::matmul_tn(a, &g);
                    send(0, da, &mut node_grads);
                    send(1, db, &mut node_grads);
                }
                Op::BatchMatMul => {
                    let (a, b) = (input_val(0), input_val(1));
                    let (bn, m, kk) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                    let n = b.shape()[2];
                    let mut da = TensorData::zeros(a.shape().to_vec());
                    let mut db = TensorData::zeros(b.shape().to_vec());
                    for bi in 0..bn {
                        // da = g x b^T
                        T::gemm_strided(
                            m,
                            n,
                            kk,
                            T::ONE,
                            &g.data()[bi * m * n..],
                            n as isize,
                            1,
                            &b.data()[bi * kk * n..],
                            1,
                            n as isize,
                            T::ZERO,
                            &mut da.data_mut()[bi * m * kk..(bi + 1) * m * kk],
                        );
                        // db = a^T x g
                        T::gemm_strided(
                            kk,
                            m,
                            n,
                            T::ONE,
                            &a.data()[bi * m * kk..],
                            1,
                            kk as isize,
                            &g.data()[bi * m * n..],
                            n as isize,
                            1,
                            T::ZERO,
                            &mut db.data_mut()[bi * kk * n..(bi + 1) * kk * n],
                        );
                    }
                    send(0, da, &mut node_grads);
                    send(1, db, &mut node_grads);
                }
                Op::Relu => {
                    let x = input_val(0);
                    let dx = TensorData::from_fn(g.shape().to_vec(), |j| {
                        if x.data()[j] > T::ZERO { g.data()[j] } else { T::ZERO }
                    });
                    send(0, dx, &mut node_grads);
                }
                Op::Gelu => {
                    let x = input_val(0);
                    let dx = TensorData::from_fn(g.shape().to_vec(), |j| {
                        g.data()[j] * k::gelu_derivative(x.data()[j])
                    });
                    send(0, dx, &mut node_grads);
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    let dx = TensorData::from_fn(g.shape().to_vec(), |j| {
                        let yv = y.data()[j];
                        g.data()[j] * yv * (T::ONE - yv)
                    });
                    send(0, dx, &mut node_grads);
                }
                Op::Softmax => {
                    let dx = k::softmax_backward(&node.value, &g);
                    send(0, dx, &mut node_grads);
                }
                Op::LayerNorm { eps } => {
                    let x = input_val(0);
                    let n = *x.shape().last().unwrap();
                    let outer = x.numel() / n;
                    let (dx, dgamma, dbeta) =
                        k::norm_axis_backward(x, input_val(1), &g, outer, n, 1, *eps);
                    send(0, dx, &mut node_grads);
                    send(1, dgamma, &mut node_grads);
                    send(2, dbeta, &mut node_grads);
                }
                Op::ChannelNorm { eps } => {
                    let x = input_val(0);
                    let s = x.shape();
                    let (dx, dgamma, dbeta) = k::norm_axis_backward(
                        x,
                        input_val(1),
                        &g,
                        s[0],
                        s[1],
                        s[2] * s[3],
                        *eps,
                    );
                    send(0, dx, &mut node_grads);
                    send(1, dgamma, &mut node_grads);
                    send(2, dbeta, &mut node_grads);
                }
                Op::Conv2d { stride, pad } => {
                    let (dx, dw, db) =
                        k::conv2d_backward(input_val(0), input_val(1), &g, *stride, *pad);
                    send(0, dx, &mut node_grads);
                    send(1, dw, &mut node_grads);
                    send(2, db, &mut node_grads);
                }
                Op::ConvT2d { k: kk } => {
                    let (dx, dw, db) = k::convt2d_backward(input_val(0), input_val(1), &g, *kk);
                    send(0, dx, &mut node_grads);
                    send(1, dw, &mut node_grads);
                    send(2, db, &mut node_grads);
                }
                Op::Bilinear => {
                    let s = input_val(0).shape();
                    let dx = k::bilinear_backward(&g, s[2], s[3]);
                    send(0, dx, &mut node_grads);
                }
                Op::Concat { axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0usize;
                    for idx in 0..node.inputs.len() {
                        let alen = input_val(idx).shape()[*axis];
                        let mut part = TensorData::zeros(input_val(idx).shape().to_vec());
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            let dst_start = o * alen * inner;
                            part.data_mut()[dst_start..dst_start + alen * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + alen * inner]);
                        }
                        offset += alen;
                        send(idx, part, &mut node_grads);
                    }
                }
                Op::Slice { axis, start, len } => {
                    let in_shape = input_val(0).shape().to_vec();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let mut dx = TensorData::zeros(in_shape.clone());
                    for o in 0..outer {
                        let dst_start = (o * in_shape[*axis] + start) * inner;
                        let src_start = o * len * inner;
                        dx.data_mut()[dst_start..dst_start + len * inner]
                            .copy_from_slice(&g.data()[src_start..src_start + len * inner]);
                    }
                    send(0, dx, &mut node_grads);
                }
                Op::Permute(perm) => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(0, permute_data(&g, &inv), &mut node_grads);
                }
                Op::Reshape => {
                    let shape = input_val(0).shape().to_vec();
                    send(0, g.reshaped(shape), &mut node_grads);
                }
                Op::BroadcastBatch(b) => {
                    let n = input_val(0).numel();
                    let mut dx = TensorData::zeros(input_val(0).shape().to_vec());
                    for bi in 0..*b {
                        for j in 0..n {
                            dx.data_mut()[j] += g.data()[bi * n + j];
                        }
                    }
                    send(0, dx, &mut node_grads);
                }
                Op::MeanAll => {
                    let n = input_val(0).numel();
                    let gv = g.item() / T::from_f64(n as f64);
                    send(0, TensorData::full(input_val(0).shape().to_vec(), gv), &mut node_grads);
                }
                Op::SumAll => {
                    let gv = g.item();
                    send(0, TensorData::full(input_val(0).shape().to_vec(), gv), &mut node_grads);
                }
                Op::MeanHw => {
                    let s = input_val(0).shape().to_vec();
                    let hw = s[2] * s[3];
                    let inv = T::from_f64(1.0 / hw as f64);
                    let mut dx = TensorData::zeros(s);
                    for (bc, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        let gv = g.data()[bc] * inv;
                        for v in chunk {
                            *v = gv;
                        }
                    }
                    send(0, dx, &mut node_grads);
                }
                Op::BceWithLogits => {
                    let (x, t) = (input_val(0), input_val(1));
                    let n = x.numel();
                    let inv = T::from_f64(1.0 / n as f64);
                    let gv = g.item();
                    let dx = TensorData::from_fn(x.shape().to_vec(), |j| {
                        (k::sigmoid(x.data()[j]) - t.data()[j]) * inv * gv
                    });
                    let dt = TensorData::from_fn(x.shape().to_vec(), |j| -x.data()[j] * inv * gv);
                    send(0, dx, &mut node_grads);
                    send(1, dt, &mut node_grads);
                }
                Op::SmoothL1 { beta } => {
                    let (p, t) = (input_val(0), input_val(1));
                    let n = p.numel();
                    let inv = T::from_f64(1.0 / n as f64);
                    let gv = g.item();
                    let bt = T::from_f64(*beta);
                    let dd = TensorData::from_fn(p.shape().to_vec(), |j| {
                        let d = p.data()[j] - t.data()[j];
                        let base = if d.abs() < bt {
                            d
                        } else if d > T::ZERO {
                            T::ONE
                        } else {
                            -T::ONE
                        };
                        base * inv * gv
                    });
                    send(0, dd.clone(), &mut node_grads);
                    send(1, dd.map(|v| -v), &mut node_grads);
                }
            }
        }
        grads
    }
}

use super::kernels::permute as permute_data;
