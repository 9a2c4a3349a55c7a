//! Prompt encoding: the horizontal envelope box and the three oriented
//! points become five tokens via random-Fourier coordinate encoding plus
//! learned role embeddings.
//!
//! The same frozen frequency matrix also encodes the image token grid, so
//! point tokens and image positions live in one positional space — the
//! decoder's cross-attention relies on that alignment.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{HBox, PromptPoints};
use crate::tensor::{Element, Id, ParamGroup, ParamStore, Tape, TensorData};

/// Token order within every prompt embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptRole {
    BoxCornerTl,
    BoxCornerBr,
    PointFg,
}

/// Fixed concatenation order: box corners first, then the axis points.
pub const PROMPT_ROLES: [PromptRole; 5] = [
    PromptRole::BoxCornerTl,
    PromptRole::BoxCornerBr,
    PromptRole::PointFg,
    PromptRole::PointFg,
    PromptRole::PointFg,
];

/// Materialized prompt tokens `[5, C]` with their role labels.
#[derive(Clone, Debug)]
pub struct PromptEmbedding<T> {
    pub tokens: TensorData<T>,
    pub roles: [PromptRole; 5],
}

pub struct PromptEncoder {
    /// Gaussian frequency matrix `[2, C/2]`, a frozen buffer.
    freq: usize,
    role_box_tl: usize,
    role_box_br: usize,
    role_point_fg: usize,
    c_enc: usize,
}

impl PromptEncoder {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng, c_enc: usize) -> Self {
        assert!(c_enc % 2 == 0, "prompt width must be even");
        let dist = Normal::new(0.0, 1.0).unwrap();
        let freq = store.register(
            "prompt.freq",
            ParamGroup::Buffer,
            TensorData::from_fn(vec![2, c_enc / 2], |_| T::from_f64(dist.sample(rng))),
        );
        let role_box_tl = store.register(
            "prompt.role.box_tl",
            ParamGroup::Prompt,
            crate::nn::trunc_normal(vec![c_enc], 0.02, rng),
        );
        let role_box_br = store.register(
            "prompt.role.box_br",
            ParamGroup::Prompt,
            crate::nn::trunc_normal(vec![c_enc], 0.02, rng),
        );
        let role_point_fg = store.register(
            "prompt.role.point_fg",
            ParamGroup::Prompt,
            crate::nn::trunc_normal(vec![c_enc], 0.02, rng),
        );
        PromptEncoder {
            freq,
            role_box_tl,
            role_box_br,
            role_point_fg,
            c_enc,
        }
    }

    pub fn width(&self) -> usize {
        self.c_enc
    }

    /// Random-Fourier features of a point with coordinates normalized by
    /// `s_in`: `[sin(2 pi f . u), cos(2 pi f . u)]` for `u = 2 c/s_in - 1`.
    fn coord_features<T: Element>(&self, store: &ParamStore<T>, x: f64, y: f64, s_in: u32) -> Vec<T> {
        let freq = store.value(self.freq);
        let half = self.c_enc / 2;
        let u = 2.0 * (x / s_in as f64) - 1.0;
        let v = 2.0 * (y / s_in as f64) - 1.0;
        let mut out = vec![T::ZERO; self.c_enc];
        for j in 0..half {
            let phase = 2.0
                * std::f64::consts::PI
                * (u * freq.data()[j].to_f64() + v * freq.data()[half + j].to_f64());
            out[j] = T::from_f64(phase.sin());
            out[half + j] = T::from_f64(phase.cos());
        }
        out
    }

    fn check_range(points: &PromptPoints, s_in: u32) -> Result<()> {
        let hi = s_in as f64;
        for (label, p) in [("p1", points.p1), ("c", points.c), ("p2", points.p2)] {
            if p.x < 0.0 || p.x > hi || p.y < 0.0 || p.y > hi || !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::domain(format!(
                    "prompt point {label} = ({}, {}) outside crop [0, {hi}]",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }

    /// Frequency features + foreground role for the three axis points.
    /// Coordinates must lie within the crop `[0, s_in]`.
    pub fn encode_points<T: Element>(
        &self,
        store: &ParamStore<T>,
        points: &PromptPoints,
        s_in: u32,
    ) -> Result<TensorData<T>> {
        Self::check_range(points, s_in)?;
        let role = store.value(self.role_point_fg);
        let mut data = Vec::with_capacity(3 * self.c_enc);
        for p in [points.p1, points.c, points.p2] {
            let f = self.coord_features(store, p.x, p.y, s_in);
            data.extend(f.iter().zip(role.data()).map(|(&a, &b)| a + b));
        }
        Ok(TensorData::new(vec![3, self.c_enc], data))
    }

    /// Full prompt: `[box-tl, box-br, p1, c, p2]` as a `[5, C]` token matrix.
    pub fn assemble_prompt<T: Element>(
        &self,
        store: &ParamStore<T>,
        bbox: &HBox,
        points: &PromptPoints,
        s_in: u32,
    ) -> Result<PromptEmbedding<T>> {
        Self::check_range(points, s_in)?;
        let mut data = Vec::with_capacity(5 * self.c_enc);
        let corners = [
            (bbox.x, bbox.y, self.role_box_tl),
            (bbox.right(), bbox.bottom(), self.role_box_br),
        ];
        for (x, y, role) in corners {
            let f = self.coord_features(store, x, y, s_in);
            let r = store.value(role);
            data.extend(f.iter().zip(r.data()).map(|(&a, &b)| a + b));
        }
        let fg = store.value(self.role_point_fg);
        for p in [points.p1, points.c, points.p2] {
            let f = self.coord_features(store, p.x, p.y, s_in);
            data.extend(f.iter().zip(fg.data()).map(|(&a, &b)| a + b));
        }
        Ok(PromptEmbedding {
            tokens: TensorData::new(vec![5, self.c_enc], data),
            roles: PROMPT_ROLES,
        })
    }

    /// Tape version of [`assemble_prompt`] so role embeddings receive
    /// gradients during training. The frequency features enter as constants
    /// (the matrix is a frozen buffer).
    pub fn assemble_on_tape<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        store: &ParamStore<T>,
        bbox: &HBox,
        points: &PromptPoints,
        s_in: u32,
    ) -> Result<Id> {
        Self::check_range(points, s_in)?;
        let mut freq_rows = Vec::with_capacity(5 * self.c_enc);
        for (x, y) in [
            (bbox.x, bbox.y),
            (bbox.right(), bbox.bottom()),
            (points.p1.x, points.p1.y),
            (points.c.x, points.c.y),
            (points.p2.x, points.p2.y),
        ] {
            freq_rows.extend(self.coord_features(store, x, y, s_in));
        }
        let freq = tape.constant(TensorData::new(vec![5, self.c_enc], freq_rows));
        let tl = tape.param(self.role_box_tl);
        let tl = tape.reshape(tl, vec![1, self.c_enc]);
        let br = tape.param(self.role_box_br);
        let br = tape.reshape(br, vec![1, self.c_enc]);
        let fg = tape.param(self.role_point_fg);
        let fg = tape.reshape(fg, vec![1, self.c_enc]);
        let roles = tape.concat(0, &[tl, br, fg, fg, fg]);
        Ok(tape.add(freq, roles))
    }

    /// Positional encoding of the token grid (`side x side` cells covering a
    /// crop of `s_in` pixels), used as the image-side positional term in the
    /// decoder's cross attention. Shares the point frequency matrix.
    pub fn dense_grid<T: Element>(&self, store: &ParamStore<T>, side: usize, s_in: u32) -> TensorData<T> {
        let cell = s_in as f64 / side as f64;
        let mut data = Vec::with_capacity(side * side * self.c_enc);
        for row in 0..side {
            for col in 0..side {
                let x = (col as f64 + 0.5) * cell;
                let y = (row as f64 + 0.5) * cell;
                data.extend(self.coord_features(store, x, y, s_in));
            }
        }
        TensorData::new(vec![side * side, self.c_enc], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn setup() -> (ParamStore<f64>, PromptEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let enc = PromptEncoder::new(&mut store, &mut rng, 32);
        (store, enc)
    }

    fn pts(p1: (f64, f64), c: (f64, f64), p2: (f64, f64)) -> PromptPoints {
        PromptPoints {
            p1: Point::new(p1.0, p1.1),
            c: Point::new(c.0, c.1),
            p2: Point::new(p2.0, p2.1),
        }
    }

    #[test]
    fn tokens_shape_and_distinctness() {
        let (store, enc) = setup();
        let p = pts((10.0, 20.0), (50.0, 60.0), (90.0, 100.0));
        let t = enc.encode_points(&store, &p, 256).unwrap();
        assert_eq!(t.shape(), &[3, 32]);
        // pairwise distinct tokens for distinct points
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d: f64 = (0..32)
                    .map(|j| (t.data()[a * 32 + j] - t.data()[b * 32 + j]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 1e-6, "tokens {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn identical_points_identical_tokens() {
        let (store, enc) = setup();
        let p = pts((128.0, 128.0), (128.0, 128.0), (128.0, 128.0));
        let t = enc.encode_points(&store, &p, 256).unwrap();
        assert_eq!(t.data()[0..32], t.data()[32..64]);
        assert_eq!(t.data()[32..64], t.data()[64..96]);
    }

    #[test]
    fn out_of_range_rejected() {
        let (store, enc) = setup();
        let p = pts((-1.0, 10.0), (50.0, 60.0), (90.0, 100.0));
        assert!(matches!(
            enc.encode_points(&store, &p, 256),
            Err(Error::Domain(_))
        ));
        let p = pts((10.0, 10.0), (50.0, 60.0), (90.0, 300.0));
        assert!(enc.encode_points(&store, &p, 256).is_err());
    }

    #[test]
    fn prompt_assembly_order_and_locality() {
        let (store, enc) = setup();
        let bbox = HBox::new(10.0, 20.0, 100.0, 50.0).unwrap();
        let p = pts((30.0, 45.0), (60.0, 45.0), (90.0, 45.0));
        let e = enc.assemble_prompt(&store, &bbox, &p, 256).unwrap();
        assert_eq!(e.tokens.shape(), &[5, 32]);
        assert_eq!(e.roles, PROMPT_ROLES);

        // swapping p1/p2 changes tokens 2 and 4 only
        let swapped = pts((90.0, 45.0), (60.0, 45.0), (30.0, 45.0));
        let e2 = enc.assemble_prompt(&store, &bbox, &swapped, 256).unwrap();
        for tok in [0usize, 1, 3] {
            assert_eq!(
                e.tokens.data()[tok * 32..(tok + 1) * 32],
                e2.tokens.data()[tok * 32..(tok + 1) * 32],
                "token {tok} should be unchanged"
            );
        }
        for tok in [2usize, 4] {
            assert_ne!(
                e.tokens.data()[tok * 32..(tok + 1) * 32],
                e2.tokens.data()[tok * 32..(tok + 1) * 32],
                "token {tok} should differ"
            );
        }
    }

    #[test]
    fn scale_invariance_of_relative_geometry() {
        // same relative geometry at different s_in gives identical tokens
        let (store, enc) = setup();
        let b1 = HBox::new(16.0, 16.0, 64.0, 32.0).unwrap();
        let p1 = pts((32.0, 32.0), (48.0, 32.0), (64.0, 32.0));
        let b2 = HBox::new(32.0, 32.0, 128.0, 64.0).unwrap();
        let p2 = pts((64.0, 64.0), (96.0, 64.0), (128.0, 64.0));
        let e1 = enc.assemble_prompt(&store, &b1, &p1, 128).unwrap();
        let e2 = enc.assemble_prompt(&store, &b2, &p2, 256).unwrap();
        for (a, b) in e1.tokens.data().iter().zip(e2.tokens.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_assembly_matches_pure() {
        let (store, enc) = setup();
        let bbox = HBox::new(10.0, 20.0, 100.0, 50.0).unwrap();
        let p = pts((30.0, 45.0), (60.0, 45.0), (90.0, 45.0));
        let pure = enc.assemble_prompt(&store, &bbox, &p, 256).unwrap();
        let mut tape = Tape::new(&store);
        let id = enc
            .assemble_on_tape(&mut tape, &store, &bbox, &p, 256)
            .unwrap();
        assert_eq!(tape.value(id).data(), pure.tokens.data());
    }

    #[test]
    fn dense_grid_shape() {
        let (store, enc) = setup();
        let g = enc.dense_grid(&store, 16, 256);
        assert_eq!(g.shape(), &[256, 32]);
        assert!(g.all_finite());
    }
}
