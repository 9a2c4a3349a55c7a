//! Binary mask storage and the 3x3 morphology used for edge targets and
//! boundary bands. All structuring elements are 3x3, so "distance" here is
//! the Chebyshev metric; pixels outside the image count as background.

use crate::tensor::{kernels, Element, TensorData};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinMask {
    pub fn new(h: usize, w: usize) -> Self {
        BinMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        BinMask { h, w, data }
    }

    pub fn from_bools(h: usize, w: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), h * w);
        BinMask { h, w, data }
    }

    /// Threshold a float map (row-major `h*w`) at 0.5.
    pub fn from_float<T: Element>(h: usize, w: usize, values: &[T]) -> Self {
        assert_eq!(values.len(), h * w);
        BinMask {
            h,
            w,
            data: values.iter().map(|v| v.to_f64() >= 0.5).collect(),
        }
    }

    /// Foreground where the logit is positive (probability above one half).
    pub fn from_logits<T: Element>(h: usize, w: usize, logits: &[T]) -> Self {
        assert_eq!(logits.len(), h * w);
        BinMask {
            h,
            w,
            data: logits.iter().map(|v| *v > T::ZERO).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn to_tensor<T: Element>(&self) -> TensorData<T> {
        TensorData::new(
            vec![self.h, self.w],
            self.data
                .iter()
                .map(|&v| if v { T::ONE } else { T::ZERO })
                .collect(),
        )
    }

    /// 3x3 dilation; outside pixels contribute background.
    pub fn dilate3(&self) -> Self {
        self.morph3(|any_set, _all_set| any_set)
    }

    /// 3x3 erosion; the image border erodes (outside counts as background).
    pub fn erode3(&self) -> Self {
        self.morph3(|_any_set, all_set| all_set)
    }

    fn morph3(&self, combine: impl Fn(bool, bool) -> bool) -> Self {
        let mut out = BinMask::new(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut any = false;
                let mut all = true;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        let v = if ny < 0 || ny >= self.h as i64 || nx < 0 || nx >= self.w as i64 {
                            false
                        } else {
                            self.data[ny as usize * self.w + nx as usize]
                        };
                        any |= v;
                        all &= v;
                    }
                }
                out.data[y * self.w + x] = combine(any, all);
            }
        }
        out
    }

    /// Inner boundary band: mask pixels within Chebyshev distance `d` of a
    /// background (or outside-image) pixel, i.e. the mask minus `d` erosions.
    pub fn boundary_band(&self, d: usize) -> Self {
        let mut eroded = self.clone();
        for _ in 0..d {
            eroded = eroded.erode3();
        }
        BinMask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&eroded.data)
                .map(|(&m, &e)| m && !e)
                .collect(),
        }
    }

    /// Bilinear resize followed by a 0.5 threshold, keeping targets binary.
    pub fn resize(&self, oh: usize, ow: usize) -> Self {
        if oh == self.h && ow == self.w {
            return self.clone();
        }
        let t: TensorData<f64> = self.to_tensor::<f64>().reshaped(vec![1, 1, self.h, self.w]);
        let r = kernels::bilinear_resize(&t, oh, ow);
        BinMask::from_float(oh, ow, r.data())
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// Mirror left-right (used by the horizontal-flip augmentation).
    pub fn flip_horizontal(&self) -> Self {
        BinMask::from_fn(self.h, self.w, |x, y| self.get(self.w - 1 - x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, x0: usize, y0: usize, side: usize) -> BinMask {
        BinMask::from_fn(h, w, |x, y| {
            x >= x0 && x < x0 + side && y >= y0 && y < y0 + side
        })
    }

    #[test]
    fn erode_dilate_square() {
        let m = square(10, 10, 3, 3, 4);
        assert_eq!(m.count_ones(), 16);
        assert_eq!(m.dilate3().count_ones(), 36);
        assert_eq!(m.erode3().count_ones(), 4);
    }

    #[test]
    fn border_counts_as_background() {
        let full = BinMask::from_fn(5, 5, |_, _| true);
        let e = full.erode3();
        assert_eq!(e.count_ones(), 9); // interior 3x3 survives
        assert!(!e.get(0, 0));
        assert!(e.get(2, 2));
    }

    #[test]
    fn boundary_band_of_square() {
        let m = square(16, 16, 4, 4, 8);
        let band = m.boundary_band(1);
        // 8x8 minus 6x6 interior
        assert_eq!(band.count_ones(), 64 - 36);
        let band2 = m.boundary_band(2);
        assert_eq!(band2.count_ones(), 64 - 16);
        // band never exceeds the mask
        assert_eq!(band2.intersection_count(&m), band2.count_ones());
    }

    #[test]
    fn resize_preserves_solid_shape_roughly() {
        let m = square(32, 32, 8, 8, 16);
        let r = m.resize(64, 64);
        let scale = (64.0 * 64.0) / (32.0 * 32.0);
        let expected = m.count_ones() as f64 * scale;
        let got = r.count_ones() as f64;
        assert!((got - expected).abs() / expected < 0.15, "{got} vs {expected}");
    }

    #[test]
    fn flip_round_trips() {
        let m = square(8, 12, 1, 2, 3);
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
        assert!(m.flip_horizontal().get(12 - 1 - 1, 2));
    }
}
