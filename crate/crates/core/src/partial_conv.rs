//! Partial convolution and its mask update.
//!
//! Each output window that touches at least one valid input pixel is a
//! convolution of the masked input, rescaled by `support / valid` where
//! `support = k*k*c_in` and `valid` counts the mask ones in the window
//! (the single-channel mask is broadcast over input channels), plus bias.
//! Windows with no valid pixel produce exactly zero and stay holes. The
//! mask is a constant: no gradient flows through it.

use crate::autograd::{Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::ops;
use crate::tensor::{Precision, Shape, Tensor};

/// Binary validity map of shape `(n, 1, h, w)`: 1 = known, 0 = hole.
#[derive(Clone, PartialEq)]
pub struct MaskMap(Tensor);

impl std::fmt::Debug for MaskMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MaskMap{:?} valid={}", self.shape(), self.valid_count())
    }
}

impl MaskMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().c() != 1 {
            return Err(dim_err!("mask must have one channel, got {:?}", t.shape()));
        }
        if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(contract_err!("mask is not binary: found value {v}"));
        }
        Ok(MaskMap(t))
    }

    pub fn full(n: usize, h: usize, w: usize) -> Self {
        MaskMap(Tensor::ones([n, 1, h, w]))
    }

    pub fn empty(n: usize, h: usize, w: usize) -> Self {
        MaskMap(Tensor::zeros([n, 1, h, w]))
    }

    /// Build from a predicate over `(n, y, x)` returning validity.
    pub fn from_fn(n: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    data.push(if f(b, y, x) { 1.0 } else { 0.0 });
                }
            }
        }
        MaskMap(Tensor::from_parts(Shape::new(n, 1, h, w), data))
    }

    /// `h x w` mask with a `size x size` centred hole.
    pub fn centered_hole(h: usize, w: usize, size: usize) -> Self {
        let (y0, x0) = ((h - size) / 2, (w - size) / 2);
        MaskMap::from_fn(1, h, w, |_, y, x| {
            !(y >= y0 && y < y0 + size && x >= x0 && x < x0 + size)
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    #[inline]
    pub fn is_valid(&self, n: usize, y: usize, x: usize) -> bool {
        self.0.at(n, 0, y, x) == 1.0
    }

    pub fn valid_count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn hole_count(&self) -> usize {
        self.0.numel() - self.valid_count()
    }

    pub fn hole_fraction(&self) -> f64 {
        self.hole_count() as f64 / self.0.numel() as f64
    }

    pub fn is_full(&self) -> bool {
        self.hole_count() == 0
    }

    /// Pointwise `self >= other`.
    pub fn covers(&self, other: &MaskMap) -> bool {
        self.shape() == other.shape() && self.0.data().iter().zip(other.0.data()).all(|(a, b)| a >= b)
    }

    pub fn union(&self, other: &MaskMap) -> Result<MaskMap> {
        Ok(MaskMap(self.0.zip_map(&other.0, f64::max)?))
    }

    /// Pixels valid in `self` but not in `earlier`.
    pub fn newly_valid(&self, earlier: &MaskMap) -> Result<MaskMap> {
        Ok(MaskMap(self.0.zip_map(&earlier.0, |a, b| if a == 1.0 && b == 0.0 { 1.0 } else { 0.0 })?))
    }

    pub fn batch_item(&self, n: usize) -> MaskMap {
        MaskMap(self.0.batch_item(n))
    }

    pub fn stack(items: &[MaskMap]) -> Result<MaskMap> {
        let ts: Vec<Tensor> = items.iter().map(|m| m.0.clone()).collect();
        Ok(MaskMap(Tensor::stack_batch(&ts)?))
    }

    /// Nearest-neighbour resize: output pixel `(y, x)` reads input
    /// `(floor(y*h/oh), floor(x*w/ow))`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> MaskMap {
        let s = self.shape();
        let (h, w) = (s.h(), s.w());
        MaskMap::from_fn(s.n(), oh, ow, |b, y, x| self.is_valid(b, y * h / oh, x * w / ow))
    }
}

/// Number of valid mask pixels inside every convolution window, `(n, 1, ho, wo)`.
pub fn window_valid_counts(mask: &MaskMap, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let ones = Tensor::ones([1, 1, kernel, kernel]);
    ops::conv2d(mask.tensor(), &ones, None, stride, padding)
}

/// Mask produced by a partial convolution with the given geometry.
pub fn mask_update_only(mask: &MaskMap, kernel: usize, stride: usize, padding: usize) -> Result<MaskMap> {
    let counts = window_valid_counts(mask, kernel, stride, padding)?;
    Ok(MaskMap(counts.map(|c| if c > 0.0 { 1.0 } else { 0.0 })))
}

/// Differentiable partial convolution; returns features and updated mask.
pub fn partial_conv(
    tape: &Tape,
    x: &Var,
    mask: &MaskMap,
    weight: &Var,
    bias: &Var,
    stride: usize,
    padding: usize,
) -> Result<(Var, MaskMap)> {
    let (xs, ms) = (x.shape(), mask.shape());
    if xs.n() != ms.n() || xs.h() != ms.h() || xs.w() != ms.w() {
        return Err(dim_err!(
            "partial_conv: features {xs:?} and mask {ms:?} differ in batch or spatial size"
        ));
    }
    let k = weight.shape().h();
    let counts = window_valid_counts(mask, k, stride, padding)?;
    let window = (k * k) as f64;
    let ratio = counts.map(|c| if c > 0.0 { window / c } else { 0.0 });
    let new_mask = MaskMap(counts.map(|c| if c > 0.0 { 1.0 } else { 0.0 }));

    let masked = tape.mul(x, &tape.constant(mask.tensor().clone()))?;
    let conv = tape.conv2d(&masked, weight, None, stride, padding)?;
    let scaled = tape.mul(&conv, &tape.constant(ratio))?;
    let bias4 = check_bias(bias)?;
    let biased = tape.add(&scaled, &bias4)?;
    let out = tape.mul(&biased, &tape.constant(new_mask.tensor().clone()))?;
    Ok((out, new_mask))
}

fn check_bias(bias: &Var) -> Result<Var> {
    let s = bias.shape();
    if s == Shape::new(1, s.c(), 1, 1) {
        return Ok(bias.clone());
    }
    Err(dim_err!("bias must be a (1, c, 1, 1) vector, got {s:?}"))
}

/// Pure partial convolution on plain tensors.
pub fn partial_conv_forward(
    features: &Tensor,
    mask: &MaskMap,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    precision: Precision,
) -> Result<(Tensor, MaskMap)> {
    let tape = Tape::inference(precision);
    let (y, m) = partial_conv(
        &tape,
        &tape.constant(features.clone()),
        mask,
        &tape.constant(weight.clone()),
        &tape.constant(bias.clone()),
        stride,
        padding,
    )?;
    Ok((y.to_tensor(), m))
}
