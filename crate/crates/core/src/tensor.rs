//! Dense rank-4 tensors in NCHW order.
//!
//! Element storage is `f64`. Computations run under a [`Precision`]; in
//! single precision every produced value is rounded to the nearest `f32`
//! so results are exactly what 32-bit storage would hold.

use std::fmt;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::memory;

/// Arithmetic precision of a computation context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    pub fn round_slice(self, data: &mut [f64]) {
        if self == Precision::Single {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// `(n, c, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_c(&self, c: usize) -> Shape {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    /// Shape produced by broadcasting `self` against `other`.
    pub fn broadcast(&self, other: &Shape) -> Result<Shape> {
        let mut out = [0; 4];
        for axis in 0..4 {
            let (a, b) = (self.0[axis], other.0[axis]);
            out[axis] = if a == b || b == 1 {
                a
            } else if a == 1 {
                b
            } else {
                return Err(dim_err!(
                    "cannot broadcast {self:?} with {other:?}: axis {} has {a} vs {b}",
                    AXIS_NAMES[axis]
                ));
            };
        }
        Ok(Shape(out))
    }
}

pub(crate) const AXIS_NAMES: [&str; 4] = ["batch", "channel", "height", "width"];

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(dims: [usize; 4]) -> Self {
        Shape(dims)
    }
}

/// Owned element buffer that reports its size to the allocation counter.
struct Storage(Vec<f64>);

impl Storage {
    fn new(data: Vec<f64>) -> Self {
        memory::record_alloc(data.len() * std::mem::size_of::<f64>());
        Storage(data)
    }
}

impl Clone for Storage {
    fn clone(&self) -> Self {
        Storage::new(self.0.clone())
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        memory::record_free(self.0.len() * std::mem::size_of::<f64>());
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Storage,
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {} elements but {} were given",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data: Storage::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Storage::new(data),
        }
    }

    pub fn full(shape: impl Into<Shape>, value: f64) -> Self {
        let shape = shape.into();
        Tensor::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// A 1-D vector stored as `(1, len, 1, 1)`, the layout used for biases
    /// and per-channel statistics.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor::from_parts(Shape::new(1, values.len(), 1, 1), values)
    }

    pub fn uniform<R: Rng>(shape: impl Into<Shape>, low: f64, high: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| rng.gen_range(low..high)).collect();
        Tensor::from_parts(shape, data)
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data.0
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data.0
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        let v = std::mem::take(&mut self.data.0);
        memory::record_free(v.len() * std::mem::size_of::<f64>());
        v
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data.0[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(n, c, y, x);
        self.data.0[o] = v;
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data.0[0]
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Tensor::from_parts(shape, self.data.0.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape, self.data.0.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape, "zip_map")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape, data))
    }

    /// Sequential left-to-right sum.
    pub fn sum(&self) -> f64 {
        self.data().iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .fold(0.0, |acc, (&a, &b)| acc + a * b))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape, "max_abs_diff")?;
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn rounded(mut self, precision: Precision) -> Tensor {
        precision.round_slice(self.data_mut());
        self
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, &b) in self.data_mut().iter_mut().zip(other.data()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// Copy of batch item `n` as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = self.numel() / self.shape.n();
        let data = self.data()[n * per..(n + 1) * per].to_vec();
        Tensor::from_parts(self.shape.with_n(1), data)
    }

    /// Stack tensors of identical `(c, h, w)` along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| dim_err!("cannot stack an empty list"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if s.0[1..] != first.0[1..] {
                return Err(dim_err!("cannot stack {s:?} with {first:?}"));
            }
            n += s.n();
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::from_parts(first.with_n(n), data))
    }

    pub(crate) fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(mismatch(what, self.shape, shape));
        }
        Ok(())
    }
}

impl Shape {
    pub fn with_n(&self, n: usize) -> Shape {
        Shape([n, self.0[1], self.0[2], self.0[3]])
    }
}

/// Dimension error that names every axis on which `a` and `b` disagree.
pub(crate) fn mismatch(what: &str, a: Shape, b: Shape) -> crate::error::RfrError {
    let axes: Vec<&str> = (0..4)
        .filter(|&i| a.0[i] != b.0[i])
        .map(|i| AXIS_NAMES[i])
        .collect();
    dim_err!("{what}: shape {a:?} vs {b:?} differ on {}", axes.join(", "))
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}
