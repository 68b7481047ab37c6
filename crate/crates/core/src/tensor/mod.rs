//! Dense NCHW tensors, patch unfold/fold, and reverse-mode autodiff.
//!
//! Storage is a flat row-major buffer behind a shape of up to four extents,
//! interpreted as N x C x H x W for images. All numeric code is generic over
//! [`Scalar`] so the same operations run in f32 (training default) and f64
//! (gradient-check headroom).

mod conv;
mod graph;

pub use graph::{Graph, Node};

use crate::error::{Error, Result};
use num_traits::{Float, NumAssignOps, NumCast};
use rand::Rng;
use std::fmt::{Debug, Display};

/// Element type of all tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssignOps + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 -> scalar conversion")
    }
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Dense tensor: flat row-major data plus a shape of 1..=4 extents.
///
/// A batch extent of zero is permitted (an empty patch group routes through
/// encoders as a zero-sample batch); all other uses keep extents >= 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(format!(
                "rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {} implies {} elements, data has {}",
                fmt_shape(shape),
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Uniform random tensor in `[lo, hi)`; draws one value per element in
    /// row-major order.
    pub fn random<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The shape as (N, C, H, W); errors unless the tensor is rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape(format!(
                "expected rank-4 tensor, got {}",
                fmt_shape(&self.shape)
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get4(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn set4(&mut self, n: usize, c: usize, y: usize, x: usize, v: S) {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * ch + c) * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn fill(&mut self, v: S) {
        for x in self.data.iter_mut() {
            *x = v;
        }
    }
}

/// Splits an `N x 1 x H x W` image into non-overlapping `n x n` patches,
/// enumerated row-major over the patch grid (top-left patch is index 0).
pub fn unfold<S: Scalar>(input: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    let (batch, c, h, w) = input.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!(
            "unfold expects a single channel, got {}",
            fmt_shape(input.shape())
        )));
    }
    if n == 0 {
        return Err(Error::invalid("patch size must be >= 1"));
    }
    if h % n != 0 || w % n != 0 {
        return Err(Error::invalid(format!(
            "image {}x{} not divisible by patch size {}; pad the image first",
            h, w, n
        )));
    }
    let (gh, gw) = (h / n, w / n);
    let p = gh * gw;
    let mut out = Tensor::zeros(&[batch, p, n, n]);
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                let pid = gy * gw + gx;
                for py in 0..n {
                    let src = ((b * h) + gy * n + py) * w + gx * n;
                    let dst = (((b * p) + pid) * n + py) * n;
                    out.data[dst..dst + n].copy_from_slice(&input.data[src..src + n]);
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`unfold`]: reassembles `N x P x n x n` patches into the
/// `N x 1 x H x W` image they came from.
pub fn fold<S: Scalar>(patches: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (batch, p, n, n2) = patches.dims4()?;
    if n != n2 {
        return Err(Error::shape(format!(
            "patches must be square, got {}",
            fmt_shape(patches.shape())
        )));
    }
    if n == 0 || h % n != 0 || w % n != 0 || p != (h / n) * (w / n) {
        return Err(Error::invalid(format!(
            "inconsistent fold target: {} patches of {}x{} vs image {}x{}",
            p, n, n, h, w
        )));
    }
    let gw = w / n;
    let mut out = Tensor::zeros(&[batch, 1, h, w]);
    for b in 0..batch {
        for pid in 0..p {
            let (gy, gx) = (pid / gw, pid % gw);
            for py in 0..n {
                let src = (((b * p) + pid) * n + py) * n;
                let dst = ((b * h) + gy * n + py) * w + gx * n;
                out.data[dst..dst + n].copy_from_slice(&patches.data[src..src + n]);
            }
        }
    }
    Ok(out)
}
