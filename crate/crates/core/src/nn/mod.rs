//! A small CPU engine for 2D convolutional networks with hand-written backward passes.
//!
//! Activations are stored channel-major (`C × N × H × W`) so that every convolution is a
//! single GEMM over the whole batch and channel concatenation is a plain append.
//! Layers take their input by value and return the output together with a cache that
//! owns whatever the backward pass needs; inference just drops the caches.

mod conv;
mod norm;
mod ops;
mod se;

pub use conv::Conv2d;
pub use norm::{GroupNorm, NormCache};
pub use ops::{concat_channels, relu_backward_by_mask, relu_inplace, split_channels, upsample2x, upsample2x_backward};
pub use se::{SeCache, SeGate};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![v; n], grad: vec![0.0; n] }
    }

    /// He-normal initialization with the given fan-in.
    pub fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
        Self { shape: shape.to_vec(), value, grad: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Visits parameters in a fixed order with hierarchical names.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Channel-major activation `C × N × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    /// Elements per channel (`N·H·W`).
    #[inline]
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let m = self.plane();
        &self.data[c * m..(c + 1) * m]
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let [n, c, h, w] = t.shape;
        let hw = h * w;
        let mut data = vec![0.0; t.data.len()];
        for b in 0..n {
            for ch in 0..c {
                let src = (b * c + ch) * hw;
                let dst = (ch * n + b) * hw;
                data[dst..dst + hw].copy_from_slice(&t.data[src..src + hw]);
            }
        }
        Self { c, n, h, w, data }
    }

    pub fn to_tensor(&self) -> Tensor {
        let hw = self.h * self.w;
        let mut data = vec![0.0; self.data.len()];
        for ch in 0..self.c {
            for b in 0..self.n {
                let src = (ch * self.n + b) * hw;
                let dst = (b * self.c + ch) * hw;
                data[dst..dst + hw].copy_from_slice(&self.data[src..src + hw]);
            }
        }
        Tensor { shape: [self.n, self.c, self.h, self.w], data }
    }
}

/// Batch-major tensor `N × C × H × W`, the layout used at the public API.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{} values for tensor shape {:?}", data.len(), shape)));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    /// Stacks equally sized `C × H × W` images into a batch.
    pub fn stack(images: &[Vec<f32>], c: usize, h: usize, w: usize) -> Result<Self> {
        let per = c * h * w;
        let mut data = Vec::with_capacity(per * images.len());
        for im in images {
            if im.len() != per {
                return Err(Error::Shape(format!("image has {} values, expected {per}", im.len())));
            }
            data.extend_from_slice(im);
        }
        Self::new([images.len(), c, h, w], data)
    }

    /// Image `b` as a flat `C × H × W` slice.
    pub fn image(&self, b: usize) -> &[f32] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[b * per..(b + 1) * per]
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference checks for layer backward passes.
    use super::*;

    /// Deterministic pseudo-random values in [-1, 1].
    pub fn values(n: usize, seed: u64) -> Vec<f32> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            })
            .collect()
    }

    pub fn act(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Act {
        Act { c, n, h, w, data: values(c * n * h * w, seed) }
    }

    /// Loss used for checks: `Σ r_i · y_i` with fixed random `r`.
    pub fn probe(y: &Act, r: &[f32]) -> f64 {
        y.data.iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let scale = analytic.abs().max(numeric.abs()).max(1e-2);
        assert!(
            (analytic - numeric).abs() / scale < 2e-2,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }
}
