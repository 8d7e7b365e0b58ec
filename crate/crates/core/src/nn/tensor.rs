//! Dense f64 tensor used by the denoiser internals. Parameters,
//! gradients, optimizer moments and activations all share this type;
//! the f32 raster boundary converts on the way in and out.

use crate::error::{Error, Result};
use crate::raster::RasterImage;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    /// Channel plane of a [c, h, w] tensor.
    pub fn plane(&self, c: usize) -> &[f64] {
        let (h, w) = (self.shape[1], self.shape[2]);
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let (h, w) = (self.shape[1], self.shape[2]);
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn from_raster(img: &RasterImage) -> Self {
        let (c, h, w) = img.shape();
        Self {
            shape: vec![c, h, w],
            data: img.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn to_raster(&self) -> Result<RasterImage> {
        if self.shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                expected: "rank-3 tensor".into(),
                got: format!("rank {}", self.shape.len()),
            });
        }
        let data: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        RasterImage::new(self.shape[0], self.shape[1], self.shape[2], data)
    }
}

/// Ordered family of shape-congruent tensors. Parameters, gradient
/// buffers, optimizer moments and SWA sums are all `TensorSet`s with
/// identical layouts, so elementwise zips stay trivial.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    pub tensors: Vec<Tensor>,
}

impl TensorSet {
    pub fn zeros_like(other: &TensorSet) -> Self {
        Self {
            tensors: other.tensors.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// data[i] += alpha * other.data[i] across the whole family.
    pub fn axpy(&mut self, alpha: f64, other: &TensorSet) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= alpha;
            }
        }
    }
}
