//! Named parameter tensors shared by the encoder, the span model, the
//! optimizers and the checkpoint format.

use ndarray::{Array1, Array2};
use rand::Rng;

pub enum TensorRef<'a> {
    Vector(&'a Array1<f64>),
    Matrix(&'a Array2<f64>),
}

pub enum TensorMut<'a> {
    Vector(&'a mut Array1<f64>),
    Matrix(&'a mut Array2<f64>),
}

impl TensorRef<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Vector(v) => vec![v.len()],
            TensorRef::Matrix(m) => m.shape().to_vec(),
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            TensorRef::Vector(v) => v.as_slice().expect("standard layout"),
            TensorRef::Matrix(m) => m.as_slice().expect("standard layout"),
        }
    }
}

impl TensorMut<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorMut::Vector(v) => vec![v.len()],
            TensorMut::Matrix(m) => m.shape().to_vec(),
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            TensorMut::Vector(v) => v.as_slice_mut().expect("standard layout"),
            TensorMut::Matrix(m) => m.as_slice_mut().expect("standard layout"),
        }
    }
}

/// A fixed, ordered set of named tensors. Gradients use the same type as
/// the parameters they belong to.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)>;
    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)>;

    fn fill(&mut self, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.values().len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, mut dst), (_, src)) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
                *d += scale * s;
            }
        }
    }
}

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

pub fn uniform_vector(rng: &mut impl Rng, len: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..=bound))
}

/// `m += a ⊗ b`
pub fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: ndarray::ArrayView1<'_, f64>) {
    for (i, ai) in a.iter().enumerate() {
        if *ai == 0.0 {
            continue;
        }
        let mut row = m.row_mut(i);
        row.scaled_add(*ai, &b);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln Σ exp(s)` with max subtraction.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}
