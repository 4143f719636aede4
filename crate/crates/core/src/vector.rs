//! Dense model vectors and the handful of BLAS-1 helpers the solver needs.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// A model (or gradient, or dual) vector in `R^d`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        ModelVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ModelVector(values)
    }

    /// Unit basis vector `e_index`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[index] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        axpy(&mut self.0, alpha, other);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::Shape { expected, actual: self.dim() });
        }
        Ok(())
    }
}

impl Deref for ModelVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(values: Vec<f64>) -> Self {
        ModelVector(values)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Arithmetic mean of equally sized vectors, summed in slice order.
pub fn mean(vectors: &[ModelVector]) -> Option<ModelVector> {
    let first = vectors.first()?;
    let mut acc = ModelVector::zeros(first.dim());
    for v in vectors {
        acc.axpy(1.0, v);
    }
    acc.scale(1.0 / vectors.len() as f64);
    Some(acc)
}
