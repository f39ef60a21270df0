//! Parameter initializers: Gaussian N(0, σ²) for feed-forward weights and
//! embeddings, random orthogonal for recurrent matrices, zeros for biases.

use nalgebra::DMatrix;

use crate::autodiff::rng::RngState;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviation used for every non-recurrent weight.
pub const GAUSSIAN_STD: f64 = 0.01;

pub fn init_zero<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn init_gaussian<T: Real>(shape: &[usize], std: f64, rng: &mut RngState) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(std * rng.normal())).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Random orthogonal matrix. Rectangular shapes take the leading block of a
/// square orthogonal matrix of the larger side, so either the rows or the
/// columns are orthonormal.
pub fn init_orthogonal<T: Real>(shape: &[usize], rng: &mut RngState) -> Result<Tensor<T>> {
    let &[rows, cols] = shape else {
        return Err(Error::Shape(format!("orthogonal init needs a matrix, got {shape:?}")));
    };
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("orthogonal init of empty shape {shape:?}")));
    }
    let n = rows.max(cols);
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix so the result is Haar-distributed rather than biased by QR's convention
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(T::from_f64c(q[(i, j)]));
        }
    }
    Tensor::matrix(rows, cols, data)
}
