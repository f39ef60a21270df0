use crate::autodiff::rng::RngState;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise
/// `1 / (1 - p)`. One mask is drawn per sequence and reused at every step.
pub fn dropout_mask<T: Real>(shape: &[usize], p: f64, rng: &mut RngState) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
    }
    let keep = T::from_f64c(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if rng.uniform() < p { T::zero() } else { keep }).collect();
    Tensor::new(shape.to_vec(), data)
}
