//! Dense tensors, reverse-mode differentiation, and the optimizer/scheduler
//! pair used for training.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, MetricMode, OptimError, PlateauScheduler};
pub use params::{BoundParams, ParamStore};
pub use tape::{softmax_rows, Tape, Var};
pub use tensor::{broadcast_shape, Scalar, Tensor, TensorError, TensorResult};

use rand::Rng;

/// Uniform in `(-√(3/fan_in), √(3/fan_in))`, i.e. variance `1/fan_in`.
pub fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}
