//! Minimal deterministic differentiable-tensor engine.

mod batchnorm;
mod gradcheck;
mod params;
mod serialize;
mod tape;
mod tensor;

pub use batchnorm::{batchnorm, channel_stats, BatchNormState, Mode, BN_EPS, BN_MOMENTUM};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, HasParams};
pub use params::{Param, ParamStore};
pub use serialize::{
    load_tensor, read_file, save_tensor, ByteReader, ByteWriter, FORMAT_VERSION, TENSOR_MAGIC,
};
pub(crate) use tape::softmax_row;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// Glorot-uniform tensor: entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape, values).expect("shape matches length")
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
