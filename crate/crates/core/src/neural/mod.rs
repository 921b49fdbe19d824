//! Dense-network primitives, reverse-mode gradients, Adam and the pose losses.

mod adam;
mod dense;
pub mod gradcheck;
mod kabsch_grad;
mod loss;
mod matrix;
mod params_io;
pub mod tape;

pub use adam::Adam;
pub use dense::{activate, Activation, BoundStack, DenseLayer, DenseStack};
pub use kabsch_grad::{kabsch_backward, KabschInputGrad, DEFAULT_FD_STEP};
pub use loss::{loss_total, loss_total_grad, rotation_loss, translation_loss, LossConfig};
pub use matrix::Matrix;
pub use params_io::{load_params, read_params, save_params, write_params, FORMAT_VERSION, MAGIC};
pub use tape::{sigmoid, softmax, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Applies the same stack to each of the `K` member rows.
pub fn shared_mlp_forward(stack: &DenseStack, features: &Matrix) -> Result<Matrix> {
    stack.forward(features)
}

/// Channelwise maximum over member rows.
pub fn maxpool(features: &Matrix) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::EmptySet);
    }
    Ok(tape::group_max(features, features.rows()).0.into_vec())
}
