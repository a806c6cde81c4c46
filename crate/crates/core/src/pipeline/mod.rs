//! End-to-end model: forward pass, loss, optimizer, training loop and
//! checkpoint files.

pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model, CheckpointMeta};
pub use model::{Ablation, ForwardOutput, Model, ModelConfig};
pub use optim::Adam;
pub use train::{evaluate_mse, train, EpochRecord, History, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean over all elements of `(ŷ − y)²`.
pub fn mse_loss<T: Scalar>(yhat: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    if yhat.shape() != y.shape() {
        return Err(Error::dim(
            "mse_loss",
            "shape",
            format!("{:?} vs {:?}", yhat.shape(), y.shape()),
        ));
    }
    let s: T = yhat.data().iter().zip(y.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::from_usize(y.numel()).unwrap())
}
