use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Squared reconstruction error over masked patches, in both reductions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss<T> {
    /// `Σ_i ‖Ê_i − Y_i‖²`.
    pub sum: T,
    /// `sum / (N · patch_dim)`; the optimisation objective.
    pub mean: T,
}

pub fn mse_masked_loss<T: Scalar>(targets: &Tensor<T>, recon: &Tensor<T>) -> Result<MaskedLoss<T>, TensorError> {
    if targets.shape() != recon.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_masked_loss",
            lhs: targets.shape().to_vec(),
            rhs: recon.shape().to_vec(),
        });
    }
    if targets.is_empty() {
        return Err(TensorError::Contract("masked loss needs at least one masked patch".into()));
    }
    let sum: T = targets.data().iter().zip(recon.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(MaskedLoss { sum, mean: sum / T::lit(targets.len() as f64) })
}
