//! Rectified-flow generator at toy scale.
//!
//! Time convention: one MDP time `t ∈ [0, 1]` with pure noise at `t = 0` and
//! data at `t = 1`, so `x_t = t·x_data + (1 − t)·ε`. The network predicts the
//! flow-time velocity `ε − x_data` (the derivative with respect to `1 − t`),
//! which makes one Euler step read `x ← x − v·Δt` while `t` advances by `Δt`.
//!
//! | MDP time `t` | flow time `1 − t` | state          |
//! |--------------|-------------------|----------------|
//! | 0            | 1                 | noise `ε`      |
//! | `k·Δt`       | `1 − k·Δt`        | `x_{1−kΔt}`    |
//! | 1            | 0                 | data           |

mod codec;
mod model;
mod sample;
mod train;

use thiserror::Error;

pub use codec::{decode_latent, encode_latent, LatentGrid, CODEC_FACTOR};
pub use model::{VelocityModel, VelocityModelConfig, CHECKPOINT_KIND};
pub use sample::{initial_noise, ode_sample, ode_sample_batch, ode_trajectory};
pub use train::{sft_loss, sft_loss_and_grads, train_flow, FlowExample, FlowHyper, FlowStepMetrics};

use crate::checkpoint::CheckpointError;
use crate::text::TokenError;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("image {0}×{1} is not divisible by the codec factor {2}")]
    Indivisible(usize, usize, usize),
    #[error("time {0} outside [0, 1]")]
    TimeDomain(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid hyper-parameters: {0}")]
    Hyper(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
}

/// `t·x_data + (1 − t)·eps`.
pub fn forward_sample(x_data: &LatentGrid, eps: &LatentGrid, t: f64) -> Result<LatentGrid, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeDomain(t));
    }
    x_data.check_same(eps)?;
    Ok(x_data.zip_map(eps, |x, e| t * x + (1.0 - t) * e))
}

/// Regression target of the velocity network: `eps − x_data`, constant in `t`.
pub fn velocity_target(x_data: &LatentGrid, eps: &LatentGrid) -> Result<LatentGrid, FlowError> {
    x_data.check_same(eps)?;
    Ok(x_data.zip_map(eps, |x, e| e - x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(vals: &[f64]) -> LatentGrid {
        LatentGrid::new(1, 1, vals.len(), vals.to_vec())
    }

    #[test]
    fn forward_sample_boundaries() {
        let (x, e) = (grid(&[1.0, -2.0, 3.0]), grid(&[0.5, 0.5, -1.0]));
        assert_eq!(forward_sample(&x, &e, 1.0).unwrap(), x);
        assert_eq!(forward_sample(&x, &e, 0.0).unwrap(), e);
        assert_eq!(forward_sample(&x, &e, 0.5).unwrap(), grid(&[0.75, -0.75, 1.0]));
        assert!(matches!(forward_sample(&x, &e, 1.5), Err(FlowError::TimeDomain(_))));
    }

    #[test]
    fn target_is_time_derivative_in_flow_time() {
        let (x, e) = (grid(&[1.0, -2.0, 3.0, 0.2]), grid(&[0.5, 0.1, -1.0, 0.2]));
        let v = velocity_target(&x, &e).unwrap();
        assert_eq!(v.data[3], 0.0);
        let h = 1e-6;
        for t in [0.1, 0.5, 0.9] {
            let a = forward_sample(&x, &e, t + h).unwrap();
            let b = forward_sample(&x, &e, t - h).unwrap();
            for k in 0..4 {
                let dxdt = (a.data[k] - b.data[k]) / (2.0 * h);
                // Moving forward in MDP time moves backward in flow time.
                assert!((dxdt + v.data[k]).abs() <= 1e-6);
            }
        }
        assert!(velocity_target(&x, &grid(&[1.0])).is_err());
    }
}
