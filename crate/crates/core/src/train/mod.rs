//! Segmentation training and evaluation.

pub mod data;
mod loss;
pub mod metrics;
mod optim;
pub mod sliding;
mod trainer;

pub use data::{synth_dataset, Sample, SynthConfig};
pub use loss::{check_binary, soft_dice_ce_loss, Activation, LossParts, DICE_SMOOTH};
pub use metrics::{binarize, dice_score, hd95, MetricsReport, MetricsRow};
pub use optim::{AdamW, CosineSchedule};
pub use sliding::{sliding_window, window_offsets};
pub use trainer::{batch_gradients, train, LogRow, TrainConfig, TrainOutcome};

use crate::error::Result;
use crate::net::Deconver;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sliding-window probabilities of `net` over a whole image.
pub fn predict_probabilities<T: Scalar>(
    net: &Deconver<T>,
    image: &Tensor<T>,
    patch: &[usize],
) -> Result<Tensor<T>> {
    let activation = Activation::for_channels(net.config().out_channels);
    sliding_window(image, patch, |crop| {
        Ok(activation.probabilities(&net.predict_logits(crop)?))
    })
}
