use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Smoothing constant of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// How logits become probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Independent sigmoid per channel with binary cross-entropy.
    Sigmoid,
    /// Softmax across channels with categorical cross-entropy.
    Softmax,
}

impl Activation {
    /// Sigmoid for a single output channel, softmax otherwise.
    pub fn for_channels(channels: usize) -> Self {
        if channels > 1 {
            Activation::Softmax
        } else {
            Activation::Sigmoid
        }
    }

    pub fn probabilities<T: Scalar>(self, logits: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Sigmoid => logits.map(crate::grad::sigmoid),
            Activation::Softmax => {
                let c = logits.channels();
                let plane = logits.numel() / c;
                let d = logits.data();
                let mut out = vec![T::zero(); d.len()];
                for p in 0..plane {
                    let m = (0..c).map(|k| d[k * plane + p]).fold(T::neg_infinity(), T::max);
                    let z: T = (0..c).map(|k| (d[k * plane + p] - m).exp()).sum();
                    for k in 0..c {
                        out[k * plane + p] = (d[k * plane + p] - m).exp() / z;
                    }
                }
                Tensor::from_vec(logits.shape().to_vec(), out).expect("same shape")
            }
        }
    }
}

/// Graph nodes of the composite loss.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// `1 − mean_c softDice_c`.
    pub dice: Var,
    pub cross_entropy: Var,
}

pub fn check_binary<T: Scalar>(mask: &Tensor<T>, what: &'static str) -> Result<()> {
    match mask
        .data()
        .iter()
        .position(|&v| v != T::zero() && v != T::one())
    {
        None => Ok(()),
        Some(i) => Err(Error::InvalidArgument(format!(
            "{what} must be binary, found {} at index {i}",
            mask.data()[i]
        ))),
    }
}

/// Soft Dice plus cross-entropy between `logits` and a binary `mask` of the
/// same shape.
pub fn soft_dice_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    mask: &Tensor<T>,
    activation: Activation,
) -> Result<LossParts> {
    let z = g.value(logits);
    if z.shape() != mask.shape() {
        return Err(Error::shape("soft_dice_ce_loss", z.shape(), mask.shape()));
    }
    check_binary(mask, "mask")?;
    let channels = mask.channels();
    let plane = mask.numel() / channels;
    let smooth: T = lit(DICE_SMOOTH);
    let target = g.constant(mask.clone());

    let (probs, cross_entropy) = match activation {
        Activation::Sigmoid => {
            // softplus(z) − g·z = −[g ln σ(z) + (1 − g) ln(1 − σ(z))]
            let sp = g.softplus(logits);
            let gz = g.mul(logits, target)?;
            let ce = g.sub(sp, gz)?;
            let ce = g.mean(ce);
            (g.sigmoid(logits), ce)
        }
        Activation::Softmax => {
            let logp = g.log_softmax(logits);
            let picked = g.mul(logp, target)?;
            let total = g.sum(picked);
            let ce = g.scale(total, -T::one() / lit(plane as f64));
            (g.exp(logp), ce)
        }
    };

    let overlap = g.mul(probs, target)?;
    let inter = g.sum_spatial(overlap);
    let psum = g.sum_spatial(probs);
    let gsum: Vec<T> = mask
        .data()
        .chunks(plane)
        .map(|c| c.iter().copied().sum::<T>() + smooth)
        .collect();
    let gsum = g.constant(Tensor::from_vec(vec![channels], gsum)?);
    let num = g.scale(inter, lit(2.0));
    let num = g.add_scalar(num, smooth);
    let den = g.add(psum, gsum)?;
    let dice = g.div(num, den)?;
    let mean_dice = g.mean(dice);
    let neg = g.scale(mean_dice, -T::one());
    let dice_loss = g.add_scalar(neg, T::one());
    let total = g.add(dice_loss, cross_entropy)?;
    Ok(LossParts {
        total,
        dice: dice_loss,
        cross_entropy,
    })
}
