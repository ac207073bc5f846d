use std::fmt::Write as _;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{augment, random_patch, Sample};
use super::loss::{soft_dice_ce_loss, Activation};
use super::optim::{AdamW, CosineSchedule};
use crate::error::{Error, Result};
use crate::grad::{Graph, ParamStore};
use crate::net::Deconver;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Training window; `None` uses whole samples.
    pub patch: Option<Vec<usize>>,
    pub flip: bool,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 2,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            warmup_fraction: 0.01,
            patch: None,
            flip: true,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "learning_rate, weight_decay and noise_sigma must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice_loss: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub log: Vec<LogRow>,
    /// Parameters after the step with the lowest batch loss.
    pub best: ParamStore<T>,
    pub best_step: usize,
    pub best_loss: f64,
}

impl<T> TrainOutcome<T> {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.log {
            writeln!(s, "{},{},{}", r.step, r.lr, r.loss).unwrap();
        }
        s
    }
}

/// Batch loss and parameter gradients averaged over `batch`.
pub fn batch_gradients<T: Scalar>(
    net: &Deconver<T>,
    batch: &[Sample<T>],
) -> Result<(f64, f64, Vec<Tensor<T>>)> {
    let activation = Activation::for_channels(net.config().out_channels);
    let mut grads: Vec<Tensor<T>> = net.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let (mut loss, mut dice) = (0.0, 0.0);
    let inv: T = lit(1.0 / batch.len() as f64);
    for s in batch {
        let mut g = Graph::new();
        let p = g.bind(&net.params);
        let x = g.constant(s.image.clone());
        let z = net.forward_graph(&mut g, &p, x)?;
        let parts = soft_dice_ce_loss(&mut g, z, &s.mask, activation)?;
        loss += g.value(parts.total).data()[0].as_f64();
        dice += g.value(parts.dice).data()[0].as_f64();
        let mut back = g.backward(parts.total)?;
        for (acc, &v) in grads.iter_mut().zip(&p) {
            if let Some(gr) = back.take(v) {
                for (a, &b) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a += b * inv;
                }
            }
        }
    }
    let n = batch.len() as f64;
    Ok((loss / n, dice / n, grads))
}

/// Minimises soft Dice plus cross-entropy with AdamW under a warmup-cosine
/// schedule. Fails with [`Error::Diverged`] on a non-finite loss.
pub fn train<T: Scalar>(
    net: &mut Deconver<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let schedule = CosineSchedule::new(cfg.learning_rate, cfg.steps, cfg.warmup_fraction);
    let mut opt = AdamW::new(&net.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best = net.params.clone();
    let (mut best_step, mut best_loss) = (0, f64::INFINITY);

    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let s = &data[rng.random_range(0..data.len())];
                let s = match &cfg.patch {
                    Some(p) => random_patch(s, p, &mut rng)?,
                    None => s.clone(),
                };
                augment(&s, cfg.flip, cfg.noise_sigma, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, dice_loss, grads) = batch_gradients(net, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step });
        }
        let lr = schedule.lr(step);
        if loss < best_loss {
            best_loss = loss;
            best_step = step;
            best.clone_from(&net.params);
        }
        opt.step(&mut net.params, &grads, lr)?;
        log.push(LogRow {
            step,
            lr,
            loss,
            dice_loss,
        });
        debug!("step {step} lr {lr:.3e} loss {loss:.5} dice {dice_loss:.5}");
        if (step + 1) % 50 == 0 || step + 1 == cfg.steps {
            info!("step {}/{} loss {loss:.5}", step + 1, cfg.steps);
        }
    }
    Ok(TrainOutcome {
        log,
        best,
        best_step,
        best_loss,
    })
}
