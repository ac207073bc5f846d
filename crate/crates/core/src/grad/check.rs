use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Settings for [`gradcheck`].
#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {:>12.3e} {:>8} {}",
            self.name,
            self.max_rel_error,
            self.checked,
            if self.passed { "pass" } else { "FAIL" }
        )?;
        if let (false, Some(w)) = (self.passed, &self.worst) {
            write!(
                f,
                "  (input {} index {}: analytic {:.6e} numeric {:.6e})",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of a scalar recipe with central
/// differences.
///
/// `recipe` receives one differentiable leaf per entry of `inputs` and must
/// return a one-element node. Relative error is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`. Coordinates whose
/// `±step` perturbations change any ReLU activation pattern are skipped.
pub fn gradcheck<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    recipe: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = recipe(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "gradcheck recipe `{name}` must return a scalar"
            )));
        }
        Ok((v.data()[0], g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = recipe(&mut g, &vars)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let (mut checked, mut skipped) = (0, 0);

    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + cfg.step;
            let (fp, sp) = eval(&values)?;
            values[i].data_mut()[j] = orig - cfg.step;
            let (fm, sm) = eval(&values)?;
            values[i].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            checked += 1;
            if rel > max_rel || worst.is_none() || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel.max(max_rel) };
                worst = Some(WorstCoordinate {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }

    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        worst,
        checked,
        skipped,
        tolerance: cfg.tolerance,
        passed: checked > 0 && max_rel < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn relu_kink_coordinates_are_skipped() {
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = gradcheck(
            "relu",
            &[x],
            |g, v| {
                let y = g.relu(v[0]);
                Ok(g.sum(y))
            },
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.passed);
    }

    #[test]
    fn wrong_backward_is_caught_and_zero_tolerance_fails() {
        let x = Tensor::from_vec(vec![2], vec![0.3, -0.7]).unwrap();
        let recipe = |g: &mut Graph<f64>, v: &[Var]| {
            let value = g.value(v[0]).square();
            // claims d(x²)/dx = x
            let y = g.custom(&[v[0]], value, |gy, xs| vec![gy.mul(xs[0]).unwrap()]);
            Ok(g.sum(y))
        };
        let r = gradcheck("bad", std::slice::from_ref(&x), recipe, &GradcheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert!(r.worst.is_some());

        let good = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.square(v[0]);
            Ok(g.sum(y))
        };
        let cfg = GradcheckConfig::default().with_tolerance(0.0);
        assert!(!gradcheck("zero-tol", &[x], good, &cfg).unwrap().passed);
    }
}
