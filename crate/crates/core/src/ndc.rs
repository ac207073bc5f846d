//! Nonnegative deconvolution by multiplicative updates.
//!
//! Given a nonnegative observation `X` (`C × spatial`) and a nonnegative
//! filter `V` (`C × E × kernel`), find `S ≥ 0` (`E × spatial`) minimizing
//! `‖X − S∗V‖²_F`, where `∗` is same-padded cross-correlation. Each step
//!
//! ```text
//! S ← S ⊙ (X∗V⁻ + ε) / ((S∗V)∗V⁻ + ε)
//! ```
//!
//! keeps `S` nonnegative and never increases the reconstruction error. With
//! `ε = 0`, entries whose denominator vanishes are set to zero.
//!
//! The majorizing surrogate used to prove monotonicity is exposed as
//! [`surrogate_value`] so that the descent argument can be checked
//! numerically.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{adjoint_filter, cross_correlate, FilterTensor, Padding, Tensor};

/// One deconvolution instance: observation, filter and starting source.
#[derive(Debug, Clone)]
pub struct NdcProblem<T> {
    observation: Tensor<T>,
    filter: FilterTensor<T>,
    adjoint: FilterTensor<T>,
    initial_source: Tensor<T>,
    /// `X∗V⁻`, constant across iterations.
    back_projection: Tensor<T>,
}

impl<T: Scalar> NdcProblem<T> {
    pub fn new(
        observation: Tensor<T>,
        filter: FilterTensor<T>,
        initial_source: Tensor<T>,
    ) -> Result<Self> {
        observation.check_nonnegative("observation")?;
        filter.tensor().check_nonnegative("filter")?;
        initial_source.check_nonnegative("initial source")?;
        if observation.rank() != filter.kernel().len() + 1 {
            return Err(Error::shape(
                "NdcProblem",
                observation.shape(),
                filter.tensor().shape(),
            ));
        }
        if observation.channels() != filter.out_channels() {
            return Err(Error::invalid_shape(
                "NdcProblem",
                format!(
                    "observation has {} channels but the filter produces {}",
                    observation.channels(),
                    filter.out_channels()
                ),
            ));
        }
        if initial_source.channels() != filter.in_channels()
            || initial_source.spatial() != observation.spatial()
        {
            return Err(Error::shape(
                "NdcProblem",
                initial_source.shape(),
                observation.shape(),
            ));
        }
        let adjoint = adjoint_filter(&filter);
        let back_projection = cross_correlate(&observation, &adjoint, Padding::Same, 1)?;
        Ok(NdcProblem {
            observation,
            filter,
            adjoint,
            initial_source,
            back_projection,
        })
    }

    /// Same problem with all-ones starting source.
    pub fn with_unit_source(observation: Tensor<T>, filter: FilterTensor<T>) -> Result<Self> {
        let mut shape = vec![filter.in_channels()];
        shape.extend_from_slice(observation.spatial());
        Self::new(observation, filter, Tensor::ones(&shape))
    }

    pub fn observation(&self) -> &Tensor<T> {
        &self.observation
    }

    pub fn filter(&self) -> &FilterTensor<T> {
        &self.filter
    }

    pub fn adjoint(&self) -> &FilterTensor<T> {
        &self.adjoint
    }

    pub fn initial_source(&self) -> &Tensor<T> {
        &self.initial_source
    }

    /// `S∗V`.
    pub fn forward(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_source(s)?;
        cross_correlate(s, &self.filter, Padding::Same, 1)
    }

    fn check_source(&self, s: &Tensor<T>) -> Result<()> {
        if s.shape() != self.initial_source.shape() {
            return Err(Error::shape("source", s.shape(), self.initial_source.shape()));
        }
        Ok(())
    }
}

/// `‖X − S∗V‖²_F`.
pub fn reconstruction_error<T: Scalar>(s: &Tensor<T>, problem: &NdcProblem<T>) -> Result<T> {
    let residual = problem.observation.sub(&problem.forward(s)?)?;
    Ok(residual.squared_norm())
}

/// One multiplicative update of `s_t`.
///
/// With `epsilon = 0` a zero denominator yields a zero entry; otherwise
/// `epsilon` is added to numerator and denominator.
pub fn multiplicative_step<T: Scalar>(
    s_t: &Tensor<T>,
    problem: &NdcProblem<T>,
    epsilon: T,
) -> Result<Tensor<T>> {
    s_t.check_nonnegative("source")?;
    if !(epsilon >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be nonnegative, got {epsilon}"
        )));
    }
    let reprojection = cross_correlate(&problem.forward(s_t)?, &problem.adjoint, Padding::Same, 1)?;
    let num = problem.back_projection.data();
    let den = reprojection.data();
    let data = s_t
        .data()
        .iter()
        .zip(num.iter().zip(den))
        .map(|(&s, (&n, &d))| {
            if epsilon == T::zero() {
                if d == T::zero() {
                    T::zero()
                } else {
                    s * (n / d)
                }
            } else {
                s * ((n + epsilon) / (d + epsilon))
            }
        })
        .collect();
    Tensor::from_vec(s_t.shape().to_vec(), data)
}

/// Which iterates a [`solve`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceMode {
    /// Errors plus the final source.
    #[default]
    FinalOnly,
    /// Every iterate `S⁽⁰⁾ … S⁽ᵀ⁾`.
    Full,
}

/// Result of [`solve`].
#[derive(Debug, Clone)]
pub struct SolveTrace<T> {
    /// `e⁽ᵗ⁾` for `t = 0..=iterations`.
    pub errors: Vec<T>,
    pub final_source: Tensor<T>,
    /// Populated under [`TraceMode::Full`].
    pub sources: Vec<Tensor<T>>,
    pub iterations: usize,
}

impl<T: Scalar> SolveTrace<T> {
    pub fn initial_error(&self) -> T {
        self.errors[0]
    }

    pub fn final_error(&self) -> T {
        *self.errors.last().expect("at least one error")
    }

    /// Largest `e⁽ᵗ⁺¹⁾ − e⁽ᵗ⁾` (negative when the trace strictly decreases).
    pub fn max_increase(&self) -> T {
        self.errors
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(T::neg_infinity(), T::max)
    }

    pub fn is_monotone(&self, tolerance: T) -> bool {
        self.errors.windows(2).all(|w| w[1] <= w[0] + tolerance)
    }
}

/// Runs a fixed number of multiplicative updates from the problem's
/// initial source.
pub fn solve<T: Scalar>(
    problem: &NdcProblem<T>,
    iterations: usize,
    epsilon: T,
    mode: TraceMode,
) -> Result<SolveTrace<T>> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let mut s = problem.initial_source.clone();
    let mut errors = Vec::with_capacity(iterations + 1);
    let mut sources = Vec::new();
    errors.push(reconstruction_error(&s, problem)?);
    if mode == TraceMode::Full {
        sources.push(s.clone());
    }
    for _ in 0..iterations {
        s = multiplicative_step(&s, problem, epsilon)?;
        errors.push(reconstruction_error(&s, problem)?);
        if mode == TraceMode::Full {
            sources.push(s.clone());
        }
    }
    Ok(SolveTrace {
        errors,
        final_source: s,
        sources,
        iterations,
    })
}

/// `Q(S | S⁽ᵗ⁾) = ‖X‖² − 2⟨X, S∗V⟩ + ⟨(S²/S⁽ᵗ⁾)∗V, S⁽ᵗ⁾∗V⟩`.
///
/// Requires `s_t > 0` everywhere.
pub fn surrogate_value<T: Scalar>(
    s: &Tensor<T>,
    s_t: &Tensor<T>,
    problem: &NdcProblem<T>,
) -> Result<T> {
    let (_, bound) = quadratic_bound(s, s_t, problem)?;
    let x = &problem.observation;
    let linear = x.inner_product(&problem.forward(s)?)?;
    Ok(x.squared_norm() - (linear + linear) + bound.sum())
}

/// Both sides of the elementwise bound
/// `(S∗V)² ≤ ((S²/S⁽ᵗ⁾)∗V) ⊙ (S⁽ᵗ⁾∗V)`, returned as `(lhs, rhs)`.
pub fn quadratic_bound<T: Scalar>(
    s: &Tensor<T>,
    s_t: &Tensor<T>,
    problem: &NdcProblem<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    problem.check_source(s)?;
    problem.check_source(s_t)?;
    if let Some(index) = s_t.data().iter().position(|&v| !(v > T::zero())) {
        return Err(Error::InvalidArgument(format!(
            "surrogate requires a strictly positive reference source (entry {index} is {})",
            s_t.data()[index]
        )));
    }
    let ratio = s.zip_map(s_t, |a, b| a * a / b)?;
    let lhs = problem.forward(s)?.square();
    let rhs = problem.forward(&ratio)?.mul(&problem.forward(s_t)?)?;
    Ok((lhs, rhs))
}
