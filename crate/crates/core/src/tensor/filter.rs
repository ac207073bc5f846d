use super::conv::{conv_forward, ConvSpec};
use super::{spatial3, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Boundary handling of [`cross_correlate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad by the kernel half-width so stride-1 output keeps the input size.
    Same,
    /// No padding.
    Valid,
}

/// A correlation filter of shape `(C_out, C_in, k…)` with odd spatial extents.
///
/// `C_in` is the per-group input channel count when the filter is used with
/// `groups > 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTensor<T> {
    data: Tensor<T>,
}

impl<T: Scalar> FilterTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if !(3..=5).contains(&data.rank()) {
            return Err(Error::invalid_shape(
                "filter",
                format!("expected (C_out, C_in, k...) with 1-3 spatial axes, got {:?}", data.shape()),
            ));
        }
        if let Some(k) = data.shape()[2..].iter().find(|&&k| k % 2 == 0) {
            return Err(Error::invalid_shape(
                "filter",
                format!("kernel extent {k} is even; only odd extents 2M+1 are supported"),
            ));
        }
        Ok(FilterTensor { data })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn out_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn kernel(&self) -> &[usize] {
        &self.data.shape()[2..]
    }

    /// Per-axis half-widths `M, N, …`.
    pub fn half_widths(&self) -> Vec<usize> {
        self.kernel().iter().map(|k| k / 2).collect()
    }

    pub fn relu(&self) -> Self {
        FilterTensor {
            data: self.data.relu(),
        }
    }
}

/// Correlates `s` with `v` without flipping the kernel, one group.
pub fn cross_correlate<T: Scalar>(
    s: &Tensor<T>,
    v: &FilterTensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    cross_correlate_grouped(s, v, padding, stride, 1)
}

pub fn cross_correlate_grouped<T: Scalar>(
    s: &Tensor<T>,
    v: &FilterTensor<T>,
    padding: Padding,
    stride: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    if v.kernel().len() + 1 != s.rank() {
        return Err(Error::shape("cross_correlate", s.shape(), v.tensor().shape()));
    }
    let spec = match padding {
        Padding::Same => ConvSpec::same(v.kernel())?,
        Padding::Valid => ConvSpec::valid(v.kernel().len()),
    }
    .with_stride(stride)
    .with_groups(groups);
    conv_forward(s, v.tensor(), &spec)
}

/// Swaps the channel roles and reverses every spatial axis:
/// `V⁻[d, c, m] = V[c, d, 2M - m]`.
pub fn adjoint_filter<T: Scalar>(v: &FilterTensor<T>) -> FilterTensor<T> {
    FilterTensor {
        data: adjoint_grouped(v.tensor(), 1),
    }
}

/// Grouped adjoint: for a `(C_out, C_in/G, k…)` filter used with `G` groups,
/// returns the `(C_in, C_out/G, k…)` filter of the adjoint operator.
pub fn adjoint_grouped<T: Scalar>(v: &Tensor<T>, groups: usize) -> Tensor<T> {
    let cout = v.shape()[0];
    let cin_g = v.shape()[1];
    let cout_g = cout / groups;
    let kernel = &v.shape()[2..];
    let [kd, kh, kw] = spatial3(kernel);
    let taps = kd * kh * kw;
    let mut shape = vec![cin_g * groups, cout_g];
    shape.extend_from_slice(kernel);
    let src = v.data();
    let mut out = vec![T::zero(); src.len()];
    for g in 0..groups {
        for j in 0..cout_g {
            let co = g * cout_g + j;
            for i in 0..cin_g {
                let ci = g * cin_g + i;
                let s_off = (co * cin_g + i) * taps;
                let d_off = (ci * cout_g + j) * taps;
                for t in 0..taps {
                    // reversing every axis of a row-major block reverses its linear order
                    out[d_off + taps - 1 - t] = src[s_off + t];
                }
            }
        }
    }
    Tensor::from_vec(shape, out).expect("adjoint preserves element count")
}
