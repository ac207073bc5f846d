//! Dense channel-first tensors and the array operations everything else is
//! built from.
//!
//! Images are stored as `(C, H, W)` and volumes as `(C, D, H, W)`, row-major.
//! Filters add a leading output-channel axis: `(C_out, C_in, kH, kW)` or
//! `(C_out, C_in, kD, kH, kW)`.

mod conv;
mod filter;
pub mod io;

pub use conv::{
    conv_backward_input, conv_backward_weight, conv_forward, conv_output_extent, pad_zero,
    ConvSpec,
};
pub use filter::{
    adjoint_filter, adjoint_grouped, cross_correlate, cross_correlate_grouped, FilterTensor,
    Padding,
};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Spatial extents of a channel-first image or volume, lifted to three axes
/// (a 2D image gets depth 1).
pub(crate) fn spatial3(spatial: &[usize]) -> [usize; 3] {
    match spatial.len() {
        1 => [1, 1, spatial[0]],
        2 => [1, spatial[0], spatial[1]],
        3 => [spatial[0], spatial[1], spatial[2]],
        _ => unreachable!("spatial rank checked by caller"),
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid_shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Leading (channel) extent.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Extents after the channel axis.
    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn linear_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.linear_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = self.linear_index(index);
        self.data[i] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape.to_vec(), self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `Σ a·b` over all elements.
    pub fn inner_product(&self, other: &Tensor<T>) -> Result<T> {
        self.same_shape("inner_product", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Errors with the first negative element, if any.
    pub fn check_nonnegative(&self, what: &'static str) -> Result<()> {
        self.check_nonnegative_within(what, T::zero())
    }

    /// Like [`check_nonnegative`](Self::check_nonnegative) but tolerates values
    /// down to `-slack`.
    pub fn check_nonnegative_within(&self, what: &'static str, slack: T) -> Result<()> {
        match self.data.iter().position(|&v| v < -slack || v.is_nan()) {
            None => Ok(()),
            Some(index) => Err(Error::Negative {
                what,
                index,
                value: self.data[index].as_f64(),
            }),
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("mul", other, |a, b| a * b)
    }

    /// Elementwise division; any zero denominator is an error.
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if other.numel() == 1 && self.numel() != 1 {
            if other.data[0] == T::zero() {
                return Err(Error::DivisionByZero { index: 0 });
            }
        } else if let Some(index) = other.data.iter().position(|&d| d == T::zero()) {
            self.same_shape("div", other)?;
            return Err(Error::DivisionByZero { index });
        }
        self.binary("div", other, |a, b| a / b)
    }

    /// `(a + eps) / (b + eps)` elementwise.
    pub fn div_guarded(&self, other: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        self.binary("div_guarded", other, |a, b| (a + eps) / (b + eps))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn gelu(&self) -> Tensor<T> {
        self.map(gelu)
    }

    pub fn square(&self) -> Tensor<T> {
        self.map(|v| v * v)
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.map(|v| v + c)
    }

    pub fn clamp_min(&self, min: T) -> Tensor<T> {
        self.map(|v| v.max(min))
    }

    /// Sub-tensor of channels `start..start + len`.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if len == 0 || start + len > self.channels() {
            return Err(Error::invalid_shape(
                "channel_slice",
                format!(
                    "range {start}..{} out of bounds for {} channels",
                    start + len,
                    self.channels()
                ),
            ));
        }
        let plane: usize = self.spatial().iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            shape,
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.spatial() != first.spatial() {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            channels += p.channels();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = channels;
        Ok(Tensor { shape, data })
    }

    fn same_shape(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn binary(
        &self,
        op: &'static str,
        other: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if other.numel() == 1 && self.numel() != 1 {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        self.same_shape(op, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

// tanh approximation of GELU
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let inner = c * (x + a * x * x * x);
    lit::<T>(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let half: T = lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn inner_product_examples() {
        let ones = Tensor::<f64>::ones(&[2, 2]);
        assert_eq!(ones.inner_product(&ones).unwrap(), 4.0);
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[3], &[4.0, 5.0, 6.0]);
        assert_eq!(a.inner_product(&b).unwrap(), 32.0);
        assert_eq!(a.inner_product(&Tensor::zeros(&[3])).unwrap(), 0.0);
        assert!((a.frobenius_norm() - 14f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn inner_product_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        let msg = a.inner_product(&b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(3, 2)"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(t(&[3], &[-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
        let n = t(&[2], &[2.0, 4.0]);
        let d = t(&[2], &[1.0, 2.0]);
        assert_eq!(n.div(&d).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-2.0, -2.0]);
        assert_eq!(a.scale(3.0).data(), &[3.0, 6.0]);
        assert_eq!(t(&[2], &[-3.0, 1.0]).clamp_min(0.5).data(), &[0.5, 1.0]);
        assert_eq!(b.square().data(), &[9.0, 16.0]);
    }

    #[test]
    fn unguarded_division_reports_first_zero() {
        let n = t(&[3], &[1.0, 1.0, 1.0]);
        let d = t(&[3], &[1.0, 0.0, 0.0]);
        match n.div(&d) {
            Err(Error::DivisionByZero { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let g = n.div_guarded(&d, 1e-8).unwrap();
        assert!((g.data()[1] - (1.0 + 1e-8) / 1e-8).abs() < 1e-3);
    }

    #[test]
    fn row_major_strides() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(x.strides(), vec![12, 4, 1]);
        assert_eq!(x.get(&[1, 2, 3]), 23.0);
        assert_eq!(x.linear_index(&[1, 0, 2]), 14);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn gelu_matches_reference_and_derivative() {
        // reference values of the tanh form
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_1).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.158_808_009_392_522_9).abs() < 1e-12);
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::<f64>::ones(&[2, 4, 4]);
        let b = Tensor::<f64>::zeros(&[3, 4, 4]);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[5, 4, 4]);
        assert_eq!(c.channel_slice(0, 2).unwrap(), a);
        assert_eq!(c.channel_slice(2, 3).unwrap(), b);
        assert!(c.channel_slice(4, 2).is_err());
    }
}
