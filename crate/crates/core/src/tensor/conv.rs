//! Multi-channel grouped cross-correlation and its two adjoints.
//!
//! All kernels work on spatial rank 1–3 by lifting the spatial axes to three
//! (missing leading axes get extent 1, stride 1, padding 0). Every output
//! element is accumulated by exactly one thread in a fixed tap order
//! (input channel, then kernel axes row-major), so results do not depend on
//! the thread count.

use rayon::prelude::*;

use super::{spatial3, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stride, zero padding and channel grouping of a correlation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, no padding, one group.
    pub fn valid(spatial_rank: usize) -> Self {
        ConvSpec {
            stride: vec![1; spatial_rank],
            padding: vec![0; spatial_rank],
            groups: 1,
        }
    }

    /// Stride 1 with half-width padding; requires odd kernel extents.
    pub fn same(kernel: &[usize]) -> Result<Self> {
        if let Some(k) = kernel.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::invalid_shape(
                "same padding",
                format!("kernel extent {k} is even; only odd kernels keep the spatial size"),
            ));
        }
        Ok(ConvSpec {
            stride: vec![1; kernel.len()],
            padding: kernel.iter().map(|k| k / 2).collect(),
            groups: 1,
        })
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride.iter_mut().for_each(|s| *s = stride);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    fn lifted(&self) -> ([usize; 3], [usize; 3]) {
        let mut s = [1; 3];
        let mut p = [0; 3];
        let off = 3 - self.stride.len();
        s[off..].copy_from_slice(&self.stride);
        p[off..].copy_from_slice(&self.padding);
        (s, p)
    }

    fn validate(&self, spatial_rank: usize) -> Result<()> {
        if !(1..=3).contains(&spatial_rank) {
            return Err(Error::invalid_shape(
                "conv",
                format!("spatial rank {spatial_rank} unsupported (1..=3)"),
            ));
        }
        if self.stride.len() != spatial_rank || self.padding.len() != spatial_rank {
            return Err(Error::invalid_shape(
                "conv",
                format!(
                    "stride/padding lengths {}/{} do not match spatial rank {spatial_rank}",
                    self.stride.len(),
                    self.padding.len()
                ),
            ));
        }
        if self.stride.contains(&0) {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if self.groups == 0 {
            return Err(Error::InvalidArgument("groups must be positive".into()));
        }
        Ok(())
    }
}

/// Output extent of a correlation along one axis, if the window fits.
pub fn conv_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

struct Geometry {
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    inp: [usize; 3],
    out: [usize; 3],
    ker: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }

    fn taps(&self) -> usize {
        self.ker.iter().product()
    }

    /// Output index range `o` along `axis` for which `o*s + k - p` lies in the input.
    #[inline]
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, m) = (self.stride[axis], self.pad[axis], self.inp[axis], self.out[axis]);
        // o*s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p <= n - 1
        let hi = if n + p > k {
            ((n + p - k - 1) / s + 1).min(m)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn geometry<T: Scalar>(
    op: &'static str,
    in_shape: &[usize],
    w: &Tensor<T>,
    spec: &ConvSpec,
    out_spatial: Option<&[usize]>,
) -> Result<Geometry> {
    let spatial_rank = in_shape.len() - 1;
    spec.validate(spatial_rank)?;
    if w.rank() != in_shape.len() + 1 {
        return Err(Error::shape(op, in_shape, w.shape()));
    }
    let (cout, cin_g) = (w.shape()[0], w.shape()[1]);
    let g = spec.groups;
    let cin = in_shape[0];
    if cin != cin_g * g || cout % g != 0 {
        return Err(Error::invalid_shape(
            op,
            format!(
                "input channels {cin} / filter {:?} incompatible with {g} groups",
                w.shape()
            ),
        ));
    }
    let ker = spatial3(&w.shape()[2..]);
    let inp = spatial3(&in_shape[1..]);
    let (stride, pad) = spec.lifted();
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = conv_output_extent(inp[a], ker[a], stride[a], pad[a]).ok_or_else(|| {
            Error::invalid_shape(
                op,
                format!("kernel {:?} larger than padded input {in_shape:?}", w.shape()),
            )
        })?;
    }
    if let Some(expected) = out_spatial {
        let e = spatial3(expected);
        if e != out {
            return Err(Error::shape(op, expected, &out[3 - spatial_rank..]));
        }
    }
    Ok(Geometry {
        cin,
        cout,
        cin_g,
        cout_g: cout / g,
        inp,
        out,
        ker,
        stride,
        pad,
    })
}

fn out_shape(geo: &Geometry, channels: usize, spatial_rank: usize) -> Vec<usize> {
    let mut s = vec![channels];
    s.extend_from_slice(&geo.out[3 - spatial_rank..]);
    s
}

/// `y[co, o] = Σ_{ci in group, k} x_padded[ci, o·s + k] · w[co, ci, k]`.
///
/// `x` is `(C_in, spatial…)`, `w` is `(C_out, C_in / groups, kernel…)`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let geo = geometry("cross_correlate", x.shape(), w, spec, None)?;
    let spatial_rank = x.rank() - 1;
    let out_plane = geo.out_plane();
    let in_plane = geo.in_plane();
    let taps = geo.taps();
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![T::zero(); geo.cout * out_plane];

    y.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(co, yp)| {
            let group = co / geo.cout_g;
            for cl in 0..geo.cin_g {
                let ci = group * geo.cin_g + cl;
                let xp = &xd[ci * in_plane..(ci + 1) * in_plane];
                let wk = &wd[(co * geo.cin_g + cl) * taps..(co * geo.cin_g + cl + 1) * taps];
                accumulate_taps(&geo, xp, wk, yp);
            }
        });

    Tensor::from_vec(out_shape(&geo, geo.cout, spatial_rank), y)
}

/// Adds `Σ_k x[o·s + k - p] · w[k]` into `y[o]` for one channel pair.
#[inline]
fn accumulate_taps<T: Scalar>(geo: &Geometry, xp: &[T], wk: &[T], yp: &mut [T]) {
    let [_, ih, iw] = geo.inp;
    let [_, oh, ow] = geo.out;
    let [kd_n, kh_n, kw_n] = geo.ker;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad;
    for kd in 0..kd_n {
        let (d0, d1) = geo.valid_range(0, kd);
        for kh in 0..kh_n {
            let (h0, h1) = geo.valid_range(1, kh);
            for kw in 0..kw_n {
                let (w0, w1) = geo.valid_range(2, kw);
                if w0 == w1 {
                    continue;
                }
                let wv = wk[(kd * kh_n + kh) * kw_n + kw];
                for od in d0..d1 {
                    let id = od * sd + kd - pd;
                    for oh_ in h0..h1 {
                        let ihh = oh_ * sh + kh - ph;
                        let xrow = (id * ih + ihh) * iw;
                        let yrow = (od * oh + oh_) * ow;
                        if sw == 1 {
                            let xs = &xp[xrow + w0 + kw - pw..xrow + w1 + kw - pw];
                            let ys = &mut yp[yrow + w0..yrow + w1];
                            for (yv, &xv) in ys.iter_mut().zip(xs) {
                                *yv += xv * wv;
                            }
                        } else {
                            for ow_ in w0..w1 {
                                let iww = ow_ * sw + kw - pw;
                                yp[yrow + ow_] += xp[xrow + iww] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv_forward`] with respect to its input: the transposed
/// correlation of `gy` with `w`, producing a tensor of spatial shape
/// `in_spatial`.
pub fn conv_backward_input<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    in_spatial: &[usize],
) -> Result<Tensor<T>> {
    let spatial_rank = in_spatial.len();
    let cin = w.shape().get(1).copied().unwrap_or(0) * spec.groups;
    let mut in_shape = vec![cin];
    in_shape.extend_from_slice(in_spatial);
    let geo = geometry("transposed_correlate", &in_shape, w, spec, Some(gy.spatial()))?;
    if gy.channels() != geo.cout {
        return Err(Error::shape("transposed_correlate", gy.shape(), w.shape()));
    }
    let in_plane = geo.in_plane();
    let out_plane = geo.out_plane();
    let taps = geo.taps();
    let gyd = gy.data();
    let wd = w.data();
    let mut gx = vec![T::zero(); geo.cin * in_plane];

    gx.par_chunks_mut(in_plane).enumerate().for_each(|(ci, gxp)| {
        let group = ci / geo.cin_g;
        let cl = ci % geo.cin_g;
        for col in 0..geo.cout_g {
            let co = group * geo.cout_g + col;
            let gyp = &gyd[co * out_plane..(co + 1) * out_plane];
            let wk = &wd[(co * geo.cin_g + cl) * taps..(co * geo.cin_g + cl + 1) * taps];
            scatter_taps(&geo, gyp, wk, gxp);
        }
    });

    Tensor::from_vec(in_shape, gx).inspect(|t| {
        debug_assert_eq!(t.rank(), spatial_rank + 1);
    })
}

#[inline]
fn scatter_taps<T: Scalar>(geo: &Geometry, gyp: &[T], wk: &[T], gxp: &mut [T]) {
    let [_, ih, iw] = geo.inp;
    let [_, oh, ow] = geo.out;
    let [kd_n, kh_n, kw_n] = geo.ker;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad;
    for kd in 0..kd_n {
        let (d0, d1) = geo.valid_range(0, kd);
        for kh in 0..kh_n {
            let (h0, h1) = geo.valid_range(1, kh);
            for kw in 0..kw_n {
                let (w0, w1) = geo.valid_range(2, kw);
                let wv = wk[(kd * kh_n + kh) * kw_n + kw];
                for od in d0..d1 {
                    let id = od * sd + kd - pd;
                    for oh_ in h0..h1 {
                        let ihh = oh_ * sh + kh - ph;
                        let xrow = (id * ih + ihh) * iw;
                        let yrow = (od * oh + oh_) * ow;
                        for ow_ in w0..w1 {
                            let iww = ow_ * sw + kw - pw;
                            gxp[xrow + iww] += gyp[yrow + ow_] * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv_forward`] with respect to the filter.
pub fn conv_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    w_shape: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(w_shape);
    let geo = geometry("correlate_weight_grad", x.shape(), &probe, spec, Some(gy.spatial()))?;
    let in_plane = geo.in_plane();
    let out_plane = geo.out_plane();
    let taps = geo.taps();
    let xd = x.data();
    let gyd = gy.data();
    let [_, ih, iw] = geo.inp;
    let [_, oh, ow] = geo.out;
    let [kd_n, kh_n, kw_n] = geo.ker;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad;
    let mut gw = vec![T::zero(); geo.cout * geo.cin_g * taps];

    gw.par_chunks_mut(geo.cin_g * taps)
        .enumerate()
        .for_each(|(co, gwc)| {
            let group = co / geo.cout_g;
            let gyp = &gyd[co * out_plane..(co + 1) * out_plane];
            for cl in 0..geo.cin_g {
                let ci = group * geo.cin_g + cl;
                let xp = &xd[ci * in_plane..(ci + 1) * in_plane];
                for kd in 0..kd_n {
                    let (d0, d1) = geo.valid_range(0, kd);
                    for kh in 0..kh_n {
                        let (h0, h1) = geo.valid_range(1, kh);
                        for kw in 0..kw_n {
                            let (w0, w1) = geo.valid_range(2, kw);
                            let mut acc = T::zero();
                            for od in d0..d1 {
                                let id = od * sd + kd - pd;
                                for oh_ in h0..h1 {
                                    let ihh = oh_ * sh + kh - ph;
                                    let xrow = (id * ih + ihh) * iw;
                                    let yrow = (od * oh + oh_) * ow;
                                    for ow_ in w0..w1 {
                                        let iww = ow_ * sw + kw - pw;
                                        acc += gyp[yrow + ow_] * xp[xrow + iww];
                                    }
                                }
                            }
                            gwc[cl * taps + (kd * kh_n + kh) * kw_n + kw] = acc;
                        }
                    }
                }
            }
        });

    Tensor::from_vec(w_shape.to_vec(), gw)
}

/// Zero-pads every spatial axis `i` by `margins[i]` on both sides.
pub fn pad_zero<T: Scalar>(x: &Tensor<T>, margins: &[usize]) -> Result<Tensor<T>> {
    let spatial_rank = x.rank() - 1;
    if margins.len() != spatial_rank {
        return Err(Error::invalid_shape(
            "pad_zero",
            format!(
                "{} margins given for spatial rank {spatial_rank}",
                margins.len()
            ),
        ));
    }
    let mut shape = vec![x.channels()];
    shape.extend(x.spatial().iter().zip(margins).map(|(n, m)| n + 2 * m));
    let mut out = Tensor::zeros(&shape);
    let [d, h, w] = spatial3(x.spatial());
    let mut lifted = [0; 3];
    lifted[3 - spatial_rank..].copy_from_slice(margins);
    let [pd, ph, pw] = lifted;
    let [_, oh, ow] = spatial3(&shape[1..]);
    let od = d + 2 * pd;
    let (src, dst) = (x.data(), out.data_mut());
    for c in 0..x.channels() {
        for i in 0..d {
            for j in 0..h {
                let s = ((c * d + i) * h + j) * w;
                let t = ((c * od + i + pd) * oh + j + ph) * ow + pw;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_exactly_in_bounds_outputs() {
        for &(n, k, s, p) in &[(5, 3, 1, 1), (8, 2, 2, 0), (7, 3, 2, 1), (4, 5, 1, 2), (3, 1, 3, 0)] {
            let m = conv_output_extent(n, k, s, p).unwrap();
            let geo = Geometry {
                cin: 1,
                cout: 1,
                cin_g: 1,
                cout_g: 1,
                inp: [1, 1, n],
                out: [1, 1, m],
                ker: [1, 1, k],
                stride: [1, 1, s],
                pad: [0, 0, p],
            };
            for kk in 0..k {
                let (lo, hi) = geo.valid_range(2, kk);
                for o in 0..m {
                    let i = (o * s + kk) as isize - p as isize;
                    let inside = i >= 0 && (i as usize) < n;
                    assert_eq!(inside, (lo..hi).contains(&o), "n={n} k={k} s={s} p={p} kk={kk} o={o}");
                }
            }
        }
    }

    #[test]
    fn pad_examples() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2], |i| (i + 1) as f64);
        let p = pad_zero(&x, &[1, 1]).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(p.get(&[0, 1, 1]), 1.0);
        assert_eq!(p.get(&[0, 2, 2]), 4.0);
        assert_eq!(p.sum(), 10.0);
        assert_eq!(pad_zero(&x, &[0, 0]).unwrap(), x);

        let one = Tensor::<f64>::ones(&[1, 1, 1]);
        let p = pad_zero(&one, &[1, 2]).unwrap();
        assert_eq!(p.shape(), &[1, 3, 5]);
        let mut expect = [0.0; 15];
        expect[7] = 1.0;
        assert_eq!(p.data(), &expect[..]);

        assert!(pad_zero(&x, &[1]).is_err());
    }

    #[test]
    fn strided_same_padding_gives_ceil_extent() {
        let x = Tensor::<f64>::ones(&[1, 7, 6]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let spec = ConvSpec::same(&[3, 3]).unwrap().with_stride(2);
        let y = conv_forward(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 4, 3]);
    }

    #[test]
    fn rejects_bad_specs() {
        let x = Tensor::<f64>::ones(&[2, 4, 4]);
        let w = Tensor::<f64>::ones(&[1, 3, 3, 3]);
        assert!(conv_forward(&x, &w, &ConvSpec::same(&[3, 3]).unwrap()).is_err());
        let w = Tensor::<f64>::ones(&[1, 2, 3, 3]);
        let spec = ConvSpec::same(&[3, 3]).unwrap().with_stride(0);
        assert!(conv_forward(&x, &w, &spec).is_err());
        assert!(ConvSpec::same(&[2, 3]).is_err());
    }
}
