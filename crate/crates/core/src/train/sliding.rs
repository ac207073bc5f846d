use super::data::crop;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

/// Window origins along one axis: stride `patch / 2`, with the last window
/// moved back to end at the border.
pub fn window_offsets(extent: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > extent {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} does not fit extent {extent}"
        )));
    }
    let stride = (patch / 2).max(1);
    let mut out = Vec::new();
    let mut o = 0;
    while o + patch < extent {
        out.push(o);
        o += stride;
    }
    out.push(extent - patch);
    Ok(out)
}

/// Averages per-window outputs of `predict` over all overlapping windows.
///
/// `predict` maps a `C_in × patch` crop to a `C × patch` probability map.
pub fn sliding_window<T, F>(image: &Tensor<T>, patch: &[usize], mut predict: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let spatial = image.spatial().to_vec();
    if patch.len() != spatial.len() {
        return Err(Error::InvalidArgument(format!(
            "patch rank {} differs from image rank {}",
            patch.len(),
            spatial.len()
        )));
    }
    let offsets = spatial
        .iter()
        .zip(patch)
        .map(|(&e, &p)| window_offsets(e, p))
        .collect::<Result<Vec<_>>>()?;

    let plane: usize = spatial.iter().product();
    let img_strides = strides_of(&spatial);
    let win_strides = strides_of(patch);
    let win_numel: usize = patch.iter().product();
    let mut sum: Option<Vec<T>> = None;
    let mut count = vec![0usize; plane];
    let mut channels = 0;

    let mut pick = vec![0usize; spatial.len()];
    loop {
        let origin: Vec<usize> = pick.iter().zip(&offsets).map(|(&i, o)| o[i]).collect();
        let out = predict(&crop(image, &origin, patch)?)?;
        if out.spatial() != patch {
            return Err(Error::shape("sliding_window", out.spatial(), patch));
        }
        let acc = sum.get_or_insert_with(|| {
            channels = out.channels();
            vec![T::zero(); channels * plane]
        });
        if out.channels() != channels {
            return Err(Error::InvalidArgument("window outputs disagree on channel count".into()));
        }
        for w in 0..win_numel {
            let mut lin = 0;
            for a in 0..patch.len() {
                lin += ((w / win_strides[a]) % patch[a] + origin[a]) * img_strides[a];
            }
            count[lin] += 1;
            for c in 0..channels {
                acc[c * plane + lin] += out.data()[c * win_numel + w];
            }
        }

        let mut a = pick.len();
        loop {
            if a == 0 {
                let mut shape = vec![channels];
                shape.extend_from_slice(&spatial);
                let mut acc = sum.expect("at least one window");
                for c in 0..channels {
                    for (v, &n) in acc[c * plane..(c + 1) * plane].iter_mut().zip(&count) {
                        *v /= T::from_f64(n as f64);
                    }
                }
                return Tensor::from_vec(shape, acc);
            }
            a -= 1;
            pick[a] += 1;
            if pick[a] < offsets[a].len() {
                break;
            }
            pick[a] = 0;
        }
    }
}
