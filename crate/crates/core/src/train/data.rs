use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{strides_of, Tensor};

/// One image with its binary mask, both channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Parameters of the synthetic ellipse dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub spatial: Vec<usize>,
    pub background: f64,
    pub foreground: f64,
    pub noise_sigma: f64,
    pub max_objects: usize,
}

impl SynthConfig {
    pub fn new(spatial: &[usize]) -> Self {
        SynthConfig {
            spatial: spatial.to_vec(),
            background: 0.1,
            foreground: 1.0,
            noise_sigma: 0.05,
            max_objects: 3,
        }
    }
}

/// `n` samples of 1 to 3 axis-aligned ellipses (ellipsoids in 3D) on a
/// dim background, blurred and corrupted with Gaussian noise.
///
/// Sample `i` depends only on `(seed, i)`.
pub fn synth_dataset<T: Scalar>(n: usize, spatial: &[usize], seed: u64) -> Result<Vec<Sample<T>>> {
    let cfg = SynthConfig::new(spatial);
    (0..n).map(|i| synth_sample(&cfg, seed, i as u64)).collect()
}

pub fn synth_sample<T: Scalar>(cfg: &SynthConfig, seed: u64, index: u64) -> Result<Sample<T>> {
    let spatial = &cfg.spatial;
    if !(2..=3).contains(&spatial.len()) || spatial.iter().any(|&d| d < 4) {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs 2 or 3 spatial axes of extent >= 4, got {spatial:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let objects = rng.random_range(1..=cfg.max_objects.max(1));
    let ellipses: Vec<(Vec<f64>, Vec<f64>)> = (0..objects)
        .map(|_| {
            let center = spatial
                .iter()
                .map(|&d| rng.random_range(0.2..0.8) * d as f64)
                .collect();
            let radii = spatial
                .iter()
                .map(|&d| {
                    let d = d as f64;
                    let lo = (0.08 * d).max(1.0);
                    rng.random_range(lo..=(0.25 * d).max(lo))
                })
                .collect();
            (center, radii)
        })
        .collect();

    let numel: usize = spatial.iter().product();
    let strides = strides_of(spatial);
    let mut mask = vec![0.0f64; numel];
    for (lin, m) in mask.iter_mut().enumerate() {
        let inside = ellipses.iter().any(|(c, r)| {
            let mut q = 0.0;
            for a in 0..spatial.len() {
                let x = ((lin / strides[a]) % spatial[a]) as f64 + 0.5;
                q += ((x - c[a]) / r[a]).powi(2);
            }
            q <= 1.0
        });
        *m = inside as u8 as f64;
    }

    let mut image: Vec<f64> = mask
        .iter()
        .map(|&m| if m > 0.0 { cfg.foreground } else { cfg.background })
        .collect();
    for axis in 0..spatial.len() {
        image = binomial_blur(&image, spatial, axis);
    }
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
    for v in &mut image {
        *v = (*v + noise.sample(&mut rng)).max(0.0);
    }

    let mut shape = vec![1];
    shape.extend_from_slice(spatial);
    Ok(Sample {
        image: Tensor::from_vec(shape.clone(), image.into_iter().map(lit).collect())?,
        mask: Tensor::from_vec(shape, mask.into_iter().map(lit).collect())?,
    })
}

/// `[1, 2, 1] / 4` along `axis` with replicated edges.
fn binomial_blur(v: &[f64], spatial: &[usize], axis: usize) -> Vec<f64> {
    let stride = strides_of(spatial)[axis];
    let n = spatial[axis];
    (0..v.len())
        .map(|lin| {
            let i = (lin / stride) % n;
            let prev = if i > 0 { v[lin - stride] } else { v[lin] };
            let next = if i + 1 < n { v[lin + stride] } else { v[lin] };
            0.25 * prev + 0.5 * v[lin] + 0.25 * next
        })
        .collect()
}

/// Copies the spatial window `origin .. origin + size` of every channel.
pub fn crop<T: Scalar>(t: &Tensor<T>, origin: &[usize], size: &[usize]) -> Result<Tensor<T>> {
    let spatial = t.spatial();
    if origin.len() != spatial.len()
        || size.len() != spatial.len()
        || (0..spatial.len()).any(|a| origin[a] + size[a] > spatial[a])
    {
        return Err(Error::InvalidArgument(format!(
            "window at {origin:?} of size {size:?} does not fit extent {spatial:?}"
        )));
    }
    let mut shape = vec![t.channels()];
    shape.extend_from_slice(size);
    let src = t.strides();
    let dst = strides_of(&shape);
    let data = (0..shape.iter().product::<usize>())
        .map(|lin| {
            let mut off = (lin / dst[0]) * src[0];
            for a in 0..size.len() {
                off += ((lin / dst[a + 1]) % size[a] + origin[a]) * src[a + 1];
            }
            t.data()[off]
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Reverses spatial axis `axis` (0-based, excluding the channel axis).
pub fn flip<T: Scalar>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let stride = t.strides()[axis + 1];
    let n = t.spatial()[axis];
    let d = t.data();
    Tensor::from_fn(t.shape(), |lin| {
        let i = (lin / stride) % n;
        d[lin + (n - 1 - i) * stride - i * stride]
    })
}

/// Optional random flips (probability 1/2 per axis) applied identically to
/// image and mask, then additive Gaussian noise on the image.
pub fn augment<T: Scalar, R: Rng>(
    sample: &Sample<T>,
    flips: bool,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Sample<T>> {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    for axis in 0..image.spatial().len() {
        if flips && rng.random_bool(0.5) {
            image = flip(&image, axis);
            mask = flip(&mask, axis);
        }
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
        for v in image.data_mut() {
            *v += lit::<T>(noise.sample(rng));
        }
    }
    Ok(Sample { image, mask })
}

/// Uniformly placed window of extent `patch`.
pub fn random_patch<T: Scalar, R: Rng>(
    sample: &Sample<T>,
    patch: &[usize],
    rng: &mut R,
) -> Result<Sample<T>> {
    let spatial = sample.image.spatial();
    if patch.len() != spatial.len() || patch.iter().zip(spatial).any(|(p, s)| p > s) {
        return Err(Error::InvalidArgument(format!(
            "patch {patch:?} does not fit extent {spatial:?}"
        )));
    }
    let origin: Vec<usize> = patch
        .iter()
        .zip(spatial)
        .map(|(&p, &s)| rng.random_range(0..=s - p))
        .collect();
    Ok(Sample {
        image: crop(&sample.image, &origin, patch)?,
        mask: crop(&sample.mask, &origin, patch)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_index() {
        let a = synth_dataset::<f64>(3, &[16, 16], 7).unwrap();
        let b = synth_dataset::<f64>(5, &[16, 16], 7).unwrap();
        assert_eq!(a[..], b[..3]);
        let c = synth_dataset::<f64>(3, &[16, 16], 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn images_nonnegative_masks_binary_and_bounded() {
        for seed in 0..40 {
            for s in synth_dataset::<f64>(2, &[16, 16], seed)
                .unwrap()
                .into_iter()
                .chain(synth_dataset::<f64>(1, &[8, 8, 8], seed).unwrap())
            {
                assert!(s.image.is_nonnegative());
                assert!(s.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
                let frac = s.mask.sum() / s.mask.numel() as f64;
                assert!(frac > 0.0 && frac < 0.6, "{frac}");
            }
        }
    }

    #[test]
    fn crop_and_flip() {
        let t = Tensor::from_fn(&[1, 3, 4], |i| i as f64);
        let c = crop(&t, &[1, 2], &[2, 2]).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
        assert!(crop(&t, &[2, 0], &[2, 2]).is_err());
        let f = flip(&t, 1);
        assert_eq!(&f.data()[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(flip(&f, 1), t);
        assert_eq!(&flip(&t, 0).data()[..4], &[8.0, 9.0, 10.0, 11.0]);
    }
}
