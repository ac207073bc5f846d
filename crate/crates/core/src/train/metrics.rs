use std::fmt::Write as _;

use super::loss::check_binary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

/// Dice similarity of two binary masks; 1 when both are empty.
pub fn dice_score<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("dice_score", pred.shape(), gt.shape()));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == T::one(), g == T::one());
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Foreground voxels with at least one face neighbour in the background;
/// voxels on the border of the grid count as surface.
pub fn surface_points(mask: &[bool], shape: &[usize]) -> Vec<Vec<usize>> {
    let strides = strides_of(shape);
    let mut out = Vec::new();
    for lin in 0..mask.len() {
        if !mask[lin] {
            continue;
        }
        let idx: Vec<usize> = (0..shape.len()).map(|a| (lin / strides[a]) % shape[a]).collect();
        let boundary = (0..shape.len()).any(|a| {
            idx[a] == 0
                || idx[a] + 1 == shape[a]
                || !mask[lin - strides[a]]
                || !mask[lin + strides[a]]
        });
        if boundary {
            out.push(idx);
        }
    }
    out
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn directed(from: &[Vec<usize>], to: &[Vec<usize>], spacing: &[f64]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    a.iter()
                        .zip(b)
                        .zip(spacing)
                        .map(|((&x, &y), s)| ((x as f64 - y as f64) * s).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// 95th-percentile symmetric surface distance between two binary masks
/// without a channel axis. `None` when exactly one mask is empty; 0 when
/// both are.
pub fn hd95<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, spacing: &[f64]) -> Result<Option<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("hd95", pred.shape(), gt.shape()));
    }
    if spacing.len() != pred.rank() {
        return Err(Error::InvalidArgument(format!(
            "spacing has {} entries for a rank-{} mask",
            spacing.len(),
            pred.rank()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    let p: Vec<bool> = pred.data().iter().map(|&v| v == T::one()).collect();
    let g: Vec<bool> = gt.data().iter().map(|&v| v == T::one()).collect();
    match (p.iter().any(|&b| b), g.iter().any(|&b| b)) {
        (false, false) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let sp = surface_points(&p, pred.shape());
    let sg = surface_points(&g, pred.shape());
    let a = percentile(&mut directed(&sp, &sg, spacing), 95.0);
    let b = percentile(&mut directed(&sg, &sp, spacing), 95.0);
    Ok(Some(a.max(b)))
}

/// Thresholded masks at probability 0.5.
pub fn binarize<T: Scalar>(probs: &Tensor<T>) -> Tensor<T> {
    probs.map(|p| if p.as_f64() >= 0.5 { T::one() } else { T::zero() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub sample: String,
    pub class: usize,
    pub dice: f64,
    pub hd95: Option<f64>,
}

/// Per-sample, per-class scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    /// Scores every channel of `pred` against `gt` (`C × spatial`).
    pub fn add<T: Scalar>(
        &mut self,
        sample: &str,
        pred: &Tensor<T>,
        gt: &Tensor<T>,
        spacing: &[f64],
    ) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape("metrics", pred.shape(), gt.shape()));
        }
        let spatial = pred.spatial().to_vec();
        for c in 0..pred.channels() {
            let p = pred.channel_slice(c, 1)?.reshape(&spatial)?;
            let g = gt.channel_slice(c, 1)?.reshape(&spatial)?;
            self.rows.push(MetricsRow {
                sample: sample.to_string(),
                class: c,
                dice: dice_score(&p, &g)?,
                hd95: hd95(&p, &g, spacing)?,
            });
        }
        Ok(())
    }

    pub fn mean_dice(&self) -> Option<f64> {
        (!self.rows.is_empty())
            .then(|| self.rows.iter().map(|r| r.dice).sum::<f64>() / self.rows.len() as f64)
    }

    /// Mean over rows with a defined distance.
    pub fn mean_hd95(&self) -> Option<f64> {
        let d: Vec<f64> = self.rows.iter().filter_map(|r| r.hd95).collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,class,dsc,hd95\n");
        for r in &self.rows {
            let h = r.hd95.map_or_else(|| "NA".to_string(), |v| v.to_string());
            writeln!(s, "{},{},{},{}", r.sample, r.class, r.dice, h).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: &[usize], on: &[usize]) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        for &i in on {
            t.data_mut()[i] = 1.0;
        }
        t
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[2, 2], &[0, 1]);
        let b = mask(&[2, 2], &[1, 2]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        let z = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(dice_score(&z, &z).unwrap(), 1.0);
        assert!(dice_score(&Tensor::full(&[2, 2], 0.5), &z).is_err());
    }

    #[test]
    fn hd95_examples() {
        let g = mask(&[5, 5], &[0]);
        let y = mask(&[5, 5], &[3 * 5 + 4]);
        assert_eq!(hd95(&y, &g, &[1.0, 1.0]).unwrap(), Some(5.0));
        assert_eq!(hd95(&g, &g, &[1.0, 1.0]).unwrap(), Some(0.0));
        let z = Tensor::<f64>::zeros(&[5, 5]);
        assert_eq!(hd95(&z, &z, &[1.0, 1.0]).unwrap(), Some(0.0));
        assert_eq!(hd95(&g, &z, &[1.0, 1.0]).unwrap(), None);
        assert_eq!(hd95(&y, &g, &[2.0, 1.0]).unwrap(), Some((36.0f64 + 16.0).sqrt()));
    }

    #[test]
    fn interior_voxels_are_not_surface() {
        let m: Vec<bool> = (0..25).map(|i| (1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5))).collect();
        let s = surface_points(&m, &[5, 5]);
        assert_eq!(s.len(), 8);
        assert!(!s.contains(&vec![2, 2]));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        assert!((percentile(&mut v, 95.0) - 3.85).abs() < 1e-12);
    }

    #[test]
    fn csv_marks_undefined_distance() {
        let mut r = MetricsReport::default();
        let g = mask(&[1, 3, 3], &[4]);
        r.add("s0", &g, &Tensor::zeros(&[1, 3, 3]), &[1.0, 1.0]).unwrap();
        assert_eq!(r.to_csv(), "sample,class,dsc,hd95\ns0,0,0,NA\n");
    }
}
