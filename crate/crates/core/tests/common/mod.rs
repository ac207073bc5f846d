//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use deconver_core::ndc::NdcProblem;
use deconver_core::{FilterTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Nested-loop correlation over (c_out, z, y, x, c_in, kz, ky, kx) with zero
/// padding `pad`, stride 1 and `groups` channel groups. Works on 2D and 3D
/// inputs by treating a 2D image as depth 1.
pub fn naive_correlate(s: &Tensor<f64>, v: &Tensor<f64>, pad: &[usize], groups: usize) -> Tensor<f64> {
    let rank = s.rank() - 1;
    let lift = |e: &[usize]| -> [usize; 3] {
        if rank == 2 {
            [1, e[0], e[1]]
        } else {
            [e[0], e[1], e[2]]
        }
    };
    let [d, h, w] = lift(s.spatial());
    let [kd, kh, kw] = lift(&v.shape()[2..]);
    let [pd, ph, pw] = if rank == 2 { [0, pad[0], pad[1]] } else { [pad[0], pad[1], pad[2]] };
    let od = d + 2 * pd + 1 - kd;
    let oh = h + 2 * ph + 1 - kh;
    let ow = w + 2 * pw + 1 - kw;
    let cout = v.shape()[0];
    let cin_g = v.shape()[1];
    let cout_g = cout / groups;
    let mut out = vec![0.0; cout * od * oh * ow];
    for co in 0..cout {
        let g = co / cout_g;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..cin_g {
                        let ci = g * cin_g + i;
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let (sz, sy, sx) = (z + a, y + b, x + c);
                                    if sz < pd || sy < ph || sx < pw {
                                        continue;
                                    }
                                    let (sz, sy, sx) = (sz - pd, sy - ph, sx - pw);
                                    if sz >= d || sy >= h || sx >= w {
                                        continue;
                                    }
                                    let sv = s.data()[((ci * d + sz) * h + sy) * w + sx];
                                    let vv = v.data()[(((co * cin_g + i) * kd + a) * kh + b) * kw + c];
                                    acc += sv * vv;
                                }
                            }
                        }
                    }
                    out[((co * od + z) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    let mut shape = vec![cout];
    if rank == 3 {
        shape.push(od);
    }
    shape.extend([oh, ow]);
    Tensor::from_vec(shape, out).unwrap()
}

/// Random nonnegative NDC instance: 2D for even seeds (C ≤ 3, E ≤ 4, up to
/// 16×16, kernel up to 5×5), 3D for odd seeds (up to 8³, kernel up to 3³).
pub fn random_problem(seed: u64) -> NdcProblem<f64> {
    let mut r = rng(seed);
    let c = r.random_range(1..=3);
    let e = r.random_range(1..=4);
    let (spatial, kernel): (Vec<usize>, Vec<usize>) = if seed.is_multiple_of(2) {
        let k = [1, 3, 5][r.random_range(0..3)];
        (vec![r.random_range(4..=16), r.random_range(4..=16)], vec![k, k])
    } else {
        let k = [1, 3][r.random_range(0..2)];
        (
            vec![r.random_range(3..=8), r.random_range(3..=8), r.random_range(3..=8)],
            vec![k, k, k],
        )
    };
    let mut xs = vec![c];
    xs.extend(&spatial);
    let mut ss = vec![e];
    ss.extend(&spatial);
    let mut vs = vec![c, e];
    vs.extend(&kernel);
    let x = uniform(&xs, 0.0, 1.0, &mut r);
    let v = FilterTensor::new(uniform(&vs, 0.0, 1.0, &mut r)).unwrap();
    let s0 = uniform(&ss, 0.05, 1.0, &mut r);
    NdcProblem::new(x, v, s0).unwrap()
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile_oracle(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (v.len() as f64 - 1.0);
    let below = rank.floor();
    let frac = rank - below;
    let i = below as usize;
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

/// HD95 for 2D masks by explicit pairwise distances between surface pixels.
pub fn hd95_oracle(a: &[Vec<bool>], b: &[Vec<bool>]) -> Option<f64> {
    let surface = |m: &[Vec<bool>]| -> Vec<(f64, f64)> {
        let (h, w) = (m.len() as i64, m[0].len() as i64);
        let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m[y as usize][x as usize];
        let mut pts = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if at(y, x) && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1)) {
                    pts.push((y as f64, x as f64));
                }
            }
        }
        pts
    };
    let (sa, sb) = (surface(a), surface(b));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| -> Vec<f64> {
        p.iter()
            .map(|&(y, x)| {
                q.iter()
                    .map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    Some(percentile_oracle(&directed(&sa, &sb), 95.0).max(percentile_oracle(&directed(&sb, &sa), 95.0)))
}

pub fn mask_tensor(m: &[Vec<bool>]) -> Tensor<f64> {
    let (h, w) = (m.len(), m[0].len());
    Tensor::from_fn(&[h, w], |i| m[i / w][i % w] as u8 as f64)
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    (0..h)
        .map(|_| (0..w).map(|_| rng.random_bool(density)).collect())
        .collect()
}

/// Relative gap `|a − b| / max(1, |a|, |b|)`.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}
