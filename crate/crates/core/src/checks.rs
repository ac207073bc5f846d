//! Finite-difference gradient suites over the graph primitives, the NDC
//! update and the network modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grad::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::grad::{Graph, Var};
use crate::net::layers::Layout;
use crate::net::{Architecture, DeconvMixer, DeconverBlock, DeconverConfig, NdcLayerConfig};
use crate::tensor::{ConvSpec, Tensor};
use crate::train::{soft_dice_ce_loss, synth_dataset, Activation};

type Recipe = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A named differentiable scalar function with its evaluation point.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub recipe: Recipe,
}

impl Case {
    fn new(
        name: &str,
        inputs: Vec<Tensor<f64>>,
        recipe: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case {
            name: name.to_string(),
            inputs,
            recipe: Box::new(recipe),
        }
    }

    pub fn run(&self, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
        gradcheck(&self.name, &self.inputs, &self.recipe, cfg)
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `⟨op(inputs), w⟩` with a fixed random `w`, so every output entry
/// contributes with its own weight.
fn weighted(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let w = rand_t(rng, out_shape, -1.0, 1.0);
    Case::new(name, inputs, move |g, v| {
        let y = op(g, v)?;
        g.dot_const(y, &w)
    })
}

/// One case per registered primitive, on 2D `(4, 8, 8)`-sized and 3D
/// `(2, 4, 4, 4)`-sized operands.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a = [4, 8, 8];
    let v3 = [2, 4, 4, 4];
    let mut cases = Vec::new();
    let t = |r: &mut ChaCha8Rng, s: &[usize]| rand_t(r, s, -1.0, 1.0);

    let (x, y) = (t(&mut r, &a), t(&mut r, &a));
    cases.push(weighted("add", vec![x.clone(), y.clone()], &a, &mut r, |g, v| g.add(v[0], v[1])));
    cases.push(weighted("sub", vec![x.clone(), y.clone()], &a, &mut r, |g, v| g.sub(v[0], v[1])));
    cases.push(weighted("mul", vec![x.clone(), y.clone()], &a, &mut r, |g, v| g.mul(v[0], v[1])));
    let den = rand_t(&mut r, &a, 0.5, 1.5);
    cases.push(weighted("div", vec![x.clone(), den.clone()], &a, &mut r, |g, v| g.div(v[0], v[1])));
    let s = t(&mut r, &[1]);
    cases.push(weighted("mul_broadcast", vec![x.clone(), s], &a, &mut r, |g, v| g.mul(v[0], v[1])));
    cases.push(weighted("add_scalar", vec![x.clone()], &a, &mut r, |g, v| Ok(g.add_scalar(v[0], 0.7))));
    cases.push(weighted("scale", vec![x.clone()], &a, &mut r, |g, v| Ok(g.scale(v[0], -1.3))));
    cases.push(weighted("relu", vec![x.clone()], &a, &mut r, |g, v| Ok(g.relu(v[0]))));
    cases.push(weighted("gelu", vec![x.clone()], &a, &mut r, |g, v| Ok(g.gelu(v[0]))));
    cases.push(weighted("sigmoid", vec![x.clone()], &a, &mut r, |g, v| Ok(g.sigmoid(v[0]))));
    cases.push(weighted("softplus", vec![x.clone()], &a, &mut r, |g, v| Ok(g.softplus(v[0]))));
    cases.push(weighted("exp", vec![x.clone()], &a, &mut r, |g, v| Ok(g.exp(v[0]))));
    cases.push(weighted("log", vec![den.clone()], &a, &mut r, |g, v| g.log(v[0])));
    cases.push(weighted("square", vec![x.clone()], &a, &mut r, |g, v| Ok(g.square(v[0]))));

    let w = t(&mut r, &[3, 4, 3, 3]);
    cases.push(weighted("correlate", vec![x.clone(), w], &[3, 8, 8], &mut r, |g, v| {
        g.conv(v[0], v[1], &ConvSpec::same(&[3, 3])?)
    }));
    let w = t(&mut r, &[4, 2, 3, 3]);
    cases.push(weighted("correlate_grouped", vec![x.clone(), w], &a, &mut r, |g, v| {
        g.conv(v[0], v[1], &ConvSpec::same(&[3, 3])?.with_groups(2))
    }));
    let w = t(&mut r, &[5, 4, 2, 2]);
    cases.push(weighted("correlate_strided", vec![x.clone(), w], &[5, 4, 4], &mut r, |g, v| {
        g.conv(v[0], v[1], &ConvSpec::valid(2).with_stride(2))
    }));
    let xs = t(&mut r, &[4, 4, 4]);
    let w = t(&mut r, &[4, 3, 2, 2]);
    cases.push(weighted("correlate_transposed", vec![xs, w], &[3, 8, 8], &mut r, |g, v| {
        g.conv_transpose(v[0], v[1], &ConvSpec::valid(2).with_stride(2))
    }));
    let xv = t(&mut r, &v3);
    let w = t(&mut r, &[3, 2, 3, 3, 3]);
    cases.push(weighted("correlate_3d", vec![xv.clone(), w], &[3, 4, 4, 4], &mut r, |g, v| {
        g.conv(v[0], v[1], &ConvSpec::same(&[3, 3, 3])?)
    }));
    let w = t(&mut r, &[2, 3, 2, 2, 2]);
    cases.push(weighted("correlate_transposed_3d", vec![xv.clone(), w], &[3, 8, 8, 8], &mut r, |g, v| {
        g.conv_transpose(v[0], v[1], &ConvSpec::valid(3).with_stride(2))
    }));
    let (w, b) = (t(&mut r, &[6, 4, 1, 1]), t(&mut r, &[6]));
    cases.push(weighted("pointwise_conv", vec![x.clone(), w, b], &[6, 8, 8], &mut r, |g, v| {
        g.pointwise_conv(v[0], v[1], Some(v[2]))
    }));
    let (w, b) = (t(&mut r, &[6, 4, 1, 1]), t(&mut r, &[6]));
    cases.push(weighted("pointwise_conv_relu", vec![x.clone(), w, b], &[6, 8, 8], &mut r, |g, v| {
        let y = g.pointwise_conv(v[0], v[1], Some(v[2]))?;
        Ok(g.relu(y))
    }));
    let b = t(&mut r, &[4]);
    cases.push(weighted("add_bias", vec![x.clone(), b], &a, &mut r, |g, v| g.add_bias(v[0], v[1])));
    cases.push(weighted("pad", vec![x.clone()], &[4, 10, 12], &mut r, |g, v| g.pad(v[0], &[1, 2])));
    let z = t(&mut r, &[2, 8, 8]);
    cases.push(weighted("concat", vec![x.clone(), z], &[6, 8, 8], &mut r, |g, v| g.concat(&[v[0], v[1]])));
    cases.push(weighted("slice", vec![x.clone()], &[2, 8, 8], &mut r, |g, v| g.slice(v[0], 1, 2)));
    let f = t(&mut r, &[4, 2, 3, 3]);
    cases.push(weighted("adjoint", vec![f], &[4, 2, 3, 3], &mut r, |g, v| g.adjoint(v[0], 2)));
    let (sc, sh) = (t(&mut r, &[4]), t(&mut r, &[4]));
    cases.push(weighted("instance_norm", vec![x.clone(), sc, sh], &a, &mut r, |g, v| {
        g.instance_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)
    }));
    let (sc, sh) = (t(&mut r, &[2]), t(&mut r, &[2]));
    cases.push(weighted("instance_norm_3d", vec![xv.clone(), sc, sh], &v3, &mut r, |g, v| {
        g.instance_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)
    }));
    cases.push(weighted("sum_spatial", vec![x.clone()], &[4], &mut r, |g, v| Ok(g.sum_spatial(v[0]))));
    cases.push(weighted("mean", vec![x.clone()], &[1], &mut r, |g, v| Ok(g.mean(v[0]))));
    cases.push(weighted("log_softmax", vec![x.clone()], &a, &mut r, |g, v| Ok(g.log_softmax(v[0]))));
    cases
}

/// Gradients through one ε-guarded NDC update with respect to the
/// observation, the starting source and the filter, where the filter enters
/// both as `V` and (through the adjoint) as `V⁻`.
pub fn ndc_update_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for (name, xs, ss, vs, groups) in [
        ("ndc_update", vec![2, 6, 6], vec![3, 6, 6], vec![2, 3, 3, 3], 1),
        ("ndc_update_grouped", vec![4, 5, 5], vec![8, 5, 5], vec![4, 4, 3, 3], 2),
        ("ndc_update_3d", vec![2, 4, 4, 4], vec![2, 4, 4, 4], vec![2, 2, 3, 3, 3], 1),
    ] {
        let x = rand_t(&mut r, &xs, 0.1, 1.0);
        let s = rand_t(&mut r, &ss, 0.1, 1.0);
        let v = rand_t(&mut r, &vs, 0.1, 1.0);
        let kernel = vs[2..].to_vec();
        cases.push(weighted(name, vec![x, s, v], &ss, &mut r, move |g, a| {
            let spec = ConvSpec::same(&kernel)?.with_groups(groups);
            let v_adj = g.adjoint(a[2], groups)?;
            let back = g.conv(a[0], v_adj, &spec)?;
            let num = g.add_scalar(back, 1e-8);
            let recon = g.conv(a[1], a[2], &spec)?;
            let reproj = g.conv(recon, v_adj, &spec)?;
            let den = g.add_scalar(reproj, 1e-8);
            let ratio = g.div(num, den)?;
            g.mul(a[1], ratio)
        }));
    }

    let x = rand_t(&mut r, &[2, 6, 6], 0.0, 1.0);
    let s = rand_t(&mut r, &[3, 6, 6], 0.0, 1.0);
    let v = rand_t(&mut r, &[2, 3, 3, 3], 0.0, 1.0);
    cases.push(Case::new("shared_filter_inner_products", vec![x, s, v], |g, a| {
        let spec = ConvSpec::same(&[3, 3])?;
        let sv = g.conv(a[1], a[2], &spec)?;
        let v_adj = g.adjoint(a[2], 1)?;
        let xv = g.conv(a[0], v_adj, &spec)?;
        let p = g.mul(a[0], sv)?;
        let q = g.mul(xv, a[1])?;
        let p = g.sum(p);
        let q = g.sum(q);
        g.mul(p, q)
    }));

    let s = rand_t(&mut r, &[2, 6, 6], 0.1, 1.0);
    let s_t = rand_t(&mut r, &[2, 6, 6], 0.1, 1.0);
    let v = rand_t(&mut r, &[2, 2, 3, 3], 0.0, 1.0);
    cases.push(Case::new("surrogate_quadratic_term", vec![s, s_t, v], |g, a| {
        let spec = ConvSpec::same(&[3, 3])?;
        let sq = g.square(a[0]);
        let ratio = g.div(sq, a[1])?;
        let left = g.conv(ratio, a[2], &spec)?;
        let right = g.conv(a[1], a[2], &spec)?;
        let prod = g.mul(left, right)?;
        Ok(g.sum(prod))
    }));
    cases
}

fn module_case(
    name: &str,
    layout: &Layout,
    x: Tensor<f64>,
    seed: u64,
    forward: impl Fn(&mut Graph<f64>, &[Var], Var) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let params = layout.instantiate::<f64, _>(&mut r)?;
    // perturb zero-initialised biases and affine terms so no gradient is trivially zero
    let mut inputs = vec![x.clone()];
    for p in params.iter() {
        let jitter = rand_t(&mut r, p.value.shape(), -0.1, 0.1);
        inputs.push(p.value.add(&jitter)?);
    }
    let w = rand_t(&mut r, x.shape(), -1.0, 1.0);
    Ok(Case::new(name, inputs, move |g, v| {
        let y = forward(g, &v[1..], v[0])?;
        g.dot_const(y, &w)
    }))
}

/// Deconv Mixer on a `(4, 6, 6)` input.
pub fn mixer_case(seed: u64) -> Result<Case> {
    let mut layout = Layout::default();
    let mixer = DeconvMixer::new(&mut layout, "mixer", 4, &NdcLayerConfig::default(), 2)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = rand_t(&mut r, &[4, 6, 6], -1.0, 1.0);
    module_case("deconv_mixer", &layout, x, seed, move |g, p, x| mixer.forward(g, p, x))
}

/// Deconver block on a `(4, 6, 6)` input.
pub fn block_case(seed: u64) -> Result<Case> {
    let mut layout = Layout::default();
    let block = DeconverBlock::new(&mut layout, "block", 4, 4, &NdcLayerConfig::default(), 2)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = rand_t(&mut r, &[4, 6, 6], -1.0, 1.0);
    module_case("deconver_block", &layout, x, seed, move |g, p, x| block.forward(g, p, x))
}

/// Configuration of the network gradient check: `L = 2`, `C₀ = 4`, rank 2.
pub fn gradcheck_network_config() -> DeconverConfig {
    DeconverConfig {
        base_channels: 4,
        ..DeconverConfig::micro()
    }
}

/// Full network plus soft Dice and cross-entropy on a `(1, 8, 8)` sample.
pub fn network_case(seed: u64) -> Result<Case> {
    let cfg = gradcheck_network_config();
    let (arch, layout) = Architecture::new(&cfg)?;
    let sample = synth_dataset::<f64>(1, &[8, 8], seed)?.remove(0);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let params = layout.instantiate::<f64, _>(&mut r)?;
    let mut inputs = vec![sample.image];
    for p in params.iter() {
        let jitter = rand_t(&mut r, p.value.shape(), -0.1, 0.1);
        inputs.push(p.value.add(&jitter)?);
    }
    let mask = sample.mask;
    let activation = Activation::for_channels(cfg.out_channels);
    Ok(Case::new("network_with_loss", inputs, move |g, v| {
        let z = arch.forward(g, &v[1..], v[0])?;
        Ok(soft_dice_ce_loss(g, z, &mask, activation)?.total)
    }))
}

/// A custom operation whose backward rule is deliberately off by a factor of
/// two; a working checker must reject it.
pub fn faulty_case() -> Case {
    let x = Tensor::from_fn(&[2, 3, 3], |i| 0.1 * i as f64 - 0.4);
    Case::new("faulty_square", vec![x], |g, v| {
        let value = g.value(v[0]).square();
        let y = g.custom(&[v[0]], value, |gy, xs| {
            vec![gy.mul(xs[0]).expect("same shape").scale(4.0)]
        });
        Ok(g.sum(y))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faulty_case_fails() {
        let r = faulty_case().run(&GradcheckConfig::default()).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn primitive_suite_passes() {
        let cfg = GradcheckConfig::default().with_max_coords(64);
        for c in primitive_cases(0) {
            let r = c.run(&cfg).unwrap();
            assert!(r.passed, "{r}");
        }
    }
}
