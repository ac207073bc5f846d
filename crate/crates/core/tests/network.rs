mod common;

use common::{rng, uniform};
use deconver_core::grad::{Graph, ParamStore};
use deconver_core::net::layers::Layout;
use deconver_core::net::{
    count_params, Checkpoint, DeconvMixer, Deconver, DeconverBlock, DeconverConfig, Groups, NdcLayer,
    NdcLayerConfig,
};
use deconver_core::tensor::cross_correlate_grouped;
use deconver_core::{FilterTensor, Padding, Tensor};
use rand::Rng;

fn set(store: &mut ParamStore<f64>, name: &str, f: impl Fn(&Tensor<f64>) -> Tensor<f64>) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let p = store.get_mut(id);
    p.value = f(&p.value);
}

fn zero_out(store: &mut ParamStore<f64>, prefix: &str) {
    set(store, &format!("{prefix}.weight"), |t| Tensor::zeros(t.shape()));
    set(store, &format!("{prefix}.bias"), |t| Tensor::zeros(t.shape()));
}

#[test]
fn network_maps_input_to_logits_of_same_extent() {
    let cfg = DeconverConfig {
        depth: 3,
        base_channels: 8,
        in_channels: 2,
        ..DeconverConfig::micro()
    };
    let net = Deconver::<f64>::new(&cfg, 1).unwrap();
    let x = uniform(&[2, 16, 16], 0.0, 1.0, &mut rng(0));
    let y = net.predict_logits(&x).unwrap();
    assert_eq!(y.shape(), &[1, 16, 16]);
    assert_eq!(net.predict_logits(&x).unwrap(), y);

    let err = net.predict_logits(&Tensor::zeros(&[2, 10, 16])).unwrap_err();
    assert!(err.to_string().contains("divisible"), "{err}");
    assert!(net.predict_logits(&Tensor::zeros(&[1, 16, 16])).is_err());
}

#[test]
fn volumetric_network_runs() {
    let cfg = DeconverConfig {
        spatial_rank: 3,
        in_channels: 2,
        out_channels: 3,
        depth: 2,
        base_channels: 4,
        ..DeconverConfig::micro()
    };
    let net = Deconver::<f32>::new(&cfg, 2).unwrap();
    let y = net.predict_logits(&Tensor::ones(&[2, 4, 6, 4])).unwrap();
    assert_eq!(y.shape(), &[3, 4, 6, 4]);
}

#[test]
fn blocks_preserve_shape() {
    for (c, spatial) in [(16usize, vec![8usize, 8]), (8, vec![4, 4, 4])] {
        let rank = spatial.len();
        let mut layout = Layout::default();
        let block = DeconverBlock::new(&mut layout, "b", c, 4, &NdcLayerConfig::default(), rank).unwrap();
        let store = layout.instantiate::<f64, _>(&mut rng(3)).unwrap();
        let mut shape = vec![c];
        shape.extend(&spatial);
        let mut g = Graph::new();
        let p = g.bind(&store);
        let x = g.constant(uniform(&shape, -1.0, 1.0, &mut rng(4)));
        let y = block.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &shape[..]);
    }
}

#[test]
fn zero_output_projections_give_identity_block() {
    let mut layout = Layout::default();
    let block = DeconverBlock::new(&mut layout, "b", 8, 4, &NdcLayerConfig::default(), 2).unwrap();
    let mut store = layout.instantiate::<f64, _>(&mut rng(5)).unwrap();
    zero_out(&mut store, "b.mixer.project_out");
    zero_out(&mut store, "b.mlp.project");
    let x = uniform(&[8, 6, 6], -1.0, 1.0, &mut rng(6));
    let mut g = Graph::new();
    let p = g.bind(&store);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, &p, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn mixer_with_zero_output_projection_is_zero() {
    let mut layout = Layout::default();
    let mixer = DeconvMixer::new(&mut layout, "m", 8, &NdcLayerConfig::default(), 2).unwrap();
    let mut store = layout.instantiate::<f64, _>(&mut rng(7)).unwrap();
    zero_out(&mut store, "m.project_out");
    let mut g = Graph::new();
    let p = g.bind(&store);
    let x = g.constant(uniform(&[8, 6, 6], -1.0, 1.0, &mut rng(8)));
    let y = mixer.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.value(y).shape(), &[8, 6, 6]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

fn ndc_layer(c: usize, cfg: &NdcLayerConfig, seed: u64) -> (NdcLayer, ParamStore<f64>) {
    let mut layout = Layout::default();
    let layer = NdcLayer::new(&mut layout, "ndc", c, cfg, 2).unwrap();
    let mut store = layout.instantiate::<f64, _>(&mut rng(seed)).unwrap();
    set(&mut store, "ndc.source_init.bias", |t| t.map(|_| 0.0));
    (layer, store)
}

fn random_ndc_config(r: &mut impl Rng) -> (usize, NdcLayerConfig) {
    let c = [2, 4, 6][r.random_range(0..3)];
    let groups = match r.random_range(0..3) {
        0 => Groups::Fixed(1),
        1 => Groups::Fixed(2),
        _ => Groups::Channels,
    };
    let cfg = NdcLayerConfig {
        groups,
        ratio: [1.0, 2.0, 4.0][r.random_range(0..3)],
        kernel: [1, 3, 5][r.random_range(0..3)],
        epsilon: 1e-8,
    };
    (c, cfg)
}

#[test]
fn ndc_output_nonnegative_and_step_improves_per_group() {
    for seed in 0..30 {
        let mut r = rng(seed);
        let (c, cfg) = random_ndc_config(&mut r);
        let (layer, store) = ndc_layer(c, &cfg, seed);
        let x = uniform(&[c, 7, 6], 0.0, 1.0, &mut r);
        let mut g = Graph::new();
        let p = g.bind(&store);
        let xv = g.constant(x.clone());
        let (s1, s0, v) = layer.forward_parts(&mut g, &p, xv).unwrap();
        let (s1, s0, v) = (g.value(s1), g.value(s0), g.value(v));
        assert!(s1.is_nonnegative());
        assert_eq!(s1.channels(), layer.dims.sources);

        let groups = layer.dims.groups;
        let f = FilterTensor::new(v.clone()).unwrap();
        let e = |s: &Tensor<f64>| -> Vec<f64> {
            let recon = cross_correlate_grouped(s, &f, Padding::Same, 1, groups).unwrap();
            let resid = x.sub(&recon).unwrap();
            let per = c / groups;
            (0..groups)
                .map(|gi| resid.channel_slice(gi * per, per).unwrap().squared_norm())
                .collect()
        };
        for (gi, (a, b)) in e(s1).iter().zip(e(s0)).enumerate() {
            assert!(*a <= b + 1e-6, "seed {seed} group {gi}: {a} > {b}");
        }
    }
}

#[test]
fn ndc_identity_configuration() {
    let cfg = NdcLayerConfig {
        groups: Groups::Channels,
        ratio: 1.0,
        kernel: 1,
        epsilon: 1e-8,
    };
    let (layer, mut store) = ndc_layer(3, &cfg, 0);
    set(&mut store, "ndc.source_init.weight", |t| {
        Tensor::from_fn(t.shape(), |i| (i / 3 == i % 3) as u8 as f64)
    });
    set(&mut store, "ndc.filter", |t| Tensor::ones(t.shape()));
    let x = uniform(&[3, 5, 5], 0.0, 1.0, &mut rng(1));
    let mut g = Graph::new();
    let p = g.bind(&store);
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, &p, xv).unwrap();
    assert!(g.value(y).sub(&x).unwrap().max_abs() < 1e-15);
}

#[test]
fn ndc_zero_input_gives_zero_output_and_negative_input_is_rejected() {
    let (layer, store) = ndc_layer(4, &NdcLayerConfig::default(), 3);
    let mut g = Graph::new();
    let p = g.bind(&store);
    let x = g.constant(Tensor::zeros(&[4, 5, 5]));
    let y = layer.forward(&mut g, &p, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut neg = Tensor::zeros(&[4, 5, 5]);
    neg.data_mut()[7] = -1e-3;
    let x = g.constant(neg);
    assert!(layer.forward(&mut g, &p, x).is_err());
}

/// Independent count of the `L = 2`, `C₀ = 4`, rank-2 network with 3×3
/// kernels, one input and one output channel, `α = 4`, `G = C`, `R = 4`.
#[test]
fn parameter_count_matches_hand_enumeration() {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let block = |c: usize| {
        let e = 4 * c;
        let norms = 2 * (2 * c);
        let mixer = conv(c, c, 1) + conv(c, e, 1) + c * (e / c) * 9 + conv(e, c, 1);
        let mlp = conv(c, 4 * c, 1) + conv(4 * c, c, 1);
        norms + mixer + mlp
    };
    let expected = conv(1, 4, 3)
        + block(4)
        + conv(4, 8, 2)
        + block(8)
        + (8 * 4 * 2 * 2 + 4)
        + conv(8, 4, 1)
        + block(4)
        + conv(4, 1, 1);
    let cfg = DeconverConfig {
        base_channels: 4,
        ..DeconverConfig::micro()
    };
    assert_eq!(count_params(&cfg).unwrap(), expected);
    assert_eq!(count_params(&cfg).unwrap(), count_params(&cfg).unwrap());
    assert_eq!(Deconver::<f64>::new(&cfg, 0).unwrap().param_count(), expected);
}

#[test]
fn group_count_orders_parameter_totals() {
    let mut cfg = DeconverConfig::isles();
    let mut counts = Vec::new();
    for g in [Groups::Fixed(1), Groups::Fixed(8), Groups::Channels] {
        cfg.ndc.groups = g;
        counts.push(count_params(&cfg).unwrap());
    }
    assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let cfg = DeconverConfig::micro();
    let net = Deconver::<f64>::new(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.dcvw");
    Checkpoint::from_params(&cfg.to_toml(), &net.params).write(&path).unwrap();

    let ck = Checkpoint::read(&path).unwrap();
    let cfg2 = DeconverConfig::from_toml(&ck.config).unwrap();
    assert_eq!(cfg2, cfg);
    let restored = Deconver::from_params(&cfg2, &ck.to_params::<f64>().unwrap()).unwrap();
    let x = uniform(&[1, 8, 8], 0.0, 1.0, &mut rng(2));
    assert_eq!(restored.predict_logits(&x).unwrap(), net.predict_logits(&x).unwrap());
}
