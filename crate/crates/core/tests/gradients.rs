mod common;

use common::{rng, uniform};
use deconver_core::checks::{block_case, mixer_case, ndc_update_cases, network_case, primitive_cases};
use deconver_core::grad::{GradcheckConfig, Graph};
use deconver_core::tensor::{adjoint_filter, cross_correlate, ConvSpec};
use deconver_core::{FilterTensor, Padding, Tensor};

fn assert_passes(report: deconver_core::grad::GradcheckReport) {
    println!("{report}");
    assert!(report.passed, "{report}");
    assert!(report.checked > 0);
}

#[test]
fn primitives_at_1e_6() {
    let cfg = GradcheckConfig::default();
    for seed in [1, 2] {
        for case in primitive_cases(seed) {
            assert_passes(case.run(&cfg).unwrap());
        }
    }
}

#[test]
fn ndc_update_and_shared_filter() {
    let cfg = GradcheckConfig::default();
    for case in ndc_update_cases(3) {
        assert_passes(case.run(&cfg).unwrap());
    }
}

#[test]
fn mixer_and_block_at_1e_6() {
    let cfg = GradcheckConfig::default().with_max_coords(80);
    assert_passes(mixer_case(0).unwrap().run(&cfg).unwrap());
    assert_passes(block_case(0).unwrap().run(&cfg).unwrap());
}

#[test]
fn network_with_loss_at_1e_5() {
    let cfg = GradcheckConfig::default().with_tolerance(1e-5).with_max_coords(50);
    assert_passes(network_case(0).unwrap().run(&cfg).unwrap());
}

#[test]
fn linear_term_gradient_is_adjoint_correlation() {
    let mut r = rng(8);
    let s = uniform(&[3, 7, 6], 0.0, 1.0, &mut r);
    let v = uniform(&[2, 3, 3, 3], 0.0, 1.0, &mut r);
    let mut g = Graph::new();
    let sv = g.input(s.clone());
    let vv = g.input(v.clone());
    let y = g.conv(sv, vv, &ConvSpec::same(&[3, 3]).unwrap()).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    let ones = Tensor::ones(&[2, 7, 6]);
    let expected = cross_correlate(&ones, &adjoint_filter(&FilterTensor::new(v).unwrap()), Padding::Same, 1).unwrap();
    let got = grads.get(sv).unwrap();
    assert!(got.sub(&expected).unwrap().max_abs() < 1e-12);
}

#[test]
fn quadratic_term_gradient_matches_closed_form() {
    let mut r = rng(9);
    let s = uniform(&[2, 6, 6], 0.1, 1.0, &mut r);
    let s_t = uniform(&[2, 6, 6], 0.1, 1.0, &mut r);
    let v = uniform(&[2, 2, 3, 3], 0.0, 1.0, &mut r);
    let spec = ConvSpec::same(&[3, 3]).unwrap();
    let mut g = Graph::new();
    let (sv, stv, vv) = (g.input(s.clone()), g.constant(s_t.clone()), g.constant(v.clone()));
    let sq = g.square(sv);
    let ratio = g.div(sq, stv).unwrap();
    let left = g.conv(ratio, vv, &spec).unwrap();
    let right = g.conv(stv, vv, &spec).unwrap();
    let prod = g.mul(left, right).unwrap();
    let l = g.sum(prod);
    let grads = g.backward(l).unwrap();

    let f = FilterTensor::new(v).unwrap();
    let st_v = cross_correlate(&s_t, &f, Padding::Same, 1).unwrap();
    let back = cross_correlate(&st_v, &adjoint_filter(&f), Padding::Same, 1).unwrap();
    let expected = s.scale(2.0).div(&s_t).unwrap().mul(&back).unwrap();
    let got = grads.get(sv).unwrap();
    assert!(got.sub(&expected).unwrap().max_abs() < 1e-12 * (1.0 + expected.max_abs()));
}

#[test]
fn backward_is_deterministic() {
    let case = &ndc_update_cases(5)[0];
    let run = || {
        let mut g = Graph::new();
        let vars: Vec<_> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (case.recipe)(&mut g, &vars).unwrap();
        let grads = g.backward(out).unwrap();
        vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect::<Vec<_>>()
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn backward_requires_scalar_output() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(&[2, 2]));
    let y = g.square(x);
    assert!(g.backward(y).is_err());
}
