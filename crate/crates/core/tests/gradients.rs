use divebatch_core::diagnostics::{finite_diff_check, relative_error};
use divebatch_core::models::{per_sample_grad, Activation, LogisticModel, ModelFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FAMILIES: [ModelFamily; 4] = [
    ModelFamily::Logistic,
    ModelFamily::Mlp {
        hidden: 16,
        activation: Activation::Relu,
    },
    ModelFamily::Mlp {
        hidden: 8,
        activation: Activation::Tanh,
    },
    ModelFamily::Quadratic,
];

#[test]
fn hundred_pairs_per_family_within_tolerance() {
    for family in FAMILIES {
        let r = finite_diff_check::<f64>(family, 12, 100, 1e-5, 1e-5, 21).unwrap();
        assert_eq!(r.errors.len(), 100);
        assert!(r.passed, "{family:?}: max rel error {}", r.max_rel_error);
    }
}

#[test]
fn logistic_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: f64 = rng.random_range(-1.0..1.0);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = u8::from(rng.random_bool(0.5));
        let s: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b;
        let r = 1.0 / (1.0 + (-s).exp()) - f64::from(y);
        let mut want: Vec<f64> = x.iter().map(|v| r * v).collect();
        want.push(r);
        let got = per_sample_grad(&LogisticModel::from_parts(w, b), &x, y).unwrap();
        assert!(relative_error(&got, &want) < 1e-13);
    }
}
