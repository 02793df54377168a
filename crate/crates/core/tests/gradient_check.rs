//! Backprop vs central finite differences on random small networks.

use semnav_core::mlp::{softmax_cross_entropy, MlpModel};
use semnav_core::rng::SplitMix64;

const STEP: f64 = 1e-5;

/// `sum(upstream * forward(x))`, evaluated with nothing but `forward`.
fn objective(model: &MlpModel, x: &[f64], upstream: &[f64]) -> f64 {
    model.forward(x).unwrap().iter().zip(upstream).map(|(a, b)| a * b).sum()
}

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-8 || diff / analytic.abs().max(numeric.abs()) < 1e-5
}

/// Pre-activations closer than this to a ReLU kink would make the
/// finite-difference oracle itself unreliable.
fn far_from_kinks(model: &MlpModel, x: &[f64]) -> bool {
    let mut act = x.to_vec();
    let n = model.layers().len();
    for (l, layer) in model.layers().iter().enumerate() {
        let z: Vec<f64> = layer
            .weights
            .rows()
            .into_iter()
            .zip(layer.biases.iter())
            .map(|(row, b)| row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + b)
            .collect();
        if l < n - 1 {
            if z.iter().any(|v| v.abs() < 1e-3) {
                return false;
            }
            act = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    true
}

fn random_instance(rng: &mut SplitMix64) -> (MlpModel, Vec<f64>, Vec<f64>) {
    loop {
        let depth = 1 + rng.below_usize(3);
        let mut sizes = vec![1 + rng.below_usize(6)];
        for _ in 0..depth {
            sizes.push(1 + rng.below_usize(6));
        }
        let mut model = MlpModel::new(&sizes, rng.next_u64()).unwrap();
        for layer in model.layers_mut() {
            layer.biases.mapv_inplace(|_| rng.uniform(-0.5, 0.5));
        }
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let up: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        if far_from_kinks(&model, &x) {
            return (model, x, up);
        }
    }
}

/// Checks every parameter and input gradient of one instance; returns the
/// number of coordinates compared.
fn check_instance(model: &MlpModel, x: &[f64], up: &[f64]) -> usize {
    let grads = model.backward(x, up).unwrap();
    let mut checked = 0;
    for l in 0..model.layers().len() {
        let (rows, cols) = model.layers()[l].weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = model.clone();
                plus.layers_mut()[l].weights[[r, c]] += STEP;
                let mut minus = model.clone();
                minus.layers_mut()[l].weights[[r, c]] -= STEP;
                let numeric = (objective(&plus, x, up) - objective(&minus, x, up)) / (2.0 * STEP);
                let analytic = grads.weights[l][[r, c]];
                assert!(close(analytic, numeric), "w[{l}][{r},{c}]: {analytic} vs {numeric}");
                checked += 1;
            }
            let mut plus = model.clone();
            plus.layers_mut()[l].biases[r] += STEP;
            let mut minus = model.clone();
            minus.layers_mut()[l].biases[r] -= STEP;
            let numeric = (objective(&plus, x, up) - objective(&minus, x, up)) / (2.0 * STEP);
            assert!(close(grads.biases[l][r], numeric), "b[{l}][{r}]");
            checked += 1;
        }
    }
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += STEP;
        let mut xm = x.to_vec();
        xm[i] -= STEP;
        let numeric = (objective(model, &xp, up) - objective(model, &xm, up)) / (2.0 * STEP);
        assert!(close(grads.input[[0, i]], numeric), "input[{i}]");
    }
    checked
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = SplitMix64::new(2024);
    let mut total = 0;
    for _ in 0..100 {
        let (model, x, up) = random_instance(&mut rng);
        total += check_instance(&model, &x, &up);
    }
    assert!(total > 100);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = SplitMix64::new(7);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..5).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let class = rng.below_usize(5);
        let (_, grad) = softmax_cross_entropy(&logits, class).unwrap();
        for i in 0..5 {
            let mut p = logits.clone();
            p[i] += STEP;
            let mut m = logits.clone();
            m[i] -= STEP;
            let numeric = (softmax_cross_entropy(&p, class).unwrap().0 - softmax_cross_entropy(&m, class).unwrap().0)
                / (2.0 * STEP);
            assert!((grad[i] - numeric).abs() < 1e-8);
        }
    }
}
