//! Fully connected network with ReLU hidden layers, hand-written reverse-mode
//! gradients and plain SGD.
//!
//! Every pass is batched: rows of the input matrix are samples. Single-sample
//! calls are batches of one, so there is exactly one arithmetic path.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("input dimension {found} does not match model input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class id {class} out of range for {classes} outputs")]
    InvalidClass { class: usize, classes: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_pixels: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 40,
            batch_pixels: 512,
            seed: 0,
            l2: 1e-5,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_pixels == 0 {
            return Err("batch_pixels must be >= 1".into());
        }
        if !(self.l2 >= 0.0) {
            return Err(format!("l2 must be nonnegative, got {}", self.l2));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpDoc", into = "MlpDoc")]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    layers: Vec<DenseLayer>,
    seed: u64,
}

/// On-disk form: row-major weight matrices (`out` rows of `in` values).
#[derive(Serialize, Deserialize)]
struct MlpDoc {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    seed: u64,
}

impl From<MlpModel> for MlpDoc {
    fn from(m: MlpModel) -> Self {
        MlpDoc {
            weights: m
                .layers
                .iter()
                .map(|l| l.weights.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: m.layers.iter().map(|l| l.biases.to_vec()).collect(),
            layer_sizes: m.layer_sizes,
            seed: m.seed,
        }
    }
}

impl TryFrom<MlpDoc> for MlpModel {
    type Error = MlpError;
    fn try_from(doc: MlpDoc) -> Result<Self, MlpError> {
        let n = doc.layer_sizes.len();
        if n < 2 || doc.weights.len() != n - 1 || doc.biases.len() != n - 1 {
            return Err(MlpError::Invalid("layer count mismatch".into()));
        }
        let mut layers = Vec::with_capacity(n - 1);
        for (l, (w, b)) in doc.weights.into_iter().zip(doc.biases).enumerate() {
            let (fan_in, fan_out) = (doc.layer_sizes[l], doc.layer_sizes[l + 1]);
            if w.len() != fan_out || w.iter().any(|r| r.len() != fan_in) || b.len() != fan_out {
                return Err(MlpError::Invalid(format!("layer {l} shape mismatch")));
            }
            let flat: Vec<f64> = w.into_iter().flatten().collect();
            if flat.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(MlpError::Invalid(format!("layer {l} has non-finite parameters")));
            }
            layers.push(DenseLayer {
                weights: Array2::from_shape_vec((fan_out, fan_in), flat).expect("checked shape"),
                biases: Array1::from(b),
            });
        }
        Ok(MlpModel {
            layer_sizes: doc.layer_sizes,
            layers,
            seed: doc.seed,
        })
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; the last entry is the logits.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.activations.last().expect("at least input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// `batch x in`
    pub input: Array2<f64>,
}

impl MlpModel {
    /// He-uniform initialisation: each weight is drawn from
    /// `uniform(-sqrt(6/fan_in), sqrt(6/fan_in))` layer by layer in row-major
    /// order from `SplitMix64::new(seed)`; biases start at zero.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self, MlpError> {
        Self::check_sizes(layer_sizes)?;
        let mut rng = SplitMix64::new(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.uniform(-bound, bound));
                DenseLayer {
                    weights,
                    biases: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            seed,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self, MlpError> {
        Self::check_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|p| DenseLayer {
                weights: Array2::zeros((p[1], p[0])),
                biases: Array1::zeros(p[1]),
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            seed: 0,
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, seed: u64) -> Result<Self, MlpError> {
        if layers.is_empty() {
            return Err(MlpError::Invalid("no layers".into()));
        }
        let mut sizes = vec![layers[0].weights.ncols()];
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.ncols() != *sizes.last().unwrap() || layer.biases.len() != layer.weights.nrows() {
                return Err(MlpError::Invalid(format!("layer {l} shape mismatch")));
            }
            sizes.push(layer.weights.nrows());
        }
        Ok(Self {
            layer_sizes: sizes,
            layers,
            seed,
        })
    }

    fn check_sizes(sizes: &[usize]) -> Result<(), MlpError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(MlpError::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }
    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<ForwardCache, MlpError> {
        if input.ncols() != self.input_dim() {
            return Err(MlpError::DimensionMismatch {
                expected: self.input_dim(),
                found: input.ncols(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = activations[l].dot(&layer.weights.t());
            z += &layer.biases;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        let input = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(input)?.logits().row(0).to_vec())
    }

    /// Reverse-mode gradients of `sum(upstream * logits)`.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Gradients, MlpError> {
        let logits = cache.logits();
        if upstream.dim() != logits.dim() {
            return Err(MlpError::DimensionMismatch {
                expected: logits.ncols(),
                found: upstream.ncols(),
            });
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = upstream.clone();
        for l in (0..n).rev() {
            if l < n - 1 {
                // ReLU gate on this layer's output.
                ndarray::Zip::from(&mut delta)
                    .and(&cache.activations[l + 1])
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            weights.push(delta.t().dot(&cache.activations[l]));
            biases.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&self.layers[l].weights);
        }
        weights.reverse();
        biases.reverse();
        Ok(Gradients {
            weights,
            biases,
            input: delta,
        })
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients, MlpError> {
        let input = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let cache = self.forward_batch(input)?;
        if upstream.len() != self.output_dim() {
            return Err(MlpError::DimensionMismatch {
                expected: self.output_dim(),
                found: upstream.len(),
            });
        }
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row vector");
        self.backward_batch(&cache, &up)
    }

    /// `param -= lr * (grad + l2 * param)`
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64, l2: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            ndarray::Zip::from(&mut layer.weights).and(gw).for_each(|w, &g| {
                *w -= learning_rate * (g + l2 * *w);
            });
            ndarray::Zip::from(&mut layer.biases).and(gb).for_each(|b, &g| {
                *b -= learning_rate * (g + l2 * *b);
            });
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MlpError> {
        serde_json::from_str(text).map_err(|e| MlpError::Invalid(e.to_string()))
    }
}

pub fn mlp_forward(model: &MlpModel, x: &[f64]) -> Result<Vec<f64>, MlpError> {
    model.forward(x)
}

pub fn mlp_backward(model: &MlpModel, x: &[f64], upstream: &[f64]) -> Result<Gradients, MlpError> {
    model.backward(x, upstream)
}

/// `-log softmax(logits)[class]` with max subtraction, and its gradient
/// `softmax(logits) - one_hot(class)`.
pub fn softmax_cross_entropy(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>), MlpError> {
    if class >= logits.len() {
        return Err(MlpError::InvalidClass {
            class,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[class] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[class] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch and the gradient of that mean wrt logits.
pub fn batch_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>), MlpError> {
    assert_eq!(logits.nrows(), targets.len());
    let n = targets.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        let (loss, g) = softmax_cross_entropy(row.as_slice().expect("contiguous logits"), t)?;
        total += loss;
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = v / n;
        }
    }
    Ok((total / n, grad))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_model_zero_logits() {
        let m = MlpModel::zeros(&[4, 3, 2]).unwrap();
        assert_eq!(m.forward(&[0.3, -1.0, 2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        assert!(m.is_all_zero());
    }

    #[test]
    fn identity_linear_layer() {
        let layer = DenseLayer {
            weights: Array2::eye(3),
            biases: Array1::zeros(3),
        };
        let m = MlpModel::from_layers(vec![layer], 0).unwrap();
        assert_eq!(m.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn tiny_two_two_two_by_hand() {
        // h = relu([[1, -1], [0.5, 2]] x + [0.1, -0.2]); out = [[2, 1], [-1, 3]] h + [0, 0.5]
        // x = [1, 2]: pre = [1 - 2 + 0.1, 0.5 + 4 - 0.2] = [-0.9, 4.3] -> h = [0, 4.3]
        // out = [4.3, 12.9 + 0.5] = [4.3, 13.4]
        let m = MlpModel::from_layers(
            vec![
                DenseLayer {
                    weights: array![[1.0, -1.0], [0.5, 2.0]],
                    biases: array![0.1, -0.2],
                },
                DenseLayer {
                    weights: array![[2.0, 1.0], [-1.0, 3.0]],
                    biases: array![0.0, 0.5],
                },
            ],
            0,
        )
        .unwrap();
        let out = m.forward(&[1.0, 2.0]).unwrap();
        assert!((out[0] - 4.3).abs() < 1e-12);
        assert!((out[1] - 13.4).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let m = MlpModel::new(&[3, 2], 1).unwrap();
        assert_eq!(
            m.forward(&[1.0, 2.0]),
            Err(MlpError::DimensionMismatch { expected: 3, found: 2 })
        );
        assert!(m.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let m = MlpModel::new(&[3, 5, 2], 4).unwrap();
        let g = m.backward(&[0.2, 0.4, 0.9], &[0.0, 0.0]).unwrap();
        assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_gradient_is_weight_transpose() {
        let w = array![[1.0, 2.0, 3.0], [-4.0, 5.0, 0.5]];
        let m = MlpModel::from_layers(
            vec![DenseLayer {
                weights: w.clone(),
                biases: array![0.0, 1.0],
            }],
            0,
        )
        .unwrap();
        let up = [0.7, -1.3];
        let g = m.backward(&[9.0, 8.0, 7.0], &up).unwrap();
        let expected = w.t().dot(&array![0.7, -1.3]);
        for (a, b) in g.input.row(0).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn he_uniform_bounds_and_determinism() {
        let a = MlpModel::new(&[10, 8, 3], 77).unwrap();
        let b = MlpModel::new(&[10, 8, 3], 77).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(a.layers().iter().all(|l| l.biases.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn json_round_trip() {
        let m = MlpModel::new(&[4, 6, 3], 12).unwrap();
        let back = MlpModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(MlpModel::from_json(r#"{"layer_sizes":[2,1],"weights":[[[1.0]]],"biases":[[0.0]],"seed":0}"#).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, grad) = softmax_cross_entropy(&[0.3; 5], 2).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
        assert!(grad.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_is_stable() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss >= 0.0 && loss < 1e-300_f64.max(1e-12));
        assert!(grad.iter().all(|g| g.is_finite()));
        let (loss, _) = softmax_cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_invalid_class() {
        assert_eq!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(MlpError::InvalidClass { class: 2, classes: 2 })
        );
    }

    #[test]
    fn cross_entropy_positive_and_gradient_sums_to_zero() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..4).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let (loss, grad) = softmax_cross_entropy(&logits, rng.below_usize(4)).unwrap();
            assert!(loss > 0.0);
            assert!(grad.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_single_gradients() {
        let m = MlpModel::new(&[3, 4, 2], 6).unwrap();
        let xs = array![[0.1, 0.5, 0.9], [0.7, 0.2, 0.3], [0.4, 0.4, 0.8]];
        let up = array![[1.0, -0.5], [0.2, 0.3], [-1.0, 2.0]];
        let batch = m.backward_batch(&m.forward_batch(xs.view()).unwrap(), &up).unwrap();
        let mut acc = m.backward(xs.row(0).as_slice().unwrap(), up.row(0).as_slice().unwrap()).unwrap();
        for i in 1..3 {
            let g = m.backward(xs.row(i).as_slice().unwrap(), up.row(i).as_slice().unwrap()).unwrap();
            for (a, b) in acc.weights.iter_mut().zip(&g.weights) {
                *a += b;
            }
        }
        for (a, b) in acc.weights.iter().zip(&batch.weights) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn argmax_ties_to_smallest() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
