//! Prediction head `ŷ = f(r, v, c, ū)` and the training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    activate, activate_backward, affine, affine_backward, concat, sigmoid, Activation, Matrix, Vector, RELU_BIAS_INIT,
};

pub const HIDDEN_WIDTHS: [usize; 2] = [200, 80];

/// Probabilities are kept inside `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vector,
}

impl DenseLayer {
    fn init(input: usize, output: usize, bias: f64, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (input as f64).sqrt();
        let data = (0..input * output).map(|_| rng.gen_range(-s..=s)).collect();
        DenseLayer { w: Matrix::from_vec(output, input, data).expect("finite"), b: vec![bias; output].into() }
    }
}

/// Three dense layers, ReLU / ReLU / sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorMlp {
    pub layers: [DenseLayer; 3],
}

#[derive(Clone, Debug)]
pub struct PredictTrace {
    input: Vector,
    h1: Vector,
    h2: Vector,
    raw: f64,
}

impl PredictTrace {
    pub fn probability(&self) -> f64 {
        self.raw.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }
}

impl PredictorMlp {
    pub fn init(input_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b] = HIDDEN_WIDTHS;
        PredictorMlp {
            layers: [
                DenseLayer::init(input_width, a, RELU_BIAS_INIT, &mut rng),
                DenseLayer::init(a, b, RELU_BIAS_INIT, &mut rng),
                DenseLayer::init(b, 1, 0.0, &mut rng),
            ],
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn predict(&self, r: &[f64], v: &[f64], c: &[f64], u_side: &[f64]) -> Result<f64> {
        Ok(self.forward(r, v, c, u_side)?.probability())
    }

    pub fn forward(&self, r: &[f64], v: &[f64], c: &[f64], u_side: &[f64]) -> Result<PredictTrace> {
        let input = concat(&[r, v, c, u_side]);
        if input.len() != self.input_width() {
            return Err(Error::Shape { op: "predict", left: self.layers[0].w.shape(), right: (input.len(), 1) });
        }
        let [l1, l2, l3] = &self.layers;
        let h1 = activate(Activation::Relu, &affine(&l1.w, &input, &l1.b)?);
        let h2 = activate(Activation::Relu, &affine(&l2.w, &h1, &l2.b)?);
        let raw = sigmoid(affine(&l3.w, &h2, &l3.b)?[0]);
        Ok(PredictTrace { input, h1, h2, raw })
    }

    /// Backpropagates `d loss / d logit` and returns `d loss / d input`.
    pub fn backward(&self, t: &PredictTrace, dlogit: f64, grads: &mut PredictorMlp) -> Vector {
        let [l1, l2, l3] = &self.layers;
        let [g1, g2, g3] = &mut grads.layers;
        let mut dh2 = vec![0.0; t.h2.len()];
        affine_backward(&l3.w, &t.h2, &[dlogit], &mut g3.w, Some(&mut g3.b), Some(&mut dh2));
        let da2 = activate_backward(Activation::Relu, &t.h2, &dh2);
        let mut dh1 = vec![0.0; t.h1.len()];
        affine_backward(&l2.w, &t.h1, &da2, &mut g2.w, Some(&mut g2.b), Some(&mut dh1));
        let da1 = activate_backward(Activation::Relu, &t.h1, &dh1);
        let mut dinput = Vector::zeros(t.input.len());
        affine_backward(&l1.w, &t.input, &da1, &mut g1.w, Some(&mut g1.b), Some(&mut dinput));
        dinput
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("mlp{}.w", k + 1), l.w.as_slice()));
            out.push((format!("mlp{}.b", k + 1), &l.b[..]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("mlp{}.w", k + 1), l.w.as_mut_slice()));
            out.push((format!("mlp{}.b", k + 1), &mut l.b[..]));
        }
        out
    }
}

pub fn cross_entropy(y: f64, y_hat: f64) -> Result<f64> {
    if !(y_hat > 0.0 && y_hat < 1.0) {
        return Err(Error::Invalid(format!("probability {y_hat} outside (0, 1)")));
    }
    Ok(-(y * y_hat.ln() + (1.0 - y) * (1.0 - y_hat).ln()))
}

/// Derivative of the cross entropy w.r.t. the pre-sigmoid logit. Zero inside
/// the clamped region, where the loss is flat in the logit.
pub fn cross_entropy_dlogit(y: f64, t: &PredictTrace) -> f64 {
    if t.raw < PROB_FLOOR || t.raw > 1.0 - PROB_FLOOR {
        0.0
    } else {
        t.raw - y
    }
}

/// Σ CE + λ · mean covariance loss + ½ μ · ‖θ‖².
pub fn total_loss(ce: &[f64], cov: &[f64], squared_norm: f64, lambda: f64, mu: f64) -> f64 {
    let data: f64 = ce.iter().sum();
    let reg = if cov.is_empty() { 0.0 } else { cov.iter().sum::<f64>() / cov.len() as f64 };
    data + lambda * reg + 0.5 * mu * squared_norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpmn::{covariance_loss, memory_covariance, MemoryPool};
    use crate::numerics::{finite_diff_grad, relative_error};

    fn inputs(rng: &mut ChaCha8Rng) -> [Vec<f64>; 4] {
        [4, 3, 2, 2].map(|n| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn predict_cases() {
        let mlp = PredictorMlp::init(11, 1).zeros_like();
        assert_eq!(mlp.predict(&[0.0; 4], &[0.0; 3], &[0.0; 2], &[0.0; 2]).unwrap(), 0.5);
        let mut sat = mlp.clone();
        sat.layers[2].b[0] = 10.0;
        let p = sat.predict(&[1.0; 4], &[1.0; 3], &[1.0; 2], &[1.0; 2]).unwrap();
        assert!((p - 0.99995).abs() < 1e-5);
        let mut huge = mlp.clone();
        huge.layers[2].b[0] = 100.0;
        let p = huge.predict(&[0.0; 4], &[0.0; 3], &[0.0; 2], &[0.0; 2]).unwrap();
        assert!(p < 1.0 && p == 1.0 - PROB_FLOOR);
        assert!(mlp.predict(&[0.0; 4], &[0.0; 3], &[0.0; 2], &[0.0; 1]).is_err());
    }

    #[test]
    fn predict_matches_layer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = PredictorMlp::init(11, 3);
        let [r, v, c, u] = inputs(&mut rng);
        let x: Vec<f64> = [r.clone(), v.clone(), c.clone(), u.clone()].concat();
        let layer = |l: &DenseLayer, x: &[f64], relu: bool| -> Vec<f64> {
            (0..l.w.rows())
                .map(|i| {
                    let mut a = l.b[i];
                    for k in 0..x.len() {
                        a += l.w.get(i, k) * x[k];
                    }
                    if relu {
                        a.max(0.0)
                    } else {
                        1.0 / (1.0 + (-a).exp())
                    }
                })
                .collect()
        };
        let h1 = layer(&mlp.layers[0], &x, true);
        let h2 = layer(&mlp.layers[1], &h1, true);
        let want = layer(&mlp.layers[2], &h2, false)[0];
        assert!((mlp.predict(&r, &v, &c, &u).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(1.0, 0.5).unwrap() - 0.693147).abs() < 1e-6);
        assert!((cross_entropy(1.0, 0.9).unwrap() - 0.105361).abs() < 1e-6);
        assert!(cross_entropy(0.0, 1e-12).unwrap() < 1e-11);
        assert!(cross_entropy(1.0, 0.0).is_err());
        assert!(cross_entropy(1.0, 1.0).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let ce = [0.3, 0.2];
        assert_eq!(total_loss(&ce, &[5.0, 7.0], 100.0, 0.0, 0.0), 0.5);
        let same = MemoryPool { slots: vec![vec![1.0, -1.0].into(); 2], step: 0 };
        let cov = covariance_loss(&memory_covariance(&same));
        assert_eq!(total_loss(&ce, &[cov], 0.0, 1.0, 0.0), 1.5);
        assert_eq!(total_loss(&[], &[], 9.0, 0.0, 2.0), 9.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = PredictorMlp::init(11, 5);
        let [r, v, c, u] = inputs(&mut rng);
        let y = 1.0;
        let loss = |m: &PredictorMlp| cross_entropy(y, m.predict(&r, &v, &c, &u).unwrap()).unwrap();
        let t = mlp.forward(&r, &v, &c, &u).unwrap();
        let mut grads = mlp.zeros_like();
        let dinput = mlp.backward(&t, cross_entropy_dlogit(y, &t), &mut grads);
        for k in 0..6 {
            let base = mlp.tensors()[k].1.to_vec();
            let num = finite_diff_grad(
                |flat| {
                    let mut probe = mlp.clone();
                    probe.tensors_mut()[k].1.copy_from_slice(flat);
                    loss(&probe)
                },
                &base,
                1e-5,
            )
            .unwrap();
            for (a, n) in grads.tensors()[k].1.iter().zip(num.iter()) {
                assert!(relative_error(*a, *n, 1e-7) < 1e-4, "{}: {a} vs {n}", mlp.tensors()[k].0);
            }
        }
        let num = finite_diff_grad(|rv| cross_entropy(y, mlp.predict(rv, &v, &c, &u).unwrap()).unwrap(), &r, 1e-5).unwrap();
        for (a, n) in dinput[..4].iter().zip(num.iter()) {
            assert!(relative_error(*a, *n, 1e-7) < 1e-4);
        }
    }
}
