//! Mini-batch training with Adam, whole-model gradient checks and learning curves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ScoredSet};
use crate::model::{ModelConfig, Network};
use crate::numerics::relative_error;
use crate::predictor::{cross_entropy, total_loss};

/// Learning rates and regularization weights searched by the grid.
pub const LEARNING_RATE_GRID: [f64; 3] = [1e-4, 5e-3, 1e-3];
pub const REGULARIZATION_GRID: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Samples per gradient work unit. Fixed so that the reduction order, and
/// therefore every parameter bit, does not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Covariance regularization weight.
    pub lambda: f64,
    /// Parameter (L2) regularization weight.
    pub mu: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            lambda: 1e-3,
            mu: 1e-5,
            batch_size: 128,
            epochs: 5,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Invalid("regularization weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch: usize,
    /// Mean cross entropy over the batch.
    pub train_loss: f64,
    /// Full regularized objective of the batch.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: Vec<BatchLog>,
}

impl EpochLog {
    /// Sample-weighted mean of the running training loss.
    pub fn mean_train_loss(&self) -> f64 {
        self.batches.iter().map(|b| b.train_loss).sum::<f64>() / self.batches.len().max(1) as f64
    }
}

/// Loss and gradient of one batch under the full regularized objective.
pub struct BatchGradient<M> {
    pub grads: M,
    pub ce: Vec<f64>,
    pub cov: Vec<f64>,
    pub objective: f64,
}

/// Gradient of `Σ CE + λ · mean cov + ½ μ ‖θ‖²` over `batch`.
pub fn batch_gradient<M: Network>(model: &M, batch: &[Sample], lambda: f64, mu: f64) -> Result<BatchGradient<M>> {
    let cov_weight = if batch.is_empty() { 0.0 } else { lambda / batch.len() as f64 };
    let parts: Vec<Result<(M, Vec<f64>, Vec<f64>)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = model.zeros_like();
            let mut ce = Vec::with_capacity(chunk.len());
            let mut cov = Vec::with_capacity(chunk.len());
            for s in chunk {
                let f = model.accumulate_gradient(s, cov_weight, &mut g)?;
                ce.push(cross_entropy(s.y(), f.prob)?);
                cov.push(f.cov_loss);
            }
            Ok((g, ce, cov))
        })
        .collect();
    let mut grads = model.zeros_like();
    let mut ce = Vec::with_capacity(batch.len());
    let mut cov = Vec::with_capacity(batch.len());
    for part in parts {
        let (g, c, v) = part?;
        grads.add_assign(&g);
        ce.extend(c);
        cov.extend(v);
    }
    if mu != 0.0 {
        for ((_, g), (_, p)) in grads.tensors_mut().into_iter().zip(model.tensors()) {
            crate::numerics::axpy(mu, p, g);
        }
    }
    let objective = total_loss(&ce, &cov, model.squared_norm(), lambda, mu);
    Ok(BatchGradient { grads, ce, cov, objective })
}

/// Objective value only (used by finite differences).
pub fn batch_objective<M: Network>(model: &M, batch: &[Sample], lambda: f64, mu: f64) -> Result<f64> {
    let mut ce = Vec::with_capacity(batch.len());
    let mut cov = Vec::with_capacity(batch.len());
    for s in batch {
        let f = model.forward(s)?;
        ce.push(cross_entropy(s.y(), f.prob)?);
        cov.push(f.cov_loss);
    }
    Ok(total_loss(&ce, &cov, model.squared_norm(), lambda, mu))
}

pub struct Trainer<M> {
    pub model: M,
    pub cfg: TrainConfig,
    adam: Adam,
    epoch: usize,
}

impl<M: Network> Trainer<M> {
    pub fn new(model: M, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.num_parameters());
        Ok(Trainer { model, cfg, adam, epoch: 0 })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One shuffled pass over `dataset`.
    pub fn train_epoch(&mut self, dataset: &[Sample]) -> Result<EpochLog> {
        if dataset.is_empty() {
            return Err(Error::Empty("train_epoch"));
        }
        self.epoch += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        let mut batches = Vec::new();
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let bg = batch_gradient(&self.model, &batch, self.cfg.lambda, self.cfg.mu)?;
            if !bg.objective.is_finite() {
                return Err(Error::NonFiniteLoss { batch: b });
            }
            let mut flat = self.model.to_flat();
            self.adam.update(&mut flat, &bg.grads.to_flat(), self.cfg.learning_rate);
            self.model.load_flat(&flat);
            batches.push(BatchLog {
                batch: b,
                train_loss: bg.ce.iter().sum::<f64>() / bg.ce.len() as f64,
                objective: bg.objective,
            });
        }
        Ok(EpochLog { epoch: self.epoch, batches })
    }
}

/// Scores every sample.
pub fn score<M: Network>(model: &M, samples: &[Sample]) -> Result<ScoredSet> {
    let probs: Vec<f64> = samples.par_iter().map(|s| model.forward(s).map(|f| f.prob)).collect::<Result<_>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    ScoredSet::new(&labels, &probs)
}

pub fn evaluate<M: Network>(model: &M, samples: &[Sample]) -> Result<MetricsReport> {
    MetricsReport::from_scored(&score(model, samples)?)
}

/// Mean per-sample cross entropy of `model` on `samples`.
pub fn mean_cross_entropy<M: Network>(model: &M, samples: &[Sample]) -> Result<f64> {
    Ok(crate::eval::logloss(&score(model, samples)?)? / samples.len() as f64)
}

/// One row of the learning-curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub batch: usize,
    pub train_loss: f64,
    pub test_logloss: Option<f64>,
    pub test_auc: Option<f64>,
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,batch,train_loss,test_logloss,test_auc")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.batch, r.train_loss, opt(r.test_logloss), opt(r.test_auc))?;
    }
    w.flush()?;
    Ok(())
}

pub struct FitResult<M> {
    /// Model of the epoch with the best test AUC.
    pub best: M,
    pub best_epoch: usize,
    pub last: M,
    pub epochs: Vec<EpochLog>,
    /// Per-epoch test metrics (mean log-loss per sample, AUC).
    pub test: Vec<MetricsReport>,
    pub curve: Vec<CurveRow>,
}

/// Trains for `cfg.epochs`, evaluating on `test` after each epoch.
pub fn fit<M: Network>(model: M, train: &[Sample], test: &[Sample], cfg: &TrainConfig) -> Result<FitResult<M>> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut best: Option<(f64, usize, M)> = None;
    let mut epochs = Vec::new();
    let mut tests = Vec::new();
    let mut curve = Vec::new();
    for _ in 0..cfg.epochs {
        let log = trainer.train_epoch(train)?;
        let report = evaluate(&trainer.model, test)?;
        let n = log.batches.len();
        for b in &log.batches {
            let last = b.batch + 1 == n;
            curve.push(CurveRow {
                epoch: log.epoch,
                batch: b.batch,
                train_loss: b.train_loss,
                test_logloss: last.then(|| report.logloss / report.n as f64),
                test_auc: last.then_some(report.auc),
            });
        }
        log::info!(
            "epoch {}: train loss {:.4}, test auc {:.4}, test logloss {:.4}",
            log.epoch,
            log.mean_train_loss(),
            report.auc,
            report.logloss / report.n as f64
        );
        if best.as_ref().map_or(true, |(auc, _, _)| report.auc > *auc) {
            best = Some((report.auc, log.epoch, trainer.model.clone()));
        }
        epochs.push(log);
        tests.push(report);
    }
    let (_, best_epoch, best) = best.ok_or(Error::Invalid("zero epochs".into()))?;
    Ok(FitResult { best, best_epoch, last: trainer.model, epochs, test: tests, curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_analytic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Finite-difference step for gradient checks.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of the full objective on `batch` against
/// central differences, entry by entry.
pub fn grad_check_model<M: Network>(model: &M, batch: &[Sample], lambda: f64, mu: f64, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = batch_gradient(model, batch, lambda, mu)?.grads;
    compare_gradients(model, &analytic, batch, lambda, mu, tolerance)
}

/// Finite-difference check of a supplied gradient.
pub fn compare_gradients<M: Network>(
    model: &M,
    analytic: &M,
    batch: &[Sample],
    lambda: f64,
    mu: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let names: Vec<(String, usize)> = model.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let analytic_flat = analytic.to_flat();
    let base = model.to_flat();
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(names.len());
    for (name, len) in names {
        let range = offset..offset + len;
        offset += len;
        let errors: Vec<(f64, f64, f64)> = range
            .into_par_iter()
            .map(|k| -> Result<(f64, f64, f64)> {
                let mut probe = model.clone();
                let mut flat = base.clone();
                let mut eval = |x: f64| -> Result<f64> {
                    flat[k] = x;
                    probe.load_flat(&flat);
                    batch_objective(&probe, batch, lambda, mu)
                };
                let up = eval(base[k] + GRADCHECK_STEP)?;
                let down = eval(base[k] - GRADCHECK_STEP)?;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::NonFinite { coordinate: k });
                }
                let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
                let a = analytic_flat[k];
                Ok((relative_error(a, numeric, GRADCHECK_FLOOR), (a - numeric).abs(), a.abs()))
            })
            .collect::<Result<_>>()?;
        tensors.push(TensorCheck {
            name,
            len,
            max_rel_error: errors.iter().map(|e| e.0).fold(0.0, f64::max),
            max_abs_error: errors.iter().map(|e| e.1).fold(0.0, f64::max),
            max_analytic: errors.iter().map(|e| e.2).fold(0.0, f64::max),
        });
    }
    Ok(GradCheckReport { tolerance, step: GRADCHECK_STEP, tensors })
}
