//! End-to-end networks: HPMN and the sum-pooling baseline, plus checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BehaviorEvent, Sample, Schema};
use crate::embedding::EmbeddingTables;
use crate::error::{Error, Result};
use crate::hpmn::{covariance_loss, covariance_loss_backward, memory_covariance, MemoryNet, MemoryPool, UpdateSchedule};
use crate::numerics::{axpy, Vector};
use crate::predictor::{cross_entropy_dlogit, PredictorMlp};

/// One forward evaluation of a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Forward {
    pub prob: f64,
    /// Covariance regularizer of the final memory pool (0 for models without one).
    pub cov_loss: f64,
}

/// What the trainer needs from a model.
pub trait Network: Clone + Send + Sync + Serialize + DeserializeOwned {
    /// Tag stored in checkpoints.
    const KIND: &'static str;

    fn zeros_like(&self) -> Self;
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;
    fn forward(&self, sample: &Sample) -> Result<Forward>;

    /// Adds `d(CE + cov_weight · cov)/dθ` for `sample` into `grads`.
    fn accumulate_gradient(&self, sample: &Sample, cov_weight: f64, grads: &mut Self) -> Result<Forward>;

    fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).map(|v| v * v).sum()
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length");
    }

    /// `self += other`, tensor by tensor.
    fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(1.0, b, a);
        }
    }

    /// Short content hash identifying these exact parameters.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(Self::KIND.as_bytes());
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            h.update((t.len() as u64).to_le_bytes());
            for v in t {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub slot_dim: usize,
    pub periods: Vec<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { embed_dim: 16, slot_dim: 32, periods: vec![1, 2, 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpmnModel {
    pub tables: EmbeddingTables,
    pub memory: MemoryNet,
    pub head: PredictorMlp,
}

/// Everything `accumulate_gradient` needs from the forward pass.
struct HpmnTrace {
    pool: MemoryPool,
    seq: Option<crate::hpmn::SequenceTrace>,
    read: crate::hpmn::ReadTrace,
    head: crate::predictor::PredictTrace,
}

impl HpmnModel {
    pub fn init(schema: Schema, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        let tables = EmbeddingTables::init(schema, cfg.embed_dim, seed)?;
        let schedule = UpdateSchedule::new(cfg.periods.clone())?;
        let memory = MemoryNet::init(schedule, tables.event_width(), cfg.slot_dim, seed.wrapping_add(1))?;
        let head_in = cfg.slot_dim + tables.event_width() + tables.context_width() + tables.user_side_width();
        let head = PredictorMlp::init(head_in, seed.wrapping_add(2));
        Ok(HpmnModel { tables, memory, head })
    }

    pub fn schema(&self) -> &Schema {
        &self.tables.schema
    }

    pub fn embed_history(&self, events: &[BehaviorEvent]) -> Result<Vec<Vector>> {
        events.iter().map(|e| self.tables.embed_event(e)).collect()
    }

    /// Memory after the whole history; the zero pool for an empty history.
    pub fn memory_for(&self, events: &[BehaviorEvent]) -> Result<MemoryPool> {
        if events.is_empty() {
            return Ok(self.memory.empty_pool());
        }
        self.memory.run_sequence(&self.embed_history(events)?)
    }

    /// Reads `pool` with the target as query and predicts. Returns `(ŷ, attention weights)`.
    pub fn predict_from_pool(
        &self,
        pool: &MemoryPool,
        target: &BehaviorEvent,
        context: &[u32],
        user_side: &[u32],
    ) -> Result<(f64, Vector)> {
        let q = self.tables.embed_query(target)?;
        let c = self.tables.embed_context(context)?;
        let u = self.tables.embed_user_side(user_side)?;
        let read = self.memory.read(pool, &q)?;
        let prob = self.head.predict(&read.repr, &q, &c, &u)?;
        Ok((prob, read.weights))
    }

    /// Attention weights over slots for a sample.
    pub fn attention(&self, sample: &Sample) -> Result<Vector> {
        let pool = self.memory_for(&sample.sequence.events)?;
        Ok(self.predict_from_pool(&pool, &sample.target, &sample.context, &sample.sequence.user_side)?.1)
    }

    fn forward_traced(&self, sample: &Sample, events: &[Vector]) -> Result<HpmnTrace> {
        let (pool, seq) = if events.is_empty() {
            (self.memory.empty_pool(), None)
        } else {
            let (p, t) = self.memory.run_traced(events)?;
            (p, Some(t))
        };
        let q = self.tables.embed_query(&sample.target)?;
        let c = self.tables.embed_context(&sample.context)?;
        let u = self.tables.embed_user_side(&sample.sequence.user_side)?;
        let (readout, read) = self.memory.read_traced(&pool, &q)?;
        let head = self.head.forward(&readout.repr, &q, &c, &u)?;
        Ok(HpmnTrace { pool, seq, read, head })
    }

    /// Appends a memory layer with period `new_period`; see [`MemoryNet::expand`].
    pub fn expand(&mut self, new_period: u64, seed: u64) -> Result<()> {
        self.memory.expand(new_period, seed)
    }
}

impl Network for HpmnModel {
    const KIND: &'static str = "hpmn";

    fn zeros_like(&self) -> Self {
        HpmnModel { tables: self.tables.zeros_like(), memory: self.memory.zeros_like(), head: self.head.zeros_like() }
    }

    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.tables.tensors();
        out.extend(self.memory.tensors());
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.tables.tensors_mut();
        out.extend(self.memory.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }

    fn forward(&self, sample: &Sample) -> Result<Forward> {
        let pool = self.memory_for(&sample.sequence.events)?;
        let (prob, _) = self.predict_from_pool(&pool, &sample.target, &sample.context, &sample.sequence.user_side)?;
        Ok(Forward { prob, cov_loss: covariance_loss(&memory_covariance(&pool)) })
    }

    fn accumulate_gradient(&self, sample: &Sample, cov_weight: f64, grads: &mut Self) -> Result<Forward> {
        let events = self.embed_history(&sample.sequence.events)?;
        let t = self.forward_traced(sample, &events)?;
        let dlogit = cross_entropy_dlogit(sample.y(), &t.head);
        let dinput = self.head.backward(&t.head, dlogit, &mut grads.head);

        let p = self.memory.slot_dim();
        let ew = self.tables.event_width();
        let cw = self.tables.context_width();
        let (dr, rest) = dinput.split_at(p);
        let (dq_head, rest) = rest.split_at(ew);
        let (dc, du) = rest.split_at(cw);

        let (mut dslots, mut dq) = self.memory.backward_read(&t.read, dr, &mut grads.memory);
        axpy(1.0, dq_head, &mut dq);
        let (cov_loss, dcov) = covariance_loss_backward(&t.pool);
        if cov_weight != 0.0 {
            for (ds, dc) in dslots.iter_mut().zip(&dcov) {
                axpy(cov_weight, dc, ds);
            }
        }
        if let Some(seq) = &t.seq {
            let devents = self.memory.backward_sequence(seq, dslots, &mut grads.memory);
            for (e, g) in sample.sequence.events.iter().zip(&devents) {
                self.tables.scatter_event(e, g, &mut grads.tables);
            }
        }
        self.tables.scatter_event(&sample.target, &dq, &mut grads.tables);
        self.tables.scatter_context(&sample.context, dc, &mut grads.tables);
        self.tables.scatter_user_side(&sample.sequence.user_side, du, &mut grads.tables);
        Ok(Forward { prob: t.head.probability(), cov_loss })
    }
}

/// Feed-forward baseline: the history is summed into one vector, no order, no memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumPoolModel {
    pub tables: EmbeddingTables,
    pub head: PredictorMlp,
}

impl SumPoolModel {
    pub fn init(schema: Schema, embed_dim: usize, seed: u64) -> Result<Self> {
        schema.validate()?;
        let tables = EmbeddingTables::init(schema, embed_dim, seed)?;
        let head_in = 2 * tables.event_width() + tables.context_width() + tables.user_side_width();
        let head = PredictorMlp::init(head_in, seed.wrapping_add(2));
        Ok(SumPoolModel { tables, head })
    }

    fn pooled(&self, events: &[BehaviorEvent]) -> Result<Vector> {
        let mut sum = Vector::zeros(self.tables.event_width());
        for e in events {
            axpy(1.0, &self.tables.embed_event(e)?, &mut sum);
        }
        Ok(sum)
    }

    fn head_trace(&self, sample: &Sample) -> Result<crate::predictor::PredictTrace> {
        let pooled = self.pooled(&sample.sequence.events)?;
        let q = self.tables.embed_query(&sample.target)?;
        let c = self.tables.embed_context(&sample.context)?;
        let u = self.tables.embed_user_side(&sample.sequence.user_side)?;
        self.head.forward(&pooled, &q, &c, &u)
    }
}

impl Network for SumPoolModel {
    const KIND: &'static str = "sumpool";

    fn zeros_like(&self) -> Self {
        SumPoolModel { tables: self.tables.zeros_like(), head: self.head.zeros_like() }
    }

    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.tables.tensors();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.tables.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }

    fn forward(&self, sample: &Sample) -> Result<Forward> {
        Ok(Forward { prob: self.head_trace(sample)?.probability(), cov_loss: 0.0 })
    }

    fn accumulate_gradient(&self, sample: &Sample, _cov_weight: f64, grads: &mut Self) -> Result<Forward> {
        let t = self.head_trace(sample)?;
        let dinput = self.head.backward(&t, cross_entropy_dlogit(sample.y(), &t), &mut grads.head);
        let ew = self.tables.event_width();
        let (dpool, rest) = dinput.split_at(ew);
        let (dq, rest) = rest.split_at(ew);
        let (dc, du) = rest.split_at(self.tables.context_width());
        for e in &sample.sequence.events {
            self.tables.scatter_event(e, dpool, &mut grads.tables);
        }
        self.tables.scatter_event(&sample.target, dq, &mut grads.tables);
        self.tables.scatter_context(&sample.context, dc, &mut grads.tables);
        self.tables.scatter_user_side(&sample.sequence.user_side, du, &mut grads.tables);
        Ok(Forward { prob: t.probability(), cov_loss: 0.0 })
    }
}

const CHECKPOINT_FORMAT: &str = "hpmn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<M> {
    format: String,
    version: u32,
    kind: String,
    fingerprint: String,
    model: M,
}

pub fn save_checkpoint<M: Network>(path: &Path, model: &M) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: M::KIND.into(),
        fingerprint: model.fingerprint(),
        model,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &ck)?;
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

/// The model kind recorded in a checkpoint.
pub fn checkpoint_kind(path: &Path) -> Result<String> {
    let h: Header = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Ok(h.kind)
}

pub fn load_checkpoint<M: Network>(path: &Path) -> Result<M> {
    let bytes = std::fs::read(path)?;
    let h: Header = serde_json::from_slice(&bytes)?;
    if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!("{}: not a v{CHECKPOINT_VERSION} checkpoint", path.display())));
    }
    if h.kind != M::KIND {
        return Err(Error::Invalid(format!("{}: holds a `{}` model, expected `{}`", path.display(), h.kind, M::KIND)));
    }
    let ck: Checkpoint<M> = serde_json::from_slice(&bytes)?;
    if ck.model.fingerprint() != ck.fingerprint {
        return Err(Error::Invalid(format!("{}: parameter fingerprint mismatch", path.display())));
    }
    Ok(ck.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::numerics::{finite_diff_grad, relative_error};

    fn small() -> (SynthConfig, ModelConfig) {
        let synth = SynthConfig { n_users: 4, seq_len: 10, n_items: 20, n_cats: 4, seed: 2, ..Default::default() };
        (synth, ModelConfig { embed_dim: 3, slot_dim: 4, periods: vec![1, 2, 4] })
    }

    fn check_gradients<M: Network>(model: &M, samples: &[Sample], cov_weight: f64) {
        let mut grads = model.zeros_like();
        for s in samples {
            model.accumulate_gradient(s, cov_weight, &mut grads).unwrap();
        }
        let objective = |m: &M| -> f64 {
            samples
                .iter()
                .map(|s| {
                    let f = m.forward(s).unwrap();
                    crate::predictor::cross_entropy(s.y(), f.prob).unwrap() + cov_weight * f.cov_loss
                })
                .sum()
        };
        let flat = model.to_flat();
        let analytic = grads.to_flat();
        // probe a strided subset: the full sweep lives in the acceptance suite
        let mut probe = model.clone();
        let mut worst: f64 = 0.0;
        for k in (0..flat.len()).step_by(7) {
            let num = finite_diff_grad(
                |x| {
                    let mut f = flat.clone();
                    f[k] = x[0];
                    probe.load_flat(&f);
                    objective(&probe)
                },
                &[flat[k]],
                1e-5,
            )
            .unwrap()[0];
            worst = worst.max(relative_error(analytic[k], num, 1e-6));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn hpmn_gradients() {
        let (synth, cfg) = small();
        let samples = generate_synthetic(&synth).unwrap();
        let model = HpmnModel::init(synth.schema(), &cfg, 3).unwrap();
        check_gradients(&model, &samples, 0.7);
    }

    #[test]
    fn sumpool_gradients() {
        let (synth, _) = small();
        let samples = generate_synthetic(&synth).unwrap();
        let model = SumPoolModel::init(synth.schema(), 3, 3).unwrap();
        check_gradients(&model, &samples, 0.0);
    }

    #[test]
    fn forward_agrees_with_traced_path() {
        let (synth, cfg) = small();
        let samples = generate_synthetic(&synth).unwrap();
        let model = HpmnModel::init(synth.schema(), &cfg, 3).unwrap();
        let mut g = model.zeros_like();
        for s in &samples {
            assert_eq!(model.forward(s).unwrap(), model.accumulate_gradient(s, 1.0, &mut g).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (synth, cfg) = small();
        let model = HpmnModel::init(synth.schema(), &cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, &model).unwrap();
        let back: HpmnModel = load_checkpoint(&path).unwrap();
        let bits = |m: &HpmnModel| m.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
        assert_eq!(back, model);
        assert_eq!(checkpoint_kind(&path).unwrap(), "hpmn");
        assert!(load_checkpoint::<SumPoolModel>(&path).is_err());
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let (synth, cfg) = small();
        let a = HpmnModel::init(synth.schema(), &cfg, 9).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.head.layers[2].b[0] += 1e-9;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
