//! Hierarchical periodic memory: D GRU layers, each owning one memory slot and
//! refreshing it every `t^j` behaviors, read back through an attention over slots.
//!
//! Layer `j > 0` takes the current-step value of slot `j - 1` as its input;
//! layer 0 takes the embedded behavior. Due layers are processed in ascending
//! order, so a layer always sees the value its lower neighbour wrote in the
//! same step. Layers that are not due copy their slot forward untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    activate, activate_backward, affine, affine_backward, axpy, concat, dot, matvec, softmax, softmax_backward,
    Activation, Matrix, Vector, RELU_BIAS_INIT,
};

/// Width of the energy network's hidden layer.
pub const ENERGY_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    periods: Vec<u64>,
}

impl UpdateSchedule {
    pub fn new(periods: Vec<u64>) -> Result<Self> {
        match periods.first() {
            None => return Err(Error::Invalid("schedule needs at least one layer".into())),
            Some(&p) if p != 1 => return Err(Error::Invalid(format!("first period must be 1, got {p}"))),
            _ => {}
        }
        if periods.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid(format!("periods must be non-decreasing: {periods:?}")));
        }
        Ok(UpdateSchedule { periods })
    }

    /// Periods `1, 2, 4, ..., 2^(depth-1)`.
    pub fn exponential(depth: usize) -> Result<Self> {
        UpdateSchedule::new((0..depth).map(|j| 1u64 << j).collect())
    }

    pub fn periods(&self) -> &[u64] {
        &self.periods
    }

    pub fn depth(&self) -> usize {
        self.periods.len()
    }

    pub fn is_due(&self, layer: usize, step: u64) -> bool {
        step % self.periods[layer] == 0
    }

    /// Zero-based indices of the layers refreshed at 1-based step `step`, ascending.
    pub fn layers_due(&self, step: u64) -> Vec<usize> {
        (0..self.depth()).filter(|&j| self.is_due(j, step)).collect()
    }
}

/// Per-user memory: one `p`-dimensional slot per layer plus the behavior counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryPool {
    pub slots: Vec<Vector>,
    pub step: u64,
}

impl MemoryPool {
    pub fn zeros(depth: usize, slot_dim: usize) -> Self {
        MemoryPool { slots: vec![Vector::zeros(slot_dim); depth], step: 0 }
    }

    pub fn depth(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_dim(&self) -> usize {
        self.slots.first().map_or(0, |s| s.len())
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(Vector::is_finite)
    }
}

/// GRU cell parameters of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Vector,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Vector,
    pub w_m: Matrix,
    pub u_m: Matrix,
    pub b_m: Vector,
}

/// Intermediate values of one cell application, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruTrace {
    input: Vector,
    prev: Vector,
    z: Vector,
    r: Vector,
    cand: Vector,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite by construction")
}

impl GruLayer {
    pub fn zeros(input_width: usize, slot_dim: usize) -> Self {
        let w = || Matrix::zeros(slot_dim, input_width);
        let u = || Matrix::zeros(slot_dim, slot_dim);
        let b = || Vector::zeros(slot_dim);
        GruLayer { w_z: w(), u_z: u(), b_z: b(), w_r: w(), u_r: u(), b_r: b(), w_m: w(), u_m: u(), b_m: b() }
    }

    pub fn init(input_width: usize, slot_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (slot_dim as f64).sqrt();
        let mut g = GruLayer::zeros(input_width, slot_dim);
        for m in [&mut g.w_z, &mut g.u_z, &mut g.w_r, &mut g.u_r, &mut g.w_m, &mut g.u_m] {
            *m = uniform_matrix(rng, m.rows(), m.cols(), s);
        }
        g
    }

    pub fn input_width(&self) -> usize {
        self.w_z.cols()
    }

    pub fn slot_dim(&self) -> usize {
        self.u_z.rows()
    }

    /// `(1 - z) ⊙ prev + z ⊙ tanh(W_m x + U_m (r ⊙ prev) + b_m)`.
    pub fn forward(&self, input: &[f64], prev: &[f64]) -> Result<Vector> {
        self.forward_traced(input, prev).map(|(out, _)| out)
    }

    fn gate(w: &Matrix, u: &Matrix, b: &[f64], x: &[f64], h: &[f64]) -> Result<Vector> {
        let mut a = affine(w, x, b)?;
        axpy(1.0, &matvec(u, h)?, &mut a);
        Ok(activate(Activation::Sigmoid, &a))
    }

    pub fn forward_traced(&self, input: &[f64], prev: &[f64]) -> Result<(Vector, GruTrace)> {
        if prev.len() != self.slot_dim() {
            return Err(Error::Shape { op: "gru_cell", left: self.u_z.shape(), right: (prev.len(), 1) });
        }
        let z = Self::gate(&self.w_z, &self.u_z, &self.b_z, input, prev)?;
        let r = Self::gate(&self.w_r, &self.u_r, &self.b_r, input, prev)?;
        let gated: Vec<f64> = r.iter().zip(prev).map(|(a, b)| a * b).collect();
        let mut a_m = affine(&self.w_m, input, &self.b_m)?;
        axpy(1.0, &matvec(&self.u_m, &gated)?, &mut a_m);
        let cand = activate(Activation::Tanh, &a_m);
        let out: Vector = (0..prev.len()).map(|k| (1.0 - z[k]) * prev[k] + z[k] * cand[k]).collect();
        let trace = GruTrace { input: input.into(), prev: prev.into(), z, r, cand };
        Ok((out, trace))
    }

    /// Accumulates parameter gradients into `grads`, adds `d input` into `dinput`
    /// and returns `d prev`.
    pub fn backward(&self, t: &GruTrace, dout: &[f64], grads: &mut GruLayer, dinput: &mut [f64]) -> Vector {
        let p = self.slot_dim();
        let mut dprev: Vector = (0..p).map(|k| dout[k] * (1.0 - t.z[k])).collect();
        let dz: Vec<f64> = (0..p).map(|k| dout[k] * (t.cand[k] - t.prev[k])).collect();
        let dcand: Vec<f64> = (0..p).map(|k| dout[k] * t.z[k]).collect();

        let da_m = activate_backward(Activation::Tanh, &t.cand, &dcand);
        let gated: Vec<f64> = t.r.iter().zip(t.prev.iter()).map(|(a, b)| a * b).collect();
        affine_backward(&self.w_m, &t.input, &da_m, &mut grads.w_m, Some(&mut grads.b_m), Some(dinput));
        let mut dgated = vec![0.0; p];
        affine_backward(&self.u_m, &gated, &da_m, &mut grads.u_m, None, Some(&mut dgated));
        let dr: Vec<f64> = (0..p).map(|k| dgated[k] * t.prev[k]).collect();
        for k in 0..p {
            dprev[k] += dgated[k] * t.r[k];
        }

        let da_r = activate_backward(Activation::Sigmoid, &t.r, &dr);
        affine_backward(&self.w_r, &t.input, &da_r, &mut grads.w_r, Some(&mut grads.b_r), Some(dinput));
        affine_backward(&self.u_r, &t.prev, &da_r, &mut grads.u_r, None, Some(&mut dprev));

        let da_z = activate_backward(Activation::Sigmoid, &t.z, &dz);
        affine_backward(&self.w_z, &t.input, &da_z, &mut grads.w_z, Some(&mut grads.b_z), Some(dinput));
        affine_backward(&self.u_z, &t.prev, &da_z, &mut grads.u_z, None, Some(&mut dprev));
        dprev
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 9] {
        [
            ("w_z", self.w_z.as_mut_slice()),
            ("u_z", self.u_z.as_mut_slice()),
            ("b_z", &mut self.b_z),
            ("w_r", self.w_r.as_mut_slice()),
            ("u_r", self.u_r.as_mut_slice()),
            ("b_r", &mut self.b_r),
            ("w_m", self.w_m.as_mut_slice()),
            ("u_m", self.u_m.as_mut_slice()),
            ("b_m", &mut self.b_m),
        ]
    }

    fn tensors(&self) -> [(&'static str, &[f64]); 9] {
        [
            ("w_z", self.w_z.as_slice()),
            ("u_z", self.u_z.as_slice()),
            ("b_z", &self.b_z),
            ("w_r", self.w_r.as_slice()),
            ("u_r", self.u_r.as_slice()),
            ("b_r", &self.b_r),
            ("w_m", self.w_m.as_slice()),
            ("u_m", self.u_m.as_slice()),
            ("b_m", &self.b_m),
        ]
    }
}

/// Scores a `(slot, query)` pair: `w2 · relu(W1 [m; q] + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyNet {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl EnergyNet {
    pub fn init(input_width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        EnergyNet {
            w1: uniform_matrix(rng, hidden, input_width, 1.0 / (input_width as f64).sqrt()),
            b1: vec![RELU_BIAS_INIT; hidden].into(),
            w2: uniform_matrix(rng, 1, hidden, 1.0 / (hidden as f64).sqrt()),
            b2: Vector::zeros(1),
        }
    }

    pub fn energy(&self, slot: &[f64], query: &[f64]) -> Result<f64> {
        let hidden = activate(Activation::Relu, &affine(&self.w1, &concat(&[slot, query]), &self.b1)?);
        Ok(affine(&self.w2, &hidden, &self.b2)?[0])
    }
}

/// The memory half of the model: schedule, per-layer cells and the reader.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryNet {
    pub schedule: UpdateSchedule,
    pub layers: Vec<GruLayer>,
    pub energy: EnergyNet,
}

/// Every cell application of a sequence in execution order.
#[derive(Clone, Debug, Default)]
pub struct SequenceTrace {
    updates: Vec<(usize, usize, GruTrace)>,
    len: usize,
}

impl SequenceTrace {
    /// Number of cell applications per layer.
    pub fn update_counts(&self, depth: usize) -> Vec<usize> {
        let mut counts = vec![0; depth];
        for (_, layer, _) in &self.updates {
            counts[*layer] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// Attention-weighted user representation.
    pub repr: Vector,
    pub weights: Vector,
}

#[derive(Clone, Debug)]
pub struct ReadTrace {
    inputs: Vec<Vector>,
    hidden: Vec<Vector>,
    weights: Vector,
}

impl MemoryNet {
    pub fn init(schedule: UpdateSchedule, event_width: usize, slot_dim: usize, seed: u64) -> Result<Self> {
        if slot_dim == 0 || event_width == 0 {
            return Err(Error::Invalid("slot and event widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..schedule.depth())
            .map(|j| GruLayer::init(if j == 0 { event_width } else { slot_dim }, slot_dim, &mut rng))
            .collect();
        let energy = EnergyNet::init(slot_dim + event_width, ENERGY_HIDDEN, &mut rng);
        Ok(MemoryNet { schedule, layers, energy })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn slot_dim(&self) -> usize {
        self.layers[0].slot_dim()
    }

    pub fn event_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn empty_pool(&self) -> MemoryPool {
        MemoryPool::zeros(self.depth(), self.slot_dim())
    }

    fn check_pool(&self, pool: &MemoryPool) -> Result<()> {
        if pool.depth() != self.depth() || pool.slot_dim() != self.slot_dim() {
            return Err(Error::Shape {
                op: "memory pool",
                left: (self.depth(), self.slot_dim()),
                right: (pool.depth(), pool.slot_dim()),
            });
        }
        Ok(())
    }

    fn advance_inner(&self, pool: &mut MemoryPool, event: &[f64], mut trace: Option<&mut SequenceTrace>) -> Result<()> {
        self.check_pool(pool)?;
        if event.len() != self.event_width() {
            return Err(Error::Shape { op: "step", left: (self.event_width(), 1), right: (event.len(), 1) });
        }
        let i = pool.step + 1;
        let t_index = trace.as_ref().map_or(0, |t| t.len);
        for j in self.schedule.layers_due(i) {
            let input = if j == 0 { event } else { &pool.slots[j - 1][..] };
            let (out, gt) = self.layers[j].forward_traced(input, &pool.slots[j])?;
            pool.slots[j] = out;
            if let Some(t) = trace.as_deref_mut() {
                t.updates.push((t_index, j, gt));
            }
        }
        if let Some(t) = trace {
            t.len += 1;
        }
        pool.step = i;
        Ok(())
    }

    /// Applies one behavior to `pool` in place.
    pub fn advance(&self, pool: &mut MemoryPool, event: &[f64]) -> Result<()> {
        self.advance_inner(pool, event, None)
    }

    pub fn step(&self, pool: &MemoryPool, event: &[f64]) -> Result<MemoryPool> {
        let mut next = pool.clone();
        self.advance(&mut next, event)?;
        Ok(next)
    }

    /// Folds `step` over `events` starting from the zero pool.
    pub fn run_sequence(&self, events: &[Vector]) -> Result<MemoryPool> {
        if events.is_empty() {
            return Err(Error::Empty("run_sequence"));
        }
        let mut pool = self.empty_pool();
        for e in events {
            self.advance(&mut pool, e)?;
        }
        Ok(pool)
    }

    pub fn run_traced(&self, events: &[Vector]) -> Result<(MemoryPool, SequenceTrace)> {
        if events.is_empty() {
            return Err(Error::Empty("run_sequence"));
        }
        let mut pool = self.empty_pool();
        let mut trace = SequenceTrace::default();
        for e in events {
            self.advance_inner(&mut pool, e, Some(&mut trace))?;
        }
        Ok((pool, trace))
    }

    /// Backpropagates `dslots` (gradient w.r.t. the final pool) through every
    /// recorded update. Returns the gradient w.r.t. each event vector.
    pub fn backward_sequence(&self, trace: &SequenceTrace, mut dslots: Vec<Vector>, grads: &mut MemoryNet) -> Vec<Vector> {
        let mut devents = vec![Vector::zeros(self.event_width()); trace.len];
        for (t, j, gt) in trace.updates.iter().rev() {
            let (t, j) = (*t, *j);
            let dout = std::mem::take(&mut dslots[j]);
            let dprev = if j == 0 {
                self.layers[0].backward(gt, &dout, &mut grads.layers[0], &mut devents[t])
            } else {
                let (lower, _) = dslots.split_at_mut(j);
                self.layers[j].backward(gt, &dout, &mut grads.layers[j], &mut lower[j - 1])
            };
            dslots[j] = dprev;
        }
        devents
    }

    pub fn read(&self, pool: &MemoryPool, query: &[f64]) -> Result<Readout> {
        self.read_traced(pool, query).map(|(r, _)| r)
    }

    pub fn read_traced(&self, pool: &MemoryPool, query: &[f64]) -> Result<(Readout, ReadTrace)> {
        self.check_pool(pool)?;
        let mut inputs = Vec::with_capacity(pool.depth());
        let mut hidden = Vec::with_capacity(pool.depth());
        let mut energies = Vec::with_capacity(pool.depth());
        for slot in &pool.slots {
            let x = concat(&[slot, query]);
            let h = activate(Activation::Relu, &affine(&self.energy.w1, &x, &self.energy.b1)?);
            energies.push(affine(&self.energy.w2, &h, &self.energy.b2)?[0]);
            inputs.push(x);
            hidden.push(h);
        }
        let weights = softmax(&energies)?;
        let mut repr = Vector::zeros(self.slot_dim());
        for (w, slot) in weights.iter().zip(&pool.slots) {
            axpy(*w, slot, &mut repr);
        }
        Ok((Readout { repr, weights: weights.clone() }, ReadTrace { inputs, hidden, weights }))
    }

    /// Returns `(d slots, d query)` and accumulates energy-net gradients.
    pub fn backward_read(&self, t: &ReadTrace, dr: &[f64], grads: &mut MemoryNet) -> (Vec<Vector>, Vector) {
        let p = self.slot_dim();
        let mut dslots: Vec<Vector> = Vec::with_capacity(t.inputs.len());
        let mut dw = Vec::with_capacity(t.inputs.len());
        for (w, x) in t.weights.iter().zip(&t.inputs) {
            let slot = &x[..p];
            dslots.push(dr.iter().map(|g| g * w).collect());
            dw.push(dot(dr, slot));
        }
        let de = softmax_backward(&t.weights, &dw);
        let mut dquery = Vector::zeros(t.inputs[0].len() - p);
        for (j, (x, h)) in t.inputs.iter().zip(&t.hidden).enumerate() {
            let mut dh = vec![0.0; h.len()];
            affine_backward(&self.energy.w2, h, &[de[j]], &mut grads.energy.w2, Some(&mut grads.energy.b2), Some(&mut dh));
            let dpre = activate_backward(Activation::Relu, h, &dh);
            let mut dx = vec![0.0; x.len()];
            affine_backward(&self.energy.w1, x, &dpre, &mut grads.energy.w1, Some(&mut grads.energy.b1), Some(&mut dx));
            axpy(1.0, &dx[..p], &mut dslots[j]);
            axpy(1.0, &dx[p..], &mut dquery);
        }
        (dslots, dquery)
    }

    /// Appends a freshly initialized top layer with period `new_period`.
    pub fn expand(&mut self, new_period: u64, seed: u64) -> Result<()> {
        let top = *self.schedule.periods().last().expect("non-empty schedule");
        if new_period < top {
            return Err(Error::Invalid(format!("new period {new_period} is below the top period {top}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.slot_dim();
        self.layers.push(GruLayer::init(p, p, &mut rng));
        self.schedule.periods.push(new_period);
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (j, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("gru{}.{name}", j + 1), t));
            }
        }
        let e = &self.energy;
        out.push(("energy.w1".into(), e.w1.as_slice()));
        out.push(("energy.b1".into(), &e.b1[..]));
        out.push(("energy.w2".into(), e.w2.as_slice()));
        out.push(("energy.b2".into(), &e.b2[..]));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (j, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("gru{}.{name}", j + 1), t));
            }
        }
        let e = &mut self.energy;
        out.push(("energy.w1".into(), e.w1.as_mut_slice()));
        out.push(("energy.b1".into(), &mut e.b1[..]));
        out.push(("energy.w2".into(), e.w2.as_mut_slice()));
        out.push(("energy.b2".into(), &mut e.b2[..]));
        out
    }
}

/// Expands a pool and its network together; slots and layers `1..D` are untouched.
pub fn expand(pool: &MemoryPool, net: &MemoryNet, new_period: u64, seed: u64) -> Result<(MemoryPool, MemoryNet)> {
    let mut net = net.clone();
    net.expand(new_period, seed)?;
    let mut pool = pool.clone();
    pool.slots.push(Vector::zeros(net.slot_dim()));
    Ok((pool, net))
}

fn centered_slots(pool: &MemoryPool) -> Vec<Vec<f64>> {
    let p = pool.slot_dim() as f64;
    pool.slots
        .iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / p;
            s.iter().map(|v| v - mean).collect()
        })
        .collect()
}

/// `C = (1/p) (M - M̄)(M - M̄)ᵀ` with `M̄` the per-slot (row) mean.
pub fn memory_covariance(pool: &MemoryPool) -> Matrix {
    let d = pool.depth();
    let p = pool.slot_dim() as f64;
    let x = centered_slots(pool);
    let mut c = Matrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = dot(&x[a], &x[b]) / p;
            c.set(a, b, v);
            c.set(b, a, v);
        }
    }
    c
}

/// Half the squared Frobenius norm of `C` without its diagonal.
pub fn covariance_loss(c: &Matrix) -> f64 {
    let mut s = 0.0;
    for a in 0..c.rows() {
        for b in 0..c.cols() {
            if a != b {
                s += c.get(a, b) * c.get(a, b);
            }
        }
    }
    0.5 * s
}

/// Covariance loss of `pool` and its gradient w.r.t. every slot.
pub fn covariance_loss_backward(pool: &MemoryPool) -> (f64, Vec<Vector>) {
    let d = pool.depth();
    let p = pool.slot_dim() as f64;
    let c = memory_covariance(pool);
    let x = centered_slots(pool);
    // dL/dX_a = (2/p) sum_{b != a} C_ab X_b, then project out each row mean
    let grads = (0..d)
        .map(|a| {
            let mut dx = vec![0.0; pool.slot_dim()];
            for b in (0..d).filter(|&b| b != a) {
                axpy(2.0 * c.get(a, b) / p, &x[b], &mut dx);
            }
            let mean = dx.iter().sum::<f64>() / p;
            dx.iter().map(|v| v - mean).collect()
        })
        .collect();
    (covariance_loss(&c), grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, sigmoid};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_pool(rng: &mut ChaCha8Rng, d: usize, p: usize) -> MemoryPool {
        MemoryPool { slots: (0..d).map(|_| random_vec(rng, p)).collect(), step: 0 }
    }

    fn due_1based(s: &UpdateSchedule, i: u64) -> Vec<usize> {
        s.layers_due(i).into_iter().map(|j| j + 1).collect()
    }

    #[test]
    fn schedule_due_sets() {
        let s = UpdateSchedule::new(vec![1, 2, 4]).unwrap();
        assert_eq!(due_1based(&s, 3), vec![1]);
        assert_eq!(due_1based(&s, 4), vec![1, 2, 3]);
        let xlong = UpdateSchedule::new(vec![1, 2, 4, 8, 16, 32]).unwrap();
        assert_eq!(due_1based(&xlong, 32), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(UpdateSchedule::exponential(3).unwrap(), s);
        assert!(UpdateSchedule::new(vec![]).is_err());
        assert!(UpdateSchedule::new(vec![2, 4]).is_err());
        assert!(UpdateSchedule::new(vec![1, 4, 2]).is_err());
    }

    // Scalar transcription of the gated update, element by element.
    fn gru_oracle(g: &GruLayer, x: &[f64], h: &[f64]) -> Vec<f64> {
        let p = h.len();
        let lin = |w: &Matrix, u: &Matrix, b: &[f64], k: usize, hh: &[f64]| {
            let mut acc = b[k];
            for c in 0..x.len() {
                acc += w.get(k, c) * x[c];
            }
            for c in 0..p {
                acc += u.get(k, c) * hh[c];
            }
            acc
        };
        let z: Vec<f64> = (0..p).map(|k| sigmoid(lin(&g.w_z, &g.u_z, &g.b_z, k, h))).collect();
        let r: Vec<f64> = (0..p).map(|k| sigmoid(lin(&g.w_r, &g.u_r, &g.b_r, k, h))).collect();
        let rh: Vec<f64> = (0..p).map(|k| r[k] * h[k]).collect();
        (0..p).map(|k| (1.0 - z[k]) * h[k] + z[k] * lin(&g.w_m, &g.u_m, &g.b_m, k, &rh).tanh()).collect()
    }

    #[test]
    fn gru_cell_cases() {
        let prev = [0.4, -1.0, 2.0];
        let g = GruLayer::zeros(2, 3);
        let out = g.forward(&[1.0, 1.0], &prev).unwrap();
        assert_eq!(&*out, &[0.2, -0.5, 1.0]);

        let mut g = GruLayer::zeros(2, 3);
        g.b_z = Vector::from(vec![10.0; 3]);
        let out = g.forward(&[1.0, 1.0], &prev).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-4), "{out:?}");

        let mut r = rng(1);
        let g = GruLayer::init(5, 4, &mut r);
        let (x, h) = (random_vec(&mut r, 5), random_vec(&mut r, 4));
        let out = g.forward(&x, &h).unwrap();
        for (a, b) in out.iter().zip(gru_oracle(&g, &x, &h)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.forward(&x, &h[..3]).is_err());
        assert!(g.forward(&x[..4], &h).is_err());
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let mut r = rng(2);
        let g = GruLayer::init(3, 4, &mut r);
        let (x, h) = (random_vec(&mut r, 3), random_vec(&mut r, 4));
        let proj = random_vec(&mut r, 4);
        let (_, t) = g.forward_traced(&x, &h).unwrap();
        let mut grads = GruLayer::zeros(3, 4);
        let mut dx = vec![0.0; 3];
        let dh = g.backward(&t, &proj, &mut grads, &mut dx);

        let nx = finite_diff_grad(|x| dot(&proj, &g.forward(x, &h).unwrap()), &x, 1e-5).unwrap();
        let nh = finite_diff_grad(|h| dot(&proj, &g.forward(&x, h).unwrap()), &h, 1e-5).unwrap();
        for (a, n) in dx.iter().zip(nx.iter()).chain(dh.iter().zip(nh.iter())) {
            assert!(relative_error(*a, *n, 1e-7) < 1e-6);
        }
        let names: Vec<&str> = g.tensors().iter().map(|(n, _)| *n).collect();
        for (k, name) in names.iter().enumerate() {
            let base: Vec<f64> = g.tensors()[k].1.to_vec();
            let num = finite_diff_grad(
                |flat| {
                    let mut probe = g.clone();
                    probe.tensors_mut()[k].1.copy_from_slice(flat);
                    dot(&proj, &probe.forward(&x, &h).unwrap())
                },
                &base,
                1e-5,
            )
            .unwrap();
            for (a, n) in grads.tensors()[k].1.iter().zip(num.iter()) {
                assert!(relative_error(*a, *n, 1e-7) < 1e-6, "{name}: {a} vs {n}");
            }
        }
    }

    fn zero_net(periods: Vec<u64>, width: usize, p: usize) -> MemoryNet {
        let net = MemoryNet::init(UpdateSchedule::new(periods).unwrap(), width, p, 0).unwrap();
        net.zeros_like()
    }

    #[test]
    fn step_respects_periods() {
        let net = MemoryNet::init(UpdateSchedule::new(vec![1, 2]).unwrap(), 3, 4, 5).unwrap();
        let mut r = rng(3);
        let e1 = random_vec(&mut r, 3);
        let e2 = random_vec(&mut r, 3);
        let pool1 = net.step(&net.empty_pool(), &e1).unwrap();
        assert_eq!(pool1.step, 1);
        assert!(pool1.slots[1].iter().all(|&v| v == 0.0));
        assert!(pool1.slots[0].iter().any(|&v| v != 0.0));

        let zero = zero_net(vec![1, 2], 3, 4);
        let z1 = zero.step(&zero.empty_pool(), &e1).unwrap();
        assert!(z1.slots.iter().all(|s| s.iter().all(|&v| v == 0.0)));

        // hand-unrolled two steps: slot 2 consumes slot 1's value from the same step
        let pool2 = net.step(&pool1, &e2).unwrap();
        let s1_a = net.layers[0].forward(&e1, &[0.0; 4]).unwrap();
        let s1_b = net.layers[0].forward(&e2, &s1_a).unwrap();
        let s2_b = net.layers[1].forward(&s1_b, &[0.0; 4]).unwrap();
        assert_eq!(pool2.slots[0], s1_b);
        assert_eq!(pool2.slots[1], s2_b);
        let stale = net.layers[1].forward(&s1_a, &[0.0; 4]).unwrap();
        assert_ne!(pool2.slots[1], stale);
    }

    #[test]
    fn run_sequence_is_iterated_step() {
        let net = MemoryNet::init(UpdateSchedule::exponential(3).unwrap(), 3, 4, 6).unwrap();
        let mut r = rng(4);
        let events: Vec<Vector> = (0..23).map(|_| random_vec(&mut r, 3)).collect();
        assert!(net.run_sequence(&[]).is_err());
        assert_eq!(net.run_sequence(&events[..1]).unwrap(), net.step(&net.empty_pool(), &events[0]).unwrap());
        let mut pool = net.empty_pool();
        for e in &events {
            pool = net.step(&pool, e).unwrap();
        }
        assert_eq!(net.run_sequence(&events).unwrap(), pool);
        let (traced, _) = net.run_traced(&events).unwrap();
        assert_eq!(traced, pool);
    }

    #[test]
    fn update_counts_follow_floor_law() {
        let net = MemoryNet::init(UpdateSchedule::new(vec![1, 2, 4, 12]).unwrap(), 2, 2, 1).unwrap();
        let mut r = rng(5);
        for t in [1usize, 5, 12, 37, 64] {
            let events: Vec<Vector> = (0..t).map(|_| random_vec(&mut r, 2)).collect();
            let (_, trace) = net.run_traced(&events).unwrap();
            let expected: Vec<usize> = net.schedule.periods().iter().map(|&p| t / p as usize).collect();
            assert_eq!(trace.update_counts(4), expected);
        }
    }

    #[test]
    fn read_cases() {
        let mut r = rng(7);
        let net = MemoryNet::init(UpdateSchedule::exponential(3).unwrap(), 3, 4, 8).unwrap();
        let slot = random_vec(&mut r, 4);
        let same = MemoryPool { slots: vec![slot.clone(); 3], step: 0 };
        let out = net.read(&same, &random_vec(&mut r, 3)).unwrap();
        for (a, b) in out.repr.iter().zip(slot.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        // constant energies: zero first-layer weights
        let mut flat = net.clone();
        flat.energy.w1 = Matrix::zeros(ENERGY_HIDDEN, 7);
        let pool = random_pool(&mut r, 3, 4);
        let out = flat.read(&pool, &random_vec(&mut r, 3)).unwrap();
        assert!(out.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));

        // explicit softmax-then-weighted-sum
        let q = random_vec(&mut r, 3);
        let out = net.read(&pool, &q).unwrap();
        let e: Vec<f64> = pool.slots.iter().map(|s| net.energy.energy(s, &q).unwrap()).collect();
        let z: f64 = e.iter().map(|v| v.exp()).sum();
        for k in 0..4 {
            let want: f64 = (0..3).map(|j| e[j].exp() / z * pool.slots[j][k]).sum();
            assert!((out.repr[k] - want).abs() < 1e-12);
        }
        assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(net.read(&MemoryPool::zeros(2, 4), &q).is_err());
    }

    #[test]
    fn read_backward_matches_finite_differences() {
        let mut r = rng(8);
        let net = MemoryNet::init(UpdateSchedule::exponential(3).unwrap(), 3, 4, 9).unwrap();
        let pool = random_pool(&mut r, 3, 4);
        let q = random_vec(&mut r, 3);
        let proj = random_vec(&mut r, 4);
        let (_, t) = net.read_traced(&pool, &q).unwrap();
        let mut grads = net.zeros_like();
        let (dslots, dq) = net.backward_read(&t, &proj, &mut grads);
        let nq = finite_diff_grad(|q| dot(&proj, &net.read(&pool, q).unwrap().repr), &q, 1e-5).unwrap();
        for (a, n) in dq.iter().zip(nq.iter()) {
            assert!(relative_error(*a, *n, 1e-7) < 1e-5);
        }
        for j in 0..3 {
            let ns = finite_diff_grad(
                |s| {
                    let mut probe = pool.clone();
                    probe.slots[j] = s.into();
                    dot(&proj, &net.read(&probe, &q).unwrap().repr)
                },
                &pool.slots[j],
                1e-5,
            )
            .unwrap();
            for (a, n) in dslots[j].iter().zip(ns.iter()) {
                assert!(relative_error(*a, *n, 1e-7) < 1e-5);
            }
        }
        let base = net.energy.w1.as_slice().to_vec();
        let nw = finite_diff_grad(
            |flat| {
                let mut probe = net.clone();
                probe.energy.w1.as_mut_slice().copy_from_slice(flat);
                dot(&proj, &probe.read(&pool, &q).unwrap().repr)
            },
            &base,
            1e-5,
        )
        .unwrap();
        for (a, n) in grads.energy.w1.as_slice().iter().zip(nw.iter()) {
            assert!(relative_error(*a, *n, 1e-7) < 1e-5);
        }
    }

    #[test]
    fn sequence_backward_matches_finite_differences() {
        let mut r = rng(10);
        let net = MemoryNet::init(UpdateSchedule::exponential(3).unwrap(), 3, 4, 11).unwrap();
        let events: Vec<Vector> = (0..9).map(|_| random_vec(&mut r, 3)).collect();
        let projs: Vec<Vector> = (0..3).map(|_| random_vec(&mut r, 4)).collect();
        let objective = |net: &MemoryNet, events: &[Vector]| {
            let pool = net.run_sequence(events).unwrap();
            pool.slots.iter().zip(&projs).map(|(s, p)| dot(s, p)).sum::<f64>()
        };
        let (_, trace) = net.run_traced(&events).unwrap();
        let mut grads = net.zeros_like();
        let devents = net.backward_sequence(&trace, projs.clone(), &mut grads);
        for t in [0, 4, 8] {
            let num = finite_diff_grad(
                |e| {
                    let mut ev = events.clone();
                    ev[t] = e.into();
                    objective(&net, &ev)
                },
                &events[t],
                1e-5,
            )
            .unwrap();
            for (a, n) in devents[t].iter().zip(num.iter()) {
                assert!(relative_error(*a, *n, 1e-7) < 1e-5, "event {t}: {a} vs {n}");
            }
        }
        let names: Vec<String> = net.tensors().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.iter().enumerate().filter(|(_, n)| n.starts_with("gru")) {
            let base = net.tensors()[k].1.to_vec();
            let num = finite_diff_grad(
                |flat| {
                    let mut probe = net.clone();
                    probe.tensors_mut()[k].1.copy_from_slice(flat);
                    objective(&probe, &events)
                },
                &base,
                1e-5,
            )
            .unwrap();
            for (a, n) in grads.tensors()[k].1.iter().zip(num.iter()) {
                assert!(relative_error(*a, *n, 1e-7) < 1e-5, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn covariance_examples() {
        let pool = |rows: Vec<Vec<f64>>| MemoryPool { slots: rows.into_iter().map(Vector::from).collect(), step: 0 };
        let c = memory_covariance(&pool(vec![vec![1.0, -1.0], vec![1.0, 1.0]]));
        assert_eq!(c, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        assert_eq!(covariance_loss(&c), 0.0);
        let z = memory_covariance(&MemoryPool::zeros(3, 4));
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(covariance_loss(&Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap()), 1.0);
        assert_eq!(covariance_loss(&Matrix::from_rows(&[vec![5.0]]).unwrap()), 0.0);
        let same = memory_covariance(&pool(vec![vec![1.0, -1.0], vec![1.0, -1.0]]));
        assert_eq!(covariance_loss(&same), 1.0);
    }

    #[test]
    fn covariance_gradient_matches_finite_differences() {
        let mut r = rng(12);
        let pool = random_pool(&mut r, 4, 5);
        let (_, grads) = covariance_loss_backward(&pool);
        for j in 0..4 {
            let num = finite_diff_grad(
                |s| {
                    let mut probe = pool.clone();
                    probe.slots[j] = s.into();
                    covariance_loss(&memory_covariance(&probe))
                },
                &pool.slots[j],
                1e-5,
            )
            .unwrap();
            for (a, n) in grads[j].iter().zip(num.iter()) {
                assert!(relative_error(*a, *n, 1e-8) < 1e-6);
            }
        }
    }

    #[test]
    fn expansion_is_append_only() {
        let mut r = rng(13);
        let net = MemoryNet::init(UpdateSchedule::exponential(3).unwrap(), 3, 4, 14).unwrap();
        let events: Vec<Vector> = (0..10).map(|_| random_vec(&mut r, 3)).collect();
        let pool = net.run_sequence(&events).unwrap();
        assert!(expand(&pool, &net, 2, 0).is_err());
        let (pool2, net2) = expand(&pool, &net, 16, 0).unwrap();
        assert_eq!(&pool2.slots[..3], &pool.slots[..]);
        assert_eq!(&net2.layers[..3], &net.layers[..]);
        assert_eq!(net2.energy, net.energy);
        assert!(net2.schedule.layers_due(16).contains(&3));
        // steps 11..=15 never reach period 16
        let mut p = pool2;
        for e in &events[..5] {
            net2.advance(&mut p, e).unwrap();
        }
        assert_eq!(p.step, 15);
        assert!(p.slots[3].iter().all(|&v| v == 0.0));
        net2.advance(&mut p, &events[5]).unwrap();
        assert!(p.slots[3].iter().any(|&v| v != 0.0));
    }

    proptest::proptest! {
        #[test]
        fn incremental_equivalence(len in 1usize..40, split in 0usize..40, seed in 0u64..1000) {
            let split = split.min(len);
            let net = MemoryNet::init(UpdateSchedule::new(vec![1, 2, 4, 12]).unwrap(), 3, 4, seed).unwrap();
            let mut r = rng(seed);
            let events: Vec<Vector> = (0..len).map(|_| random_vec(&mut r, 3)).collect();
            let whole = net.run_sequence(&events).unwrap();
            let mut pool = net.empty_pool();
            for e in &events[..split] { net.advance(&mut pool, e).unwrap(); }
            let snapshot = pool.clone();
            let mut resumed = snapshot;
            for e in &events[split..] { net.advance(&mut resumed, e).unwrap(); }
            proptest::prop_assert_eq!(whole, resumed);
        }

        #[test]
        fn covariance_properties(seed in 0u64..1000, d in 1usize..6, p in 1usize..8) {
            let mut r = rng(seed);
            let pool = random_pool(&mut r, d, p);
            let c = memory_covariance(&pool);
            for a in 0..d {
                proptest::prop_assert!(c.get(a, a) >= 0.0);
                for b in 0..d { proptest::prop_assert_eq!(c.get(a, b), c.get(b, a)); }
            }
            proptest::prop_assert!(covariance_loss(&c) >= 0.0);
        }

        #[test]
        fn lower_layers_update_at_least_as_often(t in 1u64..500, depth in 1usize..7) {
            let s = UpdateSchedule::exponential(depth).unwrap();
            let counts: Vec<usize> = (0..depth).map(|j| (1..=t).filter(|&i| s.is_due(j, i)).count()).collect();
            proptest::prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
