//! Lookup tables turning categorical ids into the dense per-event input and
//! the target-item query.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorEvent, Schema, PAD};
use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix, Vector};

pub const INIT_RANGE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub weights: Matrix,
}

impl EmbeddingTable {
    fn init(field: &'static str, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Invalid(format!("{field} vocabulary is empty")));
        }
        let data = (0..vocab * dim).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
        Ok(EmbeddingTable { weights: Matrix::from_vec(vocab, dim, data)? })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    fn row(&self, field: &'static str, id: u32) -> Result<&[f64]> {
        if (id as usize) < self.vocab_size() {
            Ok(self.weights.row(id as usize))
        } else {
            Err(Error::OutOfVocab { field, id: id.to_string(), size: self.vocab_size() })
        }
    }
}

/// All embedding tables of a model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub schema: Schema,
    pub item: EmbeddingTable,
    pub category: EmbeddingTable,
    pub side: EmbeddingTable,
    pub user_side: EmbeddingTable,
    pub context: EmbeddingTable,
}

impl EmbeddingTables {
    pub fn init(schema: Schema, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(EmbeddingTables {
            schema,
            item: EmbeddingTable::init("item", schema.n_items, dim, &mut rng)?,
            category: EmbeddingTable::init("category", schema.n_cats, dim, &mut rng)?,
            side: EmbeddingTable::init("side", schema.n_side, dim, &mut rng)?,
            user_side: EmbeddingTable::init("user_side", schema.n_user_side, dim, &mut rng)?,
            context: EmbeddingTable::init("context", schema.n_context, dim, &mut rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn dim(&self) -> usize {
        self.item.dim()
    }

    /// Width of an event (and query) vector: item, category and the side slots.
    pub fn event_width(&self) -> usize {
        self.dim() * (2 + self.schema.side_slots)
    }

    pub fn context_width(&self) -> usize {
        self.dim() * self.schema.context_slots
    }

    pub fn user_side_width(&self) -> usize {
        self.dim() * self.schema.user_side_slots
    }

    pub fn embed_event(&self, event: &BehaviorEvent) -> Result<Vector> {
        let s = &self.schema;
        if event.side.len() > s.side_slots {
            return Err(Error::Invalid(format!("{} side features, schema allows {}", event.side.len(), s.side_slots)));
        }
        let mut out = Vec::with_capacity(self.event_width());
        out.extend_from_slice(self.item.row("item", event.item)?);
        out.extend_from_slice(self.category.row("category", event.category)?);
        for k in 0..s.side_slots {
            let id = event.side.get(k).copied().unwrap_or(PAD);
            out.extend_from_slice(self.side.row("side", id)?);
        }
        Ok(out.into())
    }

    /// The target item's vector, used as the attention query and predictor input.
    pub fn embed_query(&self, target: &BehaviorEvent) -> Result<Vector> {
        self.embed_event(target)
    }

    fn embed_slots(table: &EmbeddingTable, field: &'static str, ids: &[u32], slots: usize) -> Result<Vector> {
        if ids.len() > slots {
            return Err(Error::Invalid(format!("{} {field} features, schema allows {slots}", ids.len())));
        }
        let mut out = Vec::with_capacity(slots * table.dim());
        for k in 0..slots {
            out.extend_from_slice(table.row(field, ids.get(k).copied().unwrap_or(PAD))?);
        }
        Ok(out.into())
    }

    pub fn embed_context(&self, ids: &[u32]) -> Result<Vector> {
        Self::embed_slots(&self.context, "context", ids, self.schema.context_slots)
    }

    pub fn embed_user_side(&self, ids: &[u32]) -> Result<Vector> {
        Self::embed_slots(&self.user_side, "user_side", ids, self.schema.user_side_slots)
    }

    /// Adds `grad` (d loss / d event vector) into the rows `event` looked up.
    pub fn scatter_event(&self, event: &BehaviorEvent, grad: &[f64], into: &mut EmbeddingTables) {
        let d = self.dim();
        let mut chunks = grad.chunks_exact(d);
        axpy(1.0, chunks.next().expect("item chunk"), into.item.weights.row_mut(event.item as usize));
        axpy(1.0, chunks.next().expect("category chunk"), into.category.weights.row_mut(event.category as usize));
        for k in 0..self.schema.side_slots {
            let id = event.side.get(k).copied().unwrap_or(PAD);
            axpy(1.0, chunks.next().expect("side chunk"), into.side.weights.row_mut(id as usize));
        }
    }

    pub fn scatter_context(&self, ids: &[u32], grad: &[f64], into: &mut EmbeddingTables) {
        for (k, g) in grad.chunks_exact(self.dim()).enumerate() {
            axpy(1.0, g, into.context.weights.row_mut(ids.get(k).copied().unwrap_or(PAD) as usize));
        }
    }

    pub fn scatter_user_side(&self, ids: &[u32], grad: &[f64], into: &mut EmbeddingTables) {
        for (k, g) in grad.chunks_exact(self.dim()).enumerate() {
            axpy(1.0, g, into.user_side.weights.row_mut(ids.get(k).copied().unwrap_or(PAD) as usize));
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("embed.item".into(), self.item.weights.as_slice()),
            ("embed.category".into(), self.category.weights.as_slice()),
            ("embed.side".into(), self.side.weights.as_slice()),
            ("embed.user_side".into(), self.user_side.weights.as_slice()),
            ("embed.context".into(), self.context.weights.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("embed.item".into(), self.item.weights.as_mut_slice()),
            ("embed.category".into(), self.category.weights.as_mut_slice()),
            ("embed.side".into(), self.side.weights.as_mut_slice()),
            ("embed.user_side".into(), self.user_side.weights.as_mut_slice()),
            ("embed.context".into(), self.context.weights.as_mut_slice()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_grad};

    fn schema() -> Schema {
        Schema {
            n_items: 100,
            n_cats: 10,
            n_side: 4,
            side_slots: 2,
            n_user_side: 3,
            user_side_slots: 1,
            n_context: 3,
            context_slots: 1,
        }
    }

    fn event(item: u32, cat: u32, side: Vec<u32>) -> BehaviorEvent {
        BehaviorEvent { item, category: cat, timestamp: 0, side }
    }

    #[test]
    fn init_shape_determinism_and_bounds() {
        let t = EmbeddingTables::init(schema(), 16, 3).unwrap();
        assert_eq!(t.item.weights.shape(), (100, 16));
        assert_eq!(t, EmbeddingTables::init(schema(), 16, 3).unwrap());
        assert_ne!(t, EmbeddingTables::init(schema(), 16, 4).unwrap());
        for (_, w) in t.tensors() {
            assert!(w.iter().all(|v| v.abs() <= INIT_RANGE));
        }
        assert!(EmbeddingTables::init(schema(), 0, 3).is_err());
        assert!(EmbeddingTables::init(Schema { n_items: 0, ..schema() }, 4, 3).is_err());
    }

    #[test]
    fn embed_widths_and_padding() {
        let t = EmbeddingTables::init(schema(), 4, 1).unwrap();
        let full = t.embed_event(&event(3, 2, vec![1, 2])).unwrap();
        let padded = t.embed_event(&event(3, 2, vec![1])).unwrap();
        assert_eq!(full.len(), t.event_width());
        assert_eq!(padded.len(), t.event_width());
        assert_eq!(&padded[12..16], t.side.weights.row(PAD as usize));
        assert_eq!(t.embed_event(&event(3, 2, vec![1])).unwrap(), padded);
        assert_eq!(t.embed_query(&event(3, 2, vec![1, 2])).unwrap(), full);

        let z = t.zeros_like();
        assert!(z.embed_event(&event(5, 5, vec![])).unwrap().iter().all(|&v| v == 0.0));
        assert!(z.embed_query(&event(5, 5, vec![])).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_names_field() {
        let t = EmbeddingTables::init(schema(), 4, 1).unwrap();
        let err = t.embed_event(&event(3, 10, vec![])).unwrap_err();
        assert!(matches!(err, Error::OutOfVocab { field: "category", .. }), "{err}");
        let err = t.embed_query(&event(100, 1, vec![])).unwrap_err();
        assert!(matches!(err, Error::OutOfVocab { field: "item", .. }));
        assert!(t.embed_context(&[7]).is_err());
    }

    #[test]
    fn gradient_reaches_only_looked_up_rows() {
        let t = EmbeddingTables::init(schema(), 3, 2).unwrap();
        let e = event(7, 4, vec![2]);
        let proj: Vec<f64> = (0..t.event_width()).map(|k| (k as f64 * 0.37).sin()).collect();
        let mut grads = t.zeros_like();
        t.scatter_event(&e, &proj, &mut grads);

        // finite differences over the item table
        let num = finite_diff_grad(
            |flat| {
                let mut probe = t.clone();
                probe.item.weights.as_mut_slice().copy_from_slice(flat);
                dot(&proj, &probe.embed_event(&e).unwrap())
            },
            t.item.weights.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, n) in grads.item.weights.as_slice().iter().zip(num.iter()) {
            assert!((a - n).abs() < 1e-8);
        }
        for r in 0..t.item.vocab_size() {
            let nonzero = grads.item.weights.row(r).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, r == 7);
        }
        // the PAD side slot received the second side chunk
        assert!(grads.side.weights.row(0).iter().any(|&v| v != 0.0));
        assert!(grads.side.weights.row(1).iter().all(|&v| v == 0.0));
    }
}
