//! Attention heatmap export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::HpmnModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub user: String,
    pub target_item: u32,
    /// One weight per memory layer, lowest layer first.
    pub weights: Vec<f64>,
}

pub fn attention_rows(model: &HpmnModel, samples: &[Sample]) -> Result<Vec<AttentionRow>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(AttentionRow {
                user: s.sequence.user_id.clone(),
                target_item: s.target.item,
                weights: model.attention(s)?.into_inner(),
            })
        })
        .collect()
}

pub fn write_attention(path: &Path, rows: &[AttentionRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Index of the largest weight; the lowest index wins ties.
pub fn argmax_layer(weights: &[f64]) -> usize {
    let mut best = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = j;
        }
    }
    best
}

/// Mean over samples of the layer receiving the most attention.
pub fn mean_argmax_layer(model: &HpmnModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("mean_argmax_layer"));
    }
    let rows = attention_rows(model, samples)?;
    Ok(rows.iter().map(|r| argmax_layer(&r.weights) as f64).sum::<f64>() / rows.len() as f64)
}
