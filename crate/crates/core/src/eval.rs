//! Ranking and likelihood metrics, and the significance tests used to compare models.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Labeled scores of one evaluation set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub pairs: Vec<(u8, f64)>,
}

impl ScoredSet {
    pub fn new(labels: &[u8], scores: &[f64]) -> Result<Self> {
        if labels.len() != scores.len() {
            return Err(Error::Shape { op: "ScoredSet", left: (labels.len(), 1), right: (scores.len(), 1) });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Invalid("labels must be 0 or 1".into()));
        }
        Ok(ScoredSet { pairs: labels.iter().copied().zip(scores.iter().copied()).collect() })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|(l, _)| *l == 1).count()
    }
}

/// Average (mid) ranks, 1-based, for `values`.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of each tie group among `values`.
fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut run = 1;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            groups.push(run);
            run = 1;
        }
    }
    if !sorted.is_empty() {
        groups.push(run);
    }
    groups
}

/// Probability that a random positive outscores a random negative; ties count ½.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    let n_pos = s.positives();
    let n_neg = s.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!("AUC needs both classes ({n_pos} positives, {n_neg} negatives)")));
    }
    let scores: Vec<f64> = s.pairs.iter().map(|(_, v)| *v).collect();
    let ranks = average_ranks(&scores);
    let rank_sum: f64 = s.pairs.iter().zip(&ranks).filter(|((l, _), _)| *l == 1).map(|(_, r)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Summed (not averaged) negative log-likelihood.
pub fn logloss(s: &ScoredSet) -> Result<f64> {
    s.pairs
        .iter()
        .map(|&(y, p)| {
            if p > 0.0 && p < 1.0 {
                let y = f64::from(y);
                Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            } else {
                Err(Error::Invalid(format!("score {p} outside (0, 1)")))
            }
        })
        .sum()
}

/// Pooled sizes at or below this use the exact permutation distribution.
pub const EXACT_MWU_MAX_N: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Mann–Whitney U of `a` against `b` (pairs where `a` wins, ties ½) with a
/// two-sided p-value.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mann_whitney_u"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let u_of = |rank_sum: f64| rank_sum - (na * (na + 1)) as f64 / 2.0;
    let u = u_of(ranks[..na].iter().sum());
    let mean = (na * nb) as f64 / 2.0;

    let p_value = if n <= EXACT_MWU_MAX_N {
        // every way of choosing which pooled values belong to `a`
        let observed = (u - mean).abs();
        let (mut extreme, mut total) = (0u64, 0u64);
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != na {
                continue;
            }
            let rs: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
            total += 1;
            if (u_of(rs) - mean).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        }
        extreme as f64 / total as f64
    } else {
        let nf = n as f64;
        let tie_term: f64 = tie_groups(&pooled).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (nf * (nf - 1.0));
        let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term);
        if var <= 0.0 {
            1.0
        } else {
            let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
            (2.0 * Normal::new(0.0, 1.0).expect("standard normal").sf(z)).min(1.0)
        }
    };
    Ok(TestResult { statistic: u, p_value })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance two-sample t-test, two-sided.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid("t-test needs at least 2 values per group".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Invalid("t-test undefined: both groups have zero variance".into()));
    }
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(TestResult { statistic: t, p_value: (2.0 * dist.sf(t.abs())).min(1.0) })
}

/// JSON metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
    pub positives: usize,
}

impl MetricsReport {
    pub fn from_scored(s: &ScoredSet) -> Result<Self> {
        Ok(MetricsReport { auc: auc(s)?, logloss: logloss(s)?, n: s.len(), positives: s.positives() })
    }
}
