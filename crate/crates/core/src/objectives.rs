//! Training objectives.
//!
//! The sentence classifier minimizes `L = L1 + gamma * (L2 + L3)`:
//! squared error on the sentence score, plus squared penalties pulling each
//! sentence's smallest unnormalized attention weight to 0 and its largest to
//! the gold sentence label. The supervised tagger minimizes token
//! cross-entropy.
//!
//! Every loss exists twice: as a plain function over values, and as a tape
//! construction (`sentence_objective`, `token_objective`) used in training.

use serde::{Deserialize, Serialize};

use crate::autograd::{Extreme, NodeId};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::model::{Graph, HeadNodes};

pub const DEFAULT_GAMMA: f64 = 0.01;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l1: f64, l2: f64, l3: f64, gamma: f64) -> Self {
        Self {
            l1,
            l2,
            l3,
            gamma,
            total: l1 + gamma * (l2 + l3),
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l1 += other.l1;
        self.l2 += other.l2;
        self.l3 += other.l3;
        self.gamma = other.gamma;
        self.total += other.total;
    }
}

/// `sum_j (y_j - gold_j)^2`.
pub fn loss_l1(y: &[f64], gold: &[u8]) -> f64 {
    assert_eq!(y.len(), gold.len(), "prediction and gold lengths differ");
    y.iter()
        .zip(gold)
        .map(|(p, &g)| (p - f64::from(g)).powi(2))
        .sum()
}

fn masked_extreme(row: &[f64], mask: &[bool], which: Extreme) -> f64 {
    let vals = row.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x);
    match which {
        Extreme::Min => vals.fold(f64::INFINITY, f64::min),
        Extreme::Max => vals.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `sum_j (min_i a~_i)^2`, the minimum taken over unmasked positions.
pub fn loss_l2(a_tilde: &[Vec<f64>], mask: &[Vec<bool>]) -> f64 {
    a_tilde
        .iter()
        .zip(mask)
        .map(|(row, m)| masked_extreme(row, m, Extreme::Min).powi(2))
        .sum()
}

/// `sum_j (max_i a~_i - gold_j)^2`, the maximum taken over unmasked positions.
pub fn loss_l3(a_tilde: &[Vec<f64>], gold: &[u8], mask: &[Vec<bool>]) -> f64 {
    a_tilde
        .iter()
        .zip(mask)
        .zip(gold)
        .map(|((row, m), &g)| (masked_extreme(row, m, Extreme::Max) - f64::from(g)).powi(2))
        .sum()
}

/// The three sentence losses from unpadded per-sentence traces.
pub fn combined_loss(
    traces: &[crate::model::ForwardTrace],
    gold: &[u8],
    gamma: f64,
) -> Result<LossBreakdown> {
    if gamma < 0.0 {
        return Err(Error::Contract("gamma must be nonnegative".into()));
    }
    let y: Vec<f64> = traces.iter().map(|t| t.y).collect();
    let a: Vec<Vec<f64>> = traces.iter().map(|t| t.a_tilde.clone()).collect();
    let mask: Vec<Vec<bool>> = a.iter().map(|r| vec![true; r.len()]).collect();
    Ok(LossBreakdown::new(
        loss_l1(&y, gold),
        loss_l2(&a, &mask),
        loss_l3(&a, gold, &mask),
        gamma,
    ))
}

/// Mean over unmasked tokens of `-ln p(gold)`, with `p` floored at 1e-12.
pub fn token_cross_entropy(dists: &[Vec<[f64; 2]>], gold: &[Vec<u8>], mask: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((d, g), m) in dists.iter().zip(gold).zip(mask) {
        for ((p, &l), &keep) in d.iter().zip(g).zip(m) {
            if keep {
                total -= p[usize::from(l)].max(PROB_FLOOR).ln();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Records `L1 + gamma (L2 + L3)` on the graph's tape. For a `LastState`
/// head, only `L1` applies.
pub fn sentence_objective(
    graph: &mut Graph,
    batch: &Batch,
    gamma: f64,
    reduction: Reduction,
) -> Result<(NodeId, LossBreakdown)> {
    let gold = batch
        .sentence_labels
        .as_ref()
        .ok_or_else(|| Error::Contract("training batch lacks sentence labels".into()))?;
    let gold_f: Vec<f64> = gold.iter().map(|&g| f64::from(g)).collect();
    let y = graph
        .y()
        .ok_or_else(|| Error::Contract("sentence objective needs a sentence classifier".into()))?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.batch_size as f64,
    };
    let tape = &mut graph.tape;
    tape.set_scope("loss");
    let l1 = tape.squared_error(y, gold_f.clone());
    let l1v = tape.value(l1).data()[0];
    let (total, l2v, l3v) = match graph.head {
        HeadNodes::Attention { a_tilde, .. } => {
            let mn = tape.row_extreme(a_tilde, &batch.mask, Extreme::Min);
            let mx = tape.row_extreme(a_tilde, &batch.mask, Extreme::Max);
            let l2 = tape.squared_error(mn, vec![0.0; batch.batch_size]);
            let l3 = tape.squared_error(mx, gold_f);
            let (l2v, l3v) = (tape.value(l2).data()[0], tape.value(l3).data()[0]);
            let aux = tape.add(l2, l3);
            let aux = tape.scale(aux, gamma);
            (tape.add(l1, aux), l2v, l3v)
        }
        _ => (l1, 0.0, 0.0),
    };
    let total = if scale != 1.0 {
        tape.scale(total, scale)
    } else {
        total
    };
    Ok((
        total,
        LossBreakdown {
            l1: l1v * scale,
            l2: l2v * scale,
            l3: l3v * scale,
            gamma,
            total: tape.value(total).data()[0],
        },
    ))
}

/// Records the mean token cross-entropy for a tagger graph.
pub fn token_objective(graph: &mut Graph, batch: &Batch) -> Result<(NodeId, f64)> {
    let HeadNodes::Tagger { logits } = graph.head else {
        return Err(Error::Contract("token objective needs a tagger graph".into()));
    };
    let labels = batch
        .token_labels
        .as_ref()
        .ok_or_else(|| Error::Contract("tagger training needs token labels".into()))?;
    let (bsz, steps) = (batch.batch_size, batch.steps);
    let count = batch.mask.iter().filter(|&&m| m).count().max(1) as f64;
    let mut gold = vec![0usize; bsz * steps];
    let mut weights = vec![0.0; bsz * steps];
    for (b, row) in labels.iter().enumerate() {
        for (t, &l) in row.iter().enumerate() {
            gold[t * bsz + b] = usize::from(l);
            weights[t * bsz + b] = 1.0 / count;
        }
    }
    let tape = &mut graph.tape;
    tape.set_scope("loss");
    let loss = tape.softmax_cross_entropy(logits, gold, weights);
    let v = tape.value(loss).data()[0];
    Ok((loss, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn all(rows: &[Vec<f64>]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| vec![true; r.len()]).collect()
    }

    #[test]
    fn l1_examples() {
        assert_eq!(loss_l1(&[1.0, 0.0], &[1, 0]), 0.0);
        assert_abs_diff_eq!(loss_l1(&[0.5], &[1]), 0.25);
        assert_abs_diff_eq!(loss_l1(&[0.2, 0.9], &[0, 1]), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn l2_examples() {
        let a = vec![vec![0.0, 0.9]];
        assert_eq!(loss_l2(&a, &all(&a)), 0.0);
        let b = vec![vec![0.5, 0.5]];
        assert_abs_diff_eq!(loss_l2(&b, &all(&b)), 0.25);
        let padded = vec![vec![0.5, 0.5, -123.0]];
        let mask = vec![vec![true, true, false]];
        assert_abs_diff_eq!(loss_l2(&padded, &mask), 0.25);
    }

    #[test]
    fn l3_examples() {
        let a = vec![vec![0.2, 1.0 - 1e-12]];
        assert!(loss_l3(&a, &[1], &all(&a)) < 1e-20);
        let b = vec![vec![0.4, 0.6]];
        assert_abs_diff_eq!(loss_l3(&b, &[0], &all(&b)), 0.36, epsilon = 1e-15);
        let c = vec![vec![0.3]];
        assert_abs_diff_eq!(loss_l3(&c, &[1], &all(&c)), 0.49, epsilon = 1e-15);
        let padded = vec![vec![0.4, 0.6, 9.0]];
        assert_abs_diff_eq!(
            loss_l3(&padded, &[0], &[vec![true, true, false]]),
            0.36,
            epsilon = 1e-15
        );
    }

    #[test]
    fn single_token_sentence_pulls_one_value_both_ways() {
        let a = vec![vec![0.3]];
        let m = all(&a);
        assert_abs_diff_eq!(loss_l2(&a, &m), 0.09, epsilon = 1e-15);
        assert_abs_diff_eq!(loss_l3(&a, &[1], &m), 0.49, epsilon = 1e-15);
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(0.05, 0.25, 0.36, 0.01);
        assert_abs_diff_eq!(b.total, 0.0561, epsilon = 1e-15);
        assert_eq!(LossBreakdown::new(0.05, 0.25, 0.36, 0.0).total, 0.05);
        assert_eq!(DEFAULT_GAMMA, 0.01);
    }

    #[test]
    fn cross_entropy_examples() {
        let gold = vec![vec![1u8, 0]];
        let mask = vec![vec![true, true]];
        assert_eq!(token_cross_entropy(&[vec![[0.0, 1.0], [1.0, 0.0]]], &gold, &mask), 0.0);
        assert_abs_diff_eq!(
            token_cross_entropy(&[vec![[0.5, 0.5], [0.5, 0.5]]], &gold, &mask),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let masked = vec![vec![true, false]];
        assert_eq!(token_cross_entropy(&[vec![[0.0, 1.0], [1.0, 0.0]]], &[vec![1, 1]], &masked), 0.0);
        let clamped = token_cross_entropy(&[vec![[1.0, 0.0]]], &[vec![1]], &[vec![true]]);
        assert_abs_diff_eq!(clamped, -(1e-12f64).ln(), epsilon = 1e-9);
    }
}
