//! Oracle selection, the list-wise softmax objective, and interpolated
//! re-ranking of N-best lists.

use crate::error::{CoreError, Result};
use crate::nbest::NBestList;
use crate::numerics::{log_softmax_row, NodeId, Tape};

/// Token-level Levenshtein distance (substitution/insertion/deletion all
/// cost 1).
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let cost = usize::from(ai != bj);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Index of the candidate closest to the reference by word-level edit
/// distance. Ties prefer the higher first-pass score, then the lower
/// index; both fall out of scanning the score-sorted list in order.
pub fn select_oracle(nbest: &NBestList, reference: &[usize]) -> Result<usize> {
    if reference.is_empty() {
        return Err(CoreError::InvalidArg("select_oracle: empty reference".into()));
    }
    let mut best = 0usize;
    let mut best_d = usize::MAX;
    for (i, hyp) in nbest.hyps.iter().enumerate() {
        let d = edit_distance(&hyp.tokens, reference);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// -log softmax(scores)[i_gt], the list-wise objective.
pub fn listwise_loss(scores: &[f64], i_gt: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Err(CoreError::InvalidArg("listwise_loss: need at least 2 scores".into()));
    }
    if i_gt >= scores.len() {
        return Err(CoreError::InvalidArg("listwise_loss: oracle index out of range".into()));
    }
    Ok(-log_softmax_row(scores)[i_gt])
}

/// Analytic gradient of the list-wise loss: softmax(scores) - onehot(i_gt).
pub fn listwise_loss_grad(scores: &[f64], i_gt: usize) -> Vec<f64> {
    let logp = log_softmax_row(scores);
    logp.iter()
        .enumerate()
        .map(|(j, lp)| lp.exp() - if j == i_gt { 1.0 } else { 0.0 })
        .collect()
}

/// Tape version over 1x1 score nodes; identical to a one-row cross entropy.
pub fn listwise_loss_on_tape(tape: &mut Tape, scores: &[NodeId], i_gt: usize) -> Result<NodeId> {
    if scores.len() < 2 {
        return Err(CoreError::InvalidArg("listwise_loss: need at least 2 scores".into()));
    }
    if i_gt >= scores.len() {
        return Err(CoreError::InvalidArg("listwise_loss: oracle index out of range".into()));
    }
    let row = tape.concat_cols(scores);
    Ok(tape.cross_entropy_mean_rows(row, &[i_gt]))
}

/// A re-ranking of an N-best list. `order[k]` is the index (into the
/// original list) of the rank-k candidate after rescoring.
#[derive(Debug, Clone)]
pub struct RescoredList {
    pub utt_id: String,
    pub order: Vec<usize>,
    /// Ranking keys aligned with `order`.
    pub keys: Vec<f64>,
    /// Scorer outputs in original candidate order.
    pub r: Vec<f64>,
}

impl RescoredList {
    pub fn top1_tokens<'a>(&self, nbest: &'a NBestList) -> &'a [usize] {
        &nbest.hyps[self.order[0]].tokens
    }
}

/// Re-rank by lambda * z-normalized s_infer + (1 - lambda) * r. The sort is
/// stable, so exact key ties keep the first-pass order.
pub fn rescore(nbest: &NBestList, r: &[f64], lambda: f64) -> Result<RescoredList> {
    if r.len() != nbest.len() {
        return Err(CoreError::InvalidArg(format!(
            "rescore: {} scores for {} candidates",
            r.len(),
            nbest.len()
        )));
    }
    let n = nbest.len() as f64;
    let mean = nbest.hyps.iter().map(|h| h.s_infer).sum::<f64>() / n;
    let var = nbest.hyps.iter().map(|h| (h.s_infer - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let znorm: Vec<f64> = if std < 1e-12 {
        vec![0.0; nbest.len()]
    } else {
        nbest.hyps.iter().map(|h| (h.s_infer - mean) / std).collect()
    };
    let keys: Vec<f64> = znorm
        .iter()
        .zip(r)
        .map(|(z, ri)| lambda * z + (1.0 - lambda) * ri)
        .collect();
    let mut order: Vec<usize> = (0..nbest.len()).collect();
    order.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).expect("finite rescore keys"));
    let sorted_keys = order.iter().map(|&i| keys[i]).collect();
    Ok(RescoredList { utt_id: nbest.utt_id.clone(), order, keys: sorted_keys, r: r.to_vec() })
}
