//! Dialog metrics, latent-state P/R/F1, BLEU, importance-sampled marginal
//! likelihood and gradient-norm variance.

mod generate;
mod gold;
mod report;

use std::collections::HashMap;

use rand::RngCore;

pub use generate::{decode_dialog, evaluate_split, EvalOptions, Prediction, SplitMetrics};
pub use gold::GoldStore;
pub use report::{nan_if_null, MetricsReport, MetricsRow};

use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::mis::{propose_trajectory, TurnKernel};
use crate::oracle::log_sum_exp;
use crate::seqmodel::DecodeMode;
use crate::synthdata::{Goal, World, ATTRS};
use crate::vocab::{TokenId, TokenSeq, Vocab};

pub fn combined_score(inform: f64, success: f64, bleu: f64) -> f64 {
    bleu + 0.5 * (inform + success)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Label tokens of a latent: everything except markers and DB tokens.
fn label_tokens<'a>(vocab: &'a Vocab, h: &'a [TokenId]) -> impl Iterator<Item = TokenId> + 'a {
    let m = vocab.markers();
    h.iter()
        .copied()
        .filter(move |&t| !m.is_separator(t) && t != m.eos && t != m.bos && !vocab.is_forced(t))
}

/// Micro-averaged precision/recall/F1 over label tokens, counted as multisets
/// per turn.
pub fn latent_prf(vocab: &Vocab, pred: &[TokenSeq], gold: &[TokenSeq]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "latent_prf: {} predicted turns vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let (mut hit, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let mut counts: HashMap<TokenId, usize> = HashMap::new();
        for t in label_tokens(vocab, g) {
            *counts.entry(t).or_default() += 1;
            n_gold += 1;
        }
        for t in label_tokens(vocab, p) {
            n_pred += 1;
            if let Some(c) = counts.get_mut(&t) {
                if *c > 0 {
                    *c -= 1;
                    hit += 1;
                }
            }
        }
    }
    Ok(prf_from_counts(hit, n_pred, n_gold))
}

fn prf_from_counts(hit: usize, n_pred: usize, n_gold: usize) -> Prf {
    if n_pred == 0 && n_gold == 0 {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let precision = if n_pred == 0 { 0.0 } else { hit as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { hit as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Predicted beliefs and acts of one dialog, as fed to [`inform_success`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PredictedTurns {
    pub beliefs: Vec<TokenSeq>,
    pub acts: Vec<TokenSeq>,
}

/// Per-dialog outcome: inform holds when, for every goal domain, the final
/// predicted belief selects exactly the goal's entity set; success additionally
/// needs every requested attribute informed in a turn whose predicted belief is
/// active on that domain.
pub fn dialog_inform_success(world: &World, pred: &PredictedTurns, goal: &Goal) -> (bool, bool) {
    let empty = TokenSeq::new();
    let last = pred.beliefs.last().unwrap_or(&empty);
    let pred_cs: Vec<_> = last.iter().filter_map(|&t| world.parse_belief_token(t)).collect();
    let inform = goal.domains.iter().all(|&d| {
        let mine: Vec<_> = pred_cs.iter().copied().filter(|sv| sv.domain == d).collect();
        !mine.is_empty() && world.matching_entities(d, &mine) == world.matching_entities(d, &goal.constraints_of(d))
    });
    let answered = |d: usize, attr: usize| {
        let want = world.tok(&format!("inform:{}", ATTRS[attr]));
        pred.beliefs.iter().zip(&pred.acts).any(|(b, a)| {
            world.active_constraints(b).map(|(ad, _)| ad) == Some(d) && a.contains(&want)
        })
    };
    let success = inform && goal.requests.iter().all(|&(d, a)| answered(d, a));
    (inform, success)
}

/// Percentages of dialogs meeting inform and success.
pub fn inform_success(world: &World, preds: &[PredictedTurns], goals: &[Goal]) -> (f64, f64) {
    if preds.is_empty() {
        return (0.0, 0.0);
    }
    let (mut i, mut s) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(goals) {
        let (a, b) = dialog_inform_success(world, p, g);
        i += a as usize;
        s += b as usize;
    }
    let n = preds.len() as f64;
    (100.0 * i as f64 / n, 100.0 * s as f64 / n)
}

fn ngrams(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU-4 ×100 with clipped counts and brevity penalty. `smoothing`
/// adds one to every n-gram match and total count.
pub fn corpus_bleu(candidates: &[TokenSeq], references: &[TokenSeq], smoothing: bool) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "corpus_bleu: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput("corpus_bleu on an empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, k) in ngrams(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let (m, t) = if smoothing {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_p += 0.25 * (m as f64 / t as f64).ln();
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Importance-sampled `log p(r_{1:T} | u_{1:T})` with `k` ancestral samples from
/// `q`: `log (1/K) Σ_k exp Σ_t [log p_t − log q_t]`. Returns `-inf` when every
/// sample is malformed.
pub fn marginal_ll_is(kern: &dyn TurnKernel, d: &Dialog, k: usize, rng: &mut dyn RngCore) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("marginal_ll_is needs K >= 1".into()));
    }
    let log_ws: Vec<f64> = (0..k)
        .map(|_| {
            let traj = propose_trajectory(kern, d, DecodeMode::Stochastic, rng);
            crate::mis::session_log_weight(kern, d, &traj)
        })
        .collect();
    Ok(log_sum_exp(&log_ws) - (k as f64).ln())
}

/// Population variance of the series after normalizing it to sum to one.
pub fn grad_variance(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InvalidInput("grad_variance of an empty series".into()));
    }
    if series.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidInput("gradient norms must be finite and non-negative".into()));
    }
    let total: f64 = series.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("grad_variance of an all-zero series".into()));
    }
    let n = series.len() as f64;
    let mean = 1.0 / n;
    Ok(series.iter().map(|x| (x / total - mean).powi(2)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests;
