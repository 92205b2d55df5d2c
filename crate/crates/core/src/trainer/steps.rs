use rand::RngCore;

use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::mis::{LatentSampler, ModelPair, Sweep};
use crate::seqmodel::layout::latent_positions_in_target;
use crate::seqmodel::{sample, DecodeMode};
use crate::vocab::TokenSeq;

/// Per-dialog accumulation result. Gradients are of log-likelihoods (ascent
/// direction); callers negate them for the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogStats {
    pub log_p: f64,
    pub log_q: f64,
    pub turns: usize,
    pub proposed: usize,
    pub accepted: usize,
    /// Turns skipped because their latent was malformed.
    pub skipped: usize,
}

impl DialogStats {
    pub fn merge(&mut self, o: &DialogStats) {
        self.log_p += o.log_p;
        self.log_q += o.log_q;
        self.turns += o.turns;
        self.proposed += o.proposed;
        self.accepted += o.accepted;
        self.skipped += o.skipped;
    }
}

/// Teacher-forced `Σ_t log p(h_t, r_t | h_{t-1}, r_{t-1}, u_t)` and
/// `Σ_t log q(h_t | h_{t-1}, r_{t-1}, u_t, r_t)` at the given latents, with their
/// gradients added into `gp` and `gq` (either may be empty to skip).
pub fn latent_grads(pair: &ModelPair, d: &Dialog, latents: &[TokenSeq], gp: &mut [f64], gq: &mut [f64]) -> DialogStats {
    let mut st = DialogStats::default();
    for t in 0..d.len() {
        let Some(target) = pair.gen_target(d, t, &latents[t]) else {
            log::debug!("dialog {} turn {t}: malformed latent skipped", d.id);
            st.skipped += 1;
            continue;
        };
        let hist = &latents[..t];
        let gctx = pair.gen_context(d, t, hist);
        let p_grad = (!gp.is_empty()).then_some((&mut *gp, 1.0));
        st.log_p += pair.p.score(&gctx, &target, p_grad);
        let ictx = pair.inf_context(d, t, hist);
        let q_grad = (!gq.is_empty()).then_some((&mut *gq, 1.0));
        st.log_q += pair.q.score(&ictx, &latents[t], q_grad);
        st.turns += 1;
    }
    st
}

/// Gradients of one labeled dialog at its gold latents.
pub fn supervised_grads(pair: &ModelPair, d: &Dialog, gp: &mut [f64], gq: &mut [f64]) -> Result<DialogStats> {
    if !d.labeled {
        return Err(Error::Contract(format!("supervised step on unlabeled dialog {}", d.id)));
    }
    let gold = d.gold_latents(&pair.p.vocab().markers())?;
    Ok(latent_grads(pair, d, &gold, gp, gq))
}

/// JSA on one unlabeled dialog: draw latents with `sampler` from the cached state
/// and treat them as labels for both models. Returns the sweep so the caller can
/// update the cache.
#[allow(clippy::too_many_arguments)]
pub fn jsa_grads(
    pair: &ModelPair,
    sampler: &dyn LatentSampler,
    d: &Dialog,
    cached: Option<&[TokenSeq]>,
    mode: DecodeMode,
    rng: &mut dyn RngCore,
    gp: &mut [f64],
    gq: &mut [f64],
) -> Result<(DialogStats, Sweep)> {
    let init;
    let cached = match cached {
        None if sampler.needs_cache() => {
            init = crate::mis::initial_latents(pair, d);
            Some(&init[..])
        }
        c => c,
    };
    let sweep = sampler.sweep(pair, d, cached, mode, rng)?;
    let mut st = latent_grads(pair, d, &sweep.latents, gp, gq);
    st.proposed = d.len();
    st.accepted = sweep.accepted.iter().filter(|a| **a).count();
    Ok((st, sweep))
}

/// Single-sample straight-through ELBO on one unlabeled dialog.
///
/// Per turn a latent `h̃` is drawn from q. θ gets `∇ log p(h̃, r)`. φ gets the
/// score term `−∇ log q(h̃)` plus the straight-through path: every relaxed
/// one-hot row of `h̃` (belief tokens, `SEP_B`, act tokens) is
/// `onehot + softmax − stop_grad(softmax)`, so its gradient reaches φ as
/// `Σ_j (∂f/∂onehot_j) · ∂softmax_j/∂φ` with `f = log p − log q`. The path
/// through later turns' contexts is not relaxed. Returns the summed ELBO.
pub fn variational_grads(
    pair: &ModelPair,
    d: &Dialog,
    mode: DecodeMode,
    rng: &mut dyn RngCore,
    gp: &mut [f64],
    gq: &mut [f64],
) -> (f64, DialogStats) {
    let m = pair.p.vocab().markers();
    let mut st = DialogStats::default();
    let mut hist: Vec<TokenSeq> = Vec::with_capacity(d.len());
    let mut elbo = 0.0;
    for t in 0..d.len() {
        let ictx = pair.inf_context(d, t, &hist);
        let h = sample(pair.q, &ictx, pair.max_latent_len, mode, rng);
        let Some(target) = pair.gen_target(d, t, &h) else {
            log::debug!("dialog {} turn {t}: malformed sample skipped", d.id);
            st.skipped += 1;
            hist.push(h);
            continue;
        };
        let gctx = pair.gen_context(d, t, &hist);
        let lp = pair.p.score(&gctx, &target, Some((&mut *gp, 1.0)));
        let lq = pair.q.score(&ictx, &h, Some((&mut *gq, -1.0)));
        let db_len = pair.db.query(crate::seqmodel::layout::belief_of(&m, &h)).len();
        let pairs = latent_positions_in_target(&m, &h, db_len).expect("well-formed latent");
        let tpos: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        let lpos: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let dp = pair.p.input_grads(&gctx, &target, &tpos);
        let dq = pair.q.input_grads(&ictx, &h, &lpos);
        let dirs: Vec<(usize, Vec<f64>)> = lpos
            .iter()
            .zip(dp.into_iter().zip(dq))
            .map(|(&i, (a, b))| (i, a.iter().zip(&b).map(|(x, y)| x - y).collect()))
            .collect();
        pair.q.soft_dot_grad(&ictx, &h, &dirs, gq, 1.0);
        elbo += lp - lq;
        st.log_p += lp;
        st.log_q += lq;
        st.turns += 1;
        hist.push(h);
    }
    (elbo, st)
}
