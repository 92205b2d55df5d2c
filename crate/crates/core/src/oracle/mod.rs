//! Brute-force reference computations on small latent spaces.

pub mod checks;
mod instance;

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::mis::{initial_latents, LatentSampler, TurnKernel};
use crate::seqmodel::layout::split_latent;
use crate::seqmodel::{argmax, draw_from_log_probs, DecodeMode};
use crate::vocab::{Markers, TokenId, TokenSeq};

pub use instance::{InstanceKind, TabularInstance};

pub const ENUMERATION_BUDGET: u128 = 1_000_000;
pub const MAX_SPACE: usize = 16;

/// An explicit, deduplicated list of well-formed latent states.
#[derive(Clone, Debug)]
pub struct FiniteLatentSpace {
    cands: Vec<TokenSeq>,
    index: HashMap<TokenSeq, usize>,
}

impl FiniteLatentSpace {
    pub fn new(markers: &Markers, cands: impl IntoIterator<Item = TokenSeq>) -> Result<Self> {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for h in cands {
            split_latent(markers, &h)?;
            if !index.contains_key(&h) {
                index.insert(h.clone(), out.len());
                out.push(h);
            }
        }
        if out.is_empty() || out.len() > MAX_SPACE {
            return Err(Error::InvalidInput(format!(
                "latent space must hold 1..={MAX_SPACE} candidates, got {}",
                out.len()
            )));
        }
        Ok(FiniteLatentSpace { cands: out, index })
    }

    pub fn len(&self) -> usize {
        self.cands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cands.is_empty()
    }

    pub fn get(&self, i: usize) -> &TokenSeq {
        &self.cands[i]
    }

    pub fn candidates(&self) -> &[TokenSeq] {
        &self.cands
    }

    pub fn index_of(&self, h: &[TokenId]) -> Option<usize> {
        self.index.get(h).copied()
    }

    /// Trajectory index in mixed radix, turn 0 most significant.
    pub fn traj_index(&self, traj: &[TokenSeq]) -> Option<usize> {
        let mut idx = 0;
        for h in traj {
            idx = idx * self.len() + self.index_of(h)?;
        }
        Some(idx)
    }

    pub fn decode_traj(&self, mut idx: usize, turns: usize) -> Vec<usize> {
        let mut out = vec![0; turns];
        for t in (0..turns).rev() {
            out[t] = idx % self.len();
            idx /= self.len();
        }
        out
    }
}

/// Exact posterior over `H^T` for one dialog.
#[derive(Clone, Debug)]
pub struct ExactPosterior {
    pub turns: usize,
    pub n_latents: usize,
    pub log_joint: Vec<f64>,
    pub probs: Vec<f64>,
    /// `log Σ_{h ∈ H^T} p(h_{1:T}, r_{1:T} | u_{1:T})`.
    pub log_marginal: f64,
}

impl ExactPosterior {
    /// Marginal distribution of the latent at turn `t`.
    pub fn turn_marginal(&self, space: &FiniteLatentSpace, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_latents];
        for (i, p) in self.probs.iter().enumerate() {
            out[space.decode_traj(i, self.turns)[t]] += p;
        }
        out
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn normalize_log(log_w: &[f64]) -> Result<(Vec<f64>, f64)> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(Error::Numeric("every trajectory has zero probability".into()));
    }
    Ok((log_w.iter().map(|l| (l - lse).exp()).collect(), lse))
}

fn check_budget(space: &FiniteLatentSpace, turns: usize) -> Result<()> {
    let needed = (space.len() as u128).checked_pow(turns as u32).unwrap_or(u128::MAX);
    if needed > ENUMERATION_BUDGET {
        return Err(Error::Budget {
            needed,
            budget: ENUMERATION_BUDGET,
        });
    }
    Ok(())
}

/// Joint log-weights `Σ_t log p(h_t, r_t | h_{<t}, ...)` for every trajectory of
/// the first `turns` turns, in trajectory-index order.
fn joint_log_weights(k: &dyn TurnKernel, d: &Dialog, space: &FiniteLatentSpace, turns: usize) -> Result<Vec<f64>> {
    check_budget(space, turns)?;
    let mut out = Vec::with_capacity(space.len().pow(turns as u32));
    let mut hist = Vec::with_capacity(turns);
    fn rec(k: &dyn TurnKernel, d: &Dialog, s: &FiniteLatentSpace, turns: usize, hist: &mut Vec<TokenSeq>, acc: f64, out: &mut Vec<f64>) {
        let t = hist.len();
        if t == turns {
            out.push(acc);
            return;
        }
        for h in s.candidates() {
            let lp = k.log_p(d, t, hist, h);
            hist.push(h.clone());
            rec(k, d, s, turns, hist, acc + lp, out);
            hist.pop();
        }
    }
    rec(k, d, space, turns, &mut hist, 0.0, &mut out);
    Ok(out)
}

pub fn enumerate_posterior(k: &dyn TurnKernel, d: &Dialog, space: &FiniteLatentSpace) -> Result<ExactPosterior> {
    let log_joint = joint_log_weights(k, d, space, d.len())?;
    let (probs, log_marginal) = normalize_log(&log_joint)?;
    Ok(ExactPosterior {
        turns: d.len(),
        n_latents: space.len(),
        log_joint,
        probs,
        log_marginal,
    })
}

/// Compares, for every `t`, the posterior of `h_{1:t}` enumerated from the full
/// factors against `posterior(h_{1:t-1}) · p(h_t, r_t | h_{t-1}, r_{t-1}, u_t)`,
/// where the last factor only sees `h_{t-1}`. Returns the largest absolute
/// probability difference.
pub fn check_recursion(k: &dyn TurnKernel, d: &Dialog, space: &FiniteLatentSpace) -> Result<f64> {
    check_budget(space, d.len())?;
    let n = space.len();
    let mut prev: Option<Vec<f64>> = None;
    let mut worst: f64 = 0.0;
    for t in 1..=d.len() {
        let (lhs, _) = normalize_log(&joint_log_weights(k, d, space, t)?)?;
        if let Some(prev) = &prev {
            let mut rhs_log = Vec::with_capacity(lhs.len());
            for (i, pp) in prev.iter().enumerate() {
                let last = space.get(i % n).clone();
                for h in space.candidates() {
                    rhs_log.push(pp.ln() + k.log_p(d, t - 1, std::slice::from_ref(&last), h));
                }
            }
            let (rhs, _) = normalize_log(&rhs_log)?;
            for (a, b) in lhs.iter().zip(&rhs) {
                worst = worst.max((a - b).abs());
            }
        }
        prev = Some(lhs);
    }
    Ok(worst)
}

pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "distributions must share a support");
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// A dialog-specific kernel restricted to a finite latent space. Both factors are
/// tabulated per `(turn, previous latent, latent)`, and the proposal is the
/// inference model renormalized over the space.
#[derive(Clone, Debug)]
pub struct RestrictedKernel {
    space: FiniteLatentSpace,
    turns: usize,
    log_p: Vec<f64>,
    log_q: Vec<f64>,
}

impl RestrictedKernel {
    fn slot(&self, t: usize, prev: Option<usize>, h: usize) -> usize {
        let n = self.space.len();
        let prev = prev.map_or(0, |p| p + 1);
        (t * (n + 1) + prev) * n + h
    }

    fn tabulate(
        space: &FiniteLatentSpace,
        turns: usize,
        mut f: impl FnMut(usize, &[TokenSeq], &TokenSeq) -> f64,
    ) -> Vec<f64> {
        let n = space.len();
        let mut out = vec![f64::NEG_INFINITY; turns * (n + 1) * n];
        for t in 0..turns {
            for prev in 0..=n {
                if (t == 0) != (prev == 0) {
                    continue;
                }
                let hist: Vec<TokenSeq> = if prev == 0 { vec![] } else { vec![space.get(prev - 1).clone()] };
                for (j, h) in space.candidates().iter().enumerate() {
                    out[(t * (n + 1) + prev) * n + j] = f(t, &hist, h);
                }
            }
        }
        out
    }

    fn normalize_rows(table: &mut [f64], n: usize) {
        for row in table.chunks_mut(n) {
            let lse = log_sum_exp(row);
            if lse.is_finite() {
                row.iter_mut().for_each(|x| *x -= lse);
            }
        }
    }

    /// `p_kernel` supplies the target factors, `q_kernel` the (unnormalized) proposal.
    pub fn new(p_kernel: &dyn TurnKernel, q_kernel: &dyn TurnKernel, d: &Dialog, space: &FiniteLatentSpace) -> Self {
        let turns = d.len();
        let log_p = Self::tabulate(space, turns, |t, hist, h| p_kernel.log_p(d, t, hist, h));
        let mut log_q = Self::tabulate(space, turns, |t, hist, h| q_kernel.log_q(d, t, hist, h));
        Self::normalize_rows(&mut log_q, space.len());
        RestrictedKernel {
            space: space.clone(),
            turns,
            log_p,
            log_q,
        }
    }

    /// Proposal equal to the exact per-turn conditional `p(h_t | h_{t-1}, r_t, ...)`.
    pub fn perfect(p_kernel: &dyn TurnKernel, d: &Dialog, space: &FiniteLatentSpace) -> Self {
        let turns = d.len();
        let log_p = Self::tabulate(space, turns, |t, hist, h| p_kernel.log_p(d, t, hist, h));
        let mut log_q = log_p.clone();
        Self::normalize_rows(&mut log_q, space.len());
        RestrictedKernel {
            space: space.clone(),
            turns,
            log_p,
            log_q,
        }
    }

    pub fn space(&self) -> &FiniteLatentSpace {
        &self.space
    }

    fn prev_index(&self, hist: &[TokenSeq]) -> Option<usize> {
        hist.last().map(|h| self.space.index_of(h).expect("history latent outside the space"))
    }

    fn lookup(&self, table: &[f64], t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        match self.space.index_of(h) {
            Some(j) => table[self.slot(t, self.prev_index(hist), j)],
            None => f64::NEG_INFINITY,
        }
    }

    /// Proposal distribution over the space at turn `t`.
    pub fn proposal_row(&self, t: usize, prev: Option<usize>) -> &[f64] {
        let s = self.slot(t, prev, 0);
        &self.log_q[s..s + self.space.len()]
    }
}

impl TurnKernel for RestrictedKernel {
    fn log_p(&self, _d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.lookup(&self.log_p, t, hist, h)
    }

    fn log_q(&self, _d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.lookup(&self.log_q, t, hist, h)
    }

    fn propose(&self, _d: &Dialog, t: usize, hist: &[TokenSeq], mode: DecodeMode, rng: &mut dyn RngCore) -> TokenSeq {
        debug_assert!(t < self.turns);
        let row = self.proposal_row(t, self.prev_index(hist));
        let j = match mode {
            DecodeMode::Greedy => argmax(row),
            DecodeMode::Stochastic => draw_from_log_probs(row, rng),
        };
        self.space.get(j).clone()
    }
}

/// Wraps a kernel and adds `bonus` to the generative factor whenever `h_t`
/// equals `h_{t-2}`, breaking the Markov property.
pub struct NonMarkov<'a> {
    pub inner: &'a dyn TurnKernel,
    pub bonus: f64,
}

impl TurnKernel for NonMarkov<'_> {
    fn log_p(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        let base = self.inner.log_p(d, t, hist, h);
        if hist.len() >= 2 && &hist[hist.len() - 2][..] == h {
            base + self.bonus
        } else {
            base
        }
    }

    fn log_q(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.inner.log_q(d, t, hist, h)
    }

    fn propose(&self, d: &Dialog, t: usize, hist: &[TokenSeq], mode: DecodeMode, rng: &mut dyn RngCore) -> TokenSeq {
        self.inner.propose(d, t, hist, mode, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub sampler: String,
    pub tv: f64,
    pub acceptance_rate: f64,
    pub per_turn_acceptance: Vec<f64>,
    pub sweeps: u64,
    pub burn_in: u64,
    pub seed: u64,
}

/// Runs a sampler's chain on one dialog and compares the post-burn-in empirical
/// trajectory distribution with the enumerated posterior.
#[allow(clippy::too_many_arguments)]
pub fn stationarity_report(
    k: &RestrictedKernel,
    d: &Dialog,
    sampler: &dyn LatentSampler,
    init: Option<Vec<TokenSeq>>,
    sweeps: u64,
    burn_in: u64,
    mode: DecodeMode,
    seed: u64,
) -> Result<StationarityReport> {
    if mode == DecodeMode::Greedy {
        return Err(Error::Contract(
            "stationarity needs stochastic proposals; greedy chains are degenerate".into(),
        ));
    }
    let space = k.space();
    let exact = enumerate_posterior(k, d, space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = init.unwrap_or_else(|| initial_latents(k, d));
    let mut counts = vec![0u64; exact.probs.len()];
    let mut accepted = vec![0u64; d.len()];
    for s in 0..burn_in + sweeps {
        let sweep = sampler.sweep(k, d, Some(&state), mode, &mut rng)?;
        state = sweep.latents;
        if s >= burn_in {
            let idx = space
                .traj_index(&state)
                .ok_or_else(|| Error::Contract("chain left the latent space".into()))?;
            counts[idx] += 1;
            for (a, &acc) in accepted.iter_mut().zip(&sweep.accepted) {
                *a += acc as u64;
            }
        }
    }
    let n = sweeps.max(1) as f64;
    let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let per_turn: Vec<f64> = accepted.iter().map(|&a| a as f64 / n).collect();
    Ok(StationarityReport {
        sampler: sampler.name().to_string(),
        tv: tv_distance(&emp, &exact.probs),
        acceptance_rate: per_turn.iter().sum::<f64>() / per_turn.len() as f64,
        per_turn_acceptance: per_turn,
        sweeps,
        burn_in,
        seed,
    })
}

/// A uniformly random trajectory over the space, for arbitrary chain starts.
pub fn random_trajectory<R: Rng + ?Sized>(space: &FiniteLatentSpace, turns: usize, rng: &mut R) -> Vec<TokenSeq> {
    (0..turns).map(|_| space.get(rng.gen_range(0..space.len())).clone()).collect()
}

#[cfg(test)]
mod tests;
