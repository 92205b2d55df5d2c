//! Metropolis independence sampling over per-turn latent states.
//!
//! A [`TurnKernel`] supplies the per-turn generative factor `log p(h_t, r_t | ...)`,
//! the proposal density `log q(h_t | ...)` and proposal draws. Samplers are
//! registered by name in [`SamplerRegistry`]: `turn` (recursive turn-level),
//! `session` (whole-trajectory) and `none` (always accept the proposal).

mod cache;

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::seqmodel::layout::{belief_of, gen_target, split_latent, Database};
use crate::seqmodel::{check_complete, sample, DecodeMode, SeqModel};
use crate::vocab::{TokenId, TokenSeq};

pub use cache::{CacheEntry, LatentCache};

/// Per-turn target and proposal for one dialog. `hist` holds the latents of turns
/// `0..t` chosen in the current sweep; Markov kernels only read its last element.
pub trait TurnKernel: Sync {
    /// `log p(h, r_t | h_{t-1}, r_{t-1}, u_t)`; `-inf` when `h` is malformed.
    fn log_p(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64;
    /// `log q(h | h_{t-1}, r_{t-1}, u_t, r_t)`.
    fn log_q(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64;
    fn propose(&self, d: &Dialog, t: usize, hist: &[TokenSeq], mode: DecodeMode, rng: &mut dyn RngCore) -> TokenSeq;
}

/// The generative model, the inference model and the database, as used in training.
#[derive(Clone, Copy)]
pub struct ModelPair<'a> {
    pub p: &'a dyn SeqModel,
    pub q: &'a dyn SeqModel,
    pub db: &'a dyn Database,
    /// Upper bound on proposed latent length, EOS included.
    pub max_latent_len: usize,
}

impl<'a> ModelPair<'a> {
    fn prev_b<'h>(&self, hist: &'h [TokenSeq]) -> &'h [TokenId] {
        match hist.last() {
            Some(h) => belief_of(&self.p.vocab().markers(), h),
            None => &[],
        }
    }

    pub fn gen_context(&self, d: &Dialog, t: usize, hist: &[TokenSeq]) -> TokenSeq {
        gen_context_of(self.p, self.prev_b(hist), d.prev_r(t), &d.turns[t].u)
    }

    pub fn inf_context(&self, d: &Dialog, t: usize, hist: &[TokenSeq]) -> TokenSeq {
        let mut c = gen_context_of(self.p, self.prev_b(hist), d.prev_r(t), &d.turns[t].u);
        c.extend_from(&d.turns[t].r);
        c
    }

    /// The generative target for latent `h` at turn `t`, or `None` if `h` is malformed.
    pub fn gen_target(&self, d: &Dialog, t: usize, h: &[TokenId]) -> Option<TokenSeq> {
        let m = self.p.vocab().markers();
        let (b, a) = split_latent(&m, h).ok()?;
        let db = self.db.query(&b);
        Some(gen_target(&m, &b, &db, &a, &d.turns[t].r))
    }
}

fn gen_context_of(model: &dyn SeqModel, prev_b: &[TokenId], prev_r: &[TokenId], u: &[TokenId]) -> TokenSeq {
    let mut c = TokenSeq(Vec::with_capacity(1 + prev_b.len() + prev_r.len() + u.len()));
    c.push(model.vocab().markers().bos);
    c.extend_from(prev_b);
    c.extend_from(prev_r);
    c.extend_from(u);
    c
}

impl TurnKernel for ModelPair<'_> {
    fn log_p(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        match self.gen_target(d, t, h) {
            Some(target) => self.p.score(&self.gen_context(d, t, hist), &target, None),
            None => f64::NEG_INFINITY,
        }
    }

    fn log_q(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        if check_complete(&self.q.vocab().markers(), h).is_err() {
            return f64::NEG_INFINITY;
        }
        self.q.score(&self.inf_context(d, t, hist), h, None)
    }

    fn propose(&self, d: &Dialog, t: usize, hist: &[TokenSeq], mode: DecodeMode, rng: &mut dyn RngCore) -> TokenSeq {
        sample(self.q, &self.inf_context(d, t, hist), self.max_latent_len, mode, rng)
    }
}

/// `log p(h ⊕ db(h) ⊕ r | gen-context) − log q(h | inf-context)`; `-inf` for malformed `h`.
pub fn importance_log_weight(k: &dyn TurnKernel, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
    let lp = k.log_p(d, t, hist, h);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp - k.log_q(d, t, hist, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MisOutcome {
    pub h: TokenSeq,
    pub accepted: bool,
    /// `log w(h') − log w(h̄)` before clamping. Zero when both weights are `-inf`.
    pub log_ratio: f64,
}

/// Accept/reject from two log-weights. One uniform draw is consumed regardless.
pub fn mis_accept<R: Rng + ?Sized>(log_w_new: f64, log_w_old: f64, rng: &mut R) -> (bool, f64) {
    let xi: f64 = rng.gen();
    let log_ratio = if log_w_new == f64::NEG_INFINITY && log_w_old == f64::NEG_INFINITY {
        // neither state is valid; move to the fresh proposal
        0.0
    } else {
        log_w_new - log_w_old
    };
    let accept = log_ratio >= 0.0 || xi.ln() < log_ratio;
    (accept, log_ratio)
}

/// One MIS step at turn `t`: propose from `q`, compare against the cached latent,
/// both weighted under the current sweep's prefix `hist`.
pub fn mis_turn_step(
    k: &dyn TurnKernel,
    d: &Dialog,
    t: usize,
    hist: &[TokenSeq],
    cached: Option<&TokenSeq>,
    mode: DecodeMode,
    rng: &mut dyn RngCore,
) -> Result<MisOutcome> {
    let cached = cached.ok_or_else(|| Error::Contract(format!("no cached latent for dialog {} turn {t}", d.id)))?;
    let proposal = k.propose(d, t, hist, mode, rng);
    let w_new = importance_log_weight(k, d, t, hist, &proposal);
    let w_old = importance_log_weight(k, d, t, hist, cached);
    let (accepted, log_ratio) = mis_accept(w_new, w_old, rng);
    Ok(MisOutcome {
        h: if accepted { proposal } else { cached.clone() },
        accepted,
        log_ratio,
    })
}

/// Result of one sampler call on one dialog.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub latents: Vec<TokenSeq>,
    pub accepted: Vec<bool>,
}

pub trait LatentSampler: Send + Sync {
    fn name(&self) -> &'static str;
    /// Human-readable row label for ablation tables.
    fn label(&self) -> &'static str;
    fn needs_cache(&self) -> bool;
    fn sweep(
        &self,
        k: &dyn TurnKernel,
        d: &Dialog,
        cached: Option<&[TokenSeq]>,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
    ) -> Result<Sweep>;
}

fn require_cache<'c>(d: &Dialog, cached: Option<&'c [TokenSeq]>) -> Result<&'c [TokenSeq]> {
    match cached {
        Some(c) if c.len() == d.len() => Ok(c),
        Some(c) => Err(Error::Contract(format!(
            "cache for dialog {} has {} turns, dialog has {}",
            d.id,
            c.len(),
            d.len()
        ))),
        None => Err(Error::Contract(format!("cache for dialog {} is not initialized", d.id))),
    }
}

/// Recursive turn-level MIS: each turn conditions on the latent chosen earlier in
/// this sweep and competes against the cached latent for that turn.
pub struct RecursiveTurnMis;

impl LatentSampler for RecursiveTurnMis {
    fn name(&self) -> &'static str {
        "turn"
    }
    fn label(&self) -> &'static str {
        "Recursive turn-level MIS"
    }
    fn needs_cache(&self) -> bool {
        true
    }
    fn sweep(
        &self,
        k: &dyn TurnKernel,
        d: &Dialog,
        cached: Option<&[TokenSeq]>,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
    ) -> Result<Sweep> {
        let cached = require_cache(d, cached)?;
        let mut latents: Vec<TokenSeq> = Vec::with_capacity(d.len());
        let mut accepted = Vec::with_capacity(d.len());
        for t in 0..d.len() {
            let out = mis_turn_step(k, d, t, &latents, Some(&cached[t]), mode, rng)?;
            accepted.push(out.accepted);
            latents.push(out.h);
        }
        Ok(Sweep { latents, accepted })
    }
}

/// Proposes the whole trajectory ancestrally and accepts or rejects it at once.
pub struct SessionMis;

/// Sum of per-turn log-weights along a trajectory, each under its own prefix.
pub fn session_log_weight(k: &dyn TurnKernel, d: &Dialog, traj: &[TokenSeq]) -> f64 {
    let mut total = 0.0;
    for t in 0..traj.len() {
        total += importance_log_weight(k, d, t, &traj[..t], &traj[t]);
        if total == f64::NEG_INFINITY {
            break;
        }
    }
    total
}

pub fn propose_trajectory(k: &dyn TurnKernel, d: &Dialog, mode: DecodeMode, rng: &mut dyn RngCore) -> Vec<TokenSeq> {
    let mut traj = Vec::with_capacity(d.len());
    for t in 0..d.len() {
        let h = k.propose(d, t, &traj, mode, rng);
        traj.push(h);
    }
    traj
}

impl LatentSampler for SessionMis {
    fn name(&self) -> &'static str {
        "session"
    }
    fn label(&self) -> &'static str {
        "Session-level MIS"
    }
    fn needs_cache(&self) -> bool {
        true
    }
    fn sweep(
        &self,
        k: &dyn TurnKernel,
        d: &Dialog,
        cached: Option<&[TokenSeq]>,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
    ) -> Result<Sweep> {
        let cached = require_cache(d, cached)?;
        let proposal = propose_trajectory(k, d, mode, rng);
        let w_new = session_log_weight(k, d, &proposal);
        let w_old = session_log_weight(k, d, cached);
        let (accept, _) = mis_accept(w_new, w_old, rng);
        Ok(Sweep {
            latents: if accept { proposal } else { cached.to_vec() },
            accepted: vec![accept; d.len()],
        })
    }
}

/// Always accepts the inference model's proposals (self-training).
pub struct ProposeOnly;

impl LatentSampler for ProposeOnly {
    fn name(&self) -> &'static str {
        "none"
    }
    fn label(&self) -> &'static str {
        "Without MIS"
    }
    fn needs_cache(&self) -> bool {
        false
    }
    fn sweep(
        &self,
        k: &dyn TurnKernel,
        d: &Dialog,
        _cached: Option<&[TokenSeq]>,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
    ) -> Result<Sweep> {
        Ok(Sweep {
            latents: propose_trajectory(k, d, mode, rng),
            accepted: vec![true; d.len()],
        })
    }
}

/// Greedy ancestral proposals from `q`, used to seed a dialog's cache.
pub fn initial_latents(k: &dyn TurnKernel, d: &Dialog) -> Vec<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    propose_trajectory(k, d, DecodeMode::Greedy, &mut rng)
}

/// Runs `sampler` on `d`, initializing the cache entry first if the sampler needs
/// one, and writes the result back to the cache.
pub fn run_sampler(
    sampler: &dyn LatentSampler,
    k: &dyn TurnKernel,
    d: &Dialog,
    cache: &mut LatentCache,
    mode: DecodeMode,
    rng: &mut dyn RngCore,
) -> Result<Sweep> {
    if sampler.needs_cache() && cache.get(&d.id).is_none() {
        cache.insert(&d.id, initial_latents(k, d));
    }
    let sweep = sampler.sweep(k, d, cache.get(&d.id).map(|e| &e.latents[..]), mode, rng)?;
    cache.record(&d.id, &sweep);
    Ok(sweep)
}

pub struct SamplerRegistry {
    samplers: BTreeMap<&'static str, Box<dyn LatentSampler>>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut r = SamplerRegistry {
            samplers: BTreeMap::new(),
        };
        r.register(Box::new(RecursiveTurnMis));
        r.register(Box::new(SessionMis));
        r.register(Box::new(ProposeOnly));
        r
    }
}

impl SamplerRegistry {
    /// The built-in samplers, shared for the life of the process.
    pub fn global() -> &'static SamplerRegistry {
        static REG: std::sync::OnceLock<SamplerRegistry> = std::sync::OnceLock::new();
        REG.get_or_init(SamplerRegistry::default)
    }

    pub fn register(&mut self, s: Box<dyn LatentSampler>) {
        self.samplers.insert(s.name(), s);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.samplers.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn LatentSampler> {
        self.samplers
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown sampler {name:?}; known: {:?}", self.names())))
    }
}

#[cfg(test)]
mod tests;
