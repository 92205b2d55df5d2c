//! Self-contained numerical checks against the enumeration oracles. Each check
//! builds its own small instances from a seed and reports the measured error
//! next to the threshold it is judged against.

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_recursion, enumerate_posterior, ExactPosterior, FiniteLatentSpace, stationarity_report, InstanceKind, NonMarkov, RestrictedKernel, TabularInstance};
use crate::error::Result;
use crate::eval::marginal_ll_is;
use crate::dialog::Dialog;
use crate::mis::{initial_latents, LatentSampler, RecursiveTurnMis, SessionMis, TurnKernel};
use crate::seqmodel::layout::{build_gen_context, gen_target};
use crate::seqmodel::{draw_from_log_probs, grad_log_prob, DecodeMode, ModelRegistry, SeqModel};
use crate::synthdata::{gen_split, World, WorldConfig};
use crate::trainer::latent_grads;
use crate::vocab::{TokenId, TokenSeq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: serde_json::Value,
}

impl CheckResult {
    fn at_most(name: &str, value: f64, threshold: f64, detail: serde_json::Value) -> Self {
        CheckResult {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            detail,
        }
    }
}

/// Largest gap between the recursive and the direct posterior over `n` random
/// instances with four latent states, alternating two and three turns and both
/// instance kinds. `fault` wraps every generative factor in [`NonMarkov`] with
/// that bonus, which the check is expected to catch.
pub fn recursion(n: usize, seed: u64, fault: Option<f64>) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let kind = if (i / 2) % 2 == 0 { InstanceKind::Independent } else { InstanceKind::Chained };
        let inst = TabularInstance::random(seed + i as u64, 4, 2 + i % 2, kind)?;
        let pair = inst.pair();
        let err = match fault {
            Some(bonus) => check_recursion(&NonMarkov { inner: &pair, bonus }, &inst.dialog, &inst.space)?,
            None => check_recursion(&pair, &inst.dialog, &inst.space)?,
        };
        worst = worst.max(err);
    }
    Ok(CheckResult::at_most(
        "recursion",
        worst,
        1e-9,
        serde_json::json!({ "instances": n, "injected_fault": fault }),
    ))
}

/// Recursive turn-level chain on a three-turn instance whose posterior factorizes,
/// with a briefly pretrained proposal; plus the perfect-proposal acceptance rate.
pub fn stationarity(seed: u64, sweeps: u64, burn_in: u64) -> Result<(CheckResult, CheckResult)> {
    let mut inst = TabularInstance::random(seed, 4, 3, InstanceKind::Independent)?;
    inst.pretrain_q(40, 0.02, seed)?;
    let pair = inst.pair();
    let k = RestrictedKernel::new(&pair, &pair, &inst.dialog, &inst.space);
    let rep = stationarity_report(&k, &inst.dialog, &RecursiveTurnMis, None, sweeps, burn_in, DecodeMode::Stochastic, seed)?;
    let tv = CheckResult::at_most("stationarity_tv", rep.tv, 0.05, serde_json::to_value(&rep)?);
    let perfect = RestrictedKernel::perfect(&pair, &inst.dialog, &inst.space);
    let rep = stationarity_report(&perfect, &inst.dialog, &RecursiveTurnMis, None, sweeps / 10, 0, DecodeMode::Stochastic, seed)?;
    let acc = CheckResult {
        name: "perfect_proposal_acceptance".into(),
        value: rep.acceptance_rate,
        threshold: 1.0,
        passed: rep.acceptance_rate == 1.0,
        detail: serde_json::to_value(&rep)?,
    };
    Ok((tv, acc))
}

/// Session-level chain on a three-turn instance whose turns are chained through
/// the previous belief. The detail also carries the turn-level chain's TV on the
/// same instance, which is not expected to vanish there.
pub fn session_stationarity(seed: u64, sweeps: u64, burn_in: u64) -> Result<CheckResult> {
    let mut inst = TabularInstance::random(seed, 4, 3, InstanceKind::Chained)?;
    inst.pretrain_q(40, 0.02, seed)?;
    let pair = inst.pair();
    let k = RestrictedKernel::new(&pair, &pair, &inst.dialog, &inst.space);
    let session = stationarity_report(&k, &inst.dialog, &SessionMis, None, sweeps, burn_in, DecodeMode::Stochastic, seed)?;
    let turn = stationarity_report(&k, &inst.dialog, &RecursiveTurnMis, None, sweeps, burn_in, DecodeMode::Stochastic, seed)?;
    Ok(CheckResult::at_most(
        "session_stationarity_tv",
        session.tv,
        0.05,
        serde_json::json!({ "session": session, "turn_level": turn }),
    ))
}

/// Every check at its reference size.
pub fn run_all(seed: u64, fault: Option<f64>) -> Result<Vec<CheckResult>> {
    let mut out = vec![recursion(20, seed, fault)?];
    let (tv, acc) = stationarity(seed, 100_000, 200)?;
    out.extend([tv, acc, session_stationarity(seed, 100_000, 200)?]);
    out.extend(finite_differences(seed, 5, 64)?);
    out.push(theta_gradient(seed, 10_000, 200)?);
    out.push(marginal_likelihood(seed, 10, 10_000)?);
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Analytic gradients of both model variants against central differences, on
/// `coords` random coordinates (drawn from those the pair touches) for each of
/// `pairs` (context, target) pairs taken from generated dialogs.
pub fn finite_differences(seed: u64, pairs: usize, coords: usize) -> Result<Vec<CheckResult>> {
    let world = World::new(WorldConfig::default())?;
    let m = world.vocab().markers();
    let dialogs = gen_split(&world, pairs, seed, "fd");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = ModelRegistry::default();
    let variants = [
        ("tabular", serde_json::json!({ "init_scale": 1.0 })),
        ("ngram", serde_json::json!({ "init_std": 0.5 })),
    ];
    let mut out = Vec::new();
    for (name, hyper) in variants {
        let mut model = registry.build(name, world.vocab().clone(), &hyper, seed)?;
        let mut worst: f64 = 0.0;
        for d in &dialogs {
            let t = d.len() - 1;
            let (prev, cur) = (&d.turns[t - 1], &d.turns[t]);
            let labels = |x: &Option<TokenSeq>| x.clone().expect("generated dialogs are labeled");
            let ctx = build_gen_context(world.vocab(), &labels(&prev.b), d.prev_r(t), &cur.u)?;
            let target = gen_target(&m, &labels(&cur.b), &labels(&cur.db), &labels(&cur.a), &cur.r);
            let g = grad_log_prob(model.as_ref(), &ctx, &target)?;
            let touched: Vec<usize> = (0..g.0.len()).filter(|&i| g.0[i] != 0.0).collect();
            let picked = sample(&mut rng, touched.len(), coords.min(touched.len()));
            for j in picked {
                let i = touched[j];
                let fd = central_difference(model.as_mut(), &ctx, &target, i, 1e-3);
                worst = worst.max(relative_error(g.0[i], fd));
            }
        }
        out.push(CheckResult::at_most(
            &format!("finite_differences_{name}"),
            worst,
            1e-4,
            serde_json::json!({ "pairs": pairs, "coords_per_pair": coords }),
        ));
    }
    Ok(out)
}

/// Five-point central difference, accurate to fourth order in `step`.
fn central_difference(model: &mut dyn SeqModel, ctx: &[TokenId], target: &[TokenId], i: usize, step: f64) -> f64 {
    let orig = model.params()[i];
    let mut at = |x: f64| {
        model.params_mut()[i] = orig + x;
        model.score(ctx, target, None)
    };
    let d1 = at(step) - at(-step);
    let d2 = at(2.0 * step) - at(-2.0 * step);
    model.params_mut()[i] = orig;
    (8.0 * d1 - d2) / (12.0 * step)
}

/// Monte Carlo mean of the JSA θ-gradient over `sweeps` recursive turn-level MIS
/// sweeps (after `burn_in`) against the posterior-expected gradient, on a
/// two-turn instance with four latent states. The error of each coordinate is
/// divided by the largest exact coordinate magnitude, so near-zero coordinates
/// are judged on the scale of the gradient rather than their own.
pub fn theta_gradient(seed: u64, sweeps: usize, burn_in: usize) -> Result<CheckResult> {
    let mut inst = TabularInstance::random(seed, 4, 2, InstanceKind::Independent)?;
    inst.pretrain_q(40, 0.02, seed)?;
    let pair = inst.pair();
    let d = &inst.dialog;
    let k = RestrictedKernel::new(&pair, &pair, d, &inst.space);
    let n = inst.p.n_params();

    let post = enumerate_posterior(&k, d, &inst.space)?;
    let mut exact = vec![0.0; n];
    for (idx, &w) in post.probs.iter().enumerate() {
        let traj: Vec<TokenSeq> = inst.space.decode_traj(idx, d.len()).into_iter().map(|j| inst.space.get(j).clone()).collect();
        let mut g = vec![0.0; n];
        latent_grads(&pair, d, &traj, &mut g, &mut []);
        exact.iter_mut().zip(&g).for_each(|(e, x)| *e += w * x);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial_latents(&k, d);
    let mut mc = vec![0.0; n];
    for s in 0..burn_in + sweeps {
        state = RecursiveTurnMis.sweep(&k, d, Some(&state), DecodeMode::Stochastic, &mut rng)?.latents;
        if s >= burn_in {
            latent_grads(&pair, d, &state, &mut mc, &mut []);
        }
    }
    mc.iter_mut().for_each(|x| *x /= sweeps as f64);

    let scale = exact.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let worst = exact.iter().zip(&mc).map(|(e, m)| (e - m).abs() / scale).fold(0.0, f64::max);
    Ok(CheckResult::at_most(
        "theta_gradient",
        worst,
        0.02,
        serde_json::json!({ "sweeps": sweeps, "burn_in": burn_in, "scale": scale }),
    ))
}

/// A history-free proposal: per-turn posterior marginals mixed with the uniform
/// distribution. It ignores the coupling between turns, so importance weights
/// still vary, while the uniform share keeps them bounded.
struct MarginalMixture {
    space: FiniteLatentSpace,
    log_q: Vec<Vec<f64>>,
}

impl MarginalMixture {
    fn new(post: &ExactPosterior, space: &FiniteLatentSpace, turns: usize, uniform_share: f64) -> Self {
        let u = uniform_share / space.len() as f64;
        let log_q = (0..turns)
            .map(|t| post.turn_marginal(space, t).iter().map(|m| ((1.0 - uniform_share) * m + u).ln()).collect())
            .collect();
        MarginalMixture { space: space.clone(), log_q }
    }
}

impl TurnKernel for MarginalMixture {
    fn log_p(&self, _: &Dialog, _: usize, _: &[TokenSeq], _: &[TokenId]) -> f64 {
        0.0
    }
    fn log_q(&self, _: &Dialog, t: usize, _: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.space.index_of(h).map_or(f64::NEG_INFINITY, |i| self.log_q[t][i])
    }
    fn propose(&self, _: &Dialog, t: usize, _: &[TokenSeq], _: DecodeMode, rng: &mut dyn RngCore) -> TokenSeq {
        self.space.get(draw_from_log_probs(&self.log_q[t], rng)).clone()
    }
}

/// Importance-sampled conditional marginal likelihood with `k` samples against
/// enumeration on `n` two-turn instances with four latent states. The proposal
/// is [`MarginalMixture`] with an even split.
pub fn marginal_likelihood(seed: u64, n: usize, k: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut errors = Vec::with_capacity(n);
    for i in 0..n {
        let kind = if i % 2 == 0 { InstanceKind::Independent } else { InstanceKind::Chained };
        let inst = TabularInstance::random(seed + i as u64, 4, 2, kind)?;
        let pair = inst.pair();
        let post = enumerate_posterior(&pair, &inst.dialog, &inst.space)?;
        let proposal = MarginalMixture::new(&post, &inst.space, inst.dialog.len(), 0.1);
        let kern = RestrictedKernel::new(&pair, &proposal, &inst.dialog, &inst.space);
        let est = marginal_ll_is(&kern, &inst.dialog, k, &mut rng)?;
        let err = (est - post.log_marginal).abs();
        errors.push(err);
        worst = worst.max(err);
    }
    Ok(CheckResult::at_most(
        "marginal_likelihood",
        worst,
        0.01,
        serde_json::json!({ "instances": n, "samples": k, "errors": errors }),
    ))
}
