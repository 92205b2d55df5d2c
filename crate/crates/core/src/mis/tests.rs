use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dialog::TurnRecord;
use crate::seqmodel::layout::NoDatabase;
use crate::seqmodel::{Role, Tabular, TabularHyper};
use crate::vocab::Vocab;

fn vocab() -> Arc<Vocab> {
    Arc::new(Vocab::with_specials(["x", "y"]).unwrap())
}

fn dialog(v: &Vocab, turns: &[(&[&str], &[&str])]) -> Dialog {
    Dialog {
        id: "d0".into(),
        turns: turns
            .iter()
            .map(|(u, r)| TurnRecord {
                u: v.encode(u).unwrap(),
                r: v.encode(r).unwrap(),
                ..Default::default()
            })
            .collect(),
        labeled: false,
    }
}

fn random_tabular(v: &Arc<Vocab>, seed: u64) -> Tabular {
    Tabular::with_hyper(v.clone(), TabularHyper { max_len: None, init_scale: 1.0 }, seed)
}

/// Shifts every generative log-factor by a constant.
struct Shifted<'a>(&'a dyn TurnKernel, f64);

impl TurnKernel for Shifted<'_> {
    fn log_p(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.0.log_p(d, t, hist, h) + self.1
    }
    fn log_q(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.0.log_q(d, t, hist, h)
    }
    fn propose(&self, d: &Dialog, t: usize, hist: &[TokenSeq], mode: DecodeMode, rng: &mut dyn RngCore) -> TokenSeq {
        self.0.propose(d, t, hist, mode, rng)
    }
}

/// Generative factor equal to the proposal density plus a constant.
struct Proportional<'a>(&'a dyn TurnKernel);

impl TurnKernel for Proportional<'_> {
    fn log_p(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.0.log_q(d, t, hist, h) - 0.7
    }
    fn log_q(&self, d: &Dialog, t: usize, hist: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.0.log_q(d, t, hist, h)
    }
    fn propose(&self, d: &Dialog, t: usize, hist: &[TokenSeq], mode: DecodeMode, rng: &mut dyn RngCore) -> TokenSeq {
        self.0.propose(d, t, hist, mode, rng)
    }
}

#[test]
fn hand_computed_weight() {
    let v = vocab();
    let m = v.markers();
    let x = v.id("x").unwrap();
    let mut p = Tabular::uniform(v.clone());
    p.row_mut(x, Role::Belief)[m.sep_b as usize] = 2f64.ln();
    let q = Tabular::uniform(v.clone());
    let k = ModelPair {
        p: &p,
        q: &q,
        db: &NoDatabase,
        max_latent_len: 8,
    };
    let d = dialog(&v, &[(&["x"], &["y"])]);
    let h = TokenSeq(vec![m.sep_b, m.eos]);
    // p: SEP_B 2/6, then SEP_A, y, EOS at 1/5 each; q: SEP_B, EOS at 1/5 each
    let expect_p = (1.0f64 / 3.0).ln() + 3.0 * (0.2f64).ln();
    let expect_q = 2.0 * (0.2f64).ln();
    assert!((k.log_p(&d, 0, &[], &h) - expect_p).abs() < 1e-12);
    assert!((k.log_q(&d, 0, &[], &h) - expect_q).abs() < 1e-12);
    let w = importance_log_weight(&k, &d, 0, &[], &h);
    assert!((w + 15f64.ln()).abs() < 1e-12);
}

#[test]
fn malformed_latent_has_zero_weight() {
    let v = vocab();
    let m = v.markers();
    let p = random_tabular(&v, 1);
    let q = random_tabular(&v, 2);
    let k = ModelPair { p: &p, q: &q, db: &NoDatabase, max_latent_len: 8 };
    let d = dialog(&v, &[(&["x"], &["y"])]);
    let x = v.id("x").unwrap();
    assert_eq!(importance_log_weight(&k, &d, 0, &[], &[x, m.eos]), f64::NEG_INFINITY);
    assert_eq!(importance_log_weight(&k, &d, 0, &[], &[m.sep_b, m.sep_b, m.eos]), f64::NEG_INFINITY);
}

#[test]
fn identical_proposal_is_always_accepted() {
    let v = vocab();
    let m = v.markers();
    let p = random_tabular(&v, 3);
    let mut q = Tabular::uniform(v.clone());
    let y = v.id("y").unwrap();
    // greedy proposal from q given context ending in y: [SEP_B, EOS]
    q.row_mut(y, Role::Belief)[m.sep_b as usize] = 3.0;
    q.row_mut(y, Role::Act)[m.eos as usize] = 3.0;
    let k = ModelPair { p: &p, q: &q, db: &NoDatabase, max_latent_len: 8 };
    let d = dialog(&v, &[(&["x"], &["y"])]);
    let cached = TokenSeq(vec![m.sep_b, m.eos]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let out = mis_turn_step(&k, &d, 0, &[], Some(&cached), DecodeMode::Greedy, &mut rng).unwrap();
        assert!(out.accepted);
        assert_eq!(out.log_ratio, 0.0);
        assert_eq!(out.h, cached);
    }
}

#[test]
fn malformed_cache_is_always_replaced() {
    let v = vocab();
    let m = v.markers();
    let p = random_tabular(&v, 4);
    let q = random_tabular(&v, 5);
    let k = ModelPair { p: &p, q: &q, db: &NoDatabase, max_latent_len: 8 };
    let d = dialog(&v, &[(&["x"], &["y"])]);
    let bad = TokenSeq(vec![m.eos]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let out = mis_turn_step(&k, &d, 0, &[], Some(&bad), DecodeMode::Stochastic, &mut rng).unwrap();
        assert!(out.accepted);
    }
}

#[test]
fn missing_cache_is_a_contract_error() {
    let v = vocab();
    let p = random_tabular(&v, 4);
    let k = ModelPair { p: &p, q: &p, db: &NoDatabase, max_latent_len: 8 };
    let d = dialog(&v, &[(&["x"], &["y"])]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = mis_turn_step(&k, &d, 0, &[], None, DecodeMode::Greedy, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let err = RecursiveTurnMis.sweep(&k, &d, None, DecodeMode::Greedy, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn constant_shift_leaves_decisions_unchanged() {
    let v = vocab();
    let p = random_tabular(&v, 6);
    let q = random_tabular(&v, 7);
    let k = ModelPair { p: &p, q: &q, db: &NoDatabase, max_latent_len: 6 };
    let shifted = Shifted(&k, 3.25);
    let d = dialog(&v, &[(&["x"], &["y"]), (&["y"], &["x", "x"]), (&["x", "y"], &[])]);
    let init = initial_latents(&k, &d);
    for s in [&RecursiveTurnMis as &dyn LatentSampler, &SessionMis] {
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let mut c1 = init.clone();
        let mut c2 = init.clone();
        for _ in 0..300 {
            let a = s.sweep(&k, &d, Some(&c1), DecodeMode::Stochastic, &mut r1).unwrap();
            let b = s.sweep(&shifted, &d, Some(&c2), DecodeMode::Stochastic, &mut r2).unwrap();
            assert_eq!(a, b);
            c1 = a.latents;
            c2 = b.latents;
        }
    }
}

#[test]
fn single_turn_sweep_is_one_step() {
    let v = vocab();
    let p = random_tabular(&v, 9);
    let q = random_tabular(&v, 10);
    let k = ModelPair { p: &p, q: &q, db: &NoDatabase, max_latent_len: 6 };
    let d = dialog(&v, &[(&["x"], &["y"])]);
    let cached = initial_latents(&k, &d);
    for seed in 0..50 {
        let sweep = RecursiveTurnMis
            .sweep(&k, &d, Some(&cached), DecodeMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        let step = mis_turn_step(&k, &d, 0, &[], Some(&cached[0]), DecodeMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        assert_eq!(sweep.latents, vec![step.h]);
        assert_eq!(sweep.accepted, vec![step.accepted]);
        // at one turn the session sampler makes the same draw and decision
        let sess = SessionMis
            .sweep(&k, &d, Some(&cached), DecodeMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        assert_eq!(sess, sweep);
    }
}

#[test]
fn session_weight_is_sum_of_turn_weights() {
    let v = vocab();
    let p = random_tabular(&v, 11);
    let q = random_tabular(&v, 12);
    let k = ModelPair { p: &p, q: &q, db: &NoDatabase, max_latent_len: 6 };
    let d = dialog(&v, &[(&["x"], &["y"]), (&["y"], &["x"]), (&[], &[])]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let traj = propose_trajectory(&k, &d, DecodeMode::Stochastic, &mut rng);
        let parts: f64 = (0..3).map(|t| importance_log_weight(&k, &d, t, &traj[..t], &traj[t])).sum();
        let total = session_log_weight(&k, &d, &traj);
        if parts.is_finite() {
            assert!((parts - total).abs() < 1e-12);
        } else {
            assert_eq!(total, f64::NEG_INFINITY);
        }
    }
}

#[test]
fn propose_only_greedy_is_deterministic_and_matches_mis_when_p_tracks_q() {
    let v = vocab();
    let p = random_tabular(&v, 13);
    let q = random_tabular(&v, 14);
    let k = ModelPair { p: &p, q: &q, db: &NoDatabase, max_latent_len: 6 };
    let d = dialog(&v, &[(&["x"], &["y"]), (&["y"], &["x"])]);
    let a = ProposeOnly.sweep(&k, &d, None, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = ProposeOnly.sweep(&k, &d, None, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);

    let prop = Proportional(&k);
    let cached = initial_latents(&k, &d);
    for seed in 0..30 {
        let mis = RecursiveTurnMis
            .sweep(&prop, &d, Some(&cached), DecodeMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        assert!(mis.accepted.iter().all(|&x| x));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the MIS sweep consumes one extra uniform per turn after each proposal
        let mut expect = Vec::new();
        for t in 0..d.len() {
            expect.push(prop.propose(&d, t, &expect, DecodeMode::Stochastic, &mut rng));
            let _: f64 = rng.gen();
        }
        assert_eq!(mis.latents, expect);
    }
}

#[test]
fn run_sampler_keeps_cache_coherent() {
    let v = vocab();
    let p = random_tabular(&v, 15);
    let q = random_tabular(&v, 16);
    let k = ModelPair { p: &p, q: &q, db: &NoDatabase, max_latent_len: 6 };
    let d = dialog(&v, &[(&["x"], &["y"]), (&["y"], &["x"])]);
    let reg = SamplerRegistry::default();
    assert_eq!(reg.names(), ["none", "session", "turn"]);
    let mut cache = LatentCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in reg.names() {
        for _ in 0..10 {
            let s = run_sampler(reg.get(name).unwrap(), &k, &d, &mut cache, DecodeMode::Stochastic, &mut rng).unwrap();
            assert_eq!(cache.get("d0").unwrap().latents, s.latents);
        }
    }
    let e = cache.get("d0").unwrap();
    assert_eq!(e.proposed, vec![30, 30]);
    let rate = cache.acceptance_rate().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert!(reg.get("gibbs").is_err());
}

#[test]
fn cache_snapshot_round_trip() {
    let v = vocab();
    let m = v.markers();
    let mut cache = LatentCache::new();
    cache.insert("a", vec![TokenSeq(vec![m.sep_b, m.eos]), TokenSeq(vec![5, m.sep_b, 6, m.eos])]);
    cache.record(
        "b",
        &Sweep {
            latents: vec![TokenSeq(vec![6, m.sep_b, m.eos])],
            accepted: vec![true],
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    cache.write_jsonl(&v, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"<sep_b>\""));
    assert_eq!(LatentCache::read_jsonl(&v, &path).unwrap(), cache);
}
