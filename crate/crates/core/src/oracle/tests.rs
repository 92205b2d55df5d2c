use super::*;
use crate::mis::RecursiveTurnMis;
use crate::seqmodel::layout::join_latent;

/// Fixed per-latent factors independent of history.
struct Fixed(FiniteLatentSpace, Vec<f64>);

impl TurnKernel for Fixed {
    fn log_p(&self, _: &Dialog, _: usize, _: &[TokenSeq], h: &[TokenId]) -> f64 {
        self.0.index_of(h).map_or(f64::NEG_INFINITY, |i| self.1[i])
    }
    fn log_q(&self, _: &Dialog, _: usize, _: &[TokenSeq], _: &[TokenId]) -> f64 {
        0.0
    }
    fn propose(&self, _: &Dialog, _: usize, _: &[TokenSeq], _: DecodeMode, _: &mut dyn RngCore) -> TokenSeq {
        self.0.get(0).clone()
    }
}

fn fixed_kernel(lp: Vec<f64>, turns: usize) -> (Dialog, FiniteLatentSpace, Fixed) {
    let inst = TabularInstance::random(0, lp.len(), turns, InstanceKind::Independent).unwrap();
    let space = inst.space.clone();
    (inst.dialog, space.clone(), Fixed(space, lp))
}

#[test]
fn space_rejects_malformed_and_deduplicates() {
    let inst = TabularInstance::random(1, 4, 2, InstanceKind::Independent).unwrap();
    let m = inst.vocab.markers();
    let h = join_latent(&m, &[5], &[]);
    let s = FiniteLatentSpace::new(&m, vec![h.clone(), h.clone()]).unwrap();
    assert_eq!(s.len(), 1);
    assert!(FiniteLatentSpace::new(&m, vec![TokenSeq(vec![m.eos])]).is_err());
    assert!(FiniteLatentSpace::new(&m, vec![]).is_err());
}

#[test]
fn single_turn_posterior_by_hand() {
    let (d, space, k) = fixed_kernel(vec![(0.2f64).ln(), (0.6f64).ln()], 1);
    let post = enumerate_posterior(&k, &d, &space).unwrap();
    assert!((post.probs[0] - 0.25).abs() < 1e-12);
    assert!((post.probs[1] - 0.75).abs() < 1e-12);
    assert!((post.log_marginal - (0.8f64).ln()).abs() < 1e-12);
}

#[test]
fn uniform_factors_give_uniform_posterior() {
    let (d, space, k) = fixed_kernel(vec![-1.0, -1.0], 3);
    let post = enumerate_posterior(&k, &d, &space).unwrap();
    for p in &post.probs {
        assert!((p - 1.0 / 8.0).abs() < 1e-12);
    }
    assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
}

#[test]
fn turn_marginals_sum_to_one_and_match_recursion_at_last_turn() {
    let inst = TabularInstance::random(4, 4, 2, InstanceKind::Chained).unwrap();
    let pair = inst.pair();
    let post = enumerate_posterior(&pair, &inst.dialog, &inst.space).unwrap();
    for t in 0..2 {
        let m = post.turn_marginal(&inst.space, t);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(check_recursion(&pair, &inst.dialog, &inst.space).unwrap() < 1e-12);
}

#[test]
fn recursion_is_trivial_for_one_turn() {
    let inst = TabularInstance::random(5, 4, 1, InstanceKind::Independent).unwrap();
    let pair = inst.pair();
    let bad = NonMarkov { inner: &pair, bonus: 3.0 };
    assert_eq!(check_recursion(&pair, &inst.dialog, &inst.space).unwrap(), 0.0);
    assert_eq!(check_recursion(&bad, &inst.dialog, &inst.space).unwrap(), 0.0);
}

#[test]
fn budget_is_enforced() {
    let inst = TabularInstance::random(6, 16, 5, InstanceKind::Independent).unwrap();
    let pair = inst.pair();
    assert!(matches!(
        enumerate_posterior(&pair, &inst.dialog, &inst.space),
        Err(Error::Budget { needed: 1_048_576, .. })
    ));
}

#[test]
fn tv_examples() {
    assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    assert!((tv_distance(&[0.7, 0.3], &[0.5, 0.5]) - 0.2).abs() < 1e-15);
}

#[test]
fn greedy_stationarity_is_rejected() {
    let inst = TabularInstance::random(7, 4, 2, InstanceKind::Independent).unwrap();
    let pair = inst.pair();
    let k = RestrictedKernel::new(&pair, &pair, &inst.dialog, &inst.space);
    let err = stationarity_report(&k, &inst.dialog, &RecursiveTurnMis, None, 10, 0, DecodeMode::Greedy, 0).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn restricted_proposal_is_normalized() {
    let inst = TabularInstance::random(8, 4, 3, InstanceKind::Chained).unwrap();
    let pair = inst.pair();
    let k = RestrictedKernel::new(&pair, &pair, &inst.dialog, &inst.space);
    for t in 0..3 {
        let prevs: Vec<Option<usize>> = if t == 0 { vec![None] } else { (0..4).map(Some).collect() };
        for prev in prevs {
            let s: f64 = k.proposal_row(t, prev).iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
