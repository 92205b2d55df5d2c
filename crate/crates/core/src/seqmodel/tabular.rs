use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    emittable_mask, last_content, masked_log_softmax, soft_dot_dlogits, target_dlogits, Role, SeqModel, N_ROLES,
};
use crate::error::Result;
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularHyper {
    /// When set, the position at index `max_len - 1` can only be EOS.
    pub max_len: Option<usize>,
    /// Standard deviation of the initial logits; 0 gives the uniform model.
    pub init_scale: f64,
}

/// Logit table indexed by (previous content token, role, next token).
#[derive(Clone, Debug)]
pub struct Tabular {
    vocab: Arc<Vocab>,
    hyper: TabularHyper,
    params: Vec<f64>,
    emittable: Vec<bool>,
}

impl Tabular {
    pub fn uniform(vocab: Arc<Vocab>) -> Self {
        Tabular::with_hyper(vocab, TabularHyper::default(), 0)
    }

    pub fn with_hyper(vocab: Arc<Vocab>, hyper: TabularHyper, seed: u64) -> Self {
        let v = vocab.len();
        let mut params = vec![0.0; v * N_ROLES * v];
        if hyper.init_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in &mut params {
                // sum of uniforms, roughly gaussian
                let z: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * (3.0f64 / 4.0).sqrt();
                *p = hyper.init_scale * z;
            }
        }
        let emittable = emittable_mask(&vocab);
        Tabular {
            vocab,
            hyper,
            params,
            emittable,
        }
    }

    pub fn from_hyper(vocab: Arc<Vocab>, hyper: &serde_json::Value, seed: u64) -> Result<Self> {
        let h: TabularHyper = if hyper.is_null() {
            TabularHyper::default()
        } else {
            serde_json::from_value(hyper.clone())?
        };
        Ok(Tabular::with_hyper(vocab, h, seed))
    }

    /// Start of the logit row for `(key, role)`.
    pub fn row_offset(&self, key: TokenId, role: Role) -> usize {
        let v = self.vocab.len();
        (key as usize * N_ROLES + role as usize) * v
    }

    pub fn row_mut(&mut self, key: TokenId, role: Role) -> &mut [f64] {
        let v = self.vocab.len();
        let off = self.row_offset(key, role);
        &mut self.params[off..off + v]
    }

    fn forced_eos(&self, pos: usize) -> bool {
        matches!(self.hyper.max_len, Some(m) if pos + 1 >= m)
    }

    fn row_log_probs(&self, key: TokenId, role: Role, pos: usize, out: &mut [f64]) {
        if self.forced_eos(pos) {
            out.fill(f64::NEG_INFINITY);
            out[self.vocab.markers().eos as usize] = 0.0;
            return;
        }
        let off = self.row_offset(key, role);
        masked_log_softmax(&self.params[off..off + out.len()], &self.emittable, out);
    }

    /// Per-position `(key, key position in target, role)` for the whole target.
    fn walk(&self, context: &[TokenId], target: &[TokenId]) -> Vec<(TokenId, Option<usize>, Role)> {
        let m = self.vocab.markers();
        let (mut key, mut key_pos) = last_content(&m, context, &[]);
        let mut role = Role::Belief;
        let mut out = Vec::with_capacity(target.len());
        for (i, &t) in target.iter().enumerate() {
            out.push((key, key_pos, role));
            role = role.advance(&m, t);
            if !m.is_separator(t) {
                key = t;
                key_pos = Some(i);
            }
        }
        out
    }
}

impl SeqModel for Tabular {
    fn kind(&self) -> &'static str {
        "tabular"
    }

    fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    fn hyper(&self) -> serde_json::Value {
        serde_json::to_value(&self.hyper).expect("hyper serializes")
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn next_log_probs(&self, context: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let m = self.vocab.markers();
        let (key, _) = last_content(&m, context, prefix);
        let role = Role::of_prefix(&m, prefix);
        let mut out = vec![0.0; self.vocab.len()];
        self.row_log_probs(key, role, prefix.len(), &mut out);
        out
    }

    fn score(&self, context: &[TokenId], target: &[TokenId], mut grad: Option<(&mut [f64], f64)>) -> f64 {
        let v = self.vocab.len();
        let mut lp = vec![0.0; v];
        let mut dl = vec![0.0; v];
        let mut total = 0.0;
        for (i, (&t, &(key, _, role))) in target.iter().zip(&self.walk(context, target)).enumerate() {
            if self.vocab.is_forced(t) {
                continue;
            }
            self.row_log_probs(key, role, i, &mut lp);
            total += lp[t as usize];
            if let Some((g, scale)) = grad.as_mut() {
                if self.forced_eos(i) {
                    continue;
                }
                target_dlogits(&lp, t, &mut dl);
                let off = self.row_offset(key, role);
                for (gi, d) in g[off..off + v].iter_mut().zip(&dl) {
                    *gi += *scale * d;
                }
            }
        }
        total
    }

    fn input_grads(&self, context: &[TokenId], target: &[TokenId], positions: &[usize]) -> Vec<Vec<f64>> {
        let v = self.vocab.len();
        let walk = self.walk(context, target);
        let mut lps = Vec::with_capacity(target.len());
        for (i, &(key, _, role)) in walk.iter().enumerate() {
            let mut lp = vec![0.0; v];
            self.row_log_probs(key, role, i, &mut lp);
            lps.push(lp);
        }
        positions
            .iter()
            .map(|&j| {
                let mut g = vec![0.0; v];
                if !self.vocab.is_forced(target[j]) {
                    for (gi, lp) in g.iter_mut().zip(&lps[j]) {
                        if lp.is_finite() {
                            *gi = *lp;
                        }
                    }
                }
                // positions whose context key is the token at j
                let mut dl = vec![0.0; v];
                for i in j + 1..target.len() {
                    let (_, key_pos, role) = walk[i];
                    if key_pos != Some(j) {
                        break;
                    }
                    if self.vocab.is_forced(target[i]) || self.forced_eos(i) {
                        continue;
                    }
                    target_dlogits(&lps[i], target[i], &mut dl);
                    for (cand, gc) in g.iter_mut().enumerate() {
                        let off = self.row_offset(cand as TokenId, role);
                        let row = &self.params[off..off + v];
                        *gc += row.iter().zip(&dl).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                for (gc, &ok) in g.iter_mut().zip(&self.emittable) {
                    if !ok {
                        *gc = 0.0;
                    }
                }
                g
            })
            .collect()
    }

    fn soft_dot_grad(
        &self,
        context: &[TokenId],
        target: &[TokenId],
        dirs: &[(usize, Vec<f64>)],
        grad: &mut [f64],
        scale: f64,
    ) {
        let v = self.vocab.len();
        let walk = self.walk(context, target);
        let mut lp = vec![0.0; v];
        let mut dl = vec![0.0; v];
        for (j, dir) in dirs {
            let (key, _, role) = walk[*j];
            if self.forced_eos(*j) {
                continue;
            }
            self.row_log_probs(key, role, *j, &mut lp);
            soft_dot_dlogits(&lp, dir, &mut dl);
            let off = self.row_offset(key, role);
            for (gi, d) in grad[off..off + v].iter_mut().zip(&dl) {
                *gi += scale * d;
            }
        }
    }

    fn clone_box(&self) -> Box<dyn SeqModel> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::testutil::{fd_grad, rel_err};
    use crate::seqmodel::{grad_log_prob, log_prob, sample, DecodeMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Emittable tokens are EOS, SEP_B, SEP_A and the content tokens.
    fn vocab(content: &[&str]) -> Arc<Vocab> {
        Arc::new(Vocab::with_specials(content).unwrap())
    }

    #[test]
    fn uniform_init_log_prob() {
        // emittable: EOS, SEP_B, SEP_A, "x" -> 4 effective choices
        let v = vocab(&["x"]);
        assert_eq!(v.emittable_count(), 4);
        let m = Tabular::uniform(v.clone());
        let ctx = [v.markers().bos];
        let x = v.id("x").unwrap();
        let eos = v.markers().eos;
        let lp = log_prob(&m, &ctx, &[x, eos]).unwrap();
        assert!((lp - 2.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!((lp + 2.77259).abs() < 1e-5);
        let lp = log_prob(&m, &ctx, &[eos]).unwrap();
        assert!((lp + 1.38629).abs() < 1e-5);
    }

    /// Brute-force enumeration of every complete target up to the forced length.
    fn enumerate_targets(emittable: &[TokenId], eos: TokenId, max_len: usize) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
        while let Some(p) = frontier.pop() {
            let mut done = p.clone();
            done.push(eos);
            out.push(done);
            if p.len() + 1 < max_len {
                for &t in emittable {
                    if t != eos {
                        let mut q = p.clone();
                        q.push(t);
                        frontier.push(q);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forced_termination_model_normalizes() {
        let v = vocab(&["x", "y", "db:k"]);
        let hyper = TabularHyper {
            max_len: Some(4),
            init_scale: 1.3,
        };
        let m = Tabular::with_hyper(v.clone(), hyper, 5);
        let emit: Vec<TokenId> = (0..v.len() as TokenId).filter(|&t| v.is_emittable(t)).collect();
        let all = enumerate_targets(&emit, v.markers().eos, 4);
        let ctx = [v.markers().bos, v.id("y").unwrap()];
        let total: f64 = all.iter().map(|t| log_prob(&m, &ctx, t).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn next_token_distribution_normalizes() {
        let v = vocab(&["x", "y", "db:k"]);
        let m = Tabular::with_hyper(v.clone(), TabularHyper { max_len: None, init_scale: 2.0 }, 9);
        let lp = m.next_log_probs(&[v.markers().bos], &[v.id("x").unwrap()]);
        let s: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        for (i, l) in lp.iter().enumerate() {
            assert_eq!(l.is_finite(), v.is_emittable(i as TokenId));
        }
    }

    #[test]
    fn uniform_gradient_is_onehot_minus_uniform() {
        let v = vocab(&["x"]);
        let m = Tabular::uniform(v.clone());
        let mk = v.markers();
        let x = v.id("x").unwrap();
        // single scored token: target [EOS] after context ending in x
        let g = grad_log_prob(&m, &[mk.bos, x], &[mk.eos]).unwrap();
        let off = m.row_offset(x, Role::Belief);
        for t in 0..v.len() {
            let expect = if !v.is_emittable(t as TokenId) {
                0.0
            } else if t as TokenId == mk.eos {
                0.75
            } else {
                -0.25
            };
            assert!((g.0[off + t] - expect).abs() < 1e-12);
        }
        let nonzero = g.0.iter().filter(|x| **x != 0.0).count();
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = vocab(&["x", "y", "z", "db:k"]);
        let mut m = Tabular::with_hyper(v.clone(), TabularHyper { max_len: None, init_scale: 1.0 }, 2);
        let mk = v.markers();
        let (x, y, z, k) = (v.id("x").unwrap(), v.id("y").unwrap(), v.id("z").unwrap(), v.id("db:k").unwrap());
        let ctx = [mk.bos, y, z];
        let target = [x, mk.sep_b, k, mk.sep_db, y, mk.sep_a, z, x, mk.eos];
        let g = grad_log_prob(&m, &ctx, &target).unwrap();
        let coords: Vec<usize> = (0..g.0.len()).filter(|&i| g.0[i] != 0.0).collect();
        let fd = fd_grad(&mut m, &ctx, &target, &coords, 1e-4);
        for (&c, f) in coords.iter().zip(&fd) {
            assert!(rel_err(g.0[c], *f) < 1e-6, "coord {c}: {} vs {f}", g.0[c]);
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_parts() {
        let v = vocab(&["x", "y"]);
        let m = Tabular::with_hyper(v.clone(), TabularHyper { max_len: None, init_scale: 1.0 }, 4);
        let mk = v.markers();
        let (x, y) = (v.id("x").unwrap(), v.id("y").unwrap());
        let pairs = [(vec![mk.bos, x], vec![y, mk.eos]), (vec![mk.bos, y], vec![x, x, mk.eos])];
        let mut sum = crate::seqmodel::GradVector::zeros(m.n_params());
        let mut joint = vec![0.0; m.n_params()];
        for (c, t) in &pairs {
            sum.add_scaled(&grad_log_prob(&m, c, t).unwrap(), 1.0);
            m.score(c, t, Some((&mut joint, 1.0)));
        }
        for (a, b) in sum.0.iter().zip(&joint) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_follows_dominant_path_and_stochastic_is_seeded() {
        let v = vocab(&["x", "y"]);
        let mut m = Tabular::uniform(v.clone());
        let mk = v.markers();
        let (x, y) = (v.id("x").unwrap(), v.id("y").unwrap());
        m.row_mut(mk.bos, Role::Belief)[x as usize] = 5.0;
        m.row_mut(x, Role::Belief)[y as usize] = 5.0;
        m.row_mut(y, Role::Belief)[mk.eos as usize] = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let out = sample(&m, &[mk.bos], 10, DecodeMode::Greedy, &mut rng);
            assert_eq!(&out[..], &[x, y, mk.eos]);
        }
        let a = sample(&m, &[mk.bos], 10, DecodeMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample(&m, &[mk.bos], 10, DecodeMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_force_terminates() {
        let v = vocab(&["x"]);
        let mut m = Tabular::uniform(v.clone());
        let mk = v.markers();
        let x = v.id("x").unwrap();
        m.row_mut(mk.bos, Role::Belief)[x as usize] = 50.0;
        m.row_mut(x, Role::Belief)[x as usize] = 50.0;
        let out = sample(&m, &[mk.bos], 3, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&out[..], &[x, x, mk.eos]);
        let out = sample(&m, &[mk.bos], 1, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&out[..], &[mk.eos]);
    }

    #[test]
    fn empirical_next_token_frequencies_match() {
        let v = vocab(&["x", "y", "z"]);
        let m = Tabular::with_hyper(v.clone(), TabularHyper { max_len: None, init_scale: 1.0 }, 21);
        let ctx = [v.markers().bos];
        let lp = m.next_log_probs(&ctx, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts: HashMap<TokenId, usize> = HashMap::new();
        for _ in 0..n {
            let s = sample(&m, &ctx, 2, DecodeMode::Stochastic, &mut rng);
            *counts.entry(s[0]).or_default() += 1;
        }
        for (t, l) in lp.iter().enumerate() {
            let freq = *counts.get(&(t as TokenId)).unwrap_or(&0) as f64 / n as f64;
            assert!((freq - l.exp()).abs() < 0.01, "token {t}: {freq} vs {}", l.exp());
        }
    }

    #[test]
    fn input_grads_match_finite_differences_on_relaxed_rows() {
        // Compare against an explicit relaxed evaluation: replace the key row by a
        // convex mix and differentiate numerically.
        let v = vocab(&["x", "y", "z"]);
        let m = Tabular::with_hyper(v.clone(), TabularHyper { max_len: None, init_scale: 1.0 }, 8);
        let mk = v.markers();
        let (x, y, z) = (v.id("x").unwrap(), v.id("y").unwrap(), v.id("z").unwrap());
        let ctx = [mk.bos, z];
        let target = [x, y, mk.sep_b, z, mk.eos];
        let j = 1; // token y: target at 1, key for positions 2 and 3
        let g = &m.input_grads(&ctx, &target, &[j])[0];
        let vlen = v.len();
        let relaxed = |yrow: &[f64]| -> f64 {
            let walk = m.walk(&ctx, &target);
            let mut total = 0.0;
            for (i, &t) in target.iter().enumerate() {
                let (key, key_pos, role) = walk[i];
                let logits: Vec<f64> = if key_pos == Some(j) {
                    (0..vlen)
                        .map(|n| {
                            (0..vlen)
                                .map(|c| yrow[c] * m.params[m.row_offset(c as TokenId, role) + n])
                                .sum()
                        })
                        .collect()
                } else {
                    m.params[m.row_offset(key, role)..m.row_offset(key, role) + vlen].to_vec()
                };
                let mut lp = vec![0.0; vlen];
                masked_log_softmax(&logits, &m.emittable, &mut lp);
                if i == j {
                    total += (0..vlen).filter(|&c| lp[c].is_finite()).map(|c| yrow[c] * lp[c]).sum::<f64>();
                } else {
                    total += lp[t as usize];
                }
            }
            total
        };
        let mut onehot = vec![0.0; vlen];
        onehot[y as usize] = 1.0;
        for c in 0..vlen {
            if !v.is_emittable(c as TokenId) {
                assert_eq!(g[c], 0.0);
                continue;
            }
            let mut up = onehot.clone();
            up[c] += 1e-5;
            let mut down = onehot.clone();
            down[c] -= 1e-5;
            let fd = (relaxed(&up) - relaxed(&down)) / 2e-5;
            assert!(rel_err(g[c], fd) < 1e-5, "cand {c}: {} vs {fd}", g[c]);
        }
    }
}
