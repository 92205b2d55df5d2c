use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{emittable_mask, masked_log_softmax, soft_dot_dlogits, target_dlogits, Role, SeqModel, N_ROLES};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NGramHyper {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Number of most recent tokens fed to the MLP.
    pub window: usize,
    pub init_std: f64,
}

impl Default for NGramHyper {
    fn default() -> Self {
        NGramHyper {
            embed_dim: 16,
            hidden_dim: 32,
            window: 4,
            init_std: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    emb: usize,
    role_emb: usize,
    w: usize,
    c: usize,
    u: usize,
    bias: usize,
    ctx_bag: usize,
    prefix_bag: usize,
    total: usize,
}

impl Offsets {
    fn new(v: usize, h: &NGramHyper) -> Offsets {
        let d = h.embed_dim;
        let x = (h.window + 1) * d;
        let emb = 0;
        let role_emb = emb + v * d;
        let w = role_emb + N_ROLES * d;
        let c = w + h.hidden_dim * x;
        let u = c + h.hidden_dim;
        let bias = u + v * h.hidden_dim;
        let ctx_bag = bias + N_ROLES * v;
        let prefix_bag = ctx_bag + N_ROLES * v * v;
        let total = prefix_bag + N_ROLES * v * v;
        Offsets {
            emb,
            role_emb,
            w,
            c,
            u,
            bias,
            ctx_bag,
            prefix_bag,
            total,
        }
    }
}

/// Next-token scorer: a one-hidden-layer MLP over the last `window` tokens and the
/// span role, plus role-specific bag-of-words terms for the context and for the
/// target prefix.
#[derive(Clone, Debug)]
pub struct NeuralNGram {
    vocab: Arc<Vocab>,
    hyper: NGramHyper,
    off: Offsets,
    params: Vec<f64>,
    emittable: Vec<bool>,
}

/// Forward state for one target position.
struct Step {
    window: Vec<Option<TokenId>>,
    role: Role,
    x: Vec<f64>,
    h: Vec<f64>,
    lp: Vec<f64>,
}

impl NeuralNGram {
    pub fn new(vocab: Arc<Vocab>, hyper: NGramHyper, seed: u64) -> Self {
        let v = vocab.len();
        let off = Offsets::new(v, &hyper);
        let mut params = vec![0.0; off.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, std: f64, params: &mut [f64]| {
            let a = std * 3f64.sqrt();
            for p in &mut params[range] {
                *p = rng.gen_range(-a..=a);
            }
        };
        let fan_in = ((hyper.window + 1) * hyper.embed_dim) as f64;
        fill(off.emb..off.w, hyper.init_std, &mut params);
        fill(off.w..off.c, 1.0 / fan_in.sqrt(), &mut params);
        fill(off.u..off.bias, hyper.init_std, &mut params);
        let emittable = emittable_mask(&vocab);
        NeuralNGram {
            vocab,
            hyper,
            off,
            params,
            emittable,
        }
    }

    pub fn from_hyper(vocab: Arc<Vocab>, hyper: &serde_json::Value, seed: u64) -> Result<Self> {
        let h: NGramHyper = if hyper.is_null() {
            NGramHyper::default()
        } else {
            serde_json::from_value(hyper.clone())?
        };
        if h.embed_dim == 0 || h.hidden_dim == 0 {
            return Err(Error::Config("ngram dimensions must be positive".into()));
        }
        Ok(NeuralNGram::new(vocab, h, seed))
    }

    fn v(&self) -> usize {
        self.vocab.len()
    }

    fn bag_row(&self, base: usize, role: Role, w: TokenId) -> usize {
        let v = self.v();
        base + (role as usize * v + w as usize) * v
    }

    /// Sum of context-bag rows for each role.
    fn ctx_bags(&self, context: &[TokenId]) -> Vec<Vec<f64>> {
        let v = self.v();
        (0..N_ROLES)
            .map(|r| {
                let role = [Role::Belief, Role::Act, Role::Response][r];
                let mut acc = vec![0.0; v];
                for &w in context {
                    let off = self.bag_row(self.off.ctx_bag, role, w);
                    for (a, p) in acc.iter_mut().zip(&self.params[off..off + v]) {
                        *a += p;
                    }
                }
                acc
            })
            .collect()
    }

    fn step(&self, context: &[TokenId], prefix: &[TokenId], role: Role, bag: &[f64]) -> Step {
        let (v, d, hd, k) = (self.v(), self.hyper.embed_dim, self.hyper.hidden_dim, self.hyper.window);
        let mut window = vec![None; k];
        // window[k-1] is the most recent token
        let total = context.len() + prefix.len();
        for m in 0..k.min(total) {
            let idx = total - 1 - m;
            let tok = if idx >= context.len() {
                prefix[idx - context.len()]
            } else {
                context[idx]
            };
            window[k - 1 - m] = Some(tok);
        }
        let mut x = vec![0.0; (k + 1) * d];
        for (m, w) in window.iter().enumerate() {
            if let Some(w) = w {
                let e = self.off.emb + *w as usize * d;
                x[m * d..(m + 1) * d].copy_from_slice(&self.params[e..e + d]);
            }
        }
        let r = self.off.role_emb + role as usize * d;
        x[k * d..].copy_from_slice(&self.params[r..r + d]);
        let xl = x.len();
        let mut h = vec![0.0; hd];
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.params[self.off.w + j * xl..self.off.w + (j + 1) * xl];
            let z: f64 = self.params[self.off.c + j] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            *hj = z.tanh();
        }
        let mut logits = bag.to_vec();
        let b = self.off.bias + role as usize * v;
        for (n, l) in logits.iter_mut().enumerate() {
            let urow = &self.params[self.off.u + n * hd..self.off.u + (n + 1) * hd];
            *l += self.params[b + n] + urow.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut lp = vec![0.0; v];
        masked_log_softmax(&logits, &self.emittable, &mut lp);
        Step { window, role, x, h, lp }
    }

    /// Runs every position of `target`; the bag passed to position `i` covers the
    /// context and `target[..i]`.
    fn forward(&self, context: &[TokenId], target: &[TokenId]) -> Vec<Step> {
        let v = self.v();
        let m = self.vocab.markers();
        let ctx = self.ctx_bags(context);
        let mut prefix_bags = vec![vec![0.0; v]; N_ROLES];
        let mut role = Role::Belief;
        let mut steps = Vec::with_capacity(target.len());
        let mut bag = vec![0.0; v];
        for i in 0..target.len() {
            let r = role as usize;
            for ((b, c), p) in bag.iter_mut().zip(&ctx[r]).zip(&prefix_bags[r]) {
                *b = c + p;
            }
            steps.push(self.step(context, &target[..i], role, &bag));
            let t = target[i];
            for (ri, pb) in prefix_bags.iter_mut().enumerate() {
                let role_i = [Role::Belief, Role::Act, Role::Response][ri];
                let off = self.bag_row(self.off.prefix_bag, role_i, t);
                for (a, p) in pb.iter_mut().zip(&self.params[off..off + v]) {
                    *a += p;
                }
            }
            role = role.advance(&m, t);
        }
        steps
    }

    /// Backpropagates `dl` (gradient w.r.t. the logits at position `i`) into `grad`,
    /// except for the bag terms, which callers handle.
    fn backprop_mlp(&self, step: &Step, dl: &[f64], grad: &mut [f64]) {
        let (v, d, hd, k) = (self.v(), self.hyper.embed_dim, self.hyper.hidden_dim, self.hyper.window);
        let b = self.off.bias + step.role as usize * v;
        let mut dh = vec![0.0; hd];
        for n in 0..v {
            let g = dl[n];
            if g == 0.0 {
                continue;
            }
            grad[b + n] += g;
            let u = self.off.u + n * hd;
            for j in 0..hd {
                grad[u + j] += g * step.h[j];
                dh[j] += g * self.params[u + j];
            }
        }
        let xl = step.x.len();
        let mut dx = vec![0.0; xl];
        for j in 0..hd {
            let dz = dh[j] * (1.0 - step.h[j] * step.h[j]);
            if dz == 0.0 {
                continue;
            }
            grad[self.off.c + j] += dz;
            let w = self.off.w + j * xl;
            for q in 0..xl {
                grad[w + q] += dz * step.x[q];
                dx[q] += dz * self.params[w + q];
            }
        }
        for (m, w) in step.window.iter().enumerate() {
            if let Some(w) = w {
                let e = self.off.emb + *w as usize * d;
                for q in 0..d {
                    grad[e + q] += dx[m * d + q];
                }
            }
        }
        let r = self.off.role_emb + step.role as usize * d;
        for q in 0..d {
            grad[r + q] += dx[k * d + q];
        }
    }

    /// Applies per-position logit gradients to every bag row that fed them.
    fn backprop_bags(&self, context: &[TokenId], target: &[TokenId], steps: &[Step], dls: &[Option<Vec<f64>>], grad: &mut [f64]) {
        let v = self.v();
        // per role: sum of dl over positions (for context), suffix sums (for prefix)
        let mut by_role = vec![vec![0.0; v]; N_ROLES];
        let mut suffix = vec![vec![0.0; v]; N_ROLES];
        for i in (0..target.len()).rev() {
            // suffix currently covers positions > i; token i feeds exactly those
            for (ri, s) in suffix.iter().enumerate() {
                if s.iter().any(|x| *x != 0.0) {
                    let role = [Role::Belief, Role::Act, Role::Response][ri];
                    let off = self.bag_row(self.off.prefix_bag, role, target[i]);
                    for (g, x) in grad[off..off + v].iter_mut().zip(s) {
                        *g += x;
                    }
                }
            }
            if let Some(dl) = &dls[i] {
                let r = steps[i].role as usize;
                for n in 0..v {
                    suffix[r][n] += dl[n];
                    by_role[r][n] += dl[n];
                }
            }
        }
        for (ri, s) in by_role.iter().enumerate() {
            if s.iter().all(|x| *x == 0.0) {
                continue;
            }
            let role = [Role::Belief, Role::Act, Role::Response][ri];
            for &w in context {
                let off = self.bag_row(self.off.ctx_bag, role, w);
                for (g, x) in grad[off..off + v].iter_mut().zip(s) {
                    *g += x;
                }
            }
        }
    }

    fn apply(&self, context: &[TokenId], target: &[TokenId], steps: &[Step], dls: Vec<Option<Vec<f64>>>, grad: &mut [f64]) {
        for (step, dl) in steps.iter().zip(&dls) {
            if let Some(dl) = dl {
                self.backprop_mlp(step, dl, grad);
            }
        }
        self.backprop_bags(context, target, steps, &dls, grad);
    }

    /// Gradient of `Σ_n E[v]·dx` style reads: `dx_block · E[v]` for every candidate `v`.
    fn embed_dot(&self, dx_block: &[f64], out: &mut [f64]) {
        let d = self.hyper.embed_dim;
        for (cand, o) in out.iter_mut().enumerate() {
            let e = self.off.emb + cand * d;
            *o += self.params[e..e + d].iter().zip(dx_block).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Gradient of the logits' effect on the MLP input for one position.
    fn dx_of(&self, step: &Step, dl: &[f64]) -> Vec<f64> {
        let (v, hd) = (self.v(), self.hyper.hidden_dim);
        let mut dh = vec![0.0; hd];
        for n in 0..v {
            if dl[n] != 0.0 {
                let u = self.off.u + n * hd;
                for j in 0..hd {
                    dh[j] += dl[n] * self.params[u + j];
                }
            }
        }
        let xl = step.x.len();
        let mut dx = vec![0.0; xl];
        for j in 0..hd {
            let dz = dh[j] * (1.0 - step.h[j] * step.h[j]);
            let w = self.off.w + j * xl;
            for q in 0..xl {
                dx[q] += dz * self.params[w + q];
            }
        }
        dx
    }
}

impl SeqModel for NeuralNGram {
    fn kind(&self) -> &'static str {
        "ngram"
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
        let v = self.v();
        let m = self.vocab.markers();
        let role = Role::of_prefix(&m, prefix);
        let mut bag = self.ctx_bags(context).swap_remove(role as usize);
        for &t in prefix {
            let off = self.bag_row(self.off.prefix_bag, role, t);
            for (a, p) in bag.iter_mut().zip(&self.params[off..off + v]) {
                *a += p;
            }
        }
        self.step(context, prefix, role, &bag).lp
    }

    fn score(&self, context: &[TokenId], target: &[TokenId], grad: Option<(&mut [f64], f64)>) -> f64 {
        let steps = self.forward(context, target);
        let total = target
            .iter()
            .zip(&steps)
            .filter(|(&t, _)| !self.vocab.is_forced(t))
            .map(|(&t, s)| s.lp[t as usize])
            .sum();
        if let Some((g, scale)) = grad {
            let v = self.v();
            let dls = target
                .iter()
                .zip(&steps)
                .map(|(&t, s)| {
                    if self.vocab.is_forced(t) {
                        return None;
                    }
                    let mut dl = vec![0.0; v];
                    target_dlogits(&s.lp, t, &mut dl);
                    dl.iter_mut().for_each(|x| *x *= scale);
                    Some(dl)
                })
                .collect();
            self.apply(context, target, &steps, dls, g);
        }
        total
    }

    fn input_grads(&self, context: &[TokenId], target: &[TokenId], positions: &[usize]) -> Vec<Vec<f64>> {
        let (v, d, k) = (self.v(), self.hyper.embed_dim, self.hyper.window);
        let steps = self.forward(context, target);
        let dls: Vec<Option<Vec<f64>>> = target
            .iter()
            .zip(&steps)
            .map(|(&t, s)| {
                (!self.vocab.is_forced(t)).then(|| {
                    let mut dl = vec![0.0; v];
                    target_dlogits(&s.lp, t, &mut dl);
                    dl
                })
            })
            .collect();
        let dxs: Vec<Option<Vec<f64>>> = steps
            .iter()
            .zip(&dls)
            .map(|(s, dl)| dl.as_ref().map(|dl| self.dx_of(s, dl)))
            .collect();
        positions
            .iter()
            .map(|&j| {
                let mut g = vec![0.0; v];
                if !self.vocab.is_forced(target[j]) {
                    for (gi, lp) in g.iter_mut().zip(&steps[j].lp) {
                        if lp.is_finite() {
                            *gi = *lp;
                        }
                    }
                }
                let mut suffix = vec![vec![0.0; v]; N_ROLES];
                for i in j + 1..target.len() {
                    let Some(dl) = &dls[i] else { continue };
                    let r = steps[i].role as usize;
                    for n in 0..v {
                        suffix[r][n] += dl[n];
                    }
                    // token j sits at window slot k-1-(i-1-j) when within range
                    let back = i - 1 - j;
                    if back < k {
                        let m = k - 1 - back;
                        let dx = dxs[i].as_ref().expect("dx exists when dl exists");
                        self.embed_dot(&dx[m * d..(m + 1) * d], &mut g);
                    }
                }
                for (ri, s) in suffix.iter().enumerate() {
                    if s.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    let role = [Role::Belief, Role::Act, Role::Response][ri];
                    for (cand, gc) in g.iter_mut().enumerate() {
                        let off = self.bag_row(self.off.prefix_bag, role, cand as TokenId);
                        *gc += self.params[off..off + v].iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
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
        let v = self.v();
        let steps = self.forward(context, target);
        let mut dls: Vec<Option<Vec<f64>>> = vec![None; target.len()];
        for (j, dir) in dirs {
            let mut dl = vec![0.0; v];
            soft_dot_dlogits(&steps[*j].lp, dir, &mut dl);
            let slot = dls[*j].get_or_insert_with(|| vec![0.0; v]);
            for (s, x) in slot.iter_mut().zip(&dl) {
                *s += scale * x;
            }
        }
        self.apply(context, target, &steps, dls, grad);
    }

    fn clone_box(&self) -> Box<dyn SeqModel> {
        Box::new(self.clone())
    }
}
