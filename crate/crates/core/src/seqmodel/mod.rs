//! Conditional autoregressive categorical sequence models.
//!
//! Both the generative model and the inference model are instances of
//! [`SeqModel`]. A model scores a complete target sequence given a context
//! sequence; all arithmetic is done in the log domain in `f64`.
//!
//! Two variants are registered by name in [`ModelRegistry`]:
//! `tabular` (next token conditioned on the previous content token and span role)
//! and `ngram` (windowed MLP scorer with bag-of-context terms).

pub mod layout;
mod ngram;
mod tabular;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Markers, TokenId, TokenSeq, Vocab};

pub use ngram::{NGramHyper, NeuralNGram};
pub use tabular::{Tabular, TabularHyper};

/// Coarse position role of a target position, derived from the separators
/// already present in the target prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Belief = 0,
    Act = 1,
    Response = 2,
}

pub const N_ROLES: usize = 3;

impl Role {
    pub fn of_prefix(markers: &Markers, prefix: &[TokenId]) -> Role {
        let mut role = Role::Belief;
        for &t in prefix {
            if t == markers.sep_a {
                return Role::Response;
            }
            if t == markers.sep_b {
                role = Role::Act;
            }
        }
        role
    }

    /// Role of the next position after `prev` given the role at `prev`.
    pub(crate) fn advance(self, markers: &Markers, tok: TokenId) -> Role {
        if tok == markers.sep_a {
            Role::Response
        } else if tok == markers.sep_b && self == Role::Belief {
            Role::Act
        } else {
            self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Stochastic,
    Greedy,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(DecodeMode::Stochastic),
            "greedy" => Ok(DecodeMode::Greedy),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

/// Gradient with the same layout as the owning model's parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(n: usize) -> Self {
        GradVector(vec![0.0; n])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// A trainable conditional sequence scorer.
///
/// Positions whose target token is forced (see [`Vocab::is_forced`]) contribute
/// zero to scores and gradients but remain visible as context for later positions.
pub trait SeqModel: Send + Sync {
    fn kind(&self) -> &'static str;
    fn vocab(&self) -> &Arc<Vocab>;
    fn hyper(&self) -> serde_json::Value;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Next-token log-probabilities after `prefix`; non-emittable tokens get `-inf`.
    fn next_log_probs(&self, context: &[TokenId], prefix: &[TokenId]) -> Vec<f64>;

    /// Sum of log-probabilities over the free positions of `target`. When `grad`
    /// is given, `scale · ∇ log p` is accumulated into it.
    fn score(&self, context: &[TokenId], target: &[TokenId], grad: Option<(&mut [f64], f64)>) -> f64;

    /// For each requested target position `j`, the gradient of the sequence
    /// log-probability with respect to the one-hot row of token `j`, treating the
    /// row as a continuous input wherever it is read (as a prediction target and as
    /// conditioning for later positions). Entries for non-emittable tokens are 0.
    fn input_grads(&self, context: &[TokenId], target: &[TokenId], positions: &[usize]) -> Vec<Vec<f64>>;

    /// Accumulates `scale · ∇ Σ_j softmax_j · dir_j` where `softmax_j` is the
    /// next-token distribution at target position `j` (conditioned on the hard prefix).
    fn soft_dot_grad(
        &self,
        context: &[TokenId],
        target: &[TokenId],
        dirs: &[(usize, Vec<f64>)],
        grad: &mut [f64],
        scale: f64,
    );

    fn clone_box(&self) -> Box<dyn SeqModel>;

    fn n_params(&self) -> usize {
        self.params().len()
    }
}

impl Clone for Box<dyn SeqModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// A target is complete when it ends with EOS and has no other EOS.
pub fn check_complete(markers: &Markers, target: &[TokenId]) -> Result<()> {
    match target.split_last() {
        Some((&last, body)) if last == markers.eos && !body.contains(&markers.eos) => Ok(()),
        _ => Err(Error::Contract("target sequence is not EOS-terminated".into())),
    }
}

pub fn log_prob(model: &dyn SeqModel, context: &[TokenId], target: &[TokenId]) -> Result<f64> {
    let vocab = model.vocab();
    vocab.check(context)?;
    vocab.check(target)?;
    check_complete(&vocab.markers(), target)?;
    Ok(model.score(context, target, None))
}

pub fn grad_log_prob(model: &dyn SeqModel, context: &[TokenId], target: &[TokenId]) -> Result<GradVector> {
    let vocab = model.vocab();
    vocab.check(context)?;
    vocab.check(target)?;
    check_complete(&vocab.markers(), target)?;
    let mut g = GradVector::zeros(model.n_params());
    model.score(context, target, Some((&mut g.0, 1.0)));
    Ok(g)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn draw_from_log_probs<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_ok = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        last_ok = i;
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    last_ok
}

pub fn choose<R: Rng + ?Sized>(log_probs: &[f64], mode: DecodeMode, rng: &mut R) -> TokenId {
    match mode {
        DecodeMode::Greedy => argmax(log_probs) as TokenId,
        DecodeMode::Stochastic => draw_from_log_probs(log_probs, rng) as TokenId,
    }
}

/// Autoregressive decode. Output ends with EOS and has at most `max_len` tokens;
/// if no EOS was produced after `max_len - 1` tokens, EOS is appended.
pub fn sample<R: Rng + ?Sized>(
    model: &dyn SeqModel,
    context: &[TokenId],
    max_len: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> TokenSeq {
    sample_with(model, context, max_len, mode, rng, |_, _| None)
}

/// Like [`sample`], but after each emitted token `inject(prefix, token)` may return
/// tokens that are appended deterministically (they do not count towards `max_len`).
pub fn sample_with<R, F>(
    model: &dyn SeqModel,
    context: &[TokenId],
    max_len: usize,
    mode: DecodeMode,
    rng: &mut R,
    mut inject: F,
) -> TokenSeq
where
    R: Rng + ?Sized,
    F: FnMut(&[TokenId], TokenId) -> Option<Vec<TokenId>>,
{
    assert!(max_len >= 1, "max_len must be at least 1");
    let eos = model.vocab().markers().eos;
    let mut out = Vec::new();
    let mut emitted = 0;
    while emitted + 1 < max_len {
        let lp = model.next_log_probs(context, &out);
        let tok = choose(&lp, mode, rng);
        emitted += 1;
        out.push(tok);
        if tok == eos {
            return TokenSeq(out);
        }
        if let Some(extra) = inject(&out, tok) {
            out.extend(extra);
        }
    }
    out.push(eos);
    TokenSeq(out)
}

type Factory = fn(Arc<Vocab>, &serde_json::Value, u64) -> Result<Box<dyn SeqModel>>;

/// Model variants selectable by name.
pub struct ModelRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = ModelRegistry {
            factories: BTreeMap::new(),
        };
        r.register("tabular", |v, h, seed| Ok(Box::new(Tabular::from_hyper(v, h, seed)?)));
        r.register("ngram", |v, h, seed| Ok(Box::new(NeuralNGram::from_hyper(v, h, seed)?)));
        r
    }
}

impl ModelRegistry {
    pub fn register(&mut self, name: &'static str, f: Factory) {
        self.factories.insert(name, f);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, name: &str, vocab: Arc<Vocab>, hyper: &serde_json::Value, seed: u64) -> Result<Box<dyn SeqModel>> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown model variant {name:?}; known: {:?}", self.names())))?;
        f(vocab, hyper, seed)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    variant: String,
    hyper: serde_json::Value,
    vocab_hash: String,
    params: Vec<f64>,
}

pub fn save_model(model: &dyn SeqModel, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        variant: model.kind().to_string(),
        hyper: model.hyper(),
        vocab_hash: model.vocab().hash_hex(),
        params: model.params().to_vec(),
    };
    let text = serde_json::to_string(&ck)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path, vocab: Arc<Vocab>) -> Result<Box<dyn SeqModel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.vocab_hash != vocab.hash_hex() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained on a different vocabulary",
            path.display()
        )));
    }
    let mut m = ModelRegistry::default().build(&ck.variant, vocab, &ck.hyper, 0)?;
    if m.n_params() != ck.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            ck.params.len(),
            m.n_params()
        )));
    }
    m.params_mut().copy_from_slice(&ck.params);
    Ok(m)
}

/// Softmax restricted to emittable entries, written into `out` as log-probabilities.
pub(crate) fn masked_log_softmax(logits: &[f64], emittable: &[bool], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (l, &ok) in logits.iter().zip(emittable) {
        if ok && *l > max {
            max = *l;
        }
    }
    let mut sum = 0.0;
    for (l, &ok) in logits.iter().zip(emittable) {
        if ok {
            sum += (l - max).exp();
        }
    }
    let lse = max + sum.ln();
    for ((o, l), &ok) in out.iter_mut().zip(logits).zip(emittable) {
        *o = if ok { l - lse } else { f64::NEG_INFINITY };
    }
}

pub(crate) fn emittable_mask(vocab: &Vocab) -> Vec<bool> {
    (0..vocab.len() as TokenId).map(|i| vocab.is_emittable(i)).collect()
}

/// `d log p(y) / d logits = onehot(y) - softmax`, zero on masked entries.
pub(crate) fn target_dlogits(log_probs: &[f64], y: TokenId, out: &mut [f64]) {
    for (o, lp) in out.iter_mut().zip(log_probs) {
        *o = if lp.is_finite() { -lp.exp() } else { 0.0 };
    }
    out[y as usize] += 1.0;
}

/// `d (softmax · g) / d logits = s ⊙ (g - s·g)`, zero on masked entries.
pub(crate) fn soft_dot_dlogits(log_probs: &[f64], dir: &[f64], out: &mut [f64]) {
    let mut sg = 0.0;
    for (lp, g) in log_probs.iter().zip(dir) {
        if lp.is_finite() {
            sg += lp.exp() * g;
        }
    }
    for ((o, lp), g) in out.iter_mut().zip(log_probs).zip(dir) {
        *o = if lp.is_finite() { lp.exp() * (g - sg) } else { 0.0 };
    }
}

/// Last non-separator token of `context ⊕ prefix`, falling back to BOS.
pub(crate) fn last_content(markers: &Markers, context: &[TokenId], prefix: &[TokenId]) -> (TokenId, Option<usize>) {
    for (j, &t) in prefix.iter().enumerate().rev() {
        if !markers.is_separator(t) {
            return (t, Some(j));
        }
    }
    for &t in context.iter().rev() {
        if !markers.is_separator(t) {
            return (t, None);
        }
    }
    (markers.bos, None)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite differences on selected coordinates.
    pub fn fd_grad(model: &mut dyn SeqModel, ctx: &[TokenId], target: &[TokenId], coords: &[usize], step: f64) -> Vec<f64> {
        coords
            .iter()
            .map(|&i| {
                let orig = model.params()[i];
                model.params_mut()[i] = orig + step;
                let up = model.score(ctx, target, None);
                model.params_mut()[i] = orig - step;
                let down = model.score(ctx, target, None);
                model.params_mut()[i] = orig;
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs()).max(1e-3);
        (a - b).abs() / denom
    }
}
