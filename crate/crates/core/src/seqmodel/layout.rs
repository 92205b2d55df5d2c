//! How turn-level pieces are concatenated into model contexts and targets.
//!
//! Latent state `h = b ⊕ [SEP_B] ⊕ a ⊕ [EOS]`.
//! Generative target `b ⊕ [SEP_B] ⊕ (db ⊕ [SEP_DB])? ⊕ a ⊕ [SEP_A] ⊕ r ⊕ [EOS]`, where
//! the db block is present only when the database returns tokens.

use crate::error::{Error, Result};
use crate::vocab::{Markers, TokenId, TokenSeq, Vocab};

/// Deterministic lookup from a belief span to DB-result tokens.
pub trait Database: Send + Sync {
    fn query(&self, belief: &[TokenId]) -> TokenSeq;
}

/// A database that never returns anything; the generative target then has no db block.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoDatabase;

impl Database for NoDatabase {
    fn query(&self, _belief: &[TokenId]) -> TokenSeq {
        TokenSeq::new()
    }
}

/// `BOS ⊕ prev_b ⊕ prev_r ⊕ u`
pub fn build_gen_context(
    vocab: &Vocab,
    prev_b: &[TokenId],
    prev_r: &[TokenId],
    u: &[TokenId],
) -> Result<TokenSeq> {
    for part in [prev_b, prev_r, u] {
        vocab.check(part)?;
    }
    let mut ctx = Vec::with_capacity(1 + prev_b.len() + prev_r.len() + u.len());
    ctx.push(vocab.markers().bos);
    ctx.extend_from_slice(prev_b);
    ctx.extend_from_slice(prev_r);
    ctx.extend_from_slice(u);
    Ok(TokenSeq(ctx))
}

/// `BOS ⊕ prev_b ⊕ prev_r ⊕ u ⊕ r`
pub fn build_inf_context(
    vocab: &Vocab,
    prev_b: &[TokenId],
    prev_r: &[TokenId],
    u: &[TokenId],
    r: &[TokenId],
) -> Result<TokenSeq> {
    let mut ctx = build_gen_context(vocab, prev_b, prev_r, u)?;
    vocab.check(r)?;
    ctx.extend_from(r);
    Ok(ctx)
}

/// Splits a latent state into its belief and act spans.
pub fn split_latent(markers: &Markers, h: &[TokenId]) -> Result<(TokenSeq, TokenSeq)> {
    let seps: Vec<usize> = h
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == markers.sep_b)
        .map(|(i, _)| i)
        .collect();
    if seps.len() != 1 {
        return Err(Error::MalformedLatent(format!(
            "expected exactly one belief separator, found {}",
            seps.len()
        )));
    }
    let body = match h.split_last() {
        Some((&last, body)) if last == markers.eos => body,
        _ => return Err(Error::MalformedLatent("latent not EOS-terminated".into())),
    };
    if body.contains(&markers.eos) {
        return Err(Error::MalformedLatent("EOS inside latent".into()));
    }
    let sep = seps[0];
    Ok((TokenSeq(body[..sep].to_vec()), TokenSeq(body[sep + 1..].to_vec())))
}

/// Belief span of a possibly malformed latent: tokens before the first `SEP_B`
/// (or before EOS when there is none).
pub fn belief_of<'a>(markers: &Markers, h: &'a [TokenId]) -> &'a [TokenId] {
    let end = h
        .iter()
        .position(|&t| t == markers.sep_b || t == markers.eos)
        .unwrap_or(h.len());
    &h[..end]
}

pub fn join_latent(markers: &Markers, b: &[TokenId], a: &[TokenId]) -> TokenSeq {
    let mut h = Vec::with_capacity(b.len() + a.len() + 2);
    h.extend_from_slice(b);
    h.push(markers.sep_b);
    h.extend_from_slice(a);
    h.push(markers.eos);
    TokenSeq(h)
}

/// Assembles the generative model's output sequence for one turn.
pub fn gen_target(
    markers: &Markers,
    b: &[TokenId],
    db: &[TokenId],
    a: &[TokenId],
    r: &[TokenId],
) -> TokenSeq {
    let mut t = Vec::with_capacity(b.len() + db.len() + a.len() + r.len() + 4);
    t.extend_from_slice(b);
    t.push(markers.sep_b);
    if !db.is_empty() {
        t.extend_from_slice(db);
        t.push(markers.sep_db);
    }
    t.extend_from_slice(a);
    t.push(markers.sep_a);
    t.extend_from_slice(r);
    t.push(markers.eos);
    TokenSeq(t)
}

/// Pieces of a decoded generative output. Missing separators leave later spans empty.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodedTurn {
    pub b: TokenSeq,
    pub db: TokenSeq,
    pub a: TokenSeq,
    pub r: TokenSeq,
}

pub fn parse_gen_output(markers: &Markers, out: &[TokenId]) -> DecodedTurn {
    let body = match out.last() {
        Some(&last) if last == markers.eos => &out[..out.len() - 1],
        _ => out,
    };
    let mut d = DecodedTurn::default();
    let mut stage = 0;
    for &t in body {
        match stage {
            0 if t == markers.sep_b => stage = 1,
            0 => d.b.push(t),
            1 | 2 if t == markers.sep_a => stage = 3,
            1 if t == markers.sep_db => {
                // tokens seen so far in the act span were db tokens
                d.db = std::mem::take(&mut d.a);
                stage = 2;
            }
            1 | 2 => d.a.push(t),
            _ => d.r.push(t),
        }
    }
    d
}

/// Positions of `h`'s tokens inside the generative target built from it, as
/// `(latent index, target index)` pairs covering the belief span, `SEP_B` and the
/// act span.
pub fn latent_positions_in_target(
    markers: &Markers,
    h: &[TokenId],
    db_len: usize,
) -> Result<Vec<(usize, usize)>> {
    let (b, a) = split_latent(markers, h)?;
    let mut pairs = Vec::with_capacity(b.len() + a.len() + 1);
    for i in 0..=b.len() {
        pairs.push((i, i));
    }
    let shift = if db_len == 0 { 0 } else { db_len + 1 };
    for j in 0..a.len() {
        let li = b.len() + 1 + j;
        pairs.push((li, li + shift));
    }
    Ok(pairs)
}
