use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{combined_score, corpus_bleu, inform_success, latent_prf, marginal_ll_is, Prf, PredictedTurns};
use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::mis::ModelPair;
use crate::seqmodel::layout::{belief_of, build_gen_context, build_inf_context, join_latent, parse_gen_output, Database};
use crate::seqmodel::{sample, sample_with, DecodeMode, SeqModel};
use crate::synthdata::{gold_goal, World};
use crate::vocab::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub max_gen_len: usize,
    pub max_latent_len: usize,
    /// Importance samples per dialog for the marginal likelihood; 0 skips it.
    pub marginal_k: usize,
    pub bleu_smoothing: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_gen_len: 48,
            max_latent_len: 24,
            marginal_k: 0,
            bleu_smoothing: false,
            seed: 0,
        }
    }
}

/// Greedy end-to-end outputs for one dialog. `p_*` come from the generative
/// model fed its own beliefs and the gold previous responses; `q_latents` from
/// the inference model fed its own previous latents.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Prediction {
    pub beliefs: Vec<TokenSeq>,
    pub dbs: Vec<TokenSeq>,
    pub acts: Vec<TokenSeq>,
    pub resps: Vec<TokenSeq>,
    pub q_latents: Vec<TokenSeq>,
}

impl Prediction {
    pub fn p_latents(&self, p: &dyn SeqModel) -> Vec<TokenSeq> {
        let m = p.vocab().markers();
        self.beliefs.iter().zip(&self.acts).map(|(b, a)| join_latent(&m, b, a)).collect()
    }
}

pub fn decode_dialog(p: &dyn SeqModel, q: &dyn SeqModel, db: &dyn Database, d: &Dialog, opts: &EvalOptions) -> Result<Prediction> {
    let vocab = p.vocab();
    let m = vocab.markers();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Prediction::default();
    let mut prev_b = TokenSeq::new();
    let mut prev_q = TokenSeq::new();
    for t in 0..d.len() {
        let turn = &d.turns[t];
        let ctx = build_gen_context(vocab, &prev_b, d.prev_r(t), &turn.u)?;
        let gen = sample_with(p, &ctx, opts.max_gen_len, DecodeMode::Greedy, &mut rng, |prefix, tok| {
            if tok != m.sep_b || prefix[..prefix.len() - 1].contains(&m.sep_b) {
                return None;
            }
            let mut extra = db.query(&prefix[..prefix.len() - 1]).into_inner();
            if extra.is_empty() {
                return None;
            }
            extra.push(m.sep_db);
            Some(extra)
        });
        let dec = parse_gen_output(&m, &gen);
        prev_b = dec.b.clone();
        out.beliefs.push(dec.b);
        out.dbs.push(dec.db);
        out.acts.push(dec.a);
        out.resps.push(dec.r);

        let qctx = build_inf_context(vocab, belief_of(&m, &prev_q), d.prev_r(t), &turn.u, &turn.r)?;
        let h = sample(q, &qctx, opts.max_latent_len, DecodeMode::Greedy, &mut rng);
        prev_q = h.clone();
        out.q_latents.push(h);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
    pub p: Prf,
    pub q: Prf,
    /// Mean per-dialog estimate; NaN when not computed.
    pub marginal_ll: f64,
}

/// Decodes every dialog of a labeled split and scores it against the gold labels.
pub fn evaluate_split(world: &World, p: &dyn SeqModel, q: &dyn SeqModel, dialogs: &[Dialog], opts: &EvalOptions) -> Result<SplitMetrics> {
    if dialogs.is_empty() {
        return Err(Error::InvalidInput("evaluate_split on an empty split".into()));
    }
    let m = world.vocab().markers();
    let mut preds = Vec::with_capacity(dialogs.len());
    let mut goals = Vec::with_capacity(dialogs.len());
    let (mut cand, mut refs) = (Vec::new(), Vec::new());
    let (mut p_pred, mut q_pred, mut gold) = (Vec::new(), Vec::new(), Vec::new());
    for d in dialogs {
        let goal = gold_goal(world, d).ok_or_else(|| Error::Contract(format!("evaluation dialog {} is unlabeled", d.id)))?;
        let pr = decode_dialog(p, q, world, d, opts)?;
        gold.extend(d.gold_latents(&m)?);
        p_pred.extend(pr.p_latents(p));
        q_pred.extend(pr.q_latents.iter().cloned());
        for (c, turn) in pr.resps.iter().zip(&d.turns) {
            cand.push(c.clone());
            refs.push(turn.r.clone());
        }
        preds.push(PredictedTurns {
            beliefs: pr.beliefs,
            acts: pr.acts,
        });
        goals.push(goal);
    }
    let (inform, success) = inform_success(world, &preds, &goals);
    let bleu = corpus_bleu(&cand, &refs, opts.bleu_smoothing)?;
    let marginal_ll = if opts.marginal_k == 0 {
        f64::NAN
    } else {
        let pair = ModelPair {
            p,
            q,
            db: world,
            max_latent_len: opts.max_latent_len,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut total = 0.0;
        for d in dialogs {
            total += marginal_ll_is(&pair, d, opts.marginal_k, &mut rng)?;
        }
        total / dialogs.len() as f64
    };
    Ok(SplitMetrics {
        inform,
        success,
        bleu,
        combined: combined_score(inform, success, bleu),
        p: latent_prf(world.vocab(), &p_pred, &gold)?,
        q: latent_prf(world.vocab(), &q_pred, &gold)?,
        marginal_ll,
    })
}
