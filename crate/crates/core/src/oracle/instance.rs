use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{enumerate_posterior, FiniteLatentSpace};
use crate::dialog::{Dialog, TurnRecord};
use crate::error::Result;
use crate::mis::{ModelPair, TurnKernel};
use crate::seqmodel::layout::{join_latent, NoDatabase};
use crate::seqmodel::{SeqModel, Tabular, TabularHyper};
use crate::trainer::AdamW;
use crate::vocab::{TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceKind {
    /// Every turn has a non-empty user utterance, so a tabular turn factor never
    /// sees the previous belief and the posterior factorizes over turns.
    Independent,
    /// Later turns have empty utterances and earlier responses are empty, so each
    /// turn factor is keyed on the previous belief.
    Chained,
}

/// A small random generative/inference pair of tabular models, one dialog and a
/// finite latent space, all without a database.
pub struct TabularInstance {
    pub vocab: Arc<Vocab>,
    pub p: Tabular,
    pub q: Tabular,
    pub dialog: Dialog,
    pub space: FiniteLatentSpace,
}

const CONTENT: [&str; 6] = ["x", "y", "z", "w", "v", "s"];

impl TabularInstance {
    pub fn random(seed: u64, n_latents: usize, turns: usize, kind: InstanceKind) -> Result<Self> {
        Self::random_scaled(seed, n_latents, turns, kind, 1.0)
    }

    /// Like [`TabularInstance::random`] with initial logits of standard deviation
    /// `scale`; smaller values give flatter posteriors.
    pub fn random_scaled(seed: u64, n_latents: usize, turns: usize, kind: InstanceKind, scale: f64) -> Result<Self> {
        let vocab = Arc::new(Vocab::with_specials(CONTENT)?);
        let m = vocab.markers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = |s: &str| vocab.id(s).expect("instance token");
        let beliefs: Vec<Vec<_>> = vec![vec![], vec![id("x")], vec![id("y")], vec![id("x"), id("y")]];
        let acts: Vec<Vec<_>> = vec![vec![], vec![id("z")], vec![id("w")], vec![id("z"), id("w")]];
        let mut all: Vec<TokenSeq> = beliefs
            .iter()
            .flat_map(|b| acts.iter().map(move |a| (b, a)))
            .map(|(b, a)| join_latent(&m, b, a))
            .collect();
        all.shuffle(&mut rng);
        all.truncate(n_latents);
        let space = FiniteLatentSpace::new(&m, all)?;
        let words = [id("v"), id("s"), id("x"), id("w")];
        let pick = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> TokenSeq {
            let n = rng.gen_range(lo..=hi);
            (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect()
        };
        let turns_v = (0..turns)
            .map(|t| {
                let (u, r) = match kind {
                    InstanceKind::Independent => (pick(&mut rng, 1, 2), pick(&mut rng, 0, 2)),
                    InstanceKind::Chained => {
                        let u = if t == 0 { pick(&mut rng, 1, 2) } else { TokenSeq::new() };
                        (u, TokenSeq::new())
                    }
                };
                TurnRecord {
                    u,
                    r,
                    ..Default::default()
                }
            })
            .collect();
        let dialog = Dialog {
            id: format!("inst{seed}"),
            turns: turns_v,
            labeled: false,
        };
        let hyper = TabularHyper {
            max_len: None,
            init_scale: scale,
        };
        let p = Tabular::with_hyper(vocab.clone(), hyper.clone(), rng.gen());
        let q = Tabular::with_hyper(vocab.clone(), hyper, rng.gen());
        Ok(TabularInstance {
            vocab,
            p,
            q,
            dialog,
            space,
        })
    }

    pub fn pair(&self) -> ModelPair<'_> {
        ModelPair {
            p: &self.p,
            q: &self.q,
            db: &NoDatabase,
            max_latent_len: 8,
        }
    }

    /// Refits `q` from the uniform model by teacher forcing on trajectories drawn
    /// from the exact posterior, for a deliberately small number of steps so that
    /// `q` stays imperfect.
    pub fn pretrain_q(&mut self, steps: usize, lr: f64, seed: u64) -> Result<()> {
        self.q.params_mut().fill(0.0);
        let post = {
            let pair = self.pair();
            enumerate_posterior(&pair, &self.dialog, &self.space)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = AdamW::new(self.q.n_params(), 0.0);
        for _ in 0..steps {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut idx = post.probs.len() - 1;
            for (i, p) in post.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            let traj: Vec<TokenSeq> = self
                .space
                .decode_traj(idx, self.dialog.len())
                .into_iter()
                .map(|j| self.space.get(j).clone())
                .collect();
            let mut grad = vec![0.0; self.q.n_params()];
            {
                let pair = self.pair();
                for t in 0..self.dialog.len() {
                    let ctx = pair.inf_context(&self.dialog, t, &traj[..t]);
                    self.q.score(&ctx, &traj[t], Some((&mut grad, -1.0)));
                }
            }
            let params = self.q.params_mut();
            opt.update(params, &grad, lr)?;
        }
        Ok(())
    }

    /// Exact per-turn acceptance probability of one MIS step at turn 0, from the
    /// cached latent with index `cached`: `Σ_h' q(h') min{1, w(h')/w(h̄)}`.
    pub fn exact_first_turn_acceptance(&self, k: &dyn TurnKernel, cached: usize) -> f64 {
        let d = &self.dialog;
        let w = |h: &TokenSeq| crate::mis::importance_log_weight(k, d, 0, &[], h);
        let w_old = w(self.space.get(cached));
        self.space
            .candidates()
            .iter()
            .map(|h| {
                let lq = k.log_q(d, 0, &[], h);
                lq.exp() * (w(h) - w_old).min(0.0).exp()
            })
            .sum()
    }
}
