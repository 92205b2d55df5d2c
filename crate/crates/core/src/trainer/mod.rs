//! Supervised pretraining, JSA semi-supervised training and the straight-through
//! variational baseline.

mod optim;
mod steps;
mod train;

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, LinearSchedule};
pub use steps::{jsa_grads, latent_grads, supervised_grads, variational_grads, DialogStats};
pub use train::{semi_supervised_train, CheckpointDir, EvalHook, Trained};

use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::mis::{LatentSampler, ModelPair, SamplerRegistry, Sweep};
use crate::seqmodel::DecodeMode;
use crate::vocab::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub label_proportion: f64,
    pub epochs_sup: usize,
    pub epochs_semi: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// `sup`, `jsa` or `var`.
    pub method: String,
    /// Latent sampler used by `jsa`: `turn`, `session` or `none`.
    pub sampler: String,
    /// How `q` proposes latents for unlabeled dialogs. Greedy proposals make the
    /// MIS chain degenerate in theory but are the training default; the oracle
    /// checks use stochastic proposals.
    pub proposal_mode: DecodeMode,
    pub early_stop_patience: usize,
    /// Supervised and unsupervised minibatches per group in phase 2.
    pub sup_unsup_mix: [usize; 2],
    pub model: String,
    pub model_hyper: serde_json::Value,
    pub max_latent_len: usize,
    pub threads: usize,
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            label_proportion: 0.1,
            epochs_sup: 30,
            epochs_semi: 40,
            batch_size: 16,
            grad_accum: 1,
            lr_max: 3e-3,
            warmup_frac: 0.2,
            weight_decay: 0.0,
            seed: 0,
            method: "jsa".into(),
            sampler: "turn".into(),
            proposal_mode: DecodeMode::Greedy,
            early_stop_patience: 4,
            sup_unsup_mix: [1, 1],
            model: "ngram".into(),
            model_hyper: serde_json::json!({}),
            max_latent_len: 24,
            threads: 1,
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.label_proportion > 0.0 && self.label_proportion <= 1.0) {
            return bad("label_proportion must be in (0, 1]");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.threads == 0 {
            return bad("batch_size, grad_accum and threads must be positive");
        }
        if self.epochs_sup == 0 {
            return bad("epochs_sup must be positive");
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive");
        }
        if self.sup_unsup_mix.contains(&0) {
            return bad("sup_unsup_mix entries must be positive");
        }
        if self.max_latent_len < 2 {
            return bad("max_latent_len must be at least 2");
        }
        MethodRegistry::default().build(&self.method, &self.sampler).map(|_| ())
    }
}

/// Stops once `patience` consecutive epochs fail to beat the best score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records `score` for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

/// What a training method does with one unlabeled dialog.
pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;
    fn label(&self) -> &'static str;
    fn uses_unlabeled(&self) -> bool;
    fn needs_cache(&self) -> bool;
    /// Adds ascent gradients for `d` into `gp`/`gq`. A returned sweep is written
    /// back to the cache by the caller.
    #[allow(clippy::too_many_arguments)]
    fn unsup_grads(
        &self,
        pair: &ModelPair,
        d: &Dialog,
        cached: Option<&[TokenSeq]>,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
        gp: &mut [f64],
        gq: &mut [f64],
    ) -> Result<(DialogStats, Option<Sweep>)>;
}

pub struct SupOnly;

impl Method for SupOnly {
    fn name(&self) -> &'static str {
        "sup"
    }
    fn label(&self) -> &'static str {
        "Supervised only"
    }
    fn uses_unlabeled(&self) -> bool {
        false
    }
    fn needs_cache(&self) -> bool {
        false
    }
    fn unsup_grads(
        &self,
        _: &ModelPair,
        d: &Dialog,
        _: Option<&[TokenSeq]>,
        _: DecodeMode,
        _: &mut dyn RngCore,
        _: &mut [f64],
        _: &mut [f64],
    ) -> Result<(DialogStats, Option<Sweep>)> {
        Err(Error::Contract(format!("supervised-only training got unlabeled dialog {}", d.id)))
    }
}

pub struct Jsa {
    pub sampler: &'static dyn LatentSampler,
}

impl Method for Jsa {
    fn name(&self) -> &'static str {
        "jsa"
    }
    fn label(&self) -> &'static str {
        self.sampler.label()
    }
    fn uses_unlabeled(&self) -> bool {
        true
    }
    fn needs_cache(&self) -> bool {
        self.sampler.needs_cache()
    }
    fn unsup_grads(
        &self,
        pair: &ModelPair,
        d: &Dialog,
        cached: Option<&[TokenSeq]>,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
        gp: &mut [f64],
        gq: &mut [f64],
    ) -> Result<(DialogStats, Option<Sweep>)> {
        let (st, sweep) = jsa_grads(pair, self.sampler, d, cached, mode, rng, gp, gq)?;
        Ok((st, Some(sweep)))
    }
}

pub struct VariationalSt;

impl Method for VariationalSt {
    fn name(&self) -> &'static str {
        "var"
    }
    fn label(&self) -> &'static str {
        "Variational (straight-through)"
    }
    fn uses_unlabeled(&self) -> bool {
        true
    }
    fn needs_cache(&self) -> bool {
        false
    }
    fn unsup_grads(
        &self,
        pair: &ModelPair,
        d: &Dialog,
        _: Option<&[TokenSeq]>,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
        gp: &mut [f64],
        gq: &mut [f64],
    ) -> Result<(DialogStats, Option<Sweep>)> {
        let (_, st) = variational_grads(pair, d, mode, rng, gp, gq);
        Ok((st, None))
    }
}

type MethodFactory = fn(&'static dyn LatentSampler) -> Box<dyn Method>;

/// Training methods by name; `jsa` is parameterized by a latent sampler.
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, MethodFactory>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut methods: BTreeMap<&'static str, MethodFactory> = BTreeMap::new();
        methods.insert("sup", |_| Box::new(SupOnly));
        methods.insert("jsa", |s| Box::new(Jsa { sampler: s }));
        methods.insert("var", |_| Box::new(VariationalSt));
        MethodRegistry { methods }
    }
}

impl MethodRegistry {
    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }

    pub fn build(&self, method: &str, sampler: &str) -> Result<Box<dyn Method>> {
        let f = self.methods.get(method).ok_or_else(|| {
            Error::Config(format!("unknown method {method:?}; expected one of {:?}", self.names()))
        })?;
        let s = SamplerRegistry::global().get(sampler)?;
        Ok(f(s))
    }
}
