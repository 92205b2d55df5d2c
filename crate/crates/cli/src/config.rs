use std::path::{Path, PathBuf};

use jsa_tod::seqmodel::DecodeMode;
use jsa_tod::synthdata::WorldConfig;
use jsa_tod::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Seed for dialog generation; the world has its own seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_valid: 300,
            n_test: 1000,
            seed: 1,
        }
    }
}

/// Everything one experiment needs. Relative paths resolve against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Latent samplers compared by `ablate-mis`, in table order.
    pub ablation_samplers: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig {
                lr_max: 3e-2,
                epochs_sup: 30,
                epochs_semi: 10,
                ..TrainConfig::default()
            },
            data_dir: "data".into(),
            out_dir: "runs".into(),
            ablation_samplers: vec!["none".into(), "session".into(), "turn".into()],
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, or returns the defaults rooted at the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.data.n_train == 0 || self.data.n_valid == 0 || self.data.n_test == 0 {
            return Err(CliError::Config("dataset sizes must be positive".into()));
        }
        if self.ablation_samplers.is_empty() {
            return Err(CliError::Config("ablation_samplers is empty".into()));
        }
        Ok(())
    }

    /// Directory of one training run, named after its method, sampler and seed.
    pub fn run_dir(&self) -> PathBuf {
        let t = &self.train;
        let name = if t.method == "jsa" {
            format!("jsa-{}-seed{}", t.sampler, t.seed)
        } else {
            format!("{}-seed{}", t.method, t.seed)
        };
        self.out_dir.join(name)
    }
}

/// Command-line replacements for individual `TrainConfig` fields.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct TrainOverrides {
    #[arg(long, alias = "proportion", global = true)]
    pub label_proportion: Option<f64>,
    #[arg(long, global = true)]
    pub epochs_sup: Option<usize>,
    #[arg(long, global = true)]
    pub epochs_semi: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub grad_accum: Option<usize>,
    #[arg(long, global = true)]
    pub lr_max: Option<f64>,
    #[arg(long, global = true)]
    pub warmup_frac: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["sup", "jsa", "var"])]
    pub method: Option<String>,
    #[arg(long, global = true)]
    pub sampler: Option<String>,
    #[arg(long, alias = "proposal", global = true, value_parser = ["greedy", "stochastic"])]
    pub proposal_mode: Option<String>,
    #[arg(long, global = true)]
    pub early_stop_patience: Option<usize>,
    /// Supervised and unsupervised minibatches per group, as `S,U`.
    #[arg(long, global = true)]
    pub sup_unsup_mix: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Model hyperparameters as a JSON object.
    #[arg(long, global = true)]
    pub model_hyper: Option<String>,
    #[arg(long, global = true)]
    pub max_latent_len: Option<usize>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Evaluation options as a JSON object.
    #[arg(long, global = true)]
    pub eval: Option<String>,
}

impl TrainOverrides {
    pub fn apply(&self, t: &mut TrainConfig) -> Result<(), CliError> {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    t.$f = v.clone();
                }
            )*};
        }
        set!(
            label_proportion,
            epochs_sup,
            epochs_semi,
            batch_size,
            grad_accum,
            lr_max,
            warmup_frac,
            weight_decay,
            seed,
            method,
            sampler,
            early_stop_patience,
            model,
            max_latent_len,
            threads
        );
        if let Some(m) = &self.proposal_mode {
            t.proposal_mode = m.parse::<DecodeMode>()?;
        }
        if let Some(mix) = &self.sup_unsup_mix {
            let parts: Vec<usize> = mix
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(format!("--sup-unsup-mix {mix:?}: {e}")))?;
            t.sup_unsup_mix = parts
                .try_into()
                .map_err(|_| CliError::Config(format!("--sup-unsup-mix {mix:?}: expected two numbers")))?;
        }
        if let Some(h) = &self.model_hyper {
            t.model_hyper = serde_json::from_str(h).map_err(|e| CliError::Config(format!("--model-hyper: {e}")))?;
        }
        if let Some(e) = &self.eval {
            t.eval = serde_json::from_str(e).map_err(|e| CliError::Config(format!("--eval: {e}")))?;
        }
        Ok(())
    }
}
