use std::path::Path;

use jsa_tod::dialog::Dialog;
use jsa_tod::eval::{evaluate_split, MetricsRow, SplitMetrics};
use jsa_tod::oracle::checks::{self, CheckResult};
use jsa_tod::seqmodel::{load_model, SeqModel};
use jsa_tod::synthdata::{gen_split, mask_labels, read_jsonl, write_jsonl, World};
use jsa_tod::trainer::{semi_supervised_train, CheckpointDir, MethodRegistry};
use jsa_tod::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CliError, ExperimentConfig};

const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub data_seed: u64,
    pub world_seed: u64,
    pub world_hash: String,
    pub vocab_hash: String,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

pub struct Dataset {
    pub world: World,
    pub train: Vec<Dialog>,
    pub valid: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes the three splits with full labels, the vocabulary and a manifest.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, CliError> {
    let world = World::new(cfg.world.clone())?;
    create_dir(out)?;
    let sizes = [cfg.data.n_train, cfg.data.n_valid, cfg.data.n_test];
    for (split, n) in SPLITS.iter().zip(sizes) {
        let data = gen_split(&world, n, cfg.data.seed, split);
        write_jsonl(world.vocab(), &data, &out.join(format!("{split}.jsonl")))?;
    }
    world.vocab().write(&out.join("vocab.txt"))?;
    let manifest = Manifest {
        data_seed: cfg.data.seed,
        world_seed: cfg.world.seed,
        world_hash: world.hash_hex(),
        vocab_hash: world.vocab().hash_hex(),
        n_train: sizes[0],
        n_valid: sizes[1],
        n_test: sizes[2],
    };
    write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    log::info!("wrote {} / {} / {} dialogs to {}", sizes[0], sizes[1], sizes[2], out.display());
    Ok(manifest)
}

/// Reads a dataset written by [`cmd_gen`] and checks it matches the configured world.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let dir = &cfg.data_dir;
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        CliError::Config(format!("no dataset at {} ({e}); run `gen` first", dir.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let world = World::new(cfg.world.clone())?;
    if manifest.world_hash != world.hash_hex() {
        return Err(CliError::Config(format!(
            "dataset in {} was generated for a different world; rerun `gen`",
            dir.display()
        )));
    }
    let vocab = Vocab::read(&dir.join("vocab.txt"))?;
    if vocab.hash_hex() != world.vocab().hash_hex() {
        return Err(CliError::Config(format!("vocabulary in {} does not match the world", dir.display())));
    }
    let read = |split: &str| read_jsonl(world.vocab(), &dir.join(format!("{split}.jsonl")));
    Ok(Dataset {
        train: read("train")?,
        valid: read("valid")?,
        test: read("test")?,
        world,
    })
}

/// Outcome of one training run, evaluated on the test split with the best models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub sampler: String,
    pub label: String,
    pub seed: u64,
    pub label_proportion: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: MetricsRow,
    /// Normalized variance of the unsupervised φ-gradient norms, NaN without any.
    #[serde(deserialize_with = "jsa_tod::eval::nan_if_null")]
    pub grad_norm_variance: f64,
    /// Latent F1 of the final cache against the hidden labels, when a cache exists.
    pub cache_f1: Option<f64>,
}

fn metrics_row(epoch: usize, split: &str, m: &SplitMetrics) -> MetricsRow {
    MetricsRow::from_split(epoch, split, m)
}

/// Masks labels, trains per `cfg.train`, evaluates the best models on the test
/// split and writes `metrics.csv` (validation rows per epoch, then one test row)
/// and `summary.json` into `run_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Dataset, run_dir: &Path, resume: bool) -> Result<RunSummary, CliError> {
    let t = &cfg.train;
    t.validate()?;
    let method = MethodRegistry::default().build(&t.method, &t.sampler)?;
    let (train, gold) = mask_labels(&data.train, t.label_proportion, &mut ChaCha8Rng::seed_from_u64(t.seed))?;
    let world = &data.world;
    let opts = t.eval.clone();
    let valid = &data.valid;
    let mut hook = |epoch: usize, p: &dyn SeqModel, q: &dyn SeqModel| {
        let m = evaluate_split(world, p, q, valid, &opts)?;
        Ok(metrics_row(epoch, "valid", &m))
    };
    create_dir(run_dir)?;
    let ckpt = CheckpointDir {
        path: run_dir.to_path_buf(),
        resume,
    };
    log::info!("training {} ({}) seed {} into {}", t.method, method.label(), t.seed, run_dir.display());
    let trained = semi_supervised_train(t, world.vocab().clone(), world, &train, &mut hook, Some(&ckpt))?;
    let test = evaluate_split(world, trained.p.as_ref(), trained.q.as_ref(), &data.test, &opts)?;
    let mut report = trained.report.clone();
    // a resumed run reads back the test row written when it first finished
    report.rows.retain(|r| r.split != "test");
    let grad_norm_variance = if trained.grad_norms.is_empty() {
        f64::NAN
    } else {
        jsa_tod::eval::grad_variance(&trained.grad_norms)?
    };
    let mut test_row = metrics_row(trained.best_epoch, "test", &test);
    test_row.mean_accept_rate = report.last("valid").map_or(f64::NAN, |r| r.mean_accept_rate);
    test_row.phi_grad_norm_variance = grad_norm_variance;
    report.push(test_row.clone());
    report.write_csv(&run_dir.join("metrics.csv"))?;

    let cache_f1 = if trained.cache.is_empty() {
        None
    } else {
        let preds: Vec<(String, Vec<_>)> = trained.cache.iter().map(|(id, e)| (id.clone(), e.latents.clone())).collect();
        Some(gold.latent_prf(world.vocab(), &preds)?.f1)
    };
    let summary = RunSummary {
        method: t.method.clone(),
        sampler: t.sampler.clone(),
        label: method.label().to_string(),
        seed: t.seed,
        label_proportion: t.label_proportion,
        best_epoch: trained.best_epoch,
        epochs_run: trained.epochs_run,
        test: test_row,
        grad_norm_variance,
        cache_f1,
    };
    write_text(&run_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    log::info!(
        "{}: test combined {:.2} (inform {:.1}, success {:.1}, bleu {:.2}), latent F1 p {:.3} q {:.3}",
        summary.label,
        test.combined,
        test.inform,
        test.success,
        test.bleu,
        test.p.f1,
        test.q.f1
    );
    Ok(summary)
}

/// Evaluates the best checkpoint in `run_dir` on the test split.
pub fn cmd_eval(cfg: &ExperimentConfig, data: &Dataset, run_dir: &Path) -> Result<MetricsRow, CliError> {
    let vocab = data.world.vocab().clone();
    let p = load_model(&run_dir.join("p.ckpt"), vocab.clone())?;
    let q = load_model(&run_dir.join("q.ckpt"), vocab)?;
    let m = evaluate_split(&data.world, p.as_ref(), q.as_ref(), &data.test, &cfg.train.eval)?;
    let row = metrics_row(0, "test", &m);
    write_text(&run_dir.join("eval.json"), &serde_json::to_string_pretty(&row)?)?;
    Ok(row)
}

pub const ABLATION_HEADER: [&str; 15] = [
    "method",
    "sampler",
    "seed",
    "inform",
    "success",
    "bleu",
    "combined",
    "latent_precision",
    "latent_recall",
    "latent_f1",
    "q_precision",
    "q_recall",
    "q_f1",
    "mean_accept_rate",
    "phi_grad_norm_variance",
];

/// Trains JSA once per configured sampler under the same seed and writes one
/// CSV row per sampler to `out/ablation.csv`.
pub fn cmd_ablate_mis(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<Vec<RunSummary>, CliError> {
    let mut rows = Vec::new();
    for sampler in &cfg.ablation_samplers {
        let mut c = cfg.clone();
        c.train.method = "jsa".into();
        c.train.sampler = sampler.clone();
        c.out_dir = out.to_path_buf();
        rows.push(cmd_train(&c, data, &c.run_dir(), false)?);
    }
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e.into()))?;
    w.write_record(ABLATION_HEADER)?;
    for r in &rows {
        let t = &r.test;
        let mut rec = vec![r.label.clone(), r.sampler.clone(), r.seed.to_string()];
        rec.extend(
            [
                t.inform,
                t.success,
                t.bleu,
                t.combined,
                t.latent_precision,
                t.latent_recall,
                t.latent_f1,
                t.q_precision,
                t.q_recall,
                t.q_f1,
                t.mean_accept_rate,
                t.phi_grad_norm_variance,
            ]
            .iter()
            .map(|x| x.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// Runs every oracle check; with `fault`, the recursion check sees a
/// generative factor that breaks the Markov property.
pub fn cmd_oracle_check(seed: u64, fault: Option<f64>, out: Option<&Path>) -> Result<OracleReport, CliError> {
    let checks = checks::run_all(seed, fault)?;
    let report = OracleReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("oracle_report.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
