use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{supervised_grads, AdamW, DialogStats, EarlyStopping, LinearSchedule, Method, MethodRegistry, TrainConfig};
use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::eval::{grad_variance, MetricsReport, MetricsRow};
use crate::mis::{LatentCache, ModelPair, Sweep};
use crate::seqmodel::layout::Database;
use crate::seqmodel::{load_model, save_model, ModelRegistry, SeqModel};
use crate::synthdata::{dialog_rng, mix_seed};
use crate::vocab::{TokenSeq, Vocab};

/// Called after every epoch with the global epoch number and the current models;
/// its row's `combined` drives early stopping.
pub type EvalHook<'a> = dyn FnMut(usize, &dyn SeqModel, &dyn SeqModel) -> Result<MetricsRow> + 'a;

/// Where training state is written after every epoch, and read back on resume.
#[derive(Clone, Debug)]
pub struct CheckpointDir {
    pub path: PathBuf,
    pub resume: bool,
}

pub struct Trained {
    pub p: Box<dyn SeqModel>,
    pub q: Box<dyn SeqModel>,
    pub report: MetricsReport,
    pub best_epoch: usize,
    pub best_score: f64,
    /// Norm of the mean unsupervised φ-gradient, one entry per unsupervised minibatch.
    pub grad_norms: Vec<f64>,
    pub cache: LatentCache,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct State {
    phase: u8,
    phase_epochs: usize,
    epoch: usize,
    stopper: EarlyStopping,
    finished: bool,
    grad_norms: Vec<f64>,
}

const STREAM_SUP: u64 = 1 << 40;
const STREAM_MIX_LAB: u64 = 2 << 40;
const STREAM_MIX_UNL: u64 = 3 << 40;
const STREAM_UNSUP: u64 = 4 << 40;

fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut dialog_rng(seed, stream, 0));
    idx
}

type ItemResult = (DialogStats, Option<Sweep>);

/// Runs `f` on every item, splitting the items into `threads` contiguous chunks
/// with private gradient buffers that are summed in chunk order.
fn batch_grads<F>(threads: usize, np: usize, nq: usize, n: usize, f: F) -> Result<(Vec<f64>, Vec<f64>, Vec<ItemResult>)>
where
    F: Fn(usize, &mut [f64], &mut [f64]) -> Result<ItemResult> + Sync,
{
    let run = |lo: usize, hi: usize| -> Result<(Vec<f64>, Vec<f64>, Vec<ItemResult>)> {
        let mut gp = vec![0.0; np];
        let mut gq = vec![0.0; nq];
        let mut out = Vec::with_capacity(hi - lo);
        for i in lo..hi {
            out.push(f(i, &mut gp, &mut gq)?);
        }
        Ok((gp, gq, out))
    };
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return run(0, n);
    }
    let bounds: Vec<(usize, usize)> = (0..threads).map(|c| (c * n / threads, (c + 1) * n / threads)).collect();
    let parts: Vec<Result<_>> = std::thread::scope(|s| {
        let handles: Vec<_> = bounds.iter().map(|&(lo, hi)| s.spawn(move || run(lo, hi))).collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut gp = vec![0.0; np];
    let mut gq = vec![0.0; nq];
    let mut out = Vec::with_capacity(n);
    for part in parts {
        let (a, b, o) = part?;
        gp.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        gq.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        out.extend(o);
    }
    Ok((gp, gq, out))
}

fn descend(opt: &mut AdamW, model: &mut dyn SeqModel, ascent: &[f64], n: usize, lr: f64) -> Result<()> {
    let scale = -1.0 / n as f64;
    let g: Vec<f64> = ascent.iter().map(|x| x * scale).collect();
    opt.update(model.params_mut(), &g, lr)
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    method: Box<dyn Method>,
    db: &'a dyn Database,
    p: Box<dyn SeqModel>,
    q: Box<dyn SeqModel>,
    best_p: Box<dyn SeqModel>,
    best_q: Box<dyn SeqModel>,
    opt_p: AdamW,
    opt_q: AdamW,
    cache: LatentCache,
    report: MetricsReport,
    state: State,
}

impl Run<'_> {
    fn pair(&self) -> ModelPair<'_> {
        ModelPair {
            p: self.p.as_ref(),
            q: self.q.as_ref(),
            db: self.db,
            max_latent_len: self.cfg.max_latent_len,
        }
    }

    fn step_size(&self) -> usize {
        self.cfg.batch_size * self.cfg.grad_accum
    }

    fn sup_update(&mut self, batch: &[&Dialog], sched: &LinearSchedule) -> Result<()> {
        let pair = self.pair();
        let (gp, gq, _) = batch_grads(self.cfg.threads, self.p.n_params(), self.q.n_params(), batch.len(), |i, gp, gq| {
            Ok((supervised_grads(&pair, batch[i], gp, gq)?, None))
        })?;
        let lr = sched.lr(self.opt_p.step);
        descend(&mut self.opt_p, self.p.as_mut(), &gp, batch.len(), lr)?;
        descend(&mut self.opt_q, self.q.as_mut(), &gq, batch.len(), lr)
    }

    /// One unsupervised minibatch; `items` are (index in the training set, dialog).
    fn unsup_update(&mut self, items: &[(usize, &Dialog)], stream: u64, sched: &LinearSchedule) -> Result<DialogStats> {
        let pair = self.pair();
        let cached: Vec<Option<Vec<TokenSeq>>> = items
            .iter()
            .map(|(_, d)| self.cache.get(&d.id).map(|e| e.latents.clone()))
            .collect();
        let method = self.method.as_ref();
        let (cfg, seed) = (self.cfg, self.cfg.seed);
        let (gp, gq, results) = batch_grads(cfg.threads, self.p.n_params(), self.q.n_params(), items.len(), |i, gp, gq| {
            let (idx, d) = items[i];
            let mut rng = dialog_rng(seed, stream, idx as u64);
            method.unsup_grads(&pair, d, cached[i].as_deref(), cfg.proposal_mode, &mut rng, gp, gq)
        })?;
        let mut total = DialogStats::default();
        for ((_, d), (st, sweep)) in items.iter().zip(&results) {
            total.merge(st);
            if let Some(sw) = sweep {
                self.cache.record(&d.id, sw);
            }
        }
        let n = items.len() as f64;
        let norm = gq.iter().map(|x| (x / n) * (x / n)).sum::<f64>().sqrt();
        self.state.grad_norms.push(norm);
        let lr = sched.lr(self.opt_p.step);
        descend(&mut self.opt_p, self.p.as_mut(), &gp, items.len(), lr)?;
        descend(&mut self.opt_q, self.q.as_mut(), &gq, items.len(), lr)?;
        Ok(total)
    }

    /// Evaluates, updates early stopping and returns whether to stop.
    fn end_epoch(&mut self, hook: &mut EvalHook, accept: f64, ckpt: Option<&CheckpointDir>) -> Result<bool> {
        self.state.epoch += 1;
        self.state.phase_epochs += 1;
        let mut row = hook(self.state.epoch, self.p.as_ref(), self.q.as_ref())?;
        row.epoch = self.state.epoch;
        row.mean_accept_rate = accept;
        row.phi_grad_norm_variance = if self.state.grad_norms.is_empty() {
            f64::NAN
        } else {
            grad_variance(&self.state.grad_norms).unwrap_or(f64::NAN)
        };
        let score = row.combined;
        self.report.push(row);
        let (improved, mut stop) = self.state.stopper.observe(self.state.epoch, score);
        // Patience only starts counting once the learning-rate warmup is over.
        let phase_len = if self.state.phase == 1 { self.cfg.epochs_sup } else { self.cfg.epochs_semi };
        if (self.state.phase_epochs as f64) <= (self.cfg.warmup_frac * phase_len as f64).ceil() {
            self.state.stopper.bad_epochs = 0;
            stop = false;
        }
        if improved {
            self.best_p = self.p.clone();
            self.best_q = self.q.clone();
        }
        log::info!(
            "epoch {} phase {} combined {score:.3} best {:.3}@{}",
            self.state.epoch,
            self.state.phase,
            self.state.stopper.best.unwrap_or(f64::NAN),
            self.state.stopper.best_epoch
        );
        if let Some(c) = ckpt {
            self.save(&c.path, improved)?;
        }
        Ok(stop)
    }

    fn save(&self, dir: &Path, best_changed: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| std::fs::write(dir.join(name), text).map_err(|e| Error::io(dir.join(name), e));
        write("config.json", serde_json::to_string_pretty(self.cfg)?)?;
        if best_changed || !dir.join("p.ckpt").exists() {
            save_model(self.best_p.as_ref(), &dir.join("p.ckpt"))?;
            save_model(self.best_q.as_ref(), &dir.join("q.ckpt"))?;
        }
        save_model(self.p.as_ref(), &dir.join("last_p.ckpt"))?;
        save_model(self.q.as_ref(), &dir.join("last_q.ckpt"))?;
        write("opt_p.ckpt", serde_json::to_string(&self.opt_p)?)?;
        write("opt_q.ckpt", serde_json::to_string(&self.opt_q)?)?;
        self.cache.write_jsonl(self.p.vocab(), &dir.join("cache.jsonl"))?;
        self.report.write_csv(&dir.join("metrics.csv"))?;
        write_grad_norms(&dir.join(format!("grad_norms_{}.csv", self.cfg.method)), &self.state.grad_norms)?;
        write("state.json", serde_json::to_string(&self.state)?)
    }

    fn load(&mut self, dir: &Path) -> Result<()> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(|e| Error::io(dir.join(name), e));
        let saved: TrainConfig = serde_json::from_str(&read("config.json")?)?;
        if &saved != self.cfg {
            return Err(Error::Config(format!(
                "checkpoint in {} was written with a different configuration",
                dir.display()
            )));
        }
        let vocab = self.p.vocab().clone();
        self.state = serde_json::from_str(&read("state.json")?)?;
        self.p = load_model(&dir.join("last_p.ckpt"), vocab.clone())?;
        self.q = load_model(&dir.join("last_q.ckpt"), vocab.clone())?;
        self.best_p = load_model(&dir.join("p.ckpt"), vocab.clone())?;
        self.best_q = load_model(&dir.join("q.ckpt"), vocab.clone())?;
        self.opt_p = serde_json::from_str(&read("opt_p.ckpt")?)?;
        self.opt_q = serde_json::from_str(&read("opt_q.ckpt")?)?;
        self.cache = LatentCache::read_jsonl(&vocab, &dir.join("cache.jsonl"))?;
        self.report = MetricsReport::read_csv(&dir.join("metrics.csv"))?;
        Ok(())
    }
}

pub fn write_grad_norms(path: &Path, norms: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record(["iteration", "norm"])?;
    for (i, n) in norms.iter().enumerate() {
        w.write_record([(i + 1).to_string(), n.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Two-phase training. Phase 1 fits both models on the labeled dialogs; phase 2
/// restarts the optimizers from the best phase-1 models and alternates
/// `sup_unsup_mix[0]` supervised with `sup_unsup_mix[1]` unsupervised minibatches,
/// the latter handled by the configured method. Both phases evaluate after every
/// epoch and stop early on the validation combined score; the best models seen
/// are returned.
pub fn semi_supervised_train(
    cfg: &TrainConfig,
    vocab: Arc<Vocab>,
    db: &dyn Database,
    train: &[Dialog],
    hook: &mut EvalHook,
    ckpt: Option<&CheckpointDir>,
) -> Result<Trained> {
    cfg.validate()?;
    let method = MethodRegistry::default().build(&cfg.method, &cfg.sampler)?;
    let labeled: Vec<&Dialog> = train.iter().filter(|d| d.labeled).collect();
    if labeled.is_empty() {
        return Err(Error::Config("no labeled dialogs in the training set".into()));
    }
    let unlabeled: Vec<(usize, &Dialog)> = train.iter().enumerate().filter(|(_, d)| !d.labeled).collect();
    let n_unlabeled = unlabeled.len();
    let unlabeled = if method.uses_unlabeled() { unlabeled } else { Vec::new() };

    let models = ModelRegistry::default();
    let p = models.build(&cfg.model, vocab.clone(), &cfg.model_hyper, mix_seed(cfg.seed.wrapping_mul(2)))?;
    let q = models.build(&cfg.model, vocab.clone(), &cfg.model_hyper, mix_seed(cfg.seed.wrapping_mul(2) + 1))?;
    let mut run = Run {
        cfg,
        method,
        db,
        best_p: p.clone(),
        best_q: q.clone(),
        opt_p: AdamW::new(p.n_params(), cfg.weight_decay),
        opt_q: AdamW::new(q.n_params(), cfg.weight_decay),
        p,
        q,
        cache: LatentCache::new(),
        report: MetricsReport::default(),
        state: State {
            phase: 1,
            phase_epochs: 0,
            epoch: 0,
            stopper: EarlyStopping::new(cfg.early_stop_patience),
            finished: false,
            grad_norms: Vec::new(),
        },
    };
    if let Some(c) = ckpt {
        if c.resume && c.path.join("state.json").exists() {
            run.load(&c.path)?;
        }
    }

    let bs = run.step_size();
    let sup_steps = labeled.len().div_ceil(bs);
    let sched1 = LinearSchedule::new(cfg.lr_max, cfg.warmup_frac, (cfg.epochs_sup * sup_steps) as u64);
    while run.state.phase == 1 && !run.state.finished {
        if run.state.phase_epochs >= cfg.epochs_sup {
            begin_phase2(&mut run);
            break;
        }
        let e = run.state.epoch as u64;
        let order = shuffled(labeled.len(), cfg.seed, STREAM_SUP + e);
        for chunk in order.chunks(bs) {
            let batch: Vec<&Dialog> = chunk.iter().map(|&i| labeled[i]).collect();
            run.sup_update(&batch, &sched1)?;
        }
        if run.end_epoch(hook, f64::NAN, ckpt)? || run.state.phase_epochs >= cfg.epochs_sup {
            begin_phase2(&mut run);
            if let Some(c) = ckpt {
                run.save(&c.path, false)?;
            }
        }
    }

    let [mix_sup, mix_unsup] = cfg.sup_unsup_mix;
    let groups = n_unlabeled.div_ceil(bs * mix_unsup).max(labeled.len().div_ceil(bs * mix_sup));
    let unsup_per_group = if unlabeled.is_empty() { 0 } else { mix_unsup };
    let sched2 = LinearSchedule::new(
        cfg.lr_max,
        cfg.warmup_frac,
        (cfg.epochs_semi * groups * (mix_sup + unsup_per_group)) as u64,
    );
    while run.state.phase == 2 && !run.state.finished {
        if run.state.phase_epochs >= cfg.epochs_semi {
            run.state.finished = true;
            break;
        }
        let e = run.state.epoch as u64;
        let lab_order = shuffled(labeled.len(), cfg.seed, STREAM_MIX_LAB + e);
        let unl_order = shuffled(unlabeled.len(), cfg.seed, STREAM_MIX_UNL + e);
        let (mut li, mut ui) = (0usize, 0usize);
        let mut epoch_stats = DialogStats::default();
        for _ in 0..groups {
            for _ in 0..mix_sup {
                let batch: Vec<&Dialog> = (0..bs.min(labeled.len()))
                    .map(|k| labeled[lab_order[(li + k) % labeled.len()]])
                    .collect();
                li += batch.len();
                run.sup_update(&batch, &sched2)?;
            }
            for _ in 0..unsup_per_group {
                if ui >= unlabeled.len() {
                    break;
                }
                let hi = (ui + bs).min(unlabeled.len());
                let items: Vec<(usize, &Dialog)> = unl_order[ui..hi].iter().map(|&k| unlabeled[k]).collect();
                ui = hi;
                let st = run.unsup_update(&items, STREAM_UNSUP + e, &sched2)?;
                epoch_stats.merge(&st);
            }
        }
        let accept = if epoch_stats.proposed == 0 {
            f64::NAN
        } else {
            epoch_stats.accepted as f64 / epoch_stats.proposed as f64
        };
        if epoch_stats.skipped > 0 {
            log::warn!("epoch {}: {} malformed latent turns skipped", run.state.epoch + 1, epoch_stats.skipped);
        }
        if run.end_epoch(hook, accept, ckpt)? || run.state.phase_epochs >= cfg.epochs_semi {
            run.state.finished = true;
            if let Some(c) = ckpt {
                run.save(&c.path, false)?;
            }
        }
    }

    let best_score = run.state.stopper.best.unwrap_or(f64::NAN);
    Ok(Trained {
        p: run.best_p,
        q: run.best_q,
        report: run.report,
        best_epoch: run.state.stopper.best_epoch,
        best_score,
        grad_norms: run.state.grad_norms,
        cache: run.cache,
        epochs_run: run.state.epoch,
    })
}

fn begin_phase2(run: &mut Run) {
    run.state.phase = 2;
    run.state.phase_epochs = 0;
    run.state.stopper.bad_epochs = 0;
    run.p = run.best_p.clone();
    run.q = run.best_q.clone();
    run.opt_p = AdamW::new(run.p.n_params(), run.cfg.weight_decay);
    run.opt_q = AdamW::new(run.q.n_params(), run.cfg.weight_decay);
}
