//! End-to-end optimization with L1 loss and Adam.
//!
//! `fit` evaluates on a schedule and can resume from any checkpoint it wrote.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{file_sha256, Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{lr_at, Adam};

use crate::backbone::FeatureBlock;
use crate::config::ExperimentConfig;
use crate::data::{PatchPair, PatchSource};
use crate::error::{Error, Result};
use crate::gradcheck::category;
use crate::image::ImagePlane;
use crate::metrics::{evaluate_image, ImageRecord, MetricReport, SkippedImage};
use crate::model::{BlockKindTag, SrModel};
use crate::params::{accumulate, l2_norm, zeros_like, Parameters};

/// Mean absolute error and its gradient w.r.t. `sr`.
pub fn l1_loss(sr: &Array3<f64>, hr: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    if sr.dim() != hr.dim() {
        return Err(Error::shape(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            sr.dim(),
            hr.dim()
        )));
    }
    let n = sr.len() as f64;
    let diff = sr - hr;
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let grad = diff.mapv(|d| if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 });
    Ok((loss, grad))
}

/// Shannon entropy (nats) of a usage histogram.
pub fn usage_entropy(usage: &[u64]) -> f64 {
    let total: u64 = usage.iter().sum();
    if total == 0 {
        return 0.0;
    }
    usage
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub balance: f64,
    /// Pixels per global expert id, summed over the batch.
    pub usage: Vec<u64>,
    pub grad_norm: f64,
    pub lr: f64,
}

/// L2 norm of the gradient per parameter category.
pub fn grad_norms<M: Parameters>(grad: &M) -> BTreeMap<String, f64> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for t in grad.named_tensors() {
        *sq.entry(category(&t.name).to_string()).or_default() += t.value.iter().map(|v| v * v).sum::<f64>();
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

struct SampleResult<B> {
    loss: f64,
    balance: f64,
    usage: Vec<u64>,
    grad: SrModel<B>,
}

fn sample_gradient<B: FeatureBlock>(
    model: &SrModel<B>,
    pair: &PatchPair,
    batch: usize,
    balance_coeff: f64,
) -> Result<SampleResult<B>> {
    let (out, cache) = model.forward_cached(&pair.lr)?;
    let (loss, mut d_sr) = l1_loss(&out.sr, &pair.hr.to_chw())?;
    d_sr.mapv_inplace(|v| v / batch as f64);
    let grad = model.backward(&cache, &d_sr, balance_coeff / batch as f64)?;
    Ok(SampleResult {
        loss,
        balance: out.balance,
        usage: out.decision.usage_histogram(),
        grad,
    })
}

/// Batch gradient of `mean L1 + balance_coeff · mean balance`.
///
/// Per-sample work may run in parallel, but results are always reduced in
/// batch order so the sum is identical either way.
pub fn batch_gradient<B: FeatureBlock>(
    model: &SrModel<B>,
    batch: &[PatchPair],
    balance_coeff: f64,
    parallel: bool,
) -> Result<(SrModel<B>, f64, f64, Vec<u64>)> {
    if batch.is_empty() {
        return Err(Error::config("batch is empty"));
    }
    let n = batch.len();
    let results: Vec<SampleResult<B>> = if parallel {
        batch
            .par_iter()
            .map(|p| sample_gradient(model, p, n, balance_coeff))
            .collect::<Result<_>>()?
    } else {
        batch
            .iter()
            .map(|p| sample_gradient(model, p, n, balance_coeff))
            .collect::<Result<_>>()?
    };
    let mut grad = zeros_like(model);
    let mut usage = vec![0u64; model.head.total_experts()];
    let (mut loss, mut balance) = (0.0, 0.0);
    for r in &results {
        accumulate(&mut grad, &r.grad);
        loss += r.loss;
        balance += r.balance;
        for (u, c) in usage.iter_mut().zip(&r.usage) {
            *u += c;
        }
    }
    Ok((grad, loss / n as f64, balance / n as f64, usage))
}

/// One optimizer step on `batch`. Aborts before touching the weights if the
/// loss or gradient is non-finite.
pub fn train_step<B: FeatureBlock>(
    model: &mut SrModel<B>,
    optimizer: &mut Adam<SrModel<B>>,
    batch: &[PatchPair],
    lr: f64,
    balance_coeff: f64,
    parallel: bool,
) -> Result<StepStats> {
    let (grad, loss, balance, usage) = batch_gradient(model, batch, balance_coeff, parallel)?;
    let grad_norm = l2_norm(&grad);
    if !loss.is_finite() || !grad_norm.is_finite() {
        let norms: Vec<String> = grad_norms(&grad).iter().map(|(k, v)| format!("{k}={v:e}")).collect();
        return Err(Error::NonFinite(format!(
            "in training step {}: loss {loss}, lr {lr:e}, grad norms [{}]",
            optimizer.t + 1,
            norms.join(", ")
        )));
    }
    optimizer.step(model, &grad, lr);
    Ok(StepStats {
        loss,
        balance,
        usage,
        grad_norm,
        lr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Completed steps when the evaluation ran.
    pub iteration: u64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Images evaluated during training.
pub enum EvalSet {
    Paths(Vec<PathBuf>),
    Images(Vec<(PathBuf, ImagePlane)>),
}

impl EvalSet {
    pub fn len(&self) -> usize {
        match self {
            EvalSet::Paths(p) => p.len(),
            EvalSet::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whole-image metrics over the first `max` images (0 = all).
    pub fn evaluate<B: FeatureBlock>(&self, model: &SrModel<B>, cfg: &ExperimentConfig, max: usize) -> Result<MetricReport> {
        let n = if max == 0 { self.len() } else { max.min(self.len()) };
        let border = cfg.border();
        let channel = cfg.eval.channel;
        let run = |path: &PathBuf, img: Result<ImagePlane>| -> std::result::Result<ImageRecord, SkippedImage> {
            let skip = |e: Error| SkippedImage {
                path: path.clone(),
                reason: e.to_string(),
            };
            let (psnr_db, ssim) = evaluate_image(model, &img.map_err(skip)?, border, channel).map_err(skip)?;
            Ok(ImageRecord {
                path: path.clone(),
                psnr_db,
                ssim,
            })
        };
        let results: Vec<_> = match self {
            EvalSet::Paths(p) => p[..n].par_iter().map(|p| run(p, ImagePlane::load(p))).collect(),
            EvalSet::Images(i) => i[..n].par_iter().map(|(p, img)| run(p, Ok(img.clone()))).collect(),
        };
        let (mut records, mut skipped) = (Vec::new(), Vec::new());
        for r in results {
            match r {
                Ok(rec) => records.push(rec),
                Err(s) => skipped.push(s),
            }
        }
        Ok(MetricReport::from_records(records, skipped, model.scale(), border, channel))
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps, as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    /// `(step index, loss)` for every step run in this call.
    pub losses: Vec<(u64, f64)>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub final_iteration: u64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord<'a> {
    Step {
        iteration: u64,
        loss: f64,
        lr: f64,
        balance: f64,
        usage_entropy: f64,
        grad_norm: f64,
    },
    Eval {
        iteration: u64,
        psnr_db: f64,
        ssim: f64,
        images: usize,
        best: bool,
    },
    Resume {
        iteration: u64,
        checkpoint: &'a Path,
    },
}

/// Writes `config.toml` and `VERSION` into an output directory.
pub fn write_run_info(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let v = dir.join("VERSION");
    std::fs::write(&v, format!("{}\n", crate::VERSION)).map_err(|e| Error::io(&v, e))
}

/// Runs the configured iteration budget.
///
/// Step `i` draws its batch from `(seed, i)` only, so a run resumed from a
/// checkpoint reproduces the uninterrupted loss trace exactly.
pub fn fit<B: FeatureBlock + BlockKindTag>(
    cfg: &ExperimentConfig,
    train: &PatchSource,
    test: &EvalSet,
    out: &Path,
    options: &FitOptions,
) -> Result<FitSummary> {
    cfg.validate()?;
    let t = &cfg.train;
    if t.iterations == 0 || t.batch_size == 0 || t.lr <= 0.0 {
        return Err(Error::config("train.iterations, train.batch_size and train.lr must be positive"));
    }
    write_run_info(out, cfg)?;
    let ckpt_dir = out.join("checkpoints");
    let log_path = out.join("train_log.ndjson");

    let (mut model, mut optimizer, start, mut best) = match &options.resume {
        Some(path) => {
            let ck = Checkpoint::<B>::load(path)?;
            if ck.config.backbone != cfg.backbone || ck.config.mfa != cfg.mfa || ck.config.moe != cfg.moe {
                return Err(Error::config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            let opt = ck.optimizer.unwrap_or_else(|| Adam::new(&ck.model, t.betas, t.adam_eps));
            (ck.model, opt, ck.iteration, ck.best)
        }
        None => {
            let model = SrModel::<B>::from_seed(cfg, t.seed)?;
            let opt = Adam::new(&model, t.betas, t.adam_eps);
            (model, opt, 0, None)
        }
    };
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(options.resume.is_some())
        .write(true)
        .truncate(options.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut emit = |rec: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };
    if let Some(path) = &options.resume {
        log::info!("resuming from {} at step {start}", path.display());
        emit(&LogRecord::Resume {
            iteration: start,
            checkpoint: path,
        })?;
    }

    let end = options.stop_after.map_or(t.iterations, |s| s.min(t.iterations));
    let parallel = !t.deterministic;
    let mut losses = Vec::new();
    let mut evals = Vec::new();
    let mut best_checkpoint = best.as_ref().map(|_| ckpt_dir.join("best.ckpt"));
    let snapshot = |model: &SrModel<B>, optimizer: &Adam<SrModel<B>>, iteration: u64, best: &Option<EvalRecord>| Checkpoint {
        config: cfg.clone(),
        iteration,
        model: model.clone(),
        optimizer: Some(optimizer.clone()),
        best: best.clone(),
    };

    for i in start..end {
        let batch = train.batch(i, t.batch_size, parallel)?;
        let lr = lr_at(t, i);
        let stats = train_step(&mut model, &mut optimizer, &batch, lr, cfg.moe.balance_coeff, parallel).inspect_err(|e| {
            log::error!("aborting at step {i}: {e}");
            let dump = out.join("diagnostic.txt");
            let _ = std::fs::write(&dump, format!("step {i}\nlr {lr:e}\n{e}\n"));
        })?;
        losses.push((i, stats.loss));
        let done = i + 1;
        if done % t.log_every.max(1) == 0 || done == end {
            emit(&LogRecord::Step {
                iteration: done,
                loss: stats.loss,
                lr,
                balance: stats.balance,
                usage_entropy: usage_entropy(&stats.usage),
                grad_norm: stats.grad_norm,
            })?;
            log::info!("step {done}/{} loss {:.6} lr {lr:.2e}", t.iterations, stats.loss);
        }
        if t.eval_every > 0 && done % t.eval_every == 0 && !test.is_empty() {
            let report = test.evaluate(&model, cfg, t.eval_max_images)?;
            let rec = EvalRecord {
                iteration: done,
                psnr_db: report.mean_psnr_db,
                ssim: report.mean_ssim,
            };
            let improved = !rec.psnr_db.is_nan() && best.as_ref().is_none_or(|b| rec.psnr_db > b.psnr_db);
            emit(&LogRecord::Eval {
                iteration: done,
                psnr_db: rec.psnr_db,
                ssim: rec.ssim,
                images: report.records.len(),
                best: improved,
            })?;
            log::info!("eval at {done}: PSNR {:.4} dB SSIM {:.4}", rec.psnr_db, rec.ssim);
            if improved {
                best = Some(rec.clone());
                let path = ckpt_dir.join("best.ckpt");
                snapshot(&model, &optimizer, done, &best).save(&path)?;
                best_checkpoint = Some(path);
            }
            evals.push(rec);
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 {
            snapshot(&model, &optimizer, done, &best).save(&ckpt_dir.join(format!("iter_{done:07}.ckpt")))?;
        }
    }

    let last_checkpoint = ckpt_dir.join("last.ckpt");
    snapshot(&model, &optimizer, end.max(start), &best).save(&last_checkpoint)?;
    Ok(FitSummary {
        losses,
        evals,
        best,
        final_iteration: end.max(start),
        last_checkpoint,
        best_checkpoint,
        log_path,
    })
}
