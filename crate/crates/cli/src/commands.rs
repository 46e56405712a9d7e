use std::path::{Path, PathBuf};

use hmoe_core::data::{build_split, read_manifest, write_degraded, PatchSource, SplitRatio};
use hmoe_core::image::ImagePlane;
use hmoe_core::metrics::evaluate;
use hmoe_core::moe::export_routing_map;
use hmoe_core::train::{file_sha256, fit, write_run_info, Checkpoint, EvalSet, FitOptions};
use hmoe_core::{Error, ExperimentConfig, ResidualBlock, Result};

use crate::Command;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData {
            root,
            config,
            out,
            ratio,
            seed,
            write_lr,
        } => prepare_data(root, config.as_deref(), &out, ratio.as_deref(), seed, write_lr),
        Command::Train {
            config,
            out,
            checkpoint,
            seed,
            deterministic,
        } => train(&config, &out, checkpoint, seed, deterministic),
        Command::Eval {
            checkpoint,
            split,
            scale,
            out,
        } => eval(&checkpoint, split.as_deref(), scale, &out),
        Command::Infer { checkpoint, input, out } => infer(&checkpoint, &input, &out),
        Command::VizRouting { checkpoint, input, out } => viz_routing(&checkpoint, &input, &out),
    }
}

/// Relative paths inside a config file are taken relative to that file.
fn resolve_paths(cfg: &mut ExperimentConfig, config_path: &Path) {
    let base = config_path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.data.root, &mut cfg.data.train_manifest, &mut cfg.data.test_manifest]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    resolve_paths(&mut cfg, path);
    Ok(cfg)
}

fn prepare_data(
    root: Option<PathBuf>,
    config: Option<&Path>,
    out: &Path,
    ratio: Option<&str>,
    seed: Option<u64>,
    write_lr: Option<usize>,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    let root = root
        .or_else(|| cfg.data.root.clone())
        .ok_or_else(|| Error::config("no image folder: pass --root or set data.root"))?;
    let ratio = match ratio {
        Some(text) => text.parse()?,
        None => SplitRatio::new(cfg.data.split_ratio[0], cfg.data.split_ratio[1])?,
    };
    let seed = seed.unwrap_or(cfg.data.split_seed);
    let split = build_split(&root, ratio, seed)?;
    let meta = split.write_manifests(&root, out)?;

    cfg.data.root = Some(root);
    cfg.data.split_ratio = [ratio.train, ratio.test];
    cfg.data.split_seed = seed;
    cfg.data.train_manifest = Some(out.join("train.txt"));
    cfg.data.test_manifest = Some(out.join("test.txt"));
    write_run_info(out, &cfg)?;
    if let Some(scale) = write_lr {
        let dir = out.join(format!("lr_x{scale}"));
        let written = write_degraded(&split.test_paths, scale, &dir)?;
        log::info!("wrote {} LR test images to {}", written.len(), dir.display());
    }
    println!(
        "train {}  test {}  skipped {}  (ratio {ratio}, seed {seed})",
        meta.train_count,
        meta.test_count,
        meta.skipped.len()
    );
    println!("train.txt sha256 {}", meta.train_sha256);
    println!("test.txt  sha256 {}", meta.test_sha256);
    Ok(())
}

fn train(config: &Path, out: &Path, resume: Option<PathBuf>, seed: Option<u64>, deterministic: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.train.deterministic |= deterministic;

    let (train_paths, test_paths) = match (&cfg.data.train_manifest, &cfg.data.root) {
        (Some(train), _) => {
            let test = cfg.data.test_manifest.as_deref().map(read_manifest).transpose()?;
            (read_manifest(train)?, test.unwrap_or_default())
        }
        (None, Some(root)) => {
            let ratio = SplitRatio::new(cfg.data.split_ratio[0], cfg.data.split_ratio[1])?;
            let split = build_split(root, ratio, cfg.data.split_seed)?;
            let dir = out.join("split");
            split.write_manifests(root, &dir)?;
            cfg.data.train_manifest = Some(dir.join("train.txt"));
            cfg.data.test_manifest = Some(dir.join("test.txt"));
            (split.train_paths, split.test_paths)
        }
        (None, None) => return Err(Error::config("set data.train_manifest or data.root")),
    };
    let source = PatchSource::new(
        train_paths,
        cfg.moe.scale,
        cfg.data.patch_size,
        cfg.data.augment,
        cfg.data.cache_images,
        cfg.train.seed,
    )?;
    log::info!(
        "training on {} images, evaluating on {}, x{}",
        source.len(),
        test_paths.len(),
        cfg.moe.scale
    );
    let options = FitOptions {
        resume,
        stop_after: None,
    };
    let summary = fit::<ResidualBlock>(&cfg, &source, &EvalSet::Paths(test_paths), out, &options)?;
    println!("finished at step {}", summary.final_iteration);
    println!("last checkpoint {}", summary.last_checkpoint.display());
    if let (Some(best), Some(path)) = (&summary.best, &summary.best_checkpoint) {
        println!(
            "best PSNR {:.4} dB / SSIM {:.4} at step {} -> {}",
            best.psnr_db,
            best.ssim,
            best.iteration,
            path.display()
        );
    }
    Ok(())
}

fn eval(checkpoint: &Path, split: Option<&Path>, scale: Option<usize>, out: &Path) -> Result<()> {
    let ck = Checkpoint::<ResidualBlock>::load(checkpoint)?;
    let hash = file_sha256(checkpoint)?;
    let model_scale = ck.config.moe.scale;
    if let Some(s) = scale.filter(|&s| s != model_scale) {
        return Err(Error::config(format!("--scale {s} does not match the checkpoint's scale {model_scale}")));
    }
    let manifest = split
        .map(Path::to_path_buf)
        .or_else(|| ck.config.data.test_manifest.clone())
        .ok_or_else(|| Error::config("no test manifest: pass --split"))?;
    let paths = read_manifest(&manifest)?;
    if paths.is_empty() {
        return Err(Error::config(format!("manifest {} is empty", manifest.display())));
    }
    let mut report = evaluate(&ck.model, &paths, model_scale, ck.config.border(), ck.config.eval.channel)?;
    report.checkpoint_sha256 = Some(hash);
    write_run_info(out, &ck.config)?;
    report.write(out)?;
    print!("{}", report.to_table());
    if report.records.is_empty() {
        return Err(Error::NonFinite("in evaluation: no image could be evaluated".into()));
    }
    Ok(())
}

fn infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::<ResidualBlock>::load(checkpoint)?;
    let lr = ImagePlane::load(input)?;
    let sr = ck.model.super_resolve(&lr)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    sr.save(out)?;
    println!(
        "{}x{} -> {}x{} written to {}",
        lr.width(),
        lr.height(),
        sr.width(),
        sr.height(),
        out.display()
    );
    Ok(())
}

fn viz_routing(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::<ResidualBlock>::load(checkpoint)?;
    let lr = ImagePlane::load(input)?;
    let agg = ck.model.aggregated_features(&lr)?;
    let decision = ck.model.head.route(&agg)?;
    let kernels: Vec<usize> = ck.config.moe.groups.iter().map(|g| g.kernel).collect();
    let export = export_routing_map(&decision, &kernels);
    write_run_info(out, &ck.config)?;
    export.write(out)?;
    let used = export.metadata.usage.iter().filter(|&&c| c > 0).count();
    println!(
        "{} of {} experts selected; maps written to {}",
        used,
        export.metadata.total_experts,
        out.display()
    );
    Ok(())
}
