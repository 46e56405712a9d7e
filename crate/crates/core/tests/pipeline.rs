use std::path::Path;

use hmoe_core::config::{BlockKind, GroupSpec, MetricChannel};
use hmoe_core::data::{build_split, PatchSource, SplitRatio};
use hmoe_core::gradcheck::check_model;
use hmoe_core::metrics::evaluate;
use hmoe_core::model::BlockKindTag;
use hmoe_core::nn::Conv2d;
use hmoe_core::params::{NamedTensor, Parameters};
use hmoe_core::train::{fit, Checkpoint, EvalSet, FitOptions};
use hmoe_core::{ExperimentConfig, FeatureBlock, ImagePlane, SrModel};
use ndarray::{Array3, ArrayViewMutD};
use rand::{Rng, SeedableRng};

/// A downstream block: `x + conv1x1(x)`.
#[derive(Clone, Debug, PartialEq)]
struct PointwiseBlock {
    conv: Conv2d,
}

impl FeatureBlock for PointwiseBlock {
    type Cache = Array3<f64>;

    fn init(channels: usize, _leaky_slope: f64, rng: &mut impl Rng) -> Self {
        PointwiseBlock {
            conv: Conv2d::new(channels, channels, 1, true, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> hmoe_core::Result<(Array3<f64>, Array3<f64>)> {
        Ok((x + &self.conv.forward(x)?, x.clone()))
    }

    fn backward(&self, cache: &Array3<f64>, d_out: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        self.conv.backward(cache, d_out, &mut grad.conv) + d_out
    }

    fn zero_transform(&mut self) {
        self.conv.weight.fill(0.0);
        if let Some(b) = &mut self.conv.bias {
            b.fill(0.0);
        }
    }
}

impl Parameters for PointwiseBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        self.conv.collect_mut(out);
    }
}

impl BlockKindTag for PointwiseBlock {
    const KIND: BlockKind = BlockKind::Pluggable;
}

fn small_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.channels = 4;
    cfg.backbone.blocks = 2;
    cfg.moe.scale = 2;
    cfg.moe.groups = vec![GroupSpec { kernel: 1, experts: 2 }, GroupSpec { kernel: 3, experts: 2 }];
    cfg.data.patch_size = 6;
    cfg.train.batch_size = 2;
    cfg.train.iterations = 6;
    cfg.train.deterministic = true;
    cfg.train.eval_every = 3;
    cfg.train.checkpoint_every = 0;
    cfg
}

fn textured(h: usize, w: usize, seed: u64) -> ImagePlane {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..6.0);
    ImagePlane::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        0.5 + 0.4 * ((x as f64 * 0.4 + phase).sin() * (y as f64 * 0.3 + c as f64).cos())
    }))
    .unwrap()
}

#[test]
fn pluggable_block_trains_and_checks_out() {
    let mut cfg = small_cfg();
    cfg.backbone.block_kind = BlockKind::Pluggable;
    let model = SrModel::<PointwiseBlock>::from_seed(&cfg, 1).unwrap();
    let report = check_model(&model, &textured(3, 3, 0), 0.0, 1e-6, 2, |_| true, 4).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    assert!(report.by_category["backbone"].0 > 0);

    let src = PatchSource::from_images(vec![textured(20, 20, 1), textured(18, 22, 2)], 2, 6, true, 0).unwrap();
    let test = EvalSet::Images(vec![("t".into(), textured(24, 24, 3))]);
    let out = tempfile::tempdir().unwrap();
    let summary = fit::<PointwiseBlock>(&cfg, &src, &test, out.path(), &FitOptions::default()).unwrap();
    assert_eq!(summary.evals.len(), 2);
    let ck = Checkpoint::<PointwiseBlock>::load(&summary.last_checkpoint).unwrap();
    assert_eq!(ck.iteration, 6);

    // The reference block refuses a config asking for a pluggable backbone.
    assert!(Checkpoint::<hmoe_core::ResidualBlock>::load(&summary.last_checkpoint).is_err());
}

fn write_folder(root: &Path) {
    for c in 0..2 {
        for i in 0..4u64 {
            let img = textured(28, 28, c * 10 + i);
            let path = root.join(format!("scene{c}/{i}.png"));
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            img.save(&path).unwrap();
        }
    }
}

#[test]
fn folder_to_report() {
    let data = tempfile::tempdir().unwrap();
    write_folder(data.path());
    let split = build_split(data.path(), SplitRatio::new(3, 1).unwrap(), 5).unwrap();
    assert_eq!((split.train_paths.len(), split.test_paths.len()), (6, 2));

    let cfg = small_cfg();
    let src = PatchSource::new(split.train_paths.clone(), 2, 6, true, false, 0).unwrap();
    let out = tempfile::tempdir().unwrap();
    let summary = fit::<hmoe_core::ResidualBlock>(
        &cfg,
        &src,
        &EvalSet::Paths(split.test_paths.clone()),
        out.path(),
        &FitOptions::default(),
    )
    .unwrap();
    let best = summary.best.unwrap();
    assert!(best.psnr_db.is_finite());

    let model: SrModel = Checkpoint::load(summary.best_checkpoint.as_ref().unwrap()).unwrap().model;
    let report = evaluate(&model, &split.test_paths, 2, cfg.border(), MetricChannel::Rgb).unwrap();
    assert_eq!(report.records.len(), 2);
    assert!((report.mean_psnr_db - best.psnr_db).abs() < 1e-9);

    let mut with_missing = split.test_paths.clone();
    with_missing.push(data.path().join("missing.png"));
    let report = evaluate(&model, &with_missing, 2, cfg.border(), MetricChannel::Rgb).unwrap();
    assert_eq!(report.skipped.len(), 1);
    assert!(evaluate(&model, &split.test_paths, 4, 4, MetricChannel::Rgb).unwrap_err().is_usage());
}
