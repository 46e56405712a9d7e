//! The full network: `SR = head(backbone(LR))`, with the aggregation module
//! feeding both routers of the head.

use ndarray::{Array3, ArrayViewMutD};
use rand::Rng;

use crate::backbone::{Backbone, BackboneCache, BackboneOutput, FeatureBlock, ResidualBlock};
use crate::config::{BlockKind, ExperimentConfig};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::mfa::{Mfa, MfaCache};
use crate::moe::{CombineOutput, HeadCache, HmoeHead, RoutingDecision};
use crate::params::{join, zeros_like, NamedTensor, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct SrModel<B = ResidualBlock> {
    pub backbone: Backbone<B>,
    pub mfa: Mfa,
    pub head: HmoeHead,
    pub detach_router_input: bool,
}

pub struct ModelOutput {
    /// `3 × sH × sW`, unclamped.
    pub sr: Array3<f64>,
    pub decision: RoutingDecision,
    pub balance: f64,
}

pub struct ModelCache<B: FeatureBlock> {
    backbone_out: BackboneOutput,
    backbone: BackboneCache<B>,
    mfa: MfaCache,
    head_out: CombineOutput,
    head: HeadCache,
}

/// Block kind a block type corresponds to in the config file.
pub trait BlockKindTag {
    const KIND: BlockKind;
}

impl BlockKindTag for ResidualBlock {
    const KIND: BlockKind = BlockKind::LightweightResidual;
}

impl<B: FeatureBlock + BlockKindTag> SrModel<B> {
    pub fn new(cfg: &ExperimentConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.backbone.block_kind != B::KIND {
            return Err(Error::config(format!(
                "backbone.block_kind {:?} is not available in this build (expected {:?})",
                cfg.backbone.block_kind,
                B::KIND
            )));
        }
        let c = cfg.backbone.channels;
        let backbone = Backbone::new(c, cfg.backbone.blocks, cfg.backbone.leaky_slope, rng)?;
        let mfa = Mfa::new(c, cfg.backbone.blocks, &cfg.mfa, rng);
        let head = HmoeHead::new(c, &cfg.moe, rng)?;
        Ok(SrModel {
            backbone,
            mfa,
            head,
            detach_router_input: cfg.mfa.detach_router_input,
        })
    }

    pub fn from_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut crate::rng::stream(&[seed, 0x1417]))
    }
}

impl<B: FeatureBlock> SrModel<B> {
    pub fn scale(&self) -> usize {
        self.head.scale()
    }

    pub fn forward(&self, lr: &ImagePlane) -> Result<ModelOutput> {
        let (out, _) = self.forward_cached(lr)?;
        Ok(out)
    }

    /// Inference: the SR image clamped to `[0,1]`.
    pub fn super_resolve(&self, lr: &ImagePlane) -> Result<ImagePlane> {
        ImagePlane::from_chw(&self.forward(lr)?.sr)
    }

    /// X^agg for an input, for inspection.
    pub fn aggregated_features(&self, lr: &ImagePlane) -> Result<Array3<f64>> {
        let bb = self.backbone.forward(lr)?;
        self.mfa.forward(&bb.levels.levels)
    }

    pub fn forward_cached(&self, lr: &ImagePlane) -> Result<(ModelOutput, ModelCache<B>)> {
        let (backbone_out, backbone) = self.backbone.forward_cached(lr)?;
        let (agg, mfa) = self.mfa.forward_cached(&backbone_out.levels.levels)?;
        let (head_out, head) = self
            .head
            .forward_cached(&backbone_out.feat, &agg, self.head.cfg.execution)?;
        let out = ModelOutput {
            sr: head_out.sr.clone(),
            decision: head_out.decision.clone(),
            balance: head_out.balance,
        };
        Ok((
            out,
            ModelCache {
                backbone_out,
                backbone,
                mfa,
                head_out,
                head,
            },
        ))
    }

    /// Gradient of `⟨d_sr, sr⟩ + balance_coeff · balance` w.r.t. every parameter.
    pub fn backward(&self, cache: &ModelCache<B>, d_sr: &Array3<f64>, balance_coeff: f64) -> Result<Self> {
        let mut grad = zeros_like(self);
        let (d_feat, d_agg) = self
            .head
            .backward(&cache.head_out, &cache.head, d_sr, balance_coeff, &mut grad.head)?;
        let levels = &cache.backbone_out.levels.levels;
        let mut d_levels = self.mfa.backward(levels, &cache.mfa, &d_agg, &mut grad.mfa);
        if self.detach_router_input {
            for d in &mut d_levels {
                d.fill(0.0);
            }
        }
        self.backbone
            .backward(&cache.backbone_out, &cache.backbone, &d_feat, d_levels, &mut grad.backbone);
        Ok(grad)
    }
}

impl<B: FeatureBlock> Parameters for SrModel<B> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.backbone.collect(&join(prefix, "backbone"), out);
        self.mfa.collect(&join(prefix, "mfa"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        self.backbone.collect_mut(out);
        self.mfa.collect_mut(out);
        self.head.collect_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GroupSpec;
    use crate::gradcheck::check_model;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.channels = 4;
        cfg.backbone.blocks = 2;
        cfg.moe.scale = 2;
        cfg.moe.groups = vec![GroupSpec { kernel: 1, experts: 2 }, GroupSpec { kernel: 3, experts: 2 }];
        cfg
    }

    fn input(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = crate::rng::stream(&[seed]);
        ImagePlane::new(Array3::from_shape_simple_fn((h, w, 3), || rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn shape_law_x4() {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.channels = 8;
        cfg.backbone.blocks = 2;
        let model: SrModel = SrModel::from_seed(&cfg, 1).unwrap();
        let sr = model.super_resolve(&input(16, 12, 2)).unwrap();
        assert_eq!((sr.height(), sr.width()), (64, 48));
        assert!(sr.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pluggable_kind_rejected_for_reference_block() {
        let mut cfg = tiny_cfg();
        cfg.backbone.block_kind = BlockKind::Pluggable;
        assert!(SrModel::<ResidualBlock>::from_seed(&cfg, 0).unwrap_err().is_usage());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for (renorm, soft, top_k, balance) in [(false, false, 1, 0.0), (true, false, 2, 0.0), (false, true, 1, 0.3)] {
            let mut cfg = tiny_cfg();
            cfg.moe.renormalize_topk = renorm;
            cfg.moe.soft_group = soft;
            cfg.moe.top_k = top_k;
            cfg.moe.balance_coeff = balance;
            let model: SrModel = SrModel::from_seed(&cfg, 3).unwrap();
            let lr = input(3, 3, 4);
            let report = check_model(&model, &lr, balance, 1e-6, 11, |_| true, 6).unwrap();
            assert!(report.skipped < report.checked / 4, "{report:?}");
            assert!(report.max_rel_error <= 1e-4, "{renorm} {soft} {top_k}: {report:?}");
        }
    }

    #[test]
    fn detach_stops_router_gradient_into_backbone() {
        let mut cfg = tiny_cfg();
        cfg.mfa.detach_router_input = true;
        let model: SrModel = SrModel::from_seed(&cfg, 5).unwrap();
        let lr = input(3, 3, 6);
        let (out, cache) = model.forward_cached(&lr).unwrap();
        // Only the router path is exercised by a zero output gradient plus the balance penalty.
        let zero = Array3::zeros(out.sr.dim());
        let g = model.backward(&cache, &zero, 1.0).unwrap();
        assert!(crate::params::l2_norm(&g.backbone) == 0.0);
        assert!(crate::params::l2_norm(&g.mfa) > 0.0);
    }
}
