//! Feature extraction: a 3×3 stem, `L` residual blocks whose outputs are all
//! kept for aggregation, and a global-residual fusion conv.

use ndarray::{Array3, ArrayViewMutD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::nn::{self, Conv2d};
use crate::params::{join, NamedTensor, Parameters};

/// A shape-preserving residual block. Implement this to swap in a different
/// block architecture (e.g. attention groups) behind the same interface.
pub trait FeatureBlock: Parameters + Clone + Send + Sync {
    type Cache: Send;

    fn init(channels: usize, leaky_slope: f64, rng: &mut impl Rng) -> Self;

    /// Returns `x + transform(x)`.
    fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, Self::Cache)>;

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, cache: &Self::Cache, d_out: &Array3<f64>, grad: &mut Self) -> Array3<f64>;

    /// Zeroes the transform path so the block becomes the identity.
    fn zero_transform(&mut self);
}

/// conv → leaky → conv, added back onto the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub leaky_slope: f64,
}

pub struct ResidualCache {
    input: Array3<f64>,
    pre_act: Array3<f64>,
    act: Array3<f64>,
}

impl FeatureBlock for ResidualBlock {
    type Cache = ResidualCache;

    fn init(channels: usize, leaky_slope: f64, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(channels, channels, 3, true, rng),
            conv2: Conv2d::new(channels, channels, 3, true, rng),
            leaky_slope,
        }
    }

    fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ResidualCache)> {
        let pre_act = self.conv1.forward(x)?;
        let act = nn::leaky_relu(&pre_act, self.leaky_slope);
        let out = x + &self.conv2.forward(&act)?;
        Ok((
            out,
            ResidualCache {
                input: x.clone(),
                pre_act,
                act,
            },
        ))
    }

    fn backward(&self, cache: &ResidualCache, d_out: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        let d_act = self.conv2.backward(&cache.act, d_out, &mut grad.conv2);
        let d_pre = nn::leaky_relu_backward(&cache.pre_act, &d_act, self.leaky_slope);
        let d_in = self.conv1.backward(&cache.input, &d_pre, &mut grad.conv1);
        d_in + d_out
    }

    fn zero_transform(&mut self) {
        self.conv2.weight.fill(0.0);
        if let Some(b) = &mut self.conv2.bias {
            b.fill(0.0);
        }
    }
}

impl Parameters for ResidualBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        self.conv1.collect_mut(out);
        self.conv2.collect_mut(out);
    }
}

/// Outputs of every block, in order; all share one `C×H×W` shape.
#[derive(Clone, Debug)]
pub struct MultiLevelFeatures {
    pub levels: Vec<Array3<f64>>,
}

impl MultiLevelFeatures {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn last(&self) -> Option<&Array3<f64>> {
        self.levels.last()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<B = ResidualBlock> {
    pub stem: Conv2d,
    pub blocks: Vec<B>,
    pub fuse: Conv2d,
    pub channels: usize,
}

pub struct BackboneCache<B: FeatureBlock> {
    lr: Array3<f64>,
    block_caches: Vec<B::Cache>,
}

/// Everything the backbone hands downstream.
pub struct BackboneOutput {
    pub f0: Array3<f64>,
    pub levels: MultiLevelFeatures,
    /// `fuse(X^L) + f0`; per-pixel vectors of this map feed the experts.
    pub feat: Array3<f64>,
}

impl<B: FeatureBlock> Backbone<B> {
    pub fn new(channels: usize, blocks: usize, leaky_slope: f64, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || blocks == 0 {
            return Err(Error::config("backbone needs at least one channel and one block"));
        }
        let stem = Conv2d::new(3, channels, 3, true, rng);
        let blocks = (0..blocks).map(|_| B::init(channels, leaky_slope, rng)).collect();
        let fuse = Conv2d::new(channels, channels, 3, true, rng);
        Ok(Backbone {
            stem,
            blocks,
            fuse,
            channels,
        })
    }

    /// `3×H×W` image → `C×H×W` features.
    pub fn shallow_embed(&self, lr: &ImagePlane) -> Result<Array3<f64>> {
        self.stem.forward(&lr.to_chw())
    }

    pub fn run_blocks(&self, f0: &Array3<f64>) -> Result<MultiLevelFeatures> {
        Ok(self.run_blocks_cached(f0)?.0)
    }

    fn run_blocks_cached(&self, f0: &Array3<f64>) -> Result<(MultiLevelFeatures, Vec<B::Cache>)> {
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = f0.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward(&x)?;
            nn::ensure_finite(&y.view().into_dyn(), || format!("in output of backbone block {i}"))?;
            levels.push(y.clone());
            caches.push(cache);
            x = y;
        }
        Ok((MultiLevelFeatures { levels }, caches))
    }

    pub fn final_feature(&self, levels: &MultiLevelFeatures, f0: &Array3<f64>) -> Result<Array3<f64>> {
        let last = levels
            .last()
            .ok_or_else(|| Error::config("final_feature needs at least one level"))?;
        if last.dim() != f0.dim() {
            return Err(Error::shape(format!(
                "last level {:?} does not match stem output {:?}",
                last.dim(),
                f0.dim()
            )));
        }
        Ok(self.fuse.forward(last)? + f0)
    }

    pub fn forward(&self, lr: &ImagePlane) -> Result<BackboneOutput> {
        Ok(self.forward_cached(lr)?.0)
    }

    pub(crate) fn forward_cached(&self, lr: &ImagePlane) -> Result<(BackboneOutput, BackboneCache<B>)> {
        let chw = lr.to_chw();
        let f0 = self.stem.forward(&chw)?;
        let (levels, block_caches) = self.run_blocks_cached(&f0)?;
        let feat = self.final_feature(&levels, &f0)?;
        Ok((
            BackboneOutput { f0, levels, feat },
            BackboneCache {
                lr: chw,
                block_caches,
            },
        ))
    }

    /// Backpropagates gradients arriving at `feat` and at each level.
    pub(crate) fn backward(
        &self,
        out: &BackboneOutput,
        cache: &BackboneCache<B>,
        d_feat: &Array3<f64>,
        mut d_levels: Vec<Array3<f64>>,
        grad: &mut Self,
    ) {
        let last = self.blocks.len() - 1;
        let mut d_f0 = d_feat.clone();
        d_levels[last] += &self.fuse.backward(&out.levels.levels[last], d_feat, &mut grad.fuse);
        let mut carry: Option<Array3<f64>> = None;
        for i in (0..self.blocks.len()).rev() {
            let mut d_out = std::mem::replace(&mut d_levels[i], Array3::zeros((0, 0, 0)));
            if let Some(c) = carry.take() {
                d_out += &c;
            }
            carry = Some(self.blocks[i].backward(&cache.block_caches[i], &d_out, &mut grad.blocks[i]));
        }
        if let Some(c) = carry {
            d_f0 += &c;
        }
        self.stem.backward_params(&cache.lr, &d_f0, &mut grad.stem);
    }
}

impl<B: FeatureBlock> Parameters for Backbone<B> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.stem.collect(&join(prefix, "stem"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.fuse.collect(&join(prefix, "fuse"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        self.stem.collect_mut(out);
        for b in &mut self.blocks {
            b.collect_mut(out);
        }
        self.fuse.collect_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::new(Array3::from_shape_simple_fn((h, w, 3), || rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn embed_shape_and_zero_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bb: Backbone = Backbone::new(64, 1, 0.01, &mut rng).unwrap();
        let f0 = bb.shallow_embed(&image(64, 64, 1)).unwrap();
        assert_eq!(f0.dim(), (64, 64, 64));

        bb.stem = Conv2d::new(3, 64, 3, false, &mut rng);
        let zero = ImagePlane::filled(8, 8, 0.0).unwrap();
        assert!(bb.shallow_embed(&zero).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_list_and_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bb: Backbone = Backbone::new(8, 3, 0.01, &mut rng).unwrap();
        let f0 = bb.shallow_embed(&image(5, 6, 2)).unwrap();
        let levels = bb.run_blocks(&f0).unwrap();
        assert_eq!(levels.len(), 3);
        assert!(levels.levels.iter().all(|l| l.dim() == (8, 5, 6)));

        for b in &mut bb.blocks {
            b.zero_transform();
        }
        let levels = bb.run_blocks(&f0).unwrap();
        assert!(levels.levels.iter().all(|l| *l == f0));
    }

    #[test]
    fn six_blocks_shape_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb: Backbone = Backbone::new(64, 6, 0.01, &mut rng).unwrap();
        let out = bb.forward(&image(64, 64, 3)).unwrap();
        assert_eq!(out.levels.len(), 6);
        assert!(out.levels.levels.iter().all(|l| l.dim() == (64, 64, 64)));
        assert_eq!(out.feat.dim(), (64, 64, 64));
        assert!(out.feat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_fusion_passes_stem_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bb: Backbone = Backbone::new(4, 2, 0.01, &mut rng).unwrap();
        bb.fuse = Conv2d::zeros(4, 4, 3, true);
        let out = bb.forward(&image(4, 4, 5)).unwrap();
        assert_eq!(out.feat, out.f0);
    }

    #[test]
    fn final_feature_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bb: Backbone = Backbone::new(4, 1, 0.01, &mut rng).unwrap();
        let levels = MultiLevelFeatures {
            levels: vec![Array3::zeros((4, 3, 3))],
        };
        assert!(bb.final_feature(&levels, &Array3::zeros((4, 2, 2))).is_err());
        let empty = MultiLevelFeatures { levels: vec![] };
        assert!(bb.final_feature(&empty, &Array3::zeros((4, 2, 2))).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bb: Backbone = Backbone::new(8, 2, 0.01, &mut rng).unwrap();
        let img = image(7, 5, 7);
        assert_eq!(bb.forward(&img).unwrap().feat, bb.forward(&img).unwrap().feat);
    }
}
