//! Multi-level feature aggregation.
//!
//! Each backbone level gets its own conv + leaky rectification. The sum of
//! those is layer-normalized per pixel and then fused by one more conv into
//! the routing-guidance map `X^agg`.

use ndarray::{Array3, ArrayViewMutD};
use rand::Rng;

use crate::config::MfaConfig;
use crate::error::{Error, Result};
use crate::nn::{self, ChannelLayerNorm, Conv2d, LayerNormCache};
use crate::params::{join, NamedTensor, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct Mfa {
    pub level_convs: Vec<Conv2d>,
    pub norm: ChannelLayerNorm,
    pub fuse: Conv2d,
    pub leaky_slope: f64,
}

pub struct MfaCache {
    level_pre: Vec<Array3<f64>>,
    norm: LayerNormCache,
    normed: Array3<f64>,
    fuse_pre: Array3<f64>,
}

impl Mfa {
    pub fn new(channels: usize, levels: usize, cfg: &MfaConfig, rng: &mut impl Rng) -> Self {
        Mfa {
            level_convs: (0..levels)
                .map(|_| Conv2d::new(channels, channels, cfg.level_kernel, true, rng))
                .collect(),
            norm: ChannelLayerNorm::new(channels, cfg.ln_eps),
            fuse: Conv2d::new(channels, channels, cfg.fuse_kernel, true, rng),
            leaky_slope: cfg.leaky_slope,
        }
    }

    /// `LeakyReLU(Conv2D(X^i))` with the weights of level `index`.
    pub fn level_transform(&self, index: usize, x: &Array3<f64>) -> Result<Array3<f64>> {
        let conv = self
            .level_convs
            .get(index)
            .ok_or_else(|| Error::config(format!("no level transform {index}")))?;
        Ok(nn::leaky_relu(&conv.forward(x)?, self.leaky_slope))
    }

    /// Sums already transformed levels, then normalizes and fuses them.
    pub fn aggregate(&self, levels_prime: &[Array3<f64>]) -> Result<Array3<f64>> {
        let sum = sum_levels(levels_prime)?;
        let (normed, _) = self.norm.forward(&sum);
        Ok(nn::leaky_relu(&self.fuse.forward(&normed)?, self.leaky_slope))
    }

    pub fn forward(&self, levels: &[Array3<f64>]) -> Result<Array3<f64>> {
        Ok(self.forward_cached(levels)?.0)
    }

    pub(crate) fn forward_cached(&self, levels: &[Array3<f64>]) -> Result<(Array3<f64>, MfaCache)> {
        if levels.len() != self.level_convs.len() {
            return Err(Error::config(format!(
                "aggregation built for {} levels, got {}",
                self.level_convs.len(),
                levels.len()
            )));
        }
        let mut level_pre = Vec::with_capacity(levels.len());
        let mut primes = Vec::with_capacity(levels.len());
        for (conv, x) in self.level_convs.iter().zip(levels) {
            let pre = conv.forward(x)?;
            primes.push(nn::leaky_relu(&pre, self.leaky_slope));
            level_pre.push(pre);
        }
        let sum = sum_levels(&primes)?;
        let (normed, norm) = self.norm.forward(&sum);
        let fuse_pre = self.fuse.forward(&normed)?;
        let agg = nn::leaky_relu(&fuse_pre, self.leaky_slope);
        Ok((
            agg,
            MfaCache {
                level_pre,
                norm,
                normed,
                fuse_pre,
            },
        ))
    }

    /// Returns the gradient w.r.t. each input level.
    pub(crate) fn backward(
        &self,
        levels: &[Array3<f64>],
        cache: &MfaCache,
        d_agg: &Array3<f64>,
        grad: &mut Mfa,
    ) -> Vec<Array3<f64>> {
        let d_fuse_pre = nn::leaky_relu_backward(&cache.fuse_pre, d_agg, self.leaky_slope);
        let d_normed = self.fuse.backward(&cache.normed, &d_fuse_pre, &mut grad.fuse);
        let d_sum = self.norm.backward(&cache.norm, &d_normed, &mut grad.norm);
        self.level_convs
            .iter()
            .zip(levels)
            .zip(&cache.level_pre)
            .zip(grad.level_convs.iter_mut())
            .map(|(((conv, x), pre), g)| {
                let d_pre = nn::leaky_relu_backward(pre, &d_sum, self.leaky_slope);
                conv.backward(x, &d_pre, g)
            })
            .collect()
    }
}

fn sum_levels(levels: &[Array3<f64>]) -> Result<Array3<f64>> {
    let first = levels
        .first()
        .ok_or_else(|| Error::config("aggregate needs at least one level"))?;
    let mut sum = first.clone();
    for l in &levels[1..] {
        if l.dim() != first.dim() {
            return Err(Error::shape(format!("level shapes differ: {:?} vs {:?}", l.dim(), first.dim())));
        }
        sum += l;
    }
    Ok(sum)
}

impl Parameters for Mfa {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        for (i, c) in self.level_convs.iter().enumerate() {
            c.collect(&join(prefix, &format!("level.{i}")), out);
        }
        self.norm.collect(&join(prefix, "norm"), out);
        self.fuse.collect(&join(prefix, "fuse"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        for c in &mut self.level_convs {
            c.collect_mut(out);
        }
        self.norm.collect_mut(out);
        self.fuse.collect_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_simple_fn((c, h, w), || rng.random_range(-1.0..1.0))
    }

    fn mfa(levels: usize, seed: u64) -> Mfa {
        Mfa::new(6, levels, &MfaConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn level_transform_identity_and_slope() {
        let mut m = mfa(1, 0);
        m.level_convs[0] = Conv2d::identity(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = random_map(6, 3, 4, &mut rng).mapv(f64::abs);
        assert_eq!(m.level_transform(0, &pos).unwrap(), pos);
        let neg = -&pos - 0.1;
        let out = m.level_transform(0, &neg).unwrap();
        assert!(out.iter().zip(neg.iter()).all(|(o, n)| (o - 0.01 * n).abs() < 1e-15));
    }

    #[test]
    fn level_transform_matches_composition() {
        let m = mfa(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map(6, 5, 5, &mut rng);
        let conv_out = m.level_convs[1].forward(&x).unwrap();
        let by_hand = conv_out.mapv(|v| if v > 0.0 { v } else { 0.01 * v });
        assert_eq!(m.level_transform(1, &x).unwrap(), by_hand);
    }

    #[test]
    fn aggregate_single_and_cancelling_levels() {
        let m = mfa(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(6, 3, 3, &mut rng);
        assert_eq!(sum_levels(std::slice::from_ref(&a)).unwrap(), a);

        let sum = sum_levels(&[a.clone(), -&a]).unwrap();
        assert!(sum.iter().all(|&v| v == 0.0));
        let mut norm = ChannelLayerNorm::new(6, 1e-5);
        norm.beta = ndarray::Array1::from(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6]);
        let (out, _) = norm.forward(&sum);
        for c in 0..6 {
            assert!(out.index_axis(ndarray::Axis(0), c).iter().all(|&v| v == norm.beta[c]));
        }
        assert!(m.aggregate(&[]).unwrap_err().is_usage());
    }

    #[test]
    fn layer_norm_statistics() {
        let norm = ChannelLayerNorm::new(16, 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_map(16, 7, 7, &mut rng) * 3.0 + 1.0;
        let (_, cache) = norm.forward(&x);
        let n = &cache.normalized;
        for y in 0..7 {
            for xx in 0..7 {
                let col: Vec<f64> = (0..16).map(|c| n[[c, y, xx]]).collect();
                let mean = col.iter().sum::<f64>() / 16.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn swapping_levels_with_weights_is_invariant() {
        let m = mfa(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let levels: Vec<_> = (0..3).map(|_| random_map(6, 4, 4, &mut rng)).collect();
        let base = m.forward(&levels).unwrap();

        let mut swapped = m.clone();
        swapped.level_convs.swap(0, 2);
        let mut lv = levels.clone();
        lv.swap(0, 2);
        let other = swapped.forward(&lv).unwrap();
        let diff = (&base - &other).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(diff <= 1e-6);
        assert_eq!(base.dim(), (6, 4, 4));
    }
}
