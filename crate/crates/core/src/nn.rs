//! Dense building blocks with explicit backward passes.
//!
//! Feature maps are `C×H×W` arrays in standard layout. Convolutions are
//! stride 1 with `(k-1)/2` zero padding so spatial size is preserved, and are
//! evaluated as `weight · im2col(x)`.

use ndarray::{s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, NamedTensor, Parameters};

/// Unfolds `x` into a `(C·k·k) × (H·W)` patch matrix with zero padding.
pub fn im2col(x: &Array3<f64>, kernel: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    if kernel == 1 {
        return x.to_shape((c, h * w)).unwrap().into_owned();
    }
    let pad = (kernel / 2) as isize;
    let mut cols = Array2::<f64>::zeros((c * kernel * kernel, h * w));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let out = cols.as_slice_mut().unwrap();
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let dst = &mut out[row * h * w..(row + 1) * h * w];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let src_lo = (x_lo as isize + dx) as usize;
                    let src_hi = (x_hi as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[sy * w + src_lo..sy * w + src_hi]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the map.
pub fn col2im(cols: &Array2<f64>, channels: usize, h: usize, w: usize, kernel: usize) -> Array3<f64> {
    if kernel == 1 {
        return cols.to_shape((channels, h, w)).unwrap().into_owned();
    }
    let pad = (kernel / 2) as isize;
    let mut x = Array3::<f64>::zeros((channels, h, w));
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().unwrap();
    let xs = x.as_slice_mut().unwrap();
    for ch in 0..channels {
        let plane = &mut xs[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let src = &cs[row * h * w..(row + 1) * h * w];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in x_lo..x_hi {
                        let sx = (xx as isize + dx) as usize;
                        plane[sy * w + sx] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// Gathers the patch-matrix columns of the given pixel indices.
pub fn gather_columns(cols: &Array2<f64>, pixels: &[usize]) -> Array2<f64> {
    cols.select(Axis(1), pixels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `out × (in·k·k)`, row-major over (in, ky, kx).
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Uniform init in `±1/sqrt(fan_in)` for weights and bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || {
            rng.random_range(-bound..bound)
        });
        let bias = bias.then(|| Array1::from_shape_simple_fn(out_channels, || rng.random_range(-bound..bound)));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> Self {
        Conv2d {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: bias.then(|| Array1::zeros(out_channels)),
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Identity map (requires `in == out`); centre tap set to one.
    pub fn identity(channels: usize, kernel: usize) -> Self {
        let mut conv = Conv2d::zeros(channels, channels, kernel, false);
        let centre = (kernel / 2) * kernel + kernel / 2;
        for c in 0..channels {
            conv.weight[[c, c * kernel * kernel + centre]] = 1.0;
        }
        conv
    }

    fn check_input(&self, channels: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        Ok(())
    }

    /// `weight · cols + bias` over an already unfolded input.
    pub fn forward_cols(&self, cols: &Array2<f64>) -> Array2<f64> {
        let mut y = self.weight.dot(cols);
        if let Some(b) = &self.bias {
            y += &b.view().insert_axis(Axis(1));
        }
        y
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = x.dim();
        self.check_input(c)?;
        let y = self.forward_cols(&im2col(x, self.kernel));
        Ok(y.into_shape_with_order((self.out_channels, h, w)).unwrap())
    }

    /// Accumulates `dW`, `db` into `grad` given the unfolded input and output gradient.
    /// Returns the gradient w.r.t. `cols`.
    pub fn backward_cols(&self, cols: &Array2<f64>, dy: &Array2<f64>, grad: &mut Conv2d) -> Array2<f64> {
        grad.weight += &dy.dot(&cols.t());
        if let Some(gb) = &mut grad.bias {
            *gb += &dy.sum_axis(Axis(1));
        }
        self.weight.t().dot(dy)
    }

    /// Parameter gradients only; skips the input gradient.
    pub fn backward_params(&self, x: &Array3<f64>, dy: &Array3<f64>, grad: &mut Conv2d) {
        let (_, h, w) = x.dim();
        let cols = im2col(x, self.kernel);
        let dy = dy.to_shape((self.out_channels, h * w)).unwrap();
        grad.weight += &dy.dot(&cols.t());
        if let Some(gb) = &mut grad.bias {
            *gb += &dy.sum_axis(Axis(1));
        }
    }

    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>, grad: &mut Conv2d) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let cols = im2col(x, self.kernel);
        let dy = dy.to_shape((self.out_channels, h * w)).unwrap().into_owned();
        let dcols = self.backward_cols(&cols, &dy, grad);
        col2im(&dcols, c, h, w, self.kernel)
    }
}

impl Parameters for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: join(prefix, "weight"),
            value: self.weight.view().into_dyn(),
        });
        if let Some(b) = &self.bias {
            out.push(NamedTensor {
                name: join(prefix, "bias"),
                value: b.view().into_dyn(),
            });
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        out.push(self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            out.push(b.view_mut().into_dyn());
        }
    }
}

pub fn leaky_relu(x: &Array3<f64>, slope: f64) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient through leaky rectification, given the pre-activation input.
pub fn leaky_relu_backward(pre: &Array3<f64>, dy: &Array3<f64>, slope: f64) -> Array3<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

/// Normalization across channels at every spatial location, with a learned
/// per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelLayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    /// Normalized input before scale/shift.
    pub normalized: Array3<f64>,
    /// `1/sqrt(var + eps)` per pixel.
    pub inv_std: Vec<f64>,
}

impl ChannelLayerNorm {
    pub fn new(channels: usize, eps: f64) -> Self {
        ChannelLayerNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, LayerNormCache) {
        let (c, h, w) = x.dim();
        let hw = h * w;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut normalized = Array3::<f64>::zeros((c, h, w));
        let mut out = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = vec![0.0; hw];
        {
            let ns = normalized.as_slice_mut().unwrap();
            let os = out.as_slice_mut().unwrap();
            for p in 0..hw {
                let mean = (0..c).map(|ch| xs[ch * hw + p]).sum::<f64>() / c as f64;
                let var = (0..c)
                    .map(|ch| {
                        let d = xs[ch * hw + p] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[p] = is;
                for ch in 0..c {
                    let n = (xs[ch * hw + p] - mean) * is;
                    ns[ch * hw + p] = n;
                    os[ch * hw + p] = self.gamma[ch] * n + self.beta[ch];
                }
            }
        }
        (out, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array3<f64>, grad: &mut ChannelLayerNorm) -> Array3<f64> {
        let (c, h, w) = dy.dim();
        let hw = h * w;
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().unwrap();
        let ns = cache.normalized.as_slice().unwrap();
        let mut dx = Array3::<f64>::zeros((c, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        let mut dn = vec![0.0; c];
        for p in 0..hw {
            let mut mean_dn = 0.0;
            let mut mean_dn_n = 0.0;
            for ch in 0..c {
                let i = ch * hw + p;
                grad.gamma[ch] += dys[i] * ns[i];
                grad.beta[ch] += dys[i];
                dn[ch] = dys[i] * self.gamma[ch];
                mean_dn += dn[ch];
                mean_dn_n += dn[ch] * ns[i];
            }
            mean_dn /= c as f64;
            mean_dn_n /= c as f64;
            for ch in 0..c {
                let i = ch * hw + p;
                dxs[i] = cache.inv_std[p] * (dn[ch] - mean_dn - ns[i] * mean_dn_n);
            }
        }
        dx
    }
}

impl Parameters for ChannelLayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: join(prefix, "gamma"),
            value: self.gamma.view().into_dyn(),
        });
        out.push(NamedTensor {
            name: join(prefix, "beta"),
            value: self.beta.view().into_dyn(),
        });
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        out.push(self.gamma.view_mut().into_dyn());
        out.push(self.beta.view_mut().into_dyn());
    }
}

/// `(C·s², H, W) → (C, s·H, s·W)`; channel `c·s² + i·s + j` lands at offset `(i, j)`
/// inside the `s×s` block of its pixel.
pub fn pixel_shuffle(x: &Array3<f64>, scale: usize) -> Result<Array3<f64>> {
    let (cs, h, w) = x.dim();
    let s2 = scale * scale;
    if cs % s2 != 0 {
        return Err(Error::shape(format!(
            "pixel shuffle by {scale} needs channels divisible by {s2}, got {cs}"
        )));
    }
    let c = cs / s2;
    let mut out = Array3::<f64>::zeros((c, h * scale, w * scale));
    for ch in 0..c {
        for i in 0..scale {
            for j in 0..scale {
                let src = x.slice(s![ch * s2 + i * scale + j, .., ..]);
                let mut dst = out.slice_mut(s![ch, i..;scale, j..;scale]);
                dst.assign(&src);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Array3<f64>, scale: usize) -> Result<Array3<f64>> {
    let (c, sh, sw) = x.dim();
    if sh % scale != 0 || sw % scale != 0 {
        return Err(Error::shape(format!(
            "pixel unshuffle by {scale} needs spatial dims divisible by it, got {sh}×{sw}"
        )));
    }
    let (h, w) = (sh / scale, sw / scale);
    let s2 = scale * scale;
    let mut out = Array3::<f64>::zeros((c * s2, h, w));
    for ch in 0..c {
        for i in 0..scale {
            for j in 0..scale {
                let src = x.slice(s![ch, i..;scale, j..;scale]);
                out.slice_mut(s![ch * s2 + i * scale + j, .., ..]).assign(&src);
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `dz = p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs.iter().zip(dprobs).map(|(p, d)| p * (d - dot)).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values in descending order; ties go to the lowest index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub(crate) fn ensure_finite(x: &ArrayViewD<'_, f64>, what: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((c, h, w), || rng.random_range(-1.0..1.0))
    }

    /// Direct-summation convolution used as an oracle.
    fn conv_direct(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let k = conv.kernel;
        let p = (k / 2) as isize;
        let mut y = Array3::<f64>::zeros((conv.out_channels, h, w));
        for o in 0..conv.out_channels {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[o]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = yy as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[[o, (ci * k + ky) * k + kx]]
                                    * x[[ci, sy as usize, sx as usize]];
                            }
                        }
                    }
                    y[[o, yy, xx]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3, 5] {
            let conv = Conv2d::new(3, 4, k, true, &mut rng);
            let x = random_map(3, 6, 5, k as u64);
            let fast = conv.forward(&x).unwrap();
            let slow = conv_direct(&conv, &x);
            let diff = (&fast - &slow).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "k={k} diff={diff}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = random_map(2, 5, 4, 11);
        for k in [1, 3, 5] {
            let cols = im2col(&x, k);
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let c = Array2::from_shape_simple_fn(cols.dim(), || rng.random_range(-1.0..1.0));
            let lhs = (&cols * &c).sum();
            let rhs = (&x * &col2im(&c, 2, 5, 4, k)).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let conv = Conv2d::zeros(4, 4, 3, false);
        assert!(conv.forward(&Array3::zeros((3, 2, 2))).is_err());
    }

    #[test]
    fn identity_conv_is_identity() {
        let x = random_map(4, 3, 3, 1);
        let y = Conv2d::identity(4, 3).forward(&x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn pixel_shuffle_places_blocks() {
        let s = 2;
        let mut x = Array3::<f64>::zeros((3 * s * s, 2, 2));
        // channel 1 of output, sub-position (1, 0), LR pixel (1, 1)
        x[[s * s + s, 1, 1]] = 7.0;
        let y = pixel_shuffle(&x, s).unwrap();
        assert_eq!(y.dim(), (3, 4, 4));
        assert_eq!(y[[1, 3, 2]], 7.0);
        assert_eq!(y.sum(), 7.0);
    }

    #[test]
    fn shuffle_rejects_bad_channels() {
        assert!(pixel_shuffle(&Array3::zeros((5, 2, 2)), 2).is_err());
    }

    #[test]
    fn softmax_and_tie_breaks() {
        let p = softmax(&[3.0_f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
        assert_eq!(top_k(&[0.2, 0.5, 0.5, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.0, 0.0, 0.0], 1), vec![0]);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let ln = {
            let mut ln = ChannelLayerNorm::new(4, 1e-5);
            ln.gamma = Array1::from(vec![1.0, 0.5, -2.0, 1.5]);
            ln.beta = Array1::from(vec![0.1, 0.0, 0.3, -0.2]);
            ln
        };
        let x = random_map(4, 2, 3, 5);
        let r = random_map(4, 2, 3, 6);
        let loss = |x: &Array3<f64>| (&ln.forward(x).0 * &r).sum();
        let (_, cache) = ln.forward(&x);
        let mut g = ChannelLayerNorm::new(4, 1e-5);
        g.gamma.fill(0.0);
        g.beta.fill(0.0);
        let dx = ln.backward(&cache, &r, &mut g);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 1e-7, "{num} vs {ana}");
        }
    }
}
