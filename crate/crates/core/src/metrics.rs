//! PSNR / SSIM and dataset-level evaluation.
//!
//! Both metrics work on `[0,1]` values with a peak of 1. SSIM uses an 11×11
//! Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`, evaluated at every
//! window position fully inside the image and averaged per channel.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::backbone::FeatureBlock;
use crate::config::MetricChannel;
use crate::error::{Error, Result};
use crate::image::{degrade, ImagePlane};
use crate::model::SrModel;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.pixels().dim() != b.pixels().dim() {
        return Err(Error::shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.pixels().dim(),
            b.pixels().dim()
        )));
    }
    Ok(())
}

fn crop_border(img: &ImagePlane, border: usize) -> Result<ImagePlane> {
    if border == 0 {
        return Ok(img.clone());
    }
    if 2 * border >= img.height() || 2 * border >= img.width() {
        return Err(Error::shape(format!(
            "border {border} leaves nothing of a {}×{} image",
            img.height(),
            img.width()
        )));
    }
    img.crop(border, border, img.height() - 2 * border, img.width() - 2 * border)
}

/// Per-channel planes to compare: RGB, or the single BT.601 luma plane.
fn planes(img: &ImagePlane, channel: MetricChannel) -> Vec<Array2<f64>> {
    let px = img.pixels();
    match channel {
        MetricChannel::Rgb => (0..3).map(|c| px.slice(s![.., .., c]).to_owned()).collect(),
        MetricChannel::Y => {
            let y = Array2::from_shape_fn((img.height(), img.width()), |(i, j)| {
                (16.0 + 65.481 * px[[i, j, 0]] + 128.553 * px[[i, j, 1]] + 24.966 * px[[i, j, 2]]) / 255.0
            });
            vec![y]
        }
    }
}

/// `10·log10(1/MSE)` over all channels jointly after cropping `border`
/// pixels from every side. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, border: usize) -> Result<f64> {
    psnr_with(a, b, border, MetricChannel::Rgb)
}

pub fn psnr_with(a: &ImagePlane, b: &ImagePlane, border: usize, channel: MetricChannel) -> Result<f64> {
    check_same_shape(a, b)?;
    let (a, b) = (crop_border(a, border)?, crop_border(b, border)?);
    let (pa, pb) = (planes(&a, channel), planes(&b, channel));
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        sum += (x - y).mapv(|d| d * d).sum();
        n += x.len();
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable "valid" filtering: output is `(H-k+1) × (W-k+1)`.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let rows = Array2::from_shape_fn((h, ow), |(i, j)| (0..k).map(|t| taps[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum::<f64>())
}

fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mu_a = filter_valid(a, taps);
    let mu_b = filter_valid(b, taps);
    let e_aa = filter_valid(&(a * a), taps);
    let e_bb = filter_valid(&(b * b), taps);
    let e_ab = filter_valid(&(a * b), taps);
    let mut total = 0.0;
    for ((((&ma, &mb), &aa), &bb), &ab) in mu_a.iter().zip(&mu_b).zip(&e_aa).zip(&e_bb).zip(&e_ab) {
        let var_a = aa - ma * ma;
        let var_b = bb - mb * mb;
        let cov = ab - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over RGB channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    ssim_with(a, b, 0, MetricChannel::Rgb)
}

pub fn ssim_with(a: &ImagePlane, b: &ImagePlane, border: usize, channel: MetricChannel) -> Result<f64> {
    check_same_shape(a, b)?;
    let (a, b) = (crop_border(a, border)?, crop_border(b, border)?);
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {}×{}",
            a.height(),
            a.width()
        )));
    }
    let taps = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (pa, pb) = (planes(&a, channel), planes(&b, channel));
    let n = pa.len() as f64;
    Ok(pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, &taps)).sum::<f64>() / n)
}

/// Anything that maps an LR image to an SR image at a fixed scale.
pub trait Upscaler: Sync {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &ImagePlane) -> Result<ImagePlane>;
}

impl<B: FeatureBlock> Upscaler for SrModel<B> {
    fn scale(&self) -> usize {
        SrModel::scale(self)
    }

    fn upscale(&self, lr: &ImagePlane) -> Result<ImagePlane> {
        self.super_resolve(lr)
    }
}

/// Writes non-finite PSNR values as the string `"inf"`.
fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn deserialize_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("bad dB value {s}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<SkippedImage>,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub scale: usize,
    pub border: usize,
    pub channel: MetricChannel,
    pub value_range: String,
    pub checkpoint_sha256: Option<String>,
    pub version: String,
}

impl MetricReport {
    pub fn from_records(
        records: Vec<ImageRecord>,
        skipped: Vec<SkippedImage>,
        scale: usize,
        border: usize,
        channel: MetricChannel,
    ) -> Self {
        let n = records.len().max(1) as f64;
        let (mean_psnr_db, mean_ssim) = if records.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                records.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                records.iter().map(|r| r.ssim).sum::<f64>() / n,
            )
        };
        MetricReport {
            records,
            skipped,
            mean_psnr_db,
            mean_ssim,
            scale,
            border,
            channel,
            value_range: "[0,1]".into(),
            checkpoint_sha256: None,
            version: crate::VERSION.into(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "scale x{}  border {}  channel {:?}  images {}  skipped {}\n",
            self.scale,
            self.border,
            self.channel,
            self.records.len(),
            self.skipped.len()
        );
        out.push_str(&format!("{:<48} {:>12} {:>8}\n", "image", "PSNR (dB)", "SSIM"));
        for r in &self.records {
            out.push_str(&format!(
                "{:<48} {:>12.4} {:>8.4}\n",
                r.path.display(),
                r.psnr_db,
                r.ssim
            ));
        }
        out.push_str(&format!("{:<48} {:>12.4} {:>8.4}\n", "mean", self.mean_psnr_db, self.mean_ssim));
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Scores one HR image: degrade, upscale, clamp, compare.
pub fn evaluate_image<U: Upscaler + ?Sized>(
    model: &U,
    hr: &ImagePlane,
    border: usize,
    channel: MetricChannel,
) -> Result<(f64, f64)> {
    let scale = model.scale();
    let hr = hr.crop_to_multiple(scale)?;
    let lr = degrade(&hr, scale)?;
    let sr = model.upscale(&lr)?;
    check_same_shape(&sr, &hr)?;
    Ok((psnr_with(&sr, &hr, border, channel)?, ssim_with(&sr, &hr, border, channel)?))
}

/// Whole-image evaluation of `model` over HR images. Images that fail to
/// load are skipped and listed in the report.
pub fn evaluate<U: Upscaler + ?Sized>(
    model: &U,
    paths: &[PathBuf],
    scale: usize,
    border: usize,
    channel: MetricChannel,
) -> Result<MetricReport> {
    crate::image::check_scale(scale)?;
    if model.scale() != scale {
        return Err(Error::config(format!(
            "model upsamples x{}, evaluation requested x{scale}",
            model.scale()
        )));
    }
    let results: Vec<std::result::Result<ImageRecord, SkippedImage>> = paths
        .par_iter()
        .map(|path| {
            let hr = ImagePlane::load(path).map_err(|e| SkippedImage {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let (psnr_db, ssim) = evaluate_image(model, &hr, border, channel).map_err(|e| SkippedImage {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Ok(ImageRecord {
                path: path.clone(),
                psnr_db,
                ssim,
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(s) => {
                log::warn!("skipping {}: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
        }
    }
    Ok(MetricReport::from_records(records, skipped, scale, border, channel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
        ImagePlane::new(Array3::from_shape_simple_fn((h, w, 3), || rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn psnr_extremes() {
        let zeros = ImagePlane::filled(4, 4, 0.0).unwrap();
        let ones = ImagePlane::filled(4, 4, 1.0).unwrap();
        assert_eq!(psnr(&zeros, &ones, 0).unwrap(), 0.0);
        assert_eq!(psnr(&ones, &ones, 0).unwrap(), f64::INFINITY);
        assert!(psnr(&zeros, &ImagePlane::filled(4, 5, 0.0).unwrap(), 0).is_err());
    }

    #[test]
    fn psnr_border_excludes_edges() {
        let a = ImagePlane::filled(6, 6, 0.5).unwrap();
        let mut px = a.clone().into_pixels();
        px[[0, 0, 0]] = 0.0;
        let b = ImagePlane::new(px).unwrap();
        assert!(psnr(&a, &b, 0).unwrap().is_finite());
        assert_eq!(psnr(&a, &b, 1).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 3).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(16, 13, &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // Constant images have zero variance and covariance, so SSIM reduces to
        // the luminance term (2·μa·μb + C1) / (μa² + μb² + C1).
        let a = ImagePlane::filled(12, 12, 0.4).unwrap();
        let b = ImagePlane::filled(12, 12, 0.6).unwrap();
        let c1 = 0.01_f64 * 0.01;
        let expected = (2.0 * 0.4 * 0.6 + c1) / (0.16 + 0.36 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_too_small_is_error() {
        let a = ImagePlane::filled(10, 20, 0.4).unwrap();
        assert!(ssim(&a, &a).unwrap_err().is_usage());
    }

    #[test]
    fn gaussian_taps_normalized_and_symmetric() {
        let t = gaussian_kernel(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn luma_mode_differs_from_rgb() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(12, 12, &mut rng);
        let b = random_image(12, 12, &mut rng);
        let rgb = psnr_with(&a, &b, 0, MetricChannel::Rgb).unwrap();
        let y = psnr_with(&a, &b, 0, MetricChannel::Y).unwrap();
        assert!(rgb != y);
    }

    #[test]
    fn report_means_and_inf_serialization() {
        let recs = vec![
            ImageRecord { path: "a".into(), psnr_db: 30.0, ssim: 0.8 },
            ImageRecord { path: "b".into(), psnr_db: 20.0, ssim: 0.6 },
        ];
        let r = MetricReport::from_records(recs, vec![], 4, 4, MetricChannel::Rgb);
        assert!((r.mean_psnr_db - 25.0).abs() < 1e-9);
        assert!((r.mean_ssim - 0.7).abs() < 1e-9);

        let inf = MetricReport::from_records(
            vec![ImageRecord { path: "c".into(), psnr_db: f64::INFINITY, ssim: 1.0 }],
            vec![],
            2,
            2,
            MetricChannel::Rgb,
        );
        let text = serde_json::to_string(&inf).unwrap();
        assert!(text.contains("\"inf\""));
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.records[0].psnr_db, f64::INFINITY);
    }
}
