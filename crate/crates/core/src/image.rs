//! RGB images in `[0,1]` and the bilinear degradation used to synthesize LR inputs.

use std::path::Path;

use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

/// An `H×W×3` RGB image with every value in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    pixels: Array3<f64>,
}

impl ImagePlane {
    /// Wraps an `H×W×3` array, clamping values into `[0,1]`.
    pub fn new(mut pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::shape(format!("image must be H×W×3 with H,W ≥ 1, got {h}×{w}×{c}")));
        }
        if pixels.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("in image pixels".into()));
        }
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(ImagePlane { pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        ImagePlane::new(Array3::from_elem((height, width, 3), value))
    }

    /// Builds from a `3×H×W` map, clamping into `[0,1]`.
    pub fn from_chw(chw: &Array3<f64>) -> Result<Self> {
        ImagePlane::new(chw.view().permuted_axes([1, 2, 0]).as_standard_layout().into_owned())
    }

    pub fn to_chw(&self) -> Array3<f64> {
        self.pixels.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        ImagePlane { pixels }
    }

    /// Rounds to the nearest 8-bit level.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(ImagePlane::from_rgb8(&img.to_rgb8()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}×{width} at ({top},{left}) outside {}×{}",
                self.height(),
                self.width()
            )));
        }
        Ok(ImagePlane {
            pixels: self
                .pixels
                .slice(s![top..top + height, left..left + width, ..])
                .to_owned(),
        })
    }

    /// Crops to the largest region whose sides are multiples of `scale`.
    pub fn crop_to_multiple(&self, scale: usize) -> Result<Self> {
        let h = self.height() / scale * scale;
        let w = self.width() / scale * scale;
        if h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "{}×{} image is smaller than scale {scale}",
                self.height(),
                self.width()
            )));
        }
        self.crop(0, 0, h, w)
    }

    pub fn flip_horizontal(&self) -> Self {
        ImagePlane {
            pixels: self.pixels.slice(s![.., ..;-1, ..]).to_owned(),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        ImagePlane {
            pixels: self.pixels.slice(s![..;-1, .., ..]).to_owned(),
        }
    }

    /// Transpose of the spatial axes.
    pub fn transpose(&self) -> Self {
        ImagePlane {
            pixels: self
                .pixels
                .view()
                .permuted_axes([1, 0, 2])
                .as_standard_layout()
                .into_owned(),
        }
    }

    /// Quarter turn clockwise.
    pub fn rotate90(&self) -> Self {
        self.transpose().flip_horizontal()
    }

    /// Pads each side by reflection (mirror without repeating the edge pixel)
    /// until the image is at least `min_h × min_w`.
    pub fn reflect_pad_to(&self, min_h: usize, min_w: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        if h >= min_h && w >= min_w {
            return self.clone();
        }
        let (th, tw) = (h.max(min_h), w.max(min_w));
        let (top, left) = ((th - h) / 2, (tw - w) / 2);
        let reflect = |i: isize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n as isize - 1);
            let m = i.rem_euclid(period);
            (if m < n as isize { m } else { period - m }) as usize
        };
        let pixels = Array3::from_shape_fn((th, tw, 3), |(y, x, c)| {
            let sy = reflect(y as isize - top as isize, h);
            let sx = reflect(x as isize - left as isize, w);
            self.pixels[[sy, sx, c]]
        });
        ImagePlane { pixels }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }
}

/// Bilinear resize with half-pixel centres (align-corners off) and no
/// antialiasing. Source coordinates are clamped at the borders.
pub fn resize_bilinear(img: &ImagePlane, out_h: usize, out_w: usize) -> Result<ImagePlane> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    let (h, w) = (img.height(), img.width());
    let taps = |out: usize, len_in: usize, len_out: usize| -> (usize, usize, f64) {
        let scale = len_in as f64 / len_out as f64;
        let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(len_in - 1);
        let hi = (lo + 1).min(len_in - 1);
        (lo, hi, src - lo as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|y| taps(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
    let px = img.pixels();
    let pixels = Array3::from_shape_fn((out_h, out_w, 3), |(y, x, c)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = px[[y0, x0, c]] * (1.0 - fx) + px[[y0, x1, c]] * fx;
        let bottom = px[[y1, x0, c]] * (1.0 - fx) + px[[y1, x1, c]] * fx;
        top * (1.0 - fy) + bottom * fy
    });
    ImagePlane::new(pixels)
}

pub fn check_scale(scale: usize) -> Result<()> {
    if scale == 2 || scale == 4 {
        Ok(())
    } else {
        Err(Error::config(format!("scale must be 2 or 4, got {scale}")))
    }
}

/// Synthesizes the LR counterpart of `hr` by bilinear downsampling.
///
/// `hr` is first cropped to the largest region divisible by `scale`.
pub fn degrade(hr: &ImagePlane, scale: usize) -> Result<ImagePlane> {
    check_scale(scale)?;
    let hr = hr.crop_to_multiple(scale)?;
    resize_bilinear(&hr, hr.height() / scale, hr.width() / scale)
}
