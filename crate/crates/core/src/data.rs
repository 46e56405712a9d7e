//! Dataset splits and training patch sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{check_scale, degrade, ImagePlane};

pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub test: u32,
}

impl SplitRatio {
    pub fn new(train: u32, test: u32) -> Result<Self> {
        if train == 0 || test == 0 {
            return Err(Error::config(format!("split ratio {train}:{test} needs both parts ≥ 1")));
        }
        Ok(SplitRatio { train, test })
    }

    /// Number of test images out of `n`, rounded down.
    pub fn test_count(&self, n: usize) -> usize {
        n * self.test as usize / (self.train + self.test) as usize
    }
}

impl std::str::FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("split ratio must look like 3:1, got {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        SplitRatio::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)
    }
}

impl std::fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.train, self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    /// Directory relative to the root; empty for files directly in it.
    pub name: String,
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    pub split_seed: u64,
    pub split_ratio: SplitRatio,
    pub categories: Vec<CategoryCount>,
    pub skipped: Vec<SkippedFile>,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes only the header, which catches truncated or mislabelled files cheaply.
fn probe(path: &Path) -> std::result::Result<(), String> {
    let reader = image::ImageReader::open(path).map_err(|e| e.to_string())?;
    let reader = reader.with_guessed_format().map_err(|e| e.to_string())?;
    let (w, h) = reader.into_dimensions().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    Ok(())
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if has_image_extension(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Splits every category (subdirectory) independently: the category's files
/// are shuffled with a seed derived from `seed` and the category name, and the
/// first `floor(n·test/(train+test))` go to the test side.
pub fn build_split(root: &Path, ratio: SplitRatio, seed: u64) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::config(format!("data root {} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();

    let mut skipped = Vec::new();
    let mut by_category: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for path in files {
        if let Err(reason) = probe(&path) {
            log::warn!("skipping unreadable image {}: {reason}", path.display());
            skipped.push(SkippedFile { path, reason });
            continue;
        }
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let category = rel
            .parent()
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_default();
        by_category.entry(category).or_default().push(path);
    }
    if by_category.is_empty() {
        return Err(Error::config(format!("no readable images under {}", root.display())));
    }

    let mut train_paths = Vec::new();
    let mut test_paths = Vec::new();
    let mut categories = Vec::new();
    for (name, mut paths) in by_category {
        let mut rng = crate::rng::stream(&[seed, crate::rng::hash_str(&name)]);
        paths.shuffle(&mut rng);
        let n_test = ratio.test_count(paths.len());
        categories.push(CategoryCount {
            name,
            train: paths.len() - n_test,
            test: n_test,
        });
        test_paths.extend_from_slice(&paths[..n_test]);
        train_paths.extend_from_slice(&paths[n_test..]);
    }
    train_paths.sort();
    test_paths.sort();
    Ok(DatasetSplit {
        train_paths,
        test_paths,
        split_seed: seed,
        split_ratio: ratio,
        categories,
        skipped,
    })
}

pub fn manifest_text(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("{}\n", p.display())).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub root: PathBuf,
    pub seed: u64,
    pub ratio: SplitRatio,
    pub train_count: usize,
    pub test_count: usize,
    pub train_sha256: String,
    pub test_sha256: String,
    pub categories: Vec<CategoryCount>,
    pub skipped: Vec<SkippedFile>,
    pub version: String,
}

impl DatasetSplit {
    pub fn metadata(&self, root: &Path) -> SplitMetadata {
        SplitMetadata {
            root: root.to_path_buf(),
            seed: self.split_seed,
            ratio: self.split_ratio,
            train_count: self.train_paths.len(),
            test_count: self.test_paths.len(),
            train_sha256: sha256_hex(manifest_text(&self.train_paths).as_bytes()),
            test_sha256: sha256_hex(manifest_text(&self.test_paths).as_bytes()),
            categories: self.categories.clone(),
            skipped: self.skipped.clone(),
            version: crate::VERSION.into(),
        }
    }

    /// Writes `train.txt`, `test.txt` and `split.json` into `dir`.
    pub fn write_manifests(&self, root: &Path, dir: &Path) -> Result<SplitMetadata> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("train.txt", manifest_text(&self.train_paths))?;
        write("test.txt", manifest_text(&self.test_paths))?;
        let meta = self.metadata(root);
        write("split.json", serde_json::to_string_pretty(&meta)?)?;
        Ok(meta)
    }
}

/// One path per non-empty line. Relative entries resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() { p } else { base.join(p) }
        })
        .collect())
}

/// Degrades every image once and writes the LR copies as PNG under `out`,
/// mirroring file stems. Training normally degrades on the fly instead.
pub fn write_degraded(paths: &[PathBuf], scale: usize, out: &Path) -> Result<Vec<PathBuf>> {
    check_scale(scale)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let lr = degrade(&ImagePlane::load(p)?, scale)?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let dest = out.join(format!("{i:05}_{stem}_x{scale}.png"));
            lr.save(&dest)?;
            Ok(dest)
        })
        .collect()
}

/// Aligned HR/LR training patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub hr: ImagePlane,
    pub lr: ImagePlane,
    pub scale: usize,
}

/// Crops an `(s·patch)²` HR window, optionally flips/rotates it, then degrades
/// it. Images smaller than the window are reflect-padded first.
pub fn sample_patch(hr: &ImagePlane, scale: usize, patch: usize, rng: &mut impl Rng, augment: bool) -> Result<PatchPair> {
    check_scale(scale)?;
    if patch == 0 {
        return Err(Error::config("patch size must be ≥ 1"));
    }
    let side = scale * patch;
    let padded;
    let src = if hr.height() < side || hr.width() < side {
        log::warn!(
            "{}×{} image is smaller than the {side}×{side} crop; reflect-padding",
            hr.height(),
            hr.width()
        );
        padded = hr.reflect_pad_to(side, side);
        &padded
    } else {
        hr
    };
    let top = rng.random_range(0..=src.height() - side);
    let left = rng.random_range(0..=src.width() - side);
    let mut crop = src.crop(top, left, side, side)?;
    if augment {
        if rng.random_bool(0.5) {
            crop = crop.flip_horizontal();
        }
        if rng.random_bool(0.5) {
            crop = crop.flip_vertical();
        }
        if rng.random_bool(0.5) {
            crop = crop.rotate90();
        }
    }
    let lr = degrade(&crop, scale)?;
    Ok(PatchPair { hr: crop, lr, scale })
}

/// Random-access image source for training, optionally memoizing decodes.
pub struct PatchSource {
    paths: Vec<PathBuf>,
    cache: Option<Vec<OnceLock<ImagePlane>>>,
    scale: usize,
    patch: usize,
    augment: bool,
    seed: u64,
}

impl PatchSource {
    pub fn new(paths: Vec<PathBuf>, scale: usize, patch: usize, augment: bool, cache: bool, seed: u64) -> Result<Self> {
        check_scale(scale)?;
        if paths.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let cache = cache.then(|| (0..paths.len()).map(|_| OnceLock::new()).collect());
        Ok(PatchSource {
            paths,
            cache,
            scale,
            patch,
            augment,
            seed,
        })
    }

    /// Preloaded images; nothing touches the filesystem afterwards.
    pub fn from_images(images: Vec<ImagePlane>, scale: usize, patch: usize, augment: bool, seed: u64) -> Result<Self> {
        let mut src = PatchSource::new(
            (0..images.len()).map(|i| PathBuf::from(format!("<memory:{i}>"))).collect(),
            scale,
            patch,
            augment,
            true,
            seed,
        )?;
        for (slot, img) in src.cache.as_mut().unwrap().iter_mut().zip(images) {
            let _ = slot.set(img);
        }
        Ok(src)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn image(&self, i: usize) -> Result<ImagePlane> {
        match &self.cache {
            Some(cache) => {
                if let Some(img) = cache[i].get() {
                    return Ok(img.clone());
                }
                let img = ImagePlane::load(&self.paths[i])?;
                Ok(cache[i].get_or_init(|| img).clone())
            }
            None => ImagePlane::load(&self.paths[i]),
        }
    }

    /// Sample `index` of the batch for `iteration`. The random stream depends
    /// only on `(seed, iteration, index)`, so batches are reproducible
    /// regardless of worker scheduling and after a resume.
    pub fn sample(&self, iteration: u64, index: usize) -> Result<PatchPair> {
        let mut rng = crate::rng::stream(&[self.seed, iteration, index as u64]);
        let i = rng.random_range(0..self.paths.len());
        sample_patch(&self.image(i)?, self.scale, self.patch, &mut rng, self.augment)
    }

    pub fn batch(&self, iteration: u64, size: usize, parallel: bool) -> Result<Vec<PatchPair>> {
        if parallel {
            (0..size).into_par_iter().map(|k| self.sample(iteration, k)).collect()
        } else {
            (0..size).map(|k| self.sample(iteration, k)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_png(path: &Path, seed: u32) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_fn(4, 4, |x, y| image::Rgb([(x * 40 + seed) as u8, (y * 40) as u8, seed as u8]))
            .save(path)
            .unwrap();
    }

    fn folder(categories: usize, per: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for c in 0..categories {
            for i in 0..per {
                write_png(&dir.path().join(format!("cat{c:02}/img{i:03}.png")), i as u32);
            }
        }
        dir
    }

    #[test]
    fn ratio_parsing_and_rounding() {
        let r: SplitRatio = "3:1".parse().unwrap();
        assert_eq!(r, SplitRatio { train: 3, test: 1 });
        assert_eq!(r.test_count(100), 25);
        assert_eq!(r.test_count(7), 1);
        assert!("3-1".parse::<SplitRatio>().is_err());
        assert!("0:1".parse::<SplitRatio>().is_err());
    }

    #[test]
    fn single_category_exact_ratio() {
        let dir = folder(1, 4);
        let s = build_split(dir.path(), SplitRatio::new(3, 1).unwrap(), 0).unwrap();
        assert_eq!((s.train_paths.len(), s.test_paths.len()), (3, 1));
    }

    #[test]
    fn flat_folder_is_one_category() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10 {
            write_png(&dir.path().join(format!("{i}.png")), i);
        }
        let s = build_split(dir.path(), SplitRatio::new(4, 1).unwrap(), 9).unwrap();
        assert_eq!((s.train_paths.len(), s.test_paths.len()), (8, 2));
        assert_eq!(s.categories.len(), 1);
        assert_eq!(s.categories[0].name, "");
    }

    #[test]
    fn split_is_deterministic_disjoint_and_sorted() {
        let dir = folder(3, 10);
        let r = SplitRatio::new(4, 1).unwrap();
        let a = build_split(dir.path(), r, 17).unwrap();
        let b = build_split(dir.path(), r, 17).unwrap();
        assert_eq!(
            sha256_hex(manifest_text(&a.train_paths).as_bytes()),
            sha256_hex(manifest_text(&b.train_paths).as_bytes())
        );
        assert_eq!(a, b);
        assert!(a.train_paths.windows(2).all(|w| w[0] < w[1]));
        assert!(a.test_paths.iter().all(|p| !a.train_paths.contains(p)));
        for c in &a.categories {
            assert_eq!((c.train, c.test), (8, 2));
        }
        let other = build_split(dir.path(), r, 18).unwrap();
        assert_ne!(a.test_paths, other.test_paths);
    }

    #[test]
    fn empty_root_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_split(dir.path(), SplitRatio::new(3, 1).unwrap(), 0), Err(Error::Config(_))));
        let missing = dir.path().join("nope");
        assert!(matches!(build_split(&missing, SplitRatio::new(3, 1).unwrap(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn unreadable_files_are_skipped_and_recorded() {
        let dir = folder(1, 4);
        let bad = dir.path().join("cat00/broken.png");
        std::fs::write(&bad, b"not a png").unwrap();
        std::fs::write(dir.path().join("cat00/notes.txt"), b"ignored").unwrap();
        let s = build_split(dir.path(), SplitRatio::new(3, 1).unwrap(), 0).unwrap();
        assert_eq!(s.train_paths.len() + s.test_paths.len(), 4);
        assert_eq!(s.skipped.len(), 1);
        assert_eq!(s.skipped[0].path, bad);
    }

    #[test]
    fn manifests_round_trip() {
        let dir = folder(2, 4);
        let out = tempfile::tempdir().unwrap();
        let s = build_split(dir.path(), SplitRatio::new(3, 1).unwrap(), 1).unwrap();
        let meta = s.write_manifests(dir.path(), out.path()).unwrap();
        assert_eq!((meta.train_count, meta.test_count), (6, 2));
        assert_eq!(read_manifest(&out.path().join("train.txt")).unwrap(), s.train_paths);
        assert_eq!(read_manifest(&out.path().join("test.txt")).unwrap(), s.test_paths);
        let json: SplitMetadata =
            serde_json::from_str(&std::fs::read_to_string(out.path().join("split.json")).unwrap()).unwrap();
        assert_eq!(json, meta);
    }

    fn gradient(h: usize, w: usize) -> ImagePlane {
        ImagePlane::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 13 + x * 7 + c * 31) % 97) as f64 / 96.0
        }))
        .unwrap()
    }

    #[test]
    fn patch_shapes_and_alignment() {
        let hr = gradient(300, 280);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = sample_patch(&hr, 4, 64, &mut rng, true).unwrap();
        assert_eq!((pair.hr.height(), pair.hr.width()), (256, 256));
        assert_eq!((pair.lr.height(), pair.lr.width()), (64, 64));
        assert_eq!(pair.lr, degrade(&pair.hr, 4).unwrap());
    }

    #[test]
    fn patch_without_augmentation_is_reproducible() {
        let hr = gradient(40, 40);
        let a = sample_patch(&hr, 2, 8, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap();
        let b = sample_patch(&hr, 2, 8, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_image_is_reflect_padded() {
        let hr = gradient(10, 30);
        let pair = sample_patch(&hr, 2, 8, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        assert_eq!((pair.hr.height(), pair.hr.width()), (16, 16));
    }

    #[test]
    fn batches_depend_only_on_seed_and_iteration() {
        let imgs = vec![gradient(20, 20), gradient(24, 18)];
        let src = PatchSource::from_images(imgs, 2, 4, true, 42).unwrap();
        let a = src.batch(7, 4, false).unwrap();
        let b = src.batch(7, 4, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, src.batch(8, 4, false).unwrap());
    }

    #[test]
    fn cached_source_loads_from_disk_once() {
        let dir = folder(1, 2);
        let paths = build_split(dir.path(), SplitRatio::new(1, 1).unwrap(), 0).unwrap().train_paths;
        let src = PatchSource::new(paths, 2, 2, false, true, 0).unwrap();
        let first = src.sample(0, 0).unwrap();
        assert_eq!(first, src.sample(0, 0).unwrap());
    }
}
