//! Dataset model, on-disk layout, deterministic splits and preprocessing.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/manifest.json
//! <root>/rgb/<id>.png       8-bit RGB
//! <root>/thermal/<id>.png   8-bit gray
//! <root>/mask/<id>.png      8-bit gray, 0 = background, 255 = gas
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtcan_tensor::ops::resize::taps;
use rtcan_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{image_err, io_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scene {
    Sunny,
    Rainy,
    Double,
    Near,
    Far,
    Overlook,
    SimpleBg,
    ComplexBg,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One aligned RGB / thermal / mask record. Mask pixels are 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub scene: Scene,
    pub rgb: RgbImage,
    pub thermal: GrayImage,
    pub mask: GrayImage,
}

impl ImagePair {
    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.rgb.height() as usize, self.rgb.width() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub scene: Scene,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile<E> {
    version: u32,
    seed: u64,
    entries: Vec<E>,
}

pub fn rgb_path(root: &Path, id: &str) -> PathBuf {
    root.join("rgb").join(format!("{id}.png"))
}

pub fn thermal_path(root: &Path, id: &str) -> PathBuf {
    root.join("thermal").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("mask").join(format!("{id}.png"))
}

impl Manifest {
    /// Canonical JSON: entries sorted by id, two-space indentation,
    /// trailing newline.
    pub fn to_json(&self) -> String {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let file = ManifestFile {
            version: MANIFEST_VERSION,
            seed: self.seed,
            entries,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    /// Write `manifest.json` under `root`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.path();
        fs::write(&path, self.to_json()).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn content_hash(&self) -> String {
        crate::util::sha256_hex(self.to_json().as_bytes())
    }
}

/// Read `manifest.json` (or the manifest inside a dataset directory) and
/// verify that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    let raw: ManifestFile<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::ManifestParse(format!("{}: {e}", file.display())))?;
    if raw.version != MANIFEST_VERSION {
        return Err(Error::ManifestParse(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            raw.version
        )));
    }
    let mut entries = Vec::with_capacity(raw.entries.len());
    let mut seen = HashSet::new();
    for (index, value) in raw.entries.into_iter().enumerate() {
        let entry: ManifestEntry =
            serde_json::from_value(value).map_err(|e| Error::ManifestRecord { index, msg: e.to_string() })?;
        if entry.id.is_empty() || entry.id.contains(['/', '\\']) {
            return Err(Error::ManifestRecord {
                index,
                msg: format!("invalid id `{}`", entry.id),
            });
        }
        if !seen.insert(entry.id.clone()) {
            return Err(Error::ManifestRecord {
                index,
                msg: format!("duplicate id `{}`", entry.id),
            });
        }
        for p in [rgb_path(&root, &entry.id), thermal_path(&root, &entry.id), mask_path(&root, &entry.id)] {
            if !p.is_file() {
                return Err(Error::MissingFile { id: entry.id, path: p });
            }
        }
        entries.push(entry);
    }
    Ok(Manifest {
        root,
        seed: raw.seed,
        entries,
    })
}

/// Decode one record. Masks stored as {0, 255} come back as {0, 1}.
pub fn load_pair(manifest: &Manifest, id: &str) -> Result<ImagePair> {
    let entry = manifest.entry(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
    let open = |p: PathBuf| image::open(&p).map_err(image_err(&p));
    let rgb = open(rgb_path(&manifest.root, id))?.to_rgb8();
    let thermal = open(thermal_path(&manifest.root, id))?.to_luma8();
    let mut mask = open(mask_path(&manifest.root, id))?.to_luma8();
    if rgb.dimensions() != thermal.dimensions() || rgb.dimensions() != mask.dimensions() {
        return Err(Error::Alignment {
            id: id.to_string(),
            detail: format!(
                "rgb {:?}, thermal {:?}, mask {:?}",
                rgb.dimensions(),
                thermal.dimensions(),
                mask.dimensions()
            ),
        });
    }
    for p in mask.pixels_mut() {
        p.0[0] = match p.0[0] {
            0 => 0,
            255 => 1,
            value => {
                return Err(Error::NonBinaryMask {
                    id: id.to_string(),
                    value,
                })
            }
        };
    }
    Ok(ImagePair {
        id: id.to_string(),
        scene: entry.scene,
        rgb,
        thermal,
        mask,
    })
}

/// Write a pair in the dataset layout (mask stored as {0, 255}).
pub fn write_pair(root: &Path, pair: &ImagePair) -> Result<()> {
    for dir in ["rgb", "thermal", "mask"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let p = rgb_path(root, &pair.id);
    pair.rgb.save(&p).map_err(image_err(&p))?;
    let p = thermal_path(root, &pair.id);
    pair.thermal.save(&p).map_err(image_err(&p))?;
    let mut mask = pair.mask.clone();
    for px in mask.pixels_mut() {
        px.0[0] = if px.0[0] > 0 { 255 } else { 0 };
    }
    let p = mask_path(root, &pair.id);
    mask.save(&p).map_err(image_err(&p))?;
    Ok(())
}

/// Seeded partition: after sorting by id and shuffling, the first
/// `floor(n * train_fraction)` entries form train+val (val taken from the
/// tail of that block), the rest are test.
pub fn make_split(manifest: &Manifest, train_fraction: f64, val_fraction_of_train: f64, seed: u64) -> Result<Manifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!("train_fraction must be in (0, 1), got {train_fraction}")));
    }
    if !(0.0..1.0).contains(&val_fraction_of_train) {
        return Err(Error::Split(format!(
            "val_fraction_of_train must be in [0, 1), got {val_fraction_of_train}"
        )));
    }
    let n = manifest.entries.len();
    let want_val = val_fraction_of_train > 0.0;
    if n < 2 || (want_val && n < 3) {
        return Err(Error::Split(format!("cannot split {n} entries into nonempty parts")));
    }
    let mut entries = manifest.entries.clone();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        entries.swap(i, j);
    }
    let n_train_val = ((n as f64 * train_fraction) + 1e-9).floor() as usize;
    let n_val = if want_val {
        (((n_train_val as f64) * val_fraction_of_train).round() as usize).max(1)
    } else {
        0
    };
    if n_train_val == 0 || n_train_val == n || n_val >= n_train_val {
        return Err(Error::Split(format!(
            "fractions ({train_fraction}, {val_fraction_of_train}) leave an empty part for {n} entries"
        )));
    }
    for (i, e) in entries.iter_mut().enumerate() {
        e.split = if i >= n_train_val {
            Split::Test
        } else if i >= n_train_val - n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Manifest {
        root: manifest.root.clone(),
        seed,
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ThermalNormalization {
    /// Scale to [0, 1] by the image's own range, then subtract the mean.
    PerImageMinmax,
    /// `(v / 255 - mean) / std`.
    FixedMeanStd { mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// `[height, width]`, both multiples of 32.
    pub target_size: [usize; 2],
    pub rgb_mean: [f64; 3],
    pub rgb_std: [f64; 3],
    pub thermal_normalization: ThermalNormalization,
    pub hflip_prob: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: [512, 640],
            rgb_mean: [0.485, 0.456, 0.406],
            rgb_std: [0.229, 0.224, 0.225],
            thermal_normalization: ThermalNormalization::PerImageMinmax,
            hflip_prob: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.target_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "target_size {h}x{w} must be nonzero multiples of 32"
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} not in [0, 1]", self.hflip_prob)));
        }
        if self.rgb_std.iter().any(|&s| s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Config("rgb_std entries must be positive".into()));
        }
        if let ThermalNormalization::FixedMeanStd { std, .. } = self.thermal_normalization {
            if std.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Config("thermal std must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PreprocessWarning {
    /// Thermal image had a single intensity; normalized plane set to zero.
    ConstantThermal { id: String, value: u8 },
}

/// Model-ready arrays for one record.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    /// `[3, H, W]`
    pub rgb: Tensor<T>,
    /// `[1, H, W]`
    pub thermal: Tensor<T>,
    /// `H * W` row-major labels in {0, 1}.
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub flipped: bool,
    pub warnings: Vec<PreprocessWarning>,
}

/// Resample an 8-bit plane with half-pixel-center bilinear weights.
fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let ty = taps::<f64>(h, oh);
    let tx = taps::<f64>(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, wy0, wy1) in &ty {
        for &(x0, x1, wx0, wx1) in &tx {
            let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
            let bot = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
            out.push(wy0 * top + wy1 * bot);
        }
    }
    out
}

fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    (((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

fn resize_nearest(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let y = nearest_index(oy, h, oh);
        for ox in 0..ow {
            out.push(src[y * w + nearest_index(ox, w, ow)]);
        }
    }
    out
}

fn flip_rows<V: Copy>(plane: &mut [V], w: usize) {
    for row in plane.chunks_mut(w) {
        row.reverse();
    }
}

/// Resize, normalize and (in training mode) randomly mirror a pair.
pub fn preprocess<T: Scalar>(pair: &ImagePair, config: &PreprocessConfig, training: bool, seed: u64) -> Result<Sample<T>> {
    config.validate()?;
    let (h, w) = pair.size();
    if pair.thermal.dimensions() != pair.rgb.dimensions() || pair.mask.dimensions() != pair.rgb.dimensions() {
        return Err(Error::Alignment {
            id: pair.id.clone(),
            detail: "rgb, thermal and mask sizes differ".into(),
        });
    }
    let [oh, ow] = config.target_size;
    let mut warnings = Vec::new();

    let mut rgb_planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let plane: Vec<f64> = pair.rgb.pixels().map(|p| p.0[c] as f64 / 255.0).collect();
            resize_bilinear(&plane, h, w, oh, ow)
                .into_iter()
                .map(|v| (v - config.rgb_mean[c]) / config.rgb_std[c])
                .collect()
        })
        .collect();

    let raw: Vec<f64> = pair.thermal.pixels().map(|p| p.0[0] as f64).collect();
    let resized = resize_bilinear(&raw, h, w, oh, ow);
    let mut thermal: Vec<f64> = match config.thermal_normalization {
        ThermalNormalization::PerImageMinmax => {
            let lo = pair.thermal.pixels().map(|p| p.0[0]).min().unwrap_or(0);
            let hi = pair.thermal.pixels().map(|p| p.0[0]).max().unwrap_or(0);
            if lo == hi {
                log::warn!("sample {}: constant thermal image ({lo}); using zeros", pair.id);
                warnings.push(PreprocessWarning::ConstantThermal {
                    id: pair.id.clone(),
                    value: lo,
                });
                vec![0.0; oh * ow]
            } else {
                let range = (hi - lo) as f64;
                let scaled: Vec<f64> = resized.iter().map(|&v| (v - lo as f64) / range).collect();
                let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
                scaled.into_iter().map(|v| v - mean).collect()
            }
        }
        ThermalNormalization::FixedMeanStd { mean, std } => resized.iter().map(|&v| (v / 255.0 - mean) / std).collect(),
    };

    let raw_mask: Vec<u8> = pair.mask.pixels().map(|p| p.0[0]).collect();
    let mut mask = resize_nearest(&raw_mask, h, w, oh, ow);

    let flipped = training && {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.random::<f64>() < config.hflip_prob
    };
    if flipped {
        for p in rgb_planes.iter_mut() {
            flip_rows(p, ow);
        }
        flip_rows(&mut thermal, ow);
        flip_rows(&mut mask, ow);
    }

    let rgb = Tensor::new(&[3, oh, ow], rgb_planes.concat().into_iter().map(T::lit).collect())?;
    let thermal = Tensor::new(&[1, oh, ow], thermal.into_iter().map(T::lit).collect())?;
    Ok(Sample {
        id: pair.id.clone(),
        rgb,
        thermal,
        mask,
        height: oh,
        width: ow,
        flipped,
        warnings,
    })
}

/// Batched model inputs: `[N, 3, H, W]`, `[N, 1, H, W]`, and `[N, H, W]`
/// 0/1 targets.
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub rgb: Tensor<T>,
    pub thermal: Tensor<T>,
    pub target: Tensor<T>,
    pub masks: Vec<Vec<u8>>,
}

pub fn collate<T: Scalar>(samples: Vec<Sample<T>>) -> Result<Batch<T>> {
    let rgb = Tensor::stack(&samples.iter().map(|s| s.rgb.clone()).collect::<Vec<_>>())?;
    let thermal = Tensor::stack(&samples.iter().map(|s| s.thermal.clone()).collect::<Vec<_>>())?;
    let (h, w) = (samples[0].height, samples[0].width);
    let mut target = Vec::with_capacity(samples.len() * h * w);
    for s in &samples {
        target.extend(s.mask.iter().map(|&m| if m > 0 { T::one() } else { T::zero() }));
    }
    let target = Tensor::new(&[samples.len(), h, w], target)?;
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        rgb,
        thermal,
        target,
        masks: samples.into_iter().map(|s| s.mask).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    fn pair(h: u32, w: u32) -> ImagePair {
        ImagePair {
            id: "p".into(),
            scene: Scene::Synthetic,
            rgb: RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, ((x + y) * 3) as u8])),
            thermal: GrayImage::from_fn(w, h, |x, y| Luma([(x * 3 + y) as u8])),
            mask: GrayImage::from_fn(w, h, |x, _| Luma([(x < 5) as u8])),
        }
    }

    fn config(h: usize, w: usize, p: f64) -> PreprocessConfig {
        PreprocessConfig {
            target_size: [h, w],
            hflip_prob: p,
            ..Default::default()
        }
    }

    fn manifest(n: usize) -> Manifest {
        Manifest {
            root: PathBuf::from("."),
            seed: 0,
            entries: (0..n)
                .map(|i| ManifestEntry {
                    id: format!("s{i:04}"),
                    scene: Scene::Synthetic,
                    split: Split::Unassigned,
                })
                .collect(),
        }
    }

    fn counts(m: &Manifest) -> (usize, usize, usize) {
        (m.ids(Split::Train).len(), m.ids(Split::Val).len(), m.ids(Split::Test).len())
    }

    #[test]
    fn split_of_full_dataset_size() {
        let m = make_split(&manifest(1293), 0.8, 0.1, 1).unwrap();
        let (tr, va, te) = counts(&m);
        assert_eq!(tr + va, 1034);
        assert_eq!(te, 259);
        assert_eq!(va, 103);
    }

    #[test]
    fn split_of_ten() {
        let m = make_split(&manifest(10), 0.8, 0.125, 3).unwrap();
        assert_eq!(counts(&m), (7, 1, 2));
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let a = make_split(&manifest(50), 0.8, 0.1, 9).unwrap();
        let b = make_split(&manifest(50), 0.8, 0.1, 9).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = make_split(&manifest(50), 0.8, 0.1, 10).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn split_rejects_tiny_and_bad_fractions() {
        assert!(matches!(make_split(&manifest(2), 0.8, 0.1, 0), Err(Error::Split(_))));
        assert!(make_split(&manifest(10), 1.0, 0.1, 0).is_err());
        assert!(make_split(&manifest(10), 0.8, 1.0, 0).is_err());
    }

    #[test]
    fn constant_thermal_falls_back_to_zeros() {
        let mut p = pair(32, 32);
        p.thermal = GrayImage::from_pixel(32, 32, Luma([77]));
        let s = preprocess::<f32>(&p, &config(32, 32, 0.0), false, 0).unwrap();
        assert!(s.thermal.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn minmax_thermal_is_zero_mean_unit_range() {
        let s = preprocess::<f64>(&pair(32, 64), &config(32, 64, 0.0), false, 0).unwrap();
        let d = s.thermal.data();
        let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mean.abs() < 1e-12);
        assert!((hi - lo - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flip_applies_jointly_in_training_only() {
        let p = pair(32, 64);
        let base = preprocess::<f64>(&p, &config(32, 64, 0.0), false, 5).unwrap();
        let flipped = preprocess::<f64>(&p, &config(32, 64, 1.0), true, 5).unwrap();
        let eval = preprocess::<f64>(&p, &config(32, 64, 1.0), false, 5).unwrap();
        assert!(flipped.flipped);
        assert!(!eval.flipped);
        assert_eq!(eval.rgb, base.rgb);
        assert_eq!(eval.mask, base.mask);
        let w = 64;
        for r in 0..32 {
            for c in 0..w {
                assert_eq!(flipped.mask[r * w + c], base.mask[r * w + (w - 1 - c)]);
                assert_eq!(flipped.thermal.data()[r * w + c], base.thermal.data()[r * w + (w - 1 - c)]);
                for ch in 0..3 {
                    let plane = ch * 32 * w;
                    assert_eq!(flipped.rgb.data()[plane + r * w + c], base.rgb.data()[plane + r * w + (w - 1 - c)]);
                }
            }
        }
    }

    #[test]
    fn resize_uses_nearest_for_masks() {
        let s = preprocess::<f32>(&pair(40, 20), &config(64, 32, 0.0), false, 0).unwrap();
        assert_eq!(s.mask.len(), 64 * 32);
        assert!(s.mask.iter().all(|&m| m <= 1));
        assert_eq!(s.rgb.shape(), &[3, 64, 32]);
    }

    #[test]
    fn preprocess_rejects_bad_target_size() {
        assert!(preprocess::<f32>(&pair(32, 32), &config(40, 32, 0.0), false, 0).is_err());
    }
}
