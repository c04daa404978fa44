//! Synthetic RGB-thermal gas scenes.
//!
//! A gas plume is a sum of Gaussian puffs giving a concentration field `c`.
//! The thermal frame attenuates the background radiance with transmittance
//! `exp(-k c)` toward the gas radiance; the RGB frame never sees the gas.
//! Distractors are dark in thermal and visible in RGB, so only the RGB
//! stream can tell them apart from gas.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_pair, ImagePair, Manifest, ManifestEntry, Scene, Split};
use crate::error::{image_err, io_err, Error, Result};
use crate::util::mix_seed;

/// Real-valued image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Round to 8 bits after clamping to [0, 1].
    pub fn quantize(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.get(y as usize, x as usize))])
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Puff {
    /// `(row, col)` in pixels.
    pub center: (f64, f64),
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlumeParams {
    pub puffs: Vec<Puff>,
    pub absorption_k: f64,
    /// Radiance of the gas itself, in [0, 1].
    pub gas_level: f64,
    pub mask_threshold: f64,
}

impl PlumeParams {
    pub fn validate(&self) -> Result<()> {
        for p in &self.puffs {
            if !(p.sigma > 0.0) || !(p.amplitude >= 0.0) {
                return Err(Error::Validation(format!("invalid puff {p:?}")));
            }
        }
        if !(self.absorption_k > 0.0) {
            return Err(Error::Validation("absorption_k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gas_level) {
            return Err(Error::Validation("gas_level must lie in [0, 1]".into()));
        }
        if !(self.mask_threshold > 0.0) {
            return Err(Error::Validation("mask_threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundStyle {
    Gradient,
    PerlinLike,
    Blocks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistractorShape {
    Rect,
    /// Ellipse inscribed in the bounding box.
    Disk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub shape: DistractorShape,
    /// Fraction of thermal radiance removed inside the object.
    pub darkness: f64,
    /// Top-left `(row, col)` of the bounding box.
    pub position: (usize, usize),
    /// `(height, width)` of the bounding box.
    pub size: (usize, usize),
}

impl Distractor {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let (r0, c0) = self.position;
        let (h, w) = self.size;
        if r < r0 || c < c0 || r >= r0 + h || c >= c0 + w {
            return false;
        }
        match self.shape {
            DistractorShape::Rect => true,
            DistractorShape::Disk => {
                let dy = (r as f64 + 0.5 - r0 as f64 - h as f64 / 2.0) / (h as f64 / 2.0);
                let dx = (c as f64 + 0.5 - c0 as f64 - w as f64 / 2.0) / (w as f64 / 2.0);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Inside, but within `px` pixels of the outline.
    fn on_edge(&self, r: usize, c: usize, px: usize) -> bool {
        if !self.contains(r, c) {
            return false;
        }
        let probes = [(px as isize, 0), (-(px as isize), 0), (0, px as isize), (0, -(px as isize))];
        probes.iter().any(|&(dr, dc)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            rr < 0 || cc < 0 || !self.contains(rr as usize, cc as usize)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub background_style: BackgroundStyle,
    pub distractors: Vec<Distractor>,
    pub rng_seed: u64,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation(format!(
                "zero-area scene {}x{}",
                self.height, self.width
            )));
        }
        for d in &self.distractors {
            let (r, c) = d.position;
            let (h, w) = d.size;
            if h == 0 || w == 0 || r + h > self.height || c + w > self.width {
                return Err(Error::Validation(format!("distractor {d:?} outside the image")));
            }
            if !(0.0..=1.0).contains(&d.darkness) {
                return Err(Error::Validation(format!("distractor darkness {} not in [0, 1]", d.darkness)));
            }
        }
        Ok(())
    }
}

pub struct RenderedScene {
    pub rgb: RgbImage,
    /// Background radiance in [0, 1] before any gas.
    pub thermal_bg: Field,
    /// 1 where a distractor covers the pixel.
    pub distractor_regions: GrayImage,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Smooth multi-octave value noise normalized to [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    for (cells, weight) in [(3usize, 0.5), (6, 0.3), (12, 0.2)] {
        let gh = cells + 2;
        let gw = cells * w / h.max(1) + 2;
        let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        for r in 0..h {
            let fy = r as f64 / h as f64 * cells as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            let ty = ty * ty * (3.0 - 2.0 * ty);
            for c in 0..w {
                let fx = c as f64 / w as f64 * (gw - 2) as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let tx = tx * tx * (3.0 - 2.0 * tx);
                let top = lerp(grid[y0 * gw + x0], grid[y0 * gw + x0 + 1], tx);
                let bot = lerp(grid[(y0 + 1) * gw + x0], grid[(y0 + 1) * gw + x0 + 1], tx);
                acc[r * w + c] += weight * lerp(top, bot, ty);
            }
        }
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    acc.into_iter().map(|v| (v - lo) / span).collect()
}

fn base_field(style: BackgroundStyle, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    match style {
        BackgroundStyle::Gradient => {
            let alpha: f64 = rng.random();
            let fy = |r: usize| if h > 1 { r as f64 / (h - 1) as f64 } else { 0.0 };
            let fx = |c: usize| if w > 1 { c as f64 / (w - 1) as f64 } else { 0.0 };
            (0..h * w).map(|i| alpha * fy(i / w) + (1.0 - alpha) * fx(i % w)).collect()
        }
        BackgroundStyle::PerlinLike => value_noise(rng, h, w),
        BackgroundStyle::Blocks => {
            let mut f = vec![rng.random::<f64>(); h * w];
            let n = rng.random_range(4..=8);
            for _ in 0..n {
                let bh = rng.random_range(h / 6..=h / 2).max(1);
                let bw = rng.random_range(w / 6..=w / 2).max(1);
                let r0 = rng.random_range(0..=h - bh);
                let c0 = rng.random_range(0..=w - bw);
                let level: f64 = rng.random();
                for r in r0..r0 + bh {
                    f[r * w + c0..r * w + c0 + bw].fill(level);
                }
            }
            f
        }
    }
}

/// Draw the gas-free scene. Deterministic in `params.rng_seed`.
pub fn render_scene(params: &SceneParams) -> Result<RenderedScene> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let base = base_field(params.background_style, &mut rng, h, w);

    let lo = rng.random_range(0.45..0.6);
    let span = rng.random_range(0.15..0.3);
    let mut thermal = Field {
        height: h,
        width: w,
        data: base.iter().map(|&b| lo + span * b).collect(),
    };

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(60.0..200.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(60.0..200.0));
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for (i, px) in rgb.pixels_mut().enumerate() {
        let b = base[i];
        let grain: f64 = rng.random_range(-8.0..8.0);
        *px = Rgb(std::array::from_fn(|ch| (lerp(c0[ch], c1[ch], b) + grain).clamp(0.0, 255.0).round() as u8));
    }

    let mut regions = GrayImage::new(w as u32, h as u32);
    for d in &params.distractors {
        let body: [f64; 3] = std::array::from_fn(|_| rng.random_range(15.0..70.0));
        let rim: [f64; 3] = std::array::from_fn(|_| rng.random_range(190.0..250.0));
        let (r0, c0) = d.position;
        let (bh, bw) = d.size;
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                if !d.contains(r, c) {
                    continue;
                }
                let color = if d.on_edge(r, c, 2) {
                    rim
                } else {
                    let stripe = if (r / 3 + c / 3) % 2 == 0 { 25.0 } else { 0.0 };
                    body.map(|v| v + stripe)
                };
                rgb.put_pixel(c as u32, r as u32, Rgb(color.map(|v| v.round() as u8)));
                thermal.data[r * w + c] *= 1.0 - d.darkness;
                regions.put_pixel(c as u32, r as u32, Luma([1]));
            }
        }
    }
    Ok(RenderedScene {
        rgb,
        thermal_bg: thermal,
        distractor_regions: regions,
    })
}

/// `c(x) = sum_i a_i exp(-|x - mu_i|^2 / (2 sigma_i^2))` at pixel centers.
pub fn render_concentration(puffs: &[Puff], height: usize, width: usize) -> Result<Field> {
    for p in puffs {
        if !(p.sigma > 0.0) || !(p.amplitude >= 0.0) {
            return Err(Error::Validation(format!("invalid puff {p:?}")));
        }
    }
    let mut f = Field::zeros(height, width);
    for p in puffs {
        let inv = 1.0 / (2.0 * p.sigma * p.sigma);
        for r in 0..height {
            let dy = r as f64 - p.center.0;
            for c in 0..width {
                let dx = c as f64 - p.center.1;
                f.data[r * width + c] += p.amplitude * (-(dy * dy + dx * dx) * inv).exp();
            }
        }
    }
    Ok(f)
}

/// Transmittance blend before quantization:
/// `tau = exp(-k c)`, `out = tau * bg + (1 - tau) * gas_level`.
pub fn composite_real(thermal_bg: &Field, concentration: &Field, absorption_k: f64, gas_level: f64) -> Result<Field> {
    if (thermal_bg.height, thermal_bg.width) != (concentration.height, concentration.width) {
        return Err(Error::Shape(format!(
            "thermal {}x{} vs concentration {}x{}",
            thermal_bg.height, thermal_bg.width, concentration.height, concentration.width
        )));
    }
    let data = thermal_bg
        .data
        .iter()
        .zip(&concentration.data)
        .map(|(&bg, &c)| {
            let tau = (-absorption_k * c).exp();
            tau * bg + (1.0 - tau) * gas_level
        })
        .collect();
    Ok(Field {
        height: thermal_bg.height,
        width: thermal_bg.width,
        data,
    })
}

pub fn composite(thermal_bg: &Field, concentration: &Field, absorption_k: f64, gas_level: f64) -> Result<GrayImage> {
    Ok(composite_real(thermal_bg, concentration, absorption_k, gas_level)?.quantize())
}

/// `mask = c > threshold`, stored as {0, 1}.
pub fn make_mask(concentration: &Field, threshold: f64) -> Result<GrayImage> {
    if !(threshold > 0.0) {
        return Err(Error::Validation(format!("mask threshold {threshold} must be positive")));
    }
    Ok(GrayImage::from_fn(concentration.width as u32, concentration.height as u32, |x, y| {
        Luma([(concentration.get(y as usize, x as usize) > threshold) as u8])
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// Plumes only.
    Easy,
    /// Plumes plus thermal-dark distractors, at least one overlapping a plume.
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!("unknown difficulty `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub count: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            count: 8,
            seed: 0,
            difficulty: Difficulty::Easy,
            height: 128,
            width: 160,
        }
    }
}

/// Everything drawn for one synthetic record.
pub struct SyntheticPair {
    pub pair: ImagePair,
    pub scene: SceneParams,
    pub plume: PlumeParams,
    pub thermal_bg: Field,
    pub concentration: Field,
    pub distractor_regions: GrayImage,
}

pub fn synth_id(index: usize) -> String {
    format!("synth_{index:05}")
}

fn clamp_box(center: f64, extent: usize, limit: usize) -> usize {
    let start = (center - extent as f64 / 2.0).round().max(0.0) as usize;
    start.min(limit - extent)
}

/// Sample scene and plume parameters for record `index` and render it.
pub fn generate_pair(index: usize, opts: &SynthOptions) -> Result<SyntheticPair> {
    let (h, w) = (opts.height, opts.width);
    if h < 16 || w < 16 {
        return Err(Error::Validation(format!("synthetic scenes need at least 16x16 pixels, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, index as u64));
    let short = h.min(w) as f64;

    let style = match rng.random_range(0..3) {
        0 => BackgroundStyle::Gradient,
        1 => BackgroundStyle::PerlinLike,
        _ => BackgroundStyle::Blocks,
    };

    let n_puffs = rng.random_range(1..=3);
    let first = (
        rng.random_range(h / 4..=3 * h / 4) as f64,
        rng.random_range(w / 4..=3 * w / 4) as f64,
    );
    let mut puffs = Vec::with_capacity(n_puffs);
    for i in 0..n_puffs {
        let center = if i == 0 {
            first
        } else {
            let reach = 0.2 * short;
            (
                (first.0 + rng.random_range(-reach..reach)).clamp(0.0, (h - 1) as f64).round(),
                (first.1 + rng.random_range(-reach..reach)).clamp(0.0, (w - 1) as f64).round(),
            )
        };
        puffs.push(Puff {
            center,
            sigma: rng.random_range(0.05..0.11) * short,
            amplitude: rng.random_range(1.0..2.0),
        });
    }
    let plume = PlumeParams {
        puffs,
        absorption_k: rng.random_range(2.0..3.5),
        gas_level: rng.random_range(0.05..0.2),
        mask_threshold: 0.35,
    };

    let mut distractors = Vec::new();
    if opts.difficulty == Difficulty::Hard {
        let n = rng.random_range(1..=3);
        for i in 0..n {
            let size = (
                ((rng.random_range(0.15..0.3) * short).round() as usize).clamp(4, h),
                ((rng.random_range(0.15..0.3) * short).round() as usize).clamp(4, w),
            );
            let shape = if rng.random_bool(0.5) {
                DistractorShape::Rect
            } else {
                DistractorShape::Disk
            };
            let center = if i == 0 {
                // Straddle the plume edge so part of the object lies outside the gas.
                let p = plume.puffs[0];
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let dist = 1.5 * p.sigma;
                (p.center.0 + dist * angle.sin(), p.center.1 + dist * angle.cos())
            } else {
                (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64))
            };
            distractors.push(Distractor {
                shape,
                darkness: rng.random_range(0.45..0.7),
                position: (clamp_box(center.0, size.0, h), clamp_box(center.1, size.1, w)),
                size,
            });
        }
    }

    let scene = SceneParams {
        height: h,
        width: w,
        background_style: style,
        distractors,
        rng_seed: rng.random(),
    };
    let rendered = render_scene(&scene)?;
    let concentration = render_concentration(&plume.puffs, h, w)?;
    let thermal = composite(&rendered.thermal_bg, &concentration, plume.absorption_k, plume.gas_level)?;
    let mask = make_mask(&concentration, plume.mask_threshold)?;
    Ok(SyntheticPair {
        pair: ImagePair {
            id: synth_id(index),
            scene: Scene::Synthetic,
            rgb: rendered.rgb,
            thermal,
            mask,
        },
        scene,
        plume,
        thermal_bg: rendered.thermal_bg,
        concentration,
        distractor_regions: rendered.distractor_regions,
    })
}

pub fn distractor_path(root: &Path, id: &str) -> PathBuf {
    root.join("distractor").join(format!("{id}.png"))
}

/// Write `opts.count` records plus `manifest.json` under `out_dir`. Hard
/// datasets also get `distractor/<id>.png` region maps ({0, 255}).
pub fn generate_dataset(out_dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    if opts.count == 0 {
        return Err(Error::Validation("dataset count must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut entries = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let s = generate_pair(i, opts)?;
        write_pair(out_dir, &s.pair)?;
        if opts.difficulty == Difficulty::Hard {
            let dir = out_dir.join("distractor");
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut map = s.distractor_regions.clone();
            map.pixels_mut().for_each(|p| p.0[0] = if p.0[0] > 0 { 255 } else { 0 });
            let path = distractor_path(out_dir, &s.pair.id);
            map.save(&path).map_err(image_err(&path))?;
        }
        entries.push(ManifestEntry {
            id: s.pair.id,
            scene: Scene::Synthetic,
            split: Split::Unassigned,
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        seed: opts.seed,
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}
