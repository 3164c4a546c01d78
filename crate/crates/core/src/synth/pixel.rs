use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::perlin::PerlinField;
use crate::config::SynthConfig;
use crate::error::{Error, Result};

/// A corrupted image together with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct SyntheticAnomaly {
    pub image: RgbImage,
    /// 0 / 255 mask, same size as `image`.
    pub mask: GrayImage,
    /// Reproduces this anomaly when fed back to [`simulate_with_seed`].
    pub seed: u64,
    pub source_id: String,
    pub beta: f64,
}

impl SyntheticAnomaly {
    pub fn area_fraction(&self) -> f64 {
        let on = self.mask.pixels().filter(|p| p[0] > 0).count();
        on as f64 / (self.mask.width() * self.mask.height()) as f64
    }
}

/// Where blend textures come from.
#[derive(Debug, Clone)]
pub enum TextureSource {
    /// Random files from a texture collection (e.g. DTD).
    Directory(Vec<PathBuf>),
    /// Augmented copies of the image being corrupted.
    SelfAugmented,
}

impl TextureSource {
    pub fn from_config(cfg: &SynthConfig) -> Result<Self> {
        match &cfg.texture_dir {
            None => Ok(TextureSource::SelfAugmented),
            Some(dir) => Self::from_dir(dir),
        }
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        collect_images(dir, &mut files)?;
        if files.is_empty() {
            return Err(Error::Ingestion {
                path: dir.to_path_buf(),
                reason: "no texture images found".into(),
            });
        }
        files.sort();
        Ok(TextureSource::Directory(files))
    }

    fn sample(&self, image: &RgbImage, rng: &mut impl Rng) -> Result<(RgbImage, String)> {
        let (w, h) = image.dimensions();
        match self {
            TextureSource::Directory(files) => {
                let path = &files[rng.random_range(0..files.len())];
                let tex = image::open(path)?.to_rgb8();
                let tex = imageops::resize(&tex, w, h, imageops::FilterType::Triangle);
                Ok((augment(&tex, rng), path.display().to_string()))
            }
            TextureSource::SelfAugmented => {
                let scale = rng.random_range(0.3..=1.0);
                let cw = ((w as f64 * scale) as u32).max(1);
                let ch = ((h as f64 * scale) as u32).max(1);
                let x0 = rng.random_range(0..=w - cw);
                let y0 = rng.random_range(0..=h - ch);
                let crop = imageops::crop_imm(image, x0, y0, cw, ch).to_image();
                let mut tex = imageops::resize(&crop, w, h, imageops::FilterType::Triangle);
                for _ in 0..rng.random_range(0..4) {
                    tex = imageops::rotate90(&tex);
                    if tex.dimensions() != (w, h) {
                        tex = imageops::resize(&tex, w, h, imageops::FilterType::Triangle);
                    }
                }
                Ok((augment(&tex, rng), "self".to_string()))
            }
        }
    }
}

pub(crate) fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if is_image_file(&path) {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum ColorAug {
    Gamma,
    Brightness,
    ChannelShuffle,
    Solarize,
    Posterize,
    Invert,
}

fn apply_lut(img: &mut RgbImage, lut: impl Fn(usize, u8) -> u8) {
    for p in img.pixels_mut() {
        for c in 0..3 {
            p[c] = lut(c, p[c]);
        }
    }
}

/// Three distinct color augmentations drawn at random.
fn augment(img: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let mut ops = [
        ColorAug::Gamma,
        ColorAug::Brightness,
        ColorAug::ChannelShuffle,
        ColorAug::Solarize,
        ColorAug::Posterize,
        ColorAug::Invert,
    ];
    ops.shuffle(rng);
    let mut out = img.clone();
    for op in &ops[..3] {
        match op {
            ColorAug::Gamma => {
                let g: f64 = rng.random_range(0.5..2.0);
                apply_lut(&mut out, |_, v| {
                    ((v as f64 / 255.0).powf(g) * 255.0).round() as u8
                });
            }
            ColorAug::Brightness => {
                let m: [f64; 3] = [
                    rng.random_range(0.8..1.2),
                    rng.random_range(0.8..1.2),
                    rng.random_range(0.8..1.2),
                ];
                apply_lut(&mut out, |c, v| {
                    (v as f64 * m[c]).round().clamp(0.0, 255.0) as u8
                });
            }
            ColorAug::ChannelShuffle => {
                let mut perm = [0usize, 1, 2];
                perm.shuffle(rng);
                for p in out.pixels_mut() {
                    let old = p.0;
                    p.0 = [old[perm[0]], old[perm[1]], old[perm[2]]];
                }
            }
            ColorAug::Solarize => {
                let t: u8 = rng.random_range(32..=128);
                apply_lut(&mut out, |_, v| if v >= t { 255 - v } else { v });
            }
            ColorAug::Posterize => {
                let bits: u32 = rng.random_range(2..=5);
                let mask = !((1u16 << (8 - bits)) - 1) as u8;
                apply_lut(&mut out, |_, v| v & mask);
            }
            ColorAug::Invert => apply_lut(&mut out, |_, v| 255 - v),
        }
    }
    out
}

/// Thresholded, randomly rotated Perlin mask with DRAEM-style lattice scales.
pub fn perlin_mask(width: u32, height: u32, cfg: &SynthConfig, rng: &mut impl Rng) -> GrayImage {
    let [lo, hi] = cfg.perlin_scale_exp;
    let sy = 1usize << rng.random_range(lo..=hi);
    let sx = 1usize << rng.random_range(lo..=hi);
    let field = PerlinField::new(sy, sx, rng);
    let angle = rng.random_range(-90.0f64..=90.0).to_radians();
    let noise = field.render(height as usize, width as usize, angle);
    GrayImage::from_fn(width, height, |x, y| {
        let v = noise[y as usize * width as usize + x as usize];
        Luma([if v > cfg.perlin_threshold { 255 } else { 0 }])
    })
}

/// `beta * texture + (1 - beta) * image` inside the mask; untouched outside.
pub fn blend(image: &RgbImage, texture: &RgbImage, mask: &GrayImage, beta: f64) -> RgbImage {
    let mut out = image.clone();
    for (x, y, m) in mask.enumerate_pixels() {
        if m[0] == 0 {
            continue;
        }
        let src = image.get_pixel(x, y);
        let tex = texture.get_pixel(x, y);
        let px = out.get_pixel_mut(x, y);
        for c in 0..3 {
            let v = beta * tex[c] as f64 + (1.0 - beta) * src[c] as f64;
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Corrupts `image` with a Perlin-shaped texture blend. All randomness comes
/// from one seed drawn from `rng`, recorded in the result.
pub fn simulate_pixel_anomaly(
    image: &RgbImage,
    textures: &TextureSource,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<SyntheticAnomaly> {
    simulate_with_seed(image, textures, cfg, rng.random())
}

pub fn simulate_with_seed(
    image: &RgbImage,
    textures: &TextureSource,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<SyntheticAnomaly> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = image.dimensions();
    let total = (w * h) as f64;
    let mut mask = None;
    for _ in 0..cfg.max_retries.max(1) {
        let m = perlin_mask(w, h, cfg, &mut rng);
        let on = m.pixels().filter(|p| p[0] > 0).count() as f64;
        if on > 0.0 && on / total <= cfg.max_area_fraction {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Simulation(format!(
            "no admissible Perlin mask after {} draws",
            cfg.max_retries
        ))
    })?;
    let (texture, source_id) = textures.sample(image, &mut rng)?;
    let [lo, hi] = cfg.beta_range;
    let beta = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    Ok(SyntheticAnomaly {
        image: blend(image, &texture, &mask, beta),
        mask,
        seed,
        source_id,
        beta,
    })
}
