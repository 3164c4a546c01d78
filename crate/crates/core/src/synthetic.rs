//! Procedural texture dataset in the MVTec layout, for desk-scale runs.
//!
//! Each category is a Perlin fBm texture around a base color; every image
//! draws fresh noise fields so normals vary. Defective test images carry
//! either a filled square or a Perlin-shaped blob of a contrasting texture.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::PerlinField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub categories: Vec<String>,
    pub train_normals: usize,
    pub test_images: usize,
    /// Share of defective images in the test split.
    pub defect_fraction: f64,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            categories: vec!["fabric".into()],
            train_normals: 64,
            test_images: 200,
            defect_fraction: 0.5,
            image_size: 240,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    Square,
    Blob,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Square => "square",
            DefectKind::Blob => "blob",
        }
    }
}

fn category_palette(name: &str) -> [f64; 3] {
    // Stable per-name color so regenerated datasets match.
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    [
        rng.random_range(70.0..180.0),
        rng.random_range(70.0..180.0),
        rng.random_range(70.0..180.0),
    ]
}

fn fbm(size: u32, rng: &mut impl Rng) -> Vec<f64> {
    let n = size as usize;
    let mut out = vec![0.0; n * n];
    for (res, amp) in [(4usize, 0.6), (8, 0.3), (16, 0.15)] {
        let f = PerlinField::new(res, res, rng);
        for (o, v) in out.iter_mut().zip(f.render(n, n, 0.0)) {
            *o += amp * v;
        }
    }
    out
}

fn texture(size: u32, base: [f64; 3], contrast: f64, rng: &mut impl Rng) -> RgbImage {
    let field = fbm(size, rng);
    let tint: [f64; 3] = [
        rng.random_range(-6.0..6.0),
        rng.random_range(-6.0..6.0),
        rng.random_range(-6.0..6.0),
    ];
    RgbImage::from_fn(size, size, |x, y| {
        let v = field[(y * size + x) as usize];
        Rgb(std::array::from_fn(|c| {
            (base[c] + tint[c] + contrast * v).round().clamp(0.0, 255.0) as u8
        }))
    })
}

/// One normal texture image.
pub fn normal_image(category: &str, size: u32, rng: &mut impl Rng) -> RgbImage {
    texture(size, category_palette(category), 60.0, rng)
}

/// A defective image and its 0/255 mask.
pub fn defective_image(
    category: &str,
    size: u32,
    kind: DefectKind,
    rng: &mut impl Rng,
) -> (RgbImage, GrayImage) {
    let base = category_palette(category);
    let mut img = texture(size, base, 60.0, rng);
    let mask = match kind {
        DefectKind::Square => {
            let side = rng.random_range(size / 10..=size / 4);
            let x0 = rng.random_range(0..=size - side);
            let y0 = rng.random_range(0..=size - side);
            GrayImage::from_fn(size, size, |x, y| {
                let inside = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
                Luma([if inside { 255 } else { 0 }])
            })
        }
        DefectKind::Blob => loop {
            let f = PerlinField::new(4, 4, rng);
            let v = f.render(size as usize, size as usize, 0.0);
            let m = GrayImage::from_fn(size, size, |x, y| {
                Luma([if v[(y * size + x) as usize] > 0.45 {
                    255
                } else {
                    0
                }])
            });
            let area = m.pixels().filter(|p| p[0] > 0).count() as f64 / (size * size) as f64;
            if (0.01..=0.2).contains(&area) {
                break m;
            }
        },
    };
    // Contrasting color: push every channel away from the base.
    let shift: [f64; 3] = std::array::from_fn(|c| {
        let dir = if base[c] > 127.0 { -1.0 } else { 1.0 };
        dir * rng.random_range(60.0..110.0)
    });
    let defect_base: [f64; 3] = std::array::from_fn(|c| base[c] + shift[c]);
    let patch = texture(size, defect_base, 30.0, rng);
    for (x, y, m) in mask.enumerate_pixels() {
        if m[0] > 0 {
            img.put_pixel(x, y, *patch.get_pixel(x, y));
        }
    }
    (img, mask)
}

fn save(img: &impl SaveImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_png(path)
}

trait SaveImage {
    fn save_png(&self, path: &Path) -> Result<()>;
}

impl SaveImage for RgbImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        Ok(self.save(path)?)
    }
}

impl SaveImage for GrayImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        Ok(self.save(path)?)
    }
}

/// Writes the dataset under `root` and returns the category directories.
pub fn generate(root: &Path, spec: &SyntheticSpec) -> Result<Vec<PathBuf>> {
    if spec.categories.is_empty() || spec.train_normals == 0 || spec.test_images == 0 {
        return Err(Error::config(
            "synthetic dataset needs categories and images",
        ));
    }
    if !(0.0..=1.0).contains(&spec.defect_fraction) {
        return Err(Error::config("defect_fraction must lie in [0, 1]"));
    }
    let mut dirs = Vec::new();
    for (ci, cat) in spec.categories.iter().enumerate() {
        let dir = root.join(cat);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(ci as u64 * 7919));
        for i in 0..spec.train_normals {
            let img = normal_image(cat, spec.image_size, &mut rng);
            save(&img, &dir.join(format!("train/good/{i:03}.png")))?;
        }
        let n_bad = (spec.test_images as f64 * spec.defect_fraction).round() as usize;
        for i in 0..spec.test_images - n_bad {
            let img = normal_image(cat, spec.image_size, &mut rng);
            save(&img, &dir.join(format!("test/good/{i:03}.png")))?;
        }
        for i in 0..n_bad {
            let kind = if i % 2 == 0 {
                DefectKind::Square
            } else {
                DefectKind::Blob
            };
            let (img, mask) = defective_image(cat, spec.image_size, kind, &mut rng);
            let d = kind.name();
            save(&img, &dir.join(format!("test/{d}/{i:03}.png")))?;
            save(
                &mask,
                &dir.join(format!("ground_truth/{d}/{i:03}_mask.png")),
            )?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}
