//! MVTec-AD style directory layout:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect or good>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png   (or <stem>.png)
//! ```
//!
//! VisA converted to the same split layout is read identically.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::is_image_file;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSample {
    pub path: PathBuf,
    /// Defect type, `"good"` for normal samples.
    pub defect: String,
    pub mask: Option<PathBuf>,
}

impl TestSample {
    pub fn is_anomalous(&self) -> bool {
        self.defect != "good"
    }

    /// `<category>/<defect>/<file stem>`.
    pub fn id(&self, category: &str) -> String {
        let stem = self
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{category}/{}/{stem}", self.defect)
    }
}

#[derive(Debug, Clone)]
pub struct Category {
    pub name: String,
    pub train_good: Vec<PathBuf>,
    pub test: Vec<TestSample>,
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| ingestion(dir, e.to_string()))?;
    let mut out = rd
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| ingestion(dir, e.to_string()))?;
    out.sort();
    Ok(out)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image_file(p))
        .collect())
}

fn find_mask(gt_dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "bmp"]
        .iter()
        .flat_map(|ext| {
            [
                gt_dir.join(format!("{stem}_mask.{ext}")),
                gt_dir.join(format!("{stem}.{ext}")),
            ]
        })
        .find(|p| p.is_file())
}

impl Category {
    pub fn discover(root: &Path, name: &str) -> Result<Self> {
        let dir = root.join(name);
        let train_dir = dir.join("train").join("good");
        if !train_dir.is_dir() {
            return Err(ingestion(&train_dir, "missing train/good directory"));
        }
        let train_good = images_in(&train_dir)?;
        if train_good.is_empty() {
            return Err(ingestion(&train_dir, "no normal training images"));
        }
        let test_dir = dir.join("test");
        if !test_dir.is_dir() {
            return Err(ingestion(&test_dir, "missing test directory"));
        }
        let mut test = Vec::new();
        for defect_dir in sorted_entries(&test_dir)?
            .into_iter()
            .filter(|p| p.is_dir())
        {
            let defect = defect_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let gt_dir = dir.join("ground_truth").join(&defect);
            for path in images_in(&defect_dir)? {
                let mask = if defect == "good" {
                    None
                } else {
                    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                    Some(find_mask(&gt_dir, &stem).ok_or_else(|| {
                        ingestion(&gt_dir, format!("no ground-truth mask for {stem}"))
                    })?)
                };
                test.push(TestSample {
                    path,
                    defect: defect.clone(),
                    mask,
                });
            }
        }
        if test.is_empty() {
            return Err(ingestion(&test_dir, "no test images"));
        }
        Ok(Self {
            name: name.to_string(),
            train_good,
            test,
        })
    }

    /// `k` distinct training images, uniform without replacement.
    pub fn sample_shots(&self, k: usize, seed: u64) -> Result<Vec<PathBuf>> {
        if k == 0 || k > self.train_good.len() {
            return Err(Error::config(format!(
                "cannot draw {k} shots from {} normal images of {}",
                self.train_good.len(),
                self.name
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.train_good.len(), k).into_vec();
        picked.sort_unstable();
        Ok(picked
            .into_iter()
            .map(|i| self.train_good[i].clone())
            .collect())
    }
}

/// Category directories under `root` (those holding `train/good`), sorted.
pub fn list_categories(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(ingestion(root, "dataset root is not a directory"));
    }
    let cats: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.join("train").join("good").is_dir())
        .filter_map(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    if cats.is_empty() {
        return Err(ingestion(root, "no category directories with train/good"));
    }
    Ok(cats)
}

/// Loads the requested categories, or every discovered one when `names` is empty.
pub fn discover(root: &Path, names: &[String]) -> Result<Vec<Category>> {
    let names = if names.is_empty() {
        list_categories(root)?
    } else {
        names.to_vec()
    };
    names.iter().map(|n| Category::discover(root, n)).collect()
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| ingestion(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| ingestion(path, e.to_string()))?
        .decode()
        .map_err(|e| ingestion(path, e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn load_mask(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| ingestion(path, e.to_string()))?;
    Ok(img.to_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_png(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::new(4, 4).save(path).unwrap();
    }

    #[test]
    fn discovers_layout_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch_png(&root.join("wood/train/good/000.png"));
        touch_png(&root.join("wood/train/good/001.png"));
        touch_png(&root.join("wood/test/good/000.png"));
        touch_png(&root.join("wood/test/scratch/000.png"));
        touch_png(&root.join("wood/ground_truth/scratch/000_mask.png"));
        let cats = discover(root, &[]).unwrap();
        assert_eq!(cats.len(), 1);
        let c = &cats[0];
        assert_eq!(c.train_good.len(), 2);
        assert_eq!(c.test.len(), 2);
        assert_eq!(c.test.iter().filter(|t| t.is_anomalous()).count(), 1);
        assert_eq!(c.test[1].id("wood"), "wood/scratch/000");
        let a = c.sample_shots(1, 3).unwrap();
        assert_eq!(a, c.sample_shots(1, 3).unwrap());
        assert!(c.sample_shots(3, 0).is_err());
    }

    #[test]
    fn missing_category_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = Category::discover(dir.path(), "nope").unwrap_err();
        match err {
            Error::Ingestion { path, .. } => assert!(path.ends_with("nope/train/good")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_mask_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch_png(&root.join("c/train/good/0.png"));
        touch_png(&root.join("c/test/hole/0.png"));
        assert!(matches!(
            Category::discover(root, "c"),
            Err(Error::Ingestion { .. })
        ));
    }
}
