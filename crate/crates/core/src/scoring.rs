//! Harmonic fusion of anomaly maps and the image-level score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs to the harmonic combinations are clamped to at least this value.
pub const FUSION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Decoder,
    Memory,
    Fused,
}

/// Dense row-major `h x w` anomaly heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

impl AnomalyMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            provenance,
        })
    }

    pub fn max(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn resized(&self, height: usize, width: usize) -> AnomalyMap {
        AnomalyMap {
            height,
            width,
            values: crate::interp::resize_map(&self.values, self.height, self.width, height, width),
            provenance: self.provenance,
        }
    }
}

/// `1 / (1/a + 1/b)` after clamping both inputs to `[eps, inf)`.
pub fn harmonic(a: f64, b: f64) -> f64 {
    let a = a.max(FUSION_EPS);
    let b = b.max(FUSION_EPS);
    a * b / (a + b)
}

/// Elementwise harmonic fusion of a decoder map and a memory map.
pub fn fuse_maps(decoder: &AnomalyMap, memory: &AnomalyMap) -> Result<AnomalyMap> {
    if (decoder.height, decoder.width) != (memory.height, memory.width) {
        return Err(Error::shape(format!(
            "cannot fuse {}x{} with {}x{}",
            decoder.height, decoder.width, memory.height, memory.width
        )));
    }
    let values = decoder
        .values
        .iter()
        .zip(&memory.values)
        .map(|(&a, &b)| harmonic(a as f64, b as f64) as f32)
        .collect();
    AnomalyMap::new(decoder.height, decoder.width, values, Provenance::Fused)
}

/// `1 / (1/p + 1/max(M))`.
pub fn image_score(p_hat: f64, map: &AnomalyMap) -> Result<f64> {
    if map.values.is_empty() {
        return Err(Error::input("anomaly map is empty"));
    }
    Ok(harmonic(p_hat, map.max() as f64))
}

/// Result for one query image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub image_id: String,
    pub score: f64,
    /// Global abnormal probability from the prompted encoders.
    pub p_hat: f64,
    pub map_max: f64,
    #[serde(skip)]
    pub map: Option<AnomalyMap>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f32]) -> AnomalyMap {
        AnomalyMap::new(1, v.len(), v.to_vec(), Provenance::Decoder).unwrap()
    }

    #[test]
    fn direct_substitution_cases() {
        assert_eq!(harmonic(0.5, 0.5), 0.25);
        assert_eq!(harmonic(1.0, 1.0), 0.5);
        assert_eq!(image_score(1.0, &map(&[0.2, 1.0])).unwrap(), 0.5);
        let x = 0.3;
        assert!((harmonic(x, x) - x / 2.0).abs() < 1e-15);
    }

    #[test]
    fn either_input_can_veto() {
        let v = harmonic(0.0, 0.8);
        assert!(v <= FUSION_EPS);
        assert!((v - FUSION_EPS * 0.8 / (FUSION_EPS + 0.8)).abs() < 1e-18);
    }

    #[test]
    fn fusion_shapes_must_match() {
        let a = map(&[0.5, 0.5]);
        let b = AnomalyMap::new(2, 1, vec![0.5, 0.5], Provenance::Memory).unwrap();
        assert!(fuse_maps(&a, &b).is_err());
        let fused = fuse_maps(&a, &map(&[0.5, 1.0])).unwrap();
        assert_eq!(fused.provenance, Provenance::Fused);
        assert_eq!(fused.values[0], 0.25);
    }

    #[test]
    fn empty_map_rejected() {
        let m = AnomalyMap::new(0, 0, vec![], Provenance::Fused).unwrap();
        assert!(image_score(0.5, &m).is_err());
    }
}
