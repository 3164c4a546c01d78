//! Rank-based AUROC with ties counted one half.

use crate::error::{Error, Result};

/// Twice the Mann-Whitney U statistic and the class counts. Integer-valued,
/// so any two exact methods agree bit-for-bit once divided.
fn doubled_u<T: PartialOrd + Copy>(mut pairs: Vec<(T, bool)>) -> Result<(u128, u64, u64)> {
    if pairs.iter().any(|(s, _)| s.partial_cmp(s).is_none()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN"));
    let (mut u2, mut neg_below, mut pos_total) = (0u128, 0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        u2 += 2 * pos as u128 * neg_below as u128 + pos as u128 * neg as u128;
        neg_below += neg;
        pos_total += pos;
        i = j;
    }
    Ok((u2, pos_total, neg_below))
}

fn finish(u2: u128, pos: u64, neg: u64) -> Result<f64> {
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "AUROC needs both classes (positives: {pos}, negatives: {neg})"
        )));
    }
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Probability that a random positive outranks a random negative.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pairs = scores.iter().copied().zip(labels.iter().copied()).collect();
    let (u2, p, n) = doubled_u(pairs)?;
    finish(u2, p, n)
}

/// AUROC over all pixels of all maps pooled together.
pub fn pixel_auroc(maps: &[&[f32]], masks: &[&[bool]]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let total: usize = maps.iter().map(|m| m.len()).sum();
    let mut pairs = Vec::with_capacity(total);
    for (m, k) in maps.iter().zip(masks) {
        if m.len() != k.len() {
            return Err(Error::shape(format!(
                "map of {} pixels vs mask of {}",
                m.len(),
                k.len()
            )));
        }
        pairs.extend(m.iter().copied().zip(k.iter().copied()));
    }
    let (u2, p, n) = doubled_u(pairs)?;
    if p == 0 {
        return Err(Error::Metric("no defective pixels in the test set".into()));
    }
    finish(u2, p, n)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_and_constant() {
        assert_eq!(
            auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(Error::Metric(_))
        ));
        assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn pixel_variants() {
        let map = [0.0f32, 1.0, 1.0, 0.0];
        let mask = [false, true, true, false];
        assert_eq!(pixel_auroc(&[&map], &[&mask]).unwrap(), 1.0);
        let flat = [0.3f32; 4];
        assert_eq!(pixel_auroc(&[&flat], &[&mask]).unwrap(), 0.5);
        let none = [false; 4];
        assert!(matches!(
            pixel_auroc(&[&map], &[&none]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn mean_std_sample_convention() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
