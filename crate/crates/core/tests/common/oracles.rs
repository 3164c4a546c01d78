//! Independent reference implementations, deliberately naive.

/// AUROC by counting every positive/negative pair, ties worth one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins2 = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins2 += 2;
            } else if scores[i] == scores[j] {
                wins2 += 1;
            }
        }
    }
    wins2 as f64 / (2 * pos * neg) as f64
}

/// `(1 - max_r <q, r>) / 2` for every query row, by exhaustive scan in f64.
pub fn brute_force_memory(queries: &[f32], bank: &[f32], dim: usize) -> Vec<f64> {
    queries
        .chunks(dim)
        .map(|q| {
            let best = bank
                .chunks(dim)
                .map(|r| {
                    q.iter()
                        .zip(r)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            ((1.0 - best) / 2.0).clamp(0.0, 1.0)
        })
        .collect()
}

/// Rows of unit length drawn from a Gaussian.
pub fn unit_rows(n: usize, dim: usize, rng: &mut impl rand::Rng) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        out.extend(v.iter().map(|x| (x / norm) as f32));
    }
    out
}

/// The harmonic combination written out as reciprocals.
pub fn reciprocal_harmonic(a: f64, b: f64) -> f64 {
    1.0 / (1.0 / a + 1.0 / b)
}
