use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Additive feature-space noise `epsilon ~ N(mu, sigma^2)`, i.i.d. per element.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPerturbation {
    pub epsilon: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
}

impl LatentPerturbation {
    pub fn sample(dim: usize, mu: f64, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::config(format!(
                "invalid latent noise N({mu}, {sigma}^2)"
            )));
        }
        let epsilon = if sigma == 0.0 {
            vec![mu; dim]
        } else {
            let n = Normal::new(mu, sigma).expect("validated");
            (0..dim).map(|_| n.sample(rng)).collect()
        };
        Ok(Self { epsilon, mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.epsilon.len()
    }
}

/// `z_plus + epsilon` for `z_plus: [e]` or `[1, e]`.
pub fn simulate_latent_anomaly(z_plus: &Tensor, noise: &LatentPerturbation) -> Result<Tensor> {
    let e = *z_plus.dims().last().unwrap_or(&0);
    if e != noise.dim() {
        return Err(Error::shape(format!(
            "noise of width {} for a feature of width {e}",
            noise.dim()
        )));
    }
    let eps = Tensor::from_vec(noise.epsilon.clone(), e, &Device::Cpu)?.to_dtype(z_plus.dtype())?;
    Ok(z_plus.broadcast_add(&eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_identity() {
        let z = Tensor::new(&[0.6f64, 0.8], &Device::Cpu).unwrap();
        let n = LatentPerturbation::sample(2, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = simulate_latent_anomaly(&z, &n).unwrap();
        assert_eq!(out.to_vec1::<f64>().unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn width_mismatch() {
        let z = Tensor::new(&[0.6f64, 0.8], &Device::Cpu).unwrap();
        let n = LatentPerturbation::sample(3, 0.0, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(simulate_latent_anomaly(&z, &n).is_err());
        assert!(
            LatentPerturbation::sample(3, 0.0, -1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err()
        );
    }
}
