//! Training objectives: dice + focal on pixel maps, two-way cross-entropy on
//! global features, and the local-to-global alignment term.
//!
//! All functions operate on candle tensors so they differentiate into the
//! prompt stack and decoder. Batch reductions are means over items.

use candle_core::{Tensor, D};

use crate::backbone::softmax_last_dim;
use crate::config::{AlignTarget, LossConfig};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-6;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `1 - (2 sum(pM) + s) / (sum(p) + sum(M) + s)` per item, averaged.
/// `prob` and `mask` are `[B, h, w]`.
pub fn dice_loss(prob: &Tensor, mask: &Tensor, smooth: f64) -> Result<Tensor> {
    same_shape(prob, mask, "dice")?;
    let b = prob.dim(0)?;
    let p = prob.reshape((b, ()))?;
    let m = mask.reshape((b, ()))?;
    let inter = (p.mul(&m)?.sum(1)? * 2.0)?;
    let denom = ((p.sum(1)? + m.sum(1)?)? + smooth)?;
    let ratio = ((inter + smooth)? / denom)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Focal loss parameters. `alpha = None` means no class balancing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: Option<f64>,
}

impl From<&LossConfig> for FocalParams {
    fn from(c: &LossConfig) -> Self {
        Self {
            gamma: c.focal_gamma,
            alpha: c.focal_alpha,
        }
    }
}

/// Mean over pixels of `-alpha_t (1 - p_t)^gamma log p_t`.
pub fn focal_loss(prob: &Tensor, mask: &Tensor, params: FocalParams) -> Result<Tensor> {
    same_shape(prob, mask, "focal")?;
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    // p_t = M p + (1 - M)(1 - p) = 1 - p - M + 2 p M
    let pt = (((p.mul(mask)? * 2.0)? - &p)? - mask)?.affine(1.0, 1.0)?;
    let one_minus = pt.affine(-1.0, 1.0)?;
    let modulator = if params.gamma == 0.0 {
        None
    } else if params.gamma == 2.0 {
        Some(one_minus.sqr()?)
    } else {
        Some(one_minus.powf(params.gamma)?)
    };
    let mut per_pixel = pt.log()?.neg()?;
    if let Some(m) = modulator {
        per_pixel = per_pixel.mul(&m)?;
    }
    if let Some(alpha) = params.alpha {
        // alpha_t = alpha where M = 1, 1 - alpha where M = 0
        let alpha_t = mask.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
        per_pixel = per_pixel.mul(&alpha_t)?;
    }
    Ok(per_pixel.mean_all()?)
}

/// Logits `[B, 2]` of unit features `z: [B, e]` against `text = [w+; w-]`,
/// scaled by the inverse temperature.
pub fn image_logits(z: &Tensor, text: &Tensor, scale: f64) -> Result<Tensor> {
    Ok((z.matmul(&text.t()?)? * scale)?)
}

/// Two-way softmax probability of the abnormal state, `[B]`.
pub fn image_probability(z: &Tensor, text: &Tensor, scale: f64) -> Result<Tensor> {
    let p = softmax_last_dim(&image_logits(z, text, scale)?)?;
    Ok(p.narrow(1, 1, 1)?.squeeze(1)?)
}

/// Cross-entropy of two-way logits `[B, 2]` against soft abnormal targets,
/// averaged over the batch.
pub fn two_way_cross_entropy(logits: &Tensor, abnormal_target: &[f64]) -> Result<Tensor> {
    let b = logits.dim(0)?;
    if abnormal_target.len() != b {
        return Err(Error::shape(format!(
            "{} targets for {b} logits",
            abnormal_target.len()
        )));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_p = shifted.broadcast_sub(&lse)?;
    let targets: Vec<f64> = abnormal_target.iter().flat_map(|&t| [1.0 - t, t]).collect();
    let targets = Tensor::from_vec(targets, (b, 2), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_p.mul(&targets)?.sum(1)?.neg()?).mean_all()?)
}

/// Abnormal target under two-class label smoothing `eps`: `1 - eps / 2`.
pub fn smoothed_abnormal_target(eps: f64) -> f64 {
    1.0 - eps / 2.0
}

/// `CE([z+, z-]) + CE([z+, z-_latent])` with label smoothing on the latent anomaly.
/// Either anomaly may be absent (ablation), dropping its term.
pub fn image_loss(
    z_normal: &Tensor,
    z_pixel: Option<&Tensor>,
    z_latent: Option<&Tensor>,
    text: &Tensor,
    scale: f64,
    smoothing: f64,
) -> Result<Tensor> {
    let b = z_normal.dim(0)?;
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            Some(acc) => (acc + t)?,
            None => t,
        });
        Ok(())
    };
    if let Some(zp) = z_pixel {
        let z = Tensor::cat(&[z_normal, zp], 0)?;
        let mut targets = vec![0.0; b];
        targets.extend(std::iter::repeat_n(1.0, zp.dim(0)?));
        add(two_way_cross_entropy(
            &image_logits(&z, text, scale)?,
            &targets,
        )?)?;
    }
    if let Some(zl) = z_latent {
        let z = Tensor::cat(&[z_normal, zl], 0)?;
        let mut targets = vec![0.0; b];
        targets.extend(std::iter::repeat_n(
            smoothed_abnormal_target(smoothing),
            zl.dim(0)?,
        ));
        add(two_way_cross_entropy(
            &image_logits(&z, text, scale)?,
            &targets,
        )?)?;
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(z_normal.zeros_like()?.sum_all()?),
    }
}

/// `1 - <z0, s / |s|>` with `s = sum_ij softmax(M_hat / T)_ij D_ij`, averaged.
/// `abnormal_logits: [B, h, w]`, `field: [B, e, h, w]`, `z0: [B, e]`.
/// A zero aggregate counts as orthogonal (loss 1).
pub fn alignment_loss(
    abnormal_logits: &Tensor,
    field: &Tensor,
    z0: &Tensor,
    temperature: f64,
    target: AlignTarget,
) -> Result<Tensor> {
    let (b, e, h, w) = field.dims4()?;
    if abnormal_logits.dims() != [b, h, w] || z0.dims() != [b, e] {
        return Err(Error::shape(format!(
            "alignment: logits {:?}, field {:?}, z0 {:?}",
            abnormal_logits.dims(),
            field.dims(),
            z0.dims()
        )));
    }
    let flat = field.reshape((b, e, h * w))?;
    let s = match target {
        AlignTarget::LogitWeighted => {
            let weights = softmax_last_dim(&(abnormal_logits.reshape((b, h * w))? / temperature)?)?;
            flat.broadcast_mul(&weights.unsqueeze(1)?)?.sum(D::Minus1)?
        }
        AlignTarget::Mean => flat.mean(D::Minus1)?,
    };
    let norm = s.sqr()?.sum_keepdim(1)?.sqrt()?.maximum(1e-12)?;
    let unit = s.broadcast_div(&norm)?;
    let cos = unit.mul(z0)?.sum(1)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// Values of each term of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_pixel: f64,
    pub l_img: f64,
    pub l_align: f64,
    pub l_total: f64,
}

/// Differentiable total together with its per-term values.
pub struct Objective {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

impl Objective {
    pub fn combine(pixel: Tensor, img: Tensor, align: Tensor) -> Result<Self> {
        let (lp, li, la) = (scalar(&pixel)?, scalar(&img)?, scalar(&align)?);
        let total = ((pixel + img)? + align)?;
        Ok(Self {
            breakdown: LossBreakdown {
                l_pixel: lp,
                l_img: li,
                l_align: la,
                l_total: scalar(&total)?,
            },
            total,
        })
    }
}

/// Alignment value for a plain aggregate vector; used by diagnostics and the
/// zero-aggregate convention.
pub fn alignment_from_aggregate(z0: &[f64], s: &[f64]) -> f64 {
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        log::warn!("alignment aggregate is the zero vector; treating as orthogonal");
        return 1.0;
    }
    1.0 - z0.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let m = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(scalar(&dice_loss(&m, &m, 1.0).unwrap()).unwrap(), 0.0);
        let inv = m.affine(-1.0, 1.0).unwrap();
        let d = scalar(&dice_loss(&inv, &m, 1e-9).unwrap()).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        assert!(dice_loss(&m, &t2(&[&[1.0, 0.0, 0.0]]), 1.0).is_err());
    }

    #[test]
    fn focal_vanishes_for_confident_correct_predictions() {
        let m = t2(&[&[1.0, 0.0]]);
        let p = t2(&[&[1.0, 0.0]]);
        let v = scalar(
            &focal_loss(
                &p,
                &m,
                FocalParams {
                    gamma: 2.0,
                    alpha: Some(0.25),
                },
            )
            .unwrap(),
        )
        .unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn equal_similarities_give_half() {
        let z = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let w = Tensor::new(&[[0.6f64, 0.8], [0.6, -0.8]], &Device::Cpu).unwrap();
        let p = image_probability(&z, &w, 100.0)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn alignment_extremes() {
        let field = Tensor::new(&[[[[1.0f64, 1.0]], [[0.0, 0.0]]]], &Device::Cpu).unwrap();
        let logits = Tensor::new(&[[[0.3f64, -0.2]]], &Device::Cpu).unwrap();
        let go = |z: [f64; 2]| {
            let z = Tensor::new(&[z], &Device::Cpu).unwrap();
            scalar(&alignment_loss(&logits, &field, &z, 2.0, AlignTarget::LogitWeighted).unwrap())
                .unwrap()
        };
        assert!(go([1.0, 0.0]).abs() < 1e-15);
        assert!((go([0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert!((go([-1.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_aggregate_is_orthogonal() {
        assert_eq!(alignment_from_aggregate(&[1.0, 0.0], &[0.0, 0.0]), 1.0);
        let field = Tensor::zeros((1, 2, 1, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
        let logits = Tensor::zeros((1, 1, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
        let z = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let v = alignment_loss(&logits, &field, &z, 2.0, AlignTarget::LogitWeighted).unwrap();
        assert_eq!(scalar(&v).unwrap(), 1.0);
    }

    #[test]
    fn breakdown_total_is_exact_sum() {
        let dev = Device::Cpu;
        let o = Objective::combine(
            Tensor::new(0.25f64, &dev).unwrap(),
            Tensor::new(0.5f64, &dev).unwrap(),
            Tensor::new(0.125f64, &dev).unwrap(),
        )
        .unwrap();
        let b = o.breakdown;
        assert_eq!(b.l_total, b.l_pixel + b.l_img + b.l_align);
    }
}
