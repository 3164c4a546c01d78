//! Light-weight three-convolution decoder from prompted patch tokens to a
//! dense field in the shared text space.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::backbone::softmax_last_dim;
use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::interp::bilinear_matrix;

#[derive(Debug, Clone)]
struct Conv {
    weight: Var,
    bias: Var,
    padding: usize,
}

impl Conv {
    fn new(
        rng: &mut impl Rng,
        input: usize,
        output: usize,
        kernel: usize,
        dtype: DType,
    ) -> Result<Self> {
        let fan_in = (input * kernel * kernel) as f64;
        let bound = fan_in.powf(-0.5);
        let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let w: Vec<f64> = (0..output * input * kernel * kernel)
            .map(|_| u.sample(rng))
            .collect();
        let b: Vec<f64> = (0..output).map(|_| u.sample(rng)).collect();
        Ok(Self {
            weight: Var::from_tensor(
                &Tensor::from_vec(w, (output, input, kernel, kernel), &Device::Cpu)?
                    .to_dtype(dtype)?,
            )?,
            bias: Var::from_tensor(&Tensor::from_vec(b, output, &Device::Cpu)?.to_dtype(dtype)?)?,
            padding: kernel / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, 1, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// 3x3 spatial conv -> 1x1 channel conv -> 1x1 projection to the shared width,
/// GELU between layers.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    in_dim: usize,
    out_dim: usize,
    grid: (usize, usize),
    convs: [Conv; 3],
    upsample: Option<(Tensor, Tensor)>,
}

impl Decoder {
    pub fn new(
        config: &DecoderConfig,
        in_dim: usize,
        out_dim: usize,
        grid: (usize, usize),
        rng: &mut impl Rng,
        dtype: DType,
    ) -> Result<Self> {
        let hidden = config.hidden;
        let convs = [
            Conv::new(rng, in_dim, hidden, 3, dtype)?,
            Conv::new(rng, hidden, hidden, 1, dtype)?,
            Conv::new(rng, hidden, out_dim, 1, dtype)?,
        ];
        let [h, w] = config.map_size;
        let upsample = if (h, w) == grid {
            None
        } else {
            Some((
                bilinear_matrix(grid.0, h, dtype)?,
                bilinear_matrix(grid.1, w, dtype)?.t()?.contiguous()?,
            ))
        };
        Ok(Self {
            config: config.clone(),
            in_dim,
            out_dim,
            grid,
            convs,
            upsample,
        })
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.config.map_size[0], self.config.map_size[1])
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.convs
            .iter()
            .flat_map(|c| [c.weight.clone(), c.bias.clone()])
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Var)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("decoder.conv{}.weight", i + 1), c.weight.clone()),
                    (format!("decoder.conv{}.bias", i + 1), c.bias.clone()),
                ]
            })
            .collect()
    }

    /// `[B, n, d_v]` patch tokens to a `[B, embed, h, w]` field, unit norm per location.
    pub fn decode(&self, patches: &Tensor) -> Result<Tensor> {
        let (b, n, d) = patches.dims3()?;
        let (gh, gw) = self.grid;
        if n != gh * gw {
            return Err(Error::shape(format!(
                "{n} patch tokens do not form a {gh}x{gw} grid"
            )));
        }
        if d != self.in_dim {
            return Err(Error::shape(format!(
                "decoder expects width {}, got {d}",
                self.in_dim
            )));
        }
        let mut x = patches.transpose(1, 2)?.reshape((b, d, gh, gw))?;
        if let Some((rows, cols_t)) = &self.upsample {
            x = rows.broadcast_matmul(&x)?.broadcast_matmul(cols_t)?;
        }
        let x = self.convs[0].forward(&x)?.gelu_erf()?;
        let x = self.convs[1].forward(&x)?.gelu_erf()?;
        let x = self.convs[2].forward(&x)?;
        let norm = x.sqr()?.sum_keepdim(1)?.sqrt()?;
        Ok(x.broadcast_div(&norm)?)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Cosine logits `[B, 2, h, w]` of a unit field against `text = [w_normal; w_abnormal]`.
pub fn pixel_logits(field: &Tensor, text: &Tensor) -> Result<Tensor> {
    let (b, e, h, w) = field.dims4()?;
    let (states, te) = text.dims2()?;
    if te != e || states != 2 {
        return Err(Error::shape(format!(
            "text features {:?} incompatible with field width {e}",
            text.dims()
        )));
    }
    let flat = field.reshape((b, e, h * w))?;
    Ok(text.broadcast_matmul(&flat)?.reshape((b, 2, h, w))?)
}

/// Abnormal-channel probability `[B, h, w]` of a two-way softmax over
/// `scale * logits`.
pub fn abnormal_probability(logits: &Tensor, scale: f64) -> Result<Tensor> {
    let (b, _, h, w) = logits.dims4()?;
    let scaled = (logits * scale)?.reshape((b, 2, h * w))?.transpose(1, 2)?;
    let p = softmax_last_dim(&scaled.contiguous()?)?;
    Ok(p.narrow(D::Minus1, 1, 1)?.reshape((b, h, w))?)
}
