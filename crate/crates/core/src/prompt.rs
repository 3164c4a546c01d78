//! Learnable multi-modal prompt state.
//!
//! At every prompted layer `j` the text tower receives
//! `[P_t[j]; f_v->t(P_v[j])]` and the vision tower receives
//! `[c_view; P_v[j]; f_t->v(P_t[j])]`, where `c_view` is the multi-view signal
//! row for the item's view.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::backbone::{ClipBackbone, PromptHook};
use crate::config::{BackboneConfig, PromptConfig};
use crate::error::{Error, Result};

/// Normal / abnormal text template for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTemplate {
    pub class_name: String,
    pub state_word: String,
}

impl TextTemplate {
    pub fn new(class_name: impl Into<String>) -> Self {
        Self {
            class_name: class_name.into(),
            state_word: "abnormal".into(),
        }
    }

    fn class_words(&self) -> String {
        self.class_name.replace('_', " ")
    }

    /// `"[class]"`
    pub fn normal(&self) -> String {
        self.class_words()
    }

    /// `"[abnormal][class]"`
    pub fn abnormal(&self) -> String {
        format!("{} {}", self.state_word, self.class_words())
    }
}

/// Token ids for every class, normal and abnormal.
#[derive(Debug, Clone)]
pub struct TextInputs {
    pub classes: Vec<String>,
    pub normal: Vec<Vec<u32>>,
    pub abnormal: Vec<Vec<u32>>,
}

pub fn build_text_inputs(backbone: &ClipBackbone, class_names: &[String]) -> Result<TextInputs> {
    if class_names.is_empty() {
        return Err(Error::input("class list is empty"));
    }
    let tok = backbone.tokenizer();
    let mut normal = Vec::with_capacity(class_names.len());
    let mut abnormal = Vec::with_capacity(class_names.len());
    for class in class_names {
        let tpl = TextTemplate::new(class.clone());
        normal.push(tok.encode_prompt(&tpl.normal(), class)?);
        abnormal.push(tok.encode_prompt(&tpl.abnormal(), class)?);
    }
    Ok(TextInputs {
        classes: class_names.to_vec(),
        normal,
        abnormal,
    })
}

/// Linear map `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub weight: Var,
    pub bias: Var,
}

impl Projection {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Pair of coupled blocks for one layer.
#[derive(Debug, Clone)]
pub struct CoupledLayer {
    /// `[C_t + C_v, d_t]`
    pub text: Tensor,
    /// `[C_v + C_t, d_v]`, without the view-signal row.
    pub vision: Tensor,
}

/// All learnable prompt parameters.
#[derive(Debug, Clone)]
pub struct PromptStack {
    config: PromptConfig,
    depth: usize,
    text_dim: usize,
    vision_dim: usize,
    text_ctx: Vec<Var>,
    vision_ctx: Vec<Var>,
    text_to_vision: Projection,
    vision_to_text: Projection,
    signal: Var,
}

fn normal_tensor(
    rng: &mut impl Rng,
    std: f64,
    shape: (usize, usize),
    dtype: DType,
) -> Result<Tensor> {
    let n = shape.0 * shape.1;
    let data: Vec<f64> = if std > 0.0 {
        let d = Normal::new(0.0, std).expect("valid std");
        (0..n).map(|_| d.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

fn linear_default(
    rng: &mut impl Rng,
    input: usize,
    output: usize,
    dtype: DType,
) -> Result<Projection> {
    let bound = 1.0 / (input.max(1) as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    let w: Vec<f64> = (0..input * output).map(|_| u.sample(rng)).collect();
    let b: Vec<f64> = (0..output).map(|_| u.sample(rng)).collect();
    Ok(Projection {
        weight: Var::from_tensor(
            &Tensor::from_vec(w, (output, input), &Device::Cpu)?.to_dtype(dtype)?,
        )?,
        bias: Var::from_tensor(&Tensor::from_vec(b, output, &Device::Cpu)?.to_dtype(dtype)?)?,
    })
}

impl PromptStack {
    /// Context vectors and signal rows ~ N(0, init_std^2); projections use the
    /// usual uniform(+-1/sqrt(fan_in)) linear-layer initialization.
    pub fn new(
        config: &PromptConfig,
        backbone: &BackboneConfig,
        rng: &mut impl Rng,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        backbone.validate()?;
        let (dt, dv, depth) = (
            backbone.text_dim,
            backbone.vision_dim,
            backbone.prompt_depth,
        );
        let std = config.init_std;
        let mut text_ctx = Vec::with_capacity(depth);
        let mut vision_ctx = Vec::with_capacity(depth);
        for _ in 0..depth {
            text_ctx.push(Var::from_tensor(&normal_tensor(
                rng,
                std,
                (config.text_ctx, dt),
                dtype,
            )?)?);
            vision_ctx.push(Var::from_tensor(&normal_tensor(
                rng,
                std,
                (config.vision_ctx, dv),
                dtype,
            )?)?);
        }
        let text_to_vision = linear_default(rng, dt, dv, dtype)?;
        let vision_to_text = linear_default(rng, dv, dt, dtype)?;
        let signal_std = if config.view_signal { std } else { 0.0 };
        let signal = Var::from_tensor(&normal_tensor(
            rng,
            signal_std,
            (config.n_views + 1, dv),
            dtype,
        )?)?;
        let mut stack = Self {
            config: config.clone(),
            depth,
            text_dim: dt,
            vision_dim: dv,
            text_ctx,
            vision_ctx,
            text_to_vision,
            vision_to_text,
            signal,
        };
        if !config.coupling.text_to_vision() {
            stack.zero_projection(true)?;
        }
        if !config.coupling.vision_to_text() {
            stack.zero_projection(false)?;
        }
        Ok(stack)
    }

    fn zero_projection(&mut self, text_to_vision: bool) -> Result<()> {
        let p = if text_to_vision {
            &self.text_to_vision
        } else {
            &self.vision_to_text
        };
        p.weight.set(&p.weight.zeros_like()?)?;
        p.bias.set(&p.bias.zeros_like()?)?;
        Ok(())
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_views(&self) -> usize {
        self.config.n_views
    }

    /// View index of the whole image.
    pub fn whole_view(&self) -> usize {
        self.config.n_views + 1
    }

    /// Parameters that receive gradients. Masked projections and a disabled
    /// view signal are excluded.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::new();
        if self.config.text_ctx > 0 {
            out.extend(self.text_ctx.iter().cloned());
        }
        if self.config.vision_ctx > 0 {
            out.extend(self.vision_ctx.iter().cloned());
        }
        if self.config.coupling.text_to_vision() && self.config.text_ctx > 0 {
            out.push(self.text_to_vision.weight.clone());
            out.push(self.text_to_vision.bias.clone());
        }
        if self.config.coupling.vision_to_text() && self.config.vision_ctx > 0 {
            out.push(self.vision_to_text.weight.clone());
            out.push(self.vision_to_text.bias.clone());
        }
        if self.config.view_signal && self.config.vision_block_rows() > 0 {
            out.push(self.signal.clone());
        }
        out
    }

    /// Every parameter by checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (j, v) in self.text_ctx.iter().enumerate() {
            out.push((format!("prompt.text_ctx.{j}"), v.clone()));
        }
        for (j, v) in self.vision_ctx.iter().enumerate() {
            out.push((format!("prompt.vision_ctx.{j}"), v.clone()));
        }
        out.push((
            "prompt.text_to_vision.weight".into(),
            self.text_to_vision.weight.clone(),
        ));
        out.push((
            "prompt.text_to_vision.bias".into(),
            self.text_to_vision.bias.clone(),
        ));
        out.push((
            "prompt.vision_to_text.weight".into(),
            self.vision_to_text.weight.clone(),
        ));
        out.push((
            "prompt.vision_to_text.bias".into(),
            self.vision_to_text.bias.clone(),
        ));
        out.push(("prompt.signal".into(), self.signal.clone()));
        out
    }

    /// Coupled text and vision blocks for prompted layer `j` (0-based).
    pub fn couple_layer(&self, j: usize) -> Result<CoupledLayer> {
        if j >= self.depth {
            return Err(Error::input(format!(
                "layer {j} outside prompted range [0, {})",
                self.depth
            )));
        }
        let pt = self.text_ctx[j].as_tensor();
        let pv = self.vision_ctx[j].as_tensor();
        let v2t = self.vision_to_text.forward(pv)?;
        let t2v = self.text_to_vision.forward(pt)?;
        Ok(CoupledLayer {
            text: Tensor::cat(&[pt, &v2t], 0)?,
            vision: Tensor::cat(&[pv, &t2v], 0)?,
        })
    }

    /// Prepends the signal row for `view_index` (1-based) to a vision block.
    pub fn attach_view_signal(&self, vision_block: &Tensor, view_index: usize) -> Result<Tensor> {
        if view_index == 0 || view_index > self.config.n_views + 1 {
            return Err(Error::input(format!(
                "view index {view_index} outside [1, {}]",
                self.config.n_views + 1
            )));
        }
        let row = self.signal.as_tensor().narrow(0, view_index - 1, 1)?;
        Ok(Tensor::cat(&[&row, vision_block], 0)?)
    }

    pub fn signal(&self) -> &Tensor {
        self.signal.as_tensor()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.text_dim, self.vision_dim)
    }
}

impl PromptHook for PromptStack {
    fn text_block(&self, layer: usize) -> Result<Option<Tensor>> {
        if layer >= self.depth || self.config.text_block_rows() == 0 {
            return Ok(None);
        }
        Ok(Some(self.couple_layer(layer)?.text))
    }

    fn vision_block(&self, layer: usize, views: &[usize]) -> Result<Option<Tensor>> {
        if layer >= self.depth || self.config.vision_block_rows() == 0 {
            return Ok(None);
        }
        let block = self.couple_layer(layer)?.vision;
        let rows = views
            .iter()
            .map(|&v| self.attach_view_signal(&block, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(Tensor::stack(&rows, 0)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Coupling;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(cfg: PromptConfig) -> PromptStack {
        let bb = BackboneConfig::tiny();
        PromptStack::new(&cfg, &bb, &mut ChaCha8Rng::seed_from_u64(1), DType::F64).unwrap()
    }

    #[test]
    fn templates() {
        let t = TextTemplate::new("bottle");
        assert_eq!(t.normal(), "bottle");
        assert_eq!(t.abnormal(), "abnormal bottle");
        assert_eq!(
            TextTemplate::new("metal_nut").abnormal(),
            "abnormal metal nut"
        );
    }

    #[test]
    fn coupled_shapes_are_layer_independent() {
        let s = stack(PromptConfig::mvtec());
        for j in 0..s.depth() {
            let c = s.couple_layer(j).unwrap();
            assert_eq!(c.text.dims(), &[6, 32]);
            assert_eq!(c.vision.dims(), &[6, 48]);
            let v = s.vision_block(j, &[1, 5]).unwrap().unwrap();
            assert_eq!(v.dims(), &[2, 7, 48]);
        }
        assert!(s.couple_layer(s.depth()).is_err());
        assert!(s.text_block(s.depth()).unwrap().is_none());
    }

    #[test]
    fn view_signal_only_changes_first_row() {
        let s = stack(PromptConfig::mvtec());
        let block = s.couple_layer(0).unwrap().vision;
        let a = s
            .attach_view_signal(&block, 1)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        let b = s
            .attach_view_signal(&block, 5)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_ne!(a[0], b[0]);
        assert_eq!(a[1..], b[1..]);
        assert_eq!(b[0], s.signal().get(4).unwrap().to_vec1::<f64>().unwrap());
        assert!(s.attach_view_signal(&block, 0).is_err());
        assert!(s.attach_view_signal(&block, 6).is_err());
    }

    #[test]
    fn independent_coupling_zeroes_projected_rows() {
        let s = stack(PromptConfig {
            coupling: Coupling::Independent,
            ..PromptConfig::mvtec()
        });
        let c = s.couple_layer(1).unwrap();
        let text = c.text.to_vec2::<f64>().unwrap();
        let vision = c.vision.to_vec2::<f64>().unwrap();
        assert!(text[3..].iter().flatten().all(|&v| v == 0.0));
        assert!(vision[3..].iter().flatten().all(|&v| v == 0.0));
        assert!(text[..3].iter().flatten().any(|&v| v != 0.0));
        assert_eq!(s.trainable().len(), 2 * s.depth() + 1);
    }

    #[test]
    fn one_way_couplings_mask_one_projection() {
        let t2v = stack(PromptConfig {
            coupling: Coupling::TextToVision,
            ..PromptConfig::mvtec()
        });
        let c = t2v.couple_layer(0).unwrap();
        assert!(c.text.to_vec2::<f64>().unwrap()[3..]
            .iter()
            .flatten()
            .all(|&v| v == 0.0));
        assert!(c.vision.to_vec2::<f64>().unwrap()[3..]
            .iter()
            .flatten()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn zero_context_means_no_blocks() {
        let s = stack(PromptConfig {
            text_ctx: 0,
            vision_ctx: 0,
            ..PromptConfig::mvtec()
        });
        assert!(s.text_block(0).unwrap().is_none());
        assert!(s.vision_block(0, &[5]).unwrap().is_none());
        assert!(s.trainable().is_empty());
    }

    #[test]
    fn disabled_signal_is_zero() {
        let s = stack(PromptConfig {
            view_signal: false,
            ..PromptConfig::mvtec()
        });
        let sig = s.signal().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sig.iter().all(|&v| v == 0.0));
    }
}
