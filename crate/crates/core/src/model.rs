//! The full trainable ensemble: one attention encoder and one projector per
//! tile model, a shared query-side predictor for the contrastive objective,
//! and the cancer/organ heads over the fused representation.

use crate::encoder::{
    encode_bag, fuse, fused_len, AttentionLayout, EncoderParams, PatchBag, SlideRepresentation,
    DEFAULT_MAX_PATCHES,
};
use crate::error::{bail, Result};
use crate::params::{rebuild, Linear, Mlp, ParamTree};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub model_dims: Vec<usize>,
    pub unified_dim: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Defaults to `unified_dim / n_heads`.
    #[serde(default)]
    pub attn_hidden: Option<usize>,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_proj_hidden")]
    pub proj_hidden: usize,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    #[serde(default = "default_proj_hidden")]
    pub pred_hidden: usize,
    pub n_organs: usize,
    #[serde(default = "default_max_patches")]
    pub max_patches: usize,
}

fn default_heads() -> usize {
    8
}
fn default_ln_eps() -> f64 {
    1e-5
}
fn default_proj_hidden() -> usize {
    256
}
fn default_proj_dim() -> usize {
    128
}
fn default_max_patches() -> usize {
    DEFAULT_MAX_PATCHES
}

impl EncoderConfig {
    /// 768-wide unified space with 8 × 96 heads and 20 organ classes.
    pub fn paper(model_dims: Vec<usize>) -> Self {
        Self {
            model_dims,
            unified_dim: 768,
            n_heads: 8,
            attn_hidden: Some(96),
            ln_eps: 1e-5,
            proj_hidden: 256,
            proj_dim: 128,
            pred_hidden: 256,
            n_organs: 20,
            max_patches: DEFAULT_MAX_PATCHES,
        }
    }

    /// Small unified space for synthetic corpora.
    pub fn desk(model_dims: Vec<usize>, unified_dim: usize, n_organs: usize) -> Self {
        Self {
            model_dims,
            unified_dim,
            n_heads: 8,
            attn_hidden: None,
            ln_eps: 1e-5,
            proj_hidden: 64,
            proj_dim: 32,
            pred_hidden: 64,
            n_organs,
            max_patches: DEFAULT_MAX_PATCHES,
        }
    }

    pub fn layout(&self) -> AttentionLayout {
        AttentionLayout {
            unified_dim: self.unified_dim,
            n_heads: self.n_heads,
            attn_hidden: self.attn_hidden.unwrap_or(self.unified_dim / self.n_heads.max(1)),
            ln_eps: self.ln_eps,
        }
    }

    pub fn n_models(&self) -> usize {
        self.model_dims.len()
    }

    pub fn fused_dim(&self) -> usize {
        fused_len(self.unified_dim, &self.model_dims)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().validate()?;
        if self.model_dims.is_empty() || self.model_dims.contains(&0) {
            bail!(Config, "model_dims must be a nonempty list of positive widths");
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 || self.pred_hidden == 0 {
            bail!(Config, "projector and predictor widths must be positive");
        }
        if self.n_organs < 2 {
            bail!(Config, "n_organs must be at least 2");
        }
        if self.max_patches == 0 {
            bail!(Config, "max_patches must be positive");
        }
        Ok(())
    }

    /// Fails unless `bags` holds one bag per configured model with matching widths.
    pub fn check_bags(&self, bags: &[PatchBag]) -> Result<()> {
        let found: Vec<usize> = bags.iter().map(|b| b.dim()).collect();
        if found != self.model_dims {
            bail!(
                Data,
                "incompatible model dims: encoder expects {:?}, found {:?}",
                self.model_dims,
                found
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoders: Vec<EncoderParams<T>>,
    /// Maps each model's unified slide embedding into the shared contrastive space.
    pub projectors: Vec<Mlp<T>>,
    pub predictor: Mlp<T>,
    pub cancer_head: Linear<T>,
    pub organ_head: Linear<T>,
}

impl<T> ModelParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(String, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            encoders: self
                .encoders
                .iter()
                .enumerate()
                .map(|(m, e)| e.map(&format!("enc{m}"), f))
                .collect(),
            projectors: self
                .projectors
                .iter()
                .enumerate()
                .map(|(m, p)| p.map(&format!("projector{m}"), f))
                .collect(),
            predictor: self.predictor.map("predictor", f),
            cancer_head: self.cancer_head.map("cancer_head", f),
            organ_head: self.organ_head.map("organ_head", f),
        }
    }
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let encoders = (0..config.n_models())
            .map(|_| EncoderParams::init(layout, rng))
            .collect::<Result<Vec<_>>>()?;
        let fused = config.fused_dim();
        Ok(Self {
            encoders,
            projectors: (0..config.n_models())
                .map(|_| Mlp::init(rng, config.unified_dim, config.proj_hidden, config.proj_dim))
                .collect(),
            predictor: Mlp::init(rng, config.proj_dim, config.pred_hidden, config.proj_dim),
            cancer_head: Linear::init(rng, fused, 2),
            organ_head: Linear::init(rng, fused, config.n_organs),
        })
    }

    /// Tape handles in [`ParamTree::named`] order, as produced by binding
    /// each tensor of this tree individually.
    pub fn rebind(&self, vars: &[Var]) -> Result<ModelParams<Var>> {
        let n = self.named().len();
        if vars.len() != n {
            bail!(Contract, "expected {} parameter handles, got {}", n, vars.len());
        }
        let mut it = vars.iter().copied();
        Ok(self.map(&mut |_, _| it.next().expect("length checked")))
    }

    /// Encodes every model's bag of one slide and fuses the results.
    pub fn represent(&self, bags: &[PatchBag]) -> Result<SlideRepresentation> {
        if bags.len() != self.encoders.len() {
            bail!(
                Data,
                "slide has {} bags for {} encoders",
                bags.len(),
                self.encoders.len()
            );
        }
        let views = bags
            .iter()
            .zip(&self.encoders)
            .map(|(bag, enc)| encode_bag(bag, enc))
            .collect::<Result<Vec<_>>>()?;
        fuse(views, self.encoders.len())
    }

    /// L2-normalized projection of model `m`'s unified slide embedding.
    pub fn project(&self, m: usize, s_unified: &[f64]) -> Result<Vec<f64>> {
        let Some(proj) = self.projectors.get(m) else {
            bail!(Contract, "no projector for model {}", m);
        };
        let mut tape = Tape::new();
        let p = proj.map("p", &mut |_, t| tape.constant(t.clone()));
        let x = tape.constant(Tensor::matrix(1, s_unified.len(), s_unified.to_vec())?);
        let z = p.forward(&mut tape, x)?;
        let z = tape.l2_normalize_rows(z)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Cancer and organ logits for a fused vector.
    pub fn head_logits(&self, fused: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, fused.len(), fused.to_vec())?);
        let c = self.cancer_head.map("c", &mut |_, t| tape.constant(t.clone()));
        let o = self.organ_head.map("o", &mut |_, t| tape.constant(t.clone()));
        let lc = c.forward(&mut tape, x)?;
        let lo = o.forward(&mut tape, x)?;
        Ok((tape.value(lc).data().to_vec(), tape.value(lo).data().to_vec()))
    }
}

impl ParamTree for ModelParams<Tensor> {
    type Bound = ModelParams<Var>;

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.map(&mut |n, t| out.push((n, t)));
        out
    }

    fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        rebuild(self, tensors, |t, f| t.map(f), &self.named())
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelParams<Var> {
        self.map(&mut |_, t| tape.leaf(t.clone(), requires_grad))
    }

    fn grads_of(bound: &ModelParams<Var>, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        bound.map(&mut |_, v| out.push(grads.tensor(*v)));
        out
    }
}
