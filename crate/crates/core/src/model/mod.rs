//! A small pre-norm decoder-only transformer.
//!
//! Architecture per block, on the residual stream `x`:
//!
//! ```text
//! x = x + Wo · attn(rope(Wq · rms(x)), rope(Wk · rms(x)), Wv · rms(x))
//! x = x + W2 · gelu(W1 · rms(x))
//! ```
//!
//! with RMS normalization carrying a learned gain and no biases anywhere.
//! The residual entering block `l` is "layer boundary `l`"; boundary
//! `n_layers` is the input to the final normalization. All interventions
//! act on these boundary vectors.
//!
//! Parameters live in one flat buffer whose order is also the checkpoint
//! order (see [`ParamLayout`]).

mod backward;
mod checkpoint;
mod forward;

use std::ops::Range;

use rand::Rng;
use rand_distr_free::standard_normal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Scalar;
use crate::seed::rng_from_seed;

pub use backward::{Gradients, LossOutput, TrainExample};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    argmax, ActivationTrace, AddDelta, ForwardOutput, Intervention, LogitRows, PatchFreeze, SeqRequest,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rotary_base: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 599,
            d_model: 128,
            n_layers: 8,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 64,
            rotary_base: 10_000.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(LabError::Config(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("vocab_size, d_model, n_heads and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return err("d_model must be divisible by n_heads");
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return err("head dimension must be even for rotary encoding");
        }
        if self.max_seq_len == 0 {
            return err("max_seq_len must be positive");
        }
        if !(self.rotary_base > 1.0) {
            return err("rotary_base must exceed 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.d_ff, self.n_layers);
        v * d + l * (4 * d * d + 2 * d * f + 2 * d) + d + d * v
    }
}

/// Offsets of one block's tensors in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub attn_norm: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ff_norm: Range<usize>,
    pub w1: Range<usize>,
    pub w2: Range<usize>,
}

/// Broad tensor families, used for initialization and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamFamily {
    Embedding,
    Attention,
    FeedForward,
    Norm,
    Unembedding,
}

/// Flat layout, in checkpoint order: embedding `[V×d]`, then per layer
/// `attn_norm [d]`, `wq`, `wk`, `wv`, `wo` `[d×d]`, `ff_norm [d]`,
/// `w1 [d×d_ff]`, `w2 [d_ff×d]`; then `final_norm [d]` and `unembed [d×V]`.
/// Matrices are row-major with inputs along rows (`y = x W`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub embed: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub final_norm: Range<usize>,
    pub unembed: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let embed = take(v * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                attn_norm: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ff_norm: take(d),
                w1: take(d * f),
                w2: take(f * d),
            })
            .collect();
        let final_norm = take(d);
        let unembed = take(d * v);
        ParamLayout {
            embed,
            layers,
            final_norm,
            unembed,
            total: at,
        }
    }

    /// Every named tensor with its family, in buffer order.
    pub fn tensors(&self) -> Vec<(String, ParamFamily, Range<usize>)> {
        use ParamFamily::*;
        let mut out = vec![("embed".to_string(), Embedding, self.embed.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), Norm, l.attn_norm.clone()));
            out.push((format!("layers.{i}.wq"), Attention, l.wq.clone()));
            out.push((format!("layers.{i}.wk"), Attention, l.wk.clone()));
            out.push((format!("layers.{i}.wv"), Attention, l.wv.clone()));
            out.push((format!("layers.{i}.wo"), Attention, l.wo.clone()));
            out.push((format!("layers.{i}.ff_norm"), Norm, l.ff_norm.clone()));
            out.push((format!("layers.{i}.w1"), FeedForward, l.w1.clone()));
            out.push((format!("layers.{i}.w2"), FeedForward, l.w2.clone()));
        }
        out.push(("final_norm".to_string(), Norm, self.final_norm.clone()));
        out.push(("unembed".to_string(), Unembedding, self.unembed.clone()));
        out
    }

    /// Flat indices belonging to a family.
    pub fn family_indices(&self, family: ParamFamily) -> Vec<usize> {
        self.tensors()
            .into_iter()
            .filter(|(_, f, _)| *f == family)
            .flat_map(|(_, _, r)| r)
            .collect()
    }
}

/// Model parameters in a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `cfg.init_seed`: normal weights with
    /// std 0.02, output projections (`wo`, `w2`) further scaled by
    /// `1/sqrt(2 n_layers)`, normalization gains at 1.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut params = vec![T::ZERO; layout.total];
        let mut rng = rng_from_seed(cfg.init_seed);
        let base = 0.02;
        let out_scale = base / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let mut fill = |r: &Range<usize>, std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            for p in &mut params[r.clone()] {
                *p = T::from_f64(std * standard_normal(rng));
            }
        };
        fill(&layout.embed, base, &mut rng);
        for l in &layout.layers {
            fill(&l.wq, base, &mut rng);
            fill(&l.wk, base, &mut rng);
            fill(&l.wv, base, &mut rng);
            fill(&l.wo, out_scale, &mut rng);
            fill(&l.w1, base, &mut rng);
            fill(&l.w2, out_scale, &mut rng);
        }
        fill(&layout.unembed, base, &mut rng);
        for r in layout
            .layers
            .iter()
            .flat_map(|l| [l.attn_norm.clone(), l.ff_norm.clone()])
            .chain([layout.final_norm.clone()])
        {
            params[r].fill(T::ONE);
        }
        Ok(Model {
            cfg,
            layout,
            params,
        })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        if params.len() != layout.total {
            return Err(LabError::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Model {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.to_f64())).collect(),
        }
    }

    /// Embedding row of a token.
    pub fn embedding(&self, token: u32) -> &[T] {
        let d = self.cfg.d_model;
        let start = self.layout.embed.start + token as usize * d;
        &self.params[start..start + d]
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }
}

/// Box-Muller normal sampling from a uniform stream.
mod rand_distr_free {
    use rand::Rng;

    pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        // u1 in (0, 1] avoids ln(0).
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Draws `n` standard-normal values scaled by `std`.
pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * standard_normal(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 37,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 32,
            rotary_base: 10_000.0,
            init_seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::<f32>::init(small()).unwrap();
        let b = Model::<f32>::init(small()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::<f32>::init(ModelConfig {
            init_seed: 4,
            ..small()
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn norm_gains_start_at_one() {
        let m = Model::<f32>::init(ModelConfig::default()).unwrap();
        for i in m.layout().family_indices(ParamFamily::Norm) {
            assert_eq!(m.params()[i], 1.0);
        }
    }

    #[test]
    fn default_parameter_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let m = Model::<f32>::init(cfg.clone()).unwrap();
        let (v, d, f) = (599usize, 128usize, 512usize);
        let expected = v * d + 8 * (4 * d * d + 2 * d * f + 2 * d) + d + d * v;
        assert_eq!(m.param_count(), expected);
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(m.layout().total, expected);
    }

    #[test]
    fn init_scales_follow_recipe() {
        let m = Model::<f64>::init(ModelConfig::default()).unwrap();
        let std_of = |r: &Range<usize>| {
            let xs = &m.params()[r.clone()];
            (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let l = &m.layout().layers[0];
        assert!((std_of(&m.layout().embed) - 0.02).abs() < 0.001);
        assert!((std_of(&l.wq) - 0.02).abs() < 0.001);
        assert!((std_of(&l.wo) - 0.02 / 4.0).abs() < 0.0005);
        assert!((std_of(&l.w2) - 0.02 / 4.0).abs() < 0.0005);
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::<f32>::init(cfg), Err(LabError::Config(_))));
    }
}
