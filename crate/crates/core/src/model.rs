//! The full pipeline: text and low-resolution image encoders, the attention
//! prompter, and the promptable mask generator.
//!
//! ```text
//! v, t   = encoders(I₁, T)
//! p      = prompter(v, t)
//! logits = generator(I₂, p)
//! ```

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderOutput, MaskGenerator};
use crate::error::{Error, Result};
use crate::lora::{apply_policy, TrainabilityPolicy};
use crate::params::{ParamPartition, ParamStore};
use crate::prompter::{sparse_count, AttendedFeatures, AttnPrompter, PromptBundle};
use crate::text::{TextEncoder, TextEncoderConfig, TextFeatures, TokenizedText};
use crate::vision::{VisionEncoder, VisionEncoderConfig, VisualFeatures};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared text / low-resolution image width (d₁).
    pub d1: usize,
    /// Prompt and mask-generator width (d₂).
    pub d2: usize,
    pub max_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub image_size_low: usize,
    pub patch_low: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub image_size_high: usize,
    pub patch_high: usize,
    pub highres_layers: usize,
    pub highres_heads: usize,
    pub mlp_ratio: usize,
    /// Spatial downsample rate `s` of the sparse-prompt stack.
    pub downsample: usize,
    pub num_mask_tokens: usize,
    pub decoder_rounds: usize,
    pub decoder_heads: usize,
    pub dense_prompt: bool,
}

impl Default for ModelConfig {
    /// Small configuration used by the tests and the synthetic dataset.
    fn default() -> Self {
        Self {
            d1: 64,
            d2: 64,
            max_len: 16,
            text_layers: 2,
            text_heads: 4,
            image_size_low: 64,
            patch_low: 8,
            image_layers: 2,
            image_heads: 4,
            image_size_high: 128,
            patch_high: 16,
            highres_layers: 2,
            highres_heads: 4,
            mlp_ratio: 2,
            downsample: 4,
            num_mask_tokens: 3,
            decoder_rounds: 2,
            decoder_heads: 4,
            dense_prompt: true,
        }
    }
}

impl ModelConfig {
    /// Shape constants of the published model (384/1024 inputs, 16-pixel
    /// patches, `s = 4`) with narrow channel widths.
    pub fn full_scale(d1: usize, d2: usize) -> Self {
        Self {
            d1,
            d2,
            max_len: 16,
            text_layers: 1,
            text_heads: 2,
            image_size_low: 384,
            patch_low: 16,
            image_layers: 1,
            image_heads: 2,
            image_size_high: 1024,
            patch_high: 16,
            highres_layers: 1,
            highres_heads: 2,
            mlp_ratio: 2,
            downsample: 4,
            num_mask_tokens: 3,
            decoder_rounds: 2,
            decoder_heads: 2,
            dense_prompt: true,
        }
    }

    pub fn low_config(&self) -> VisionEncoderConfig {
        VisionEncoderConfig {
            image_size: self.image_size_low,
            patch_size: self.patch_low,
            dim: self.d1,
            layers: self.image_layers,
            heads: self.image_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn high_config(&self) -> VisionEncoderConfig {
        VisionEncoderConfig {
            image_size: self.image_size_high,
            patch_size: self.patch_high,
            dim: self.d2,
            layers: self.highres_layers,
            heads: self.highres_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// `(h₁, h₂, M)`
    pub fn grid_sizes(&self) -> Result<(usize, usize, usize)> {
        let h1 = self.low_config().grid()?;
        let h2 = self.high_config().grid()?;
        let m = sparse_count(h1, h1, self.downsample)?;
        Ok((h1, h2, m))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d1", self.d1),
            ("d2", self.d2),
            ("max_len", self.max_len),
            ("text_heads", self.text_heads),
            ("image_heads", self.image_heads),
            ("highres_heads", self.highres_heads),
            ("decoder_heads", self.decoder_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_mask_tokens", self.num_mask_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.image_size_low >= self.image_size_high {
            return Err(Error::config(format!(
                "low-resolution input {} must be smaller than high-resolution input {}",
                self.image_size_low, self.image_size_high
            )));
        }
        self.grid_sizes()?;
        Ok(())
    }
}

/// What the prompter is told about the expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextConditioning {
    #[default]
    Encoder,
    /// Every text feature replaced by the same constant vector; used to show
    /// that the mask depends on the expression.
    Constant,
}

/// One batch of preprocessed inputs.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `(B, 3, H₁, W₁)`
    pub image_low: Tensor,
    /// `(B, 3, H₂, W₂)`
    pub image_high: Tensor,
    pub tokens: Vec<TokenizedText>,
    /// Ground-truth mask size the logits are resized to.
    pub target: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub text: TextFeatures,
    pub visual: VisualFeatures,
    pub attended: AttendedFeatures,
    pub prompts: PromptBundle,
    /// `(B, d₂, h₂, w₂)` after dense-prompt injection.
    pub embedding: Tensor,
    pub decoded: DecoderOutput,
}

impl ForwardOutput {
    /// `(B, H_gt, W_gt)` logits of the selected mask.
    pub fn logits(&self) -> &Tensor {
        &self.decoded.logits
    }
}

#[derive(Debug, Clone)]
pub struct RefSegModel {
    pub(crate) text: TextEncoder,
    pub(crate) image: VisionEncoder,
    pub(crate) prompter: AttnPrompter,
    pub(crate) generator: MaskGenerator,
    pub(crate) policy_applied: bool,
    cfg: ModelConfig,
    conditioning: TextConditioning,
}

impl RefSegModel {
    /// Builds the unadapted model. Call [`apply_policy`] (or use
    /// [`RefSegModel::build`]) to add adapters.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let (_, h2, _) = cfg.grid_sizes()?;
        let text = TextEncoder::new(
            store,
            "text",
            &TextEncoderConfig {
                vocab_size,
                max_len: cfg.max_len,
                dim: cfg.d1,
                layers: cfg.text_layers,
                heads: cfg.text_heads,
                mlp_ratio: cfg.mlp_ratio,
            },
        )?;
        let image = VisionEncoder::new(store, "image", &cfg.low_config())?;
        if text.dim() != image.dim() {
            return Err(Error::config("text and image encoder widths differ"));
        }
        let prompter = AttnPrompter::new(store, "prompter", cfg.d1, cfg.d2, cfg.downsample, (h2, h2))?;
        let generator = MaskGenerator::new(
            store,
            &cfg.high_config(),
            DecoderConfig {
                dim: cfg.d2,
                heads: cfg.decoder_heads,
                rounds: cfg.decoder_rounds,
                num_mask_tokens: cfg.num_mask_tokens,
                grid: h2,
            },
            cfg.dense_prompt,
        )?;
        Ok(Self {
            text,
            image,
            prompter,
            generator,
            policy_applied: false,
            cfg: cfg.clone(),
            conditioning: TextConditioning::Encoder,
        })
    }

    /// Builds the model and applies `policy`.
    pub fn build(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab_size: usize,
        policy: &TrainabilityPolicy,
    ) -> Result<(Self, ParamPartition)> {
        let mut model = Self::new(store, cfg, vocab_size)?;
        let partition = apply_policy(&mut model, policy, store)?;
        Ok((model, partition))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn image_encoder(&self) -> &VisionEncoder {
        &self.image
    }

    pub fn prompter(&self) -> &AttnPrompter {
        &self.prompter
    }

    pub fn generator(&self) -> &MaskGenerator {
        &self.generator
    }

    pub fn set_conditioning(&mut self, c: TextConditioning) {
        self.conditioning = c;
    }

    pub fn conditioning(&self) -> TextConditioning {
        self.conditioning
    }

    fn conditioned_text(&self, text: &TextFeatures) -> Result<(Tensor, Tensor)> {
        match self.conditioning {
            TextConditioning::Encoder => Ok((text.t_global.clone(), text.t_local.clone())),
            TextConditioning::Constant => {
                let d = self.cfg.d1;
                let value = 1.0 / (d as f64).sqrt();
                let g = text.t_global.ones_like()?.affine(value, 0.0)?;
                let l = text.t_local.ones_like()?.affine(value, 0.0)?;
                Ok((g, l))
            }
        }
    }

    pub fn forward(&self, input: &ModelInput, train: bool) -> Result<ForwardOutput> {
        let b = input.tokens.len();
        if input.image_low.dim(0)? != b || input.image_high.dim(0)? != b {
            return Err(Error::shape(format!(
                "batch of {b} expressions with {} low-res and {} high-res images",
                input.image_low.dim(0)?,
                input.image_high.dim(0)?
            )));
        }
        let text = self.text.encode(&input.tokens)?;
        let visual = self.image.encode(&input.image_low)?;
        let (t_global, t_local) = self.conditioned_text(&text)?;
        let (attended, prompts) =
            self.prompter
                .forward(&visual.v, &t_global, &t_local, &text.pad_mask, train)?;
        let embedding = self.generator.encode_image_highres(&input.image_high)?;
        let embedding = self.generator.inject_dense(&embedding, &prompts.dense)?;
        let decoded = self
            .generator
            .decode(&embedding, &prompts.sparse, input.target)?;
        Ok(ForwardOutput {
            text,
            visual,
            attended,
            prompts,
            embedding,
            decoded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid_sizes().unwrap(), (8, 8, 4));
    }

    #[test]
    fn full_scale_constants() {
        let cfg = ModelConfig::full_scale(16, 16);
        assert_eq!(cfg.grid_sizes().unwrap(), (24, 64, 36));
    }

    #[test]
    fn equal_resolutions_rejected() {
        let cfg = ModelConfig {
            image_size_low: 128,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_forward_shapes() {
        let cfg = ModelConfig {
            d1: 16,
            d2: 16,
            image_size_low: 32,
            patch_low: 4,
            image_size_high: 64,
            patch_high: 8,
            text_layers: 1,
            image_layers: 1,
            highres_layers: 1,
            text_heads: 2,
            image_heads: 2,
            highres_heads: 2,
            decoder_heads: 2,
            max_len: 6,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new(0, DType::F32);
        let tok = crate::text::Tokenizer::from_expressions(["the red circle"], 6).unwrap();
        let (model, _) =
            RefSegModel::build(&mut store, &cfg, tok.vocab_size(), &TrainabilityPolicy {
                rank: 2,
                ..TrainabilityPolicy::default()
            })
            .unwrap();
        let dev = Device::Cpu;
        let input = ModelInput {
            image_low: Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &dev).unwrap(),
            image_high: Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &dev).unwrap(),
            tokens: vec![tok.tokenize("the red circle").unwrap(), tok.tokenize("red").unwrap()],
            target: (50, 50),
        };
        let out = model.forward(&input, false).unwrap();
        assert_eq!(out.visual.v.dims(), &[2, 8, 8, 16]);
        assert_eq!(out.prompts.sparse.dims(), &[2, 4, 16]);
        assert_eq!(out.prompts.dense.dims(), &[2, 8, 8]);
        assert_eq!(out.decoded.candidates.dims(), &[2, 3, 32, 32]);
        assert_eq!(out.logits().dims(), &[2, 50, 50]);
    }
}
