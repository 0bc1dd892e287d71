//! Low-rank adapters on frozen linear maps: `W* = W + A·Bᵀ`.
//!
//! There is no `alpha / r` scale. `A` starts from N(0, 0.02²) and `B` from
//! zero, so a freshly wrapped layer computes exactly what the base layer
//! computes.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RefSegModel;
use crate::nn::{join, EncoderBlock, Linear};
use crate::params::{Init, ParamKind, ParamPartition, ParamStore};

pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Trainable low-rank pair for a `d_out × d_in` weight.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    /// `d_out × r`
    pub a: Tensor,
    /// `d_in × r`
    pub b: Tensor,
    pub rank: usize,
}

impl LowRankAdapter {
    pub fn num_params(&self) -> usize {
        self.a.elem_count() + self.b.elem_count()
    }

    /// `A·Bᵀ`, the dense weight update.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.a.matmul(&self.b.t()?)?)
    }
}

/// A linear layer that may carry a low-rank adapter.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    base: Linear,
    adapter: Option<LowRankAdapter>,
}

impl LoraLinear {
    pub fn plain(base: Linear) -> Self {
        Self {
            base,
            adapter: None,
        }
    }

    pub fn base(&self) -> &Linear {
        &self.base
    }

    pub fn adapter(&self) -> Option<&LowRankAdapter> {
        self.adapter.as_ref()
    }

    pub fn is_adapted(&self) -> bool {
        self.adapter.is_some()
    }

    /// `x·Wᵀ + bias + (x·B)·Aᵀ`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            None => Ok(y),
            Some(ad) => {
                let low = x.broadcast_matmul(&ad.b)?;
                Ok((y + low.broadcast_matmul(&ad.a.t()?)?)?)
            }
        }
    }

    /// Builds the adapter for this layer in place.
    pub fn adapt(&mut self, store: &mut ParamStore, prefix: &str, rank: usize) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::config(format!("{prefix} already carries an adapter")));
        }
        let wrapped = wrap_linear(store, prefix, self.base.clone(), rank)?;
        *self = wrapped;
        Ok(())
    }
}

/// Wraps `layer` with a rank-`rank` adapter registered under `prefix`.
pub fn wrap_linear(
    store: &mut ParamStore,
    prefix: &str,
    layer: Linear,
    rank: usize,
) -> Result<LoraLinear> {
    let (d_out, d_in) = (layer.out_dim(), layer.in_dim());
    let limit = d_out.min(d_in);
    if rank == 0 || rank >= limit {
        return Err(Error::config(format!(
            "adapter rank {rank} for {prefix} must be in 1..{limit} (layer is {d_out}x{d_in})"
        )));
    }
    if rank * 4 > limit {
        log::warn!("adapter rank {rank} for {prefix} exceeds a quarter of dim {limit}");
    }
    let a = store.get_or_init(
        &join(prefix, "lora_a"),
        &[d_out, rank],
        Init::Normal {
            std: ADAPTER_INIT_STD,
        },
        ParamKind::Trainable,
    )?;
    let b = store.get_or_init(
        &join(prefix, "lora_b"),
        &[d_in, rank],
        Init::Zeros,
        ParamKind::Trainable,
    )?;
    Ok(LoraLinear {
        base: layer,
        adapter: Some(LowRankAdapter { a, b, rank }),
    })
}

/// Dense `W + A·Bᵀ`.
pub fn merge(layer: &LoraLinear) -> Result<Tensor> {
    let w = layer.base.weight().clone();
    match &layer.adapter {
        None => Ok(w),
        Some(ad) => Ok((w + ad.delta()?)?),
    }
}

/// The equivalent plain layer with the adapter folded into the weight.
pub fn merged_linear(layer: &LoraLinear) -> Result<Linear> {
    Ok(Linear::from_parts(
        merge(layer)?,
        layer.base.bias().cloned(),
    ))
}

/// Copy of `model` with every adapter folded into its base weight.
pub fn merge_model(model: &RefSegModel) -> Result<RefSegModel> {
    let mut merged = model.clone();
    let blocks = merged
        .text
        .blocks
        .iter_mut()
        .chain(merged.image.blocks.iter_mut())
        .chain(merged.generator.encoder.blocks.iter_mut());
    for block in blocks {
        for (_, proj) in block.attn.projections_mut() {
            if proj.is_adapted() {
                *proj = LoraLinear::plain(merged_linear(proj)?);
            }
        }
    }
    Ok(merged)
}

/// How many text-encoder layers receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextLoraDepth {
    Zero,
    Half,
    Full,
}

impl TextLoraDepth {
    pub const ALL: [TextLoraDepth; 3] = [TextLoraDepth::Zero, TextLoraDepth::Half, TextLoraDepth::Full];

    /// Number of leading layers (out of `num_layers`) that get adapters.
    pub fn adapted_layers(self, num_layers: usize) -> usize {
        match self {
            TextLoraDepth::Zero => 0,
            TextLoraDepth::Half => num_layers.div_ceil(2),
            TextLoraDepth::Full => num_layers,
        }
    }
}

impl fmt::Display for TextLoraDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextLoraDepth::Zero => "zero",
            TextLoraDepth::Half => "half",
            TextLoraDepth::Full => "full",
        })
    }
}

impl FromStr for TextLoraDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(TextLoraDepth::Zero),
            "half" => Ok(TextLoraDepth::Half),
            "full" => Ok(TextLoraDepth::Full),
            other => Err(Error::config(format!(
                "unknown text adapter scope {other:?} (expected zero, half or full)"
            ))),
        }
    }
}

/// Which parts of the model receive adapters or train outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainabilityPolicy {
    pub rank: usize,
    pub text_lora_depth: TextLoraDepth,
    pub image_lora: bool,
    pub highres_lora: bool,
    pub decoder_trainable: bool,
}

impl Default for TrainabilityPolicy {
    fn default() -> Self {
        Self {
            rank: 16,
            text_lora_depth: TextLoraDepth::Full,
            image_lora: true,
            highres_lora: true,
            decoder_trainable: true,
        }
    }
}

fn adapt_blocks(
    store: &mut ParamStore,
    prefix: &str,
    blocks: &mut [EncoderBlock],
    count: usize,
    rank: usize,
) -> Result<()> {
    for (i, block) in blocks.iter_mut().take(count).enumerate() {
        for (name, proj) in block.attn.projections_mut() {
            proj.adapt(store, &format!("{prefix}.blocks.{i}.attn.{name}"), rank)?;
        }
    }
    Ok(())
}

/// Inserts adapters according to `policy` and returns the resulting
/// `{frozen, trainable}` partition. Encoder base weights are always frozen.
pub fn apply_policy(
    model: &mut RefSegModel,
    policy: &TrainabilityPolicy,
    store: &mut ParamStore,
) -> Result<ParamPartition> {
    if model.policy_applied {
        return Err(Error::config("trainability policy already applied"));
    }
    let text_layers = model.text.blocks.len();
    adapt_blocks(
        store,
        "text",
        &mut model.text.blocks,
        policy.text_lora_depth.adapted_layers(text_layers),
        policy.rank,
    )?;
    if policy.image_lora {
        let n = model.image.blocks.len();
        adapt_blocks(store, "image", &mut model.image.blocks, n, policy.rank)?;
    }
    if policy.highres_lora {
        let n = model.generator.encoder.blocks.len();
        adapt_blocks(
            store,
            "highres",
            &mut model.generator.encoder.blocks,
            n,
            policy.rank,
        )?;
    }
    if !policy.decoder_trainable {
        store.freeze_prefix("decoder.")?;
    }
    model.policy_applied = true;
    Ok(store.partition())
}
