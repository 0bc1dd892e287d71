//! Patch-based transformer image encoder that keeps the spatial grid.
//!
//! Used twice: on the low-resolution image (producing `v`) and on the
//! high-resolution image (producing the mask generator's embedding).

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{join, EncoderBlock, LayerNorm};
use crate::params::{Init, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VisionEncoderConfig {
    pub fn grid(&self) -> Result<usize> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(self.image_size / self.patch_size)
    }
}

/// Visual feature map `v`, stored `(B, h, w, d)`.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub v: Tensor,
}

impl VisualFeatures {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.v.dims4()?)
    }

    /// `(B, h·w, d)`, row-major over the grid.
    pub fn tokens(&self) -> Result<Tensor> {
        let (b, h, w, d) = self.v.dims4()?;
        Ok(self.v.reshape((b, h * w, d))?)
    }

    /// `(B, d, h, w)`
    pub fn channels_first(&self) -> Result<Tensor> {
        Ok(self.v.permute((0, 3, 1, 2))?)
    }
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    patch_weight: Tensor,
    patch_bias: Tensor,
    position_embedding: Tensor,
    pub(crate) blocks: Vec<EncoderBlock>,
    ln_post: LayerNorm,
    patch_size: usize,
    grid: usize,
    dim: usize,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &VisionEncoderConfig) -> Result<Self> {
        let grid = cfg.grid()?;
        let kind = ParamKind::Frozen;
        let p = cfg.patch_size;
        let patch_weight = store.get_or_init(
            &join(prefix, "patch.weight"),
            &[cfg.dim, 3, p, p],
            Init::fan_in(3 * p * p),
            kind,
        )?;
        let patch_bias =
            store.get_or_init(&join(prefix, "patch.bias"), &[cfg.dim], Init::Zeros, kind)?;
        let position_embedding = store.get_or_init(
            &join(prefix, "pos"),
            &[grid * grid, cfg.dim],
            Init::Normal { std: 0.1 },
            kind,
        )?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("{prefix}.blocks.{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    kind,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_weight,
            patch_bias,
            position_embedding,
            blocks,
            ln_post: LayerNorm::new(store, &join(prefix, "ln_post"), cfg.dim, kind)?,
            patch_size: p,
            grid,
            dim: cfg.dim,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    /// `images (B, 3, H, W)` with values in `[0, 1]` → `(B, h, w, d)`.
    pub fn encode(&self, images: &Tensor) -> Result<VisualFeatures> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.patch_size;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        if gh != self.grid || gw != self.grid {
            return Err(Error::shape(format!(
                "image {h}x{w} gives a {gh}x{gw} grid, encoder expects {0}x{0}",
                self.grid
            )));
        }
        let x = ((images - 0.5)? * 2.0)?;
        let x = x
            .conv2d(&self.patch_weight, 0, p, 1, 1)?
            .broadcast_add(&self.patch_bias.reshape((1, self.dim, 1, 1))?)?;
        let x = x
            .flatten_from(2)?
            .transpose(1, 2)?
            .broadcast_add(&self.position_embedding)?;
        let mut x = x.contiguous()?;
        for block in &self.blocks {
            x = block.forward(&x, None)?;
        }
        let x = self.ln_post.forward(&x)?;
        Ok(VisualFeatures {
            v: x.reshape((b, gh, gw, self.dim))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn cfg(size: usize, patch: usize) -> VisionEncoderConfig {
        VisionEncoderConfig {
            image_size: size,
            patch_size: patch,
            dim: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn toy_grid() {
        let mut s = ParamStore::new(0, DType::F32);
        let enc = VisionEncoder::new(&mut s, "image", &cfg(32, 8)).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.encode(&x).unwrap().v.dims(), &[2, 4, 4, 8]);
    }

    #[test]
    fn indivisible_size_rejected() {
        assert!(cfg(30, 16).grid().is_err());
        let mut s = ParamStore::new(0, DType::F32);
        let enc = VisionEncoder::new(&mut s, "image", &cfg(32, 16)).unwrap();
        let x = Tensor::zeros((1, 3, 30, 30), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.encode(&x).is_err());
    }
}
