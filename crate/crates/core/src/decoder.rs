//! Promptable mask generator: a high-resolution image encoder, a dense
//! prompt stem and a lightweight two-way attention decoder.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Init, ParamKind, ParamStore};
use crate::resize::resize_bilinear;
use crate::vision::{VisionEncoder, VisionEncoderConfig};

/// Fixed 2-D sinusoidal positional encoding, `(h·w, dim)`.
pub fn sinusoidal_pe(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let quarter = (dim / 4).max(1);
    let mut out = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (c, slot) in row.iter_mut().enumerate() {
                let (pos, band) = if c < dim / 2 {
                    ((y as f64 + 0.5) / h as f64, c)
                } else {
                    ((x as f64 + 0.5) / w as f64, c - dim / 2)
                };
                let freq = (band % quarter) as f64;
                let angle = std::f64::consts::PI * pos * 2f64.powf(freq);
                *slot = if band < quarter { angle.sin() } else { angle.cos() };
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_token_to_image: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_image_to_token: MultiHeadAttention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        skip_first_pe: bool,
    ) -> Result<Self> {
        let k = ParamKind::Trainable;
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &join(prefix, "self_attn"), dim, heads, k)?,
            norm1: LayerNorm::new(store, &join(prefix, "norm1"), dim, k)?,
            cross_token_to_image: MultiHeadAttention::new(
                store,
                &join(prefix, "t2i"),
                dim,
                heads,
                k,
            )?,
            norm2: LayerNorm::new(store, &join(prefix, "norm2"), dim, k)?,
            mlp: Mlp::new(store, &join(prefix, "mlp"), dim, dim * 4, k)?,
            norm3: LayerNorm::new(store, &join(prefix, "norm3"), dim, k)?,
            cross_image_to_token: MultiHeadAttention::new(
                store,
                &join(prefix, "i2t"),
                dim,
                heads,
                k,
            )?,
            norm4: LayerNorm::new(store, &join(prefix, "norm4"), dim, k)?,
            skip_first_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries, None)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries, None)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = (&queries + self.cross_token_to_image.forward(&q, &k, keys, None)?)?;
        let queries = self.norm2.forward(&queries)?;

        let queries = self.norm3.forward(&(&queries + self.mlp.forward(&queries)?)?)?;

        let q = (&queries + query_pe)?;
        let keys = (keys + self.cross_image_to_token.forward(&k, &q, &queries, None)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

/// Three-layer ReLU perceptron producing one mask's channel weights.
#[derive(Debug, Clone)]
struct HyperMlp {
    layers: Vec<Linear>,
}

impl HyperMlp {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, out: usize) -> Result<Self> {
        let k = ParamKind::Trainable;
        Ok(Self {
            layers: vec![
                Linear::new(store, &join(prefix, "0"), dim, dim, k)?,
                Linear::new(store, &join(prefix, "1"), dim, dim, k)?,
                Linear::new(store, &join(prefix, "2"), dim, out, k)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub rounds: usize,
    pub num_mask_tokens: usize,
    pub grid: usize,
}

/// Candidate masks and the selected one.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `(B, K, 4·h₂, 4·w₂)`
    pub candidates: Tensor,
    /// `(B, H_gt, W_gt)` logits of candidate 0 resized to the target size.
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    mask_tokens: Tensor,
    blocks: Vec<TwoWayBlock>,
    final_attn: MultiHeadAttention,
    final_norm: LayerNorm,
    up1: ConvTranspose2d,
    up_norm: LayerNorm,
    up2: ConvTranspose2d,
    hyper: Vec<HyperMlp>,
    image_pe: Tensor,
    cfg: DecoderConfig,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: DecoderConfig) -> Result<Self> {
        if cfg.dim % 8 != 0 {
            return Err(Error::config(format!(
                "decoder dim {} must be divisible by 8",
                cfg.dim
            )));
        }
        if cfg.num_mask_tokens == 0 {
            return Err(Error::config("decoder needs at least one mask token"));
        }
        let k = ParamKind::Trainable;
        let d = cfg.dim;
        let blocks = (0..cfg.rounds)
            .map(|i| TwoWayBlock::new(store, &format!("{prefix}.blocks.{i}"), d, cfg.heads, i == 0))
            .collect::<Result<_>>()?;
        let hyper = (0..cfg.num_mask_tokens)
            .map(|i| HyperMlp::new(store, &format!("{prefix}.hyper.{i}"), d, d / 8))
            .collect::<Result<_>>()?;
        let pe = sinusoidal_pe(cfg.grid, cfg.grid, d);
        let image_pe = Tensor::from_vec(pe, (1, cfg.grid * cfg.grid, d), store.device())?
            .to_dtype(store.dtype())?;
        Ok(Self {
            mask_tokens: store.get_or_init(
                &join(prefix, "mask_tokens"),
                &[cfg.num_mask_tokens, d],
                Init::Normal { std: 1.0 },
                k,
            )?,
            blocks,
            final_attn: MultiHeadAttention::new(store, &join(prefix, "final_attn"), d, cfg.heads, k)?,
            final_norm: LayerNorm::new(store, &join(prefix, "final_norm"), d, k)?,
            up1: ConvTranspose2d::new(store, &join(prefix, "up1"), d, d / 4, 2, k)?,
            up_norm: LayerNorm::new(store, &join(prefix, "up_norm"), d / 4, k)?,
            up2: ConvTranspose2d::new(store, &join(prefix, "up2"), d / 4, d / 8, 2, k)?,
            hyper,
            image_pe,
            cfg,
        })
    }

    pub fn num_mask_tokens(&self) -> usize {
        self.cfg.num_mask_tokens
    }

    /// `embedding (B, d₂, h₂, w₂)`, `sparse (B, M, d₂)`; candidate 0 is
    /// resized to `target`.
    pub fn decode(
        &self,
        embedding: &Tensor,
        sparse: &Tensor,
        target: (usize, usize),
    ) -> Result<DecoderOutput> {
        let (b, c, h, w) = embedding.dims4()?;
        let (sb, _, sd) = sparse.dims3()?;
        if c != self.cfg.dim || sd != self.cfg.dim || sb != b {
            return Err(Error::shape(format!(
                "decoder dim {}: embedding {:?}, sparse prompts {:?}",
                self.cfg.dim,
                embedding.dims(),
                sparse.dims()
            )));
        }
        if h != self.cfg.grid || w != self.cfg.grid {
            return Err(Error::shape(format!(
                "embedding grid {h}x{w}, decoder expects {0}x{0}",
                self.cfg.grid
            )));
        }
        let k = self.cfg.num_mask_tokens;
        let mask_tokens = self.mask_tokens.unsqueeze(0)?.broadcast_as((b, k, c))?;
        let tokens = Tensor::cat(&[&mask_tokens, sparse], 1)?.contiguous()?;
        let mut queries = tokens.clone();
        let mut keys = embedding.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        for block in &self.blocks {
            (queries, keys) = block.forward(&queries, &keys, &tokens, &self.image_pe)?;
        }
        let q = (&queries + &tokens)?;
        let kpe = keys.broadcast_add(&self.image_pe)?;
        let queries = (&queries + self.final_attn.forward(&q, &kpe, &keys, None)?)?;
        let queries = self.final_norm.forward(&queries)?;

        let src = keys.transpose(1, 2)?.reshape((b, c, h, w))?;
        let up = self.up_norm.forward_channels(&self.up1.forward(&src)?)?.gelu_erf()?;
        let up = self.up2.forward(&up)?.gelu_erf()?;
        let (_, uc, uh, uw) = up.dims4()?;

        let weights = self
            .hyper
            .iter()
            .enumerate()
            .map(|(i, mlp)| mlp.forward(&queries.narrow(1, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let weights = Tensor::cat(&weights, 1)?;
        let candidates = weights
            .matmul(&up.reshape((b, uc, uh * uw))?)?
            .reshape((b, k, uh, uw))?;
        let first = candidates.narrow(1, 0, 1)?.squeeze(1)?;
        let logits = resize_bilinear(&first, target.0, target.1)?;
        Ok(DecoderOutput { candidates, logits })
    }
}

/// Embeds the dense prompt and adds it to the image embedding.
#[derive(Debug, Clone)]
pub struct DenseStem {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl DenseStem {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let k = ParamKind::Trainable;
        let mid = (dim / 4).max(4);
        Ok(Self {
            conv1: Conv2d::new(store, &join(prefix, "conv1"), 1, mid, 3, 1, 1, k)?,
            conv2: Conv2d::new(store, &join(prefix, "conv2"), mid, dim, 1, 1, 0, k)?,
        })
    }

    /// `(B, h, w)` → `(B, dim, h, w)`
    pub fn forward(&self, dense: &Tensor) -> Result<Tensor> {
        let x = self.conv1.forward(&dense.unsqueeze(1)?)?.gelu_erf()?;
        self.conv2.forward(&x)
    }
}

#[derive(Debug, Clone)]
pub struct MaskGenerator {
    pub(crate) encoder: VisionEncoder,
    pub(crate) dense_stem: DenseStem,
    pub(crate) decoder: MaskDecoder,
    dense_enabled: bool,
}

impl MaskGenerator {
    pub fn new(
        store: &mut ParamStore,
        encoder_cfg: &VisionEncoderConfig,
        decoder_cfg: DecoderConfig,
        dense_enabled: bool,
    ) -> Result<Self> {
        Ok(Self {
            encoder: VisionEncoder::new(store, "highres", encoder_cfg)?,
            dense_stem: DenseStem::new(store, "decoder.dense_stem", decoder_cfg.dim)?,
            decoder: MaskDecoder::new(store, "decoder", decoder_cfg)?,
            dense_enabled,
        })
    }

    pub fn dense_enabled(&self) -> bool {
        self.dense_enabled
    }

    pub fn decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn encoder(&self) -> &VisionEncoder {
        &self.encoder
    }

    /// `(B, 3, H₂, W₂)` → `(B, d₂, h₂, w₂)`
    pub fn encode_image_highres(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.encode(images)?.channels_first()?.contiguous()?)
    }

    pub fn inject_dense(&self, embedding: &Tensor, dense: &Tensor) -> Result<Tensor> {
        if !self.dense_enabled {
            return Ok(embedding.clone());
        }
        let (b, _, h, w) = embedding.dims4()?;
        if dense.dims() != [b, h, w] {
            return Err(Error::shape(format!(
                "dense prompt {:?} vs embedding grid {:?}",
                dense.dims(),
                (b, h, w)
            )));
        }
        Ok((embedding + self.dense_stem.forward(dense)?)?)
    }

    pub fn decode(
        &self,
        embedding: &Tensor,
        sparse: &Tensor,
        target: (usize, usize),
    ) -> Result<DecoderOutput> {
        self.decoder.decode(embedding, sparse, target)
    }
}

/// Binarizes logits at 0.
pub fn binarize(logits: &Tensor) -> Result<Tensor> {
    Ok(logits.gt(0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn decoder(store: &mut ParamStore) -> MaskDecoder {
        MaskDecoder::new(
            store,
            "decoder",
            DecoderConfig {
                dim: 16,
                heads: 2,
                rounds: 2,
                num_mask_tokens: 3,
                grid: 4,
            },
        )
        .unwrap()
    }

    #[test]
    fn three_candidates_and_target_size() {
        let mut s = ParamStore::new(0, DType::F32);
        let dec = decoder(&mut s);
        let dev = Device::Cpu;
        let e = Tensor::randn(0f32, 1.0, (2, 16, 4, 4), &dev).unwrap();
        let sp = Tensor::randn(0f32, 1.0, (2, 5, 16), &dev).unwrap();
        let out = dec.decode(&e, &sp, (20, 20)).unwrap();
        assert_eq!(out.candidates.dims(), &[2, 3, 16, 16]);
        assert_eq!(out.logits.dims(), &[2, 20, 20]);
        let first = resize_bilinear(&out.candidates.narrow(1, 0, 1).unwrap().squeeze(1).unwrap(), 20, 20).unwrap();
        let diff = (first - &out.logits).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn sparse_token_order_does_not_matter() {
        let mut s = ParamStore::new(4, DType::F64);
        let dec = decoder(&mut s);
        let dev = Device::Cpu;
        let e = Tensor::randn(0f64, 1.0, (1, 16, 4, 4), &dev).unwrap();
        let sp = Tensor::randn(0f64, 1.0, (1, 5, 16), &dev).unwrap();
        let perm = Tensor::new(&[3u32, 0, 4, 2, 1], &dev).unwrap();
        let sp2 = sp.index_select(&perm, 1).unwrap();
        let a = dec.decode(&e, &sp, (8, 8)).unwrap().logits;
        let b = dec.decode(&e, &sp2, (8, 8)).unwrap().logits;
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn dense_stem_zero_in_zero_out() {
        let mut s = ParamStore::new(0, DType::F32);
        let stem = DenseStem::new(&mut s, "decoder.dense_stem", 16).unwrap();
        let z = Tensor::zeros((1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let y = stem.forward(&z).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn positional_encoding_is_bounded_and_distinct() {
        let pe = sinusoidal_pe(4, 4, 16);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(&pe[0..16], &pe[16..32]);
    }
}
