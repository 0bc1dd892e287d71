//! Text-filtered visual activations turned into mask-generator prompts.
//!
//! With `v` the low-resolution feature map and `σ` the logistic sigmoid:
//!
//! ```text
//! v_global = v ⊙ σ(v·t_globalᵀ) + v
//! v_local  = mean_ℓ( v ⊙ σ(v·t_ℓᵀ) ) + v        (ℓ over non-pad words)
//! v_attn   = cat(v_global, v_local, v)           (3·d₁ channels)
//! sparse   = flatten(conv_ds(conv_dc(v_attn)))    (M × d₂)
//! dense    = resize(v·t_globalᵀ)                  (h₂ × w₂, raw logits)
//! ```
//!
//! All tensors are batched; `v` is `(B, h, w, d)` and text features are
//! `(B, 1, d)` / `(B, L, d)`.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d};
use crate::params::{ParamKind, ParamStore};
use crate::resize::resize_bilinear;

fn check_channels(v: &Tensor, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, h, w, d) = v.dims4()?;
    let (tb, _, td) = t.dims3()?;
    if td != d || tb != b {
        return Err(Error::shape(format!(
            "visual features {:?} vs text features {:?}",
            v.dims(),
            t.dims()
        )));
    }
    Ok((b, h, w, d))
}

/// Raw similarities `v·tᵀ` for every text row: `(B, h·w, T)`.
fn similarity(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    let (b, h, w, d) = check_channels(v, t)?;
    let tokens = v.reshape((b, h * w, d))?;
    Ok(tokens.matmul(&t.transpose(1, 2)?.contiguous()?)?)
}

/// `v·t_globalᵀ` as a `(B, h, w)` map.
pub fn global_similarity(v: &Tensor, t_global: &Tensor) -> Result<Tensor> {
    let (b, h, w, _) = v.dims4()?;
    Ok(similarity(v, t_global)?.reshape((b, h, w))?)
}

/// `σ(v·t_globalᵀ)`, values in `(0, 1)`.
pub fn global_attention_map(v: &Tensor, t_global: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(&global_similarity(v, t_global)?)?)
}

pub fn filter_global(v: &Tensor, t_global: &Tensor) -> Result<Tensor> {
    let map = global_attention_map(v, t_global)?.unsqueeze(D::Minus1)?;
    Ok((v.broadcast_mul(&map)? + v)?)
}

/// Mean over non-pad words of `v ⊙ σ(v·t_ℓᵀ)`, plus the residual `v`.
pub fn filter_local(v: &Tensor, t_local: &Tensor, pad_mask: &[Vec<bool>]) -> Result<Tensor> {
    let (b, h, w, _) = check_channels(v, t_local)?;
    let l = t_local.dim(1)?;
    if pad_mask.len() != b || pad_mask.iter().any(|m| m.len() != l) {
        return Err(Error::shape(format!(
            "pad mask does not match {b} samples of {l} words"
        )));
    }
    let mut keep = Vec::with_capacity(b * l);
    let mut counts = Vec::with_capacity(b);
    for (i, m) in pad_mask.iter().enumerate() {
        let real = m.iter().filter(|p| !**p).count();
        if real == 0 {
            return Err(Error::shape(format!("sample {i} has no unpadded words")));
        }
        keep.extend(m.iter().map(|&p| if p { 0.0 } else { 1.0 }));
        counts.push(real as f64);
    }
    let keep = Tensor::from_vec(keep, (b, 1, l), v.device())?.to_dtype(v.dtype())?;
    let counts = Tensor::from_vec(counts, (b, 1, 1), v.device())?.to_dtype(v.dtype())?;
    let maps = candle_nn::ops::sigmoid(&similarity(v, t_local)?)?;
    // mean of v·σ_ℓ over ℓ equals v·(mean of σ_ℓ) since v does not depend on ℓ
    let mean_map = maps
        .broadcast_mul(&keep)?
        .sum_keepdim(D::Minus1)?
        .broadcast_div(&counts)?;
    let mean_map = mean_map.reshape((b, h, w, 1))?;
    Ok((v.broadcast_mul(&mean_map)? + v)?)
}

/// Channel concatenation in the order (global, local, raw).
pub fn fuse(v_global_attn: &Tensor, v_local_attn: &Tensor, v: &Tensor) -> Result<Tensor> {
    let a = v_global_attn.dims4()?;
    let b = v_local_attn.dims4()?;
    let c = v.dims4()?;
    if (a.0, a.1, a.2) != (c.0, c.1, c.2) || (b.0, b.1, b.2) != (c.0, c.1, c.2) {
        return Err(Error::shape(format!(
            "cannot fuse {:?}, {:?}, {:?}",
            v_global_attn.dims(),
            v_local_attn.dims(),
            v.dims()
        )));
    }
    Ok(Tensor::cat(&[v_global_attn, v_local_attn, v], D::Minus1)?)
}

/// Raw similarity map resized to the mask generator's grid.
pub fn make_dense(v: &Tensor, t_global: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    resize_bilinear(&global_similarity(v, t_global)?, target.0, target.1)
}

/// Number of stride-2 blocks for a downsample rate, which must be a power
/// of two no smaller than 2.
pub fn downsample_blocks(rate: usize) -> Result<usize> {
    if rate < 2 || !rate.is_power_of_two() {
        return Err(Error::config(format!(
            "downsample rate {rate} must be a power of two >= 2"
        )));
    }
    Ok(rate.trailing_zeros() as usize)
}

/// Number of sparse prompts for an `h × w` grid.
pub fn sparse_count(h: usize, w: usize, rate: usize) -> Result<usize> {
    downsample_blocks(rate)?;
    if h % rate != 0 || w % rate != 0 {
        return Err(Error::config(format!(
            "feature grid {h}x{w} not divisible by downsample rate {rate}"
        )));
    }
    Ok((h / rate) * (w / rate))
}

#[derive(Debug, Clone)]
pub struct AttendedFeatures {
    pub v_global_attn: Tensor,
    pub v_local_attn: Tensor,
    /// `(B, h, w, 3·d₁)`
    pub v_attn: Tensor,
}

#[derive(Debug, Clone)]
pub struct PromptBundle {
    /// `(B, M, d₂)`
    pub sparse: Tensor,
    /// `(B, h₂, w₂)` raw logits
    pub dense: Tensor,
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Learned part of the prompter: the 1×1 channel reducer and the stride-2
/// Conv-BN-GELU stack.
#[derive(Debug, Clone)]
pub struct AttnPrompter {
    conv_dc: Conv2d,
    conv_ds: Vec<DownBlock>,
    downsample: usize,
    dense_size: (usize, usize),
}

impl AttnPrompter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d1: usize,
        d2: usize,
        downsample: usize,
        dense_size: (usize, usize),
    ) -> Result<Self> {
        let kind = ParamKind::Trainable;
        let n_blocks = downsample_blocks(downsample)?;
        let conv_dc = Conv2d::new(store, &join(prefix, "conv_dc"), 3 * d1, d2, 1, 1, 0, kind)?;
        let conv_ds = (0..n_blocks)
            .map(|i| {
                let p = format!("{prefix}.conv_ds.{i}");
                Ok(DownBlock {
                    conv: Conv2d::new(store, &join(&p, "conv"), d2, d2, 3, 2, 1, kind)?,
                    bn: BatchNorm2d::new(store, &join(&p, "bn"), d2, kind)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            conv_dc,
            conv_ds,
            downsample,
            dense_size,
        })
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    /// `v_attn (B, h, w, 3·d₁)` → `(B, M, d₂)`.
    pub fn make_sparse(&self, v_attn: &Tensor, train: bool) -> Result<Tensor> {
        let (_, h, w, _) = v_attn.dims4()?;
        sparse_count(h, w, self.downsample)?;
        let mut x = self.conv_dc.forward(&v_attn.permute((0, 3, 1, 2))?.contiguous()?)?;
        for block in &self.conv_ds {
            x = block.bn.forward(&block.conv.forward(&x)?, train)?.gelu_erf()?;
        }
        Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
    }

    pub fn attend(
        &self,
        v: &Tensor,
        t_global: &Tensor,
        t_local: &Tensor,
        pad_mask: &[Vec<bool>],
    ) -> Result<AttendedFeatures> {
        let v_global_attn = filter_global(v, t_global)?;
        let v_local_attn = filter_local(v, t_local, pad_mask)?;
        let v_attn = fuse(&v_global_attn, &v_local_attn, v)?;
        Ok(AttendedFeatures {
            v_global_attn,
            v_local_attn,
            v_attn,
        })
    }

    pub fn forward(
        &self,
        v: &Tensor,
        t_global: &Tensor,
        t_local: &Tensor,
        pad_mask: &[Vec<bool>],
        train: bool,
    ) -> Result<(AttendedFeatures, PromptBundle)> {
        let attended = self.attend(v, t_global, t_local, pad_mask)?;
        let sparse = self.make_sparse(&attended.v_attn, train)?;
        let dense = make_dense(v, t_global, self.dense_size)?;
        Ok((attended, PromptBundle { sparse, dense }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn two_by_two_map() {
        let v = t(vec![1.0, -1.0, 2.0, 0.0], &[1, 2, 2, 1]);
        let g = t(vec![1.0], &[1, 1, 1]);
        let m = global_attention_map(&v, &g).unwrap().flatten_all().unwrap();
        let want = [sig(1.0), sig(-1.0), sig(2.0), 0.5];
        for (a, b) in m.to_vec1::<f64>().unwrap().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_text_gives_half_and_one_point_five() {
        let v = Tensor::randn(0f64, 1.0, (1, 3, 3, 4), &Device::Cpu).unwrap();
        let g = Tensor::zeros((1, 1, 4), DType::F64, &Device::Cpu).unwrap();
        let m = global_attention_map(&v, &g).unwrap();
        assert!(m.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|x| *x == 0.5));
        let fg = filter_global(&v, &g).unwrap();
        let want = (&v * 1.5).unwrap();
        assert_eq!(
            fg.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            want.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn saturated_logits_double_v() {
        let v = t(vec![1.0, 2.0], &[1, 1, 2, 1]);
        let g = t(vec![1e4], &[1, 1, 1]);
        let fg = filter_global(&v, &g).unwrap().flatten_all().unwrap();
        assert_eq!(fg.to_vec1::<f64>().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn single_word_matches_global_filter() {
        let dev = Device::Cpu;
        let v = Tensor::randn(0f64, 1.0, (1, 2, 3, 4), &dev).unwrap();
        let word = Tensor::randn(0f64, 1.0, (1, 1, 4), &dev).unwrap();
        let pad = Tensor::randn(0f64, 1.0, (1, 2, 4), &dev).unwrap();
        let local = Tensor::cat(&[&word, &pad], 1).unwrap();
        let a = filter_local(&v, &local, &[vec![false, true, true]]).unwrap();
        let b = filter_global(&v, &word).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
        // duplicated word averages to the same thing
        let dup = Tensor::cat(&[&word, &word], 1).unwrap();
        let c = filter_local(&v, &dup, &[vec![false, false]]).unwrap();
        let b = filter_global(&v, &word).unwrap();
        let d = (c - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn all_padded_rejected() {
        let v = Tensor::zeros((1, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let l = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(filter_local(&v, &l, &[vec![true, true]]).is_err());
    }

    #[test]
    fn fuse_order_and_width() {
        let dev = Device::Cpu;
        let v = Tensor::randn(0f32, 1.0, (1, 24, 24, 64), &dev).unwrap();
        let g = (&v * 2.0).unwrap();
        let l = (&v * 3.0).unwrap();
        let f = fuse(&g, &l, &v).unwrap();
        assert_eq!(f.dims(), &[1, 24, 24, 192]);
        let tail = f.narrow(3, 128, 64).unwrap();
        assert_eq!(
            tail.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            v.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn sparse_counts() {
        assert_eq!(sparse_count(24, 24, 4).unwrap(), 36);
        assert_eq!(sparse_count(24, 24, 2).unwrap(), 144);
        assert_eq!(sparse_count(24, 24, 8).unwrap(), 9);
        assert!(sparse_count(24, 24, 5).is_err());
        assert!(sparse_count(24, 24, 16).is_err());
    }

    #[test]
    fn sparse_shape_from_module() {
        let mut s = ParamStore::new(0, DType::F32);
        let p = AttnPrompter::new(&mut s, "prompter", 8, 16, 4, (64, 64)).unwrap();
        let v_attn = Tensor::randn(0f32, 1.0, (2, 24, 24, 24), &Device::Cpu).unwrap();
        assert_eq!(p.make_sparse(&v_attn, true).unwrap().dims(), &[2, 36, 16]);
    }

    #[test]
    fn dense_prompt_shapes_and_zero_text() {
        let dev = Device::Cpu;
        let v = Tensor::randn(0f32, 1.0, (1, 24, 24, 8), &dev).unwrap();
        let g = Tensor::zeros((1, 1, 8), DType::F32, &dev).unwrap();
        let d = make_dense(&v, &g, (64, 64)).unwrap();
        assert_eq!(d.dims(), &[1, 64, 64]);
        assert!(d.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn dim_mismatch_errors() {
        let dev = Device::Cpu;
        let v = Tensor::zeros((1, 2, 2, 4), DType::F32, &dev).unwrap();
        let g = Tensor::zeros((1, 1, 3), DType::F32, &dev).unwrap();
        assert!(global_attention_map(&v, &g).is_err());
        assert!(filter_global(&v, &g).is_err());
        assert!(make_dense(&v, &g, (4, 4)).is_err());
    }
}
