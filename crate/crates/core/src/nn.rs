//! Small layer library on top of candle tensors.
//!
//! Activations are batch-first. Sequence tensors are `(B, N, D)`, feature
//! maps are `(B, C, H, W)`.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::lora::LoraLinear;
use crate::params::{Init, ParamKind, ParamStore};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        kind: ParamKind,
    ) -> Result<Self> {
        let weight = store.get_or_init(
            &join(prefix, "weight"),
            &[out_dim, in_dim],
            Init::fan_in(in_dim),
            kind,
        )?;
        let bias = store.get_or_init(&join(prefix, "bias"), &[out_dim], Init::Zeros, kind)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    /// `(out, in)` weight matrix.
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, kind: ParamKind) -> Result<Self> {
        Ok(Self {
            gamma: store.get_or_init(&join(prefix, "gamma"), &[dim], Init::Ones, kind)?,
            beta: store.get_or_init(&join(prefix, "beta"), &[dim], Init::Zeros, kind)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    /// Normalizes a `(B, C, H, W)` map over its channel dimension.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(&x.permute((0, 2, 3, 1))?)?;
        Ok(y.permute((0, 3, 1, 2))?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        kind: ParamKind,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        Ok(Self {
            weight: store.get_or_init(
                &join(prefix, "weight"),
                &[out_ch, in_ch, kernel, kernel],
                Init::fan_in(fan_in),
                kind,
            )?,
            bias: store.get_or_init(&join(prefix, "bias"), &[out_ch], Init::Zeros, kind)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Transposed convolution with `kernel == stride` and no padding, i.e. an
/// exact spatial upscale by `stride`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        kind: ParamKind,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.get_or_init(
                &join(prefix, "weight"),
                &[in_ch, out_ch, stride, stride],
                Init::fan_in(in_ch),
                kind,
            )?,
            bias: store.get_or_init(&join(prefix, "bias"), &[out_ch], Init::Zeros, kind)?,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Batch normalization over `(B, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, ch: usize, kind: ParamKind) -> Result<Self> {
        Ok(Self {
            gamma: store.get_or_init(&join(prefix, "gamma"), &[ch], Init::Ones, kind)?,
            beta: store.get_or_init(&join(prefix, "beta"), &[ch], Init::Zeros, kind)?,
            running_mean: store.get_var(
                &join(prefix, "running_mean"),
                &[ch],
                Init::Zeros,
                ParamKind::Buffer,
            )?,
            running_var: store.get_var(
                &join(prefix, "running_var"),
                &[ch],
                Init::Ones,
                ParamKind::Buffer,
            )?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 {
                (var.detach() * (n / (n - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape(shape)?, var.reshape(shape)?)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape(shape)?,
                self.running_var.as_tensor().detach().reshape(shape)?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        kind: ParamKind,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &join(prefix, "fc1"), dim, hidden, kind)?,
            fc2: Linear::new(store, &join(prefix, "fc2"), hidden, dim, kind)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Softmax over the last axis: one pass per row forward, `y·(g − Σ g·y)`
/// backward.
struct SoftmaxLast;

fn softmax_rows<T: Copy + PartialOrd + std::ops::Sub<Output = T> + std::ops::Div<Output = T> + std::iter::Sum<T>>(
    src: &[T],
    row: usize,
    exp: impl Fn(T) -> T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for chunk in src.chunks(row) {
        let max = chunk
            .iter()
            .copied()
            .fold(chunk[0], |m, v| if v > m { v } else { m });
        let start = out.len();
        out.extend(chunk.iter().map(|&v| exp(v - max)));
        let total: T = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    out
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("softmax-last needs a contiguous input")
        };
        let row = *layout
            .dims()
            .last()
            .ok_or_else(|| candle_core::Error::Msg("softmax-last on a scalar".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[start..end], row, f32::exp)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[start..end], row, f64::exp)),
            _ => candle_core::bail!("softmax-last supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad_res.broadcast_sub(&dot)?)?))
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// Multi-head attention whose four projections accept low-rank adapters.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    heads: usize,
}

/// Additive bias that removes masked keys from attention.
pub const MASKED_LOGIT: f64 = -1e9;

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        kind: ParamKind,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let proj = |store: &mut ParamStore, n: &str| -> Result<LoraLinear> {
            Ok(LoraLinear::plain(Linear::new(
                store,
                &join(prefix, n),
                dim,
                dim,
                kind,
            )?))
        };
        Ok(Self {
            q: proj(store, "q")?,
            k: proj(store, "k")?,
            v: proj(store, "v")?,
            o: proj(store, "o")?,
            heads,
        })
    }

    pub fn projections_mut(&mut self) -> [(&'static str, &mut LoraLinear); 4] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ]
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `queries (B, Nq, D)`, `keys`/`values (B, Nk, D)`; `key_bias` is an
    /// optional additive `(B, Nk)` bias (0 or [`MASKED_LOGIT`]).
    pub fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, nq, d) = queries.dims3()?;
        let q = self.split_heads(&self.q.forward(queries)?)?;
        let k = self.split_heads(&self.k.forward(keys)?)?;
        let v = self.split_heads(&self.v.forward(values)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = key_bias {
            let nk = bias.dim(1)?;
            logits = logits.broadcast_add(&bias.reshape((b, 1, 1, nk))?)?;
        }
        let attn = softmax_last(&logits)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, d))?;
        self.o.forward(&out)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        kind: ParamKind,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &join(prefix, "ln1"), dim, kind)?,
            attn: MultiHeadAttention::new(store, &join(prefix, "attn"), dim, heads, kind)?,
            ln2: LayerNorm::new(store, &join(prefix, "ln2"), dim, kind)?,
            mlp: Mlp::new(store, &join(prefix, "mlp"), dim, dim * mlp_ratio, kind)?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h, key_bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_matches_reference_and_gradient() {
        let x = Var::new(
            &[[0.3f64, -1.2, 2.0, 0.0], [5.0, 5.0, -3.0, 1.0]],
            &Device::Cpu,
        )
        .unwrap();
        let w = Tensor::new(&[[1.0f64, -2.0, 0.5, 3.0], [0.1, 0.2, 0.3, -0.4]], &Device::Cpu).unwrap();
        let ours = softmax_last(x.as_tensor()).unwrap();
        let reference = candle_nn::ops::softmax(x.as_tensor(), D::Minus1).unwrap();
        let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-15);
        let g1 = (ours * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let d = (g1.get(x.as_tensor()).unwrap() - g2.get(x.as_tensor()).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-14);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut s = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut s, "ln", 6, ParamKind::Frozen).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0, 5.0, 9.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 6.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn conv_transpose_doubles_resolution() {
        let mut s = ParamStore::new(0, DType::F32);
        let up = ConvTranspose2d::new(&mut s, "up", 4, 2, 2, ParamKind::Trainable).unwrap();
        let x = Tensor::ones((1, 4, 3, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[1, 2, 6, 10]);
    }

    #[test]
    fn stride_two_conv_halves_resolution() {
        let mut s = ParamStore::new(0, DType::F32);
        let c = Conv2d::new(&mut s, "c", 3, 5, 3, 2, 1, ParamKind::Trainable).unwrap();
        let x = Tensor::ones((2, 3, 24, 24), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 5, 12, 12]);
    }

    #[test]
    fn batch_norm_train_mode_normalizes_and_tracks_stats() {
        let mut s = ParamStore::new(0, DType::F64);
        let bn = BatchNorm2d::new(&mut s, "bn", 2, ParamKind::Trainable).unwrap();
        let x = Tensor::arange(0.0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 2, 2, 2))
            .unwrap();
        let y = bn.forward(&x, true).unwrap();
        let per_ch = y.transpose(0, 1).unwrap().reshape((2, 8)).unwrap();
        for row in per_ch.to_vec2::<f64>().unwrap() {
            assert!(row.iter().sum::<f64>().abs() < 1e-9);
        }
        let rm = s.get("bn.running_mean").unwrap().to_vec1::<f64>().unwrap();
        // channel 0 holds {0,1,2,3,8,9,10,11}: mean 5.5
        assert!((rm[0] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let mut s = ParamStore::new(1, DType::F64);
        let attn = MultiHeadAttention::new(&mut s, "a", 8, 2, ParamKind::Frozen).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0.0f64, 1.0, (1, 3, 8), &dev).unwrap();
        let junk = Tensor::randn(0.0f64, 1.0, (1, 2, 8), &dev).unwrap();
        let padded = Tensor::cat(&[&x, &junk], 1).unwrap();
        let bias = Tensor::new(&[[0.0f64, 0.0, 0.0, MASKED_LOGIT, MASKED_LOGIT]], &dev).unwrap();
        let a = attn.forward(&x, &x, &x, None).unwrap();
        let b = attn
            .forward(&x, &padded, &padded, Some(&bias))
            .unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }
}
