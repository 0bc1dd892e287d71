//! Bilinear resampling with half-pixel centers (the `align_corners = false`
//! convention). The tensor form is two matrix products, so it is
//! differentiable and preserves constant inputs exactly up to rounding.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Source taps `(i0, i1, w1)` for every output index: the sample is
/// `(1 - w1) * src[i0] + w1 * src[i1]`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

/// Dense `out_len × in_len` interpolation matrix.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (o, (i0, i1, w1)) in bilinear_taps(in_len, out_len).into_iter().enumerate() {
        m[o * in_len + i0] += 1.0 - w1;
        m[o * in_len + i1] += w1;
    }
    m
}

fn matrix_tensor(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_matrix(in_len, out_len), (out_len, in_len), device)?
        .to_dtype(dtype)?)
}

/// Resizes the last two dims of `x` (any rank ≥ 2) to `(out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let rank = x.rank();
    let (in_h, in_w) = (x.dim(rank - 2)?, x.dim(rank - 1)?);
    if in_h == out_h && in_w == out_w {
        return Ok(x.clone());
    }
    let rh = matrix_tensor(in_h, out_h, x.dtype(), x.device())?;
    let rw_t = matrix_tensor(in_w, out_w, x.dtype(), x.device())?.t()?;
    let x = x.contiguous()?;
    let x = x.broadcast_matmul(&rw_t)?;
    Ok(rh.broadcast_matmul(&x)?)
}

/// Resizes an `h × w × c` interleaved buffer.
pub fn resize_hwc(
    data: &[f32],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut out = vec![0f32; out_h * out_w * c];
    for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let p = |y: usize, x: usize| f64::from(data[(y * w + x) * c + ch]);
                let top = (1.0 - wx) * p(y0, x0) + wx * p(y0, x1);
                let bottom = (1.0 - wx) * p(y1, x0) + wx * p(y1, x1);
                out[(oy * out_w + ox) * c + ch] = ((1.0 - wy) * top + wy * bottom) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_of_matrix_sum_to_one() {
        for (i, o) in [(24, 64), (64, 24), (3, 7), (1, 5), (8, 8)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(2.5f32, (1, 24, 24), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 64, 64).unwrap();
        assert_eq!(y.dims(), &[1, 64, 64]);
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 2.5).abs() < 1e-5);
        }
    }

    #[test]
    fn tensor_and_buffer_paths_agree() {
        let data: Vec<f32> = (0..5 * 7).map(|i| (i as f32 * 0.37).sin()).collect();
        let buf = resize_hwc(&data, 5, 7, 1, 9, 4);
        let t = Tensor::from_vec(data, (5, 7), &Device::Cpu).unwrap();
        let r = resize_bilinear(&t, 9, 4).unwrap().flatten_all().unwrap();
        for (a, b) in buf.iter().zip(r.to_vec1::<f32>().unwrap()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn two_x_upsample_matches_half_pixel_convention() {
        // [0, 1] upsampled to 4 samples at source coords -0.25, 0.25, 0.75, 1.25
        let taps = bilinear_taps(2, 4);
        let vals: Vec<f64> = taps.iter().map(|&(a, b, w)| (1.0 - w) * a as f64 + w * b as f64).collect();
        assert_eq!(vals, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
