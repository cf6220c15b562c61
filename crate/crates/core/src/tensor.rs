//! Dense row-major `f64` arrays and the handful of kernels the denoiser needs:
//! matmul, softmax, scaled dot-product attention, same-padded convolution and
//! group normalization.
//!
//! Every kernel validates its inputs (shape and finiteness) and is a pure
//! function of them. The only source of parallelism is [`conv2d`], which splits
//! work by output channel so that each output element is accumulated in exactly
//! the same order as in the sequential path.

use std::sync::OnceLock;

use crate::error::KernelError;

type KResult<T> = std::result::Result<T, KernelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> KResult<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(KernelError::ShapeMismatch {
                op: "tensor",
                detail: format!("dims {dims:?} must be non-empty and positive"),
            });
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(KernelError::ShapeMismatch {
                op: "tensor",
                detail: format!("dims {dims:?} hold {n} values, data has {}", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        assert!(n > 0 && !dims.is_empty(), "zero-sized tensor {dims:?}");
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        assert!(n > 0 && !dims.is_empty(), "zero-sized tensor {dims:?}");
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, dims: &[usize]) -> KResult<Self> {
        Self::new(dims.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> KResult<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(KernelError::NonFinite { op })
        }
    }

    /// Bit-level equality (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> KResult<Tensor> {
        if self.dims != other.dims {
            return Err(KernelError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.dims, other.dims),
            });
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> KResult<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> KResult<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Tensor, b: f64) -> KResult<Tensor> {
        self.zip_with(other, "lincomb", |x, y| a * x + b * y)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> KResult<()> {
        if self.dims != other.dims {
            return Err(KernelError::ShapeMismatch {
                op: "add_assign",
                detail: format!("{:?} vs {:?}", self.dims, other.dims),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Number of values in one slice along axis 0.
    fn outer_stride(&self) -> usize {
        self.data.len() / self.dims[0]
    }

    /// Sub-tensor at index `i` of axis 0 (rank drops by one; rank-1 tensors yield `[1]`).
    pub fn outer(&self, i: usize) -> Tensor {
        assert!(i < self.dims[0], "outer index {i} out of range {}", self.dims[0]);
        let stride = self.outer_stride();
        let dims = if self.dims.len() > 1 {
            self.dims[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor {
            dims,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    pub fn outer_slice(&self, i: usize) -> &[f64] {
        let stride = self.outer_stride();
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> KResult<Tensor> {
        let first = parts.first().ok_or_else(|| KernelError::ShapeMismatch {
            op: "stack",
            detail: "no tensors to stack".into(),
        })?;
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.dims != first.dims {
                return Err(KernelError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", p.dims, first.dims),
                });
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { dims, data })
    }

    /// Concatenates along axis 0 of each outer slice, i.e. joins `[A, ...]` and
    /// `[B, ...]` into `[A + B, ...]`.
    pub fn concat0(a: &Tensor, b: &Tensor) -> KResult<Tensor> {
        if a.dims[1..] != b.dims[1..] {
            return Err(KernelError::ShapeMismatch {
                op: "concat0",
                detail: format!("{:?} vs {:?}", a.dims, b.dims),
            });
        }
        let mut dims = a.dims.clone();
        dims[0] += b.dims[0];
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Ok(Tensor { dims, data })
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose2 expects a matrix");
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { dims: vec![c, r], data }
    }

    /// Columns `start..end` of a matrix.
    pub fn columns(&self, start: usize, end: usize) -> Tensor {
        assert_eq!(self.rank(), 2, "columns expects a matrix");
        let (r, c) = (self.dims[0], self.dims[1]);
        assert!(start < end && end <= c);
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor { dims: vec![r, w], data }
    }

    /// Joins matrices with equal row counts side by side.
    pub fn hcat(parts: &[Tensor]) -> Tensor {
        let rows = parts[0].dims[0];
        let width: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for p in parts {
                let c = p.dims[1];
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Tensor {
            dims: vec![rows, width],
            data,
        }
    }
}

fn require_matrix(t: &Tensor, op: &'static str) -> KResult<(usize, usize)> {
    if t.rank() != 2 {
        return Err(KernelError::ShapeMismatch {
            op,
            detail: format!("expected a matrix, got dims {:?}", t.dims),
        });
    }
    Ok((t.dims[0], t.dims[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> KResult<Tensor> {
    let (m, k) = require_matrix(a, "matmul")?;
    let (k2, n) = require_matrix(b, "matmul")?;
    if k != k2 {
        return Err(KernelError::ShapeMismatch {
            op: "matmul",
            detail: format!("[{m}, {k}] x [{k2}, {n}]"),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> KResult<Tensor> {
    let (r, c) = require_matrix(m, "softmax_rows")?;
    m.ensure_finite("softmax_rows")?;
    let mut data = m.data.clone();
    for i in 0..r {
        let row = &mut data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor { dims: vec![r, c], data })
}

/// `softmax(Q Kᵀ / √d)`, the attention score matrix.
pub fn attention_scores(q: &Tensor, k: &Tensor) -> KResult<Tensor> {
    let (nq, d) = require_matrix(q, "attention")?;
    let (_, dk) = require_matrix(k, "attention")?;
    if d != dk {
        return Err(KernelError::ShapeMismatch {
            op: "attention",
            detail: format!("query width {d} vs key width {dk}"),
        });
    }
    q.ensure_finite("attention")?;
    k.ensure_finite("attention")?;
    let mut logits = matmul(q, &k.transpose2())?;
    let inv = 1.0 / (d as f64).sqrt();
    for v in logits.data.iter_mut() {
        *v *= inv;
    }
    debug_assert_eq!(logits.dims[0], nq);
    softmax_rows(&logits)
}

/// Scaled dot-product attention returning both the output and the score matrix.
pub fn attention_with_scores(q: &Tensor, k: &Tensor, v: &Tensor) -> KResult<(Tensor, Tensor)> {
    let (nk, _) = require_matrix(k, "attention")?;
    let (nv, _) = require_matrix(v, "attention")?;
    if nk != nv {
        return Err(KernelError::ShapeMismatch {
            op: "attention",
            detail: format!("{nk} keys vs {nv} values"),
        });
    }
    v.ensure_finite("attention")?;
    let scores = attention_scores(q, k)?;
    let out = matmul(&scores, v)?;
    Ok((out, scores))
}

pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> KResult<Tensor> {
    attention_with_scores(q, k, v).map(|(out, _)| out)
}

/// Worker threads available to kernels, from `AV2V_THREADS` (unset or 0 means
/// the sequential reference path).
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("AV2V_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0)
    })
}

/// Zero-padded "same" cross-correlation of `x: [C_in, H, W]` with
/// `kernel: [C_out, C_in, K, K]` for odd `K`.
pub fn conv2d(x: &Tensor, kernel: &Tensor) -> KResult<Tensor> {
    conv2d_with_threads(x, kernel, kernel_threads())
}

pub(crate) fn conv2d_with_threads(x: &Tensor, kernel: &Tensor, threads: usize) -> KResult<Tensor> {
    if x.rank() != 3 || kernel.rank() != 4 {
        return Err(KernelError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input {:?}, kernel {:?}", x.dims, kernel.dims),
        });
    }
    let (cin, h, w) = (x.dims[0], x.dims[1], x.dims[2]);
    let (cout, kcin, kh, kw) = (kernel.dims[0], kernel.dims[1], kernel.dims[2], kernel.dims[3]);
    if kcin != cin {
        return Err(KernelError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {cin} channels, kernel expects {kcin}"),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(KernelError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel must be square and odd, got {kh}x{kw}"),
        });
    }
    x.ensure_finite("conv2d")?;
    kernel.ensure_finite("conv2d")?;

    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    let per_channel = |co: usize, dst: &mut [f64]| {
        let r = (kh / 2) as isize;
        for ci in 0..cin {
            let src = &x.data[ci * plane..(ci + 1) * plane];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = kernel.data[((co * cin + ci) * kh + ki) * kw + kj];
                    let di = ki as isize - r;
                    let dj = kj as isize - r;
                    let i0 = (-di).max(0) as usize;
                    let i1 = (h as isize - di).min(h as isize).max(0) as usize;
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                    for i in i0..i1 {
                        let si = (i as isize + di) as usize;
                        let drow = &mut dst[i * w..(i + 1) * w];
                        let srow = &src[si * w..(si + 1) * w];
                        for j in j0..j1 {
                            drow[j] += wv * srow[(j as isize + dj) as usize];
                        }
                    }
                }
            }
        }
    };

    let work = cout * cin * kh * kw * plane;
    if threads > 1 && cout > 1 && work >= 1 << 16 {
        let chunk = cout.div_ceil(threads);
        std::thread::scope(|s| {
            for (block, dst) in out.chunks_mut(chunk * plane).enumerate() {
                let per_channel = &per_channel;
                s.spawn(move || {
                    for (off, d) in dst.chunks_mut(plane).enumerate() {
                        per_channel(block * chunk + off, d);
                    }
                });
            }
        });
    } else {
        for (co, d) in out.chunks_mut(plane).enumerate() {
            per_channel(co, d);
        }
    }
    Ok(Tensor {
        dims: vec![cout, h, w],
        data: out,
    })
}

/// Group normalization of `x: [C, ...]` with per-channel affine parameters.
pub fn group_normalize(x: &Tensor, groups: usize, gain: &[f64], bias: &[f64], eps: f64) -> KResult<Tensor> {
    let c = x.dims[0];
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(KernelError::Config {
            op: "group_normalize",
            detail: format!("{c} channels cannot be split into {groups} groups"),
        });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(KernelError::Config {
            op: "group_normalize",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    if gain.len() != c || bias.len() != c {
        return Err(KernelError::ShapeMismatch {
            op: "group_normalize",
            detail: format!("{c} channels, gain {} / bias {}", gain.len(), bias.len()),
        });
    }
    x.ensure_finite("group_normalize")?;
    let per_ch = x.outer_stride();
    let cpg = c / groups;
    let mut out = x.data.clone();
    for g in 0..groups {
        let span = g * cpg * per_ch..(g + 1) * cpg * per_ch;
        let vals = &x.data[span.clone()];
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ch in g * cpg..(g + 1) * cpg {
            for v in &mut out[ch * per_ch..(ch + 1) * per_ch] {
                *v = (*v - mean) * inv * gain[ch] + bias[ch];
            }
        }
    }
    Ok(Tensor {
        dims: x.dims.clone(),
        data: out,
    })
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_and_saturated() {
        let s = softmax_rows(&mat(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&mat(1, 2, &[1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        let s = softmax_rows(&mat(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.data()[i] - x.exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax_rows(&mat(1, 2, &[f64::NAN, 0.0])).unwrap_err();
        assert!(matches!(err, KernelError::NonFinite { .. }));
        assert!(softmax_rows(&mat(1, 2, &[f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn single_token_attention_returns_value() {
        let q = mat(1, 3, &[0.3, -1.0, 2.0]);
        let k = mat(1, 3, &[1.0, 0.5, -0.2]);
        let v = mat(1, 3, &[4.0, 5.0, 6.0]);
        assert_eq!(scaled_dot_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn constant_keys_average_values() {
        let q = mat(3, 2, &[1.0, 2.0, -3.0, 0.5, 0.0, 9.0]);
        let k = mat(3, 2, &[0.7, -0.1, 0.7, -0.1, 0.7, -0.1]);
        let v = mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert!((out.data()[i * 2] - 3.0).abs() < 1e-12);
            assert!((out.data()[i * 2 + 1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_brute_force_2x2() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut r = || -> Vec<f64> { (0..4).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (q, k, v) = (r(), r(), r());
        let out = scaled_dot_attention(&mat(2, 2, &q), &mat(2, 2, &k), &mat(2, 2, &v)).unwrap();
        let sd = 2f64.sqrt();
        for i in 0..2 {
            let l: Vec<f64> = (0..2)
                .map(|j| (q[i * 2] * k[j * 2] + q[i * 2 + 1] * k[j * 2 + 1]) / sd)
                .collect();
            let e: Vec<f64> = l.iter().map(|x| x.exp()).collect();
            let z = e[0] + e[1];
            for c in 0..2 {
                let want = (e[0] * v[c] + e[1] * v[2 + c]) / z;
                assert!((out.data()[i * 2 + c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let q = mat(2, 2, &[0.0; 4]);
        let k = mat(2, 3, &[0.0; 6]);
        assert!(scaled_dot_attention(&q, &k, &k).is_err());
    }

    #[test]
    fn conv_identity_and_zero() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let mut k = Tensor::zeros(&[2, 2, 3, 3]);
        // centre taps of the (0, 0) and (1, 1) kernels
        k.data_mut()[4] = 1.0;
        k.data_mut()[3 * 9 + 4] = 1.0;
        assert_eq!(conv2d(&x, &k).unwrap(), x);
        let z = Tensor::zeros(&[2, 3, 4]);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f64);
        assert!(conv2d(&z, &k).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_box_filter_matches_neighborhood_sums() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| (i * i) as f64 * 0.25 - 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k).unwrap();
        for i in 0..4i32 {
            for j in 0..4i32 {
                let mut s = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (a, b) = (i + di, j + dj);
                        if (0..4).contains(&a) && (0..4).contains(&b) {
                            s += x.data()[(a * 4 + b) as usize];
                        }
                    }
                }
                assert!((y.data()[(i * 4 + j) as usize] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k), Err(KernelError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_parallel_path_is_bit_identical() {
        let x = Tensor::from_fn(&[8, 9, 7], |i| ((i * 37 % 101) as f64).sin());
        let k = Tensor::from_fn(&[12, 8, 3, 3], |i| ((i * 13 % 17) as f64 - 8.0) / 9.0);
        let seq = conv2d_with_threads(&x, &k, 0).unwrap();
        for t in [2, 3, 5] {
            assert!(conv2d_with_threads(&x, &k, t).unwrap().bitwise_eq(&seq));
        }
    }

    #[test]
    fn group_norm_cases() {
        let x = Tensor::full(&[2, 2, 2], 3.5);
        let y = group_normalize(&x, 1, &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let y = group_normalize(&x, 2, &[0.0, 0.0], &[0.25, -1.0], 1e-5).unwrap();
        assert_eq!(&y.data()[..4], &[0.25; 4]);
        assert_eq!(&y.data()[4..], &[-1.0; 4]);

        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eps = 1e-5;
        let y = group_normalize(&x, 1, &[1.0], &[0.0], eps).unwrap();
        let (mean, var) = (2.5, 1.25);
        for (i, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!((y.data()[i] - (v - mean) / (var + eps).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible() {
        let x = Tensor::zeros(&[3, 2, 2]);
        let err = group_normalize(&x, 2, &[1.0; 3], &[0.0; 3], 1e-5).unwrap_err();
        assert!(matches!(err, KernelError::Config { .. }));
    }

    #[test]
    fn tensor_rejects_bad_dims() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c).prop_map(move |v| Tensor::new(vec![r, c], v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in arb_matrix(), shift in -100.0f64..100.0) {
            let s = softmax_rows(&m).unwrap();
            let c = m.dims()[1];
            for row in s.data().chunks(c) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let shifted = softmax_rows(&m.map(|v| v + shift)).unwrap();
            prop_assert!(shifted.max_abs_diff(&s) < 1e-12);
        }

        #[test]
        fn attention_is_permutation_equivariant(
            vals in proptest::collection::vec(-2.0f64..2.0, 3 * 4 * 3),
            rot in 1usize..4,
        ) {
            let n = 4;
            let q = Tensor::new(vec![n, 3], vals[..12].to_vec()).unwrap();
            let k = Tensor::new(vec![n, 3], vals[12..24].to_vec()).unwrap();
            let v = Tensor::new(vec![n, 3], vals[24..].to_vec()).unwrap();
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let qp = Tensor::stack(&perm.iter().map(|&i| q.outer(i)).collect::<Vec<_>>()).unwrap();
            let outp = scaled_dot_attention(&qp, &k, &v).unwrap();
            for (row, &src) in perm.iter().enumerate() {
                prop_assert_eq!(outp.outer_slice(row), out.outer_slice(src));
            }
        }

        #[test]
        fn conv_is_linear(
            xs in proptest::collection::vec(-1.0f64..1.0, 2 * 5 * 4),
            ys in proptest::collection::vec(-1.0f64..1.0, 2 * 5 * 4),
            ks in proptest::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x = Tensor::new(vec![2, 5, 4], xs).unwrap();
            let y = Tensor::new(vec![2, 5, 4], ys).unwrap();
            let k = Tensor::new(vec![3, 2, 3, 3], ks).unwrap();
            let lhs = conv2d(&x.lincomb(a, &y, b).unwrap(), &k).unwrap();
            let rhs = conv2d(&x, &k).unwrap().lincomb(a, &conv2d(&y, &k).unwrap(), b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }

        #[test]
        fn group_norm_standardizes(vals in proptest::collection::vec(-10.0f64..10.0, 4 * 3 * 3)) {
            let x = Tensor::new(vec![4, 3, 3], vals).unwrap();
            for g in x.data().chunks(18) {
                let m = g.iter().sum::<f64>() / 18.0;
                prop_assume!(g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 18.0 > 1e-3);
            }
            let y = group_normalize(&x, 2, &[1.0; 4], &[0.0; 4], 1e-12).unwrap();
            for g in y.data().chunks(18) {
                let m = g.iter().sum::<f64>() / 18.0;
                let v = g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 18.0;
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }
}
