//! Plain numeric kernels on tensors and slices. The tape in `graph.rs` calls
//! into these for its forward passes; the weighting and retrieval code uses
//! them directly on detached values.

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-12;
pub const KL_CLAMP: f64 = 1e-8;
const DISTRIBUTION_TOL: f64 = 1e-4;

/// Strided read-only matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], off: usize, row_stride: usize) -> Self {
        Self {
            data,
            off,
            rs: row_stride,
            cs: 1,
        }
    }

    /// The transpose of a row-major view.
    pub fn t(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm operand out of bounds");
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with `c` row-major at
/// `c_off` and row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
) {
    a.check(m, k);
    b.check(k, n);
    if m > 0 && n > 0 {
        assert!(c_off + (m - 1) * rsc + n - 1 < c.len(), "gemm output out of bounds");
    }
    // SAFETY: every index touched by dgemm was bounds-checked above and the
    // output slice is borrowed mutably, so it cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        MatRef::rows(a.data(), 0, k),
        MatRef::rows(b.data(), 0, n),
        0.0,
        &mut out,
        0,
        n,
    );
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::Rank {
            op: "transpose",
            expected: 2,
            shape: a.shape().to_vec(),
        });
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// In-place softmax over each contiguous row of width `cols`.
pub fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Rank {
            op: "softmax",
            expected: axis + 1,
            shape: shape.to_vec(),
        });
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (e, slot) in lane.iter_mut().enumerate() {
                *slot = out[base + e * inner];
            }
            softmax_rows_inplace(&mut lane, extent);
            for (e, v) in lane.iter().enumerate() {
                out[base + e * inner] = *v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Normalized rows plus the per-row inverse standard deviations, which the
/// tape keeps for the backward pass.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = s;
        for c in 0..cols {
            let h = (row[c] - mean) * s;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (out, xhat, inv_std)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, cols) = x.matrix_dims();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let (out, _, _) = layer_norm_forward(x.data(), cols, gain.data(), bias.data());
    Tensor::new(x.shape().to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// The tanh term of the GELU approximation, shared by value and derivative.
/// Written through `exp`, which is several times cheaper than libm's `tanh`
/// and accurate to about 1e-16 absolute.
pub fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn gelu_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    gelu_from_tanh(x, gelu_tanh(x))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit L2 norm; vectors with norm at or below 1e-12 map to
/// the zero vector.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > NORM_EPS {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn check_distribution(what: &'static str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| x.is_nan() || x < 0.0) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::Normalization { what, sum });
    }
    Ok(())
}

/// Per-element terms `p_i (ln p_i - ln max(q_i, 1e-8))` of KL(p ‖ q).
/// Terms with `p_i = 0` are zero.
pub fn kl_contributions(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence", &[p.len()], &[q.len()]));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                pi * (pi.ln() - qi.max(KL_CLAMP).ln())
            } else {
                0.0
            }
        })
        .collect())
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(kl_contributions(p, q)?.iter().sum())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::DegenerateVector {
            op: "cosine_similarity",
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
