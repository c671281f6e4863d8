//! Forward and backward kernels on raw row-major buffers.
//!
//! Matrix products accumulate in `f32` (eight independent lanes for inner
//! products, axpy form otherwise); row statistics and softmax denominators
//! accumulate in `f64`.

/// `out[m x n] = a[m x k] * b[k x n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m x n] = a[m x k] * b[n x k]^T`
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[m x n] = a[k x m]^T * b[k x n]`
pub fn matmul_at(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Inner product with eight fixed accumulation lanes (deterministic order).
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

pub fn softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        let o = &mut out[r * cols..(r + 1) * cols];
        for (oi, &v) in o.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *oi = e;
            sum += e as f64;
        }
        let inv = (1.0 / sum) as f32;
        for oi in o.iter_mut() {
            *oi *= inv;
        }
    }
    out
}

pub fn softmax_rows_backward(y: &[f32], dy: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        let (yr, dyr) = (&y[s.clone()], &dy[s.clone()]);
        let inner: f64 = yr.iter().zip(dyr).map(|(&a, &b)| a as f64 * b as f64).sum();
        let inner = inner as f32;
        for ((d, &yv), &g) in dx[s].iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    dx
}

/// Per-row mean and standard deviation `sqrt(var + eps)` (biased variance).
pub fn row_stats(x: &[f32], rows: usize, cols: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let mut means = Vec::with_capacity(rows);
    let mut sigmas = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = xr
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / cols as f64;
        means.push(mean as f32);
        sigmas.push((var + eps as f64).sqrt() as f32);
    }
    (means, sigmas)
}

pub fn row_means(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    (0..rows)
        .map(|r| {
            let xr = &x[r * cols..(r + 1) * cols];
            (xr.iter().map(|&v| v as f64).sum::<f64>() / cols as f64) as f32
        })
        .collect()
}

/// `n = (x - mean) / sigma` per row.
pub fn normalize_rows(x: &[f32], means: &[f32], sigmas: &[f32], cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for (r, (&mu, &sd)) in means.iter().zip(sigmas).enumerate() {
        for &v in &x[r * cols..(r + 1) * cols] {
            out.push((v - mu) / sd);
        }
    }
    out
}

/// `out = n * gamma + beta` with per-column gain and bias.
pub fn affine_rows(n: &[f32], gamma: &[f32], beta: &[f32], cols: usize) -> Vec<f32> {
    n.chunks(cols)
        .flat_map(|row| {
            row.iter()
                .zip(gamma)
                .zip(beta)
                .map(|((&v, &g), &b)| v * g + b)
        })
        .collect()
}

/// Input gradient of layer normalization.
///
/// With `frozen` the denominators are treated as constants, so only the mean
/// subtraction is differentiated.
pub fn layernorm_backward_input(
    dn: &[f32],
    n: &[f32],
    sigmas: &[f32],
    cols: usize,
    frozen: bool,
) -> Vec<f32> {
    let mut dx = vec![0.0f32; dn.len()];
    for (r, &sd) in sigmas.iter().enumerate() {
        let s = r * cols..(r + 1) * cols;
        let (dnr, nr) = (&dn[s.clone()], &n[s.clone()]);
        let mean_dn = (dnr.iter().map(|&v| v as f64).sum::<f64>() / cols as f64) as f32;
        let mean_dn_n = if frozen {
            0.0
        } else {
            (dnr.iter()
                .zip(nr)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                / cols as f64) as f32
        };
        for ((d, &g), &nv) in dx[s].iter_mut().zip(dnr).zip(nr) {
            *d = (g - mean_dn - nv * mean_dn_n) / sd;
        }
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Zero-padded sliding windows: row `t` of the output is the concatenation of
/// input rows `t - kernel/2 ..= t + kernel/2` (out-of-range rows are zero).
pub fn unfold_rows(x: &[f32], rows: usize, cols: usize, kernel: usize) -> Vec<f32> {
    let half = kernel / 2;
    let mut out = vec![0.0f32; rows * kernel * cols];
    for t in 0..rows {
        for j in 0..kernel {
            let src = t as isize + j as isize - half as isize;
            if src < 0 || src >= rows as isize {
                continue;
            }
            let src = src as usize;
            let dst = t * kernel * cols + j * cols;
            out[dst..dst + cols].copy_from_slice(&x[src * cols..(src + 1) * cols]);
        }
    }
    out
}

pub fn unfold_rows_backward(dy: &[f32], rows: usize, cols: usize, kernel: usize) -> Vec<f32> {
    let half = kernel / 2;
    let mut dx = vec![0.0f32; rows * cols];
    for t in 0..rows {
        for j in 0..kernel {
            let src = t as isize + j as isize - half as isize;
            if src < 0 || src >= rows as isize {
                continue;
            }
            let src = src as usize;
            let from = t * kernel * cols + j * cols;
            for (d, &g) in dx[src * cols..(src + 1) * cols]
                .iter_mut()
                .zip(&dy[from..from + cols])
            {
                *d += g;
            }
        }
    }
    dx
}
