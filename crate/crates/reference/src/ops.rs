//! f64 building blocks used by the reference forward pass and by unit
//! tests as per-op oracles.

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// Max-subtracted softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// In-place row-wise softmax over a [rows, w] buffer.
pub fn softmax_rows(x: &mut [f64], rows: usize, w: usize) {
    for r in 0..rows {
        let row = softmax_row(&x[r * w..(r + 1) * w]);
        x[r * w..(r + 1) * w].copy_from_slice(&row);
    }
}

/// Layer norm of one vector (biased variance, eps inside the sqrt).
pub fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let w = row.len();
    let mean = row.iter().sum::<f64>() / w as f64;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
    let inv = 1.0 / (var + eps).sqrt();
    (0..w)
        .map(|j| (row[j] - mean) * inv * gain[j] + bias[j])
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-normalized cosine similarity matrix of [n, d] node vectors with the
/// zero-norm guard in the denominator.
pub fn cosine_matrix(x: &[f64], n: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut u = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        for j in 0..d {
            u[i * d + j] = row[j] / denom;
        }
    }
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                s += u[i * d + k] * u[j * d + k];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// L2-normalizes each row with the eps guard.
pub fn l2_normalize_rows(x: &[f64], rows: usize, w: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * w..(r + 1) * w];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        for j in 0..w {
            out[r * w + j] = row[j] / denom;
        }
    }
    out
}

/// Stabilized all-pairs Euclidean distances of [b, d] rows.
pub fn pairwise_distances(x: &[f64], b: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let mut s = 0.0;
            for k in 0..d {
                let c = x[i * d + k] - x[j * d + k];
                s += c * c;
            }
            out[i * b + j] = (s + eps).sqrt();
        }
    }
    out
}

/// Batch-mean cross-entropy over [b, k] logits.
pub fn cross_entropy(logits: &[f64], b: usize, k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / b as f64
}

/// Train-mode batch norm over [b, d] with biased column variance.
pub fn batch_norm_train(x: &[f64], gain: &[f64], bias: &[f64], b: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; b * d];
    for j in 0..d {
        let mut mean = 0.0;
        for r in 0..b {
            mean += x[r * d + j];
        }
        mean /= b as f64;
        let mut var = 0.0;
        for r in 0..b {
            let c = x[r * d + j] - mean;
            var += c * c;
        }
        var /= b as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for r in 0..b {
            out[r * d + j] = (x[r * d + j] - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}
