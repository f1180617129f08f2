//! Slice-level numeric kernels shared by the tape and the incremental decoder.
//!
//! All matrices are row-major. Accumulation order is fixed (ascending inner
//! index) so that a row computed here alone matches the same row computed as
//! part of a larger product bit-for-bit.

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
    c
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Numerically stable softmax of one row, optionally restricted to the
/// first `valid` entries (the rest are set to zero).
pub fn softmax_row(x: &[f64], out: &mut [f64], valid: usize) {
    let max = x[..valid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for j in 0..valid {
        let e = (x[j] - max).exp();
        out[j] = e;
        sum += e;
    }
    for v in out[..valid].iter_mut() {
        *v /= sum;
    }
    for v in out[valid..].iter_mut() {
        *v = 0.0;
    }
}

pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Layer normalization of one row; returns the reciprocal standard deviation.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
    }
    rstd
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        // aᵀ stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = vec![0.0; 4];
        matmul_tn_acc(&mut c2, &at, &b, 3, 2, 2);
        assert_eq!(c2, c);
    }

    #[test]
    fn entropy_of_half_quarter_quarter() {
        let h = entropy(&[0.5, 0.25, 0.25]);
        assert!((h - 1.0397207708399179).abs() < 1e-12);
    }
}
