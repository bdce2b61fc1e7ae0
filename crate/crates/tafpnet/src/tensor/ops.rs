//! Raw numeric kernels shared by forward and backward passes. All matmul
//! variants walk rows of both operands contiguously.

/// c[M,N] += a[M,K] * b[K,N]
pub fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[M,K] += a[M,N] * b[K,N]^T
pub fn mm_tb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + j] += dot;
        }
    }
}

/// c[K,N] += a[M,K]^T * b[M,N]
pub fn mm_ta_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for j in 0..k {
            let av = a[p * k + j];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[j * n..(j + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Softmax along `axis`, max-subtracted. `shape` describes `x`; `out` is
/// written in place.
pub fn softmax_axis(x: &[f64], out: &mut [f64], shape: &[usize], axis: usize) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..n {
                mx = mx.max(x[base + i * inner]);
            }
            let mut z = 0.0;
            for i in 0..n {
                let e = (x[base + i * inner] - mx).exp();
                out[base + i * inner] = e;
                z += e;
            }
            for i in 0..n {
                out[base + i * inner] /= z;
            }
        }
    }
}

/// Backward of softmax given its output `y`: dx = y * (dy - sum(dy * y)).
pub fn softmax_backward_axis(
    y: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    shape: &[usize],
    axis: usize,
) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            let mut s = 0.0;
            for i in 0..n {
                s += dy[base + i * inner] * y[base + i * inner];
            }
            for i in 0..n {
                let idx = base + i * inner;
                dx[idx] += y[idx] * (dy[idx] - s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{matmul_loop, softmax_rows_loop, transpose_loop};
    use crate::tensor::{Tensor, rand_uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mm_variants_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let b = rand_uniform(&mut rng, &[3, 5], -1.0, 1.0);
        let want = matmul_loop(&a, &b);

        let mut c = vec![0.0; 20];
        mm_acc(a.data(), b.data(), &mut c, 4, 3, 5);
        assert!(Tensor::from_vec(&[4, 5], c).unwrap().max_abs_diff(&want) <= 1e-12);

        // a * b == a * (b^T)^T exercises mm_tb.
        let bt = transpose_loop(&b);
        let mut c = vec![0.0; 20];
        mm_tb_acc(a.data(), bt.data(), &mut c, 4, 3, 5);
        assert!(Tensor::from_vec(&[4, 5], c).unwrap().max_abs_diff(&want) <= 1e-12);

        // a * b == (a^T)^T * b exercises mm_ta.
        let at = transpose_loop(&a);
        let mut c = vec![0.0; 20];
        mm_ta_acc(at.data(), b.data(), &mut c, 3, 4, 5);
        assert!(Tensor::from_vec(&[4, 5], c).unwrap().max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn softmax_matches_row_oracle_and_handles_inner_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_uniform(&mut rng, &[3, 4], -3.0, 3.0);
        let mut out = vec![0.0; 12];
        softmax_axis(x.data(), &mut out, x.shape(), 1);
        let want = softmax_rows_loop(&x);
        assert!(Tensor::from_vec(&[3, 4], out).unwrap().max_abs_diff(&want) <= 1e-12);

        // Axis 0 of the transpose must agree with axis 1 of the original.
        let xt = transpose_loop(&x);
        let mut out_t = vec![0.0; 12];
        softmax_axis(xt.data(), &mut out_t, xt.shape(), 0);
        let got = transpose_loop(&Tensor::from_vec(&[4, 3], out_t).unwrap());
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let x = [1000.0, 0.0];
        let mut out = [0.0; 2];
        softmax_axis(&x, &mut out, &[2], 0);
        assert!(out[0] > 1.0 - 1e-12 && out[1] < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
