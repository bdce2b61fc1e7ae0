//! Naive loop implementations used as test oracles.
//!
//! Everything here trades speed for obviousness: plain nested loops, no
//! blocking, no stride tricks. The optimized kernels in `tensor` are tested
//! against these, never the other way round.

use crate::tensor::Tensor;

/// 3D cross-correlation over `[C_in, T, H, W]` input with `[C_out, C_in, Kt, Kh, Kw]`
/// weights, zero padding `pad = (pt, ph, pw)` and stride `stride = (st, sh, sw)`.
/// Output extent per axis is `(in + 2*pad - k) / stride + 1`.
pub fn conv3d_loop(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Tensor {
    let (ci, t, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, kt, kh, kw) = (
        w.shape()[0],
        w.shape()[1],
        w.shape()[2],
        w.shape()[3],
        w.shape()[4],
    );
    assert_eq!(ci, wci, "channel mismatch");
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = pad;
    let ot = (t + 2 * pt - kt) / st + 1;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (wd + 2 * pw - kw) / sw + 1;

    let mut out = Tensor::zeros(&[co, ot, oh, ow]);
    for oc in 0..co {
        let b = bias.map_or(0.0, |b| b.at(&[oc]));
        for zt in 0..ot {
            for zy in 0..oh {
                for zx in 0..ow {
                    let mut acc = b;
                    for ic in 0..ci {
                        for dt in 0..kt {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let it = (zt * st + dt) as isize - pt as isize;
                                    let iy = (zy * sh + dy) as isize - ph as isize;
                                    let ix = (zx * sw + dx) as isize - pw as isize;
                                    if it < 0
                                        || iy < 0
                                        || ix < 0
                                        || it >= t as isize
                                        || iy >= h as isize
                                        || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    acc += x.at(&[ic, it as usize, iy as usize, ix as usize])
                                        * w.at(&[oc, ic, dt, dy, dx]);
                                }
                            }
                        }
                    }
                    out.set(&[oc, zt, zy, zx], acc);
                }
            }
        }
    }
    out
}

/// Plain `[M, K] x [K, N]` matrix product.
pub fn matmul_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, kb, "inner dimension mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], acc);
        }
    }
    out
}

/// Row-wise affine map: `[N, D] x [D, O] + bias[O]`.
pub fn linear_loop(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let mut out = matmul_loop(x, w);
    if let Some(b) = bias {
        let (n, o) = (out.shape()[0], out.shape()[1]);
        for i in 0..n {
            for j in 0..o {
                let v = out.at(&[i, j]) + b.at(&[j]);
                out.set(&[i, j], v);
            }
        }
    }
    out
}

/// Softmax along the last axis of a rank-2 tensor, max-subtracted for stability.
pub fn softmax_rows_loop(x: &Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..d {
            mx = mx.max(x.at(&[i, j]));
        }
        let mut z = 0.0;
        for j in 0..d {
            z += (x.at(&[i, j]) - mx).exp();
        }
        for j in 0..d {
            out.set(&[i, j], (x.at(&[i, j]) - mx).exp() / z);
        }
    }
    out
}

/// Single-head scaled dot-product attention: queries `[Nq, D]`, keys/values
/// `[Nk, D]`; scores divided by sqrt(D) before the row softmax.
pub fn attention_loop(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let d = q.shape()[1];
    assert_eq!(k.shape()[1], d);
    assert_eq!(v.shape()[0], k.shape()[0]);
    let mut scores = matmul_loop(q, &transpose_loop(k));
    let scale = 1.0 / (d as f64).sqrt();
    for v in scores.data_mut() {
        *v *= scale;
    }
    let attn = softmax_rows_loop(&scores);
    matmul_loop(&attn, v)
}

pub fn transpose_loop(x: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.set(&[j, i], x.at(&[i, j]));
        }
    }
    out
}

/// Nearest-neighbour spatial resize of a `[C, T, H, W]` tensor to `(new_h, new_w)`.
/// Source index is `floor(dst * src_extent / dst_extent)`.
pub fn resize_nearest_loop(x: &Tensor, new_h: usize, new_w: usize) -> Tensor {
    let (c, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[c, t, new_h, new_w]);
    for ic in 0..c {
        for it in 0..t {
            for oy in 0..new_h {
                let sy = (oy * h) / new_h;
                for ox in 0..new_w {
                    let sx = (ox * w) / new_w;
                    out.set(&[ic, it, oy, ox], x.at(&[ic, it, sy, sx]));
                }
            }
        }
    }
    out
}

/// Intersection-over-union of two binary masks given as 0/1 f64 buffers.
pub fn mask_iou_loop(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x > 0.5, y > 0.5);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

/// Minimum-cost assignment by exhaustive permutation search. Cost is `[R, C]`
/// with `R <= C`; returns column index per row. Usable only for tiny problems.
pub fn assignment_brute(cost: &Tensor) -> Vec<usize> {
    let (r, c) = (cost.shape()[0], cost.shape()[1]);
    assert!(r <= c, "need rows <= cols");
    let mut cols: Vec<usize> = (0..c).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    permute(&mut cols, 0, r, &mut |perm| {
        let total: f64 = perm.iter().take(r).enumerate().map(|(i, &j)| cost.at(&[i, j])).sum();
        let better = match &best {
            None => true,
            Some((b, _)) => total < *b - 1e-12,
        };
        if better {
            best = Some((total, perm[..r].to_vec()));
        }
    });
    best.unwrap().1
}

fn permute(cols: &mut Vec<usize>, depth: usize, r: usize, visit: &mut impl FnMut(&[usize])) {
    if depth == r {
        visit(cols);
        return;
    }
    for i in depth..cols.len() {
        cols.swap(depth, i);
        permute(cols, depth + 1, r, visit);
        cols.swap(depth, i);
    }
}
