//! 3D convolution kernels (cross-correlation) over `[C, T, H, W]` tensors.
//!
//! All loops are arranged per kernel tap: for a fixed (c_out, c_in, dt, dy, dx)
//! the inner work is an AXPY (or dot) over a contiguous W row, which the
//! compiler vectorizes. Stride 1 takes the fast path; the general strided
//! form only runs in the backbone's downsampling blocks.

use super::Tensor;
use crate::error::{Error, Result};

/// Output extents for a conv over `in_shape = [C, T, H, W]`.
pub fn conv3d_out_shape(
    in_shape: &[usize],
    k_shape: &[usize],
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Result<Vec<usize>> {
    if in_shape.len() != 4 {
        return Err(Error::shape("conv3d", format!("input must be rank 4, got {in_shape:?}")));
    }
    if k_shape.len() != 5 {
        return Err(Error::shape("conv3d", format!("kernel must be rank 5, got {k_shape:?}")));
    }
    if in_shape[0] != k_shape[1] {
        return Err(Error::AxisMismatch {
            op: "conv3d",
            axis: "input channels",
            expected: k_shape[1],
            got: in_shape[0],
        });
    }
    let names = ["T", "H", "W"];
    let mut out = vec![k_shape[0]];
    let strides = [stride.0, stride.1, stride.2];
    let pads = [pad.0, pad.1, pad.2];
    for i in 0..3 {
        let padded = in_shape[1 + i] + 2 * pads[i];
        let k = k_shape[2 + i];
        if k == 0 || strides[i] == 0 {
            return Err(Error::shape("conv3d", "zero kernel extent or stride"));
        }
        if k > padded {
            return Err(Error::AxisMismatch {
                op: "conv3d",
                axis: names[i],
                expected: k,
                got: padded,
            });
        }
        out.push((padded - k) / strides[i] + 1);
    }
    Ok(out)
}

/// Padding that preserves T, H, W for odd kernel extents.
pub fn same_pad(k_shape: &[usize]) -> (usize, usize, usize) {
    (k_shape[2] / 2, k_shape[3] / 2, k_shape[4] / 2)
}

pub fn conv3d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Result<Tensor> {
    let out_shape = conv3d_out_shape(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [w.shape()[0]] {
            return Err(Error::AxisMismatch {
                op: "conv3d",
                axis: "bias",
                expected: w.shape()[0],
                got: b.numel(),
            });
        }
    }
    let g = Geom::new(x.shape(), w.shape(), &out_shape, stride, pad);
    let mut out = vec![0.0; out_shape.iter().product()];

    if let Some(b) = bias {
        for co in 0..g.co {
            let v = b.data()[co];
            out[co * g.out_per_c..(co + 1) * g.out_per_c].fill(v);
        }
    }

    let xd = x.data();
    let wd = w.data();
    if stride == (1, 1, 1) {
        for_each_tap(&g, wd, |co, ci, dt, dy, dx, wv| {
            let (zx0, zx1) = g.valid_zx(dx);
            if zx0 >= zx1 {
                return;
            }
            for zt in g.valid_zt(dt) {
                let it = (zt + dt) - g.pt;
                for zy in g.valid_zy(dy) {
                    let iy = (zy + dy) - g.ph;
                    let src = &xd[g.x_row(ci, it, iy) + (zx0 + dx - g.pw)..][..zx1 - zx0];
                    let dst = &mut out[g.o_row(co, zt, zy) + zx0..][..zx1 - zx0];
                    axpy(wv, src, dst);
                }
            }
        });
    } else {
        for_each_tap(&g, wd, |co, ci, dt, dy, dx, wv| {
            for zt in 0..g.ot {
                let it = zt * g.st + dt;
                if it < g.pt || it - g.pt >= g.t {
                    continue;
                }
                let it = it - g.pt;
                for zy in 0..g.oh {
                    let iy = zy * g.sh + dy;
                    if iy < g.ph || iy - g.ph >= g.h {
                        continue;
                    }
                    let iy = iy - g.ph;
                    let xrow = g.x_row(ci, it, iy);
                    let orow = g.o_row(co, zt, zy);
                    for zx in 0..g.ow {
                        let ix = zx * g.sw + dx;
                        if ix < g.pw || ix - g.pw >= g.w {
                            continue;
                        }
                        out[orow + zx] += wv * xd[xrow + ix - g.pw];
                    }
                }
            }
        });
    }
    Tensor::new(out_shape, out)
}

/// Gradient w.r.t. the conv input.
pub fn conv3d_backward_data(
    dout: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Tensor {
    let g = Geom::new(x_shape, w.shape(), dout.shape(), stride, pad);
    let mut dx = vec![0.0; x_shape.iter().product()];
    let dod = dout.data();
    let wd = w.data();
    if stride == (1, 1, 1) {
        for_each_tap(&g, wd, |co, ci, dt, dy, dx_, wv| {
            let (zx0, zx1) = g.valid_zx(dx_);
            if zx0 >= zx1 {
                return;
            }
            for zt in g.valid_zt(dt) {
                let it = (zt + dt) - g.pt;
                for zy in g.valid_zy(dy) {
                    let iy = (zy + dy) - g.ph;
                    let src = &dod[g.o_row(co, zt, zy) + zx0..][..zx1 - zx0];
                    let dst = &mut dx[g.x_row(ci, it, iy) + (zx0 + dx_ - g.pw)..][..zx1 - zx0];
                    axpy(wv, src, dst);
                }
            }
        });
    } else {
        for_each_tap(&g, wd, |co, ci, dt, dy, dx_, wv| {
            for zt in 0..g.ot {
                let it = zt * g.st + dt;
                if it < g.pt || it - g.pt >= g.t {
                    continue;
                }
                let it = it - g.pt;
                for zy in 0..g.oh {
                    let iy = zy * g.sh + dy;
                    if iy < g.ph || iy - g.ph >= g.h {
                        continue;
                    }
                    let iy = iy - g.ph;
                    let xrow = g.x_row(ci, it, iy);
                    let orow = g.o_row(co, zt, zy);
                    for zx in 0..g.ow {
                        let ix = zx * g.sw + dx_;
                        if ix < g.pw || ix - g.pw >= g.w {
                            continue;
                        }
                        dx[xrow + ix - g.pw] += wv * dod[orow + zx];
                    }
                }
            }
        });
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

/// Gradient w.r.t. the conv kernel.
pub fn conv3d_backward_weight(
    dout: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Tensor {
    let g = Geom::new(x.shape(), w_shape, dout.shape(), stride, pad);
    let mut dw = vec![0.0; w_shape.iter().product()];
    let xd = x.data();
    let dod = dout.data();
    let taps = g.kt * g.kh * g.kw;
    for co in 0..g.co {
        for ci in 0..g.ci {
            for dt in 0..g.kt {
                for dy in 0..g.kh {
                    for dxk in 0..g.kw {
                        let mut acc = 0.0;
                        if (g.st, g.sh, g.sw) == (1, 1, 1) {
                            let (zx0, zx1) = g.valid_zx(dxk);
                            if zx0 < zx1 {
                                for zt in g.valid_zt(dt) {
                                    let it = (zt + dt) - g.pt;
                                    for zy in g.valid_zy(dy) {
                                        let iy = (zy + dy) - g.ph;
                                        let a = &dod[g.o_row(co, zt, zy) + zx0..][..zx1 - zx0];
                                        let b = &xd[g.x_row(ci, it, iy) + (zx0 + dxk - g.pw)..]
                                            [..zx1 - zx0];
                                        acc += dot(a, b);
                                    }
                                }
                            }
                        } else {
                            for zt in 0..g.ot {
                                let it = zt * g.st + dt;
                                if it < g.pt || it - g.pt >= g.t {
                                    continue;
                                }
                                let it = it - g.pt;
                                for zy in 0..g.oh {
                                    let iy = zy * g.sh + dy;
                                    if iy < g.ph || iy - g.ph >= g.h {
                                        continue;
                                    }
                                    let iy = iy - g.ph;
                                    let xrow = g.x_row(ci, it, iy);
                                    let orow = g.o_row(co, zt, zy);
                                    for zx in 0..g.ow {
                                        let ix = zx * g.sw + dxk;
                                        if ix < g.pw || ix - g.pw >= g.w {
                                            continue;
                                        }
                                        acc += dod[orow + zx] * xd[xrow + ix - g.pw];
                                    }
                                }
                            }
                        }
                        dw[((co * g.ci + ci) * taps)
                            + (dt * g.kh + dy) * g.kw
                            + dxk] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_parts(w_shape.to_vec(), dw)
}

pub fn conv3d_backward_bias(dout: &Tensor) -> Tensor {
    let co = dout.shape()[0];
    let per_c = dout.numel() / co;
    let mut db = vec![0.0; co];
    for (c, slot) in db.iter_mut().enumerate() {
        *slot = dout.data()[c * per_c..(c + 1) * per_c].iter().sum();
    }
    Tensor::from_parts(vec![co], db)
}

struct Geom {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    ot: usize,
    oh: usize,
    ow: usize,
    st: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    ph: usize,
    pw: usize,
    out_per_c: usize,
}

impl Geom {
    fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        out_shape: &[usize],
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Geom {
        Geom {
            ci: x_shape[0],
            t: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            co: w_shape[0],
            kt: w_shape[2],
            kh: w_shape[3],
            kw: w_shape[4],
            ot: out_shape[1],
            oh: out_shape[2],
            ow: out_shape[3],
            st: stride.0,
            sh: stride.1,
            sw: stride.2,
            pt: pad.0,
            ph: pad.1,
            pw: pad.2,
            out_per_c: out_shape[1] * out_shape[2] * out_shape[3],
        }
    }

    fn x_row(&self, c: usize, t: usize, y: usize) -> usize {
        ((c * self.t + t) * self.h + y) * self.w
    }

    fn o_row(&self, c: usize, t: usize, y: usize) -> usize {
        ((c * self.ot + t) * self.oh + y) * self.ow
    }

    /// Stride-1 only: output positions along an axis whose tap lands in-bounds.
    fn valid_zt(&self, dt: usize) -> std::ops::Range<usize> {
        self.pt.saturating_sub(dt)..(self.t + self.pt).saturating_sub(dt).min(self.ot)
    }

    fn valid_zy(&self, dy: usize) -> std::ops::Range<usize> {
        self.ph.saturating_sub(dy)..(self.h + self.ph).saturating_sub(dy).min(self.oh)
    }

    fn valid_zx(&self, dx: usize) -> (usize, usize) {
        (self.pw.saturating_sub(dx), (self.w + self.pw).saturating_sub(dx).min(self.ow))
    }
}

fn for_each_tap(g: &Geom, wd: &[f64], mut f: impl FnMut(usize, usize, usize, usize, usize, f64)) {
    let mut wi = 0;
    for co in 0..g.co {
        for ci in 0..g.ci {
            for dt in 0..g.kt {
                for dy in 0..g.kh {
                    for dx in 0..g.kw {
                        let wv = wd[wi];
                        wi += 1;
                        if wv != 0.0 {
                            f(co, ci, dt, dy, dx, wv);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(a: f64, src: &[f64], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
