//! Packed (im2col + GEMM) convolution kernels shared by inference and training.

use crate::graph::Conv2dAttrs;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(a: &Conv2dAttrs, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        ConvGeom {
            c_in: a.in_channels,
            h,
            w,
            c_out: a.out_channels,
            kh: a.kernel_h,
            kw: a.kernel_w,
            stride: a.stride,
            pad: a.padding,
            dil: a.dilation,
            groups: a.groups,
            oh,
            ow,
        }
    }

    pub fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the column matrix for one group.
    pub fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as columns.
    pub fn is_pointwise_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output index range `[lo, hi)` along an axis whose tap offset is `off`
    /// that samples inside an input of length `len`.
    fn valid_range(&self, off: usize, len: usize, out_len: usize) -> (usize, usize) {
        // input index = o * stride + off - pad
        let lo = if off >= self.pad {
            0
        } else {
            (self.pad - off).div_ceil(self.stride)
        };
        let hi = if len + self.pad <= off {
            0
        } else {
            ((len + self.pad - off - 1) / self.stride + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one group of one sample (`x`: cin_g x h x w) into `cols`
/// (k x positions).
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky * g.dil, g.h, g.oh);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx * g.dil, g.w, g.ow);
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        out.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky * g.dil - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out[..xlo].fill(0.0);
                    out[xhi..].fill(0.0);
                    if g.stride == 1 {
                        let ix0 = xlo + kx * g.dil - g.pad;
                        out[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            out[ox] = src[ox * g.stride + kx * g.dil - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky * g.dil, g.h, g.oh);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx * g.dil, g.w, g.ow);
                let src = &cols[row * p..(row + 1) * p];
                if xlo < xhi {
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky * g.dil - g.pad;
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        let s = &src[oy * g.ow..(oy + 1) * g.ow];
                        for ox in xlo..xhi {
                            dst[ox * g.stride + kx * g.dil - g.pad] += s[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major `c = alpha * a(m x k) * b(k x n) + beta * c`, with optional
/// transposition of either operand via strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the dense layouts of
    // the row-major operands, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution of one sample. `out` holds c_out x positions.
pub(crate) fn conv_sample(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
    out: &mut [f32],
    scratch: &mut Vec<f32>,
) {
    let p = g.positions();
    let k = g.k();
    let in_len = g.cin_g() * g.h * g.w;
    for grp in 0..g.groups {
        let xg = &x[grp * in_len..(grp + 1) * in_len];
        let wg = &weight[grp * g.cout_g() * k..(grp + 1) * g.cout_g() * k];
        let og = &mut out[grp * g.cout_g() * p..(grp + 1) * g.cout_g() * p];
        if g.is_pointwise_identity() {
            gemm(g.cout_g(), k, p, wg, false, xg, false, og, 0.0);
        } else {
            scratch.resize(k * p, 0.0);
            im2col(xg, g, scratch);
            gemm(g.cout_g(), k, p, wg, false, scratch, false, og, 0.0);
        }
    }
    if let Some(b) = bias {
        for (c, bc) in b.iter().enumerate() {
            for v in &mut out[c * p..(c + 1) * p] {
                *v += bc;
            }
        }
    }
}

/// Backward convolution of one sample: accumulates into `dw` (and `db`),
/// and writes the input gradient into `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_sample_backward(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    dw: &mut [f32],
    db: Option<&mut [f32]>,
    dx: Option<&mut [f32]>,
    scratch: &mut Vec<f32>,
) {
    let p = g.positions();
    let k = g.k();
    let in_len = g.cin_g() * g.h * g.w;
    let cog = g.cout_g();
    if let Some(db) = db {
        for (c, d) in db.iter_mut().enumerate() {
            *d += dy[c * p..(c + 1) * p].iter().sum::<f32>();
        }
    }
    let mut dx = dx;
    for grp in 0..g.groups {
        let xg = &x[grp * in_len..(grp + 1) * in_len];
        let wg = &weight[grp * cog * k..(grp + 1) * cog * k];
        let dyg = &dy[grp * cog * p..(grp + 1) * cog * p];
        let dwg = &mut dw[grp * cog * k..(grp + 1) * cog * k];
        if g.is_pointwise_identity() {
            gemm(cog, p, k, dyg, false, xg, true, dwg, 1.0);
            if let Some(dx) = dx.as_deref_mut() {
                let dxg = &mut dx[grp * in_len..(grp + 1) * in_len];
                gemm(k, cog, p, wg, true, dyg, false, dxg, 1.0);
            }
        } else {
            scratch.resize(k * p, 0.0);
            im2col(xg, g, scratch);
            gemm(cog, p, k, dyg, false, scratch, true, dwg, 1.0);
            if let Some(dx) = dx.as_deref_mut() {
                gemm(k, cog, p, wg, true, dyg, false, scratch, 0.0);
                let dxg = &mut dx[grp * in_len..(grp + 1) * in_len];
                col2im(scratch, g, dxg);
            }
        }
    }
}
