//! Non-convolution kernels. Forward/backward pairs live side by side so the
//! training path reuses exactly the arithmetic used for inference.

use crate::graph::TensorShape;
use crate::tensor::Tensor;

pub(crate) fn batch_norm_inference(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Tensor {
    let s = x.shape;
    let p = s.plane();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] / (var[c] + eps).sqrt();
            let shift = beta[c] - mean[c] * scale;
            let off = (n * s.c + c) * p;
            for v in &mut out.data[off..off + p] {
                *v = *v * scale + shift;
            }
        }
    }
    out
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

pub(crate) fn add(inputs: &[&Tensor]) -> Tensor {
    let mut out = inputs[0].clone();
    for t in &inputs[1..] {
        for (o, v) in out.data.iter_mut().zip(&t.data) {
            *o += v;
        }
    }
    out
}

pub(crate) fn concat(inputs: &[&Tensor], shape: TensorShape) -> Tensor {
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..shape.n {
        for t in inputs {
            data.extend_from_slice(t.sample(n));
        }
    }
    Tensor { shape, data }
}

/// Max pooling; also returns the flat input index selected for each output.
pub(crate) fn max_pool(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: TensorShape,
) -> (Tensor, Vec<u32>) {
    let s = x.shape;
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0u32; out_shape.numel()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let i = base + iy as usize * s.w + ix as usize;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape;
    let p = s.plane() as f32;
    let data = x
        .data
        .chunks(s.plane())
        .map(|plane| plane.iter().sum::<f32>() / p)
        .collect();
    Tensor {
        shape: TensorShape { h: 1, w: 1, ..s },
        data,
    }
}

/// Source taps for half-pixel (align-corners-false) bilinear sampling along
/// one axis: (low index, high index, weight of high index).
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f32)
        })
        .collect()
}

pub(crate) fn bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape;
    let ys = bilinear_taps(s.h, out_h);
    let xs = bilinear_taps(s.w, out_w);
    let out_shape = TensorShape { h: out_h, w: out_w, ..s };
    let mut out = Tensor::zeros(out_shape);
    for (plane_in, plane_out) in x.data.chunks(s.plane()).zip(out.data.chunks_mut(out_h * out_w)) {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let r0 = &plane_in[y0 * s.w..(y0 + 1) * s.w];
            let r1 = &plane_in[y1 * s.w..(y1 + 1) * s.w];
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
                let bot = r1[x0] * (1.0 - lx) + r1[x1] * lx;
                plane_out[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(dy: &Tensor, in_shape: TensorShape) -> Tensor {
    let (oh, ow) = (dy.shape.h, dy.shape.w);
    let ys = bilinear_taps(in_shape.h, oh);
    let xs = bilinear_taps(in_shape.w, ow);
    let mut dx = Tensor::zeros(in_shape);
    let w = in_shape.w;
    for (pd, px) in dy.data.chunks(oh * ow).zip(dx.data.chunks_mut(in_shape.plane())) {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let g = pd[oy * ow + ox];
                px[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                px[y0 * w + x1] += g * (1.0 - ly) * lx;
                px[y1 * w + x0] += g * ly * (1.0 - lx);
                px[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    dx
}

/// `y = x W^T + b` on the flattened per-sample features.
pub(crate) fn linear(x: &Tensor, weight: &[f32], bias: Option<&[f32]>, out_features: usize) -> Tensor {
    let n = x.shape.n;
    let in_features = x.data.len() / n;
    let mut out = Tensor::zeros(TensorShape { n, c: out_features, h: 1, w: 1 });
    super::conv::gemm(n, in_features, out_features, &x.data, false, weight, true, &mut out.data, 0.0);
    if let Some(b) = bias {
        for row in out.data.chunks_mut(out_features) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_and_half_pixel() {
        let s = TensorShape::new(1, 1, 2, 2).unwrap();
        let x = Tensor::new(s, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear(&x, 2, 2), x);
        let up = bilinear(&x, 4, 4);
        // First row samples src x = -0.25 (clamped), 0.25, 0.75, 1.25.
        assert_eq!(&up.data[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let s = TensorShape::new(1, 2, 3, 5).unwrap();
        let x = Tensor::random(s, 1);
        let up = bilinear(&x, 7, 4);
        let dy = Tensor::random(up.shape, 2);
        let lhs: f64 = up.data.iter().zip(&dy.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let dx = bilinear_backward(&dy, s);
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let s = TensorShape::new(1, 1, 3, 3).unwrap();
        let x = Tensor::new(s, (0..9).map(|v| v as f32).collect()).unwrap();
        let (y, arg) = max_pool(&x, 3, 2, 1, TensorShape::new(1, 1, 2, 2).unwrap());
        assert_eq!(y.data, vec![4.0, 5.0, 7.0, 8.0]);
        assert_eq!(arg, vec![4, 5, 7, 8]);
    }
}
