//! Straight-loop float64 forward pass, written independently of the engine.
//! Batch norm uses batch statistics (training mode) when `train` is set.

use std::collections::BTreeMap;

use segprune::graph::UpsampleSize;
use segprune::{LayerKind, ModelGraph};

#[derive(Clone, Debug)]
pub struct T64 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl T64 {
    fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        T64 { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

pub type Params64 = BTreeMap<String, Vec<f64>>;

pub fn params64(graph: &ModelGraph) -> Params64 {
    graph.params().iter().map(|(k, v)| (k.clone(), v.data.iter().map(|&x| x as f64).collect())).collect()
}

fn taps(in_len: usize, out_len: usize, o: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

pub fn forward64(graph: &ModelGraph, p: &Params64, x: &T64, train: bool) -> T64 {
    let mut vals: BTreeMap<String, T64> = BTreeMap::new();
    for node in graph.nodes() {
        let ins: Vec<&T64> = node.inputs.iter().map(|i| &vals[i]).collect();
        let out = match &node.kind {
            LayerKind::Input { .. } => x.clone(),
            LayerKind::Conv2d(a) => {
                let xi = ins[0];
                let k = a.kernel_h;
                let span = a.dilation * (k - 1) + 1;
                let oh = (xi.h + 2 * a.padding - span) / a.stride + 1;
                let ow = (xi.w + 2 * a.padding - span) / a.stride + 1;
                let w = &p[&node.weight_name()];
                let cin_g = a.in_channels / a.groups;
                let cout_g = a.out_channels / a.groups;
                let mut y = T64::zeros(xi.n, a.out_channels, oh, ow);
                for n in 0..xi.n {
                    for o in 0..a.out_channels {
                        let g = o / cout_g;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = if a.has_bias { p[&node.bias_name()][o] } else { 0.0 };
                                for i in 0..cin_g {
                                    for ky in 0..k {
                                        for kx in 0..a.kernel_w {
                                            let iy = (oy * a.stride + ky * a.dilation) as i64 - a.padding as i64;
                                            let ix = (ox * a.stride + kx * a.dilation) as i64 - a.padding as i64;
                                            if iy < 0 || ix < 0 || iy >= xi.h as i64 || ix >= xi.w as i64 {
                                                continue;
                                            }
                                            let wv = w[((o * cin_g + i) * k + ky) * a.kernel_w + kx];
                                            acc += wv * xi.at(n, g * cin_g + i, iy as usize, ix as usize);
                                        }
                                    }
                                }
                                let id = y.idx(n, o, oy, ox);
                                y.data[id] = acc;
                            }
                        }
                    }
                }
                y
            }
            LayerKind::BatchNorm2d { epsilon, .. } => {
                let xi = ins[0];
                let gamma = &p[&node.weight_name()];
                let beta = &p[&node.bias_name()];
                let rm = graph.buffer(&format!("{}.running_mean", node.id)).unwrap();
                let rv = graph.buffer(&format!("{}.running_var", node.id)).unwrap();
                let mut y = xi.clone();
                let m = (xi.n * xi.h * xi.w) as f64;
                for c in 0..xi.c {
                    let items: Vec<usize> = (0..xi.n)
                        .flat_map(|n| (0..xi.h).flat_map(move |yy| (0..xi.w).map(move |xx| (n, yy, xx))))
                        .map(|(n, yy, xx)| xi.idx(n, c, yy, xx))
                        .collect();
                    let (mean, var) = if train {
                        let mean = items.iter().map(|&i| xi.data[i]).sum::<f64>() / m;
                        (mean, items.iter().map(|&i| (xi.data[i] - mean).powi(2)).sum::<f64>() / m)
                    } else {
                        (rm.data[c] as f64, rv.data[c] as f64)
                    };
                    let inv = 1.0 / (var + *epsilon as f64).sqrt();
                    for &i in &items {
                        y.data[i] = (xi.data[i] - mean) * inv * gamma[c] + beta[c];
                    }
                }
                y
            }
            LayerKind::ReLU => {
                let mut y = ins[0].clone();
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            LayerKind::Add => {
                let mut y = ins[0].clone();
                for other in &ins[1..] {
                    y.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
                }
                y
            }
            LayerKind::Concat { .. } => {
                let c: usize = ins.iter().map(|t| t.c).sum();
                let f = ins[0];
                let mut y = T64::zeros(f.n, c, f.h, f.w);
                for n in 0..f.n {
                    let mut off = 0;
                    for t in &ins {
                        for ci in 0..t.c {
                            for yy in 0..f.h {
                                for xx in 0..f.w {
                                    let id = y.idx(n, off + ci, yy, xx);
                                    y.data[id] = t.at(n, ci, yy, xx);
                                }
                            }
                        }
                        off += t.c;
                    }
                }
                y
            }
            LayerKind::MaxPool2d { kernel, stride, padding } => {
                let xi = ins[0];
                let oh = (xi.h + 2 * padding - kernel) / stride + 1;
                let ow = (xi.w + 2 * padding - kernel) / stride + 1;
                let mut y = T64::zeros(xi.n, xi.c, oh, ow);
                for n in 0..xi.n {
                    for c in 0..xi.c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        let iy = (oy * stride + ky) as i64 - *padding as i64;
                                        let ix = (ox * stride + kx) as i64 - *padding as i64;
                                        if iy >= 0 && ix >= 0 && iy < xi.h as i64 && ix < xi.w as i64 {
                                            best = best.max(xi.at(n, c, iy as usize, ix as usize));
                                        }
                                    }
                                }
                                let id = y.idx(n, c, oy, ox);
                                y.data[id] = best;
                            }
                        }
                    }
                }
                y
            }
            LayerKind::GlobalAvgPool => {
                let xi = ins[0];
                let mut y = T64::zeros(xi.n, xi.c, 1, 1);
                for n in 0..xi.n {
                    for c in 0..xi.c {
                        let mut s = 0.0;
                        for yy in 0..xi.h {
                            for xx in 0..xi.w {
                                s += xi.at(n, c, yy, xx);
                            }
                        }
                        y.data[n * xi.c + c] = s / (xi.h * xi.w) as f64;
                    }
                }
                y
            }
            LayerKind::BilinearUpsample { size } => {
                let xi = ins[0];
                let (oh, ow) = match size {
                    UpsampleSize::Fixed { h, w } => (*h, *w),
                    UpsampleSize::MatchInput => (ins[1].h, ins[1].w),
                };
                let mut y = T64::zeros(xi.n, xi.c, oh, ow);
                for n in 0..xi.n {
                    for c in 0..xi.c {
                        for oy in 0..oh {
                            let (y0, y1, ly) = taps(xi.h, oh, oy);
                            for ox in 0..ow {
                                let (x0, x1, lx) = taps(xi.w, ow, ox);
                                let top = xi.at(n, c, y0, x0) * (1.0 - lx) + xi.at(n, c, y0, x1) * lx;
                                let bot = xi.at(n, c, y1, x0) * (1.0 - lx) + xi.at(n, c, y1, x1) * lx;
                                let id = y.idx(n, c, oy, ox);
                                y.data[id] = top * (1.0 - ly) + bot * ly;
                            }
                        }
                    }
                }
                y
            }
            LayerKind::Linear { in_features, out_features, has_bias } => {
                let xi = ins[0];
                let w = &p[&node.weight_name()];
                let mut y = T64::zeros(xi.n, *out_features, 1, 1);
                for n in 0..xi.n {
                    for o in 0..*out_features {
                        let mut acc = if *has_bias { p[&node.bias_name()][o] } else { 0.0 };
                        for i in 0..*in_features {
                            acc += w[o * in_features + i] * xi.data[n * in_features + i];
                        }
                        y.data[n * out_features + o] = acc;
                    }
                }
                y
            }
        };
        vals.insert(node.id.clone(), out);
    }
    vals.remove(graph.output_id()).unwrap()
}
