//! Boundary extraction and the average Hausdorff distance.

use crate::error::{Error, Result};

use super::{check_dims, BinaryMask};

/// Foreground pixels with at least one 4-neighbour outside the mask (the
/// image border counts as outside).
pub fn boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == m.h
                || x + 1 == m.w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Squared Euclidean distance to the nearest set pixel, exact, via
/// Felzenszwalb & Huttenlocher's separable lower-envelope transform.
fn squared_edt(h: usize, w: usize, points: &[(usize, usize)]) -> Vec<f64> {
    let mut f = vec![f64::INFINITY; h * w];
    for &(y, x) in points {
        f[y * w + x] = 0.0;
    }
    let mut line = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| f[y * w + x]));
        let d = edt_1d(&line);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        let d = edt_1d(&f[y * w..(y + 1) * w]);
        f[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    f
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![f64::INFINITY; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => return d,
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
    d
}

fn mean_nearest(from: &[(usize, usize)], dist_sq: &[f64], w: usize) -> f64 {
    from.iter().map(|&(y, x)| dist_sq[y * w + x].sqrt()).sum::<f64>() / from.len() as f64
}

/// Average Hausdorff distance: the mean of the two directed mean
/// nearest-boundary distances, in pixels.
pub fn ahd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_dims(a, b)?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::UndefinedMetric("AHD needs two non-empty masks".into()));
    }
    let ba = boundary(a);
    let bb = boundary(b);
    let da = squared_edt(a.h, a.w, &ba);
    let db = squared_edt(b.h, b.w, &bb);
    Ok((mean_nearest(&ba, &db, a.w) + mean_nearest(&bb, &da, a.w)) / 2.0)
}
