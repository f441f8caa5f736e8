//! Binary morphology with a Euclidean disk structuring element.
//!
//! The disk of radius `r` is `{(dx, dy) : dx² + dy² <= r²}`. Both operations
//! go through an exact squared Euclidean distance transform, so their cost
//! does not depend on the radius. Pixels outside the image never influence
//! the result.

use crate::types::InstanceMask;

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `bits` (row-major, `width` columns). Pixels with no seed at all
/// get a very large value.
pub fn squared_distance_transform(width: usize, height: usize, bits: &[bool]) -> Vec<f64> {
    let mut f: Vec<f64> = bits.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let mut line = vec![0.0; width.max(height)];
    let mut out = vec![0.0; width.max(height)];
    for x in 0..width {
        for y in 0..height {
            line[y] = f[y * width + x];
        }
        lower_envelope(&line[..height], &mut out[..height]);
        for y in 0..height {
            f[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut f[y * width..(y + 1) * width];
        line[..width].copy_from_slice(row);
        lower_envelope(&line[..width], &mut out[..width]);
        row.copy_from_slice(&out[..width]);
    }
    f
}

// 1-D squared distance transform (Felzenszwalb & Huttenlocher lower envelope).
fn lower_envelope(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola_cut = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = parabola_cut(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola_cut(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Dilation of `mask` by a disk of radius `radius`.
pub fn dilate(mask: &InstanceMask, radius: u32) -> InstanceMask {
    let (w, h) = (mask.width(), mask.height());
    if mask.is_empty() {
        return mask.clone();
    }
    let d = squared_distance_transform(w, h, mask.bits());
    let r2 = (radius as f64) * (radius as f64);
    InstanceMask::from_fn(mask.id(), w, h, |x, y| d[y * w + x] <= r2)
}

/// Erosion of `mask` by a disk of radius `radius`; a pixel survives when
/// every in-image pixel of the disk around it is set.
pub fn erode(mask: &InstanceMask, radius: u32) -> InstanceMask {
    let (w, h) = (mask.width(), mask.height());
    let complement: Vec<bool> = mask.bits().iter().map(|b| !b).collect();
    if !complement.iter().any(|b| *b) {
        return mask.clone();
    }
    let d = squared_distance_transform(w, h, &complement);
    let r2 = (radius as f64) * (radius as f64);
    InstanceMask::from_fn(mask.id(), w, h, |x, y| mask.contains(x, y) && d[y * w + x] > r2)
}
