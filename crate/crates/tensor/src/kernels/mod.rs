pub mod broadcast;
pub mod conv;

use crate::element::Element;

/// Splits a shape into `(outer, channels, inner)` around the channel axis:
/// axis 1 for rank >= 2, axis 0 for rank 1.
pub fn channel_split(dims: &[usize]) -> (usize, usize, usize) {
    match dims.len() {
        0 => (1, 1, 1),
        1 => (1, dims[0], 1),
        _ => (dims[0], dims[1], dims[2..].iter().product()),
    }
}

pub fn softmax_channels<T: Element>(dims: &[usize], x: &[T]) -> Vec<T> {
    let (outer, ch, inner) = channel_split(dims);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * ch * inner;
        for i in 0..inner {
            let idx = |c: usize| base + c * inner + i;
            let mut max = T::neg_infinity();
            for c in 0..ch {
                max = max.max(x[idx(c)]);
            }
            let mut total = T::zero();
            for c in 0..ch {
                let e = (x[idx(c)] - max).exp();
                out[idx(c)] = e;
                total = total + e;
            }
            for c in 0..ch {
                out[idx(c)] = out[idx(c)] / total;
            }
        }
    }
    out
}

/// Vector-Jacobian product of the channel softmax given its output `s`.
pub fn softmax_channels_backward<T: Element>(dims: &[usize], s: &[T], g: &[T]) -> Vec<T> {
    let (outer, ch, inner) = channel_split(dims);
    let mut out = vec![T::zero(); s.len()];
    for o in 0..outer {
        let base = o * ch * inner;
        for i in 0..inner {
            let idx = |c: usize| base + c * inner + i;
            let mut dot = T::zero();
            for c in 0..ch {
                dot = dot + g[idx(c)] * s[idx(c)];
            }
            for c in 0..ch {
                out[idx(c)] = s[idx(c)] * (g[idx(c)] - dot);
            }
        }
    }
    out
}

/// Per-(n, c) normalization over the spatial plane. Returns the normalized
/// values and the per-plane inverse standard deviations.
pub fn instance_norm<T: Element>(dims: &[usize], x: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let (outer, ch, plane) = channel_split(dims);
    let count = T::from_usize(plane).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(outer * ch);
    for (p, chunk) in x.chunks_exact(plane).enumerate() {
        let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) / count;
        let var = chunk.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
        let inv = T::one() / (var + eps).sqrt();
        for (j, &v) in chunk.iter().enumerate() {
            out[p * plane + j] = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn instance_norm_backward<T: Element>(dims: &[usize], normalized: &[T], inv_std: &[T], g: &[T]) -> Vec<T> {
    let (_, _, plane) = channel_split(dims);
    let count = T::from_usize(plane).unwrap();
    let mut out = vec![T::zero(); g.len()];
    for (p, (gc, xh)) in g.chunks_exact(plane).zip(normalized.chunks_exact(plane)).enumerate() {
        let sum_g = gc.iter().fold(T::zero(), |a, &v| a + v);
        let sum_gx = gc.iter().zip(xh).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
        let scale = inv_std[p] / count;
        for j in 0..plane {
            out[p * plane + j] = scale * (count * gc[j] - sum_g - xh[j] * sum_gx);
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of the last two axes.
pub fn upsample2x<T: Element>(dims: &[usize], x: &[T]) -> Vec<T> {
    let r = dims.len();
    let (h, w) = (dims[r - 2], dims[r - 1]);
    let planes = x.len() / (h * w);
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Element>(in_dims: &[usize], g: &[T]) -> Vec<T> {
    let r = in_dims.len();
    let (h, w) = (in_dims[r - 2], in_dims[r - 1]);
    let planes = g.len() / (4 * h * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * 2 * w + xx];
            }
        }
    }
    out
}
