//! 2-D convolution by im2col + GEMM.

use crate::element::Element;

/// Border handling for [`conv2d`](crate::Graph::conv2d).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-grid samples read as zero.
    Zero(usize),
    /// Out-of-grid samples read the nearest border value.
    Replicate(usize),
}

impl Padding {
    pub fn size(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Replicate(p) => p,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let p = self.padding.size();
        (
            (self.height + 2 * p - self.kh) / self.stride + 1,
            (self.width + 2 * p - self.kw) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Source pixel for output position `(oy, ox)` and tap `(ky, kx)`, or
    /// `None` when the tap falls in zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let p = self.padding.size() as isize;
        let y = (oy * self.stride + ky) as isize - p;
        let x = (ox * self.stride + kx) as isize - p;
        let (h, w) = (self.height as isize, self.width as isize);
        match self.padding {
            Padding::Zero(_) => {
                if y < 0 || x < 0 || y >= h || x >= w {
                    None
                } else {
                    Some((y as usize, x as usize))
                }
            }
            Padding::Replicate(_) => Some((y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize)),
        }
    }
}

/// Fills `col` (`patch x Ho*Wo`) from one image (`C x H x W`).
fn im2col<T: Element>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = g.height * g.width;
    let mut row = 0;
    for c in 0..g.in_ch {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[oy * wo + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => src[y * g.width + x],
                            None => T::zero(),
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `col` back into an image gradient buffer.
fn col2im_add<T: Element>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = g.height * g.width;
    let mut row = 0;
    for c in 0..g.in_ch {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            dst[y * g.width + x] = dst[y * g.width + x] + src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let npix = ho * wo;
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.out_ch * npix];
    let mut col = vec![T::zero(); patch * npix];
    let in_stride = g.in_ch * g.height * g.width;
    for n in 0..g.batch {
        im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut col);
        let dst = &mut out[n * g.out_ch * npix..(n + 1) * g.out_ch * npix];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(npix).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(false, false, g.out_ch, npix, patch, T::one(), kernel, &col, beta, dst);
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)` for upstream gradient `grad_out`.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let npix = ho * wo;
    let patch = g.patch();
    let in_stride = g.in_ch * g.height * g.width;
    let mut d_input = need_input.then(|| vec![T::zero(); input.len()]);
    let mut d_kernel = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut d_bias = need_bias.then(|| vec![T::zero(); g.out_ch]);
    let mut col = vec![T::zero(); patch * npix];
    for n in 0..g.batch {
        let go = &grad_out[n * g.out_ch * npix..(n + 1) * g.out_ch * npix];
        if let Some(db) = d_bias.as_mut() {
            for (o, chunk) in go.chunks_exact(npix).enumerate() {
                db[o] = chunk.iter().fold(db[o], |acc, &v| acc + v);
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut col);
            T::gemm(false, true, g.out_ch, patch, npix, T::one(), go, &col, T::one(), dk);
        }
        if let Some(di) = d_input.as_mut() {
            T::gemm(
                true,
                false,
                patch,
                npix,
                g.out_ch,
                T::one(),
                kernel,
                go,
                T::zero(),
                &mut col,
            );
            col2im_add(g, &col, &mut di[n * in_stride..(n + 1) * in_stride]);
        }
    }
    (d_input, d_kernel, d_bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> ConvGeometry {
        ConvGeometry {
            batch: 1,
            in_ch: 1,
            height: h,
            width: w,
            out_ch: 1,
            kh: k,
            kw: k,
            stride,
            padding,
        }
    }

    #[test]
    fn output_arithmetic() {
        assert_eq!(geom(5, 5, 3, 1, Padding::Zero(1)).out_hw(), (5, 5));
        assert_eq!(geom(8, 8, 3, 2, Padding::Zero(1)).out_hw(), (4, 4));
        assert_eq!(geom(5, 7, 3, 1, Padding::Zero(0)).out_hw(), (3, 5));
    }

    #[test]
    fn replicate_padding_reads_border() {
        let g = geom(2, 2, 3, 1, Padding::Replicate(1));
        let input = [1.0, 2.0, 3.0, 4.0];
        // single tap one row above centre: reads (y - 1, x), clamped
        let mut k = [0.0f64; 9];
        k[1] = 1.0;
        let out = conv2d_forward(&g, &input, &k, None);
        assert_eq!(out, vec![1.0, 2.0, 1.0, 2.0]);
    }
}
