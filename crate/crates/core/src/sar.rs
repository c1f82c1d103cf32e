//! The local difference operator `D = I - B` of the SAR priors.
//!
//! `B` weights each 4-neighbour by 0.25. Out-of-grid neighbours read the
//! nearest border pixel, so `D` annihilates constant fields exactly.

use bayeseg_tensor::{Element, Graph, Padding, Tensor, Var};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

pub const NEIGHBOUR_WEIGHT: f64 = 0.25;

/// 3x3 stencil of `D`; sums to zero and is symmetric.
pub const SAR_STENCIL: [[f64; 3]; 3] = [
    [0.0, -NEIGHBOUR_WEIGHT, 0.0],
    [-NEIGHBOUR_WEIGHT, 1.0, -NEIGHBOUR_WEIGHT],
    [0.0, -NEIGHBOUR_WEIGHT, 0.0],
];

fn check_grid(h: usize, w: usize, op: &'static str) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::shape(op, format!("grid {h}x{w} is smaller than 2x2")));
    }
    Ok(())
}

pub fn apply_d(field: &ImageGrid) -> Result<ImageGrid> {
    let (h, w) = field.dims();
    check_grid(h, w, "apply_d")?;
    Ok(ImageGrid::from_fn(h, w, |y, x| {
        let up = field.get(y.saturating_sub(1), x);
        let down = field.get((y + 1).min(h - 1), x);
        let left = field.get(y, x.saturating_sub(1));
        let right = field.get(y, (x + 1).min(w - 1));
        field.get(y, x) - NEIGHBOUR_WEIGHT * (up + down + left + right)
    }))
}

/// `1/2 * sum_i weights_i * (D field)_i^2`.
pub fn sar_quadratic(field: &ImageGrid, weights: &ImageGrid) -> Result<f64> {
    field.check_same(weights, "sar_quadratic")?;
    if let Some((i, w)) = weights.data().iter().enumerate().find(|(_, &w)| !(w >= 0.0)) {
        return Err(Error::domain("sar_quadratic", format!("weight {w} at pixel {i}")));
    }
    let d = apply_d(field)?;
    Ok(0.5 * d.data().iter().zip(weights.data()).map(|(v, w)| w * v * v).sum::<f64>())
}

/// `D` applied to every channel of an `[N, C, H, W]` node.
pub fn apply_d_graph<T: Element>(g: &mut Graph<T>, field: Var) -> Result<Var> {
    let dims = g.value(field).dims().to_vec();
    if dims.len() != 4 {
        return Err(Error::shape("apply_d_graph", format!("expected rank 4, got {dims:?}")));
    }
    check_grid(dims[2], dims[3], "apply_d_graph")?;
    let planes = g.reshape(field, &[dims[0] * dims[1], 1, dims[2], dims[3]])?;
    let stencil = Tensor::from_fn(&[1, 1, 3, 3], |i| T::from_f64_lossy(SAR_STENCIL[i / 3][i % 3]));
    let k = g.constant(stencil);
    let out = g.conv2d(planes, k, 1, Padding::Replicate(1))?;
    Ok(g.reshape(out, &dims)?)
}

/// Differentiable `1/2 * sum weights * (D field)^2`; `weights` broadcast-free.
pub fn sar_quadratic_graph<T: Element>(g: &mut Graph<T>, field: Var, weights: Var) -> Result<Var> {
    let d = apply_d_graph(g, field)?;
    let q = g.weighted_sq_norm(d, weights)?;
    Ok(g.scale(q, T::from_f64_lossy(0.5)))
}
