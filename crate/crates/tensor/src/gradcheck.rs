//! Central finite-difference gradient oracle.
//!
//! The numeric side only evaluates forward values, so it shares no code
//! with `Graph::backward`.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative errors of the analytic gradients against central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub rel_err_f64: f64,
    pub rel_err_f32: f64,
}

impl GradCheck {
    pub fn passes(&self, tol_f64: f64, tol_f32: f64) -> bool {
        self.rel_err_f64 <= tol_f64 && self.rel_err_f32 <= tol_f32
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn forward_value<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Usage("gradient check needs a scalar output".into()));
    }
    Ok(v.item())
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Tensor::zeros(inputs[i].dims());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            let h = step * x0.abs().max(1.0);
            work[i].data_mut()[j] = x0 + h;
            let up = forward_value(&work, build)?;
            work[i].data_mut()[j] = x0 - h;
            let down = forward_value(&work, build)?;
            work[i].data_mut()[j] = x0;
            gi.data_mut()[j] = (up - down) / (2.0 * h);
        }
        grads.push(gi);
    }
    Ok(grads)
}

/// Reverse-mode gradients of `build` evaluated in element type `T`,
/// returned in double precision.
pub fn analytic_gradients<T, F>(inputs: &[Tensor<f64>], build: &F) -> Result<Vec<Tensor<f64>>>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.cast())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad_or_zeros(v).cast()).collect())
}

fn flat(ts: &[Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Compares analytic gradients in both precisions with central differences
/// computed in double precision. `build64` and `build32` must describe the
/// same function; see [`check_grad!`](crate::check_grad).
pub fn compare<F64, F32>(inputs: &[Tensor<f64>], build64: F64, build32: F32) -> Result<GradCheck>
where
    F64: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    F32: Fn(&mut Graph<f32>, &[Var]) -> Result<Var>,
{
    let numeric = flat(&numeric_gradients(inputs, 1e-6, &build64)?);
    let a64 = flat(&analytic_gradients::<f64, _>(inputs, &build64)?);
    let a32 = flat(&analytic_gradients::<f32, _>(inputs, &build32)?);
    Ok(GradCheck {
        rel_err_f64: relative_error(&a64, &numeric),
        rel_err_f32: relative_error(&a32, &numeric),
    })
}

/// Runs [`gradcheck::compare`](crate::gradcheck::compare) with one closure
/// body instantiated for both `f64` and `f32`.
///
/// ```
/// use bayeseg_tensor::{check_grad, Tensor};
///
/// let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
/// let r = check_grad!(vec![x], |g, v| {
///     let s = g.square(v[0])?;
///     Ok(g.sum(s))
/// })
/// .unwrap();
/// assert!(r.passes(1e-6, 1e-3));
/// ```
#[macro_export]
macro_rules! check_grad {
    ($inputs:expr, |$g:ident, $v:ident| $body:expr) => {{
        let inputs: Vec<$crate::Tensor<f64>> = $inputs;
        $crate::gradcheck::compare(
            &inputs,
            |$g: &mut $crate::Graph<f64>, $v: &[$crate::Var]| -> $crate::Result<$crate::Var> { $body },
            |$g: &mut $crate::Graph<f32>, $v: &[$crate::Var]| -> $crate::Result<$crate::Var> { $body },
        )
    }};
}
