//! Closed-form hyper-posterior updates, the unfolded variational loss, and
//! the training objective.
//!
//! Gamma hyper-priors are parameterised by shape `gamma` and rate `phi`.
//! Posterior means of `rho`, `upsilon`, `omega` and the constants `c_k`
//! enter the loss as constants; gradients reach only the network outputs.

use bayeseg_tensor::{Element, Graph, Tensor, Var};

use crate::distributions::{expected_neg_log1m, BetaParams, GammaParams, GaussianParams};
use crate::error::{Error, Result};
use crate::grid::{stack_grids, ImageGrid, LabelMap};
use crate::sar::{apply_d, sar_quadratic_graph};

/// Lower clamp applied to probabilities before the log in cross-entropy.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub rho: GammaParams,
    pub upsilon: GammaParams,
    pub omega: GammaParams,
    pub pi: BetaParams,
    pub mu_m0: f64,
    /// Prior precision scale of the appearance mean.
    pub sigma_m0: f64,
    pub lambda: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            rho: GammaParams { shape: 2.0, rate: 1e-6 },
            upsilon: GammaParams { shape: 2.0, rate: 1e-8 },
            omega: GammaParams { shape: 2.0, rate: 1e-4 },
            pi: BetaParams { alpha: 2.0, beta: 2.0 },
            mu_m0: 0.0,
            sigma_m0: 1.0,
            lambda: 100.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        GammaParams::new(self.rho.shape, self.rho.rate)?;
        GammaParams::new(self.upsilon.shape, self.upsilon.rate)?;
        GammaParams::new(self.omega.shape, self.omega.rate)?;
        BetaParams::new(self.pi.alpha, self.pi.beta)?;
        if !self.mu_m0.is_finite() {
            return Err(Error::Config(format!("mu_m0 = {} is not finite", self.mu_m0)));
        }
        if !(self.sigma_m0 > 0.0 && self.sigma_m0.is_finite()) {
            return Err(Error::Config(format!("sigma_m0 = {} must be positive", self.sigma_m0)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be nonnegative", self.lambda)));
        }
        Ok(())
    }

    /// `c_k` under the label-portion prior, before any image evidence.
    pub fn prior_c(&self) -> Result<f64> {
        expected_neg_log1m(self.pi)
    }
}

fn check_classes(fields: &[ImageGrid], like: &ImageGrid, op: &'static str) -> Result<()> {
    if fields.is_empty() {
        return Err(Error::shape(op, "no class channels"));
    }
    for f in fields {
        f.check_same(like, op)?;
    }
    Ok(())
}

fn check_nonnegative(fields: &[ImageGrid], op: &'static str, what: &str) -> Result<()> {
    for (k, f) in fields.iter().enumerate() {
        if let Some((i, v)) = f.data().iter().enumerate().find(|(_, &v)| !(v >= 0.0)) {
            return Err(Error::domain(op, format!("{what} class {k} pixel {i} is {v}")));
        }
    }
    Ok(())
}

/// `(2 gamma + 1) / (r^2 + 2 phi)` with `r = y - (x + m)`.
pub fn update_rho(y: &ImageGrid, x_sample: &ImageGrid, m_sample: &ImageGrid, h: &HyperParams) -> Result<ImageGrid> {
    y.check_same(x_sample, "update_rho")?;
    y.check_same(m_sample, "update_rho")?;
    let num = 2.0 * h.rho.shape + 1.0;
    Ok(ImageGrid::from_fn(y.height(), y.width(), |r, c| {
        let res = y.get(r, c) - x_sample.get(r, c) - m_sample.get(r, c);
        num / (res * res + 2.0 * h.rho.rate)
    }))
}

/// `(2 gamma + K) / (sum_k mu_zk [(D mu_x)^2 + 2 sigma_x^2] + 2 phi)`.
pub fn update_upsilon(mu_z: &[ImageGrid], mu_x: &ImageGrid, sigma_x: &ImageGrid, h: &HyperParams) -> Result<ImageGrid> {
    check_classes(mu_z, mu_x, "update_upsilon")?;
    check_nonnegative(mu_z, "update_upsilon", "mu_z")?;
    mu_x.check_same(sigma_x, "update_upsilon")?;
    let d = apply_d(mu_x)?;
    let num = 2.0 * h.upsilon.shape + mu_z.len() as f64;
    let mut out = ImageGrid::zeros(mu_x.height(), mu_x.width());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let s = sigma_x.data()[i];
        let q = d.data()[i] * d.data()[i] + 2.0 * s * s;
        let weight: f64 = mu_z.iter().map(|z| z.data()[i]).sum();
        *o = num / (weight * q + 2.0 * h.upsilon.rate);
    }
    Ok(out)
}

/// Per-class `(D mu_zk)^2 + 2 sigma_zk^2`.
fn segmentation_energy(mu_z: &[ImageGrid], sigma_z: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
    mu_z.iter()
        .zip(sigma_z)
        .map(|(m, s)| {
            let d = apply_d(m)?;
            d.zip_with(s, |dv, sv| dv * dv + 2.0 * sv * sv)
        })
        .collect()
}

/// `(2 gamma + 1) / (c_k [(D mu_zk)^2 + 2 sigma_zk^2] + 2 phi)` per class.
pub fn update_omega(mu_z: &[ImageGrid], sigma_z: &[ImageGrid], c: &[f64], h: &HyperParams) -> Result<Vec<ImageGrid>> {
    check_classes(mu_z, &mu_z[0], "update_omega")?;
    check_classes(sigma_z, &mu_z[0], "update_omega")?;
    if sigma_z.len() != mu_z.len() || c.len() != mu_z.len() {
        return Err(Error::shape(
            "update_omega",
            format!("{} means, {} stds, {} constants", mu_z.len(), sigma_z.len(), c.len()),
        ));
    }
    if let Some((k, v)) = c.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::domain("update_omega", format!("c[{k}] = {v}")));
    }
    let num = 2.0 * h.omega.shape + 1.0;
    let energy = segmentation_energy(mu_z, sigma_z)?;
    Ok(energy
        .iter()
        .zip(c)
        .map(|(e, &ck)| e.map(|q| num / (ck * q + 2.0 * h.omega.rate)))
        .collect())
}

/// Beta posterior of the label portions and the refreshed `c_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiPosterior {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn update_pi(
    mu_omega: &[ImageGrid],
    mu_z: &[ImageGrid],
    sigma_z: &[ImageGrid],
    h: &HyperParams,
) -> Result<PiPosterior> {
    if mu_omega.len() != mu_z.len() || sigma_z.len() != mu_z.len() {
        return Err(Error::shape("update_pi", "class counts differ"));
    }
    check_classes(mu_z, &mu_z[0], "update_pi")?;
    check_classes(mu_omega, &mu_z[0], "update_pi")?;
    check_nonnegative(mu_omega, "update_pi", "mu_omega")?;
    let d_y = mu_z[0].len() as f64;
    let energy = segmentation_energy(mu_z, sigma_z)?;
    let alpha: Vec<f64> = vec![h.pi.alpha + d_y / 2.0; mu_z.len()];
    let beta: Vec<f64> = mu_omega
        .iter()
        .zip(&energy)
        .map(|(w, e)| 0.5 * w.data().iter().zip(e.data()).map(|(a, b)| a * b).sum::<f64>() + h.pi.beta)
        .collect();
    let c = alpha
        .iter()
        .zip(&beta)
        .map(|(&a, &b)| expected_neg_log1m(BetaParams::new(a, b)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(PiPosterior { alpha, beta, c })
}

/// Upper bound on alternating `omega`/`pi` sweeps.
pub const OMEGA_PI_SWEEPS: usize = 100;
/// Relative change in every `c_k` below which the sweeps stop.
pub const OMEGA_PI_TOL: f64 = 1e-8;

/// Alternates the `omega` and `pi` updates from the prior `c_k` until `c`
/// settles, so the returned `omega` was computed with the returned `c`
/// up to `OMEGA_PI_TOL`.
pub fn update_omega_pi(
    mu_z: &[ImageGrid],
    sigma_z: &[ImageGrid],
    h: &HyperParams,
) -> Result<(Vec<ImageGrid>, PiPosterior)> {
    let mut c = vec![h.prior_c()?; mu_z.len()];
    let mut omega = update_omega(mu_z, sigma_z, &c, h)?;
    let mut pi = update_pi(&omega, mu_z, sigma_z, h)?;
    for _ in 0..OMEGA_PI_SWEEPS {
        let settled =
            pi.c.iter()
                .zip(&c)
                .all(|(a, b)| (a - b).abs() <= OMEGA_PI_TOL * b.abs());
        if settled {
            break;
        }
        c.clone_from(&pi.c);
        omega = update_omega(mu_z, sigma_z, &c, h)?;
        pi = update_pi(&omega, mu_z, sigma_z, h)?;
    }
    Ok((omega, pi))
}

/// All per-image posterior parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub x: GaussianParams,
    pub m: GaussianParams,
    /// Simplex-valued class means, one grid per class.
    pub z_mean: Vec<ImageGrid>,
    /// Standard deviations of the pre-softmax class field.
    pub z_std: Vec<ImageGrid>,
    pub rho: ImageGrid,
    pub upsilon: ImageGrid,
    pub omega: Vec<ImageGrid>,
    pub pi: PiPosterior,
}

impl VariationalState {
    /// Runs the closed-form updates for rho and upsilon, then `update_omega_pi`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_posteriors(
        y: &ImageGrid,
        x: GaussianParams,
        m: GaussianParams,
        z_mean: Vec<ImageGrid>,
        z_std: Vec<ImageGrid>,
        x_sample: &ImageGrid,
        m_sample: &ImageGrid,
        h: &HyperParams,
    ) -> Result<Self> {
        let rho = update_rho(y, x_sample, m_sample, h)?;
        let upsilon = update_upsilon(&z_mean, &x.mean, &x.std, h)?;
        let (omega, pi) = update_omega_pi(&z_mean, &z_std, h)?;
        Ok(VariationalState {
            x,
            m,
            z_mean,
            z_std,
            rho,
            upsilon,
            omega,
            pi,
        })
    }

    pub fn classes(&self) -> usize {
        self.z_mean.len()
    }
}

pub const LOSS_TERM_NAMES: [&str; 7] = [
    "L_y",
    "L_mu_z",
    "L_sigma_z",
    "L_mu_x",
    "L_sigma_x",
    "L_mu_m",
    "L_sigma_m",
];

/// The seven unfolded terms; absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_y: f64,
    pub l_mu_z: f64,
    pub l_sigma_z: f64,
    pub l_mu_x: f64,
    pub l_sigma_x: f64,
    pub l_mu_m: f64,
    pub l_sigma_m: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.l_y,
            self.l_mu_z,
            self.l_sigma_z,
            self.l_mu_x,
            self.l_sigma_x,
            self.l_mu_m,
            self.l_sigma_m,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        LossTerms {
            l_y: a[0],
            l_mu_z: a[1],
            l_sigma_z: a[2],
            l_mu_x: a[3],
            l_sigma_x: a[4],
            l_mu_m: a[5],
            l_sigma_m: a[6],
        }
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_array(self.as_array().map(|v| v * s))
    }

    pub fn add(&self, other: &LossTerms) -> Self {
        let (a, b) = (self.as_array(), other.as_array());
        Self::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }
}

/// A variance node together with its logarithm.
#[derive(Clone, Copy, Debug)]
pub struct Variance {
    pub var: Var,
    pub log_var: Var,
}

impl Variance {
    /// From a log-variance head output; never takes the log of an underflowed value.
    pub fn from_log_var<T: Element>(g: &mut Graph<T>, log_var: Var) -> Result<Self> {
        Ok(Variance {
            var: g.exp(log_var)?,
            log_var,
        })
    }

    /// From a variance node; a non-positive entry is a domain error.
    pub fn from_var<T: Element>(g: &mut Graph<T>, var: Var) -> Result<Self> {
        Ok(Variance {
            var,
            log_var: g.log(var)?,
        })
    }
}

/// Graph nodes feeding the loss, all `[N, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub y: Var,
    pub x_sample: Var,
    pub m_sample: Var,
    pub mu_x: Var,
    pub var_x: Option<Variance>,
    pub mu_m: Var,
    pub var_m: Option<Variance>,
    /// Simplex class means, `K` channels.
    pub mu_z: Var,
    pub var_z: Option<Variance>,
}

/// Which groups of terms enter the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermSelection {
    /// `L_y`, `L_mu_m`, `L_sigma_m`.
    pub appearance: bool,
    /// `L_mu_z`, `L_sigma_z`.
    pub segmentation: bool,
    /// `L_mu_x`, `L_sigma_x`.
    pub shape: bool,
}

impl Default for TermSelection {
    fn default() -> Self {
        TermSelection {
            appearance: true,
            segmentation: true,
            shape: true,
        }
    }
}

/// Stop-gradient constants of one batch: `rho`, `upsilon` (`[N,1,H,W]`),
/// `omega` (`[N,K,H,W]`) and `c` (`[N,K,1,1]`).
#[derive(Clone, Debug)]
pub struct LossConstants<T> {
    pub rho: Tensor<T>,
    pub upsilon: Tensor<T>,
    pub omega: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Element> LossConstants<T> {
    /// Stacks per-item closed-form results.
    pub fn from_states(items: &[(&ImageGrid, &ImageGrid, &[ImageGrid], &[f64])]) -> Result<Self> {
        let rho: Vec<Vec<&ImageGrid>> = items.iter().map(|it| vec![it.0]).collect();
        let ups: Vec<Vec<&ImageGrid>> = items.iter().map(|it| vec![it.1]).collect();
        let omega: Vec<Vec<&ImageGrid>> = items.iter().map(|it| it.2.iter().collect()).collect();
        let k = items.first().map(|it| it.3.len()).unwrap_or(0);
        let c: Vec<T> = items
            .iter()
            .flat_map(|it| it.3.iter().map(|&v| T::from_f64_lossy(v)))
            .collect();
        Ok(LossConstants {
            rho: stack_grids(&rho)?,
            upsilon: stack_grids(&ups)?,
            omega: stack_grids(&omega)?,
            c: Tensor::new(vec![items.len(), k, 1, 1], c)?,
        })
    }
}

/// Scalar term nodes; `None` for deselected or undefined terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossNodes {
    pub terms: [Option<Var>; 7],
}

impl LossNodes {
    pub fn total<T: Element>(&self, g: &mut Graph<T>) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for t in self.terms.iter().flatten() {
            acc = Some(match acc {
                None => *t,
                Some(a) => g.add(a, *t)?,
            });
        }
        Ok(match acc {
            Some(v) => v,
            None => g.constant(Tensor::scalar(T::zero())),
        })
    }

    pub fn values<T: Element>(&self, g: &Graph<T>) -> LossTerms {
        LossTerms::from_array(self.terms.map(|t| t.map_or(0.0, |v| g.value(v).item().as_f64())))
    }
}

fn half<T: Element>(g: &mut Graph<T>, v: Var) -> Var {
    g.scale(v, T::from_f64_lossy(0.5))
}

/// `1/2 [sum(2 w * s) - sum(ln s)]`, the shared form of the variance terms.
fn variance_term<T: Element>(g: &mut Graph<T>, weighted: Var, var: Variance) -> Result<Var> {
    let lin = g.sum(weighted);
    let lin = g.scale(lin, T::from_f64_lossy(2.0));
    let logs = g.sum(var.log_var);
    let d = g.sub(lin, logs)?;
    Ok(half(g, d))
}

/// Builds the unfolded variational loss on `g`, summed over the batch.
pub fn variational_loss_graph<T: Element>(
    g: &mut Graph<T>,
    inp: &LossInputs,
    consts: &LossConstants<T>,
    h: &HyperParams,
    sel: TermSelection,
) -> Result<LossNodes> {
    let mut terms: [Option<Var>; 7] = [None; 7];
    let rho = g.constant(consts.rho.clone());
    let ups = g.constant(consts.upsilon.clone());
    let omega = g.constant(consts.omega.clone());
    let c = g.constant(consts.c.clone());

    if sel.appearance {
        let recon = g.add(inp.x_sample, inp.m_sample)?;
        let r = g.sub(inp.y, recon)?;
        let q = g.weighted_sq_norm(r, rho)?;
        terms[0] = Some(half(g, q));

        let centred = g.add_scalar(inp.mu_m, T::from_f64_lossy(-h.mu_m0));
        let sq = g.square(centred)?;
        let s = g.sum(sq);
        terms[5] = Some(g.scale(s, T::from_f64_lossy(0.5 * h.sigma_m0)));

        if let Some(var_m) = inp.var_m {
            let w = g.scale(var_m.var, T::from_f64_lossy(0.5 * h.sigma_m0));
            terms[6] = Some(variance_term(g, w, var_m)?);
        }
    }

    if sel.segmentation {
        let cw = g.mul(c, omega)?;
        terms[1] = Some(sar_quadratic_graph(g, inp.mu_z, cw)?);
        if let Some(var_z) = inp.var_z {
            let w = g.mul(cw, var_z.var)?;
            terms[2] = Some(variance_term(g, w, var_z)?);
        }
    }

    if sel.shape {
        let zu = g.mul(inp.mu_z, ups)?;
        let dx = crate::sar::apply_d_graph(g, inp.mu_x)?;
        let dx2 = g.square(dx)?;
        let e = g.mul(zu, dx2)?;
        let s = g.sum(e);
        terms[3] = Some(half(g, s));
        if let Some(var_x) = inp.var_x {
            let w = g.mul(zu, var_x.var)?;
            terms[4] = Some(variance_term(g, w, var_x)?);
        }
    }
    Ok(LossNodes { terms })
}

/// Evaluates every term for one image in double precision.
pub fn variational_loss(
    y: &ImageGrid,
    s: &VariationalState,
    x_sample: &ImageGrid,
    m_sample: &ImageGrid,
    h: &HyperParams,
) -> Result<LossTerms> {
    let mut g = Graph::<f64>::new();
    let one = |g: &mut Graph<f64>, f: &ImageGrid| g.constant(f.to_tensor());
    let many =
        |g: &mut Graph<f64>, fs: &[ImageGrid]| -> Result<Var> { Ok(g.constant(stack_grids(&[fs.iter().collect()])?)) };
    let var_of = |p: &ImageGrid| p.map(|v| v * v);
    let vx = one(&mut g, &var_of(&s.x.std));
    let vm = one(&mut g, &var_of(&s.m.std));
    let vz = many(&mut g, &s.z_std.iter().map(var_of).collect::<Vec<_>>())?;
    let inp = LossInputs {
        y: one(&mut g, y),
        x_sample: one(&mut g, x_sample),
        m_sample: one(&mut g, m_sample),
        mu_x: one(&mut g, &s.x.mean),
        var_x: Some(Variance::from_var(&mut g, vx)?),
        mu_m: one(&mut g, &s.m.mean),
        var_m: Some(Variance::from_var(&mut g, vm)?),
        mu_z: many(&mut g, &s.z_mean)?,
        var_z: Some(Variance::from_var(&mut g, vz)?),
    };
    let consts = LossConstants::from_states(&[(&s.rho, &s.upsilon, &s.omega[..], &s.pi.c[..])])?;
    let nodes = variational_loss_graph(&mut g, &inp, &consts, h, TermSelection::default())?;
    Ok(nodes.values(&g))
}

/// `L_ce + lambda * L_var`.
pub fn total_loss(l_ce: f64, l_var: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::domain("total_loss", format!("lambda = {lambda}")));
    }
    Ok(l_ce + lambda * l_var)
}

/// Pixel-averaged `-sum_k u_k ln z_k` for a one-hot `u`.
pub fn cross_entropy(u: &[ImageGrid], z: &[ImageGrid]) -> Result<f64> {
    LabelMap::from_one_hot(u)?;
    if z.len() != u.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} label vs {} prob channels", u.len(), z.len()),
        ));
    }
    let n = u[0].len();
    let mut acc = 0.0;
    for (uk, zk) in u.iter().zip(z) {
        uk.check_same(zk, "cross_entropy")?;
        for (a, b) in uk.data().iter().zip(zk.data()) {
            if *a != 0.0 {
                acc -= a * b.max(CE_CLAMP).ln();
            }
        }
    }
    Ok(acc / n as f64)
}

/// Per-pixel minimizers of the three variance terms with all else fixed:
/// `var_x = 1 / (2 sum_k mu_z_k upsilon)`, `var_m = 1 / sigma_m0`,
/// `var_z_k = 1 / (2 c_k omega_k)`.
pub fn minimizing_variances(s: &VariationalState, h: &HyperParams) -> Result<(ImageGrid, ImageGrid, Vec<ImageGrid>)> {
    let (rows, cols) = s.upsilon.dims();
    let mut weight = ImageGrid::zeros(rows, cols);
    for z in &s.z_mean {
        let zu = z.zip_with(&s.upsilon, |a, b| a * b)?;
        weight = weight.zip_with(&zu, |a, b| a + b)?;
    }
    let var_x = weight.map(|w| 1.0 / (2.0 * w));
    let var_m = ImageGrid::filled(rows, cols, 1.0 / h.sigma_m0);
    let var_z = s
        .omega
        .iter()
        .zip(&s.pi.c)
        .map(|(w, &c)| w.map(|v| 1.0 / (2.0 * c * v)))
        .collect();
    Ok((var_x, var_m, var_z))
}

/// Graph cross-entropy averaged over all `N*H*W` pixels of the batch.
pub fn cross_entropy_graph<T: Element>(g: &mut Graph<T>, one_hot: Var, z: Var) -> Result<Var> {
    let dims = g.value(z).dims().to_vec();
    if g.value(one_hot).dims() != dims.as_slice() || dims.len() != 4 {
        return Err(Error::shape(
            "cross_entropy_graph",
            format!("labels {:?} vs probabilities {dims:?}", g.value(one_hot).dims()),
        ));
    }
    let pixels = dims[0] * dims[2] * dims[3];
    let clamped = g.clamp_min(z, T::from_f64_lossy(CE_CLAMP));
    let logs = g.log(clamped)?;
    let picked = g.mul(one_hot, logs)?;
    let s = g.sum(picked);
    Ok(g.scale(s, T::from_f64_lossy(-1.0 / pixels as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_state(k: usize, h: usize, w: usize) -> (Vec<ImageGrid>, Vec<ImageGrid>) {
        let mu: Vec<ImageGrid> = (0..k).map(|_| ImageGrid::filled(h, w, 1.0 / k as f64)).collect();
        let sd: Vec<ImageGrid> = (0..k).map(|_| ImageGrid::zeros(h, w)).collect();
        (mu, sd)
    }

    #[test]
    fn defaults_are_the_published_constants() {
        let h = HyperParams::default();
        assert_eq!((h.rho.rate, h.upsilon.rate, h.omega.rate), (1e-6, 1e-8, 1e-4));
        assert_eq!((h.rho.shape, h.upsilon.shape, h.omega.shape), (2.0, 2.0, 2.0));
        assert_eq!(
            (h.pi.alpha, h.pi.beta, h.mu_m0, h.sigma_m0, h.lambda),
            (2.0, 2.0, 0.0, 1.0, 100.0)
        );
        h.validate().unwrap();
    }

    #[test]
    fn rho_at_zero_residual() {
        let y = ImageGrid::filled(2, 2, 0.7);
        let x = ImageGrid::filled(2, 2, 0.5);
        let m = ImageGrid::filled(2, 2, 0.2);
        let mut h = HyperParams::default();
        h.rho.rate = 0.5;
        let r = update_rho(&y, &x, &m, &h).unwrap();
        assert!(r.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
        let r = update_rho(&y, &x, &m, &HyperParams::default()).unwrap();
        assert!(r.data().iter().all(|&v| (v - 2.5e6).abs() < 1e-3));
    }

    #[test]
    fn upsilon_flat_shape() {
        let h = HyperParams::default();
        let (mu_z, _) = flat_state(3, 4, 4);
        let mu_x = ImageGrid::filled(4, 4, 1.3);
        let s = 0.04f64;
        let sigma_x = ImageGrid::filled(4, 4, s.sqrt());
        let u = update_upsilon(&mu_z, &mu_x, &sigma_x, &h).unwrap();
        let expected = 7.0 / (2.0 * s + 2e-8);
        assert!(u.data().iter().all(|&v| ((v - expected) / expected).abs() < 1e-12));
        let u0 = update_upsilon(&mu_z, &mu_x, &ImageGrid::zeros(4, 4), &h).unwrap();
        assert!(u0.data().iter().all(|&v| ((v - 3.5e8) / 3.5e8).abs() < 1e-12));
    }

    #[test]
    fn omega_flat_limit_and_monotonicity() {
        let h = HyperParams::default();
        let (mu_z, sd) = flat_state(2, 3, 3);
        let w = update_omega(&mu_z, &sd, &[0.8, 0.8], &h).unwrap();
        assert!(w[0].data().iter().all(|&v| (v - 2.5e4).abs() < 1e-8));

        let mu_z = vec![
            ImageGrid::from_fn(3, 3, |y, _| if y == 0 { 1.0 } else { 0.0 }),
            ImageGrid::from_fn(3, 3, |y, _| if y == 0 { 0.0 } else { 1.0 }),
        ];
        let sd = vec![ImageGrid::filled(3, 3, 0.1); 2];
        let a = update_omega(&mu_z, &sd, &[0.5, 0.5], &h).unwrap();
        let b = update_omega(&mu_z, &sd, &[1.0, 0.5], &h).unwrap();
        for (p, q) in a[0].data().iter().zip(b[0].data()) {
            assert!(q < p);
        }
        assert_eq!(a[1], b[1]);
    }

    #[test]
    fn pi_flat_map() {
        let h = HyperParams::default();
        let (mu_z, sd) = flat_state(2, 4, 4);
        let omega = update_omega(&mu_z, &sd, &[1.0, 1.0], &h).unwrap();
        let p = update_pi(&omega, &mu_z, &sd, &h).unwrap();
        assert_eq!(p.alpha, vec![10.0, 10.0]);
        assert_eq!(p.beta, vec![2.0, 2.0]);
    }

    #[test]
    fn nonpositive_c_rejected() {
        let (mu_z, sd) = flat_state(2, 2, 2);
        assert!(update_omega(&mu_z, &sd, &[1.0, 0.0], &HyperParams::default()).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let l = LabelMap::new(1, 3, 2, vec![0, 1, 1]).unwrap();
        let u = l.one_hot();
        assert_eq!(cross_entropy(&u, &u).unwrap(), 0.0);
        let uniform = vec![ImageGrid::filled(1, 3, 0.5); 2];
        assert!((cross_entropy(&u, &uniform).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let soft = vec![ImageGrid::filled(1, 3, 0.5); 2];
        assert!(matches!(cross_entropy(&soft, &uniform), Err(Error::Data(_))));
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.3, 0.0, 100.0).unwrap(), 0.3);
        assert_eq!(total_loss(0.3, 5.0, 0.0).unwrap(), 0.3);
        assert_eq!(total_loss(0.5, 2.0, 100.0).unwrap(), 200.5);
        assert!(total_loss(0.5, 2.0, -1.0).is_err());
    }
}
