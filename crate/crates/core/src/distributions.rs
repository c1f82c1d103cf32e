//! Digamma, conjugate-family parameter types, and samplers.

use bayeseg_tensor::{Element, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Asymptotic digamma coefficients `B_2k / 2k`, `k = 1..=6`.
pub const DIGAMMA_SERIES: [f64; 6] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
];

/// Arguments below this are shifted up by the recurrence first.
const DIGAMMA_SHIFT: f64 = 6.0;

pub fn digamma(x: f64) -> Result<f64> {
    digamma_with_series(x, &DIGAMMA_SERIES)
}

/// Digamma with caller-supplied asymptotic coefficients.
pub fn digamma_with_series(x: f64, series: &[f64; 6]) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(
            "digamma",
            format!("argument {x} is not a positive finite real"),
        ));
    }
    let mut acc = 0.0;
    let mut z = x;
    while z < DIGAMMA_SHIFT {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut tail = 0.0;
    for &c in series.iter().rev() {
        tail = tail * inv2 + c;
    }
    Ok(acc + z.ln() - 0.5 / z - tail * inv2)
}

/// Gamma law with shape `shape` and rate `rate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) {
            return Err(Error::domain("GammaParams", format!("shape {shape}, rate {rate}")));
        }
        Ok(GammaParams { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::domain("BetaParams", format!("alpha {alpha}, beta {beta}")));
        }
        Ok(BetaParams { alpha, beta })
    }
}

/// `E[-ln(1 - p)]` for `p ~ Beta(alpha, beta)`, i.e. `psi(alpha + beta) - psi(beta)`.
pub fn expected_neg_log1m(b: BetaParams) -> Result<f64> {
    expected_neg_log1m_with(b, digamma)
}

/// As [`expected_neg_log1m`] with an injected digamma.
pub fn expected_neg_log1m_with(b: BetaParams, psi: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    Ok(psi(b.alpha + b.beta)? - psi(b.beta)?)
}

/// Diagonal Gaussian over a field.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: ImageGrid,
    pub std: ImageGrid,
}

impl GaussianParams {
    pub fn new(mean: ImageGrid, std: ImageGrid) -> Result<Self> {
        mean.check_same(&std, "GaussianParams::new")?;
        if let Some((i, s)) = std.data().iter().enumerate().find(|(_, &s)| !(s >= 0.0)) {
            return Err(Error::domain("GaussianParams", format!("std {s} at pixel {i}")));
        }
        Ok(GaussianParams { mean, std })
    }

    pub fn variance(&self) -> ImageGrid {
        self.std.map(|s| s * s)
    }
}

/// `mean + std * noise`.
pub fn sample_gaussian_reparam(p: &GaussianParams, noise: &ImageGrid) -> Result<ImageGrid> {
    p.mean.check_same(noise, "sample_gaussian_reparam")?;
    let scaled = p.std.zip_with(noise, |s, e| s * e)?;
    p.mean.zip_with(&scaled, |m, d| m + d)
}

/// Differentiable `mean + exp(log_var / 2) * noise`.
pub fn reparam_from_log_var<T: Element>(g: &mut Graph<T>, mean: Var, log_var: Var, noise: Var) -> Result<Var> {
    let half = g.scale(log_var, T::from_f64_lossy(0.5));
    let std = g.exp(half)?;
    let d = g.mul(std, noise)?;
    Ok(g.add(mean, d)?)
}

pub fn sample_gamma<R: Rng + ?Sized>(p: GammaParams, rng: &mut R) -> f64 {
    rand_distr::Gamma::new(p.shape, 1.0 / p.rate)
        .expect("validated gamma parameters")
        .sample(rng)
}

pub fn sample_beta<R: Rng + ?Sized>(p: BetaParams, rng: &mut R) -> f64 {
    rand_distr::Beta::new(p.alpha, p.beta)
        .expect("validated beta parameters")
        .sample(rng)
}

pub fn standard_normal_field<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> ImageGrid {
    ImageGrid::from_fn(height, width, |_, _| rng.sample(StandardNormal))
}

pub fn standard_normal_tensor<T: Element, R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_at_one_and_two() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
        assert!((digamma(2.0).unwrap() - (1.0 - EULER_GAMMA)).abs() < 1e-12);
    }

    #[test]
    fn digamma_half() {
        // psi(1/2) = -gamma - 2 ln 2
        let expected = -EULER_GAMMA - 2.0 * std::f64::consts::LN_2;
        assert!((digamma(0.5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn digamma_rejects_nonpositive() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
        assert!(digamma(f64::NAN).is_err());
    }

    #[test]
    fn expected_neg_log1m_closed_forms() {
        let uniform = expected_neg_log1m(BetaParams::new(1.0, 1.0).unwrap()).unwrap();
        assert!((uniform - 1.0).abs() < 1e-12);
        let b22 = expected_neg_log1m(BetaParams::new(2.0, 2.0).unwrap()).unwrap();
        assert!((b22 - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn reparam_degenerate_cases() {
        let mean = ImageGrid::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let zero_std = GaussianParams::new(mean.clone(), ImageGrid::zeros(1, 3)).unwrap();
        let noise = ImageGrid::new(1, 3, vec![3.0, -2.0, 0.1]).unwrap();
        assert_eq!(sample_gaussian_reparam(&zero_std, &noise).unwrap(), mean);
        let unit = GaussianParams::new(mean.clone(), ImageGrid::filled(1, 3, 1.0)).unwrap();
        assert_eq!(sample_gaussian_reparam(&unit, &ImageGrid::zeros(1, 3)).unwrap(), mean);
    }

    #[test]
    fn normal_field_is_seed_deterministic() {
        let a = standard_normal_field(8, 8, &mut ChaCha8Rng::seed_from_u64(5));
        let b = standard_normal_field(8, 8, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(GammaParams::new(0.0, 1.0).is_err());
        assert!(BetaParams::new(1.0, -1.0).is_err());
    }
}
