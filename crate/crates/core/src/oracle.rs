//! Independent reference computations for the closed-form updates, the
//! loss, the SAR operator and the gradients, plus a runnable suite.
//!
//! Nothing here calls the code it checks: Gamma posterior means come from
//! numerical integration of prior times likelihood, sums from explicit
//! pixel loops, `D` from a dense matrix, gradients from central differences.

use std::time::Instant;

use bayeseg_tensor::{check_grad, Element, Graph, Padding, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bayes::{
    minimizing_variances, update_omega, update_pi, update_rho, update_upsilon, variational_loss,
    variational_loss_graph, HyperParams, LossConstants, LossInputs, LossTerms, PiPosterior, TermSelection, Variance,
    VariationalState,
};
use crate::distributions::{digamma, expected_neg_log1m_with, sample_beta, BetaParams, GammaParams, GaussianParams};
use crate::error::Result;
use crate::grid::ImageGrid;
use crate::sar::apply_d;

/// Nodes of the log-precision grid used by [`gamma_posterior_mean`].
const QUAD_NODES: usize = 40_000;

/// Posterior mean of a precision `tau` with prior `Gamma(shape, rate)` and
/// log-likelihood `log_lik(tau)`, by trapezoid quadrature over `ln tau`.
pub fn gamma_posterior_mean(prior: GammaParams, log_lik: impl Fn(f64) -> f64) -> f64 {
    // log density of u = ln tau, including the Jacobian tau
    let log_post = |u: f64| {
        let tau = u.exp();
        prior.shape * u - prior.rate * tau + log_lik(tau)
    };
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut u = -80.0;
    while u <= 80.0 {
        let v = log_post(u);
        if v > best.0 {
            best = (v, u);
        }
        u += 0.01;
    }
    let (lo, hi) = (best.1 - 80.0, best.1 + 12.0);
    let step = (hi - lo) / QUAD_NODES as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=QUAD_NODES {
        let u = lo + step * i as f64;
        let w = if i == 0 || i == QUAD_NODES { 0.5 } else { 1.0 };
        let p = (log_post(u) - best.0).exp();
        den += w * p;
        num += w * p * u.exp();
    }
    num / den
}

/// Appearance precision given one residual `r ~ N(0, 1/tau)`.
pub fn rho_posterior_mean(prior: GammaParams, residual: f64) -> f64 {
    gamma_posterior_mean(prior, |tau| 0.5 * tau.ln() - 0.5 * tau * residual * residual)
}

/// Shape-boundary precision given one factor per class with weight `z_k`
/// and expected squared difference `energy`.
pub fn upsilon_posterior_mean(prior: GammaParams, z: &[f64], energy: f64) -> f64 {
    gamma_posterior_mean(prior, |tau| {
        z.iter().map(|zk| 0.5 * tau.ln() - 0.5 * zk * tau * energy).sum()
    })
}

/// Segmentation-boundary precision under one factor scaled by `c`.
pub fn omega_posterior_mean(prior: GammaParams, c: f64, energy: f64) -> f64 {
    gamma_posterior_mean(prior, |tau| 0.5 * tau.ln() - 0.5 * c * tau * energy)
}

/// `(D f)` at one pixel by explicit neighbour clamping.
pub fn d_at(f: &ImageGrid, y: usize, x: usize) -> f64 {
    let (h, w) = f.dims();
    let up = if y == 0 { f.get(y, x) } else { f.get(y - 1, x) };
    let down = if y + 1 == h { f.get(y, x) } else { f.get(y + 1, x) };
    let left = if x == 0 { f.get(y, x) } else { f.get(y, x - 1) };
    let right = if x + 1 == w { f.get(y, x) } else { f.get(y, x + 1) };
    f.get(y, x) - 0.25 * up - 0.25 * down - 0.25 * left - 0.25 * right
}

/// Dense `I - B` for an `h x w` grid, row-major pixel order.
pub fn sar_matrix(h: usize, w: usize) -> Vec<Vec<f64>> {
    let n = h * w;
    let mut m = vec![vec![0.0; n]; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            m[i][i] += 1.0;
            let ny = [y.saturating_sub(1), (y + 1).min(h - 1), y, y];
            let nx = [x, x, x.saturating_sub(1), (x + 1).min(w - 1)];
            for t in 0..4 {
                m[i][ny[t] * w + nx[t]] -= 0.25;
            }
        }
    }
    m
}

/// `beta_k = 1/2 sum_i omega_ki [(D mu_zk)_i^2 + 2 sigma_zki^2] + beta0` by loops.
pub fn beta_pi_loop(mu_omega: &[ImageGrid], mu_z: &[ImageGrid], sigma_z: &[ImageGrid], beta0: f64) -> Vec<f64> {
    (0..mu_z.len())
        .map(|k| {
            let (h, w) = mu_z[k].dims();
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let d = d_at(&mu_z[k], y, x);
                    let s = sigma_z[k].get(y, x);
                    acc += mu_omega[k].get(y, x) * (d * d + 2.0 * s * s);
                }
            }
            0.5 * acc + beta0
        })
        .collect()
}

/// Monte-Carlo mean and standard error of `-ln(1 - p)`, `p ~ Beta`.
pub fn neg_log1m_monte_carlo<R: Rng>(b: BetaParams, draws: usize, rng: &mut R) -> (f64, f64) {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let v = -(1.0 - sample_beta(b, rng)).ln();
        s += v;
        s2 += v * v;
    }
    let n = draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Every loss term by explicit pixel loops.
pub fn loss_terms_loop(
    y: &ImageGrid,
    s: &VariationalState,
    x_sample: &ImageGrid,
    m_sample: &ImageGrid,
    h: &HyperParams,
) -> LossTerms {
    let (hh, ww) = y.dims();
    let k = s.z_mean.len();
    let mut t = LossTerms::default();
    for r in 0..hh {
        for c in 0..ww {
            let res = y.get(r, c) - x_sample.get(r, c) - m_sample.get(r, c);
            t.l_y += 0.5 * s.rho.get(r, c) * res * res;

            let dx = d_at(&s.x.mean, r, c);
            let vx = s.x.std.get(r, c).powi(2);
            let mut zsum = 0.0;
            for j in 0..k {
                let zu = s.z_mean[j].get(r, c) * s.upsilon.get(r, c);
                t.l_mu_x += 0.5 * zu * dx * dx;
                zsum += zu;

                let dz = d_at(&s.z_mean[j], r, c);
                let cw = s.pi.c[j] * s.omega[j].get(r, c);
                t.l_mu_z += 0.5 * cw * dz * dz;
                let vz = s.z_std[j].get(r, c).powi(2);
                t.l_sigma_z += 0.5 * (2.0 * cw * vz - vz.ln());
            }
            t.l_sigma_x += 0.5 * (2.0 * zsum * vx - vx.ln());

            let mm = s.m.mean.get(r, c) - h.mu_m0;
            t.l_mu_m += 0.5 * h.sigma_m0 * mm * mm;
            let vm = s.m.std.get(r, c).powi(2);
            t.l_sigma_m += 0.5 * (h.sigma_m0 * vm - vm.ln());
        }
    }
    t
}

/// Outcome of one oracle family.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutcome {
    pub family: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Digamma used by the suite; swap it to test the suite's sensitivity.
pub type Psi = dyn Fn(f64) -> Result<f64>;

pub struct OracleSuite<'a> {
    pub psi: &'a Psi,
    pub seed: u64,
    /// Random instances per closed-form update.
    pub instances: usize,
    /// Beta draws per Monte-Carlo estimate.
    pub mc_draws: usize,
    /// Random instances per gradient check.
    pub grad_instances: usize,
}

impl Default for OracleSuite<'static> {
    fn default() -> Self {
        OracleSuite {
            psi: &digamma,
            seed: 20_240_101,
            instances: 100,
            mc_draws: 1_000_000,
            grad_instances: 20,
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn random_prior(rng: &mut ChaCha8Rng) -> GammaParams {
    GammaParams {
        shape: rng.random_range(0.5..5.0),
        rate: log_uniform(rng, 1e-8, 1.0),
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> ImageGrid {
    ImageGrid::from_fn(h, w, |_, _| rng.random_range(lo..hi))
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Vec<ImageGrid> {
    let raw: Vec<ImageGrid> = (0..k).map(|_| random_grid(rng, h, w, 0.05, 1.0)).collect();
    let mut out = raw.clone();
    for i in 0..h * w {
        let s: f64 = raw.iter().map(|g| g.data()[i]).sum();
        for (o, r) in out.iter_mut().zip(&raw) {
            o.data_mut()[i] = r.data()[i] / s;
        }
    }
    out
}

/// A random, fully populated state on an `h x w` grid with `k` classes.
pub fn random_state(
    rng: &mut ChaCha8Rng,
    k: usize,
    h: usize,
    w: usize,
) -> (ImageGrid, VariationalState, ImageGrid, ImageGrid) {
    let y = random_grid(rng, h, w, -2.0, 2.0);
    let x_mean = random_grid(rng, h, w, -1.5, 1.5);
    let m_mean = random_grid(rng, h, w, -1.0, 1.0);
    let state = VariationalState {
        x: GaussianParams::new(x_mean, random_grid(rng, h, w, 0.2, 1.2)).expect("positive std"),
        m: GaussianParams::new(m_mean, random_grid(rng, h, w, 0.2, 1.2)).expect("positive std"),
        z_mean: random_simplex(rng, k, h, w),
        z_std: (0..k).map(|_| random_grid(rng, h, w, 0.2, 1.2)).collect(),
        rho: random_grid(rng, h, w, 0.5, 3.0),
        upsilon: random_grid(rng, h, w, 0.5, 3.0),
        omega: (0..k).map(|_| random_grid(rng, h, w, 0.5, 3.0)).collect(),
        pi: PiPosterior {
            alpha: vec![10.0; k],
            beta: vec![5.0; k],
            c: (0..k).map(|_| rng.random_range(0.2..2.0)).collect(),
        },
    };
    let xs = random_grid(rng, h, w, -1.5, 1.5);
    let ms = random_grid(rng, h, w, -1.0, 1.0);
    (y, state, xs, ms)
}

impl OracleSuite<'_> {
    /// Runs every family; stops at nothing, reports all.
    pub fn run(&self) -> Result<Vec<OracleOutcome>> {
        Ok(vec![
            self.digamma_identities()?,
            self.conjugacy_rho()?,
            self.conjugacy_upsilon()?,
            self.conjugacy_omega()?,
            self.beta_pi_loop_check()?,
            self.c_monte_carlo()?,
            self.sar_matrix_check()?,
            self.loss_loop_check()?,
            self.variance_minimizers()?,
            self.loss_gradients()?,
            self.operator_gradients()?,
        ])
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(salt);
        r
    }

    pub fn digamma_identities(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(1);
        let psi = self.psi;
        // psi(1) = -Euler-Mascheroni
        let mut worst = (psi(1.0)? + 0.577_215_664_901_532_9).abs();
        for _ in 0..self.instances {
            let x: f64 = rng.random_range(0.5..100.0);
            worst = worst.max((psi(x + 1.0)? - psi(x)? - 1.0 / x).abs());
            let r: f64 = rng.random_range(0.05..0.95);
            let pi = std::f64::consts::PI;
            worst = worst.max((psi(1.0 - r)? - psi(r)? - pi / (pi * r).tan()).abs());
        }
        Ok(OracleOutcome {
            family: "digamma recurrence/reflection",
            instances: 2 * self.instances + 1,
            max_error: worst,
            tolerance: 1e-10,
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    pub fn conjugacy_rho(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(2);
        let mut worst: f64 = 0.0;
        for _ in 0..self.instances {
            let mut h = HyperParams::default();
            h.rho = random_prior(&mut rng);
            let r: f64 = rng.random_range(-3.0..3.0);
            let y = ImageGrid::filled(1, 1, r);
            let zero = ImageGrid::zeros(1, 1);
            let closed = update_rho(&y, &zero, &zero, &h)?.data()[0];
            worst = worst.max(rel(closed, rho_posterior_mean(h.rho, r)));
        }
        Ok(self.conjugacy_outcome("conjugacy rho (quadrature)", worst, t))
    }

    fn conjugacy_outcome(&self, family: &'static str, worst: f64, t: Instant) -> OracleOutcome {
        OracleOutcome {
            family,
            instances: self.instances,
            max_error: worst,
            tolerance: 1e-6,
            seconds: t.elapsed().as_secs_f64(),
        }
    }

    pub fn conjugacy_upsilon(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(3);
        let mut worst: f64 = 0.0;
        for _ in 0..self.instances {
            let mut h = HyperParams::default();
            h.upsilon = random_prior(&mut rng);
            let k = rng.random_range(2..6);
            // flat 2x2 shape: D mu_x = 0, so the energy is 2 sigma^2
            let z = random_simplex(&mut rng, k, 2, 2);
            let level: f64 = rng.random_range(-2.0..2.0);
            let sd: f64 = log_uniform(&mut rng, 1e-3, 3.0);
            let mu_x = ImageGrid::filled(2, 2, level);
            let closed = update_upsilon(&z, &mu_x, &ImageGrid::filled(2, 2, sd), &h)?.data()[0];
            let weights: Vec<f64> = z.iter().map(|g| g.data()[0]).collect();
            let oracle = upsilon_posterior_mean(h.upsilon, &weights, 2.0 * sd * sd);
            worst = worst.max(rel(closed, oracle));

            // nonflat shape: energy from an independent stencil loop
            let mu_x = random_grid(&mut rng, 3, 3, -2.0, 2.0);
            let sigma = random_grid(&mut rng, 3, 3, 0.01, 1.0);
            let z = random_simplex(&mut rng, k, 3, 3);
            let closed = update_upsilon(&z, &mu_x, &sigma, &h)?;
            let (py, px) = (rng.random_range(0..3), rng.random_range(0..3));
            let d = d_at(&mu_x, py, px);
            let energy = d * d + 2.0 * sigma.get(py, px).powi(2);
            let weights: Vec<f64> = z.iter().map(|g| g.get(py, px)).collect();
            worst = worst.max(rel(
                closed.get(py, px),
                upsilon_posterior_mean(h.upsilon, &weights, energy),
            ));
        }
        Ok(self.conjugacy_outcome("conjugacy upsilon (quadrature)", worst, t))
    }

    pub fn conjugacy_omega(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(4);
        let mut worst: f64 = 0.0;
        for _ in 0..self.instances {
            let mut h = HyperParams::default();
            h.omega = random_prior(&mut rng);
            let k = rng.random_range(2..5);
            let z = random_simplex(&mut rng, k, 3, 3);
            let sd: Vec<ImageGrid> = (0..k).map(|_| random_grid(&mut rng, 3, 3, 0.01, 1.0)).collect();
            let c: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..3.0)).collect();
            let closed = update_omega(&z, &sd, &c, &h)?;
            let j = rng.random_range(0..k);
            let (py, px) = (rng.random_range(0..3), rng.random_range(0..3));
            let d = d_at(&z[j], py, px);
            let energy = d * d + 2.0 * sd[j].get(py, px).powi(2);
            worst = worst.max(rel(closed[j].get(py, px), omega_posterior_mean(h.omega, c[j], energy)));
        }
        Ok(self.conjugacy_outcome("conjugacy omega (quadrature)", worst, t))
    }

    pub fn beta_pi_loop_check(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(5);
        let mut worst: f64 = 0.0;
        for _ in 0..self.instances {
            let k = rng.random_range(2..5);
            let (hh, ww) = (rng.random_range(2..10), rng.random_range(2..10));
            let z = random_simplex(&mut rng, k, hh, ww);
            let sd: Vec<ImageGrid> = (0..k).map(|_| random_grid(&mut rng, hh, ww, 0.0, 1.0)).collect();
            let om: Vec<ImageGrid> = (0..k).map(|_| random_grid(&mut rng, hh, ww, 0.0, 50.0)).collect();
            let h = HyperParams::default();
            let p = update_pi(&om, &z, &sd, &h)?;
            let oracle = beta_pi_loop(&om, &z, &sd, h.pi.beta);
            for (a, b) in p.beta.iter().zip(&oracle) {
                worst = worst.max(rel(*a, *b));
            }
            let expected_alpha = h.pi.alpha + (hh * ww) as f64 / 2.0;
            for a in &p.alpha {
                worst = worst.max(rel(*a, expected_alpha));
            }
        }
        Ok(OracleOutcome {
            family: "label-portion beta (loop sum)",
            instances: self.instances,
            max_error: worst,
            tolerance: 1e-12,
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    /// Largest Monte-Carlo deviation in standard errors, with the exact
    /// uniform case folded in as an absolute error.
    pub fn c_monte_carlo(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(6);
        let psi = |x: f64| (self.psi)(x);
        let uniform = expected_neg_log1m_with(BetaParams::new(1.0, 1.0)?, psi)?;
        // exact value 1 at (1, 1); scaled so 1e-12 maps onto the 3-SE budget
        let mut worst_se = (uniform - 1.0).abs() / 1e-12 * 3.0;
        for _ in 0..10 {
            let b = BetaParams::new(rng.random_range(0.5..10.0), rng.random_range(0.5..10.0))?;
            let exact = expected_neg_log1m_with(b, psi)?;
            let (mean, se) = neg_log1m_monte_carlo(b, self.mc_draws, &mut rng);
            worst_se = worst_se.max((exact - mean).abs() / se);
        }
        Ok(OracleOutcome {
            family: "c_k identity (Monte Carlo, in standard errors)",
            instances: 11,
            max_error: worst_se,
            tolerance: 3.0,
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    pub fn sar_matrix_check(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(7);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (h, w) = (rng.random_range(2..17), rng.random_range(2..17));
            let f = random_grid(&mut rng, h, w, -5.0, 5.0);
            let m = sar_matrix(h, w);
            let d = apply_d(&f)?;
            for (i, row) in m.iter().enumerate() {
                let v: f64 = row.iter().zip(f.data()).map(|(a, b)| a * b).sum();
                worst = worst.max((v - d.data()[i]).abs());
            }
        }
        Ok(OracleOutcome {
            family: "SAR operator (dense matrix)",
            instances: 20,
            max_error: worst,
            tolerance: 1e-12,
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    pub fn loss_loop_check(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(8);
        let mut worst: f64 = 0.0;
        for _ in 0..self.grad_instances {
            let k = rng.random_range(2..5);
            let (y, s, xs, ms) = random_state(&mut rng, k, 6, 5);
            let h = HyperParams::default();
            let a = variational_loss(&y, &s, &xs, &ms, &h)?.as_array();
            let b = loss_terms_loop(&y, &s, &xs, &ms, &h).as_array();
            for (p, q) in a.iter().zip(&b) {
                worst = worst.max((p - q).abs() / q.abs().max(1.0));
            }
        }
        Ok(OracleOutcome {
            family: "variational loss terms (loop sum)",
            instances: self.grad_instances,
            max_error: worst,
            tolerance: 1e-10,
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    /// Sets every variance to its closed-form minimizer, then scales single
    /// pixels by 0.9 and 1.1. The error counts perturbations that fail to
    /// raise their term strictly, plus a mismatch of `min L_sigma_m` with
    /// `d_y / 2` at `sigma_m0 = 1`.
    pub fn variance_minimizers(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(11);
        let h = HyperParams::default();
        let mut failures = 0usize;
        let mut checks = 0usize;
        for _ in 0..self.grad_instances {
            let k = rng.random_range(2..5);
            let (y, mut s, xs, ms) = random_state(&mut rng, k, 6, 5);
            let (vx, vm, vz) = minimizing_variances(&s, &h)?;
            let sd = |v: &ImageGrid| v.map(f64::sqrt);
            s.x = GaussianParams::new(s.x.mean.clone(), sd(&vx))?;
            s.m = GaussianParams::new(s.m.mean.clone(), sd(&vm))?;
            s.z_std = vz.iter().map(sd).collect();
            let base = variational_loss(&y, &s, &xs, &ms, &h)?;
            let d_y = y.len() as f64;
            checks += 1;
            if (base.l_sigma_m - d_y / 2.0).abs() > 1e-12 * d_y {
                failures += 1;
            }
            for _ in 0..4 {
                let i = rng.random_range(0..y.len());
                for factor in [0.9f64, 1.1] {
                    let scale = factor.sqrt();
                    let mut p = s.clone();
                    p.x.std.data_mut()[i] *= scale;
                    let l = variational_loss(&y, &p, &xs, &ms, &h)?;
                    failures += (l.l_sigma_x <= base.l_sigma_x) as usize;

                    let mut p = s.clone();
                    p.m.std.data_mut()[i] *= scale;
                    let l = variational_loss(&y, &p, &xs, &ms, &h)?;
                    failures += (l.l_sigma_m <= base.l_sigma_m) as usize;

                    let c = rng.random_range(0..k);
                    let mut p = s.clone();
                    p.z_std[c].data_mut()[i] *= scale;
                    let l = variational_loss(&y, &p, &xs, &ms, &h)?;
                    failures += (l.l_sigma_z <= base.l_sigma_z) as usize;
                    checks += 3;
                }
            }
        }
        Ok(OracleOutcome {
            family: "variance minimizers (+-10% perturbation, failures)",
            instances: checks,
            max_error: failures as f64,
            tolerance: 0.0,
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    /// Each loss term, differentiated in double and single precision.
    pub fn loss_gradients(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(9);
        let mut worst: f64 = 0.0;
        for _ in 0..self.grad_instances {
            let k = rng.random_range(2..4);
            let (y, s, xs, ms) = random_state(&mut rng, k, 4, 5);
            for term in 0..7 {
                let r = loss_term_gradcheck(&y, &s, &xs, &ms, term)?;
                worst = worst.max(r.rel_err_f64 / 1e-6).max(r.rel_err_f32 / 1e-3);
            }
        }
        Ok(OracleOutcome {
            family: "loss-term gradients (finite differences, error/tolerance)",
            instances: 7 * self.grad_instances,
            max_error: worst,
            tolerance: 1.0,
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    /// Convolution with both paddings and channel softmax.
    pub fn operator_gradients(&self) -> Result<OracleOutcome> {
        let t = Instant::now();
        let mut rng = self.rng(10);
        let mut worst: f64 = 0.0;
        for _ in 0..self.grad_instances {
            let x = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.random_range(-1.0..1.0));
            let k = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
            let r = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.random_range(-1.0..1.0));
            for pad in [Padding::Zero(1), Padding::Replicate(1)] {
                let c = check_grad!(vec![x.clone(), k.clone()], |g, v| {
                    let y = g.conv2d(v[0], v[1], 1, pad)?;
                    let p = g.channel_softmax(y)?;
                    let rc = g.constant(r.cast());
                    let l = g.mul(p, rc)?;
                    Ok(g.sum(l))
                })?;
                worst = worst.max(c.rel_err_f64 / 1e-6).max(c.rel_err_f32 / 1e-3);
            }
        }
        Ok(OracleOutcome {
            family: "conv/softmax gradients (finite differences, error/tolerance)",
            instances: 2 * self.grad_instances,
            max_error: worst,
            tolerance: 1.0,
            seconds: t.elapsed().as_secs_f64(),
        })
    }
}

fn stack(fs: &[ImageGrid]) -> Tensor<f64> {
    let (h, w) = fs[0].dims();
    let data = fs.iter().flat_map(|f| f.data().iter().copied()).collect();
    Tensor::new(vec![1, fs.len(), h, w], data).expect("consistent grids")
}

/// Finite-difference check of a single loss term with respect to every
/// differentiable input (samples, means and variances).
pub fn loss_term_gradcheck(
    y: &ImageGrid,
    s: &VariationalState,
    xs: &ImageGrid,
    ms: &ImageGrid,
    term: usize,
) -> Result<bayeseg_tensor::gradcheck::GradCheck> {
    let h = HyperParams::default();
    let sq = |f: &ImageGrid| f.map(|v| v * v);
    let inputs = vec![
        xs.to_tensor(),
        ms.to_tensor(),
        s.x.mean.to_tensor(),
        sq(&s.x.std).to_tensor(),
        s.m.mean.to_tensor(),
        sq(&s.m.std).to_tensor(),
        stack(&s.z_mean),
        stack(&s.z_std.iter().map(sq).collect::<Vec<_>>()),
    ];
    let consts64 = LossConstants::<f64>::from_states(&[(&s.rho, &s.upsilon, &s.omega[..], &s.pi.c[..])])?;
    let yt = y.to_tensor();
    let build = |g: &mut Graph<f64>, v: &[Var]| term_node(g, v, &yt, &consts64, &h, term);
    let build32 = |g: &mut Graph<f32>, v: &[Var]| {
        let c = LossConstants {
            rho: consts64.rho.cast(),
            upsilon: consts64.upsilon.cast(),
            omega: consts64.omega.cast(),
            c: consts64.c.cast(),
        };
        term_node(g, v, &yt, &c, &h, term)
    };
    Ok(bayeseg_tensor::gradcheck::compare(&inputs, build, build32)?)
}

fn term_node<T: Element>(
    g: &mut Graph<T>,
    v: &[Var],
    y: &Tensor<f64>,
    consts: &LossConstants<T>,
    h: &HyperParams,
    term: usize,
) -> std::result::Result<Var, TensorError> {
    let usage = |e: crate::Error| TensorError::Usage(e.to_string());
    let inp = LossInputs {
        y: g.constant(y.cast()),
        x_sample: v[0],
        m_sample: v[1],
        mu_x: v[2],
        var_x: Some(Variance::from_var(g, v[3]).map_err(usage)?),
        mu_m: v[4],
        var_m: Some(Variance::from_var(g, v[5]).map_err(usage)?),
        mu_z: v[6],
        var_z: Some(Variance::from_var(g, v[7]).map_err(usage)?),
    };
    let nodes = variational_loss_graph(g, &inp, consts, h, TermSelection::default())
        .map_err(|e| TensorError::Usage(e.to_string()))?;
    nodes.terms[term].ok_or_else(|| TensorError::Usage(format!("term {term} missing")))
}
