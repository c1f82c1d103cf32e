//! Runs every numerical oracle family and prints one line per family.
//!
//! A slightly wrong digamma is also run through the c_k family to show
//! that the Monte-Carlo oracle notices it.

use bayeseg::distributions::digamma;
use bayeseg::oracle::OracleSuite;

fn main() -> bayeseg::Result<()> {
    let suite = OracleSuite {
        mc_draws: 200_000,
        ..OracleSuite::default()
    };
    for o in suite.run()? {
        let verdict = if o.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<62} max_err={:.3e} tol={:.1e}",
            o.family, o.max_error, o.tolerance
        );
    }

    let broken = |x: f64| digamma(x).map(|v| v + 0.01 / x);
    let perturbed = OracleSuite {
        psi: &broken,
        mc_draws: 200_000,
        ..OracleSuite::default()
    };
    let o = perturbed.c_monte_carlo()?;
    println!(
        "perturbed digamma: c_k family passed={} ({:.1} standard errors)",
        o.passed(),
        o.max_error
    );
    Ok(())
}
