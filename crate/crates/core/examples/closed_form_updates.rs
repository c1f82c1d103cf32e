//! Closed-form posterior updates on one rendered scene, computed without
//! networks: the shape is the 3x3-smoothed image, the appearance sample is
//! zero, and `mu_z` is the one-hot ground truth.

use bayeseg::bayes::{update_omega_pi, update_rho, update_upsilon, HyperParams};
use bayeseg::sar::{apply_d, sar_quadratic};
use bayeseg::synth::{case_rng, generate_case, DomainSpec, SceneSpec};
use bayeseg::ImageGrid;

fn summary(name: &str, f: &ImageGrid) {
    let (lo, hi) = f.min_max();
    println!("{name:<10} min {lo:.3e} mean {:.3e} max {hi:.3e}", f.mean());
}

fn main() -> bayeseg::Result<()> {
    let scene = SceneSpec::default();
    let (y, labels) = generate_case(&scene, &DomainSpec::source(), &mut case_rng(7, 0))?;
    let (h, w) = y.dims();
    let hp = HyperParams::default();

    let x = ImageGrid::from_fn(h, w, |r, c| {
        let mut s = 0.0;
        let mut n = 0.0;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    s += y.get(rr as usize, cc as usize);
                    n += 1.0;
                }
            }
        }
        s / n
    });
    let m = ImageGrid::zeros(h, w);
    let mu_z = labels.one_hot();
    let small = ImageGrid::filled(h, w, 0.05);

    summary("D x", &apply_d(&x)?.map(f64::abs));
    println!(
        "SAR energy of x with unit weights: {:.4}",
        sar_quadratic(&x, &ImageGrid::filled(h, w, 1.0))?
    );

    let rho = update_rho(&y, &x, &m, &hp)?;
    let upsilon = update_upsilon(&mu_z, &x, &small, &hp)?;
    let sigma_z = vec![small.clone(); mu_z.len()];
    let (omega, pi) = update_omega_pi(&mu_z, &sigma_z, &hp)?;
    summary("rho", &rho);
    summary("upsilon", &upsilon);
    for (k, o) in omega.iter().enumerate() {
        summary(&format!("omega[{k}]"), o);
    }
    println!("pi alpha {:?}", pi.alpha);
    println!(
        "pi beta  {:?}",
        pi.beta.iter().map(|b| format!("{b:.1}")).collect::<Vec<_>>()
    );
    println!(
        "c        {:?}",
        pi.c.iter().map(|c| format!("{c:.3e}")).collect::<Vec<_>>()
    );

    // edges carry the large |D x|, so their upsilon is small
    let edge = labels.boundary();
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for (v, e) in upsilon.data().iter().zip(edge) {
        if e {
            on.push(*v)
        } else {
            off.push(*v)
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("upsilon on boundaries {:.3e}, elsewhere {:.3e}", avg(&on), avg(&off));
    Ok(())
}
