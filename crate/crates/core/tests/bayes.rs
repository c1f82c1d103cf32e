use bayeseg::bayes::*;
use bayeseg::distributions::standard_normal_field;
use bayeseg::networks::sample_appearance;
use bayeseg::ImageGrid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ImageGrid {
    ImageGrid::from_fn(5, 6, |_, _| rng.random_range(lo..hi))
}

fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<ImageGrid> {
    let raw: Vec<ImageGrid> = (0..k).map(|_| field(rng, 0.0, 1.0)).collect();
    let mut out = raw.clone();
    for i in 0..raw[0].len() {
        let s: f64 = raw.iter().map(|g| g.data()[i]).sum::<f64>().max(1e-300);
        for (o, r) in out.iter_mut().zip(&raw) {
            o.data_mut()[i] = r.data()[i] / s;
        }
    }
    out
}

#[test]
fn settled_omega_matches_returned_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = HyperParams::default();
    for _ in 0..20 {
        let mu_z = simplex(&mut rng, 3);
        let sd: Vec<ImageGrid> = (0..3).map(|_| field(&mut rng, 0.01, 0.5)).collect();
        let (omega, pi) = update_omega_pi(&mu_z, &sd, &h).unwrap();
        let again = update_omega(&mu_z, &sd, &pi.c, &h).unwrap();
        for (a, b) in omega.iter().zip(&again) {
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!(((p - q) / q).abs() < 1e-6, "{p} vs {q}");
            }
        }
        let refreshed = update_pi(&omega, &mu_z, &sd, &h).unwrap();
        assert_eq!(refreshed, pi);
    }
}

#[test]
fn appearance_sample_variance_is_inverse_precision() {
    let rho = ImageGrid::filled(1, 1, 4.0);
    let m = ImageGrid::filled(1, 1, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            sample_appearance(&m, &rho, &standard_normal_field(1, 1, &mut rng))
                .unwrap()
                .data()[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    assert!((var - 0.25).abs() / 0.25 < 0.02, "variance {var}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn updates_are_strictly_positive(seed in 0u64..100_000, scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = HyperParams::default();
        let y = field(&mut rng, -scale, scale);
        let x = field(&mut rng, -scale, scale);
        let m = field(&mut rng, -scale, scale);
        let mu_z = simplex(&mut rng, 3);
        let sd: Vec<ImageGrid> = (0..3).map(|_| field(&mut rng, 0.0, scale)).collect();
        let rho = update_rho(&y, &x, &m, &h).unwrap();
        let ups = update_upsilon(&mu_z, &x, &sd[0], &h).unwrap();
        let (omega, pi) = update_omega_pi(&mu_z, &sd, &h).unwrap();
        let all = [vec![rho, ups], omega].concat();
        for f in &all {
            prop_assert!(f.data().iter().all(|v| v.is_finite() && *v > 0.0));
        }
        prop_assert!(pi.c.iter().chain(&pi.alpha).chain(&pi.beta).all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn class_permutation_permutes_omega_and_pi(seed in 0u64..100_000, k in 2usize..5, shift in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = HyperParams::default();
        let mu_z = simplex(&mut rng, k);
        let sd: Vec<ImageGrid> = (0..k).map(|_| field(&mut rng, 0.01, 1.0)).collect();
        let c: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..3.0)).collect();
        let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
        let pz: Vec<ImageGrid> = perm.iter().map(|&i| mu_z[i].clone()).collect();
        let ps: Vec<ImageGrid> = perm.iter().map(|&i| sd[i].clone()).collect();
        let pc: Vec<f64> = perm.iter().map(|&i| c[i]).collect();

        let w = update_omega(&mu_z, &sd, &c, &h).unwrap();
        let pw = update_omega(&pz, &ps, &pc, &h).unwrap();
        let p = update_pi(&w, &mu_z, &sd, &h).unwrap();
        let pp = update_pi(&pw, &pz, &ps, &h).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&pw[j], &w[i]);
            prop_assert_eq!(pp.beta[j], p.beta[i]);
            prop_assert_eq!(pp.c[j], p.c[i]);
        }
        let u = update_upsilon(&mu_z, &sd[0], &sd[1], &h).unwrap();
        let pu = update_upsilon(&pz, &sd[0], &sd[1], &h).unwrap();
        for (a, b) in u.data().iter().zip(pu.data()) {
            prop_assert!(((a - b) / a).abs() < 1e-12);
        }
    }
}
