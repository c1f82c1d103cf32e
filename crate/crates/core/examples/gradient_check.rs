//! Finite-difference checks of the variational loss terms and of a small
//! convolution/softmax graph, in double and single precision.

use bayeseg::oracle::{loss_term_gradcheck, random_state};
use bayeseg_tensor::{check_grad, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TERMS: [&str; 7] = [
    "L_y",
    "L_mu_z",
    "L_sigma_z",
    "L_mu_x",
    "L_sigma_x",
    "L_mu_m",
    "L_sigma_m",
];

fn main() -> bayeseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (y, state, xs, ms) = random_state(&mut rng, 3, 5, 4);
    for (i, name) in TERMS.iter().enumerate() {
        let r = loss_term_gradcheck(&y, &state, &xs, &ms, i)?;
        println!(
            "{name:<10} f64 {:.2e}  f32 {:.2e}  pass={}",
            r.rel_err_f64,
            r.rel_err_f32,
            r.passes(1e-6, 1e-3)
        );
    }

    let x = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
    let k = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
    let r = check_grad!(vec![x, k], |g, v| {
        let h = g.conv2d(v[0], v[1], 1, Padding::Replicate(1))?;
        let p = g.channel_softmax(h)?;
        let l = g.log(p)?;
        Ok(g.mean(l))
    })
    .map_err(bayeseg::Error::from)?;
    println!("conv+softmax f64 {:.2e}  f32 {:.2e}", r.rel_err_f64, r.rel_err_f32);
    Ok(())
}
