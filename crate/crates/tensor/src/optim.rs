use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers of Adam, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn for_params(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(TensorError::Usage(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(TensorError::Usage(format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(cfg.lr / c1);
        let root_c2 = T::from_f64_lossy(c2.sqrt());
        let eps = T::from_f64_lossy(cfg.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            if p.dims() != g.dims() {
                return Err(TensorError::shape(
                    "adam",
                    format!("param {:?} vs grad {:?}", p.dims(), g.dims()),
                ));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                // lr * m_hat / (sqrt(v_hat) + eps)
                *pv = *pv - step_size * *mv / ((*vv).sqrt() / root_c2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![0.5, -1.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::for_params(&p);
        let g = vec![Tensor::zeros(&[2])];
        for _ in 0..5 {
            st.update(&AdamConfig::default(), &mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let mut st = AdamState::for_params(&p);
        let g = vec![Tensor::new(vec![2], vec![3.0, -0.2]).unwrap()];
        let mut last = p[0].clone();
        for _ in 0..200 {
            st.update(&cfg, &mut p, &g).unwrap();
            let step: Vec<f64> = p[0].data().iter().zip(last.data()).map(|(a, b)| a - b).collect();
            assert!((step[0] + 0.01).abs() < 1e-6);
            assert!((step[1] - 0.01).abs() < 1e-6);
            last = p[0].clone();
        }
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![Tensor::scalar(1.0f64)];
        let mut st = AdamState::for_params(&p);
        let mut f = 1.0;
        for _ in 0..10 {
            let w = p[0].item();
            st.update(&cfg, &mut p, &[Tensor::scalar(2.0 * w)]).unwrap();
            let next = p[0].item() * p[0].item();
            assert!(next < f, "f went from {f} to {next}");
            f = next;
        }
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        let mut st = AdamState::for_params(&p);
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(st.update(&cfg, &mut p, &[Tensor::scalar(1.0)]).is_err());
    }
}
