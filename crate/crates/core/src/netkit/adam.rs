use std::collections::BTreeMap;

use diffcore::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments>) {
        self.step = step;
        self.moments = moments;
    }

    /// One bias-corrected update. All gradients are validated before any
    /// parameter is touched.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(diffcore::DiffError::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            if !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient for parameter {name}")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((name, p), g) in params.into_iter().zip(grads) {
            let n = g.len();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if mom.m.len() != n {
                return Err(Error::Contract(format!("moment buffer for {name} has the wrong size")));
            }
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * gi;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if !p.is_finite() {
                return Err(Error::Training(format!("parameter {name} became non-finite")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::vector(vec![1.5, -2.0]);
        let before = p.clone();
        for _ in 0..5 {
            adam.step(vec![("p".into(), &mut p)], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(0.01);
        let mut p = Tensor::vector(vec![1.0]);
        adam.step(vec![("p".into(), &mut p)], &[Tensor::vector(vec![4.0])]).unwrap();
        assert!((p.item() - 0.99).abs() < 1e-8);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut adam = Adam::new(0.1);
        let mut x = Tensor::vector(vec![0.0]);
        for _ in 0..100 {
            let g = Tensor::vector(vec![2.0 * (x.item() - 3.0)]);
            adam.step(vec![("x".into(), &mut x)], &[g]).unwrap();
        }
        // The same recurrence, written out.
        let (mut xo, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (xo - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            xo -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert_eq!(x.item(), xo);
        assert!((x.item() - 3.0).abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut adam = Adam::new(0.1);
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0]);
        let err = adam
            .step(
                vec![("enc.0.weight".into(), &mut a), ("dec.1.bias".into(), &mut b)],
                &[Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])],
            )
            .unwrap_err();
        assert!(err.to_string().contains("dec.1.bias"));
        assert_eq!(a.item(), 1.0);
        assert_eq!(adam.steps(), 0);
    }
}
