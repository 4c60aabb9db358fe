//! WGAN-GP critic and its loss pair.

use diffcore::{Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::netkit::{Activation, Adam, BoundMlp, Mlp};
use crate::rng::{stream, Rng, Stream};

pub const DEFAULT_LAMBDA_GP: f64 = 10.0;

/// Added under the square root of the gradient norm so a flat critic has a
/// finite derivative. Small enough that `GP = 1` holds to ~1e-12.
const NORM_EPS: f64 = 1e-24;

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub body: Mlp,
    pub lambda_gp: f64,
}

impl Critic {
    pub fn new(input_dim: usize, hidden: usize, lambda_gp: f64, rng: &mut Rng) -> Result<Self> {
        let body = Mlp::new(&[input_dim, hidden, hidden, 1], Activation::Tanh, Activation::Linear, rng)?;
        Critic::from_body(body, lambda_gp)
    }

    pub fn from_body(body: Mlp, lambda_gp: f64) -> Result<Self> {
        if body.output_dim() != 1 {
            return Err(Error::Contract(format!("critic must output a scalar, got width {}", body.output_dim())));
        }
        if !(lambda_gp >= 0.0 && lambda_gp.is_finite()) {
            return Err(Error::Config(format!("lambda_gp must be finite and >= 0, got {lambda_gp}")));
        }
        Ok(Critic { body, lambda_gp })
    }

    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.body.forward(x)?.into_data())
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.body.params("critic")
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.body.params_mut("critic")
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundCritic<'t> {
        BoundCritic {
            body: self.body.bind(tape, trainable),
            lambda_gp: self.lambda_gp,
        }
    }

    /// One optimizer step on the critic loss. Returns the loss before the step.
    pub fn step(&mut self, adam: &mut Adam, real: &Tensor, fake: &Tensor, rng: &mut Rng) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.bind(&tape, true);
        let u = mix_weights(real.rows(), rng);
        let loss = bound.loss_d(tape.constant(real.clone()), tape.constant(fake.clone()), &u)?;
        let value = finite(loss.item(), "critic loss")?;
        let grads = tape.backward(loss)?;
        let g = bound.body.gradients(&grads);
        adam.step(self.params_mut(), &g)?;
        Ok(value)
    }
}

pub struct BoundCritic<'t> {
    body: BoundMlp<'t>,
    lambda_gp: f64,
}

impl<'t> BoundCritic<'t> {
    /// Scores `[B]`.
    pub fn score(&self, x: Var<'t>) -> Result<Var<'t>> {
        let b = x.shape()[0];
        Ok(self.body.forward(x)?.reshape(&[b])?)
    }

    /// `mean((|grad D(x~)| - 1)^2)` with `x~ = u x_real + (1 - u) x_fake`.
    pub fn gradient_penalty(&self, real: Var<'t>, fake: Var<'t>, u: &[f64]) -> Result<Var<'t>> {
        let (rs, fs) = (real.shape(), fake.shape());
        if rs != fs || rs.len() != 2 || rs[0] != u.len() {
            return Err(diffcore::DiffError::Dimension {
                op: "gradient_penalty",
                lhs: rs,
                rhs: fs,
            }
            .into());
        }
        let tape = real.tape();
        let (b, m) = (rs[0], rs[1]);
        let ones = tape.constant(Tensor::full(&[1, m], 1.0));
        let uw = tape.constant(Tensor::new(vec![b, 1], u.to_vec())?).matmul(ones)?;
        let mixed = fake.add(real.sub(fake)?.mul(uw)?)?;
        let grad = self.body.input_gradient(mixed)?;
        let norm = grad.square().sum_last().add_scalar(NORM_EPS).sqrt();
        Ok(norm.add_scalar(-1.0).square().mean())
    }

    /// `E[D(fake)] - E[D(real)] + lambda_gp * GP`
    pub fn loss_d(&self, real: Var<'t>, fake: Var<'t>, u: &[f64]) -> Result<Var<'t>> {
        let w = self.score(fake)?.mean().sub(self.score(real)?.mean())?;
        let gp = self.gradient_penalty(real, fake, u)?;
        Ok(w.add(gp.scale(self.lambda_gp))?)
    }

    /// `-E[D(fake)]`
    pub fn loss_g(&self, fake: Var<'t>) -> Result<Var<'t>> {
        Ok(self.score(fake)?.mean().neg())
    }
}

/// Interpolation weights `u ~ U[0, 1)`, one per pair.
pub fn mix_weights(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training(format!("non-finite {what}: {v}")))
    }
}

pub fn gradient_penalty(critic: &Critic, real: &Tensor, fake: &Tensor, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let bound = critic.bind(&tape, false);
    let u = mix_weights(real.rows(), &mut stream(seed, Stream::Bilevel, u64::MAX));
    Ok(bound
        .gradient_penalty(tape.constant(real.clone()), tape.constant(fake.clone()), &u)?
        .item())
}

pub fn loss_d(critic: &Critic, real: &Tensor, fake: &Tensor, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let bound = critic.bind(&tape, false);
    let u = mix_weights(real.rows(), &mut stream(seed, Stream::Bilevel, u64::MAX));
    let v = bound.loss_d(tape.constant(real.clone()), tape.constant(fake.clone()), &u)?;
    finite(v.item(), "critic loss")
}

pub fn loss_g(critic: &Critic, fake: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let v = critic.bind(&tape, false).loss_g(tape.constant(fake.clone()))?;
    finite(v.item(), "generator loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netkit::Dense;
    use crate::rng::normals;

    fn linear(w: Vec<f64>, b: f64) -> Critic {
        let m = w.len();
        let body = Mlp::from_layers(vec![Dense {
            weight: Tensor::new(vec![m, 1], w).unwrap(),
            bias: Tensor::vector(vec![b]),
            activation: Activation::Linear,
        }])
        .unwrap();
        Critic::from_body(body, DEFAULT_LAMBDA_GP).unwrap()
    }

    fn batch(seed: u64, b: usize, m: usize) -> Tensor {
        let mut rng = stream(seed, Stream::Init, 0);
        Tensor::new(vec![b, m], normals(&mut rng, b * m)).unwrap()
    }

    #[test]
    fn constant_critic() {
        let c = linear(vec![0.0; 3], 0.7);
        let (r, f) = (batch(1, 4, 3), batch(2, 4, 3));
        assert!((gradient_penalty(&c, &r, &f, 0).unwrap() - 1.0).abs() < 1e-9);
        assert!((loss_d(&c, &r, &f, 0).unwrap() - 10.0).abs() < 1e-9);
        assert!((loss_g(&c, &f).unwrap() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn linear_critic_penalties() {
        let (r, f) = (batch(1, 5, 2), batch(2, 5, 2));
        assert!(gradient_penalty(&linear(vec![0.6, 0.8], 0.0), &r, &f, 3).unwrap() < 1e-9);
        let gp = gradient_penalty(&linear(vec![1.8, 2.4], 0.0), &r, &f, 3).unwrap();
        assert!((gp - 4.0).abs() < 1e-9);
    }

    #[test]
    fn loss_d_matches_loop_oracle() {
        let mut rng = stream(5, Stream::Init, 1);
        let c = Critic::new(3, 4, DEFAULT_LAMBDA_GP, &mut rng).unwrap();
        let (r, f) = (batch(3, 6, 3), batch(4, 6, 3));
        let u = mix_weights(6, &mut stream(9, Stream::Bilevel, u64::MAX));
        let mut wdist = 0.0;
        let mut gp = 0.0;
        for i in 0..6 {
            wdist += (c.body.eval(f.row(i)).unwrap()[0] - c.body.eval(r.row(i)).unwrap()[0]) / 6.0;
            let x: Vec<f64> = (0..3).map(|j| u[i] * r.row(i)[j] + (1.0 - u[i]) * f.row(i)[j]).collect();
            // forward-mode gradient, independent of the taped analytic backward
            let jac = diffcore::jacobian(|v| c.body.eval(v).map_err(crate::geometry::to_diff), &x).unwrap();
            let n2: f64 = jac.data().iter().map(|g| g * g).sum();
            gp += (n2.sqrt() - 1.0).powi(2) / 6.0;
        }
        let want = wdist + 10.0 * gp;
        let got = loss_d(&c, &r, &f, 9).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn generator_loss_is_negative_mean() {
        let c = linear(vec![1.0], 0.0);
        let f = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!((loss_g(&c, &f).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn critic_step_is_finite_and_moves_weights() {
        let mut rng = stream(6, Stream::Init, 0);
        let mut c = Critic::new(4, 8, DEFAULT_LAMBDA_GP, &mut rng).unwrap();
        let before = c.clone();
        let mut adam = Adam::new(1e-3);
        c.step(&mut adam, &batch(1, 8, 4), &batch(2, 8, 4), &mut rng).unwrap();
        assert_ne!(c, before);
    }
}
