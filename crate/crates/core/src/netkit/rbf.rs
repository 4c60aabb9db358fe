use diffcore::{Gradients, Scalar, Tape, Tensor, Var};

use super::kmeans::{kmeans, sq_dist};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Radial-basis precision network:
/// `sigma(z) = (sum_k w_k exp(-gamma_k |z - c_k|^2) + zeta)^(-1/2)`.
///
/// Centers and bandwidths come from k-means and stay fixed; only the
/// softplus-parameterized weights train.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfNet {
    centers: Tensor,
    gamma: Tensor,
    /// `[K, M]` per channel, `[K, 1]` when shared across channels.
    raw_weights: Tensor,
    zeta: f64,
    output_dim: usize,
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl RbfNet {
    pub fn new(centers: Tensor, gamma: Tensor, raw_weights: Tensor, zeta: f64, output_dim: usize) -> Result<Self> {
        let k = centers.rows();
        if centers.shape().len() != 2 || k == 0 {
            return Err(Error::Contract(format!("rbf centers must be [K, d], got {:?}", centers.shape())));
        }
        if gamma.shape() != [k] || gamma.data().iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::Contract("rbf bandwidths must be K positive values".into()));
        }
        let w_cols = raw_weights.cols();
        if raw_weights.shape().len() != 2 || raw_weights.rows() != k || (w_cols != output_dim && w_cols != 1) {
            return Err(Error::Contract(format!(
                "rbf weights {:?} do not fit K={k}, M={output_dim}",
                raw_weights.shape()
            )));
        }
        if !(zeta > 0.0 && zeta.is_finite()) {
            return Err(Error::Contract(format!("rbf floor must be positive, got {zeta}")));
        }
        Ok(RbfNet {
            centers,
            gamma,
            raw_weights,
            zeta,
            output_dim,
        })
    }

    /// Centers at k-means of `points`, `gamma_k = 1 / (2 * mean squared
    /// member distance)`, weights set so that `sum_k w_k` equals
    /// `1 / init_sigma^2`.
    pub fn fit(
        points: &Tensor,
        k: usize,
        output_dim: usize,
        zeta: f64,
        shared: bool,
        init_sigma: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let km = kmeans(points, k, 100, rng)?;
        let gamma = bandwidths(points, &km.centers, &km.assignments);
        let w0 = inverse_softplus((1.0 / (init_sigma * init_sigma) - zeta).max(1e-6));
        let cols = if shared { 1 } else { output_dim };
        RbfNet::new(
            km.centers,
            Tensor::vector(gamma),
            Tensor::full(&[k, cols], w0),
            zeta,
            output_dim,
        )
    }

    pub fn latent_dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn num_centers(&self) -> usize {
        self.centers.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn shared(&self) -> bool {
        self.raw_weights.cols() == 1 && self.output_dim != 1
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    /// Nonnegative weights `softplus(raw)`, `[K, M]` or `[K, 1]`.
    pub fn weights(&self) -> Tensor {
        self.raw_weights.map(|r| r.softplus())
    }

    /// Kernel activations `exp(-gamma_k |z - c_k|^2)`.
    pub fn activations(&self, z: &[f64]) -> Vec<f64> {
        (0..self.num_centers())
            .map(|k| (-self.gamma.data()[k] * sq_dist(z, self.centers.row(k))).exp())
            .collect()
    }

    fn check_latent(&self, len: usize) -> Result<()> {
        if len != self.latent_dim() {
            return Err(diffcore::DiffError::Dimension {
                op: "rbf_sigma",
                lhs: vec![len],
                rhs: self.centers.shape().to_vec(),
            }
            .into());
        }
        Ok(())
    }

    pub fn sigma<S: Scalar>(&self, z: &[S]) -> Result<Vec<S>> {
        self.check_latent(z.len())?;
        let w = self.weights();
        let cols = w.cols();
        let mut beta = vec![S::constant(self.zeta); self.output_dim];
        for k in 0..self.num_centers() {
            let c = self.centers.row(k);
            let mut d2 = S::zero();
            for (zi, &ci) in z.iter().zip(c) {
                d2 = d2 + (*zi - S::constant(ci)).square();
            }
            let act = d2.scale(-self.gamma.data()[k]).exp();
            for (m, b) in beta.iter_mut().enumerate() {
                let wk = w.data()[k * cols + if cols == 1 { 0 } else { m }];
                *b = *b + act.scale(wk);
            }
        }
        Ok(beta.into_iter().map(|b| S::constant(1.0) / b.sqrt()).collect())
    }

    pub fn sigma_batch(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).sigma(tape.constant(z.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(format!("{prefix}.weight"), &self.raw_weights)]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![(format!("{prefix}.weight"), &mut self.raw_weights)]
    }

    /// Everything a checkpoint needs, trainable or not.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.centers"), &self.centers),
            (format!("{prefix}.gamma"), &self.gamma),
            (format!("{prefix}.weight"), &self.raw_weights),
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundRbf<'t> {
        let k = self.num_centers();
        let d = self.latent_dim();
        let raw = if trainable {
            tape.leaf(self.raw_weights.clone())
        } else {
            tape.constant(self.raw_weights.clone())
        };
        let c_sq: Vec<f64> = (0..k).map(|i| self.centers.row(i).iter().map(|x| x * x).sum()).collect();
        BoundRbf {
            raw,
            centers_t: tape.constant(self.centers.transpose().expect("centers are 2-d")),
            c_sq: tape.constant(Tensor::vector(c_sq)),
            neg_gamma: tape.constant(self.gamma.map(|g| -g)),
            ones_dk: tape.constant(Tensor::full(&[d, k], 1.0)),
            widen: (self.raw_weights.cols() == 1 && self.output_dim > 1)
                .then(|| tape.constant(Tensor::full(&[1, self.output_dim], 1.0))),
            zeta: self.zeta,
        }
    }
}

fn bandwidths(points: &Tensor, centers: &Tensor, assign: &[usize]) -> Vec<f64> {
    let k = centers.rows();
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        sum[a] += sq_dist(points.row(i), centers.row(a));
        count[a] += 1;
    }
    let msd: Vec<Option<f64>> = (0..k)
        .map(|c| (count[c] > 0 && sum[c] > 0.0).then(|| sum[c] / count[c] as f64))
        .collect();
    let known: Vec<f64> = msd.iter().flatten().copied().collect();
    let fallback = if known.is_empty() {
        1.0
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };
    msd.into_iter().map(|m| 1.0 / (2.0 * m.unwrap_or(fallback))).collect()
}

pub struct BoundRbf<'t> {
    raw: Var<'t>,
    centers_t: Var<'t>,
    c_sq: Var<'t>,
    neg_gamma: Var<'t>,
    ones_dk: Var<'t>,
    widen: Option<Var<'t>>,
    zeta: f64,
}

impl<'t> BoundRbf<'t> {
    fn weights(&self) -> Result<Var<'t>> {
        let w = self.raw.softplus();
        Ok(match self.widen {
            Some(ones) => w.matmul(ones)?,
            None => w,
        })
    }

    /// `[B, K]` kernel activations.
    fn activations(&self, z: Var<'t>) -> Result<Var<'t>> {
        let zz = z.square().matmul(self.ones_dk)?;
        let cross = z.matmul(self.centers_t)?.scale(2.0);
        let d2 = zz.sub(cross)?.add(self.c_sq)?;
        Ok(d2.mul(self.neg_gamma)?.exp())
    }

    pub fn sigma(&self, z: Var<'t>) -> Result<Var<'t>> {
        let beta = self.activations(z)?.matmul(self.weights()?)?.add_scalar(self.zeta);
        Ok(beta.ln().scale(-0.5).exp())
    }

    /// `sigma(z)` plus `J_sigma(z) t` for each tangent.
    pub fn sigma_tangents(&self, z: Var<'t>, tangents: &[Var<'t>]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let act = self.activations(z)?;
        let w = self.weights()?;
        let sigma = act.matmul(w)?.add_scalar(self.zeta).ln().scale(-0.5).exp();
        let half_cube = sigma.square().mul(sigma)?.scale(-0.5);
        let mut out = Vec::with_capacity(tangents.len());
        for &t in tangents {
            let dd2 = z.mul(t)?.matmul(self.ones_dk)?.sub(t.matmul(self.centers_t)?)?.scale(2.0);
            let dact = act.mul(dd2.mul(self.neg_gamma)?)?;
            out.push(dact.matmul(w)?.mul(half_cube)?);
        }
        Ok((sigma, out))
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        vec![grads.wrt(self.raw)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, stream, Stream};

    fn net(k: usize, d: usize, m: usize, seed: u64) -> RbfNet {
        let mut rng = stream(seed, Stream::Init, 0);
        RbfNet::new(
            Tensor::new(vec![k, d], normals(&mut rng, k * d)).unwrap(),
            Tensor::vector((0..k).map(|i| 0.5 + i as f64 * 0.3).collect()),
            Tensor::new(vec![k, m], normals(&mut rng, k * m)).unwrap(),
            1e-3,
            m,
        )
        .unwrap()
    }

    #[test]
    fn kernel_is_one_at_its_center() {
        let w = inverse_softplus(1.0);
        let rbf = RbfNet::new(
            Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap(),
            Tensor::vector(vec![1.0]),
            Tensor::new(vec![1, 1], vec![w]).unwrap(),
            1e-6,
            1,
        )
        .unwrap();
        let s = rbf.sigma(&[0.5, -0.5]).unwrap()[0];
        assert!((s - (1.0f64 + 1e-6).powf(-0.5)).abs() < 1e-12);
        let far = rbf.sigma(&[1e4, 1e4]).unwrap()[0];
        assert!((far - 1e3).abs() < 1e-9);
    }

    #[test]
    fn direct_sum_oracle() {
        let rbf = net(3, 2, 4, 11);
        let z = [0.2, -0.3];
        let w = rbf.weights();
        let s = rbf.sigma(&z).unwrap();
        for m in 0..4 {
            let mut beta = rbf.zeta();
            for k in 0..3 {
                let c = rbf.centers().row(k);
                let d2 = (z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2);
                beta += w.get(k, m) * (-rbf.gamma().data()[k] * d2).exp();
            }
            assert!((s[m] - 1.0 / beta.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_sigma_and_tangents_match_scalar_path() {
        let rbf = net(5, 3, 4, 12);
        let z = [0.1, 0.7, -0.2];
        let jac = diffcore::jacobian(
            |v| rbf.sigma(v).map_err(|e| diffcore::DiffError::Contract(e.to_string())),
            &z,
        )
        .unwrap();
        let tape = Tape::new();
        let bound = rbf.bind(&tape, false);
        let zv = tape.constant(Tensor::new(vec![1, 3], z.to_vec()).unwrap());
        let basis: Vec<_> = (0..3)
            .map(|j| {
                let mut e = vec![0.0; 3];
                e[j] = 1.0;
                tape.constant(Tensor::new(vec![1, 3], e).unwrap())
            })
            .collect();
        let (s, ts) = bound.sigma_tangents(zv, &basis).unwrap();
        let direct = rbf.sigma(&z).unwrap();
        for m in 0..4 {
            assert!((s.value().data()[m] - direct[m]).abs() < 1e-12);
            for (j, t) in ts.iter().enumerate() {
                assert!((t.value().data()[m] - jac.get(m, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shared_weights_broadcast_over_channels() {
        let mut rng = stream(2, Stream::Init, 0);
        let pts = Tensor::new(vec![40, 2], normals(&mut rng, 80)).unwrap();
        let rbf = RbfNet::fit(&pts, 4, 3, 1e-2, true, 1.0, &mut rng).unwrap();
        assert!(rbf.shared());
        let s = rbf.sigma(&[0.0, 0.0]).unwrap();
        assert_eq!(s[0], s[1]);
        let batch = rbf.sigma_batch(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert!((batch.data()[2] - s[2]).abs() < 1e-12);
    }
}
