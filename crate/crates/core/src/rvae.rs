//! Riemannian VAE: encoder, mean decoder, RBF variance decoder, prior mean,
//! the two stage losses and the Brownian-motion KL.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use diffcore::{Gradients, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geodesics, pullback_metric, Decoder, GeodesicOptions};
use crate::netkit::{Activation, Adam, BoundMlp, BoundRbf, Mlp, RbfNet};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mu,
    Sigma,
}

/// How `l(a, b)` inside the KL is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// `l^2 ~ (a - b)^T G(midpoint) (a - b)`
    Linearized,
    /// Length of an optimized spline geodesic, path held fixed.
    Geodesic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RvaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub centers: usize,
    /// Precision floor of the RBF network.
    pub zeta: f64,
    /// One RBF weight per center shared by all output channels.
    pub shared_rbf_weights: bool,
    pub beta: f64,
    /// Stage that trains the encoder's posterior-scale head.
    pub scale_head_stage: Stage,
    pub distance: Distance,
    pub logdet_floor: f64,
    pub init_posterior_scale: f64,
}

impl Default for RvaeConfig {
    fn default() -> Self {
        RvaeConfig {
            latent_dim: 2,
            hidden: 64,
            centers: 64,
            zeta: 1e-2,
            shared_rbf_weights: false,
            beta: 1.0,
            scale_head_stage: Stage::Sigma,
            distance: Distance::Linearized,
            logdet_floor: 1e-12,
            init_posterior_scale: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    EncoderTrunk,
    EncoderMean,
    EncoderScale,
    DecoderMu,
    DecoderSigma,
    Prior,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::EncoderTrunk,
        Group::EncoderMean,
        Group::EncoderScale,
        Group::DecoderMu,
        Group::DecoderSigma,
        Group::Prior,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::EncoderTrunk => "encoder.trunk",
            Group::EncoderMean => "encoder.mean",
            Group::EncoderScale => "encoder.scale",
            Group::DecoderMu => "decoder.mu",
            Group::DecoderSigma => "decoder.sigma",
            Group::Prior => "prior.mean",
        }
    }
}

/// Parameter groups trained by a stage loss.
pub fn stage_groups(stage: Stage, scale_head: Stage) -> Vec<Group> {
    let mut g = match stage {
        Stage::Mu => vec![Group::EncoderTrunk, Group::EncoderMean, Group::DecoderMu],
        Stage::Sigma => vec![Group::DecoderSigma, Group::Prior],
    };
    if stage == scale_head {
        g.push(Group::EncoderScale);
    }
    g.sort();
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvaeModel {
    pub encoder_trunk: Mlp,
    pub encoder_mean: Mlp,
    /// Outputs `log sigma_z`.
    pub encoder_scale: Mlp,
    pub decoder_mu: Mlp,
    pub decoder_sigma: RbfNet,
    pub prior_mean: Tensor,
    pub config: RvaeConfig,
}

impl RvaeModel {
    /// Fresh model. The variance network starts with negligible weights, so
    /// `sigma(z)` is the constant `zeta^(-1/2)` until [`RvaeModel::fit_variance`]
    /// places its centers.
    pub fn new(cfg: &RvaeConfig, data_dim: usize, rng: &mut Rng) -> Result<Self> {
        let (d, h) = (cfg.latent_dim, cfg.hidden);
        if d == 0 || h == 0 || data_dim == 0 || cfg.centers == 0 {
            return Err(Error::Config("latent_dim, hidden, centers and data width must be positive".into()));
        }
        let encoder_trunk = Mlp::new(&[data_dim, h, h], Activation::Tanh, Activation::Tanh, rng)?;
        let encoder_mean = Mlp::new(&[h, d], Activation::Linear, Activation::Linear, rng)?;
        let mut encoder_scale = Mlp::new(&[h, 1], Activation::Linear, Activation::Linear, rng)?;
        for (name, t) in encoder_scale.params_mut("s") {
            if name.ends_with("weight") {
                t.data_mut().fill(0.0);
            } else {
                t.data_mut().fill(cfg.init_posterior_scale.ln());
            }
        }
        let decoder_mu = Mlp::new(&[d, h, h, data_dim], Activation::Tanh, Activation::Linear, rng)?;
        let cols = if cfg.shared_rbf_weights { 1 } else { data_dim };
        let decoder_sigma = RbfNet::new(
            Tensor::zeros(&[cfg.centers, d]),
            Tensor::full(&[cfg.centers], 1.0),
            Tensor::full(&[cfg.centers, cols], -40.0),
            cfg.zeta,
            data_dim,
        )?;
        Ok(RvaeModel {
            encoder_trunk,
            encoder_mean,
            encoder_scale,
            decoder_mu,
            decoder_sigma,
            prior_mean: Tensor::zeros(&[d]),
            config: cfg.clone(),
        })
    }

    pub fn data_dim(&self) -> usize {
        self.decoder_mu.output_dim()
    }

    pub fn encode(&self, x: &[f64]) -> Result<PosteriorParams> {
        let h = self.encoder_trunk.eval(x)?;
        let mu = self.encoder_mean.eval(&h)?;
        let log_s = self.encoder_scale.eval(&h)?[0];
        let sigma = log_s.exp();
        if !(mu.iter().all(|v| v.is_finite()) && sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Training(format!("encoder produced non-finite posterior {mu:?}, {sigma}")));
        }
        Ok(PosteriorParams { mu, sigma })
    }

    /// Posterior means `[N, d]` and scales for a batch.
    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let h = self.encoder_trunk.forward(x)?;
        let mu = self.encoder_mean.forward(&h)?;
        let sigma: Vec<f64> = self.encoder_scale.forward(&h)?.data().iter().map(|v| v.exp()).collect();
        if !mu.is_finite() || sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::Training("encoder produced non-finite activations".into()));
        }
        Ok((mu, sigma))
    }

    pub fn decode_mean(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder_mu.forward(z)
    }

    /// `mu(z) + sigma(z) * eps`
    pub fn decode_sample(&self, z: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        let (mu, sigma) = self.eval(z)?;
        if eps.len() != mu.len() {
            return Err(diffcore::DiffError::Dimension {
                op: "decode_sample",
                lhs: vec![eps.len()],
                rhs: vec![mu.len()],
            }
            .into());
        }
        Ok(mu.iter().zip(&sigma).zip(eps).map(|((m, s), e)| m + s * e).collect())
    }

    /// Place RBF centers at k-means of the posterior means of `data` and set
    /// the weights so that sigma near the data matches the current
    /// reconstruction error.
    pub fn fit_variance(&mut self, data: &Tensor, rng: &mut Rng) -> Result<()> {
        let (mu_z, _) = self.encode_batch(data)?;
        let recon = self.decode_mean(&mu_z)?;
        let resid = recon.sub(data)?;
        let rms = (resid.data().iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        let k = self.config.centers.min(mu_z.rows());
        self.decoder_sigma = RbfNet::fit(
            &mu_z,
            k,
            self.data_dim(),
            self.config.zeta,
            self.config.shared_rbf_weights,
            rms.max(0.05),
            rng,
        )?;
        Ok(())
    }

    fn group_params(&self, g: Group) -> Vec<(String, &Tensor)> {
        let p = g.prefix();
        match g {
            Group::EncoderTrunk => self.encoder_trunk.params(p),
            Group::EncoderMean => self.encoder_mean.params(p),
            Group::EncoderScale => self.encoder_scale.params(p),
            Group::DecoderMu => self.decoder_mu.params(p),
            Group::DecoderSigma => self.decoder_sigma.params(p),
            Group::Prior => vec![(p.to_string(), &self.prior_mean)],
        }
    }

    /// Trainable parameters of `groups`, in [`Group::ALL`] order.
    pub fn params_mut(&mut self, groups: &[Group]) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let RvaeModel {
            encoder_trunk,
            encoder_mean,
            encoder_scale,
            decoder_mu,
            decoder_sigma,
            prior_mean,
            ..
        } = self;
        let on = |g: Group| groups.contains(&g);
        if on(Group::EncoderTrunk) {
            out.extend(encoder_trunk.params_mut(Group::EncoderTrunk.prefix()));
        }
        if on(Group::EncoderMean) {
            out.extend(encoder_mean.params_mut(Group::EncoderMean.prefix()));
        }
        if on(Group::EncoderScale) {
            out.extend(encoder_scale.params_mut(Group::EncoderScale.prefix()));
        }
        if on(Group::DecoderMu) {
            out.extend(decoder_mu.params_mut(Group::DecoderMu.prefix()));
        }
        if on(Group::DecoderSigma) {
            out.extend(decoder_sigma.params_mut(Group::DecoderSigma.prefix()));
        }
        if on(Group::Prior) {
            out.push((Group::Prior.prefix().to_string(), prior_mean));
        }
        out
    }

    /// Copies of the parameters of `groups`, for before/after comparisons.
    pub fn snapshot(&self, groups: &[Group]) -> Vec<Tensor> {
        Group::ALL
            .iter()
            .filter(|g| groups.contains(g))
            .flat_map(|&g| self.group_params(g).into_iter().map(|(_, t)| t.clone()))
            .collect()
    }

    /// Every tensor a checkpoint needs.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for g in Group::ALL {
            if g == Group::DecoderSigma {
                out.extend(self.decoder_sigma.tensors(g.prefix()));
            } else {
                out.extend(self.group_params(g));
            }
        }
        out
    }

    pub fn load_tensors(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let get = |name: &str| {
            map.get(name).cloned().ok_or_else(|| Error::Format {
                offset: 0,
                reason: format!("checkpoint is missing {name}"),
            })
        };
        let p = Group::DecoderSigma.prefix();
        self.decoder_sigma = RbfNet::new(
            get(&format!("{p}.centers"))?,
            get(&format!("{p}.gamma"))?,
            get(&format!("{p}.weight"))?,
            self.config.zeta,
            self.data_dim(),
        )?;
        for (name, t) in self.params_mut(&Group::ALL) {
            let src = get(&name)?;
            if src.shape() != t.shape() {
                return Err(Error::Format {
                    offset: 0,
                    reason: format!("{name} has shape {:?}, model expects {:?}", src.shape(), t.shape()),
                });
            }
            *t = src;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, groups: &[Group]) -> BoundRvae<'t> {
        let on = |g: Group| groups.contains(&g);
        BoundRvae {
            tape,
            trunk: self.encoder_trunk.bind(tape, on(Group::EncoderTrunk)),
            mean: self.encoder_mean.bind(tape, on(Group::EncoderMean)),
            scale: self.encoder_scale.bind(tape, on(Group::EncoderScale)),
            dec_mu: self.decoder_mu.bind(tape, on(Group::DecoderMu)),
            dec_sigma: self.decoder_sigma.bind(tape, on(Group::DecoderSigma)),
            prior: if on(Group::Prior) {
                tape.leaf(self.prior_mean.clone())
            } else {
                tape.constant(self.prior_mean.clone())
            },
            groups: Group::ALL.iter().copied().filter(|g| groups.contains(g)).collect(),
            latent_dim: self.config.latent_dim,
            floor: self.config.logdet_floor,
        }
    }

    /// Mean over the batch of the Gaussian negative log-likelihood, with
    /// `z = mu_z + sigma_z * eta`.
    pub fn loss_mu(&self, x: &Tensor, eta: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let b = self.bind(&tape, &[]);
        Ok(b.loss(x, eta, 0.0, None)?.total.item())
    }

    /// Reconstruction plus `beta` times the Brownian-motion KL.
    pub fn loss_sigma(&self, x: &Tensor, eta: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let b = self.bind(&tape, &[]);
        let paths = self.kl_paths(x, eta)?;
        Ok(b.loss(x, eta, self.config.beta, paths.as_ref())?.total.item())
    }

    /// Fixed geodesic segments for [`Distance::Geodesic`]: midpoints and
    /// deltas `[B * (n - 1), d]` for the `z -> mu_z` and `z -> prior` paths.
    fn kl_paths(&self, x: &Tensor, eta: &Tensor) -> Result<Option<[(Tensor, Tensor); 2]>> {
        if self.config.distance != Distance::Geodesic {
            return Ok(None);
        }
        let (mu_z, sigma) = self.encode_batch(x)?;
        let d = self.config.latent_dim;
        let mut to_mu = Vec::new();
        let mut to_prior = Vec::new();
        for i in 0..mu_z.rows() {
            let m = mu_z.row(i).to_vec();
            let z: Vec<f64> = m.iter().zip(eta.row(i)).map(|(a, e)| a + sigma[i] * e).collect();
            to_mu.push((z.clone(), m));
            to_prior.push((z, self.prior_mean.data().to_vec()));
        }
        let opts = GeodesicOptions::default();
        let mut out = Vec::with_capacity(2);
        for pairs in [to_mu, to_prior] {
            let paths = geodesics(self, &pairs, &opts)?;
            let mut mids = Vec::new();
            let mut deltas = Vec::new();
            for p in &paths {
                for s in 0..p.samples.rows() - 1 {
                    let (a, b) = (p.samples.row(s), p.samples.row(s + 1));
                    mids.extend(a.iter().zip(b).map(|(u, v)| 0.5 * (u + v)));
                    deltas.extend(a.iter().zip(b).map(|(u, v)| v - u));
                }
            }
            let rows = mids.len() / d;
            out.push((Tensor::new(vec![rows, d], mids)?, Tensor::new(vec![rows, d], deltas)?));
        }
        let [a, b]: [(Tensor, Tensor); 2] = out.try_into().expect("two path sets");
        Ok(Some([a, b]))
    }

    /// One optimizer step on `groups`. `beta = 0` gives the mean-stage loss.
    pub fn step(&mut self, adam: &mut Adam, groups: &[Group], x: &Tensor, eta: &Tensor, beta: f64) -> Result<f64> {
        let paths = if beta != 0.0 { self.kl_paths(x, eta)? } else { None };
        let tape = Tape::new();
        let bound = self.bind(&tape, groups);
        let loss = bound.loss(x, eta, beta, paths.as_ref())?;
        let value = loss.total.item();
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite RVAE loss {value}")));
        }
        let grads = tape.backward(loss.total)?;
        let g = bound.gradients(&grads);
        drop(bound);
        adam.step(self.params_mut(groups), &g)?;
        Ok(value)
    }
}

impl Decoder for RvaeModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn output_dim(&self) -> usize {
        self.data_dim()
    }

    fn eval<S: Scalar>(&self, z: &[S]) -> Result<(Vec<S>, Vec<S>)> {
        Ok((self.decoder_mu.eval(z)?, self.decoder_sigma.sigma(z)?))
    }

    fn eval_taped<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let mu = self.decoder_mu.bind(tape, false).forward(z)?;
        let sigma = self.decoder_sigma.bind(tape, false).sigma(z)?;
        Ok((mu, Some(sigma)))
    }
}

pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub recon: Var<'t>,
    pub kl: Option<Var<'t>>,
}

/// An [`RvaeModel`] on a tape; parameters outside the chosen groups are
/// constants.
pub struct BoundRvae<'t> {
    tape: &'t Tape,
    trunk: BoundMlp<'t>,
    mean: BoundMlp<'t>,
    scale: BoundMlp<'t>,
    dec_mu: BoundMlp<'t>,
    dec_sigma: BoundRbf<'t>,
    prior: Var<'t>,
    groups: Vec<Group>,
    latent_dim: usize,
    floor: f64,
}

impl<'t> BoundRvae<'t> {
    /// `(mu_z [B, d], log sigma_z [B, 1])`
    pub fn encode(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.trunk.forward(x)?;
        Ok((self.mean.forward(h)?, self.scale.forward(h)?))
    }

    pub fn decode(&self, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.dec_mu.forward(z)?, self.dec_sigma.sigma(z)?))
    }

    pub fn decode_mean(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.dec_mu.forward(z)
    }

    /// `z = mu_z + sigma_z * eta`
    pub fn sample_latent(&self, mu_z: Var<'t>, log_s: Var<'t>, eta: &Tensor) -> Result<Var<'t>> {
        let ones = self.tape.constant(Tensor::full(&[1, self.latent_dim], 1.0));
        let spread = log_s.exp().matmul(ones)?;
        Ok(mu_z.add(spread.mul(self.tape.constant(eta.clone()))?)?)
    }

    /// Per-sample Gaussian negative log-likelihood `[B]`.
    pub fn nll(&self, x: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
        let m = mu.shape()[1] as f64;
        let log_s = sigma.ln();
        let inv_var = log_s.scale(-2.0).exp();
        let quad = x.sub(mu)?.square().mul(inv_var)?.scale(0.5);
        Ok(quad.add(log_s)?.sum_last().add_scalar(0.5 * m * (2.0 * PI).ln()))
    }

    fn tangents(&self, z: Var<'t>, ts: &[Var<'t>]) -> Result<Vec<(Var<'t>, Var<'t>)>> {
        let (_, tm) = self.dec_mu.forward_tangents(z, ts)?;
        let (_, tsig) = self.dec_sigma.sigma_tangents(z, ts)?;
        Ok(tm.into_iter().zip(tsig).collect())
    }

    /// `log det G` at each row of `points`, eigenvalues clamped at the floor.
    pub fn logdet_metric(&self, points: Var<'t>) -> Result<Var<'t>> {
        let p = points.shape()[0];
        let d = self.latent_dim;
        let basis: Vec<Var<'t>> = (0..d)
            .map(|j| {
                let mut e = vec![0.0; p * d];
                for r in 0..p {
                    e[r * d + j] = 1.0;
                }
                self.tape.constant(Tensor::new(vec![p, d], e).expect("sized"))
            })
            .collect();
        let cols = self.tangents(points, &basis)?;
        let mut entries = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                let (mi, si) = cols[i];
                let (mj, sj) = cols[j];
                let g = mi.mul(mj)?.sum_last().add(si.mul(sj)?.sum_last())?;
                entries.push(g.reshape(&[p, 1])?);
            }
        }
        let g = self.tape.concat_last(&entries)?.reshape(&[p, d, d])?;
        let values = g.value();
        if !values.is_finite() {
            return Err(Error::Geometry {
                z: points.value().row(0).to_vec(),
                reason: "non-finite pullback metric".into(),
            });
        }
        for r in 0..p {
            let block = &values.data()[r * d * d..(r + 1) * d * d];
            if block.iter().all(|&v| v == 0.0) {
                return Err(Error::Geometry {
                    z: points.value().row(r).to_vec(),
                    reason: "pullback metric is singular".into(),
                });
            }
        }
        Ok(g.logdet_sym(self.floor)?)
    }

    /// `(a - b)^T G((a + b) / 2) (a - b)` per row.
    pub fn sq_len_linearized(&self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let mid = a.add(b)?.scale(0.5);
        let delta = a.sub(b)?;
        self.quad_along(mid, delta)
    }

    fn quad_along(&self, at: Var<'t>, delta: Var<'t>) -> Result<Var<'t>> {
        let (tm, ts) = self.tangents(at, &[delta])?[0];
        Ok(tm.square().sum_last().add(ts.square().sum_last())?)
    }

    /// Squared length of fixed polyline paths, `segments` per path.
    fn sq_len_path(&self, mids: &Tensor, deltas: &Tensor, paths: usize) -> Result<Var<'t>> {
        let q = self.quad_along(self.tape.constant(mids.clone()), self.tape.constant(deltas.clone()))?;
        let seg = mids.rows() / paths;
        let len = q.add_scalar(1e-18).sqrt().reshape(&[paths, seg])?.sum_last();
        Ok(len.square())
    }

    /// Per-sample Brownian-motion KL `[B]`.
    pub fn kl(
        &self,
        z: Var<'t>,
        mu_z: Var<'t>,
        log_s: Var<'t>,
        paths: Option<&[(Tensor, Tensor); 2]>,
    ) -> Result<Var<'t>> {
        let b = z.shape()[0];
        let d = self.latent_dim as f64;
        let log_s = log_s.reshape(&[b])?;
        let inv_var = log_s.scale(-2.0).exp();
        let prior_row = self.prior.reshape(&[1, self.latent_dim])?;
        let ld_q = self.logdet_metric(mu_z)?;
        let ld_p = self.logdet_metric(prior_row)?.reshape(&[])?;
        let (l2_q, l2_p) = match paths {
            None => {
                let ones = self.tape.constant(Tensor::full(&[b, 1], 1.0));
                (self.sq_len_linearized(z, mu_z)?, self.sq_len_linearized(z, ones.matmul(prior_row)?)?)
            }
            Some([q, p]) => (self.sq_len_path(&q.0, &q.1, b)?, self.sq_len_path(&p.0, &p.1, b)?),
        };
        let kl = log_s
            .scale(-d)
            .sub(ld_q.scale(0.5))?
            .add(ld_p.scale(0.5))?
            .sub(l2_q.mul(inv_var)?.scale(0.5))?
            .add(l2_p.scale(0.5))?;
        Ok(kl)
    }

    pub fn loss(
        &self,
        x: &Tensor,
        eta: &Tensor,
        beta: f64,
        paths: Option<&[(Tensor, Tensor); 2]>,
    ) -> Result<LossParts<'t>> {
        if x.rows() == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let xv = self.tape.constant(x.clone());
        let (mu_z, log_s) = self.encode(xv)?;
        let z = self.sample_latent(mu_z, log_s, eta)?;
        let (mu, sigma) = self.decode(z)?;
        if sigma.value().data().iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Training("decoder sigma underflowed".into()));
        }
        let recon = self.nll(xv, mu, sigma)?.mean();
        if beta == 0.0 {
            return Ok(LossParts {
                total: recon,
                recon,
                kl: None,
            });
        }
        let kl = self.kl(z, mu_z, log_s, paths)?.mean();
        Ok(LossParts {
            total: recon.add(kl.scale(beta))?,
            recon,
            kl: Some(kl),
        })
    }

    /// Gradients for the bound groups, matching [`RvaeModel::params_mut`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        for g in &self.groups {
            match g {
                Group::EncoderTrunk => out.extend(self.trunk.gradients(grads)),
                Group::EncoderMean => out.extend(self.mean.gradients(grads)),
                Group::EncoderScale => out.extend(self.scale.gradients(grads)),
                Group::DecoderMu => out.extend(self.dec_mu.gradients(grads)),
                Group::DecoderSigma => out.extend(self.dec_sigma.gradients(grads)),
                Group::Prior => out.push(grads.wrt(self.prior)),
            }
        }
        out
    }
}

/// Brownian-motion KL for one latent sample, evaluated term by term:
/// `-(d/2) ln s^2 - 1/2 ln|G(mu_z)| + 1/2 ln|G(mu_p)| - l^2(z, mu_z)/(2 s^2) + l^2(z, mu_p)/2`.
pub fn kl_bm<D, L>(dec: &D, z: &[f64], q: &PosteriorParams, prior_mean: &[f64], floor: f64, len: L) -> Result<f64>
where
    D: Decoder,
    L: Fn(&[f64], &[f64]) -> Result<f64>,
{
    let d = z.len() as f64;
    let s2 = q.sigma * q.sigma;
    let gq = pullback_metric(dec, &q.mu)?;
    let gp = pullback_metric(dec, prior_mean)?;
    for g in [&gq, &gp] {
        if g.eigenvalues.iter().all(|&l| l <= 0.0) {
            return Err(Error::geometry(&g.point, "pullback metric is singular"));
        }
    }
    let lq = len(z, &q.mu)?;
    let lp = len(z, prior_mean)?;
    Ok(-0.5 * d * s2.ln() - 0.5 * gq.log_det(floor) + 0.5 * gp.log_det(floor) - lq * lq / (2.0 * s2) + lp * lp / 2.0)
}

/// `sqrt((a - b)^T G(midpoint) (a - b))`
pub fn linearized_len<D: Decoder>(dec: &D, a: &[f64], b: &[f64]) -> Result<f64> {
    let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    let delta: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(pullback_metric(dec, &mid)?.quad(&delta).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, stream, Stream};

    fn small() -> RvaeModel {
        let cfg = RvaeConfig {
            hidden: 6,
            centers: 4,
            ..RvaeConfig::default()
        };
        let mut rng = stream(1, Stream::Init, 0);
        let mut m = RvaeModel::new(&cfg, 5, &mut rng).unwrap();
        let x = Tensor::new(vec![12, 5], normals(&mut rng, 60).iter().map(|v| 0.5 + 0.1 * v).collect()).unwrap();
        m.fit_variance(&x, &mut rng).unwrap();
        m
    }

    #[test]
    fn stage_groups_partition() {
        assert_eq!(
            stage_groups(Stage::Mu, Stage::Sigma),
            vec![Group::EncoderTrunk, Group::EncoderMean, Group::DecoderMu]
        );
        assert_eq!(
            stage_groups(Stage::Sigma, Stage::Sigma),
            vec![Group::EncoderScale, Group::DecoderSigma, Group::Prior]
        );
    }

    #[test]
    fn zero_encoder_gives_bias() {
        let mut m = small();
        for (name, t) in m.params_mut(&[Group::EncoderTrunk, Group::EncoderMean]) {
            if name.ends_with("weight") {
                t.data_mut().fill(0.0);
            } else if name.starts_with("encoder.mean") {
                t.data_mut().copy_from_slice(&[0.25, -0.5]);
            }
        }
        let q = m.encode(&[0.1, 0.9, 0.3, 0.3, 0.0]).unwrap();
        assert_eq!(q.mu, vec![0.25, -0.5]);
        assert!((q.sigma - 0.1).abs() < 1e-12);
    }

    #[test]
    fn taped_logdet_matches_pullback_metric() {
        let m = small();
        let pts = [[0.2, -0.1], [1.0, 0.5]];
        let tape = Tape::new();
        let b = m.bind(&tape, &[]);
        let pv = tape.constant(Tensor::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap());
        let ld = b.logdet_metric(pv).unwrap().value();
        for (i, p) in pts.iter().enumerate() {
            let want = pullback_metric(&m, p).unwrap().log_det(1e-12);
            assert!((ld.data()[i] - want).abs() < 1e-9, "{} vs {want}", ld.data()[i]);
        }
        let a = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap());
        let c = tape.constant(Tensor::new(vec![1, 2], vec![-0.2, 0.1]).unwrap());
        let l2 = b.sq_len_linearized(a, c).unwrap().item();
        let want = linearized_len(&m, &[0.3, 0.4], &[-0.2, 0.1]).unwrap();
        assert!((l2 - want * want).abs() < 1e-9);
    }

    #[test]
    fn kl_vanishes_when_posterior_is_prior() {
        let m = small();
        let q = PosteriorParams { mu: vec![0.0, 0.0], sigma: 1.0 };
        let kl = kl_bm(&m, &[0.0, 0.0], &q, &[0.0, 0.0], 1e-12, |a, b| linearized_len(&m, a, b)).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_on_a_flat_decoder_has_closed_form() {
        // identity-like decoder: G = I everywhere, so l is Euclidean
        let dec = crate::data::synth::AnalyticDecoder::Identity { dim: 2 };
        let q = PosteriorParams { mu: vec![1.0, 0.0], sigma: 0.5 };
        let z = [1.5, 0.0];
        let kl = kl_bm(&dec, &z, &q, &[0.0, 0.0], 1e-12, |a, b| linearized_len(&dec, a, b)).unwrap();
        let want = -(0.25f64).ln() - 0.25 / (2.0 * 0.25) + 2.25 / 2.0;
        assert!((kl - want).abs() < 1e-12, "{kl} vs {want}");
    }

    #[test]
    fn taped_kl_matches_scalar_oracle() {
        let m = small();
        let mut rng = stream(4, Stream::Init, 0);
        let x = Tensor::new(vec![3, 5], normals(&mut rng, 15).iter().map(|v| 0.5 + 0.2 * v).collect()).unwrap();
        let eta = Tensor::new(vec![3, 2], normals(&mut rng, 6)).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape, &[]);
        let (mu_z, log_s) = b.encode(tape.constant(x.clone())).unwrap();
        let z = b.sample_latent(mu_z, log_s, &eta).unwrap();
        let kl = b.kl(z, mu_z, log_s, None).unwrap().value();
        for i in 0..3 {
            let q = m.encode(x.row(i)).unwrap();
            let zi: Vec<f64> = q.mu.iter().zip(eta.row(i)).map(|(a, e)| a + q.sigma * e).collect();
            let want = kl_bm(&m, &zi, &q, m.prior_mean.data(), 1e-12, |a, c| linearized_len(&m, a, c)).unwrap();
            assert!((kl.data()[i] - want).abs() < 1e-8, "{} vs {want}", kl.data()[i]);
        }
    }

    #[test]
    fn mu_step_leaves_variance_untouched() {
        let mut m = small();
        let mut rng = stream(2, Stream::Init, 0);
        let x = Tensor::new(vec![4, 5], normals(&mut rng, 20).iter().map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0)).collect()).unwrap();
        let eta = Tensor::new(vec![4, 2], normals(&mut rng, 8)).unwrap();
        let frozen = [Group::EncoderScale, Group::DecoderSigma, Group::Prior];
        let before = m.snapshot(&frozen);
        let mut adam = Adam::new(1e-3);
        m.step(&mut adam, &stage_groups(Stage::Mu, Stage::Sigma), &x, &eta, 0.0).unwrap();
        assert_eq!(m.snapshot(&frozen), before);

        let frozen = [Group::EncoderTrunk, Group::EncoderMean, Group::DecoderMu];
        let before = m.snapshot(&frozen);
        let moved = m.snapshot(&[Group::DecoderSigma]);
        let mut adam = Adam::new(1e-3);
        m.step(&mut adam, &stage_groups(Stage::Sigma, Stage::Sigma), &x, &eta, 1.0).unwrap();
        assert_eq!(m.snapshot(&frozen), before);
        assert_ne!(m.snapshot(&[Group::DecoderSigma]), moved);
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        let m = small();
        let map: BTreeMap<String, Tensor> = m.tensors().into_iter().map(|(k, v)| (k, v.clone())).collect();
        let mut fresh = RvaeModel::new(&m.config, 5, &mut stream(9, Stream::Init, 0)).unwrap();
        fresh.load_tensors(&map).unwrap();
        assert_eq!(fresh, m);
    }
}
