//! Three-phase training: RVAE pre-training with a critic, curvature
//! estimator pre-training, then the alternating four-step loop.
//!
//! Every epoch draws from its own RNG stream, so a run resumed from a
//! checkpoint sees exactly the numbers an uninterrupted run would.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use diffcore::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::adversary::{Critic, DEFAULT_LAMBDA_GP};
use crate::data::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::GeodesicOptions;
use crate::netkit::{Adam, Moments};
use crate::obfuscator::{
    curvature_targets, jittered, perturb_batch, train_estimator, CurvatureEstimator, EstimatorOptions,
};
use crate::rng::{normals, permutation, stream, Rng, Stream};
use crate::rvae::{stage_groups, Group, RvaeConfig, RvaeModel, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_mu: usize,
    pub epochs_sigma: usize,
    pub epochs_bilevel: usize,
    pub lr_rvae: f64,
    pub lr_critic: f64,
    pub lr_bilevel: f64,
    /// Critic and generator step every this many RVAE iterations.
    pub critic_every: u64,
    pub critic_hidden: usize,
    pub lambda_gp: f64,
    pub batch_size: usize,
    pub geodesic: GeodesicOptions,
    /// Optimizer iterations for the per-batch geodesics of the alternating
    /// loop; `None` uses `geodesic.max_iter`.
    pub bilevel_geodesic_iters: Option<usize>,
    pub estimator: EstimatorOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs_mu: 100,
            epochs_sigma: 100,
            epochs_bilevel: 5,
            lr_rvae: 1e-3,
            lr_critic: 1e-6,
            lr_bilevel: 1e-5,
            critic_every: 50,
            critic_hidden: 64,
            lambda_gp: DEFAULT_LAMBDA_GP,
            batch_size: 64,
            geodesic: GeodesicOptions::default(),
            bilevel_geodesic_iters: None,
            estimator: EstimatorOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_rvae", self.lr_rvae),
            ("lr_critic", self.lr_critic),
            ("lr_bilevel", self.lr_bilevel),
            ("estimator.lr", self.estimator.lr),
            ("geodesic.lr", self.geodesic.lr),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {r}")));
            }
        }
        let counts = [
            ("critic_every", self.critic_every as usize),
            ("critic_hidden", self.critic_hidden),
            ("batch_size", self.batch_size),
            ("geodesic.samples", self.geodesic.samples.saturating_sub(1)),
            ("estimator.hidden", self.estimator.hidden),
            ("estimator.batch_size", self.estimator.batch_size),
        ];
        for (name, c) in counts {
            if c == 0 {
                return Err(Error::Config(format!("{name} is too small")));
            }
        }
        if !(self.lambda_gp >= 0.0) || !(self.estimator.jitter >= 0.0) || !(self.estimator.fd_eps > 0.0) {
            return Err(Error::Config("lambda_gp and jitter must be >= 0, fd_eps > 0".into()));
        }
        Ok(())
    }

    fn phase3_geodesic(&self) -> GeodesicOptions {
        GeodesicOptions {
            max_iter: self.bilevel_geodesic_iters.unwrap_or(self.geodesic.max_iter),
            ..self.geodesic
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mu,
    Sigma,
    Estimator,
    Bilevel,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Mu => "mu",
            Phase::Sigma => "sigma",
            Phase::Estimator => "estimator",
            Phase::Bilevel => "bilevel",
            Phase::Done => "done",
        };
        f.write_str(s)
    }
}

/// Next unit of work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    pub epoch: usize,
    /// RVAE iterations so far in the current phase, for the critic cadence.
    pub iteration: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Option<Phase>,
    pub epoch: usize,
    pub loss_mu: Option<f64>,
    pub loss_sigma: Option<f64>,
    pub loss_d: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_curv: Option<f64>,
    /// Estimator MSE on the refresh batch before and after its step,
    /// averaged over the epoch.
    pub curv_before: Option<f64>,
    pub curv_after: Option<f64>,
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub seconds: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        let bits = |v: Option<f64>| v.map(f64::to_bits);
        self.phase == o.phase
            && self.epoch == o.epoch
            && bits(self.loss_mu) == bits(o.loss_mu)
            && bits(self.loss_sigma) == bits(o.loss_sigma)
            && bits(self.loss_d) == bits(o.loss_d)
            && bits(self.loss_g) == bits(o.loss_g)
            && bits(self.loss_curv) == bits(o.loss_curv)
            && bits(self.curv_before) == bits(o.curv_before)
            && bits(self.curv_after) == bits(o.curv_after)
            && self.checkpoint == o.checkpoint
    }
}

/// Per-epoch losses; wall-clock time is kept but ignored by `==`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub records: Vec<EpochRecord>,
}

impl PhaseLog {
    pub fn phase(&self, p: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == Some(p))
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut out = String::from("phase,epoch,loss_mu,loss_sigma,loss_d,loss_g,loss_curv,curv_before,curv_after,checkpoint\n");
        for r in &self.records {
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.phase.map(|p| p.to_string()).unwrap_or_default(),
                r.epoch,
                f(r.loss_mu),
                f(r.loss_sigma),
                f(r.loss_d),
                f(r.loss_g),
                f(r.loss_curv),
                f(r.curv_before),
                f(r.curv_after),
                r.checkpoint.as_deref().unwrap_or("")
            );
        }
        out
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// What the generator sees as a fake sample.
enum Fake<'a> {
    /// `mu(mu_z + sigma_z eta)`
    Recon { x: &'a Tensor, eta: &'a Tensor },
    /// `mu(z) + sigma(z) eps` at `z = mu_z + sigma_z eta`
    Noisy { x: &'a Tensor, eta: &'a Tensor, eps: &'a Tensor },
    /// `mu(z)` at fixed latents
    Latent(&'a Tensor),
}

const OPTIMIZERS: [&str; 9] = [
    "mu", "mu.gen", "sigma", "sigma.gen", "critic", "estimator", "bilevel.elbo", "bilevel.critic", "bilevel.gen",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: RvaeModel,
    pub critic: Critic,
    pub estimator: CurvatureEstimator,
    pub optim: BTreeMap<String, Adam>,
    pub progress: Progress,
    pub log: PhaseLog,
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    train: TrainConfig,
    rvae: RvaeConfig,
    data_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    progress: Progress,
    adam_steps: BTreeMap<String, u64>,
    log: PhaseLog,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, rvae: &RvaeConfig, data_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let model = RvaeModel::new(rvae, data_dim, &mut stream(cfg.seed, Stream::Init, 0))?;
        let critic = Critic::new(data_dim, cfg.critic_hidden, cfg.lambda_gp, &mut stream(cfg.seed, Stream::Init, 1))?;
        let estimator =
            CurvatureEstimator::new(rvae.latent_dim, cfg.estimator.hidden, &mut stream(cfg.seed, Stream::Init, 2))?;
        let optim = OPTIMIZERS.iter().map(|&n| (n.to_string(), Adam::new(cfg_lr(&cfg, n)))).collect();
        Ok(Trainer {
            model,
            critic,
            estimator,
            optim,
            progress: Progress {
                phase: Phase::Mu,
                epoch: 0,
                iteration: 0,
            },
            log: PhaseLog::default(),
            cfg,
        })
    }

    fn adam(&mut self, name: &str) -> Adam {
        self.optim.remove(name).expect("optimizer registered in Trainer::new")
    }

    fn epochs(&self, p: Phase) -> usize {
        match p {
            Phase::Mu => self.cfg.epochs_mu,
            Phase::Sigma => self.cfg.epochs_sigma,
            Phase::Estimator => self.cfg.estimator.epochs,
            Phase::Bilevel => self.cfg.epochs_bilevel,
            Phase::Done => 0,
        }
    }

    /// Swap in a config whose epoch counts may differ from the running one.
    /// Reopens the first phase that now has more epochs than it completed;
    /// adding epochs to a phase that later phases already built on is a
    /// config error.
    pub fn reconfigure(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        self.cfg = cfg;
        let order = [Phase::Mu, Phase::Sigma, Phase::Estimator, Phase::Bilevel];
        let done = |p: Phase| self.log.phase(p).count();
        let Some(open) = order.iter().position(|&p| done(p) < self.epochs(p)) else {
            return Ok(());
        };
        let p = order[open];
        if let Some(&later) = order[open + 1..].iter().find(|&&q| done(q) > 0) {
            return Err(Error::Config(format!("cannot add {p} epochs: {later} has already run")));
        }
        let iteration = if p == self.progress.phase { self.progress.iteration } else { 0 };
        self.progress = Progress {
            phase: p,
            epoch: done(p),
            iteration,
        };
        Ok(())
    }

    fn next_phase(p: Phase) -> Phase {
        match p {
            Phase::Mu => Phase::Sigma,
            Phase::Sigma => Phase::Estimator,
            Phase::Estimator => Phase::Bilevel,
            Phase::Bilevel | Phase::Done => Phase::Done,
        }
    }

    /// Skip phases that are complete or have no epochs.
    fn settle(&mut self) {
        while self.progress.phase != Phase::Done && self.progress.epoch >= self.epochs(self.progress.phase) {
            self.progress = Progress {
                phase: Self::next_phase(self.progress.phase),
                epoch: 0,
                iteration: 0,
            };
        }
    }

    /// Run epochs until done, or until `stop` (phase, epoch) has completed.
    /// `on_epoch` is called after every epoch, typically to checkpoint.
    /// `checkpoint` names what it writes and is logged against the epoch
    /// before the call, so a saved log already carries its own reference.
    pub fn run(
        &mut self,
        data: &Tensor,
        stop: Option<(Phase, usize)>,
        checkpoint: Option<&str>,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if data.rows() == 0 || data.cols() != self.model.data_dim() {
            return Err(Error::Data(format!(
                "training data has shape {:?}, model expects width {}",
                data.shape(),
                self.model.data_dim()
            )));
        }
        loop {
            self.settle();
            let Progress { phase, epoch, .. } = self.progress;
            if phase == Phase::Done {
                return Ok(());
            }
            let started = Instant::now();
            let mut rec = match phase {
                Phase::Mu | Phase::Sigma => self.pretrain_epoch(phase, data)?,
                Phase::Estimator => self.estimator_epoch(data)?,
                Phase::Bilevel => self.bilevel_epoch(data)?,
                Phase::Done => unreachable!(),
            };
            rec.phase = Some(phase);
            rec.epoch = epoch;
            rec.seconds = started.elapsed().as_secs_f64();
            rec.checkpoint = checkpoint.map(str::to_string);
            self.progress.epoch += 1;
            self.log.records.push(rec);
            on_epoch(self)?;
            if stop == Some((phase, epoch)) {
                return Ok(());
            }
        }
    }

    fn batches(&self, n: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        permutation(rng, n).chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn pretrain_epoch(&mut self, phase: Phase, data: &Tensor) -> Result<EpochRecord> {
        let (stage, name, which) = match phase {
            Phase::Mu => (Stage::Mu, "mu", Stream::PhaseMu),
            _ => (Stage::Sigma, "sigma", Stream::PhaseSigma),
        };
        let epoch = self.progress.epoch;
        let mut rng = stream(self.cfg.seed, which, epoch as u64);
        if stage == Stage::Sigma && epoch == 0 {
            self.model.fit_variance(data, &mut rng)?;
        }
        let groups = stage_groups(stage, self.model.config.scale_head_stage);
        let beta = if stage == Stage::Mu { 0.0 } else { self.model.config.beta };
        let d = self.model.config.latent_dim;
        let m = self.model.data_dim();
        let (mut loss, mut ld, mut lg) = (Mean::default(), Mean::default(), Mean::default());
        let mut adam = self.adam(name);
        let mut gen = self.adam(&format!("{name}.gen"));
        let mut cadam = self.adam("critic");
        let result = (|| -> Result<()> {
            for (b, idx) in self.batches(data.rows(), &mut rng).into_iter().enumerate() {
                let at = |e: Error| coords(phase, epoch, b, e);
                let xb = data.select_rows(&idx);
                let eta = Tensor::new(vec![idx.len(), d], normals(&mut rng, idx.len() * d))?;
                loss.add(self.model.step(&mut adam, &groups, &xb, &eta, beta).map_err(at)?);
                self.progress.iteration += 1;
                if self.progress.iteration % self.cfg.critic_every == 0 {
                    let (fake, gen_groups) = if stage == Stage::Mu {
                        (Fake::Recon { x: &xb, eta: &eta }, vec![Group::DecoderMu])
                    } else {
                        let eps = Tensor::new(vec![idx.len(), m], normals(&mut rng, idx.len() * m))?;
                        let f = self.fake_values(&Fake::Noisy { x: &xb, eta: &eta, eps: &eps }).map_err(at)?;
                        ld.add(self.critic.step(&mut cadam, &xb, &f, &mut rng).map_err(at)?);
                        lg.add(self
                            .generator_step(&mut gen, &[Group::DecoderSigma], Fake::Noisy { x: &xb, eta: &eta, eps: &eps })
                            .map_err(at)?);
                        continue;
                    };
                    let f = self.fake_values(&fake).map_err(at)?;
                    ld.add(self.critic.step(&mut cadam, &xb, &f, &mut rng).map_err(at)?);
                    lg.add(self.generator_step(&mut gen, &gen_groups, fake).map_err(at)?);
                }
            }
            Ok(())
        })();
        self.optim.insert(name.to_string(), adam);
        self.optim.insert(format!("{name}.gen"), gen);
        self.optim.insert("critic".into(), cadam);
        result?;
        let mut rec = EpochRecord {
            loss_d: ld.get(),
            loss_g: lg.get(),
            ..EpochRecord::default()
        };
        if stage == Stage::Mu {
            rec.loss_mu = loss.get();
        } else {
            rec.loss_sigma = loss.get();
        }
        Ok(rec)
    }

    fn fake_values(&self, fake: &Fake) -> Result<Tensor> {
        match *fake {
            Fake::Latent(z) => self.model.decode_mean(z),
            Fake::Recon { x, eta } | Fake::Noisy { x, eta, .. } => {
                let (mu_z, s) = self.model.encode_batch(x)?;
                let d = mu_z.cols();
                let z: Vec<f64> = (0..mu_z.len()).map(|i| mu_z.data()[i] + s[i / d] * eta.data()[i]).collect();
                let z = Tensor::new(mu_z.shape().to_vec(), z)?;
                let mean = self.model.decode_mean(&z)?;
                match *fake {
                    Fake::Noisy { eps, .. } => Ok(mean.add(&self.model.decoder_sigma.sigma_batch(&z)?.mul(eps)?)?),
                    _ => Ok(mean),
                }
            }
        }
    }

    /// One step on `-E[D(fake)]` for `groups`, critic frozen.
    fn generator_step(&mut self, adam: &mut Adam, groups: &[Group], fake: Fake) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape, groups);
        let f = match fake {
            Fake::Latent(z) => bound.decode_mean(tape.constant(z.clone()))?,
            Fake::Recon { x, eta } => {
                let (mu_z, log_s) = bound.encode(tape.constant(x.clone()))?;
                bound.decode_mean(bound.sample_latent(mu_z, log_s, eta)?)?
            }
            Fake::Noisy { x, eta, eps } => {
                let (mu_z, log_s) = bound.encode(tape.constant(x.clone()))?;
                let (mu, sigma) = bound.decode(bound.sample_latent(mu_z, log_s, eta)?)?;
                mu.add(sigma.mul(tape.constant(eps.clone()))?)?
            }
        };
        let loss = self.critic.bind(&tape, false).loss_g(f)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite generator loss {value}")));
        }
        let grads = tape.backward(loss)?;
        let g = bound.gradients(&grads);
        drop(bound);
        adam.step(self.model.params_mut(groups), &g)?;
        Ok(value)
    }

    fn estimator_epoch(&mut self, data: &Tensor) -> Result<EpochRecord> {
        let epoch = self.progress.epoch;
        let (mu_z, _) = self.model.encode_batch(data)?;
        let opts = EstimatorOptions {
            epochs: 1,
            ..self.cfg.estimator.clone()
        };
        let seed = self.cfg.seed;
        let mut adam = self.adam("estimator");
        let report = train_estimator(&mut self.estimator, &self.model, &mu_z, &opts, &mut adam, |_| {
            stream(seed, Stream::Estimator, epoch as u64)
        });
        self.optim.insert("estimator".into(), adam);
        let report = report.map_err(|e| coords(Phase::Estimator, epoch, 0, e))?;
        Ok(EpochRecord {
            loss_curv: Some(report.final_mse),
            ..EpochRecord::default()
        })
    }

    /// Alternating loop step 1: full ELBO on every RVAE parameter.
    pub fn step_elbo(&mut self, xb: &Tensor, eta: &Tensor) -> Result<f64> {
        let mut adam = self.adam("bilevel.elbo");
        let beta = self.model.config.beta;
        let r = self.model.step(&mut adam, &Group::ALL, xb, eta, beta);
        self.optim.insert("bilevel.elbo".into(), adam);
        r
    }

    /// Perturbed latents `z'` for a batch, using the current estimator.
    pub fn perturbed_latents(&self, xb: &Tensor) -> Result<Tensor> {
        let (mu_z, _) = self.model.encode_batch(xb)?;
        let out = perturb_batch(
            &self.model,
            &self.model.decoder_sigma,
            &self.estimator,
            &mu_z,
            &self.cfg.phase3_geodesic(),
        )?;
        let d = mu_z.cols();
        Ok(Tensor::new(vec![out.len(), d], out.into_iter().flat_map(|o| o.z_prime).collect())?)
    }

    /// Step 2: critic on originals against decoded perturbed latents.
    pub fn step_critic(&mut self, xb: &Tensor, z_prime: &Tensor, rng: &mut Rng) -> Result<f64> {
        let fake = self.model.decode_mean(z_prime)?;
        let mut adam = self.adam("bilevel.critic");
        let r = self.critic.step(&mut adam, xb, &fake, rng);
        self.optim.insert("bilevel.critic".into(), adam);
        r
    }

    /// Step 3: mean decoder on the generator loss at the perturbed latents.
    pub fn step_decoder(&mut self, z_prime: &Tensor) -> Result<f64> {
        let mut adam = self.adam("bilevel.gen");
        let r = self.generator_step(&mut adam, &[Group::DecoderMu], Fake::Latent(z_prime));
        self.optim.insert("bilevel.gen".into(), adam);
        r
    }

    /// Step 4: estimator refresh on fresh targets from the current decoder.
    /// Returns the target batch's MSE before and after the step.
    pub fn step_estimator(&mut self, xb: &Tensor, rng: &mut Rng) -> Result<(f64, f64)> {
        let (mu_z, _) = self.model.encode_batch(xb)?;
        let z = jittered(&mu_z, self.cfg.estimator.jitter, rng)?;
        let t = curvature_targets(&self.model, &z, self.cfg.estimator.fd_eps, self.cfg.estimator.fd_scheme)?;
        self.estimator.calibrate(&t);
        let mut adam = self.adam("estimator");
        let before = self.estimator.step(&mut adam, &z, &t);
        self.optim.insert("estimator".into(), adam);
        Ok((before?, self.estimator.mse(&z, &t)?))
    }

    fn bilevel_epoch(&mut self, data: &Tensor) -> Result<EpochRecord> {
        let epoch = self.progress.epoch;
        let mut rng = stream(self.cfg.seed, Stream::Bilevel, epoch as u64);
        let d = self.model.config.latent_dim;
        let (mut elbo, mut ld, mut lg, mut before, mut after) =
            (Mean::default(), Mean::default(), Mean::default(), Mean::default(), Mean::default());
        for (b, idx) in self.batches(data.rows(), &mut rng).into_iter().enumerate() {
            let xb = data.select_rows(&idx);
            let eta = Tensor::new(vec![idx.len(), d], normals(&mut rng, idx.len() * d))?;
            let step = |k: usize| move |e: Error| coords(Phase::Bilevel, epoch, b, Error::Training(format!("step {k}: {e}")));
            elbo.add(self.step_elbo(&xb, &eta).map_err(step(1))?);
            let zp = self.perturbed_latents(&xb).map_err(step(2))?;
            ld.add(self.step_critic(&xb, &zp, &mut rng).map_err(step(2))?);
            lg.add(self.step_decoder(&zp).map_err(step(3))?);
            let (pre, post) = self.step_estimator(&xb, &mut rng).map_err(step(4))?;
            before.add(pre);
            after.add(post);
            self.progress.iteration += 1;
        }
        Ok(EpochRecord {
            loss_sigma: elbo.get(),
            loss_d: ld.get(),
            loss_g: lg.get(),
            loss_curv: after.get(),
            curv_before: before.get(),
            curv_after: after.get(),
            ..EpochRecord::default()
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_string_pretty(&SavedConfig {
            train: self.cfg.clone(),
            rvae: self.model.config.clone(),
            data_dim: self.model.data_dim(),
        })
        .map_err(|e| Error::Contract(e.to_string()))?;
        let state = serde_json::to_string(&SavedState {
            progress: self.progress,
            adam_steps: self.optim.iter().map(|(k, a)| (k.clone(), a.steps())).collect(),
            log: self.log.clone(),
        })
        .map_err(|e| Error::Contract(e.to_string()))?;
        let mut tensors: BTreeMap<String, Tensor> =
            self.model.tensors().into_iter().map(|(k, v)| (k, v.clone())).collect();
        tensors.extend(self.critic.params().into_iter().map(|(k, v)| (k, v.clone())));
        tensors.extend(self.estimator.tensors());
        for (name, adam) in &self.optim {
            for (p, mo) in adam.moments() {
                let n = mo.m.len();
                tensors.insert(format!("adam/{name}/{p}.m"), Tensor::new(vec![n], mo.m.clone())?);
                tensors.insert(format!("adam/{name}/{p}.v"), Tensor::new(vec![n], mo.v.clone())?);
            }
        }
        Ok(Checkpoint { config, state, tensors })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |what: &str, e: serde_json::Error| Error::Format {
            offset: 0,
            reason: format!("checkpoint {what}: {e}"),
        };
        let saved: SavedConfig = serde_json::from_str(&ckpt.config).map_err(|e| bad("config", e))?;
        let state: SavedState = serde_json::from_str(&ckpt.state).map_err(|e| bad("state", e))?;
        let mut t = Trainer::new(saved.train, &saved.rvae, saved.data_dim)?;
        t.model.load_tensors(&ckpt.tensors)?;
        for (name, p) in t.critic.params_mut() {
            *p = ckpt.tensor(&name)?.clone();
        }
        t.estimator.load_tensors(&ckpt.tensors)?;
        for (name, adam) in t.optim.iter_mut() {
            let prefix = format!("adam/{name}/");
            let mut moments = BTreeMap::new();
            for (k, m) in ckpt.tensors.range(prefix.clone()..) {
                let Some(rest) = k.strip_prefix(&prefix) else { break };
                if let Some(p) = rest.strip_suffix(".m") {
                    let v = ckpt.tensor(&format!("{prefix}{p}.v"))?;
                    moments.insert(
                        p.to_string(),
                        Moments {
                            m: m.data().to_vec(),
                            v: v.data().to_vec(),
                        },
                    );
                }
            }
            adam.restore(state.adam_steps.get(name).copied().unwrap_or(0), moments);
        }
        t.progress = state.progress;
        t.log = state.log;
        Ok(t)
    }
}

fn cfg_lr(cfg: &TrainConfig, name: &str) -> f64 {
    match name {
        "critic" => cfg.lr_critic,
        "estimator" => cfg.estimator.lr,
        n if n.starts_with("bilevel") => cfg.lr_bilevel,
        _ => cfg.lr_rvae,
    }
}

fn coords(phase: Phase, epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::MissingArtifact(_) => e,
        other => Error::Training(format!("phase {phase} epoch {epoch} batch {batch}: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{toy_images, ToySpec};
    use crate::data::Split;

    fn tiny() -> (Trainer, Tensor) {
        let spec = ToySpec {
            side: 4,
            per_class: [24, 24],
            ..ToySpec::default()
        };
        let (ds, _) = toy_images(&spec, Split::Train, 3).unwrap();
        let cfg = TrainConfig {
            seed: 3,
            epochs_mu: 2,
            epochs_sigma: 1,
            epochs_bilevel: 1,
            critic_every: 2,
            critic_hidden: 4,
            batch_size: 16,
            bilevel_geodesic_iters: Some(3),
            estimator: EstimatorOptions {
                hidden: 4,
                epochs: 1,
                ..EstimatorOptions::default()
            },
            ..TrainConfig::default()
        };
        let rvae = RvaeConfig {
            hidden: 6,
            centers: 4,
            ..RvaeConfig::default()
        };
        (Trainer::new(cfg, &rvae, 16).unwrap(), ds.images)
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let (mut t, x) = tiny();
        t.cfg.epochs_mu = 0;
        t.cfg.epochs_sigma = 0;
        t.cfg.estimator.epochs = 0;
        t.cfg.epochs_bilevel = 0;
        let before = t.clone();
        t.run(&x, None, None, |_| Ok(())).unwrap();
        assert_eq!(t.model, before.model);
        assert_eq!(t.critic, before.critic);
        assert_eq!(t.estimator, before.estimator);
        assert!(t.log.records.is_empty());
    }

    #[test]
    fn phase3_steps_are_isolated() {
        let (mut t, x) = tiny();
        t.cfg.epochs_bilevel = 0;
        t.run(&x, None, None, |_| Ok(())).unwrap();
        let mut rng = stream(1, Stream::Bilevel, 0);
        let zp = t.perturbed_latents(&x).unwrap();

        let snap = t.clone();
        t.step_critic(&x, &zp, &mut rng).unwrap();
        assert_eq!(t.model, snap.model);
        assert_eq!(t.estimator, snap.estimator);
        assert_ne!(t.critic, snap.critic);

        let snap = t.clone();
        t.step_decoder(&zp).unwrap();
        assert_eq!(t.critic, snap.critic);
        assert_eq!(t.estimator, snap.estimator);
        let others = [Group::EncoderTrunk, Group::EncoderMean, Group::EncoderScale, Group::DecoderSigma, Group::Prior];
        assert_eq!(t.model.snapshot(&others), snap.model.snapshot(&others));
        assert_ne!(t.model.snapshot(&[Group::DecoderMu]), snap.model.snapshot(&[Group::DecoderMu]));

        let snap = t.clone();
        t.step_estimator(&x, &mut rng).unwrap();
        assert_eq!(t.critic, snap.critic);
        assert_eq!(t.model, snap.model);
        assert_ne!(t.estimator, snap.estimator);
    }

    #[test]
    fn checkpoint_round_trip_keeps_everything() {
        let (mut t, x) = tiny();
        t.run(&x, Some((Phase::Sigma, 0)), None, |_| Ok(())).unwrap();
        let back = Trainer::from_checkpoint(&t.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.model, t.model);
        assert_eq!(back.critic, t.critic);
        assert_eq!(back.estimator, t.estimator);
        assert_eq!(back.progress, t.progress);
        assert_eq!(back.log, t.log);
        assert_eq!(back.optim, t.optim);
        assert_eq!(back.cfg, t.cfg);
    }

    #[test]
    fn csv_has_one_line_per_epoch() {
        let (mut t, x) = tiny();
        t.run(&x, None, Some("c"), |_| Ok(())).unwrap();
        let csv = t.log.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 1 + 1 + 1);
        assert!(t.log.records.iter().all(|r| r.checkpoint.as_deref() == Some("c")));
    }
}
