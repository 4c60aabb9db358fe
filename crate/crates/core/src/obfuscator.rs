//! Curvature estimator and the geodesic perturbation rule.

use diffcore::{Tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{ManifestRecord, PublishedDataset};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::geometry::{curvature_fd, geodesics, Decoder, FdScheme, GeodesicOptions, GeodesicPath};
use crate::netkit::{Activation, Adam, Mlp, RbfNet};
use crate::rng::{normals, permutation, Rng};
use crate::rvae::RvaeModel;

/// Non-negative regression `K^(z) = scale * softplus(body(z))`.
///
/// `scale` is fixed to the mean training target on the first fit, so the
/// network always regresses values of order one whatever the decoder's
/// curvature magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureEstimator {
    pub body: Mlp,
    pub scale: f64,
    pub calibrated: bool,
}

impl CurvatureEstimator {
    pub fn new(latent_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(CurvatureEstimator {
            body: Mlp::new(&[latent_dim, hidden, hidden, 1], Activation::Tanh, Activation::Softplus, rng)?,
            scale: 1.0,
            calibrated: false,
        })
    }

    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        Ok(self.scale * self.body.eval(z)?[0])
    }

    pub fn predict_batch(&self, z: &Tensor) -> Result<Vec<f64>> {
        Ok(self.body.forward(z)?.data().iter().map(|v| self.scale * v).collect())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.body.params_mut("estimator")
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .body
            .params("estimator")
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect();
        let flag = if self.calibrated { 1.0 } else { 0.0 };
        out.push(("estimator.scale".into(), Tensor::vector(vec![self.scale, flag])));
        out
    }

    pub fn load_tensors(&mut self, map: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in self.body.params_mut("estimator") {
            let src = map.get(&name).filter(|s| s.shape() == t.shape()).ok_or_else(|| Error::Format {
                offset: 0,
                reason: format!("checkpoint tensor {name} is missing or misshapen"),
            })?;
            *t = src.clone();
        }
        let s = map.get("estimator.scale").filter(|s| s.len() == 2).ok_or_else(|| Error::Format {
            offset: 0,
            reason: "checkpoint tensor estimator.scale is missing".into(),
        })?;
        self.scale = s.data()[0];
        self.calibrated = s.data()[1] != 0.0;
        Ok(())
    }

    /// Fix `scale` from a set of targets if that has not happened yet.
    pub fn calibrate(&mut self, targets: &[f64]) {
        if self.calibrated || targets.is_empty() {
            return;
        }
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        self.scale = mean.max(1e-8);
        self.calibrated = true;
    }

    pub fn mse(&self, z: &Tensor, targets: &[f64]) -> Result<f64> {
        let pred = self.predict_batch(z)?;
        Ok(pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / targets.len().max(1) as f64)
    }

    /// One Adam step on the MSE over `(z, targets)`. Returns the MSE before the step.
    pub fn step(&mut self, adam: &mut Adam, z: &Tensor, targets: &[f64]) -> Result<f64> {
        if z.rows() != targets.len() || z.rows() == 0 {
            return Err(Error::Contract(format!("{} latents for {} targets", z.rows(), targets.len())));
        }
        let tape = Tape::new();
        let bound = self.body.bind(&tape, true);
        let pred = bound.forward(tape.constant(z.clone()))?.scale(self.scale);
        let t = tape.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
        let loss = pred.sub(t)?.square().mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite estimator loss {value}")));
        }
        let grads = tape.backward(loss)?;
        let g = bound.gradients(&grads);
        adam.step(self.params_mut(), &g)?;
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorOptions {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Std of the Gaussian jitter added to the base latents.
    pub jitter: f64,
    pub fd_eps: f64,
    pub fd_scheme: FdScheme,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            hidden: 64,
            epochs: 50,
            lr: 1e-4,
            batch_size: 64,
            jitter: 0.1,
            fd_eps: 1e-3,
            fd_scheme: FdScheme::OneSided,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    /// Mean minibatch loss per epoch.
    pub epoch_mse: Vec<f64>,
    /// MSE over the last epoch's targets after training; NaN with no epochs.
    pub final_mse: f64,
}

/// `base` plus independent `N(0, jitter^2)` noise on every coordinate.
pub fn jittered(base: &Tensor, jitter: f64, rng: &mut Rng) -> Result<Tensor> {
    let noise = normals(rng, base.len());
    let data = base.data().iter().zip(noise).map(|(b, n)| b + jitter * n).collect();
    Ok(Tensor::new(base.shape().to_vec(), data)?)
}

/// Finite-difference curvature at every row of `z`, computed in parallel.
pub fn curvature_targets<D: Decoder>(dec: &D, z: &Tensor, eps: f64, scheme: FdScheme) -> Result<Vec<f64>> {
    (0..z.rows())
        .into_par_iter()
        .map(|i| {
            let k = curvature_fd(dec, z.row(i), eps, scheme)?;
            if !k.is_finite() {
                return Err(Error::Data(format!("non-finite curvature target at z = {:?}", z.row(i))));
            }
            Ok(k)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Geometry { z, reason } => Error::Data(format!("curvature target failed at z = {z:?}: {reason}")),
            other => other,
        })
}

/// Fit the estimator to curvature targets of the frozen `dec` at jittered
/// copies of `base`, redrawn each epoch.
pub fn train_estimator<D: Decoder>(
    est: &mut CurvatureEstimator,
    dec: &D,
    base: &Tensor,
    opts: &EstimatorOptions,
    adam: &mut Adam,
    mut rng_for_epoch: impl FnMut(usize) -> Rng,
) -> Result<EstimatorReport> {
    let mut report = EstimatorReport {
        epoch_mse: Vec::with_capacity(opts.epochs),
        final_mse: f64::NAN,
    };
    let mut last = None;
    for epoch in 0..opts.epochs {
        let mut rng = rng_for_epoch(epoch);
        let z = jittered(base, opts.jitter, &mut rng)?;
        let targets = curvature_targets(dec, &z, opts.fd_eps, opts.fd_scheme)?;
        est.calibrate(&targets);
        let order = permutation(&mut rng, z.rows());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let zb = z.select_rows(chunk);
            let tb: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            total += est.step(adam, &zb, &tb)?;
            batches += 1;
        }
        report.epoch_mse.push(total / batches.max(1) as f64);
        last = Some((z, targets));
    }
    if let Some((z, t)) = last {
        report.final_mse = est.mse(&z, &t)?;
    }
    Ok(report)
}

/// Index of the largest kernel activation; ties go to the lowest index.
pub fn select_endpoint(rbf: &RbfNet, z: &[f64]) -> usize {
    let act = rbf.activations(z);
    let mut best = 0;
    for (k, &a) in act.iter().enumerate() {
        if a > act[best] {
            best = k;
        }
    }
    best
}

/// `(i_max, i_star)`: the first argmax of `khat`, then the first argmin over
/// `0..=i_max`.
pub fn prefix_argmin(khat: &[f64]) -> Result<(usize, usize)> {
    if khat.is_empty() {
        return Err(Error::Obfuscation("empty curvature sequence".into()));
    }
    if let Some(i) = khat.iter().position(|k| !k.is_finite()) {
        return Err(Error::Obfuscation(format!("non-finite estimated curvature at path index {i}")));
    }
    let mut i_max = 0;
    for (i, &k) in khat.iter().enumerate() {
        if k > khat[i_max] {
            i_max = i;
        }
    }
    let mut i_star = 0;
    for i in 0..=i_max {
        if khat[i] < khat[i_star] {
            i_star = i;
        }
    }
    Ok((i_max, i_star))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationOutcome {
    pub z: Vec<f64>,
    pub endpoint: usize,
    /// `curvature` holds `K^` at every sample.
    pub path: GeodesicPath,
    pub i_max: usize,
    pub i_star: usize,
    pub z_prime: Vec<f64>,
}

/// Perturb every row of `z` toward its dominant RBF center. Paths are
/// optimized in parallel chunks; each path's result does not depend on the
/// chunking.
pub fn perturb_batch<D: Decoder>(
    dec: &D,
    rbf: &RbfNet,
    est: &CurvatureEstimator,
    z: &Tensor,
    opts: &GeodesicOptions,
) -> Result<Vec<PerturbationOutcome>> {
    const CHUNK: usize = 32;
    let rows: Vec<usize> = (0..z.rows()).collect();
    let chunks: Vec<Vec<PerturbationOutcome>> = rows
        .par_chunks(CHUNK)
        .map(|idx| {
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = idx
                .iter()
                .map(|&i| {
                    let zi = z.row(i).to_vec();
                    let e = select_endpoint(rbf, &zi);
                    (zi, rbf.centers().row(e).to_vec())
                })
                .collect();
            let paths = geodesics(dec, &pairs, opts)?;
            idx.iter()
                .zip(pairs)
                .zip(paths)
                .map(|((&i, (zi, _)), mut path)| {
                    path.curvature = est.predict_batch(&path.samples)?;
                    let (i_max, i_star) = prefix_argmin(&path.curvature)
                        .map_err(|e| Error::Obfuscation(format!("sample {i}: {e}")))?;
                    Ok(PerturbationOutcome {
                        endpoint: select_endpoint(rbf, &zi),
                        z_prime: path.samples.row(i_star).to_vec(),
                        z: zi,
                        path,
                        i_max,
                        i_star,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn perturb(model: &RvaeModel, est: &CurvatureEstimator, z: &[f64], opts: &GeodesicOptions) -> Result<PerturbationOutcome> {
    let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
    Ok(perturb_batch(model, &model.decoder_sigma, est, &zt, opts)?.remove(0))
}

/// Encode, perturb, decode with zero noise and clamp to `[0, 1]`.
pub fn publish(
    model: &RvaeModel,
    est: &CurvatureEstimator,
    dataset: &LabeledDataset,
    opts: &GeodesicOptions,
) -> Result<PublishedDataset> {
    let (mu_z, _) = model
        .encode_batch(&dataset.images)
        .map_err(|e| Error::Obfuscation(format!("encoding failed: {e}")))?;
    let outcomes = perturb_batch(model, &model.decoder_sigma, est, &mu_z, opts)?;
    let d = mu_z.cols();
    let zp: Vec<f64> = outcomes.iter().flat_map(|o| o.z_prime.iter().copied()).collect();
    let decoded = model.decode_mean(&Tensor::new(vec![outcomes.len(), d], zp)?)?;
    let images = decoded.map(|v| v.clamp(0.0, 1.0));
    if let Some(i) = (0..images.rows()).find(|&i| images.row(i).iter().any(|v| v.is_nan())) {
        return Err(Error::Obfuscation(format!("sample {i}: decoder produced NaN")));
    }
    let records = outcomes
        .into_iter()
        .enumerate()
        .map(|(i, o)| ManifestRecord {
            index: i,
            label: dataset.labels[i],
            endpoint: Some(o.endpoint),
            i_max: Some(o.i_max),
            i_star: Some(o.i_star),
            curvature: o.path.curvature,
            source: None,
            representative: None,
        })
        .collect();
    let mut published = LabeledDataset::new(images, dataset.height, dataset.width, dataset.labels.clone(), dataset.split)?;
    published.notes = dataset.notes.clone();
    published.notes.push("curvature-guided geodesic perturbation".into());
    Ok(PublishedDataset {
        notes: published.notes.clone(),
        dataset: published,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn rule_examples() {
        assert_eq!(prefix_argmin(&[5.0, 3.0, 1.0, 9.0, 0.0]).unwrap(), (3, 2));
        assert_eq!(prefix_argmin(&[9.0, 1.0, 1.0, 1.0]).unwrap(), (0, 0));
        assert_eq!(prefix_argmin(&[1.0, 2.0, 0.5, 0.5, 2.0]).unwrap(), (1, 0));
        assert!(prefix_argmin(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn star_never_passes_max(k in prop::collection::vec(0.0f64..10.0, 1..30)) {
            let (i_max, i_star) = prefix_argmin(&k).unwrap();
            prop_assert!(i_star <= i_max && i_max < k.len());
            prop_assert!(k[..=i_max].iter().all(|&v| k[i_star] <= v));
            prop_assert!(k.iter().all(|&v| v <= k[i_max]));
        }
    }

    fn rbf(centers: Vec<Vec<f64>>) -> RbfNet {
        let k = centers.len();
        RbfNet::new(Tensor::from_rows(&centers).unwrap(), Tensor::full(&[k], 2.0), Tensor::zeros(&[k, 1]), 1e-2, 3).unwrap()
    }

    #[test]
    fn endpoint_at_center_and_ties() {
        let net = rbf(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0], vec![-1.0, 3.0]]);
        assert_eq!(select_endpoint(&net, &[-1.0, 3.0]), 3);
        assert_eq!(select_endpoint(&net, &[1.0, 0.0]), 0);
    }

    #[test]
    fn estimator_is_nonnegative_and_steps() {
        let mut rng = stream(3, Stream::Estimator, 0);
        let mut est = CurvatureEstimator::new(2, 8, &mut rng).unwrap();
        let z = Tensor::new(vec![16, 2], normals(&mut rng, 32).iter().map(|v| 5.0 * v).collect()).unwrap();
        assert!(est.predict_batch(&z).unwrap().iter().all(|&k| k >= 0.0));
        let t = vec![2.0; 16];
        est.calibrate(&t);
        assert_eq!(est.scale, 2.0);
        let mut adam = Adam::new(1e-2);
        let first = est.step(&mut adam, &z, &t).unwrap();
        for _ in 0..300 {
            est.step(&mut adam, &z, &t).unwrap();
        }
        assert!(est.mse(&z, &t).unwrap() < first);
    }
}
