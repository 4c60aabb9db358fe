//! Loss-based black-box membership inference.

use diffcore::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::classifier::DownstreamClassifier;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::netkit::{Activation, Adam, Mlp};
use crate::rng::{permutation, stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackModel {
    /// Logistic regression on the per-sample cross-entropy.
    Logistic,
    /// Small MLP on the full softmax vector.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiaConfig {
    pub model: AttackModel,
    pub seed: u64,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
}

impl Default for MiaConfig {
    fn default() -> Self {
        MiaConfig {
            model: AttackModel::Logistic,
            seed: 0,
            mlp_hidden: 16,
            mlp_epochs: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSample {
    pub member: bool,
    /// Row in the members' or non-members' dataset.
    pub index: usize,
    /// Attack logit; positive means "member".
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub accuracy: f64,
    pub members: usize,
    pub nonmembers: usize,
    /// Per population after balancing.
    pub balanced: usize,
    pub attack_train: usize,
    pub eval: Vec<AttackSample>,
    /// The fitted attack's verdict on every member.
    pub member_flags: Vec<bool>,
}

/// Fitted attack: maps a feature row to a logit.
enum Fitted {
    Logistic { mean: f64, std: f64, w: f64, b: f64 },
    Mlp(Mlp),
}

impl Fitted {
    fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        match self {
            Fitted::Logistic { mean, std, w, b } => Ok(x.data().iter().map(|v| w * (v - mean) / std + b).collect()),
            Fitted::Mlp(m) => Ok(m.forward(x)?.into_data()),
        }
    }
}

/// Newton iterations on the ridge-regularized log-likelihood of a
/// one-feature logistic model. Returns `(w, b)` for standardized input.
fn fit_logistic(x: &[f64], y: &[f64]) -> (f64, f64) {
    const RIDGE: f64 = 1e-6;
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..100 {
        let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (RIDGE * w, 0.0, RIDGE, 0.0, 1e-12);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(w * xi + b)).exp());
            let r = p - yi;
            let s = p * (1.0 - p);
            gw += r * xi;
            gb += r;
            hww += s * xi * xi;
            hwb += s * xi;
            hbb += s;
        }
        let det = hww * hbb - hwb * hwb;
        if !(det.abs() > 0.0) {
            break;
        }
        let dw = (hbb * gw - hwb * gb) / det;
        let db = (hww * gb - hwb * gw) / det;
        w -= dw;
        b -= db;
        if dw.abs() + db.abs() < 1e-12 || !w.is_finite() {
            break;
        }
    }
    (w, b)
}

fn fit_mlp(x: &Tensor, y: &[f64], cfg: &MiaConfig) -> Result<Mlp> {
    let mut rng = stream(cfg.seed, Stream::Attack, 1);
    let mut net = Mlp::new(&[x.cols(), cfg.mlp_hidden, 1], Activation::Tanh, Activation::Linear, &mut rng)?;
    let mut adam = Adam::new(1e-2);
    let target = Tensor::new(vec![y.len(), 1], y.to_vec())?;
    for _ in 0..cfg.mlp_epochs {
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let s = bound.forward(tape.constant(x.clone()))?;
        // binary cross-entropy from logits
        let loss = s.softplus().sub(s.mul(tape.constant(target.clone()))?)?.mean();
        let grads = tape.backward(loss)?;
        let g = bound.gradients(&grads);
        drop(bound);
        adam.step(net.params_mut("attack"), &g)?;
    }
    Ok(net)
}

/// Attack from precomputed per-sample features `[N, F]`. `F` must be 1 for
/// the logistic model.
pub fn attack_features(members: &Tensor, nonmembers: &Tensor, cfg: &MiaConfig) -> Result<MiaReport> {
    if members.rows() == 0 || nonmembers.rows() == 0 {
        return Err(Error::Contract("membership inference needs members and non-members".into()));
    }
    if cfg.model == AttackModel::Logistic && members.cols() != 1 {
        return Err(Error::Contract("the logistic attack takes one scalar feature".into()));
    }
    let n = members.rows().min(nonmembers.rows());
    let mut rng = stream(cfg.seed, Stream::Attack, 0);
    let pm = permutation(&mut rng, members.rows());
    let pn = permutation(&mut rng, nonmembers.rows());
    let half = n / 2;
    let (m_train, m_eval) = (&pm[..half], &pm[half..n]);
    let (n_train, n_eval) = (&pn[..half], &pn[half..n]);

    let mut train_rows = members.select_rows(m_train).into_data();
    train_rows.extend(nonmembers.select_rows(n_train).into_data());
    let train = Tensor::new(vec![2 * half, members.cols()], train_rows)?;
    let y: Vec<f64> = (0..2 * half).map(|i| if i < half { 1.0 } else { 0.0 }).collect();
    let fitted = match cfg.model {
        AttackModel::Logistic => {
            let x = train.data();
            let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len().max(1) as f64;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            let xs: Vec<f64> = x.iter().map(|v| (v - mean) / std).collect();
            let (w, b) = if half == 0 { (0.0, 0.0) } else { fit_logistic(&xs, &y) };
            Fitted::Logistic { mean, std, w, b }
        }
        AttackModel::Mlp => Fitted::Mlp(fit_mlp(&train, &y, cfg)?),
    };

    let ms = fitted.score(&members.select_rows(m_eval))?;
    let ns = fitted.score(&nonmembers.select_rows(n_eval))?;
    let mut eval = Vec::with_capacity(ms.len() + ns.len());
    let mut hits = 0;
    for (&i, &s) in m_eval.iter().zip(&ms) {
        hits += usize::from(s > 0.0);
        eval.push(AttackSample { member: true, index: i, score: s });
    }
    for (&i, &s) in n_eval.iter().zip(&ns) {
        hits += usize::from(s <= 0.0);
        eval.push(AttackSample { member: false, index: i, score: s });
    }
    let member_flags = fitted.score(members)?.into_iter().map(|s| s > 0.0).collect();
    Ok(MiaReport {
        accuracy: hits as f64 / eval.len() as f64,
        members: members.rows(),
        nonmembers: nonmembers.rows(),
        balanced: n,
        attack_train: 2 * half,
        eval,
        member_flags,
    })
}

/// Attack a classifier with its training set as members and held-out data
/// as non-members.
pub fn mia_attack(
    clf: &DownstreamClassifier,
    members: &LabeledDataset,
    nonmembers: &LabeledDataset,
    cfg: &MiaConfig,
) -> Result<MiaReport> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Contract("membership inference needs members and non-members".into()));
    }
    let feats = |ds: &LabeledDataset| -> Result<Tensor> {
        match cfg.model {
            AttackModel::Logistic => {
                let l = clf.losses(&ds.images, &ds.labels)?;
                Ok(Tensor::new(vec![l.len(), 1], l)?)
            }
            AttackModel::Mlp => clf.probabilities(&ds.images),
        }
    };
    attack_features(&feats(members)?, &feats(nonmembers)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normals;

    fn col(v: Vec<f64>) -> Tensor {
        Tensor::new(vec![v.len(), 1], v).unwrap()
    }

    #[test]
    fn separable_losses_give_perfect_accuracy() {
        let r = attack_features(&col(vec![0.0; 40]), &col(vec![1.0; 60]), &MiaConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.balanced, 40);
        let members = r.eval.iter().filter(|s| s.member).count();
        assert_eq!(members * 2, r.eval.len());
    }

    #[test]
    fn exchangeable_losses_sit_at_chance() {
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut rng = stream(seed, Stream::Init, 7);
            let m = col(normals(&mut rng, 2000).iter().map(|v| v.abs()).collect());
            let n = col(normals(&mut rng, 2000).iter().map(|v| v.abs()).collect());
            let cfg = MiaConfig { seed, ..MiaConfig::default() };
            accs.push(attack_features(&m, &n, &cfg).unwrap().accuracy);
        }
        let mean = accs.iter().sum::<f64>() / 10.0;
        assert!((mean - 0.5).abs() < 0.05, "{accs:?}");
    }

    #[test]
    fn mlp_attack_separates_shifted_vectors() {
        let mut rng = stream(1, Stream::Init, 8);
        let m = Tensor::new(vec![100, 2], normals(&mut rng, 200).iter().map(|v| 0.2 * v + 1.0).collect()).unwrap();
        let n = Tensor::new(vec![100, 2], normals(&mut rng, 200).iter().map(|v| 0.2 * v - 1.0).collect()).unwrap();
        let cfg = MiaConfig { model: AttackModel::Mlp, ..MiaConfig::default() };
        assert!(attack_features(&m, &n, &cfg).unwrap().accuracy > 0.95);
    }

    #[test]
    fn empty_population_is_a_contract_error() {
        let e = attack_features(&Tensor::zeros(&[0, 1]), &col(vec![1.0]), &MiaConfig::default());
        assert!(matches!(e, Err(Error::Contract(_))));
    }
}
