//! Small image classifier used downstream of publication and as the feature
//! extractor for the utility metrics.

use diffcore::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::netkit::{Activation, Adam, Conv2d, Mlp};
use crate::rng::{permutation, stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Two valid 3x3 convolutions (the second with stride 2) and an MLP head.
    Conv,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub arch: Arch,
    pub channels: [usize; 2],
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Output width; defaults to one past the largest training label.
    pub classes: Option<usize>,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            arch: Arch::Conv,
            channels: [8, 16],
            hidden: 64,
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            classes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamClassifier {
    pub convs: Vec<Conv2d>,
    /// Penultimate layer; its output is the feature space of the metrics.
    pub hidden: Mlp,
    pub out: Mlp,
}

impl DownstreamClassifier {
    pub fn new(height: usize, width: usize, classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, Stream::Classifier, 0);
        let mut convs = Vec::new();
        let mut feat = height * width;
        if cfg.arch == Arch::Conv {
            let c1 = Conv2d::new((height, width, 1), 3, 1, cfg.channels[0], Activation::Relu, &mut rng)?;
            let (h1, w1) = c1.out_hw();
            let c2 = Conv2d::new((h1, w1, cfg.channels[0]), 3, 2, cfg.channels[1], Activation::Relu, &mut rng)?;
            feat = c2.output_len();
            convs = vec![c1, c2];
        }
        Ok(DownstreamClassifier {
            convs,
            hidden: Mlp::new(&[feat, cfg.hidden], Activation::Relu, Activation::Relu, &mut rng)?,
            out: Mlp::new(&[cfg.hidden, classes], Activation::Linear, Activation::Linear, &mut rng)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.out.output_dim()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.extend(c.params_mut(&format!("conv{i}")));
        }
        out.extend(self.hidden.params_mut("hidden"));
        out.extend(self.out.params_mut("out"));
        out
    }

    /// `(features, logits)` with every parameter held constant.
    fn taped<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mut h = x;
        for c in &self.convs {
            h = c.bind(tape, false).forward(h)?;
        }
        let f = self.hidden.bind(tape, false).forward(h)?;
        Ok((f, self.out.bind(tape, false).forward(f)?))
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let (f, _) = self.taped(&tape, tape.constant(x.clone()))?;
        Ok((*f.value()).clone())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let (_, l) = self.taped(&tape, tape.constant(x.clone()))?;
        let l = (*l.value()).clone();
        if !l.is_finite() {
            return Err(Error::Training("classifier produced non-finite logits".into()));
        }
        Ok(l)
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let l = self.logits(x)?;
        let c = l.cols();
        let mut p = l.into_data();
        for row in p.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(Tensor::new(vec![p.len() / c, c], p)?)
    }

    /// Per-sample cross-entropy.
    pub fn losses(&self, x: &Tensor, labels: &[u8]) -> Result<Vec<f64>> {
        let l = self.logits(x)?;
        let c = l.cols();
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = l.row(i);
                let y = y as usize;
                if y >= c {
                    return Err(Error::Data(format!("label {y} outside the classifier's {c} classes")));
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                Ok(lse - row[y])
            })
            .collect()
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Contract("accuracy of an empty dataset".into()));
        }
        let l = self.logits(&ds.images)?;
        let hits = (0..ds.len())
            .filter(|&i| {
                let row = l.row(i);
                let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                arg == ds.labels[i] as usize
            })
            .count();
        Ok(hits as f64 / ds.len() as f64)
    }

    fn step(&mut self, adam: &mut Adam, x: &Tensor, labels: &[u8]) -> Result<f64> {
        let tape = Tape::new();
        let (b, c) = (labels.len(), self.classes());
        let convs: Vec<_> = self.convs.iter().map(|cv| cv.bind(&tape, true)).collect();
        let hid = self.hidden.bind(&tape, true);
        let out = self.out.bind(&tape, true);
        let mut h = tape.constant(x.clone());
        for cv in &convs {
            h = cv.forward(h)?;
        }
        let logits = out.forward(hid.forward(h)?)?;
        let lv = logits.value();
        let maxes: Vec<f64> = (0..b).map(|i| lv.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let shift = tape.constant(Tensor::new(vec![b, 1], maxes)?).matmul(tape.constant(Tensor::full(&[1, c], 1.0)))?;
        let shifted = logits.sub(shift)?;
        let lse = shifted.exp().sum_last().ln();
        let mut onehot = vec![0.0; b * c];
        for (i, &y) in labels.iter().enumerate() {
            onehot[i * c + y as usize] = 1.0;
        }
        let picked = shifted.mul(tape.constant(Tensor::new(vec![b, c], onehot)?))?.sum_last();
        let loss = lse.sub(picked)?.mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite classifier loss {value}")));
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = convs.iter().flat_map(|cv| cv.gradients(&grads)).collect();
        g.extend(hid.gradients(&grads));
        g.extend(out.gradients(&grads));
        drop((convs, hid, out));
        adam.step(self.params_mut(), &g)?;
        Ok(value)
    }
}

/// Cross-entropy training for `cfg.epochs`; returns the mean loss per epoch.
pub fn train_downstream(ds: &LabeledDataset, cfg: &ClassifierConfig) -> Result<(DownstreamClassifier, Vec<f64>)> {
    if ds.class_counts().len() < 2 {
        return Err(Error::Contract("a classifier needs at least two classes present".into()));
    }
    let classes = cfg.classes.unwrap_or(ds.num_classes());
    if classes < ds.num_classes() {
        return Err(Error::Config(format!("{classes} classes configured but label {} present", ds.num_classes() - 1)));
    }
    let mut clf = DownstreamClassifier::new(ds.height, ds.width, classes, cfg)?;
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, Stream::Classifier, 1 + epoch as u64);
        let order = permutation(&mut rng, ds.len());
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let labels: Vec<u8> = chunk.iter().map(|&i| ds.labels[i]).collect();
            total += clf.step(&mut adam, &ds.images.select_rows(chunk), &labels)?;
            n += 1;
        }
        history.push(total / n as f64);
    }
    Ok((clf, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn separable(n: usize) -> LabeledDataset {
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let v = (i * 37 % 11) as f64 / 40.0;
            for p in 0..36 {
                let left = p % 6 < 3;
                px.push(if left == (y == 0) { 0.7 + v } else { 0.1 + v / 2.0 });
            }
            labels.push(y);
        }
        LabeledDataset::new(Tensor::new(vec![n, 36], px).unwrap(), 6, 6, labels, Split::Train).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let ds = separable(8);
        let clf = DownstreamClassifier::new(6, 6, 3, &ClassifierConfig::default()).unwrap();
        let p = clf.probabilities(&ds.images).unwrap();
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn learns_a_separable_set() {
        for arch in [Arch::Conv, Arch::Mlp] {
            let ds = separable(64);
            let cfg = ClassifierConfig {
                arch,
                epochs: 15,
                lr: 1e-2,
                ..ClassifierConfig::default()
            };
            let (clf, hist) = train_downstream(&ds, &cfg).unwrap();
            assert!(clf.accuracy(&ds).unwrap() > 0.95, "{arch:?} {hist:?}");
            let (again, _) = train_downstream(&ds, &cfg).unwrap();
            assert_eq!(again, clf);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let mut ds = separable(4);
        ds.labels = vec![0; 4];
        assert!(matches!(train_downstream(&ds, &ClassifierConfig::default()), Err(Error::Contract(_))));
    }
}
