use diffcore::{Gradients, Scalar, Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
        }
    }

    fn apply_f64(self, x: f64) -> f64 {
        self.apply(x)
    }

    pub(crate) fn on_var<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
            Activation::Softplus => v.softplus(),
        }
    }

    /// Elementwise derivative at `pre` as a taped value, given `out = act(pre)`.
    /// `None` for the identity.
    pub(crate) fn derivative<'t>(self, pre: Var<'t>, out: Var<'t>) -> Result<Option<Var<'t>>> {
        Ok(match self {
            Activation::Linear => None,
            Activation::Tanh => Some(out.square().neg().add_scalar(1.0)),
            // sigmoid(x) = exp(x - softplus(x))
            Activation::Softplus => Some(pre.sub(out)?.exp()),
            Activation::Relu => {
                let v = pre.value();
                let mask = v.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                Some(pre.tape().constant(mask))
            }
        })
    }
}

/// One affine layer. `weight` is stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists every width including
    /// input and output.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Contract(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Dense {
                    weight: Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
                    bias: Tensor::zeros(&[fan_out]),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("mlp needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.output_dim()] {
                return Err(Error::Contract(format!(
                    "layer {i}: weight {:?} and bias {:?} do not fit",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Contract(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    /// Batched forward pass on `[B, in]` without recording anything.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = h.matmul(&l.weight)?.add(&l.bias)?.map(|v| l.activation.apply_f64(v));
        }
        Ok(h)
    }

    /// Single-input evaluation over any scalar type (used for dual-number
    /// Jacobians).
    pub fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.input_dim() {
            return Err(diffcore::DiffError::Dimension {
                op: "mlp_forward",
                lhs: vec![x.len()],
                rhs: self.layers[0].weight.shape().to_vec(),
            }
            .into());
        }
        let mut h: Vec<S> = x.to_vec();
        for l in &self.layers {
            let (n_in, n_out) = (l.input_dim(), l.output_dim());
            let w = l.weight.data();
            let mut next = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let mut acc = S::constant(l.bias.data()[j]);
                for (i, hi) in h.iter().enumerate().take(n_in) {
                    acc = acc + hi.scale(w[i * n_out + j]);
                }
                next.push(l.activation.apply(acc));
            }
            h = next;
        }
        Ok(h)
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.param_names(prefix)
            .into_iter()
            .zip(self.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.param_names(prefix)
            .into_iter()
            .zip(self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias), l.activation))
                .collect(),
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>, Activation)>,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            h = act.on_var(h.matmul(w)?.add(b)?);
        }
        Ok(h)
    }

    /// Forward pass that also pushes tangents through the network, so the
    /// result is `(f(x), J_f(x) t)` for each tangent, all on the tape.
    pub fn forward_tangents(&self, x: Var<'t>, tangents: &[Var<'t>]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let mut h = x;
        let mut ts = tangents.to_vec();
        for &(w, b, act) in &self.layers {
            let pre = h.matmul(w)?.add(b)?;
            let out = act.on_var(pre);
            let deriv = act.derivative(pre, out)?;
            for t in ts.iter_mut() {
                let tp = t.matmul(w)?;
                *t = match deriv {
                    Some(d) => tp.mul(d)?,
                    None => tp,
                };
            }
            h = out;
        }
        Ok((h, ts))
    }

    /// Rows of `d f(x_b) / d x_b` for a scalar-output network, built from taped
    /// operations so it can itself be differentiated.
    pub fn input_gradient(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for &(w, b, act) in &self.layers {
            let pre = h.matmul(w)?.add(b)?;
            let out = act.on_var(pre);
            pres.push((pre, out));
            h = out;
        }
        let shape = h.shape();
        if shape.last() != Some(&1) {
            return Err(Error::Contract(format!(
                "input gradient needs a scalar output, got shape {shape:?}"
            )));
        }
        let mut g = tape.constant(Tensor::full(&shape, 1.0));
        for (&(w, _, act), &(pre, out)) in self.layers.iter().zip(&pres).rev() {
            if let Some(d) = act.derivative(pre, out)? {
                g = g.mul(d)?;
            }
            g = g.matmul(w.transpose()?)?;
        }
        Ok(g)
    }

    /// Gradients in the order of [`Mlp::params`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|&(w, b, _)| [grads.wrt(w), grads.wrt(b)])
            .collect()
    }
}
