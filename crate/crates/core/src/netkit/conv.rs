use std::rc::Rc;

use diffcore::{Gradients, Tape, Tensor, Var};
use rand::Rng as _;

use super::mlp::Activation;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Valid (unpadded) 2-D convolution on channels-last images, lowered to a
/// gather followed by a matmul.
///
/// Rows of the input are flattened `[h, w, c]`; rows of the output are
/// flattened `[oh, ow, out_channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_hwc: (usize, usize, usize),
    pub kernel: usize,
    pub stride: usize,
    /// `[kernel * kernel * c, out_channels]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    patches: Vec<usize>,
}

impl Conv2d {
    pub fn new(
        in_hwc: (usize, usize, usize),
        kernel: usize,
        stride: usize,
        out_channels: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (h, w, c) = in_hwc;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w || c == 0 || out_channels == 0 {
            return Err(Error::Contract(format!(
                "conv kernel {kernel} stride {stride} does not fit input {in_hwc:?}"
            )));
        }
        let fan_in = kernel * kernel * c;
        let limit = (6.0 / (fan_in + out_channels) as f64).sqrt();
        let weight = Tensor::new(
            vec![fan_in, out_channels],
            (0..fan_in * out_channels).map(|_| rng.random_range(-limit..limit)).collect(),
        )?;
        let mut conv = Conv2d {
            in_hwc,
            kernel,
            stride,
            weight,
            bias: Tensor::zeros(&[out_channels]),
            activation,
            patches: Vec::new(),
        };
        conv.patches = conv.patch_index();
        Ok(conv)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let (h, w, _) = self.in_hwc;
        ((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_len(&self) -> usize {
        let (oh, ow) = self.out_hw();
        oh * ow * self.out_channels()
    }

    fn patch_index(&self) -> Vec<usize> {
        let (_, w, c) = self.in_hwc;
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let mut idx = Vec::with_capacity(oh * ow * k * k * c);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        for ci in 0..c {
                            idx.push(((oy * self.stride + ky) * w + ox * self.stride + kx) * c + ci);
                        }
                    }
                }
            }
        }
        idx
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(format!("{prefix}.weight"), &self.weight), (format!("{prefix}.bias"), &self.bias)]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundConv<'t> {
        let put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let (oh, ow) = self.out_hw();
        BoundConv {
            weight: put(&self.weight),
            bias: put(&self.bias),
            activation: self.activation,
            patches: Rc::from(self.patches.as_slice()),
            positions: oh * ow,
            fan_in: self.weight.rows(),
        }
    }
}

pub struct BoundConv<'t> {
    weight: Var<'t>,
    bias: Var<'t>,
    activation: Activation,
    patches: Rc<[usize]>,
    positions: usize,
    fan_in: usize,
}

impl<'t> BoundConv<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let batch = x.shape()[0];
        let cols = x.gather_last(self.patches.clone())?.reshape(&[batch * self.positions, self.fan_in])?;
        let out = self.activation.on_var(cols.matmul(self.weight)?.add(self.bias)?);
        let oc = out.shape()[1];
        Ok(out.reshape(&[batch, self.positions * oc])?)
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        vec![grads.wrt(self.weight), grads.wrt(self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn matches_direct_convolution() {
        let mut rng = stream(9, Stream::Init, 0);
        let conv = Conv2d::new((5, 4, 2), 3, 1, 3, Activation::Linear, &mut rng).unwrap();
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let tape = Tape::new();
        let y = conv
            .bind(&tape, false)
            .forward(tape.constant(Tensor::new(vec![1, 40], x.clone()).unwrap()))
            .unwrap()
            .value();
        let (oh, ow) = conv.out_hw();
        assert_eq!((oh, ow), (3, 2));
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for c in 0..2 {
                                let xi = x[((oy + ky) * 4 + ox + kx) * 2 + c];
                                acc += xi * conv.weight.get((ky * 3 + kx) * 2 + c, o);
                            }
                        }
                    }
                    let got = y.data()[(oy * ow + ox) * 3 + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
