//! Synthetic manifolds with known decoders, for oracle checks and toy runs.

use diffcore::{Scalar, Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::Decoder;
use crate::rng::{normal, stream, Stream};

/// Closed-form decoders with a constant (metric-free) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticDecoder {
    Identity { dim: usize },
    /// `mu(z) = A z + b` with `A` stored `[M, d]`.
    Affine { a: Tensor, b: Vec<f64> },
    /// `mu(z) = (z1, z2, a (z1^2 + z2^2))`
    Paraboloid { a: f64 },
    /// Annulus: `t = z1` parameterizes the angle rationally, `z2` the radius.
    Ring,
    /// A Gaussian spot of `width` pixels on a `side x side` image; `z` moves it.
    Blobs { side: usize, width: f64 },
    /// `shift + scale * inner(z)`
    Scaled { inner: Box<AnalyticDecoder>, scale: f64, shift: f64 },
}

const BLOB_SPAN: f64 = 2.5;

impl AnalyticDecoder {
    fn blob_center(side: usize) -> f64 {
        (side as f64 - 1.0) / 2.0
    }
}

impl Decoder for AnalyticDecoder {
    fn latent_dim(&self) -> usize {
        match self {
            AnalyticDecoder::Identity { dim } => *dim,
            AnalyticDecoder::Affine { a, .. } => a.cols(),
            AnalyticDecoder::Paraboloid { .. } | AnalyticDecoder::Ring | AnalyticDecoder::Blobs { .. } => 2,
            AnalyticDecoder::Scaled { inner, .. } => inner.latent_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            AnalyticDecoder::Identity { dim } => *dim,
            AnalyticDecoder::Affine { a, .. } => a.rows(),
            AnalyticDecoder::Paraboloid { .. } => 3,
            AnalyticDecoder::Ring => 2,
            AnalyticDecoder::Blobs { side, .. } => side * side,
            AnalyticDecoder::Scaled { inner, .. } => inner.output_dim(),
        }
    }

    fn eval<S: Scalar>(&self, z: &[S]) -> Result<(Vec<S>, Vec<S>)> {
        if z.len() != self.latent_dim() {
            return Err(diffcore::DiffError::Dimension {
                op: "decode",
                lhs: vec![z.len()],
                rhs: vec![self.latent_dim()],
            }
            .into());
        }
        let mu = match self {
            AnalyticDecoder::Identity { .. } => z.to_vec(),
            AnalyticDecoder::Affine { a, b } => (0..a.rows())
                .map(|m| {
                    a.row(m)
                        .iter()
                        .zip(z)
                        .fold(S::constant(b[m]), |acc, (&w, &zi)| acc + zi.scale(w))
                })
                .collect(),
            AnalyticDecoder::Paraboloid { a } => {
                vec![z[0], z[1], (z[0].square() + z[1].square()).scale(*a)]
            }
            AnalyticDecoder::Ring => {
                let t2 = z[0].square();
                let inv = S::constant(1.0) / (t2 + S::constant(1.0));
                let r = z[1].scale(0.3) + S::constant(1.0);
                vec![(S::constant(1.0) - t2) * inv * r, z[0].scale(2.0) * inv * r]
            }
            AnalyticDecoder::Blobs { side, width } => {
                let c = Self::blob_center(*side);
                let u = z[0].scale(BLOB_SPAN) + S::constant(c);
                let v = z[1].scale(BLOB_SPAN) + S::constant(c);
                let k = -0.5 / (width * width);
                let mut out = Vec::with_capacity(side * side);
                for row in 0..*side {
                    for col in 0..*side {
                        let d2 = (u - S::constant(col as f64)).square() + (v - S::constant(row as f64)).square();
                        out.push(d2.scale(k).exp());
                    }
                }
                out
            }
            AnalyticDecoder::Scaled { inner, scale, shift } => inner
                .eval(z)?
                .0
                .into_iter()
                .map(|m| m.scale(*scale) + S::constant(*shift))
                .collect(),
        };
        Ok((mu, Vec::new()))
    }

    fn eval_taped<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.latent_dim() {
            return Err(diffcore::DiffError::Dimension {
                op: "decode",
                lhs: shape,
                rhs: vec![self.latent_dim()],
            }
            .into());
        }
        let batch = shape[0];
        let mu = match self {
            AnalyticDecoder::Identity { .. } => z,
            AnalyticDecoder::Affine { a, b } => z
                .matmul(tape.constant(a.transpose()?))?
                .add(tape.constant(Tensor::vector(b.clone())))?,
            AnalyticDecoder::Paraboloid { a } => {
                let h = z.square().sum_last().scale(*a).reshape(&[batch, 1])?;
                tape.concat_last(&[z, h])?
            }
            AnalyticDecoder::Ring => {
                let t = z.slice_last(0, 1)?;
                let r = z.slice_last(1, 2)?.scale(0.3).add_scalar(1.0);
                let t2 = t.square();
                let inv = t2.add_scalar(1.0).ln().neg().exp();
                let x = t2.neg().add_scalar(1.0).mul(inv)?.mul(r)?;
                let y = t.scale(2.0).mul(inv)?.mul(r)?;
                tape.concat_last(&[x, y])?
            }
            AnalyticDecoder::Blobs { side, width } => {
                let c = Self::blob_center(*side);
                let m = side * side;
                let ones = tape.constant(Tensor::full(&[1, m], 1.0));
                let cols: Vec<f64> = (0..m).map(|p| (p % side) as f64).collect();
                let rows: Vec<f64> = (0..m).map(|p| (p / side) as f64).collect();
                let u = z.slice_last(0, 1)?.scale(BLOB_SPAN).add_scalar(c).matmul(ones)?;
                let v = z.slice_last(1, 2)?.scale(BLOB_SPAN).add_scalar(c).matmul(ones)?;
                let du = u.sub(tape.constant(Tensor::vector(cols)))?.square();
                let dv = v.sub(tape.constant(Tensor::vector(rows)))?.square();
                du.add(dv)?.scale(-0.5 / (width * width)).exp()
            }
            AnalyticDecoder::Scaled { inner, scale, shift } => {
                inner.eval_taped(tape, z)?.0.scale(*scale).add_scalar(*shift)
            }
        };
        Ok((mu, None))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldKind {
    Plane,
    Paraboloid,
    TwoClusterBlobs,
    Ring,
}

impl std::str::FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "plane" => ManifoldKind::Plane,
            "paraboloid" => ManifoldKind::Paraboloid,
            "two-cluster-blobs" => ManifoldKind::TwoClusterBlobs,
            "ring" => ManifoldKind::Ring,
            other => return Err(Error::Contract(format!("unknown manifold kind {other:?}"))),
        })
    }
}

/// Ten-dimensional plane used by the `plane` kind.
pub fn plane_decoder() -> AnalyticDecoder {
    let m = 10;
    let s = 0.2 / (m as f64).sqrt();
    let mut a = Vec::with_capacity(m * 2);
    for i in 0..m {
        a.push(s);
        a.push(if i % 2 == 0 { s } else { -s });
    }
    AnalyticDecoder::Affine {
        a: Tensor::new(vec![m, 2], a).expect("sized"),
        b: vec![0.5; m],
    }
}

/// The exact decoder behind each synthetic kind.
pub fn fixture_decoder(kind: ManifoldKind) -> AnalyticDecoder {
    match kind {
        ManifoldKind::Plane => plane_decoder(),
        ManifoldKind::Paraboloid => AnalyticDecoder::Scaled {
            inner: Box::new(AnalyticDecoder::Paraboloid { a: 1.0 }),
            scale: 0.25,
            shift: 0.25,
        },
        ManifoldKind::Ring => AnalyticDecoder::Scaled {
            inner: Box::new(AnalyticDecoder::Ring),
            scale: 0.35,
            shift: 0.5,
        },
        ManifoldKind::TwoClusterBlobs => ToySpec::default().decoder(),
    }
}

/// Samples from a known embedding and the decoder that produced them. Latents
/// are uniform on `[-1, 1]^2` (Gaussian clusters for `two-cluster-blobs`);
/// `noise` is the std of additive pixel noise, clamped back into [0, 1].
pub fn synth_manifold(kind: ManifoldKind, n: usize, noise: f64, seed: u64) -> Result<(LabeledDataset, AnalyticDecoder)> {
    if kind == ManifoldKind::TwoClusterBlobs {
        let spec = ToySpec {
            per_class: [n - n / 2, n / 2],
            noise,
            ..ToySpec::default()
        };
        let (ds, _) = toy_images(&spec, Split::Train, seed)?;
        return Ok((ds, spec.decoder()));
    }
    let dec = fixture_decoder(kind);
    let mut rng = stream(seed, Stream::Data, kind as u64);
    let m = dec.output_dim();
    let mut images = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let label = match kind {
            ManifoldKind::Paraboloid => (z[0] * z[0] + z[1] * z[1] > 0.5) as u8,
            _ => (z[0] > 0.0) as u8,
        };
        for v in dec.mean(&z)? {
            images.push((v + noise * normal(&mut rng)).clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    let ds = LabeledDataset::new(Tensor::new(vec![n, m], images)?, 1, m, labels, Split::Train)?;
    Ok((ds.with_note(format!("synthetic {kind:?}, noise {noise}, seed {seed}")), dec))
}

/// Two overlapping classes of blob images driven by a 2-D latent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub side: usize,
    pub width: f64,
    /// Samples per class.
    pub per_class: [usize; 2],
    /// Latent cluster centers sit at `(-separation, 0)` and `(separation, 0)`.
    pub separation: f64,
    /// Latent std within a cluster.
    pub spread: f64,
    /// Pixel noise std.
    pub noise: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            side: 8,
            width: 1.2,
            per_class: [1000, 1000],
            separation: 0.3,
            spread: 0.35,
            noise: 0.2,
        }
    }
}

impl ToySpec {
    pub fn decoder(&self) -> AnalyticDecoder {
        AnalyticDecoder::Blobs {
            side: self.side,
            width: self.width,
        }
    }
}

/// Returns the dataset and the latent each image was drawn from.
pub fn toy_images(spec: &ToySpec, split: Split, seed: u64) -> Result<(LabeledDataset, Tensor)> {
    let dec = spec.decoder();
    let sub = match split {
        Split::Train => 100,
        Split::Test => 200,
    };
    let mut rng = stream(seed, Stream::Data, sub);
    let n: usize = spec.per_class.iter().sum();
    let m = spec.side * spec.side;
    let mut images = Vec::with_capacity(n * m);
    let mut latents = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so any prefix is roughly balanced.
    let mut left = spec.per_class;
    while left[0] + left[1] > 0 {
        for class in 0..2 {
            if left[class] == 0 {
                continue;
            }
            left[class] -= 1;
            let cx = if class == 0 { -spec.separation } else { spec.separation };
            let z = [
                (cx + spec.spread * normal(&mut rng)).clamp(-1.2, 1.2),
                (spec.spread * normal(&mut rng)).clamp(-1.2, 1.2),
            ];
            for v in dec.mean(&z)? {
                images.push((v + spec.noise * normal(&mut rng)).clamp(0.0, 1.0));
            }
            latents.extend_from_slice(&z);
            labels.push(class as u8);
        }
    }
    let ds = LabeledDataset::new(Tensor::new(vec![n, m], images)?, spec.side, spec.side, labels, split)?;
    Ok((
        ds.with_note(format!("toy blobs {spec:?}, seed {seed}")),
        Tensor::new(vec![n, 2], latents)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{curvature_fd, FdScheme};

    #[test]
    fn taped_and_scalar_paths_agree() {
        let z = [0.3, -0.45];
        for dec in [
            plane_decoder(),
            AnalyticDecoder::Paraboloid { a: 0.8 },
            AnalyticDecoder::Ring,
            ToySpec::default().decoder(),
            AnalyticDecoder::Scaled {
                inner: Box::new(AnalyticDecoder::Ring),
                scale: 0.5,
                shift: 0.1,
            },
        ] {
            let direct = dec.mean(&z).unwrap();
            let tape = Tape::new();
            let zv = tape.constant(Tensor::new(vec![1, 2], z.to_vec()).unwrap());
            let taped = dec.eval_taped(&tape, zv).unwrap().0.value();
            assert_eq!(taped.len(), direct.len());
            for (a, b) in taped.data().iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12, "{dec:?}");
            }
        }
    }

    #[test]
    fn plane_is_flat_and_deterministic() {
        let (a, dec) = synth_manifold(ManifoldKind::Plane, 50, 0.0, 3).unwrap();
        let (b, _) = synth_manifold(ManifoldKind::Plane, 50, 0.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(curvature_fd(&dec, &[0.2, 0.1], 1e-3, FdScheme::OneSided).unwrap(), 0.0);
    }

    #[test]
    fn paraboloid_rim_curves_more_than_origin() {
        let (_, dec) = synth_manifold(ManifoldKind::Paraboloid, 10, 0.0, 1).unwrap();
        let origin = curvature_fd(&dec, &[0.0, 0.0], 1e-3, FdScheme::OneSided).unwrap();
        let rim = curvature_fd(&dec, &[0.9, 0.0], 1e-3, FdScheme::OneSided).unwrap();
        assert!(rim > origin);
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!("torus".parse::<ManifoldKind>(), Err(Error::Contract(_))));
    }

    #[test]
    fn toy_counts() {
        let spec = ToySpec {
            per_class: [30, 3],
            ..ToySpec::default()
        };
        let (ds, lat) = toy_images(&spec, Split::Test, 0).unwrap();
        assert_eq!(ds.class_counts()[&1], 3);
        assert_eq!(lat.shape(), &[33, 2]);
        assert_eq!(ds.labels[..6], [0, 1, 0, 1, 0, 1]);
    }
}
