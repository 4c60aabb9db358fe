//! Pullback metric, eigenvalue-rate curvature, curve energy and geodesics.

mod geodesic;
mod spline;

pub use geodesic::{curve_energy, geodesic, geodesic_length, geodesics, GeodesicOptions, GeodesicPath};
pub use spline::NaturalSpline;

use diffcore::linalg::symmetric_eigen;
use diffcore::{DiffError, Dual, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// A generative map `z -> (mu(z), sigma(z))`.
///
/// `sigma` may be empty, meaning a constant standard deviation that adds
/// nothing to the metric or to curve energy.
pub trait Decoder: Sync {
    fn latent_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn eval<S: Scalar>(&self, z: &[S]) -> Result<(Vec<S>, Vec<S>)>;

    /// Batched decode of `[B, d]` on a tape.
    fn eval_taped<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)>;

    fn mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(z)?.0)
    }
}

pub(crate) fn to_diff(e: Error) -> DiffError {
    match e {
        Error::Diff(d) => d,
        other => DiffError::Contract(other.to_string()),
    }
}

/// `[M_mu + M_sigma, d]` Jacobian of the stacked decoder outputs.
pub fn decoder_jacobian<D: Decoder>(dec: &D, z: &[f64]) -> Result<Tensor> {
    if z.len() != dec.latent_dim() {
        return Err(DiffError::Dimension {
            op: "decoder_jacobian",
            lhs: vec![z.len()],
            rhs: vec![dec.latent_dim()],
        }
        .into());
    }
    let jac = diffcore::jacobian(
        |v: &[Dual]| {
            let (mut m, s) = dec.eval(v).map_err(to_diff)?;
            m.extend(s);
            Ok(m)
        },
        z,
    )?;
    Ok(jac)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTensor {
    pub point: Vec<f64>,
    /// `[d, d]`, symmetric.
    pub g: Tensor,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
}

impl MetricTensor {
    pub fn from_matrix(point: &[f64], g: Tensor) -> Result<Self> {
        let d = point.len();
        if g.shape() != [d, d] {
            return Err(DiffError::Dimension {
                op: "metric",
                lhs: g.shape().to_vec(),
                rhs: vec![d, d],
            }
            .into());
        }
        if !g.is_finite() {
            return Err(Error::geometry(point, "non-finite metric entries"));
        }
        let mut sym = g.into_data();
        for i in 0..d {
            for j in (i + 1)..d {
                let avg = 0.5 * (sym[i * d + j] + sym[j * d + i]);
                sym[i * d + j] = avg;
                sym[j * d + i] = avg;
            }
        }
        let eigenvalues = symmetric_eigen(&sym, d).values;
        Ok(MetricTensor {
            point: point.to_vec(),
            g: Tensor::new(vec![d, d], sym)?,
            eigenvalues,
        })
    }

    /// `log det G` from eigenvalues clamped at `floor`.
    pub fn log_det(&self, floor: f64) -> f64 {
        self.eigenvalues.iter().map(|&l| l.max(floor).ln()).sum()
    }

    /// `v^T G v`
    pub fn quad(&self, v: &[f64]) -> f64 {
        let d = v.len();
        let g = self.g.data();
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += v[i] * g[i * d + j] * v[j];
            }
        }
        acc
    }
}

/// `G(z) = J_mu^T J_mu + J_sigma^T J_sigma`.
pub fn pullback_metric<D: Decoder>(dec: &D, z: &[f64]) -> Result<MetricTensor> {
    let jac = decoder_jacobian(dec, z)?;
    if !jac.is_finite() {
        return Err(Error::geometry(z, "non-finite Jacobian entries"));
    }
    let g = jac.transpose()?.matmul(&jac)?;
    MetricTensor::from_matrix(z, g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdScheme {
    #[default]
    OneSided,
    Central,
}

/// Frobenius norm of the `d x d` matrix of eigenvalue change rates, one row
/// per coordinate direction. Eigenvalues are paired by sorted order.
pub fn curvature_fd<D: Decoder>(dec: &D, z: &[f64], eps: f64, scheme: FdScheme) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let base = match scheme {
        FdScheme::OneSided => Some(pullback_metric(dec, z)?.eigenvalues),
        FdScheme::Central => None,
    };
    let mut acc = 0.0;
    let mut zp = z.to_vec();
    for j in 0..z.len() {
        zp[j] = z[j] + eps;
        let up = pullback_metric(dec, &zp)?.eigenvalues;
        let rates: Vec<f64> = match &base {
            Some(b) => up.iter().zip(b).map(|(u, l)| (u - l) / eps).collect(),
            None => {
                zp[j] = z[j] - eps;
                let down = pullback_metric(dec, &zp)?.eigenvalues;
                up.iter().zip(&down).map(|(u, l)| (u - l) / (2.0 * eps)).collect()
            }
        };
        zp[j] = z[j];
        acc += rates.iter().map(|r| r * r).sum::<f64>();
    }
    let k = acc.sqrt();
    if !k.is_finite() {
        return Err(Error::geometry(z, "non-finite curvature"));
    }
    Ok(k)
}
