//! Empirical loss sensitivity to small latent perturbations.

use diffcore::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vulnerability::spearman;
use crate::error::{Error, Result};
use crate::geometry::Decoder;
use crate::rng::{normals, stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub z: Vec<f64>,
    pub curvature: f64,
    pub mean_delta_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub eps: f64,
    pub points: Vec<ProbePoint>,
    pub rank_correlation: Option<f64>,
    /// Why the correlation is missing, if it is.
    pub note: Option<String>,
}

/// For each latent, average `|L(mu(z + eps u)) - L(mu(z))|` over `trials`
/// random unit directions `u`, then rank-correlate with `curvature(z)`.
pub fn loss_sensitivity_probe<D, K, L>(
    dec: &D,
    curvature: K,
    loss: L,
    latents: &Tensor,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<ProbeReport>
where
    D: Decoder,
    K: Fn(&[f64]) -> Result<f64> + Sync,
    L: Fn(&[f64]) -> Result<f64> + Sync,
{
    if latents.cols() != dec.latent_dim() || trials == 0 || !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "probe needs [N, {}] latents, trials >= 1 and eps > 0",
            dec.latent_dim()
        )));
    }
    let d = latents.cols();
    let points = (0..latents.rows())
        .into_par_iter()
        .map(|i| {
            let z = latents.row(i);
            let base = loss(&dec.mean(z)?)?;
            let mut rng = stream(seed, Stream::Probe, i as u64);
            let mut total = 0.0;
            for _ in 0..trials {
                let mut u = normals(&mut rng, d);
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for (ui, zi) in u.iter_mut().zip(z) {
                    *ui = zi + eps * *ui / norm;
                }
                total += (loss(&dec.mean(&u)?)? - base).abs();
            }
            Ok(ProbePoint {
                z: z.to_vec(),
                curvature: curvature(z)?,
                mean_delta_loss: total / trials as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k: Vec<f64> = points.iter().map(|p| p.curvature).collect();
    let dl: Vec<f64> = points.iter().map(|p| p.mean_delta_loss).collect();
    let flat = k.windows(2).all(|w| w[0] == w[1]);
    let rank_correlation = if flat { None } else { spearman(&k, &dl) };
    let note = if flat {
        Some("degenerate: zero-variance curvature".to_string())
    } else if rank_correlation.is_none() {
        Some("degenerate: zero-variance loss change".to_string())
    } else {
        None
    };
    Ok(ProbeReport {
        eps,
        points,
        rank_correlation,
        note,
    })
}
