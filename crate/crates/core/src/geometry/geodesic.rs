use diffcore::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::{pullback_metric, Decoder, NaturalSpline};
use crate::error::{Error, Result};
use crate::netkit::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicOptions {
    /// Discretized points along the path, endpoints included.
    pub samples: usize,
    /// Interior spline knots.
    pub controls: usize,
    pub lr: f64,
    pub max_iter: usize,
    /// Stop once the relative energy improvement falls below this.
    pub tol: f64,
}

impl Default for GeodesicOptions {
    fn default() -> Self {
        GeodesicOptions {
            samples: 20,
            controls: 4,
            lr: 1e-2,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicPath {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// `[controls, d]`
    pub controls: Tensor,
    /// `[samples, d]`, first row `start`, last row `end`.
    pub samples: Tensor,
    pub energy: f64,
    /// Energy of the straight segment the optimizer started from.
    pub initial_energy: f64,
    pub iterations: usize,
    /// Estimated curvature per sample; empty until filled by the obfuscator.
    pub curvature: Vec<f64>,
}

/// `1/2 sum_i |mu(z_{i+1}) - mu(z_i)|^2 + |sigma(z_{i+1}) - sigma(z_i)|^2`
pub fn curve_energy<D: Decoder>(dec: &D, samples: &Tensor) -> Result<f64> {
    if samples.rows() < 2 || samples.cols() != dec.latent_dim() {
        return Err(Error::Contract(format!(
            "curve energy needs [n >= 2, {}] samples, got {:?}",
            dec.latent_dim(),
            samples.shape()
        )));
    }
    let outputs = (0..samples.rows())
        .map(|i| dec.eval(samples.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut energy = 0.0;
    for w in outputs.windows(2) {
        let (m0, s0) = &w[0];
        let (m1, s1) = &w[1];
        energy += m0.iter().zip(m1).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
        energy += s0.iter().zip(s1).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
    }
    Ok(0.5 * energy)
}

/// `sum_i sqrt(dz_i^T G(midpoint_i) dz_i)`
pub fn geodesic_length<D: Decoder>(dec: &D, samples: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..samples.rows().saturating_sub(1) {
        let (a, b) = (samples.row(i), samples.row(i + 1));
        let dz: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        let metric = pullback_metric(dec, &mid)?;
        total += metric.quad(&dz).max(0.0).sqrt();
    }
    Ok(total)
}

pub fn geodesic<D: Decoder>(dec: &D, start: &[f64], end: &[f64], opts: &GeodesicOptions) -> Result<GeodesicPath> {
    let mut out = geodesics(dec, &[(start.to_vec(), end.to_vec())], opts)?;
    Ok(out.pop().expect("one path"))
}

/// Optimize many independent paths together.
///
/// All paths share one tape per iteration. Adam acts elementwise, so each path
/// follows the same trajectory it would alone; a path that has converged is
/// pinned at its best iterate while the rest continue.
pub fn geodesics<D: Decoder>(dec: &D, pairs: &[(Vec<f64>, Vec<f64>)], opts: &GeodesicOptions) -> Result<Vec<GeodesicPath>> {
    let d = dec.latent_dim();
    let n = opts.samples;
    let c = opts.controls;
    let b = pairs.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    for (s, e) in pairs {
        if s.len() != d || e.len() != d {
            return Err(diffcore::DiffError::Dimension {
                op: "geodesic",
                lhs: vec![s.len(), e.len()],
                rhs: vec![d, d],
            }
            .into());
        }
    }
    let spline = NaturalSpline::new(c + 2, n)?;
    let width = b * d;

    let mut ends = vec![0.0; 2 * width];
    for (p, (s, e)) in pairs.iter().enumerate() {
        ends[p * d..(p + 1) * d].copy_from_slice(s);
        ends[width + p * d..width + (p + 1) * d].copy_from_slice(e);
    }
    let fixed = spline.end_basis().matmul(&Tensor::new(vec![2, width], ends)?)?;
    let interior = spline.interior_basis();

    let mut ctrl = vec![0.0; c * width];
    for (p, (s, e)) in pairs.iter().enumerate() {
        for k in 0..c {
            let t = (k + 1) as f64 / (c + 1) as f64;
            for j in 0..d {
                ctrl[k * width + p * d + j] = s[j] + t * (e[j] - s[j]);
            }
        }
    }
    let mut ctrl = Tensor::new(vec![c, width], ctrl)?;

    let mut diff = vec![0.0; (n - 1) * n];
    for i in 0..n - 1 {
        diff[i * n + i] = -1.0;
        diff[i * n + i + 1] = 1.0;
    }
    let diff = Tensor::new(vec![n - 1, n], diff)?;

    let mut best_energy = vec![f64::INFINITY; b];
    let mut best_ctrl = ctrl.clone();
    let mut prev = vec![f64::INFINITY; b];
    let mut done: Vec<bool> = pairs.iter().map(|(s, e)| s == e).collect();
    let mut iterations = vec![0usize; b];
    let mut adam = Adam::new(opts.lr);

    for iter in 0..=opts.max_iter {
        if c == 0 || done.iter().all(|&x| x) {
            break;
        }
        let tape = Tape::new();
        let cv = tape.leaf(ctrl.clone());
        let z = tape
            .constant(interior.clone())
            .matmul(cv)?
            .add(tape.constant(fixed.clone()))?
            .reshape(&[n * b, d])?;
        let (mu, sigma) = dec.eval_taped(&tape, z)?;
        let dmat = tape.constant(diff.clone());
        let mut per_path = vec![0.0; b];
        let mut terms = Vec::with_capacity(2);
        for out in std::iter::once(mu).chain(sigma) {
            let m = out.shape()[1];
            let sq = dmat.matmul(out.reshape(&[n, b * m])?)?.square();
            for (idx, v) in sq.value().data().iter().enumerate() {
                per_path[(idx % (b * m)) / m] += 0.5 * v;
            }
            terms.push(sq.sum().scale(0.5));
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = total.add(*t)?;
        }

        for p in 0..b {
            if done[p] {
                continue;
            }
            let e = per_path[p];
            if !e.is_finite() {
                return Err(Error::geometry(&pairs[p].0, format!("geodesic energy diverged at iteration {iter}")));
            }
            if e < best_energy[p] {
                best_energy[p] = e;
                for k in 0..c {
                    for j in 0..d {
                        let at = k * width + p * d + j;
                        best_ctrl.data_mut()[at] = ctrl.data()[at];
                    }
                }
            }
            if e == 0.0 || (prev[p].is_finite() && (prev[p] - e).abs() <= opts.tol * prev[p]) {
                done[p] = true;
            }
            prev[p] = e;
            iterations[p] = iter;
        }
        if iter == opts.max_iter || done.iter().all(|&x| x) {
            break;
        }

        let grads = tape.backward(total)?;
        adam.step(vec![("controls".into(), &mut ctrl)], &[grads.wrt(cv)])?;
        for p in 0..b {
            if done[p] {
                for k in 0..c {
                    for j in 0..d {
                        let at = k * width + p * d + j;
                        ctrl.data_mut()[at] = best_ctrl.data()[at];
                    }
                }
            }
        }
    }

    let all_samples = interior.matmul(&best_ctrl)?.add(&fixed)?;
    let mut paths = Vec::with_capacity(b);
    for (p, (s, e)) in pairs.iter().enumerate() {
        let mut samples = vec![0.0; n * d];
        for i in 0..n {
            samples[i * d..(i + 1) * d].copy_from_slice(&all_samples.row(i)[p * d..(p + 1) * d]);
        }
        let samples = Tensor::new(vec![n, d], samples)?;
        let mut controls = vec![0.0; c * d];
        for k in 0..c {
            controls[k * d..(k + 1) * d].copy_from_slice(&best_ctrl.row(k)[p * d..(p + 1) * d]);
        }
        let (samples, energy, initial_energy) = if s == e {
            (Tensor::new(vec![n, d], s.repeat(n))?, 0.0, 0.0)
        } else {
            let straight = straight_samples(s, e, n)?;
            let initial = curve_energy(dec, &straight)?;
            let optimized = curve_energy(dec, &samples)?;
            // The batched and per-point evaluations can disagree in the last
            // bits; never hand back a path worse than the straight segment.
            if optimized > initial {
                (straight, initial, initial)
            } else {
                (samples, optimized, initial)
            }
        };
        paths.push(GeodesicPath {
            start: s.clone(),
            end: e.clone(),
            controls: Tensor::new(vec![c, d], controls)?,
            samples,
            energy,
            initial_energy,
            iterations: iterations[p],
            curvature: Vec::new(),
        });
    }
    Ok(paths)
}

fn straight_samples(s: &[f64], e: &[f64], n: usize) -> Result<Tensor> {
    let d = s.len();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        for j in 0..d {
            out[i * d + j] = s[j] + t * (e[j] - s[j]);
        }
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::AnalyticDecoder;

    #[test]
    fn equal_segment_closed_form() {
        let dec = AnalyticDecoder::Identity { dim: 2 };
        let s = straight_samples(&[0.0, 0.0], &[3.0, 4.0], 6).unwrap();
        let e = curve_energy(&dec, &s).unwrap();
        assert!((e - 25.0 / 10.0).abs() < 1e-12);
        assert!((geodesic_length(&dec, &s).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_path() {
        let dec = AnalyticDecoder::Paraboloid { a: 1.0 };
        let p = geodesic(&dec, &[0.4, 0.1], &[0.4, 0.1], &GeodesicOptions::default()).unwrap();
        assert_eq!(p.energy, 0.0);
        assert_eq!(geodesic_length(&dec, &p.samples).unwrap(), 0.0);
        for i in 0..p.samples.rows() {
            assert_eq!(p.samples.row(i), &[0.4, 0.1]);
        }
    }

    #[test]
    fn paraboloid_path_beats_straight_segment() {
        let dec = AnalyticDecoder::Paraboloid { a: 1.0 };
        let p = geodesic(&dec, &[-1.0, 0.0], &[1.0, 0.0], &GeodesicOptions::default()).unwrap();
        assert!(p.energy < p.initial_energy - 1e-6, "{} vs {}", p.energy, p.initial_energy);
        assert_eq!(p.samples.row(0), &[-1.0, 0.0]);
        assert_eq!(p.samples.row(19), &[1.0, 0.0]);
    }
}
