//! Feature-space Fréchet distance and the prediction-entropy diversity score.

use diffcore::linalg::symmetric_eigen;
use diffcore::Tensor;

use crate::error::{Error, Result};

/// Column means and the unbiased covariance of the rows of `x`.
pub fn mean_cov(x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, f) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Contract(format!("covariance needs at least 2 samples, got {n}")));
    }
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered = Tensor::new(
        vec![n, f],
        (0..n * f).map(|k| x.data()[k] - mean[k % f]).collect(),
    )?;
    let cov = centered.transpose()?.matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    Ok((mean, cov))
}

/// Symmetric square root with eigenvalues floored at zero.
fn sqrt_psd(m: &Tensor) -> Result<Tensor> {
    let n = m.rows();
    let e = symmetric_eigen(m.data(), n);
    let mut out = vec![0.0; n * n];
    for (k, &l) in e.values.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += s * e.vectors[i * n + k] * e.vectors[j * n + k];
            }
        }
    }
    Ok(Tensor::new(vec![n, n], out)?)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` between Gaussians
/// fitted to the rows of `a` and `b`.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Contract(format!("feature widths differ: {} vs {}", a.cols(), b.cols())));
    }
    let (ma, sa) = mean_cov(a)?;
    let (mb, sb) = mean_cov(b)?;
    let f = a.cols();
    let root_a = sqrt_psd(&sa)?;
    let inner = root_a.matmul(&sb)?.matmul(&root_a)?;
    let tr_cross: f64 = symmetric_eigen(inner.data(), f).values.iter().map(|l| l.max(0.0).sqrt()).sum();
    let trace = |m: &Tensor| (0..f).map(|i| m.data()[i * f + i]).sum::<f64>();
    let dm: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((dm + trace(&sa) + trace(&sb) - 2.0 * tr_cross).max(0.0))
}

/// `exp(mean_x KL(p(y|x) || p(y)))` over probability rows.
pub fn diversity_from_probabilities(p: &Tensor) -> Result<f64> {
    let (n, c) = (p.rows(), p.cols());
    if n == 0 {
        return Err(Error::Contract("diversity of an empty set".into()));
    }
    let mut marginal = vec![0.0; c];
    for i in 0..n {
        for (m, v) in marginal.iter_mut().zip(p.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for (pv, m) in p.row(i).iter().zip(&marginal) {
            if *pv > 0.0 {
                kl += pv * (pv / m).ln();
            }
        }
    }
    Ok((kl / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, stream, Stream};

    fn sample(seed: u64, n: usize, f: usize, shift: f64) -> Tensor {
        let mut rng = stream(seed, Stream::Init, 3);
        Tensor::new(vec![n, f], normals(&mut rng, n * f).iter().map(|v| v + shift).collect()).unwrap()
    }

    #[test]
    fn identical_sets_are_at_zero() {
        let a = sample(1, 50, 4, 0.0);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = sample(1, 10_000, 1, 0.0);
        let b = sample(2, 10_000, 1, 3.0);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 9.0).abs() < 0.3, "{d}");
    }

    #[test]
    fn symmetric() {
        let a = sample(1, 40, 3, 0.0);
        let b = sample(2, 60, 3, 0.5);
        let (x, y) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((x - y).abs() < 1e-8);
    }

    #[test]
    fn diversity_extremes() {
        let uniform = Tensor::full(&[6, 3], 1.0 / 3.0);
        assert!((diversity_from_probabilities(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let onehot = Tensor::new(vec![6, 3], (0..18).map(|k| if k % 3 == (k / 3) % 3 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!((diversity_from_probabilities(&onehot).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_matches_loop_oracle() {
        let mut rng = stream(4, Stream::Init, 0);
        let raw: Vec<f64> = normals(&mut rng, 40).iter().map(|v| v.exp()).collect();
        let rows: Vec<Vec<f64>> = raw
            .chunks(4)
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let mut pbar = [0.0; 4];
        for r in &rows {
            for j in 0..4 {
                pbar[j] += r[j] / 10.0;
            }
        }
        let mut total = 0.0;
        for r in &rows {
            for j in 0..4 {
                total += r[j] * (r[j].ln() - pbar[j].ln());
            }
        }
        let want = (total / 10.0).exp();
        let got = diversity_from_probabilities(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-9);
    }
}
