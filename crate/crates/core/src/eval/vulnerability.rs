//! Data-space curvature proxy from local covariance spectra.

use diffcore::linalg::symmetric_eigen;
use diffcore::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netkit::sq_dist;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityReport {
    pub proxy: Vec<f64>,
    pub mean_vulnerable: Option<f64>,
    pub mean_invulnerable: Option<f64>,
    /// Point-biserial correlation; `None` when either variable is constant.
    pub correlation: Option<f64>,
}

/// For each row: the share of the local covariance spectrum (over the `k`
/// nearest rows, itself included) lying beyond the top `p` eigenvalues.
///
/// The spectrum comes from the `k x k` Gram matrix of the centered
/// neighborhood, which has the same nonzero eigenvalues as the covariance.
pub fn curvature_proxy(x: &Tensor, k: usize, p: usize) -> Result<Vec<f64>> {
    let n = x.rows();
    if k > n || k < 2 {
        return Err(Error::Contract(format!("need 2 <= k <= {n} neighbors, got {k}")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n).map(|j| (sq_dist(x.row(i), x.row(j)), j)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nb: Vec<usize> = d[..k].iter().map(|&(_, j)| j).collect();
            let f = x.cols();
            let mut mean = vec![0.0; f];
            for &j in &nb {
                for (m, v) in mean.iter_mut().zip(x.row(j)) {
                    *m += v / k as f64;
                }
            }
            let centered: Vec<Vec<f64>> = nb
                .iter()
                .map(|&j| x.row(j).iter().zip(&mean).map(|(v, m)| v - m).collect())
                .collect();
            let mut gram = vec![0.0; k * k];
            for a in 0..k {
                for b in a..k {
                    let g: f64 = centered[a].iter().zip(&centered[b]).map(|(u, v)| u * v).sum();
                    gram[a * k + b] = g;
                    gram[b * k + a] = g;
                }
            }
            let mut eig: Vec<f64> = symmetric_eigen(&gram, k).values.into_iter().map(|l| l.max(0.0)).collect();
            eig.reverse();
            let total: f64 = eig.iter().sum();
            if total <= 0.0 {
                return Ok(0.0);
            }
            let rest: f64 = eig.iter().skip(p).sum();
            Ok((rest / total).clamp(0.0, 1.0))
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Average ranks, ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

pub fn curvature_vulnerability_report(x: &Tensor, vulnerable: &[bool], k: usize, p: usize) -> Result<VulnerabilityReport> {
    if vulnerable.len() != x.rows() {
        return Err(Error::Contract(format!("{} flags for {} samples", vulnerable.len(), x.rows())));
    }
    let proxy = curvature_proxy(x, k, p)?;
    let group = |want: bool| {
        let v: Vec<f64> = proxy.iter().zip(vulnerable).filter(|(_, &f)| f == want).map(|(p, _)| *p).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let flags: Vec<f64> = vulnerable.iter().map(|&f| f64::from(u8::from(f))).collect();
    Ok(VulnerabilityReport {
        mean_vulnerable: group(true),
        mean_invulnerable: group(false),
        correlation: pearson(&proxy, &flags),
        proxy,
    })
}
