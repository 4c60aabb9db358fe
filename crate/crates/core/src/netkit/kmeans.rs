use diffcore::Tensor;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct KMeans {
    /// `[k, d]`
    pub centers: Tensor,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment pass.
    pub objective: Vec<f64>,
}

impl KMeans {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.rows()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest center, lowest index on ties.
pub(crate) fn nearest(point: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centers.rows() {
        let d = sq_dist(point, centers.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// A cluster that loses all its members is re-seeded at the point currently
/// farthest from its own center, which can only lower the objective.
pub fn kmeans(points: &Tensor, k: usize, max_iter: usize, rng: &mut Rng) -> Result<KMeans> {
    let n = points.rows();
    let d = points.cols();
    if k == 0 || n < k {
        return Err(Error::Contract(format!("kmeans needs 1 <= k <= N, got k={k}, N={n}")));
    }

    let mut centers = vec![0.0; k * d];
    let first = rng.random_range(0..n);
    centers[..d].copy_from_slice(points.row(first));
    let mut best_d: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = best_d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best_d.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers[c * d..(c + 1) * d].copy_from_slice(points.row(pick));
        for (i, bd) in best_d.iter_mut().enumerate() {
            *bd = bd.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    let mut centers = Tensor::new(vec![k, d], centers)?;

    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (a, dist) = nearest(points.row(i), &centers);
            changed |= assignments[i] != a;
            assignments[i] = a;
            dists[i] = dist;
        }
        objective.push(dists.iter().sum());
        if !changed {
            break;
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignments[i];
            counts[a] += 1;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let data = centers.data_mut();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    data[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 1");
                data[c * d..(c + 1) * d].copy_from_slice(points.row(far));
                dists[far] = 0.0;
            }
        }
    }
    // Final pass so assignments agree with the returned centers.
    let mut total = 0.0;
    for (i, a) in assignments.iter_mut().enumerate() {
        let (best, dist) = nearest(points.row(i), &centers);
        *a = best;
        total += dist;
    }
    if objective.last() != Some(&total) {
        objective.push(total);
    }
    Ok(KMeans {
        centers,
        assignments,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn identical_points_single_center() {
        let pts = Tensor::new(vec![5, 2], [0.3, -1.0].repeat(5)).unwrap();
        let km = kmeans(&pts, 1, 50, &mut stream(1, Stream::Init, 0)).unwrap();
        assert_eq!(km.centers.data(), &[0.3, -1.0]);
    }

    #[test]
    fn two_pairs_give_pair_means() {
        let pts = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]).unwrap();
        let km = kmeans(&pts, 2, 50, &mut stream(2, Stream::Init, 0)).unwrap();
        let mut cs: Vec<Vec<f64>> = (0..2).map(|i| km.centers.row(i).to_vec()).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
    }

    #[test]
    fn too_few_points() {
        let pts = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            kmeans(&pts, 3, 10, &mut stream(0, Stream::Init, 0)),
            Err(Error::Contract(_))
        ));
    }
}
