use diffcore::Tensor;

use crate::error::{Error, Result};

/// Natural cubic spline through `knots` uniformly spaced values on [0, 1],
/// sampled at `samples` uniform parameters.
///
/// The interpolant is linear in the knot values, so sampling is a single
/// `[samples, knots]` matrix product.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalSpline {
    basis: Tensor,
}

impl NaturalSpline {
    pub fn new(knots: usize, samples: usize) -> Result<Self> {
        if knots < 2 || samples < 2 {
            return Err(Error::Contract(format!(
                "spline needs at least 2 knots and 2 samples, got {knots} and {samples}"
            )));
        }
        let mut basis = vec![0.0; samples * knots];
        for k in 0..knots {
            let mut y = vec![0.0; knots];
            y[k] = 1.0;
            let m = second_derivatives(&y);
            for i in 0..samples {
                basis[i * knots + k] = eval(&y, &m, i as f64 / (samples - 1) as f64);
            }
        }
        // Pin the ends exactly.
        for k in 0..knots {
            basis[k] = if k == 0 { 1.0 } else { 0.0 };
            basis[(samples - 1) * knots + k] = if k == knots - 1 { 1.0 } else { 0.0 };
        }
        Ok(NaturalSpline {
            basis: Tensor::new(vec![samples, knots], basis)?,
        })
    }

    pub fn knots(&self) -> usize {
        self.basis.cols()
    }

    pub fn samples(&self) -> usize {
        self.basis.rows()
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    /// Columns of the basis for the interior knots, `[samples, knots - 2]`.
    pub fn interior_basis(&self) -> Tensor {
        self.columns(1..self.knots() - 1)
    }

    /// Columns for the two end knots, `[samples, 2]`.
    pub fn end_basis(&self) -> Tensor {
        let last = self.knots() - 1;
        let rows: Vec<Vec<f64>> = (0..self.samples())
            .map(|i| vec![self.basis.get(i, 0), self.basis.get(i, last)])
            .collect();
        Tensor::from_rows(&rows).expect("rectangular")
    }

    fn columns(&self, cols: std::ops::Range<usize>) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..self.samples())
            .map(|i| cols.clone().map(|c| self.basis.get(i, c)).collect())
            .collect();
        if cols.is_empty() {
            return Tensor::zeros(&[self.samples(), 0]);
        }
        Tensor::from_rows(&rows).expect("rectangular")
    }

    /// Sample the spline through the rows of `values` (`[knots, d]`).
    pub fn evaluate(&self, values: &Tensor) -> Result<Tensor> {
        Ok(self.basis.matmul(values)?)
    }
}

/// Second derivatives at the knots with zero end conditions (Thomas
/// algorithm on the uniform-spacing system).
fn second_derivatives(y: &[f64]) -> Vec<f64> {
    let p = y.len();
    let mut m = vec![0.0; p];
    if p < 3 {
        return m;
    }
    let h = 1.0 / (p - 1) as f64;
    let n = p - 2;
    let rhs: Vec<f64> = (1..p - 1).map(|j| 6.0 * (y[j + 1] - 2.0 * y[j] + y[j - 1]) / (h * h)).collect();
    // tridiagonal [1, 4, 1]
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = 1.0 / 4.0;
    d[0] = rhs[0] / 4.0;
    for i in 1..n {
        let denom = 4.0 - c[i - 1];
        c[i] = 1.0 / denom;
        d[i] = (rhs[i] - d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    m[1..p - 1].copy_from_slice(&x);
    m
}

fn eval(y: &[f64], m: &[f64], t: f64) -> f64 {
    let p = y.len();
    let h = 1.0 / (p - 1) as f64;
    let j = ((t / h).floor() as usize).min(p - 2);
    let (t0, t1) = (j as f64 * h, (j + 1) as f64 * h);
    let (a, b) = (t1 - t, t - t0);
    m[j] * a * a * a / (6.0 * h)
        + m[j + 1] * b * b * b / (6.0 * h)
        + (y[j] - m[j] * h * h / 6.0) * a / h
        + (y[j + 1] - m[j + 1] * h * h / 6.0) * b / h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_lines_and_interpolates_knots() {
        let s = NaturalSpline::new(6, 11).unwrap();
        let vals = Tensor::new(vec![6, 1], (0..6).map(|k| 2.0 + 3.0 * k as f64 / 5.0).collect()).unwrap();
        let out = s.evaluate(&vals).unwrap();
        for i in 0..11 {
            assert!((out.data()[i] - (2.0 + 3.0 * i as f64 / 10.0)).abs() < 1e-12);
        }
        // knot k sits at sample 2k
        let bumpy = Tensor::new(vec![6, 1], vec![0.0, 1.0, -1.0, 2.0, 0.5, 0.0]).unwrap();
        let out = s.evaluate(&bumpy).unwrap();
        for k in 0..6 {
            assert!((out.data()[2 * k] - bumpy.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let s = NaturalSpline::new(6, 20).unwrap();
        for i in 0..20 {
            let sum: f64 = s.basis().row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.interior_basis().shape(), &[20, 4]);
        assert_eq!(s.end_basis().row(19), &[0.0, 1.0]);
    }
}
