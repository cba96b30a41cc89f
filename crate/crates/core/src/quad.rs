//! Gauss-Hermite quadrature for expectations against the standard normal law.
//!
//! Nodes and weights come from the Golub-Welsch eigendecomposition of the
//! Jacobi matrix and are stored pre-transformed so that
//! `E[phi(xi)] ~= sum_i w_i phi(x_i)` for `xi ~ N(0, 1)`, with `sum w_i = 1`.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(points: usize) -> Result<Self> {
        if points == 0 || points > 64 {
            return Err(Error::Input(format!(
                "Gauss-Hermite rule needs 1..=64 points, got {points}"
            )));
        }
        if points == 1 {
            return Ok(Self { nodes: vec![0.0], weights: vec![1.0] });
        }
        let mut jacobi = DMatrix::zeros(points, points);
        for k in 1..points {
            let beta = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = beta;
            jacobi[(k, k - 1)] = beta;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..points)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                // physicists' node * sqrt(2) maps to the N(0,1) abscissa
                (eig.eigenvalues[i] * std::f64::consts::SQRT_2, v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[phi(xi)]` for scalar standard normal `xi`.
    pub fn expect(&self, mut phi: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * phi(x))
            .sum()
    }

    /// Tensor rule over `dim` independent standard normals: rows of `points`
    /// are the abscissa vectors, `weights` the matching product weights.
    pub fn tensor(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let count = n.pow(dim as u32);
        let mut points = vec![0.0; count * dim];
        let mut weights = vec![0.0; count];
        for idx in 0..count {
            let mut rem = idx;
            let mut w = 1.0;
            for axis in (0..dim).rev() {
                let j = rem % n;
                rem /= n;
                points[idx * dim + axis] = self.nodes[j];
                w *= self.weights[j];
            }
            weights[idx] = w;
        }
        (points, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments_are_exact() {
        let q = GaussHermite::new(8).unwrap();
        // degree-15 polynomial exactness covers all of these
        let cases = [
            (1, 0.0),
            (2, 1.0),
            (3, 0.0),
            (4, 3.0),
            (6, 15.0),
            (8, 105.0),
        ];
        for (pow, expect) in cases {
            let got = q.expect(|x| x.powi(pow));
            assert!((got - expect).abs() < 1e-10, "E[x^{pow}] = {got}, want {expect}");
        }
        assert!((q.weights().iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn smooth_expectation_matches_closed_form() {
        let q = GaussHermite::new(16).unwrap();
        // E[e^x] = e^{1/2}
        let got = q.expect(f64::exp);
        assert!((got - (0.5f64).exp()).abs() < 1e-9, "{got}");
    }

    #[test]
    fn tensor_rule_integrates_cross_moments() {
        let q = GaussHermite::new(5).unwrap();
        let (pts, ws) = q.tensor(2);
        let mut exy = 0.0;
        let mut ex2y2 = 0.0;
        for (i, w) in ws.iter().enumerate() {
            let (x, y) = (pts[2 * i], pts[2 * i + 1]);
            exy += w * x * y;
            ex2y2 += w * x * x * y * y;
        }
        assert!(exy.abs() < 1e-12);
        assert!((ex2y2 - 1.0).abs() < 1e-10);
    }
}
