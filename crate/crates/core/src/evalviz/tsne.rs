//! Exact t-SNE for small point sets.
//!
//! O(n²) per iteration, which is fine for the few hundred sentences a K-shot
//! test split holds. Everything runs sequentially so the output depends only
//! on the input and the seed.

use rand::Rng as _;

use super::{EvalError, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self { perplexity: 5.0, iterations: 1000, learning_rate: 200.0, early_exaggeration: 12.0, exaggeration_iterations: 250 }
    }
}

pub const MIN_POINTS: usize = 5;

/// 2-D embedding of `points`, one output per input in the same order.
pub fn project_2d(points: &[Vec<f64>], seed: u64, perplexity: f64) -> Result<Vec<[f64; 2]>> {
    project_2d_with(points, seed, &TsneOptions { perplexity, ..TsneOptions::default() })
}

pub fn project_2d_with(points: &[Vec<f64>], seed: u64, opts: &TsneOptions) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < MIN_POINTS {
        return Err(EvalError::TooFewPoints { n, min: MIN_POINTS });
    }
    let limit = (n as f64 - 1.0) / 3.0;
    if !(opts.perplexity > 0.0 && opts.perplexity < limit) {
        return Err(EvalError::BadPerplexity { perplexity: opts.perplexity, limit });
    }
    let p = joint_probabilities(points, opts.perplexity);

    let mut rng = seeds::named_rng(seed, "tsne");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-1e-4..1e-4), rng.gen_range(-1e-4..1e-4)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut q_num = vec![0.0; n * n];
    for iter in 0..opts.iterations {
        let exaggeration = if iter < opts.exaggeration_iterations { opts.early_exaggeration } else { 1.0 };
        let momentum = if iter < opts.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d0 = y[i][0] - y[j][0];
                    let d1 = y[i][1] - y[j][1];
                    let q = 1.0 / (1.0 + d0 * d0 + d1 * d1);
                    q_num[i * n + j] = q;
                    z += q;
                }
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = q_num[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - q / z) * q;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let same_sign = (grad[d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign { (gains[i][d] * 0.8_f64).max(0.01) } else { gains[i][d] + 0.2 };
                velocity[i][d] = momentum * velocity[i][d] - opts.learning_rate * gains[i][d] * grad[d];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0], m[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
    }
    Ok(y)
}

/// Symmetrised input affinities, row-major `n × n`.
fn joint_probabilities(points: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = points.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0_f64, f64::INFINITY, 1.0_f64);
        let mut cond = vec![0.0; n];
        for _ in 0..200 {
            let min = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                cond[j] = if j == i { 0.0 } else { (-(row[j] - min) * beta).exp() };
                sum += cond[j];
            }
            let mut entropy = 0.0;
            for j in 0..n {
                cond[j] /= sum;
                if cond[j] > 0.0 {
                    entropy -= cond[j] * cond[j].ln();
                }
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&cond);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeds::rng(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn deterministic_and_order_preserving() {
        let pts = random_points(10, 6, 1);
        let a = project_2d(&pts, 9, 2.0).unwrap();
        let b = project_2d(&pts, 9, 2.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let mut rng = seeds::rng(42);
        let mut gauss = || {
            let (u, v): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen_range(0.0..1.0));
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        };
        let pts: Vec<Vec<f64>> =
            (0..20).map(|i| (0..8).map(|_| if i < 10 { 3.0 } else { -3.0 } + gauss()).collect()).collect();
        let y = project_2d(&pts, 0, 5.0).unwrap();
        let centroid = |r: std::ops::Range<usize>| {
            let k = r.len() as f64;
            r.fold([0.0; 2], |c, i| [c[0] + y[i][0] / k, c[1] + y[i][1] / k])
        };
        let (a, b) = (centroid(0..10), centroid(10..20));
        let d = |p: [f64; 2], c: [f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        let agree = (0..20).filter(|&i| (d(y[i], a) < d(y[i], b)) == (i < 10)).count();
        assert!(agree >= 18, "{agree}/20");
    }

    #[test]
    fn argument_checks() {
        assert!(matches!(project_2d(&random_points(3, 2, 0), 0, 0.5), Err(EvalError::TooFewPoints { n: 3, .. })));
        assert!(matches!(project_2d(&random_points(10, 2, 0), 0, 3.0), Err(EvalError::BadPerplexity { .. })));
        assert!(matches!(project_2d(&random_points(10, 2, 0), 0, 0.0), Err(EvalError::BadPerplexity { .. })));
    }
}
