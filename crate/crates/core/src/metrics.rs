//! Tangent-space diagnostics and evaluation metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DIMENSION_TOL: f64 = 0.1;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

fn gram(j: &Tensor) -> Tensor {
    j.transpose().matmul(j).expect("J^T J is always conformable")
}

/// `||J^T J - I||_F`.
pub fn gram_deviation(jacobian: &Tensor) -> f64 {
    let g = gram(jacobian);
    let n = g.rows();
    let mut sq = 0.0;
    for a in 0..n {
        for b in 0..n {
            let d = g.get(a, b) - if a == b { 1.0 } else { 0.0 };
            sq += d * d;
        }
    }
    sq.sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, unsorted.
pub fn symmetric_eigenvalues(m: &Tensor) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<f64> = m.data().to_vec();
    let at = |a: &Vec<f64>, i: usize, j: usize| a[i * n + j];
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| at(&a, i, j).powi(2))
            .sum();
        let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if off.sqrt() <= JACOBI_TOL * scale.max(1.0) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = at(&a, p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (at(&a, q, q) - at(&a, p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = at(&a, k, p);
                    let akq = at(&a, k, q);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = at(&a, p, k);
                    let aqk = at(&a, q, k);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| at(&a, i, i)).collect()
}

/// Singular values of `J`, descending.
pub fn singular_values(jacobian: &Tensor) -> Vec<f64> {
    let mut s: Vec<f64> = symmetric_eigenvalues(&gram(jacobian)).into_iter().map(|e| e.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of singular values strictly above `tol`.
pub fn local_dimension(jacobian: &Tensor, tol: f64) -> usize {
    singular_values(jacobian).into_iter().filter(|&s| s > tol).count()
}

/// Mean of `| ||p|| - radius |` over the rows of `points`.
pub fn manifold_distance_circle(points: &Tensor, radius: f64) -> Result<f64> {
    if points.rank() != 2 || points.cols() != 2 {
        return Err(Error::invalid(format!("expected 2-D points, got shape {:?}", points.shape())));
    }
    if points.rows() == 0 {
        return Err(Error::invalid("no points"));
    }
    let total: f64 = (0..points.rows())
        .map(|i| {
            let r = points.row(i);
            (r[0].hypot(r[1]) - radius).abs()
        })
        .sum();
    Ok(total / points.rows() as f64)
}

pub fn classification_error(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no labels"));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::orthonormality_penalty;

    #[test]
    fn gram_deviation_examples() {
        assert_eq!(gram_deviation(&Tensor::identity(3)), 0.0);
        let two = Tensor::identity(2).map(|v| 2.0 * v);
        assert!((gram_deviation(&two) - 18f64.sqrt()).abs() < 1e-12);
        let j = Tensor::matrix(3, 2, vec![0.3, -1.2, 0.5, 0.7, 2.0, 0.1]).unwrap();
        assert!((gram_deviation(&j).powi(2) - orthonormality_penalty(&j)).abs() < 1e-12);
    }

    #[test]
    fn local_dimension_examples() {
        assert_eq!(local_dimension(&Tensor::identity(2), 0.1), 2);
        let rank1 = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = singular_values(&rank1);
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-12 && s[1].abs() < 1e-12);
        assert_eq!(local_dimension(&rank1, 0.1), 1);
        assert_eq!(local_dimension(&Tensor::zeros(&[3, 2]), 0.1), 0);
    }

    #[test]
    fn singular_values_of_known_matrix() {
        // diag(3, 2, 0.5) rotated by an orthogonal 3x3 on the left.
        let c = 0.6;
        let s = 0.8;
        let q = Tensor::matrix(3, 3, vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let d = Tensor::matrix(3, 3, vec![3.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let sv = singular_values(&q.matmul(&d).unwrap());
        for (got, want) in sv.iter().zip([3.0, 2.0, 0.5]) {
            assert!((got - want).abs() < 1e-12, "{sv:?}");
        }
        // Dense symmetric case: eigenvalues of [[2,1],[1,2]] are 1 and 3.
        let mut e = symmetric_eigenvalues(&Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap());
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn circle_distance_examples() {
        let p = |x: f64, y: f64| Tensor::matrix(1, 2, vec![x, y]).unwrap();
        assert_eq!(manifold_distance_circle(&p(2.0, 0.0), 1.0).unwrap(), 1.0);
        assert!(manifold_distance_circle(&p(0.6, 0.8), 1.0).unwrap() < 1e-15);
        assert_eq!(manifold_distance_circle(&p(0.0, 0.0), 1.0).unwrap(), 1.0);
        assert!(manifold_distance_circle(&Tensor::zeros(&[2, 3]), 1.0).is_err());
    }

    #[test]
    fn classification_error_examples() {
        assert_eq!(classification_error(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(classification_error(&[1, 0], &[0, 1]).unwrap(), 1.0);
        assert_eq!(classification_error(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.25);
        assert!(classification_error(&[0], &[0, 1]).is_err());
    }
}
