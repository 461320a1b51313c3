//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition,
//! PSD square roots and a Cholesky solve.

use super::math;
use alloc::vec;
use alloc::vec::Vec;

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        let n = self.n;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                for j in 0..n {
                    out.data[i * n + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    /// Averages the matrix with its transpose.
    pub fn symmetrized(&self) -> Mat {
        let n = self.n;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, 0.5 * (self.at(i, j) + self.at(j, i)));
            }
        }
        out
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
pub fn symmetric_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.n;
    let mut m = a.symmetrized();
    let mut v = Mat::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m.at(i, j) * m.at(i, j)).sum();
        let scale: f64 = m.data.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eig = (0..n).map(|i| m.at(i, i)).collect();
    (eig, v)
}

/// Principal square root of a symmetric PSD matrix, negative eigenvalues
/// floored at zero.
pub fn sqrt_psd(a: &Mat) -> Mat {
    let (eig, v) = symmetric_eigen(a);
    let n = a.n;
    let mut out = Mat::zeros(n);
    for (k, &lam) in eig.iter().enumerate() {
        let s = math::sqrt(lam.max(0.0));
        for i in 0..n {
            let vik = v.at(i, k) * s;
            for j in 0..n {
                out.data[i * n + j] += vik * v.at(j, k);
            }
        }
    }
    out
}

/// Solves `A X = B` for symmetric positive definite `A` (`n x n`) and
/// `B` with `cols` columns, row-major. Returns `None` if `A` is not PD.
pub fn cholesky_solve(a: &Mat, b: &[f64], cols: usize) -> Option<Vec<f64>> {
    let n = a.n;
    let mut l = Mat::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l.set(i, i, math::sqrt(s));
            } else {
                l.set(i, j, s / l.at(j, j));
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..cols {
        for i in 0..n {
            let mut s = x[i * cols + c];
            for k in 0..i {
                s -= l.at(i, k) * x[k * cols + c];
            }
            x[i * cols + c] = s / l.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = x[i * cols + c];
            for k in i + 1..n {
                s -= l.at(k, i) * x[k * cols + c];
            }
            x[i * cols + c] = s / l.at(i, i);
        }
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::SeededRng;
    use alloc::vec::Vec;

    fn random_spd(n: usize, seed: u64) -> Mat {
        let mut rng = SeededRng::new(seed, 0);
        let a = Mat::from_rows(n, (0..n * n).map(|_| rng.normal()).collect());
        let mut at = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                at.set(i, j, a.at(j, i));
            }
        }
        let mut m = a.matmul(&at);
        for i in 0..n {
            m.set(i, i, m.at(i, i) + 0.1);
        }
        m
    }

    fn max_diff(a: &Mat, b: &Mat) -> f64 {
        let n = a.n;
        (0..n * n).map(|k| (a.at(k / n, k % n) - b.at(k / n, k % n)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let m = random_spd(7, 1);
        let (eig, v) = symmetric_eigen(&m);
        let mut rec = Mat::zeros(7);
        for i in 0..7 {
            for j in 0..7 {
                rec.set(i, j, (0..7).map(|k| v.at(i, k) * eig[k] * v.at(j, k)).sum());
            }
        }
        assert!(max_diff(&rec, &m) < 1e-10);
        assert!(eig.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn diagonal_matrix_eigenvalues() {
        let mut m = Mat::zeros(3);
        for (i, d) in [3.0, -1.0, 2.0].into_iter().enumerate() {
            m.set(i, i, d);
        }
        let (mut eig, _) = symmetric_eigen(&m);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(eig, [-1.0, 2.0, 3.0]);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = random_spd(16, 2);
        let r = sqrt_psd(&m);
        assert!(max_diff(&r.matmul(&r), &m) < 1e-9);
        assert!(max_diff(&r, &r.symmetrized()) < 1e-12);
    }

    #[test]
    fn sqrt_floors_negative_eigenvalues() {
        let mut m = Mat::zeros(2);
        m.set(0, 0, 4.0);
        m.set(1, 1, -1e-12);
        let r = sqrt_psd(&m);
        assert!((r.at(0, 0) - 2.0).abs() < 1e-15 && r.at(1, 1) == 0.0);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let m = random_spd(5, 3);
        let x: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        let mut b = alloc::vec![0.0; 10];
        for i in 0..5 {
            for c in 0..2 {
                b[i * 2 + c] = (0..5).map(|k| m.at(i, k) * x[k * 2 + c]).sum();
            }
        }
        let got = cholesky_solve(&m, &b, 2).unwrap();
        assert!(got.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-9));
        let mut neg = Mat::identity(2);
        neg.set(1, 1, -1.0);
        assert!(cholesky_solve(&neg, &[1.0, 1.0], 1).is_none());
    }
}
