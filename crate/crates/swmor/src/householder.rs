//! Thin Householder QR with implicit access to the orthogonal complement.
//!
//! For a full-column-rank D ∈ ℝ^{n×c} the factorization Q R = D stores the c
//! reflectors only. The last n−c columns of Q form an orthonormal basis of
//! range(D)^⊥, and both that basis and its transpose can be applied to
//! vectors in O(n·c) without ever materializing an n×n matrix. This is what
//! keeps the differential-subspace bases implicit for large sparse modes.

use nalgebra::{DMatrix, DVector};

/// Packed Householder reflectors for Q from the QR of an n×c matrix.
pub struct HouseholderQ {
    /// Reflector vectors; v[k] has zeros above entry k.
    vs: Vec<DVector<f64>>,
    n: usize,
}

impl HouseholderQ {
    /// Factor D = QR, keeping only the reflectors. D must have full column
    /// rank for the complement dimension to be meaningful.
    pub fn new(d: &DMatrix<f64>) -> Self {
        let n = d.nrows();
        let c = d.ncols();
        assert!(c <= n);
        let mut a = d.clone();
        let mut vs = Vec::with_capacity(c);
        for k in 0..c {
            let mut v = DVector::zeros(n);
            let mut norm_x = 0.0;
            for i in k..n {
                norm_x += a[(i, k)] * a[(i, k)];
            }
            let norm_x = norm_x.sqrt();
            if norm_x == 0.0 {
                vs.push(v);
                continue;
            }
            let alpha = if a[(k, k)] >= 0.0 { -norm_x } else { norm_x };
            for i in k..n {
                v[i] = a[(i, k)];
            }
            v[k] -= alpha;
            let vnorm = v.norm();
            if vnorm > 0.0 {
                v /= vnorm;
            }
            // apply reflector to trailing columns of a
            for j in k..c {
                let mut dot = 0.0;
                for i in k..n {
                    dot += v[i] * a[(i, j)];
                }
                for i in k..n {
                    a[(i, j)] -= 2.0 * dot * v[i];
                }
            }
            vs.push(v);
        }
        Self { vs, n }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank_cols(&self) -> usize {
        self.vs.len()
    }

    /// y = Q x
    pub fn apply_q(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        for v in self.vs.iter().rev() {
            let dot = v.dot(&y);
            if dot != 0.0 {
                y.axpy(-2.0 * dot, v, 1.0);
            }
        }
        y
    }

    /// y = Qᵀ x
    pub fn apply_qt(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        for v in &self.vs {
            let dot = v.dot(&y);
            if dot != 0.0 {
                y.axpy(-2.0 * dot, v, 1.0);
            }
        }
        y
    }

    /// y = Q_⊥ x where Q_⊥ = columns c..n of Q (the complement basis);
    /// x ∈ ℝ^{n-c}.
    pub fn apply_complement(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = self.vs.len();
        assert_eq!(x.len(), self.n - c);
        let mut padded = DVector::zeros(self.n);
        for i in 0..x.len() {
            padded[c + i] = x[i];
        }
        self.apply_q(&padded)
    }

    /// y = Q_⊥ᵀ x; returns the last n-c coordinates of Qᵀ x.
    pub fn apply_complement_t(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = self.vs.len();
        let full = self.apply_qt(x);
        DVector::from_fn(self.n - c, |i, _| full[c + i])
    }

    /// Materialize the complement basis (n × (n-c)). Only sensible at desk
    /// scale or when n-c is small.
    pub fn complement_dense(&self) -> DMatrix<f64> {
        let c = self.vs.len();
        let m = self.n - c;
        let mut out = DMatrix::zeros(self.n, m);
        for j in 0..m {
            let mut e = DVector::zeros(m);
            e[j] = 1.0;
            out.set_column(j, &self.apply_complement(&e));
        }
        out
    }

    /// Materialize the range basis (n × c, the thin Q).
    pub fn range_dense(&self) -> DMatrix<f64> {
        let c = self.vs.len();
        let mut out = DMatrix::zeros(self.n, c);
        for j in 0..c {
            let mut e = DVector::zeros(self.n);
            e[j] = 1.0;
            out.set_column(j, &self.apply_q(&e));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, n: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, c, |_, _| rng.normal())
    }

    #[test]
    fn complement_is_orthonormal_and_orthogonal_to_range() {
        let mut rng = SplitMix64::new(3);
        let d = random_matrix(&mut rng, 12, 4);
        let q = HouseholderQ::new(&d);
        let comp = q.complement_dense();
        assert_eq!(comp.ncols(), 8);
        let gram = comp.transpose() * &comp;
        assert!((gram - DMatrix::identity(8, 8)).norm() < 1e-12);
        assert!((comp.transpose() * &d).norm() < 1e-12);
    }

    #[test]
    fn q_applications_are_inverses() {
        let mut rng = SplitMix64::new(9);
        let d = random_matrix(&mut rng, 10, 3);
        let q = HouseholderQ::new(&d);
        let x = random_matrix(&mut rng, 10, 1).column(0).into_owned();
        let back = q.apply_q(&q.apply_qt(&x));
        assert!((back - x).norm() < 1e-12);
    }
}
