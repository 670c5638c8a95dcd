//! Dense LDL^T factorization for symmetric quasi-definite matrices.
//!
//! The leading `n_pos` pivots are expected to be positive and the trailing
//! ones negative. Pivots with the wrong sign or magnitude below `delta` are
//! replaced by `+-delta` (dynamic regularization). Factorization is
//! refused when the factor entries grow past `MAX_GROWTH` times the input,
//! which happens on nearly dependent constraint rows.

use nalgebra::{DMatrix, DVector};

const MAX_GROWTH: f64 = 1e12;

pub(crate) struct Ldl {
    /// Unit lower triangle stored below the diagonal; diagonal holds D.
    factor: DMatrix<f64>,
}

impl Ldl {
    pub(crate) fn factor(mut k: DMatrix<f64>, n_pos: usize, delta: f64) -> Option<Self> {
        let n = k.nrows();
        let limit = MAX_GROWTH * (1.0 + k.amax());
        let mut work = vec![0.0; n];
        for j in 0..n {
            // work[p] = L[j, p] * D[p]
            let mut d = k[(j, j)];
            for p in 0..j {
                let ljp = k[(j, p)];
                work[p] = ljp * k[(p, p)];
                d -= ljp * work[p];
            }
            if !d.is_finite() {
                return None;
            }
            let want_pos = j < n_pos;
            if (want_pos && d < delta) || (!want_pos && d > -delta) {
                d = if want_pos { delta } else { -delta };
            }
            k[(j, j)] = d;
            for i in (j + 1)..n {
                let mut v = k[(i, j)];
                for p in 0..j {
                    v -= k[(i, p)] * work[p];
                }
                k[(i, j)] = v / d;
                if !(k[(i, j)].abs() <= limit) {
                    return None;
                }
            }
        }
        Some(Self { factor: k })
    }

    pub(crate) fn solve_in_place(&self, b: &mut DVector<f64>) {
        let n = self.factor.nrows();
        let l = &self.factor;
        for i in 0..n {
            let mut v = b[i];
            for p in 0..i {
                v -= l[(i, p)] * b[p];
            }
            b[i] = v;
        }
        for i in 0..n {
            b[i] /= l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut v = b[i];
            for p in (i + 1)..n {
                v -= l[(p, i)] * b[p];
            }
            b[i] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_quasi_definite_system() {
        // [[4, 1, 1], [1, 3, 0], [1, 0, -2]]
        let k = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 1.0, 1.0, 3.0, 0.0, 1.0, 0.0, -2.0]);
        let x = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let mut b = &k * &x;
        let ldl = Ldl::factor(k, 2, 1e-14).unwrap();
        ldl.solve_in_place(&mut b);
        assert!((b - x).amax() < 1e-12);
    }
}
