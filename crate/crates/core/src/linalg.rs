//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEig {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let eig = SymmetricEigen::new(symmetrized(m));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `V f(Λ) V'`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mapped = self.values.map(f);
        let scaled = &self.vectors * DMatrix::from_diagonal(&mapped);
        let mut out = scaled * self.vectors.transpose();
        symmetrize(&mut out);
        out
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Relative symmetry check: `max |m_ij - m_ji| <= tol * max(1, max |m_ij|)`.
pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    (0..n).all(|i| (i + 1..n).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Principal square root of a symmetric PSD matrix (negative eigenvalues clamped to zero).
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    SymEig::new(m).map(|v| v.max(0.0).sqrt())
}

pub fn sym_log(m: &DMatrix<f64>) -> DMatrix<f64> {
    SymEig::new(m).map(|v| v.max(f64::MIN_POSITIVE).ln())
}

/// Cholesky-based positive-definiteness test.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite()) && nalgebra::Cholesky::new(symmetrized(m)).is_some()
}

/// Matrix exponential `exp(a * t)`.
///
/// Backed by `nalgebra`'s scaling-and-squaring Padé implementation; this
/// wrapper rejects non-finite inputs and overflowing results.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch("matrix exponential needs a square matrix".into()));
    }
    if !t.is_finite() || a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in matrix exponential argument".into()));
    }
    let scaled = a * t;
    if scaled.norm() > 700.0 {
        return Err(Error::Numeric(format!(
            "matrix exponential argument too large (|At| = {:.3e})",
            scaled.norm()
        )));
    }
    let out = scaled.exp();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential overflowed".into()));
    }
    Ok(out)
}

/// Largest singular value.
pub fn sigma_max(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = m.transpose() * m;
    SymEig::new(&gram).max().max(0.0).sqrt()
}

/// Largest real part over the eigenvalues of a general square matrix.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn sup_norm(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

pub(crate) mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(to_rows(m))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }
}

pub(crate) mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn expm_of_zero_is_identity() {
        let e = matrix_exponential(&DMatrix::zeros(3, 3), 2.5).unwrap();
        assert!((e - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn expm_nilpotent() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exponential(&a, 1.0).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((e - want).amax() < 1e-14);
    }

    #[test]
    fn expm_rotation_quarter_turn() {
        // exp([[0,2],[-2,0]] t) is a rotation by 2t; t = pi/4 gives [[0,1],[-1,0]].
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -2.0, 0.0]);
        let e = matrix_exponential(&a, FRAC_PI_4).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((e - want).amax() < 1e-12);
    }

    #[test]
    fn expm_rejects_overflow_and_nan() {
        let a = DMatrix::from_element(2, 2, 1e6);
        assert!(matrix_exponential(&a, 1.0).is_err());
        let a = DMatrix::from_element(2, 2, f64::NAN);
        assert!(matrix_exponential(&a, 1.0).is_err());
    }

    #[test]
    fn expm_matches_series_on_random_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[0.3, -1.2, 0.5, 0.8, -0.1, 0.2, -0.4, 0.6, 0.05]);
        let mut term = DMatrix::identity(3, 3);
        let mut sum = term.clone();
        for k in 1..40 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        let e = matrix_exponential(&a, 1.0).unwrap();
        assert!((&e - &sum).amax() / sum.amax() < 1e-12);
    }

    #[test]
    fn sqrt_and_log_roundtrip() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sym_sqrt(&m);
        assert!((&r * &r - &m).amax() < 1e-12);
        let back = SymEig::new(&sym_log(&m)).map(f64::exp);
        assert!((back - m).amax() < 1e-12);
    }

    #[test]
    fn eigenvalues_sorted() {
        let m = DMatrix::from_row_slice(3, 3, &[5.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 3.0]);
        let e = SymEig::new(&m);
        assert_eq!(e.values.as_slice(), &[1.0, 3.0, 5.0]);
    }
}
