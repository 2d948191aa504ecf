//! Small linear-algebra backends shared by the geometry kernels and
//! integrators: symmetric positive (semi-)definite operators in identity,
//! scaled, diagonal or dense form, and a factorized tridiagonal solver for
//! chain-structured systems.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Symmetric positive semi-definite operator with a storage-aware backend.
///
/// Used for mass matrices and friction tensors. Mass matrices must be
/// strictly positive definite (validated at model construction); friction
/// tensors may be singular or zero.
#[derive(Debug, Clone)]
pub enum SpdMatrix {
    /// The identity on `dim` coordinates.
    Identity(usize),
    /// `value * Id` on `dim` coordinates, `value >= 0`.
    Scaled { dim: usize, value: f64 },
    /// Diagonal with the given nonnegative entries.
    Diagonal(Vec<f64>),
    /// Dense SPD matrix with a cached Cholesky factorization.
    Dense(Box<DenseSpd>),
}

/// Dense SPD matrix plus cached factorization and spectral bounds.
#[derive(Debug, Clone)]
pub struct DenseSpd {
    pub mat: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    eig_min: f64,
    eig_max: f64,
}

impl SpdMatrix {
    pub fn identity(dim: usize) -> Self {
        SpdMatrix::Identity(dim)
    }

    pub fn scaled(dim: usize, value: f64) -> Result<Self> {
        if !(value >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scaled operator needs a nonnegative coefficient, got {value}"
            )));
        }
        Ok(SpdMatrix::Scaled { dim, value })
    }

    pub fn diagonal(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidConfig(
                "diagonal operator needs nonnegative entries".into(),
            ));
        }
        Ok(SpdMatrix::Diagonal(entries))
    }

    pub fn dense(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::DimensionMismatch {
                context: "dense SPD operator",
                expected: mat.nrows(),
                got: mat.ncols(),
            });
        }
        let chol = Cholesky::new(mat.clone()).ok_or_else(|| {
            Error::InvalidConfig("dense operator is not positive definite".into())
        })?;
        let eigs = mat.clone().symmetric_eigenvalues();
        let eig_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let eig_max = eigs.iter().cloned().fold(0.0, f64::max);
        Ok(SpdMatrix::Dense(Box::new(DenseSpd {
            mat,
            chol,
            eig_min,
            eig_max,
        })))
    }

    pub fn dim(&self) -> usize {
        match self {
            SpdMatrix::Identity(d) => *d,
            SpdMatrix::Scaled { dim, .. } => *dim,
            SpdMatrix::Diagonal(v) => v.len(),
            SpdMatrix::Dense(d) => d.mat.nrows(),
        }
    }

    /// Whether the operator is strictly positive definite.
    pub fn is_positive_definite(&self) -> bool {
        match self {
            SpdMatrix::Identity(_) => true,
            SpdMatrix::Scaled { value, .. } => *value > 0.0,
            SpdMatrix::Diagonal(v) => v.iter().all(|&x| x > 0.0),
            SpdMatrix::Dense(d) => d.eig_min > 0.0,
        }
    }

    /// `out = A x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SpdMatrix::Identity(_) => out.copy_from_slice(x),
            SpdMatrix::Scaled { value, .. } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = value * xi;
                }
            }
            SpdMatrix::Diagonal(diag) => {
                for ((o, xi), di) in out.iter_mut().zip(x).zip(diag) {
                    *o = di * xi;
                }
            }
            SpdMatrix::Dense(d) => {
                let v = d.mat.clone() * DMatrix::from_column_slice(x.len(), 1, x);
                out.copy_from_slice(v.as_slice());
            }
        }
    }

    /// `out = A^{-1} rhs`. Requires a positive definite operator.
    pub fn solve_into(&self, rhs: &[f64], out: &mut [f64]) {
        match self {
            SpdMatrix::Identity(_) => out.copy_from_slice(rhs),
            SpdMatrix::Scaled { value, .. } => {
                for (o, ri) in out.iter_mut().zip(rhs) {
                    *o = ri / value;
                }
            }
            SpdMatrix::Diagonal(diag) => {
                for ((o, ri), di) in out.iter_mut().zip(rhs).zip(diag) {
                    *o = ri / di;
                }
            }
            SpdMatrix::Dense(d) => {
                let mut v = DMatrix::from_column_slice(rhs.len(), 1, rhs);
                d.chol.solve_mut(&mut v);
                out.copy_from_slice(v.as_slice());
            }
        }
    }

    /// `out = L x` with `L L^T = A`; maps iid unit Gaussians to covariance `A`.
    pub fn sqrt_apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SpdMatrix::Identity(_) => out.copy_from_slice(x),
            SpdMatrix::Scaled { value, .. } => {
                let s = value.sqrt();
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = s * xi;
                }
            }
            SpdMatrix::Diagonal(diag) => {
                for ((o, xi), di) in out.iter_mut().zip(x).zip(diag) {
                    *o = di.sqrt() * xi;
                }
            }
            SpdMatrix::Dense(d) => {
                let v = d.chol.l() * DMatrix::from_column_slice(x.len(), 1, x);
                out.copy_from_slice(v.as_slice());
            }
        }
    }

    /// Quadratic form `x^T A^{-1} x`. Requires a positive definite operator.
    pub fn quad_inv(&self, x: &[f64]) -> f64 {
        match self {
            SpdMatrix::Identity(_) => x.iter().map(|v| v * v).sum(),
            SpdMatrix::Scaled { value, .. } => x.iter().map(|v| v * v).sum::<f64>() / value,
            SpdMatrix::Diagonal(diag) => x.iter().zip(diag).map(|(v, d)| v * v / d).sum(),
            SpdMatrix::Dense(d) => {
                let mut v = DMatrix::from_column_slice(x.len(), 1, x);
                d.chol.solve_mut(&mut v);
                x.iter().zip(v.as_slice()).map(|(a, b)| a * b).sum()
            }
        }
    }

    /// Largest eigenvalue (exact for structured backends, cached for dense).
    pub fn eig_max(&self) -> f64 {
        match self {
            SpdMatrix::Identity(_) => 1.0,
            SpdMatrix::Scaled { value, .. } => *value,
            SpdMatrix::Diagonal(v) => v.iter().cloned().fold(0.0, f64::max),
            SpdMatrix::Dense(d) => d.eig_max,
        }
    }

    /// Smallest eigenvalue (exact for structured backends, cached for dense).
    pub fn eig_min(&self) -> f64 {
        match self {
            SpdMatrix::Identity(_) => 1.0,
            SpdMatrix::Scaled { value, .. } => *value,
            SpdMatrix::Diagonal(v) => v.iter().cloned().fold(f64::INFINITY, f64::min),
            SpdMatrix::Dense(d) => d.eig_min,
        }
    }

    /// `A + c B` promoted to the narrowest backend that can hold the sum.
    pub fn add_scaled(&self, c: f64, other: &SpdMatrix) -> Result<SpdMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context: "operator sum",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        use SpdMatrix::*;
        Ok(match (self, other) {
            (Identity(d), Identity(_)) => Scaled {
                dim: *d,
                value: 1.0 + c,
            },
            (Identity(d), Scaled { value, .. }) => Scaled {
                dim: *d,
                value: 1.0 + c * value,
            },
            (Scaled { dim, value }, Identity(_)) => Scaled {
                dim: *dim,
                value: value + c,
            },
            (Scaled { dim, value: a }, Scaled { value: b, .. }) => Scaled {
                dim: *dim,
                value: a + c * b,
            },
            (a, b) if !matches!(a, Dense(_)) && !matches!(b, Dense(_)) => {
                let mut diag = vec![0.0; a.dim()];
                let mut tmp = vec![0.0; a.dim()];
                diag_of(a, &mut diag);
                diag_of(b, &mut tmp);
                for (d, t) in diag.iter_mut().zip(&tmp) {
                    *d += c * t;
                }
                SpdMatrix::diagonal(diag)?
            }
            (a, b) => SpdMatrix::dense(a.to_dense() + b.to_dense() * c)?,
        })
    }

    /// The scalar `c` when the operator is exactly `c * Id`.
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            SpdMatrix::Identity(_) => Some(1.0),
            SpdMatrix::Scaled { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        match self {
            SpdMatrix::Identity(_) => DMatrix::identity(d, d),
            SpdMatrix::Scaled { value, .. } => DMatrix::identity(d, d) * *value,
            SpdMatrix::Diagonal(v) => DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
                v.clone(),
            )),
            SpdMatrix::Dense(m) => m.mat.clone(),
        }
    }
}

fn diag_of(m: &SpdMatrix, out: &mut [f64]) {
    match m {
        SpdMatrix::Identity(_) => out.fill(1.0),
        SpdMatrix::Scaled { value, .. } => out.fill(*value),
        SpdMatrix::Diagonal(v) => out.copy_from_slice(v),
        SpdMatrix::Dense(d) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = d.mat[(i, i)];
            }
        }
    }
}

/// LU factorization (no pivoting) of a tridiagonal matrix, reusable across
/// solves. Intended for diagonally dominant systems such as the discrete
/// Neumann Laplacian plus a positive shift.
#[derive(Debug, Clone)]
pub struct TridiagFactor {
    sup: Vec<f64>,
    piv: Vec<f64>,
    low: Vec<f64>,
}

impl TridiagFactor {
    /// Factor the matrix with sub-diagonal `sub`, diagonal `diag` and
    /// super-diagonal `sup` (`sub.len() == sup.len() == diag.len() - 1`).
    pub fn new(sub: &[f64], diag: &[f64], sup: &[f64]) -> Result<Self> {
        let n = diag.len();
        if sub.len() + 1 != n || sup.len() + 1 != n {
            return Err(Error::DimensionMismatch {
                context: "tridiagonal factorization",
                expected: n.saturating_sub(1),
                got: sub.len().max(sup.len()),
            });
        }
        let mut piv = vec![0.0; n];
        let mut low = vec![0.0; n.saturating_sub(1)];
        piv[0] = diag[0];
        for i in 0..n - 1 {
            if piv[i].abs() < f64::MIN_POSITIVE {
                return Err(Error::GramSingular { cond: f64::INFINITY });
            }
            low[i] = sub[i] / piv[i];
            piv[i + 1] = diag[i + 1] - low[i] * sup[i];
        }
        if piv[n - 1].abs() < f64::MIN_POSITIVE {
            return Err(Error::GramSingular { cond: f64::INFINITY });
        }
        Ok(Self {
            sup: sup.to_vec(),
            piv,
            low,
        })
    }

    pub fn dim(&self) -> usize {
        self.piv.len()
    }

    /// Solve in place.
    pub fn solve_slice(&self, rhs: &mut [f64]) {
        let n = self.piv.len();
        debug_assert_eq!(rhs.len(), n);
        for i in 0..n - 1 {
            rhs[i + 1] -= self.low[i] * rhs[i];
        }
        rhs[n - 1] /= self.piv[n - 1];
        for i in (0..n - 1).rev() {
            rhs[i] = (rhs[i] - self.sup[i] * rhs[i + 1]) / self.piv[i];
        }
    }

    /// `ln |det A|` from the pivot product.
    pub fn log_abs_det(&self) -> f64 {
        self.piv.iter().map(|p| p.abs().ln()).sum()
    }

    /// Ratio of extreme pivot magnitudes, a cheap conditioning estimate.
    pub fn pivot_ratio(&self) -> f64 {
        let max = self.piv.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let min = self
            .piv
            .iter()
            .cloned()
            .fold(f64::INFINITY, |a, b| a.min(b.abs()));
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tridiag_factor_matches_dense_solve() {
        let n = 7;
        let sub = vec![-1.0; n - 1];
        let diag: Vec<f64> = (0..n).map(|i| 2.5 + 0.1 * i as f64).collect();
        let sup = vec![-1.2; n - 1];
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            dense[(i, i)] = diag[i];
            if i + 1 < n {
                dense[(i + 1, i)] = sub[i];
                dense[(i, i + 1)] = sup[i];
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 0.3).collect();
        let reference = dense
            .clone()
            .lu()
            .solve(&nalgebra::DVector::from_vec(rhs.clone()))
            .unwrap();

        let factor = TridiagFactor::new(&sub, &diag, &sup).unwrap();
        let mut x = rhs;
        factor.solve_slice(&mut x);
        for (a, b) in x.iter().zip(reference.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        assert_relative_eq!(
            factor.log_abs_det(),
            dense.determinant().abs().ln(),
            max_relative = 1e-10
        );
    }

    #[test]
    fn dense_spd_solve_and_sqrt_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let a = SpdMatrix::dense(m.clone()).unwrap();
        let x = [0.3, -1.2, 0.7];
        let mut ax = [0.0; 3];
        a.apply(&x, &mut ax);
        let mut back = [0.0; 3];
        a.solve_into(&ax, &mut back);
        for (u, v) in back.iter().zip(&x) {
            assert_relative_eq!(u, v, max_relative = 1e-12);
        }
        // L L^T x == A x
        let l = Cholesky::new(m).unwrap().l();
        let lt_x = l.transpose() * nalgebra::DVector::from_column_slice(&x);
        let mut sqrt_applied = [0.0; 3];
        a.sqrt_apply(lt_x.as_slice(), &mut sqrt_applied);
        for (u, v) in sqrt_applied.iter().zip(&ax) {
            assert_relative_eq!(u, v, max_relative = 1e-12);
        }
        assert_relative_eq!(a.quad_inv(&ax), x.iter().zip(&ax).map(|(a, b)| a * b).sum(), max_relative = 1e-12);
    }

    #[test]
    fn add_scaled_promotes_to_diagonal() {
        let a = SpdMatrix::identity(3);
        let b = SpdMatrix::diagonal(vec![1.0, 2.0, 3.0]).unwrap();
        let s = a.add_scaled(0.5, &b).unwrap();
        let mut out = [0.0; 3];
        s.apply(&[1.0, 1.0, 1.0], &mut out);
        assert_eq!(out, [1.5, 2.0, 2.5]);
    }
}
