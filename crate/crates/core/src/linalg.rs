//! Small dense linear-algebra helpers shared by the beamformers and the cone solver.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Relative singular-value threshold below which a direction counts as null.
pub const RANK_TOL: f64 = 1e-10;

pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `u^H v`
pub fn inner(u: &CVec, v: &CVec) -> C64 {
    u.dotc(v)
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Largest entry of `|M - M^H|`.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Real lift `[Re -Im; Im Re]` of a complex matrix.
pub fn real_lift(m: &CMat) -> DMatrix<f64> {
    let (r, c) = m.shape();
    DMatrix::from_fn(2 * r, 2 * c, |i, j| {
        let z = m[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// `[Re v; Im v]`
pub fn lift_vec(v: &CVec) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// Inverse of [`lift_vec`].
pub fn unlift_vec(x: &DVector<f64>) -> CVec {
    let n = x.len() / 2;
    CVec::from_fn(n, |i, _| c64(x[i], x[i + n]))
}

/// Numerical rank of a complex matrix from its singular values.
pub fn numerical_rank(m: &CMat, rel_tol: f64) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Columns that add no rank when scanned left to right.
pub fn dependent_columns(m: &CMat, rel_tol: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    let scale = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    for j in 0..m.ncols() {
        let mut trial = kept.clone();
        trial.push(j);
        let sub = m.select_columns(&trial);
        let sv = sub.svd(false, false).singular_values;
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if smin > rel_tol * scale.max(f64::MIN_POSITIVE) {
            kept.push(j);
        } else {
            dependent.push(j);
        }
    }
    dependent
}

/// Minimum-norm particular solution and orthonormal null-space basis of `A^T x = b`.
#[derive(Debug, Clone)]
pub struct AffineSubspace {
    pub particular: DVector<f64>,
    pub null_basis: DMatrix<f64>,
    pub residual: f64,
}

/// Solves `A^T x = b` for `A` of shape `n x p` through a column-pivoted QR of
/// `A` padded to square. Singular vectors from nalgebra's SVD lose
/// orthogonality on the nearly paired spectra that complex lifts produce, so
/// only Householder factorizations are used here.
pub fn affine_subspace(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> AffineSubspace {
    let n = a.nrows();
    let p = a.ncols();
    if p == 0 {
        return AffineSubspace {
            particular: DVector::zeros(n),
            null_basis: DMatrix::identity(n, n),
            residual: 0.0,
        };
    }
    let width = n.max(p);
    let mut padded = DMatrix::<f64>::zeros(n, width);
    padded.view_mut((0, 0), (n, p)).copy_from(a);
    let qr = padded.col_piv_qr();
    let r = qr.r();
    let q = qr.q();
    let diag = r.diagonal().map(f64::abs);
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let rank = diag.iter().take_while(|&&d| dmax > 0.0 && d > rel_tol * dmax).count();

    let range = q.columns(0, rank).into_owned();
    // x = Q₁ y with A^T Q₁ full column rank
    let particular = if rank == 0 {
        DVector::zeros(n)
    } else {
        let m = a.transpose() * &range;
        &range * solve_least_squares(&m, b)
    };
    let null_basis = q.columns(rank, n - rank).into_owned();
    let residual = (a.transpose() * &particular - b).norm();
    AffineSubspace {
        particular,
        null_basis,
        residual,
    }
}

/// `argmin ‖A y - b‖` for `A` of full column rank, by Householder QR.
pub fn solve_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = a.ncols();
    if k == 0 {
        return DVector::zeros(0);
    }
    let qr = a.clone().qr();
    let qtb = qr.q().transpose() * b;
    let r = qr.r();
    r.rows(0, k)
        .into_owned()
        .solve_upper_triangular(&qtb.rows(0, k).into_owned())
        .unwrap_or_else(|| DVector::from_element(k, f64::NAN))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lift_roundtrip_is_exact() {
        let v = CVec::from_vec(vec![c64(1.5, -2.0), c64(0.0, 3.25), c64(-7.0, 0.5)]);
        assert_eq!(unlift_vec(&lift_vec(&v)), v);
    }

    #[test]
    fn real_lift_preserves_matvec() {
        let m = CMat::from_fn(3, 2, |i, j| c64(i as f64 + 0.5, j as f64 - 1.0 + i as f64));
        let v = CVec::from_vec(vec![c64(0.3, -0.7), c64(1.1, 0.2)]);
        let lhs = lift_vec(&(&m * &v));
        let rhs = real_lift(&m) * lift_vec(&v);
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn paired_spectrum_least_squares_is_optimal() {
        // real lifts of complex matrices have every singular value doubled
        let z = CMat::from_fn(8, 2, |i, j| c64((i as f64 * 0.7 + j as f64).sin(), (i * j) as f64 * 0.3 - 0.5));
        let a = real_lift(&z);
        let b = DVector::from_fn(16, |i, _| (i as f64 * 1.3).cos());
        let y = solve_least_squares(&a, &b);
        // optimality: the residual is orthogonal to the range
        assert!((a.transpose() * (&a * &y - &b)).norm() < 1e-12);

        let sub = affine_subspace(&a, &DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]), RANK_TOL);
        assert!(sub.residual < 1e-12);
        assert_eq!(sub.null_basis.ncols(), 12);
        assert!((a.transpose() * &sub.null_basis).norm() < 1e-12);
        // minimum norm: no component along the null space
        assert!((sub.null_basis.transpose() * &sub.particular).norm() < 1e-12);
    }

    #[test]
    fn affine_subspace_solves_and_spans_nullspace() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 3.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, -2.0]);
        let sub = affine_subspace(&a, &b, RANK_TOL);
        assert!(sub.residual < 1e-12);
        assert_eq!(sub.null_basis.ncols(), 2);
        assert!((a.transpose() * &sub.null_basis).norm() < 1e-12);
        let gram = sub.null_basis.transpose() * &sub.null_basis;
        assert!((gram - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn affine_subspace_flags_inconsistent_system() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        let sub = affine_subspace(&a, &b, RANK_TOL);
        assert!(sub.residual > 0.5);
    }

    #[test]
    fn dependent_columns_found() {
        let m = CMat::from_fn(4, 3, |i, j| match j {
            0 => c64(i as f64 + 1.0, 0.0),
            1 => c64(0.0, (i * i) as f64),
            _ => c64(2.0 * (i as f64 + 1.0), 0.0),
        });
        assert_eq!(dependent_columns(&m, RANK_TOL), vec![2]);
        assert_eq!(numerical_rank(&m, RANK_TOL), 2);
    }
}
