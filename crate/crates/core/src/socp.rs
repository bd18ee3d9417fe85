//! Real-lifted second-order cone form of the relaxed subproblem and a
//! primal-dual interior-point solver for it.
//!
//! The subproblem is
//!
//! ```text
//! minimize  ‖R x‖   subject to  Aᵀ x = b,   ‖G_i x‖ ≤ h_i
//! ```
//!
//! with `x` the real lift `[Re w_L; Im w_L; Re w_R; Im w_R]` of a binaural filter.
//! Equalities (and cones whose bound is zero) are eliminated by a null-space
//! parameterization before the cone iterations.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcmv::{BinauralFilter, BlockCpsd};
use crate::linalg::{affine_subspace, c64, real_lift, CVec, C64, RANK_TOL};
use crate::scene::reference_entries_ok;

/// Relative size below which a cone bound is treated as zero.
pub const ZERO_BOUND_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocpSettings {
    pub feastol: f64,
    pub abstol: f64,
    pub reltol: f64,
    pub max_iterations: usize,
    pub step_fraction: f64,
    /// Dual iterate growth, relative to the start, that counts as divergence.
    pub growth_limit: f64,
    pub growth_iterations: usize,
    /// Turn zero-bound cones into equalities before iterating.
    pub presolve_zero_cones: bool,
}

impl Default for SocpSettings {
    fn default() -> Self {
        Self {
            feastol: 1e-9,
            abstol: 1e-9,
            reltol: 1e-9,
            max_iterations: 200,
            step_fraction: 0.99,
            growth_limit: 1e8,
            growth_iterations: 10,
            presolve_zero_cones: true,
        }
    }
}

/// `‖g x‖ ≤ h` with `g` of shape `2 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCone {
    pub g: DMatrix<f64>,
    pub h: f64,
}

#[derive(Debug, Clone)]
pub struct SocpProblem {
    /// `R` with `RᵀR = P̆̃ / objective_scale`.
    pub objective_factor: DMatrix<f64>,
    pub objective_scale: f64,
    /// Equality block, one constraint per column.
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub cones: Vec<NormCone>,
    /// Per-cone ζ of the relative-ATF bound.
    pub zeta: Vec<f64>,
    pub ref_left: usize,
    pub ref_right: usize,
}

impl SocpProblem {
    pub fn dimension(&self) -> usize {
        self.objective_factor.ncols()
    }

    /// `sqrt(w^H P̃ w)` at a lifted point.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        (&self.objective_factor * x).norm() * self.objective_scale.sqrt()
    }

    pub fn equality_residual(&self, x: &DVector<f64>) -> f64 {
        (self.eq_matrix.transpose() * x - &self.eq_rhs).norm()
    }

    /// Largest `‖G_i x‖ - h_i` over the cones (negative when strictly inside).
    pub fn cone_violation(&self, x: &DVector<f64>) -> f64 {
        self.cones
            .iter()
            .map(|c| (&c.g * x).norm() - c.h)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SocpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SocpSolution {
    pub x: DVector<f64>,
    pub w: CVec,
    /// `sqrt(w^H P̃ w)`
    pub objective: f64,
    pub status: SocpStatus,
    pub duality_gap: f64,
    pub iterations: usize,
    pub gap_history: Vec<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl SocpSolution {
    pub fn filter(&self, ref_left: usize, ref_right: usize) -> Result<BinauralFilter> {
        BinauralFilter::new(self.w.clone(), ref_left, ref_right)
    }
}

/// `[Re w_L; Im w_L; Re w_R; Im w_R]`
pub fn lift_binaural(w: &CVec) -> DVector<f64> {
    let m = w.len() / 2;
    DVector::from_fn(4 * m, |i, _| {
        let (half, j) = (i / (2 * m), i % (2 * m));
        let z = w[half * m + j % m];
        if j < m {
            z.re
        } else {
            z.im
        }
    })
}

/// Inverse of [`lift_binaural`].
pub fn unlift_binaural(x: &DVector<f64>) -> CVec {
    let m = x.len() / 4;
    CVec::from_fn(2 * m, |i, _| {
        let (half, j) = (i / m, i % m);
        c64(x[half * 2 * m + j], x[half * 2 * m + m + j])
    })
}

/// Rows `r` with `r x = [Re φ^H w; Im φ^H w]` for a stacked `2M` vector `φ`.
pub fn lift_functional(phi: &CVec) -> DMatrix<f64> {
    let re = lift_binaural(phi);
    let im = lift_binaural(&phi.map(|z| z * c64(0.0, 1.0)));
    DMatrix::from_rows(&[re.transpose(), im.transpose()])
}

/// `diag(P̆, P̆)` with `P̆ = [Re P, -Im P; Im P, Re P]`.
pub fn lifted_cpsd(p: &BlockCpsd) -> DMatrix<f64> {
    block_diag2(&real_lift(p.p()))
}

fn block_diag2(b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(b);
    out.view_mut((n, n), (n, n)).copy_from(b);
    out
}

/// `ζ = |ā*_{R,L} b̄*_{L,R} - 1|` with `ā_R = a / a_R` and `b̄_L = b / b_L`.
pub fn zeta(a: &CVec, b: &CVec, ref_left: usize, ref_right: usize) -> f64 {
    let a_bar_r = a[ref_left] / a[ref_right];
    let b_bar_l = b[ref_right] / b[ref_left];
    (a_bar_r.conj() * b_bar_l.conj() - c64(1.0, 0.0)).norm()
}

/// Relative-ATF cone bound `|τ ζ b̄_R^H ŵ_R|` with `b̄_R = b / b_R`.
pub fn ratf_bound(tau: f64, zeta: f64, b: &CVec, previous_right: &CVec, ref_right: usize) -> f64 {
    let b_bar_r = b / b[ref_right];
    (c64(tau * zeta, 0.0) * b_bar_r.dotc(previous_right)).norm()
}

/// `φ_i = [b / b_L; -b / b_R]`
pub fn ratf_cue_vector(b: &CVec, ref_left: usize, ref_right: usize) -> CVec {
    let m = b.len();
    CVec::from_fn(2 * m, |i, _| {
        if i < m {
            b[i] / b[ref_left]
        } else {
            -b[i - m] / b[ref_right]
        }
    })
}

/// Builds the lifted subproblem: distortionless equalities on the target and one
/// cone `|φ_i^H w| ≤ bounds[i]` per interferer.
pub fn lift_subproblem(
    p: &BlockCpsd,
    a: &CVec,
    bs: &[CVec],
    bounds: &[f64],
    ref_left: usize,
    ref_right: usize,
) -> Result<SocpProblem> {
    let m = p.mic_count();
    if a.len() != m || bs.iter().any(|b| b.len() != m) {
        return Err(Error::InvalidInput("ATF lengths differ from the CPSD size".into()));
    }
    if bs.len() != bounds.len() {
        return Err(Error::InvalidInput(format!(
            "{} interferers but {} cone bounds",
            bs.len(),
            bounds.len()
        )));
    }
    if bounds.iter().any(|h| !(*h >= 0.0)) {
        return Err(Error::InvalidInput("cone bounds must be non-negative".into()));
    }
    if !reference_entries_ok(a, ref_left, ref_right) {
        return Err(Error::DegenerateConstraint(
            "target relative ATF undefined: reference entry vanishes".into(),
        ));
    }
    for (i, b) in bs.iter().enumerate() {
        if !reference_entries_ok(b, ref_left, ref_right) {
            return Err(Error::DegenerateConstraint(format!(
                "interferer {i} relative ATF undefined: reference entry vanishes"
            )));
        }
    }

    let lifted = lifted_cpsd(p);
    let n = lifted.nrows();
    let scale = lifted.trace() / n as f64;
    // RᵀR = P̆̃ from the complex Cholesky factor L L^H = P
    let lh = p.cholesky_factor().adjoint();
    let factor = block_diag2(&real_lift(&lh)) / scale.sqrt();

    let zero = CVec::zeros(m);
    let a_l = a / a[ref_left];
    let a_r = a / a[ref_right];
    let phi_l = stack(&a_l, &zero);
    let phi_r = stack(&zero, &a_r);
    let fl = lift_functional(&phi_l);
    let fr = lift_functional(&phi_r);
    let eq_matrix = DMatrix::from_columns(&[
        fl.row(0).transpose(),
        fr.row(0).transpose(),
        fl.row(1).transpose(),
        fr.row(1).transpose(),
    ]);
    let eq_rhs = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);

    let cones = bs
        .iter()
        .zip(bounds)
        .map(|(b, &h)| NormCone {
            g: lift_functional(&ratf_cue_vector(b, ref_left, ref_right)),
            h,
        })
        .collect();
    let zeta = bs.iter().map(|b| zeta(a, b, ref_left, ref_right)).collect();
    debug_assert_eq!(factor.ncols(), n);
    Ok(SocpProblem {
        objective_factor: factor,
        objective_scale: scale,
        eq_matrix,
        eq_rhs,
        cones,
        zeta,
        ref_left,
        ref_right,
    })
}

fn stack(top: &CVec, bottom: &CVec) -> CVec {
    let m = top.len();
    CVec::from_fn(2 * m, |i, _| if i < m { top[i] } else { bottom[i - m] })
}

/// Solves the lifted subproblem.
pub fn solve_socp(problem: &SocpProblem, settings: &SocpSettings) -> Result<SocpSolution> {
    if !(settings.feastol > 0.0 && settings.abstol > 0.0 && settings.reltol > 0.0) {
        return Err(Error::Parameter("solver tolerances must be positive".into()));
    }
    let n = problem.dimension();
    let r = &problem.objective_factor;
    if r.nrows() != n || problem.eq_matrix.nrows() != n || problem.cones.iter().any(|c| c.g.ncols() != n) {
        return Err(Error::InvalidInput("SOCP blocks have inconsistent dimensions".into()));
    }

    // presolve: equalities plus zero-bound cones define an affine subspace
    let x_scale = {
        let base = affine_subspace(&problem.eq_matrix, &problem.eq_rhs, RANK_TOL);
        base.particular.norm().max(1.0)
    };
    let mut eq_cols: Vec<DVector<f64>> = problem.eq_matrix.column_iter().map(|c| c.into_owned()).collect();
    let mut eq_rhs: Vec<f64> = problem.eq_rhs.iter().copied().collect();
    let mut active: Vec<(DMatrix<f64>, f64)> = Vec::new();
    for cone in &problem.cones {
        let gnorm = cone.g.norm().max(f64::MIN_POSITIVE);
        if settings.presolve_zero_cones && cone.h <= ZERO_BOUND_TOL * gnorm * x_scale {
            for row in cone.g.row_iter() {
                eq_cols.push(row.transpose());
                eq_rhs.push(0.0);
            }
        } else {
            // normalize each cone so its rows have unit Frobenius scale
            let s = gnorm / 2f64.sqrt();
            active.push((&cone.g / s, cone.h / s));
        }
    }
    let a = if eq_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&eq_cols)
    };
    let b = DVector::from_vec(eq_rhs);
    let sub = affine_subspace(&a, &b, RANK_TOL);
    let finish = |x: DVector<f64>, status, gap, iterations, gap_history, pres, dres| SocpSolution {
        w: unlift_binaural(&x),
        objective: problem.objective(&x),
        x,
        status,
        duality_gap: gap,
        iterations,
        gap_history,
        primal_residual: pres,
        dual_residual: dres,
    };
    if sub.residual > 1e-9 * (1.0 + b.norm()) {
        debug!("SOCP equalities inconsistent, residual {}", sub.residual);
        return Ok(finish(sub.particular, SocpStatus::Infeasible, f64::NAN, 0, vec![], sub.residual, f64::NAN));
    }
    let x0 = sub.particular;
    let basis = sub.null_basis;

    if basis.ncols() == 0 {
        let ok = active
            .iter()
            .all(|(g, h)| (g * &x0).norm() <= h + settings.feastol * (1.0 + h));
        let status = if ok { SocpStatus::Optimal } else { SocpStatus::Infeasible };
        return Ok(finish(x0, status, 0.0, 0, vec![], sub.residual, 0.0));
    }

    let rn = r * &basis;
    let rx0 = r * &x0;
    if active.is_empty() {
        // unconstrained least squares in the null-space coordinates
        let y = least_squares(&rn, &(-&rx0))?;
        let x = &x0 + &basis * y;
        return Ok(finish(x, SocpStatus::Optimal, 0.0, 0, vec![], sub.residual, 0.0));
    }

    // cone program over z = (t, y): minimize t, s = h - G z in K
    let ny = basis.ncols();
    let nz = ny + 1;
    let mut dims = vec![n + 1];
    dims.extend(std::iter::repeat_n(3, active.len()));
    let rows = n + 1 + 3 * active.len();
    let mut g = DMatrix::<f64>::zeros(rows, nz);
    let mut h = DVector::<f64>::zeros(rows);
    g[(0, 0)] = -1.0;
    g.view_mut((1, 1), (n, ny)).copy_from(&(-&rn));
    h.rows_mut(1, n).copy_from(&rx0);
    let mut off = n + 1;
    for (gc, hc) in &active {
        let gn = gc * &basis;
        g.view_mut((off + 1, 1), (2, ny)).copy_from(&(-gn));
        h[off] = *hc;
        h.rows_mut(off + 1, 2).copy_from(&(gc * &x0));
        off += 3;
    }
    let mut c = DVector::<f64>::zeros(nz);
    c[0] = 1.0;

    let res = solve_cone_program(&ConeProgram { g, h, c, dims }, settings)?;
    let mut status = res.status;
    if status != SocpStatus::Optimal && !phase_one_feasible(&active, &x0, &basis, settings)? {
        status = SocpStatus::Infeasible;
    }
    let y = res.x.rows(1, ny).into_owned();
    let x = &x0 + &basis * y;
    Ok(finish(
        x,
        status,
        res.gap,
        res.iterations,
        res.gap_history,
        res.pres,
        res.dres,
    ))
}

/// Minimizes the largest cone violation `u` with `‖G_i x‖ ≤ h_i + u` over the
/// affine subspace (inside a large ball); feasible when `u*` is not positive.
fn phase_one_feasible(
    active: &[(DMatrix<f64>, f64)],
    x0: &DVector<f64>,
    basis: &DMatrix<f64>,
    settings: &SocpSettings,
) -> Result<bool> {
    let ny = basis.ncols();
    let nz = ny + 1;
    let radius = 1e6 * x0.norm().max(1.0);
    let rows = 3 * active.len() + ny + 1;
    let mut g = DMatrix::<f64>::zeros(rows, nz);
    let mut h = DVector::<f64>::zeros(rows);
    let mut dims = Vec::new();
    let mut off = 0;
    for (gc, hc) in active {
        g[(off, 0)] = -1.0;
        h[off] = *hc;
        g.view_mut((off + 1, 1), (2, ny)).copy_from(&(-(gc * basis)));
        h.rows_mut(off + 1, 2).copy_from(&(gc * x0));
        dims.push(3);
        off += 3;
    }
    h[off] = radius;
    for j in 0..ny {
        g[(off + 1 + j, 1 + j)] = -1.0;
    }
    dims.push(ny + 1);
    let mut c = DVector::zeros(nz);
    c[0] = 1.0;
    let res = solve_cone_program(&ConeProgram { g, h, c, dims }, settings)?;
    let scale = 1.0 + active.iter().map(|(_, h)| *h).fold(0.0, f64::max);
    Ok(res.x[0] <= 1e3 * settings.feastol * scale)
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let y = crate::linalg::solve_least_squares(a, b);
    if y.iter().all(|v| v.is_finite()) {
        Ok(y)
    } else {
        Err(Error::Solver("least squares: rank-deficient objective".into()))
    }
}

/// `minimize cᵀx` subject to `G x + s = h`, `s` in a product of second-order cones.
#[derive(Debug, Clone)]
pub struct ConeProgram {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub c: DVector<f64>,
    /// Cone sizes in row order.
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ConeResult {
    pub x: DVector<f64>,
    pub s: DVector<f64>,
    pub z: DVector<f64>,
    pub status: SocpStatus,
    pub gap: f64,
    pub pres: f64,
    pub dres: f64,
    pub iterations: usize,
    pub gap_history: Vec<f64>,
}

/// Nesterov-Todd scaling of one cone: `W = β (2 v vᵀ - J)`.
#[derive(Debug, Clone)]
struct NtScaling {
    beta: f64,
    v: DVector<f64>,
}

impl NtScaling {
    fn new(s: &[f64], z: &[f64]) -> Option<Self> {
        let sn = jnorm(s)?;
        let zn = jnorm(z)?;
        let sb: Vec<f64> = s.iter().map(|v| v / sn).collect();
        let zb: Vec<f64> = z.iter().map(|v| v / zn).collect();
        let dot: f64 = sb.iter().zip(&zb).map(|(a, b)| a * b).sum();
        let gamma = ((1.0 + dot) / 2.0).sqrt();
        let k = s.len();
        let mut wb = DVector::zeros(k);
        wb[0] = (sb[0] + zb[0]) / (2.0 * gamma);
        for i in 1..k {
            wb[i] = (sb[i] - zb[i]) / (2.0 * gamma);
        }
        let mut v = wb.clone();
        v[0] += 1.0;
        let denom = (2.0 * (wb[0] + 1.0)).sqrt();
        v /= denom;
        Some(Self {
            beta: (sn / zn).sqrt(),
            v,
        })
    }

    /// `W u`
    fn apply(&self, u: &[f64]) -> DVector<f64> {
        let vu: f64 = self.v.iter().zip(u).map(|(a, b)| a * b).sum();
        DVector::from_fn(u.len(), |i, _| {
            let ju = if i == 0 { u[0] } else { -u[i] };
            self.beta * (2.0 * self.v[i] * vu - ju)
        })
    }

    /// `W⁻¹ u`
    fn apply_inverse(&self, u: &[f64]) -> DVector<f64> {
        let jv = |i: usize| if i == 0 { self.v[0] } else { -self.v[i] };
        let jvu: f64 = (0..u.len()).map(|i| jv(i) * u[i]).sum();
        DVector::from_fn(u.len(), |i, _| {
            let ju = if i == 0 { u[0] } else { -u[i] };
            (2.0 * jv(i) * jvu - ju) / self.beta
        })
    }
}

/// `sqrt(u₀² - ‖u₁‖²)` for `u` strictly inside the cone.
fn jnorm(u: &[f64]) -> Option<f64> {
    let tail: f64 = u[1..].iter().map(|v| v * v).sum();
    let d = (u[0] - tail.sqrt()) * (u[0] + tail.sqrt());
    (u[0] > 0.0 && d > 0.0).then(|| d.sqrt())
}

/// Jordan product `u ∘ v`.
fn jordan(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    out[0] = u.iter().zip(v).map(|(a, b)| a * b).sum();
    for i in 1..u.len() {
        out[i] = u[0] * v[i] + v[0] * u[i];
    }
    out
}

/// Solves `λ ∘ x = r`.
fn jordan_solve(lambda: &[f64], r: &[f64]) -> Vec<f64> {
    let l0 = lambda[0];
    let tail2: f64 = lambda[1..].iter().map(|v| v * v).sum();
    let ltr: f64 = lambda[1..].iter().zip(&r[1..]).map(|(a, b)| a * b).sum();
    let x0 = (l0 * r[0] - ltr) / (l0 * l0 - tail2);
    let mut out = vec![0.0; r.len()];
    out[0] = x0;
    for i in 1..r.len() {
        out[i] = (r[i] - x0 * lambda[i]) / l0;
    }
    out
}

/// Largest `α ≥ 0` with `u + α d` in the cone (infinite if unbounded).
fn max_step(u: &[f64], d: &[f64]) -> f64 {
    let qa = d[0] * d[0] - d[1..].iter().map(|v| v * v).sum::<f64>();
    let qb = u[0] * d[0] - u[1..].iter().zip(&d[1..]).map(|(a, b)| a * b).sum::<f64>();
    let qc = u[0] * u[0] - u[1..].iter().map(|v| v * v).sum::<f64>();
    // f(α) = qa α² + 2 qb α + qc, with qc > 0
    let mut best = f64::INFINITY;
    if qa.abs() <= 1e-300 {
        if qb < 0.0 {
            best = -qc / (2.0 * qb);
        }
    } else {
        let disc = qb * qb - qa * qc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let q = -(qb + qb.signum() * sq);
            for root in [q / qa, if q != 0.0 { qc / q } else { f64::INFINITY }] {
                if root > 0.0 && root < best {
                    best = root;
                }
            }
        }
    }
    // the cone axis itself must stay positive
    if d[0] < 0.0 {
        best = best.min(-u[0] / d[0]);
    }
    best
}

fn cone_ranges(dims: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &d in dims {
        out.push(off..off + d);
        off += d;
    }
    out
}

/// Shifts `u` into the cone interior along the identity element if needed.
fn shift_interior(u: &mut DVector<f64>, ranges: &[std::ops::Range<usize>]) {
    let mut worst = f64::NEG_INFINITY;
    for r in ranges {
        let seg = &u.as_slice()[r.clone()];
        let tail = seg[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(tail - seg[0]);
    }
    if worst >= -1e-8 {
        for r in ranges {
            u[r.start] += 1.0 + worst.max(0.0);
        }
    }
}

/// Mehrotra predictor-corrector with Nesterov-Todd scaling.
pub fn solve_cone_program(cp: &ConeProgram, settings: &SocpSettings) -> Result<ConeResult> {
    let (rows, nx) = cp.g.shape();
    if cp.h.len() != rows || cp.c.len() != nx || cp.dims.iter().sum::<usize>() != rows {
        return Err(Error::InvalidInput("cone program dimensions disagree".into()));
    }
    if cp.dims.iter().any(|&d| d < 1) {
        return Err(Error::InvalidInput("empty cone".into()));
    }
    let ranges = cone_ranges(&cp.dims);
    let degree = ranges.len() as f64;
    let g = &cp.g;
    let gt = g.transpose();
    let h = &cp.h;
    let c = &cp.c;
    let hnorm = h.norm().max(1.0);
    let cnorm = c.norm().max(1.0);

    // start: x = argmin ‖Gx - h‖, s = h - Gx; z = min-norm solution of Gᵀz = -c
    let gtg = &gt * g;
    let chol = gtg
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("G does not have full column rank".into()))?;
    let mut x = chol.solve(&(&gt * h));
    let mut s = h - g * &x;
    let mut z = -(g * chol.solve(c));
    shift_interior(&mut s, &ranges);
    shift_interior(&mut z, &ranges);
    let z0_norm = z.norm().max(1.0);

    let mut gap_history = Vec::new();
    let mut growth_count = 0usize;
    // (residual, x, s, z) of the most accurate iterate seen
    #[allow(clippy::type_complexity)]
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> = None;

    for iter in 0..=settings.max_iterations {
        let rx = &gt * &z + c;
        let rz = g * &x + &s - h;
        let gap = s.dot(&z);
        let pres = rz.norm() / hnorm;
        let dres = rx.norm() / cnorm;
        let pcost = c.dot(&x);
        let dcost = -h.dot(&z);
        let relgap = if pcost < 0.0 {
            gap / -pcost
        } else if dcost > 0.0 {
            gap / dcost
        } else {
            f64::INFINITY
        };
        gap_history.push(gap);

        let merit = pres.max(dres).max(gap.min(relgap));
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, x.clone(), s.clone(), z.clone()));
        }

        if pres <= settings.feastol && dres <= settings.feastol && (gap <= settings.abstol || relgap <= settings.reltol) {
            return Ok(ConeResult {
                x,
                s,
                z,
                status: SocpStatus::Optimal,
                gap,
                pres,
                dres,
                iterations: iter,
                gap_history,
            });
        }

        // primal infeasibility: hᵀz < 0 with Gᵀz ≈ 0 after normalization
        let hz = h.dot(&z);
        if hz < 0.0 && (&gt * &z).norm() <= settings.feastol * -hz {
            debug!("cone program infeasible by certificate at iteration {iter}");
            return Ok(infeasible(x, s, z, gap, pres, dres, iter, gap_history));
        }
        if z.norm() > settings.growth_limit * z0_norm {
            growth_count += 1;
            if growth_count >= settings.growth_iterations {
                debug!("cone program infeasible by divergence at iteration {iter}");
                return Ok(infeasible(x, s, z, gap, pres, dres, iter, gap_history));
            }
        } else {
            growth_count = 0;
        }
        if iter == settings.max_iterations {
            break;
        }

        // scaling
        let mut scalings = Vec::with_capacity(ranges.len());
        for r in &ranges {
            match NtScaling::new(&s.as_slice()[r.clone()], &z.as_slice()[r.clone()]) {
                Some(w) => scalings.push(w),
                None => break,
            }
        }
        if scalings.len() != ranges.len() {
            debug!("iterate reached the cone boundary at iteration {iter}");
            break;
        }
        let mut lambda = DVector::zeros(rows);
        for (w, r) in scalings.iter().zip(&ranges) {
            lambda.rows_mut(r.start, r.len()).copy_from(&w.apply(&z.as_slice()[r.clone()]));
        }
        let mu = gap / degree;

        let apply_inv = |u: &DVector<f64>| -> DVector<f64> {
            let mut out = DVector::zeros(rows);
            for (w, r) in scalings.iter().zip(&ranges) {
                out.rows_mut(r.start, r.len()).copy_from(&w.apply_inverse(&u.as_slice()[r.clone()]));
            }
            out
        };
        let apply_w = |u: &DVector<f64>| -> DVector<f64> {
            let mut out = DVector::zeros(rows);
            for (w, r) in scalings.iter().zip(&ranges) {
                out.rows_mut(r.start, r.len()).copy_from(&w.apply(&u.as_slice()[r.clone()]));
            }
            out
        };
        // Gs = W⁻¹ G, column by column
        let mut gs = DMatrix::zeros(rows, nx);
        for j in 0..nx {
            gs.set_column(j, &apply_inv(&g.column(j).into_owned()));
        }
        let mut hmat = gs.transpose() * &gs;
        let hchol = match hmat.clone().cholesky() {
            Some(ch) => ch,
            None => {
                // late iterations square an extreme scaling; a tiny diagonal shift
                // keeps the factorization alive and refinement below removes its bias
                let dmax = hmat.diagonal().max().max(f64::MIN_POSITIVE);
                let mut delta = 1e-14 * dmax;
                let mut found = None;
                while delta <= 1e-6 * dmax {
                    let mut shifted = hmat.clone();
                    for i in 0..nx {
                        shifted[(i, i)] += delta;
                    }
                    if let Some(ch) = shifted.clone().cholesky() {
                        hmat = shifted;
                        found = Some(ch);
                        break;
                    }
                    delta *= 100.0;
                }
                match found {
                    Some(ch) => {
                        debug!("Newton matrix regularized by {delta:e} at iteration {iter}");
                        ch
                    }
                    None => {
                        debug!("Newton matrix lost definiteness at iteration {iter}");
                        break;
                    }
                }
            }
        };
        let hexact = gs.transpose() * &gs;
        let winv_rz = apply_inv(&rz);

        let newton = |rc: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
            let mut q = DVector::zeros(rows);
            for r in &ranges {
                let sol = jordan_solve(&lambda.as_slice()[r.clone()], &rc.as_slice()[r.clone()]);
                q.rows_mut(r.start, r.len()).copy_from(&DVector::from_vec(sol));
            }
            let t = &winv_rz + &q;
            let rhs = -&rx - gs.transpose() * &t;
            let mut dx = hchol.solve(&rhs);
            for _ in 0..3 {
                let res = &rhs - &hexact * &dx;
                dx += hchol.solve(&res);
            }
            let dz = apply_inv(&(&gs * &dx + &t));
            let ds = -&rz - g * &dx;
            (dx, ds, dz)
        };

        let step_to_boundary = |s: &DVector<f64>, z: &DVector<f64>, ds: &DVector<f64>, dz: &DVector<f64>| -> f64 {
            let mut a = f64::INFINITY;
            for r in &ranges {
                a = a.min(max_step(&s.as_slice()[r.clone()], &ds.as_slice()[r.clone()]));
                a = a.min(max_step(&z.as_slice()[r.clone()], &dz.as_slice()[r.clone()]));
            }
            a
        };

        // predictor
        let mut rc_aff = DVector::zeros(rows);
        for r in &ranges {
            let l = &lambda.as_slice()[r.clone()];
            let ll = jordan(l, l);
            for (i, v) in ll.into_iter().enumerate() {
                rc_aff[r.start + i] = -v;
            }
        }
        let (_, ds_a, dz_a) = newton(&rc_aff);
        let alpha_aff = step_to_boundary(&s, &z, &ds_a, &dz_a).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3);
        let ds_scaled = apply_inv(&ds_a);
        let dz_scaled = apply_w(&dz_a);

        // corrector; without the second-order term the first-order gap change
        // is -(1 - σ) gap, so the uncorrected fallbacks always admit a step
        let centering = |sigma: f64, corrected: bool| -> DVector<f64> {
            let mut rc = DVector::zeros(rows);
            for r in &ranges {
                let l = &lambda.as_slice()[r.clone()];
                let ll = jordan(l, l);
                let corr = if corrected {
                    jordan(&ds_scaled.as_slice()[r.clone()], &dz_scaled.as_slice()[r.clone()])
                } else {
                    vec![0.0; r.len()]
                };
                for i in 0..r.len() {
                    let e = if i == 0 { 1.0 } else { 0.0 };
                    rc[r.start + i] = -ll[i] + sigma * mu * e - corr[i];
                }
            }
            rc
        };
        let mut accepted = false;
        for (sig, corrected) in [(sigma, true), (sigma.min(0.9), false), (0.5, false)] {
            let (dx, ds, dz) = newton(&centering(sig, corrected));
            let mut alpha = (settings.step_fraction * step_to_boundary(&s, &z, &ds, &dz)).min(1.0);
            if !(alpha > 0.0) {
                continue;
            }
            // never let the duality gap grow
            for _ in 0..40 {
                let s_new = &s + &ds * alpha;
                let z_new = &z + &dz * alpha;
                let interior = ranges.iter().all(|r| {
                    jnorm(&s_new.as_slice()[r.clone()]).is_some() && jnorm(&z_new.as_slice()[r.clone()]).is_some()
                });
                if interior && (s_new.dot(&z_new) <= gap.max(f64::MIN_POSITIVE) || gap <= settings.abstol * 1e-3) {
                    x += &dx * alpha;
                    s = s_new;
                    z = z_new;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            debug!("no gap-decreasing step at iteration {iter}");
            break;
        }
    }

    let (_, bx, bs, bz) = best.expect("at least one iterate");
    let rz = g * &bx + &bs - h;
    let rx = &gt * &bz + c;
    Ok(ConeResult {
        gap: bs.dot(&bz),
        pres: rz.norm() / hnorm,
        dres: rx.norm() / cnorm,
        x: bx,
        s: bs,
        z: bz,
        status: SocpStatus::MaxIterations,
        iterations: gap_history.len().saturating_sub(1),
        gap_history,
    })
}

#[allow(clippy::too_many_arguments)]
fn infeasible(
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    gap: f64,
    pres: f64,
    dres: f64,
    iterations: usize,
    gap_history: Vec<f64>,
) -> ConeResult {
    ConeResult {
        x,
        s,
        z,
        status: SocpStatus::Infeasible,
        gap,
        pres,
        dres,
        iterations,
        gap_history,
    }
}

/// ATF-form bound `|e ŵ_R^H b b_R|` of a cue constraint `|w^H Λ2,i| ≤ f`.
pub fn atf_bound(tau: f64, bmvdr_itf_error: f64, b: &CVec, previous_right: &CVec, ref_right: usize) -> f64 {
    (c64(tau * bmvdr_itf_error, 0.0) * previous_right.dotc(b) * b[ref_right]).norm()
}

/// `|w^H Λ2,i|` for the joint cue column `[b b_R; -b b_L]`.
pub fn atf_cue_magnitude(w: &CVec, b: &CVec, ref_left: usize, ref_right: usize) -> f64 {
    let m = b.len();
    let l: C64 = w.rows(0, m).dotc(b);
    let r: C64 = w.rows(m, m).dotc(b);
    (l * b[ref_right] - r * b[ref_left]).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcmv::tests::{random_cvec, random_instance};
    use crate::lcmv::{bmvdr, jblcmv};
    use crate::linalg::CMat;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binaural_lift_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_cvec(&mut rng, 8);
        assert_eq!(unlift_binaural(&lift_binaural(&w)), w);
    }

    #[test]
    fn identity_lifts_to_identity() {
        let p = BlockCpsd::new(&CMat::identity(4, 4)).unwrap();
        let lifted = lifted_cpsd(&p);
        let loaded = 1.0 + crate::lcmv::DIAGONAL_LOADING;
        assert!((lifted - DMatrix::identity(16, 16) * loaded).amax() < 1e-15);
    }

    #[test]
    fn quadratic_form_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..100 {
            let (p, _, _) = random_instance(seed, 4, 3);
            let w = random_cvec(&mut rng, 8);
            let x = lift_binaural(&w);
            let complex = p.quadratic_form(&w);
            let real = x.dot(&(lifted_cpsd(&p) * &x));
            assert!((complex - real).abs() <= 1e-10 * complex.abs());
            // the objective factor reproduces the same form
            let prob = lift_subproblem(&p, &random_cvec(&mut rng, 4), &[], &[], 0, 3).unwrap();
            let t = prob.objective(&x);
            assert!((t * t - complex).abs() <= 1e-10 * complex);
        }
    }

    #[test]
    fn cue_magnitude_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let b = random_cvec(&mut rng, 4);
            let w = random_cvec(&mut rng, 8);
            let phi = ratf_cue_vector(&b, 0, 3);
            let complex = phi.dotc(&w).norm();
            let real = (lift_functional(&phi) * lift_binaural(&w)).norm();
            assert!((complex - real).abs() < 1e-12 * complex.max(1.0));
        }
    }

    #[test]
    fn equalities_encode_distortionless_response() {
        let (p, a, _) = random_instance(4, 4, 0);
        let prob = lift_subproblem(&p, &a, &[], &[], 0, 3).unwrap();
        let w = bmvdr(&p, &a, 0, 3).unwrap();
        assert!(prob.equality_residual(&lift_binaural(w.w())) < 1e-12);
    }

    #[test]
    fn ratf_and_atf_forms_agree() {
        // |Λ2,i^H w| = |b_L b_R| |φ_i^H w| and the bounds scale the same way
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_cvec(&mut rng, 4);
            let b = random_cvec(&mut rng, 4);
            let w = random_cvec(&mut rng, 8);
            let prev_r = random_cvec(&mut rng, 4);
            let tau = rng.random_range(0.0..1.0);
            let scale = (b[0] * b[3]).norm();
            let lhs_atf = atf_cue_magnitude(&w, &b, 0, 3);
            let lhs_ratf = ratf_cue_vector(&b, 0, 3).dotc(&w).norm();
            assert!((lhs_atf - scale * lhs_ratf).abs() <= 1e-12 * lhs_atf.max(1.0));
            let e_b = (a[0] / a[3] - b[0] / b[3]).norm();
            let f_atf = atf_bound(tau, e_b, &b, &prev_r, 3);
            let q_ratf = ratf_bound(tau, zeta(&a, &b, 0, 3), &b, &prev_r, 3);
            assert!((f_atf - scale * q_ratf).abs() <= 1e-12 * f_atf.max(1e-300));
        }
    }

    #[test]
    fn nt_scaling_maps_z_to_inverse_s() {
        let s = [2.0, 0.3, -0.5, 0.1];
        let z = [1.5, -0.4, 0.2, 0.7];
        let w = NtScaling::new(&s, &z).unwrap();
        let wz = w.apply(&z);
        let wis = w.apply_inverse(&s);
        assert!((wz - wis).amax() < 1e-12);
        let back = w.apply_inverse(w.apply(&[0.3, 1.0, -2.0, 0.5]).as_slice());
        assert!((back - DVector::from_vec(vec![0.3, 1.0, -2.0, 0.5])).amax() < 1e-12);
    }

    #[test]
    fn jordan_solve_inverts_product() {
        let l = [2.0, 0.5, -0.3];
        let x = [0.7, -1.2, 0.4];
        let r = jordan(&l, &x);
        let back = jordan_solve(&l, &r);
        for (a, b) in back.iter().zip(x) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn max_step_hits_boundary() {
        let u = [1.0, 0.0];
        let d = [-1.0, 1.0];
        // (1 - α)² = α² → α = 0.5
        assert!((max_step(&u, &d) - 0.5).abs() < 1e-15);
        assert!(max_step(&u, &[1.0, 0.0]).is_infinite());
    }

    #[test]
    fn small_cone_program() {
        // minimize x1 + x2 subject to ‖(x1, x2)‖ ≤ 1  →  optimum -√2
        let cp = ConeProgram {
            g: DMatrix::from_row_slice(3, 2, &[0.0, 0.0, -1.0, 0.0, 0.0, -1.0]),
            h: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            c: DVector::from_vec(vec![1.0, 1.0]),
            dims: vec![3],
        };
        let res = solve_cone_program(&cp, &SocpSettings::default()).unwrap();
        assert_eq!(res.status, SocpStatus::Optimal);
        assert!((cp.c.dot(&res.x) + 2f64.sqrt()).abs() < 1e-8);
        // complementary slackness
        assert!(res.s.dot(&res.z).abs() <= 10.0 * 1e-9);
        for w in res.gap_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn inactive_cones_give_bmvdr() {
        for seed in 0..20 {
            let (p, a, bs) = random_instance(seed, 4, 3);
            let bounds = vec![1e6; bs.len()];
            let prob = lift_subproblem(&p, &a, &bs, &bounds, 0, 3).unwrap();
            let sol = solve_socp(&prob, &SocpSettings::default()).unwrap();
            assert_eq!(sol.status, SocpStatus::Optimal);
            let wb = bmvdr(&p, &a, 0, 3).unwrap();
            let jb = wb.noise_power(&p);
            let js = p.quadratic_form(&sol.w);
            assert!((js - jb).abs() <= 1e-6 * jb, "seed {seed}: {js} vs {jb}");
            assert!(sol.iterations > 0);
        }
    }

    #[test]
    fn zero_cones_give_jblcmv() {
        for seed in 0..20 {
            let (p, a, bs) = random_instance(50 + seed, 4, 3);
            let prob = lift_subproblem(&p, &a, &bs, &[0.0; 3], 0, 3).unwrap();
            let sol = solve_socp(&prob, &SocpSettings::default()).unwrap();
            assert_eq!(sol.status, SocpStatus::Optimal);
            let (wj, _) = jblcmv(&p, &a, &bs, 0, 3).unwrap();
            let rel = (&sol.w - wj.w()).norm() / wj.w().norm();
            assert!(rel < 1e-6, "seed {seed}: {rel}");
        }
    }

    #[test]
    fn tight_cones_approach_jblcmv_through_the_interior_point_path() {
        let settings = SocpSettings {
            presolve_zero_cones: false,
            ..SocpSettings::default()
        };
        for seed in 0..10 {
            let (p, a, bs) = random_instance(80 + seed, 4, 2);
            let prob = lift_subproblem(&p, &a, &bs, &[1e-9; 2], 0, 3).unwrap();
            let sol = solve_socp(&prob, &settings).unwrap();
            assert_eq!(sol.status, SocpStatus::Optimal);
            assert!(sol.iterations > 0);
            let (wj, _) = jblcmv(&p, &a, &bs, 0, 3).unwrap();
            let jj = wj.noise_power(&p);
            let js = p.quadratic_form(&sol.w);
            assert!((js - jj).abs() <= 1e-5 * jj, "seed {seed}: {js} vs {jj}");
        }
    }

    #[test]
    fn contradictory_equalities_are_infeasible() {
        let (p, a, _) = random_instance(7, 4, 0);
        let mut prob = lift_subproblem(&p, &a, &[], &[], 0, 3).unwrap();
        let v = prob.eq_matrix.column(0).into_owned();
        prob.eq_matrix = DMatrix::from_columns(&[v.clone(), v]);
        prob.eq_rhs = DVector::from_vec(vec![0.0, 1.0]);
        let sol = solve_socp(&prob, &SocpSettings::default()).unwrap();
        assert_eq!(sol.status, SocpStatus::Infeasible);
    }

    #[test]
    fn disjoint_balls_are_infeasible() {
        // x3 = 1; ‖(x1 - x3, x2)‖ ≤ 0.1 and ‖(x1 + x3, x2)‖ ≤ 0.1 cannot both hold
        let row = |v: [f64; 4]| DMatrix::from_row_slice(1, 4, &v);
        let cone = |sign: f64| NormCone {
            g: DMatrix::from_rows(&[
                row([1.0, 0.0, sign, 0.0]).row(0).into_owned(),
                row([0.0, 1.0, 0.0, 0.0]).row(0).into_owned(),
            ]),
            h: 0.1,
        };
        let prob = SocpProblem {
            objective_factor: DMatrix::identity(4, 4),
            objective_scale: 1.0,
            eq_matrix: DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 0.0]),
            eq_rhs: DVector::from_vec(vec![1.0]),
            cones: vec![cone(-1.0), cone(1.0)],
            zeta: vec![],
            ref_left: 0,
            ref_right: 1,
        };
        let sol = solve_socp(&prob, &SocpSettings::default()).unwrap();
        assert_eq!(sol.status, SocpStatus::Infeasible);

        // overlapping balls are fine
        let mut ok = prob.clone();
        ok.cones[0].h = 1.5;
        ok.cones[1].h = 1.5;
        let sol = solve_socp(&ok, &SocpSettings::default()).unwrap();
        assert_eq!(sol.status, SocpStatus::Optimal);
        assert!(ok.cone_violation(&sol.x) <= 1e-8);
    }

    proptest! {
        #[test]
        fn zero_bounds_match_closed_form(seed in any::<u64>(), m in 2usize..=4, r in 0usize..=5) {
            let r = r.min(2 * m - 3);
            let (p, a, bs) = random_instance(seed, m, r);
            let prob = lift_subproblem(&p, &a, &bs, &vec![0.0; r], 0, m - 1).unwrap();
            let sol = solve_socp(&prob, &SocpSettings::default()).unwrap();
            prop_assert_eq!(sol.status, SocpStatus::Optimal);
            let (wj, _) = jblcmv(&p, &a, &bs, 0, m - 1).unwrap();
            let jj = wj.noise_power(&p);
            prop_assert!((p.quadratic_form(&sol.w) - jj).abs() <= 1e-5 * jj);
            prop_assert!((&sol.w - wj.w()).norm() <= 1e-5 * wj.w().norm());
        }

        #[test]
        fn relaxed_bounds_are_respected(seed in any::<u64>(), frac in 0.05f64..0.95) {
            let (p, a, bs) = random_instance(seed, 4, 2);
            let wb = bmvdr(&p, &a, 0, 3).unwrap();
            // bounds at a fraction of the BMVDR cue magnitudes keep JBLCMV strictly feasible
            let bounds: Vec<f64> = bs.iter().map(|b| frac * ratf_cue_vector(b, 0, 3).dotc(wb.w()).norm()).collect();
            let prob = lift_subproblem(&p, &a, &bs, &bounds, 0, 3).unwrap();
            let sol = solve_socp(&prob, &SocpSettings::default()).unwrap();
            prop_assert_eq!(sol.status, SocpStatus::Optimal);
            prop_assert!(prob.cone_violation(&sol.x) <= 1e-7);
            prop_assert!(prob.equality_residual(&sol.x) <= 1e-8);
            let (wj, _) = jblcmv(&p, &a, &bs, 0, 3).unwrap();
            let js = p.quadratic_form(&sol.w);
            prop_assert!(js <= wj.noise_power(&p) * (1.0 + 1e-7));
            prop_assert!(js >= wb.noise_power(&p) * (1.0 - 1e-7));
            for w in sol.gap_history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
