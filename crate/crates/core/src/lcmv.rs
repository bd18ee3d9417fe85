//! Binaural LCMV family: the closed-form GBLCMV solver and the constraint
//! builders of BMVDR, BLCMV, OBLCMV and JBLCMV.

use std::fmt;

use log::{debug, warn};
use nalgebra::{Cholesky, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c64, dependent_columns, hermitian_defect, max_abs, numerical_rank, CMat, CVec, C64, RANK_TOL};
use crate::scene::reference_entries_ok;

/// Relative diagonal loading applied to every CPSD before inversion.
pub const DIAGONAL_LOADING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bmvdr,
    Blcmv,
    Oblcmv,
    Jblcmv,
    Relaxed,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Bmvdr => "bmvdr",
            Method::Blcmv => "blcmv",
            Method::Oblcmv => "oblcmv",
            Method::Jblcmv => "jblcmv",
            Method::Relaxed => "relaxed",
        })
    }
}

/// Stacked left/right filter `w = [w_L; w_R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinauralFilter {
    w: CVec,
    ref_left: usize,
    ref_right: usize,
}

impl BinauralFilter {
    pub fn new(w: CVec, ref_left: usize, ref_right: usize) -> Result<Self> {
        let n = w.len();
        if n < 4 || !n.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("filter length {n} is not 2M with M >= 2")));
        }
        let m = n / 2;
        if ref_left >= m || ref_right >= m || ref_left == ref_right {
            return Err(Error::InvalidInput("invalid reference channels".into()));
        }
        if w.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Solver("non-finite filter weights".into()));
        }
        Ok(Self { w, ref_left, ref_right })
    }

    pub fn from_parts(left: &CVec, right: &CVec, ref_left: usize, ref_right: usize) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::InvalidInput("left and right filters differ in length".into()));
        }
        let m = left.len();
        let w = CVec::from_fn(2 * m, |i, _| if i < m { left[i] } else { right[i - m] });
        Self::new(w, ref_left, ref_right)
    }

    /// Pass-through filter selecting the reference microphones.
    pub fn selection(mic_count: usize, ref_left: usize, ref_right: usize) -> Result<Self> {
        let mut w = CVec::zeros(2 * mic_count);
        if ref_left < mic_count && ref_right < mic_count {
            w[ref_left] = c64(1.0, 0.0);
            w[mic_count + ref_right] = c64(1.0, 0.0);
        }
        Self::new(w, ref_left, ref_right)
    }

    pub fn w(&self) -> &CVec {
        &self.w
    }

    pub fn mic_count(&self) -> usize {
        self.w.len() / 2
    }

    pub fn refs(&self) -> (usize, usize) {
        (self.ref_left, self.ref_right)
    }

    pub fn left(&self) -> CVec {
        self.w.rows(0, self.mic_count()).into_owned()
    }

    pub fn right(&self) -> CVec {
        let m = self.mic_count();
        self.w.rows(m, m).into_owned()
    }

    /// `(w_L^H v, w_R^H v)`
    pub fn response(&self, v: &CVec) -> (C64, C64) {
        let m = self.mic_count();
        (
            self.w.rows(0, m).dotc(v),
            self.w.rows(m, m).dotc(v),
        )
    }

    /// `w^H P̃ w` with the loaded CPSD.
    pub fn noise_power(&self, p: &BlockCpsd) -> f64 {
        p.quadratic_form(&self.w)
    }
}

/// Loaded CPSD `P` with its Cholesky factor; stands for `P̃ = diag(P, P)`.
#[derive(Debug, Clone)]
pub struct BlockCpsd {
    p: CMat,
    chol: Cholesky<C64, Dyn>,
    loading: f64,
}

impl BlockCpsd {
    pub fn new(p: &CMat) -> Result<Self> {
        let m = p.nrows();
        if m == 0 || p.ncols() != m {
            return Err(Error::InvalidInput("CPSD must be square and non-empty".into()));
        }
        let scale = max_abs(p);
        if !(scale.is_finite()) || hermitian_defect(p) > 1e-8 * scale {
            return Err(Error::NotPositiveDefinite("CPSD is not Hermitian".into()));
        }
        let trace: f64 = (0..m).map(|i| p[(i, i)].re).sum();
        if !(trace > 0.0) {
            return Err(Error::NotPositiveDefinite("CPSD trace is not positive".into()));
        }
        let loading = DIAGONAL_LOADING * trace / m as f64;
        let mut loaded = (p + p.adjoint()) * c64(0.5, 0.0);
        for i in 0..m {
            loaded[(i, i)] += c64(loading, 0.0);
        }
        let chol = Cholesky::new(loaded.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
        Ok(Self {
            p: loaded,
            chol,
            loading,
        })
    }

    pub fn mic_count(&self) -> usize {
        self.p.nrows()
    }

    /// Loaded `P`.
    pub fn p(&self) -> &CMat {
        &self.p
    }

    pub fn loading(&self) -> f64 {
        self.loading
    }

    /// Lower-triangular `L` with `L L^H = P`.
    pub fn cholesky_factor(&self) -> CMat {
        self.chol.l()
    }

    /// Dense `diag(P, P)`.
    pub fn p_tilde(&self) -> CMat {
        let m = self.mic_count();
        let mut out = CMat::zeros(2 * m, 2 * m);
        out.view_mut((0, 0), (m, m)).copy_from(&self.p);
        out.view_mut((m, m), (m, m)).copy_from(&self.p);
        out
    }

    /// `P^{-1} B`
    pub fn solve(&self, b: &CMat) -> CMat {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &CVec) -> CVec {
        self.chol.solve(b)
    }

    /// `P̃^{-1} B` for `B` with `2M` rows.
    pub fn solve_block(&self, b: &CMat) -> CMat {
        let m = self.mic_count();
        let top = self.solve(&b.rows(0, m).into_owned());
        let bottom = self.solve(&b.rows(m, m).into_owned());
        let mut out = CMat::zeros(2 * m, b.ncols());
        out.rows_mut(0, m).copy_from(&top);
        out.rows_mut(m, m).copy_from(&bottom);
        out
    }

    /// `w^H P̃ w` for a stacked `2M` vector.
    pub fn quadratic_form(&self, w: &CVec) -> f64 {
        let m = self.mic_count();
        let wl = w.rows(0, m);
        let wr = w.rows(m, m);
        (wl.dotc(&(&self.p * wl)) + wr.dotc(&(&self.p * wr))).re
    }
}

/// `Λ = [Λ1 | Λ2]` and `f = [f1; f2]`.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub lambda: CMat,
    pub f: CVec,
    /// Number of target-block columns.
    pub d1: usize,
    pub method: Method,
    /// Indices into the interferer list passed to the builder that received constraints.
    pub constrained: Vec<usize>,
    /// Interferers dropped at this bin by the reference-channel guard.
    pub dropped: Vec<usize>,
    /// Interferers left out because the count exceeded the method's maximum.
    pub truncated: Vec<usize>,
    pub ref_left: usize,
    pub ref_right: usize,
}

impl ConstraintSet {
    pub fn d(&self) -> usize {
        self.lambda.ncols()
    }

    /// `2M - d`
    pub fn degrees_of_freedom(&self) -> isize {
        self.lambda.nrows() as isize - self.d() as isize
    }

    pub fn residual(&self, w: &CVec) -> f64 {
        (self.lambda.adjoint() * w - &self.f).norm()
    }

    fn push(&mut self, column: CVec, response: C64) {
        let n = self.lambda.ncols();
        self.lambda = self.lambda.clone().insert_column(n, c64(0.0, 0.0));
        self.lambda.set_column(n, &column);
        self.f = self.f.clone().push(response);
    }
}

fn check_refs(m: usize, ref_left: usize, ref_right: usize) -> Result<()> {
    if ref_left >= m || ref_right >= m || ref_left == ref_right {
        return Err(Error::InvalidInput(format!(
            "reference channels ({ref_left}, {ref_right}) invalid for {m} microphones"
        )));
    }
    Ok(())
}

fn stack(top: &CVec, bottom: &CVec) -> CVec {
    let m = top.len();
    CVec::from_fn(2 * m, |i, _| if i < m { top[i] } else { bottom[i - m] })
}

/// `Λ1 = [[a, 0], [0, a]]`, `f1 = [a_L*, a_R*]`.
pub fn build_target_constraints(a: &CVec, ref_left: usize, ref_right: usize) -> Result<ConstraintSet> {
    let m = a.len();
    check_refs(m, ref_left, ref_right)?;
    if !reference_entries_ok(a, ref_left, ref_right) {
        return Err(Error::DegenerateConstraint(
            "target ATF vanishes at a reference microphone".into(),
        ));
    }
    let zero = CVec::zeros(m);
    let lambda = CMat::from_columns(&[stack(a, &zero), stack(&zero, a)]);
    let f = CVec::from_vec(vec![a[ref_left].conj(), a[ref_right].conj()]);
    Ok(ConstraintSet {
        lambda,
        f,
        d1: 2,
        method: Method::Bmvdr,
        constrained: Vec::new(),
        dropped: Vec::new(),
        truncated: Vec::new(),
        ref_left,
        ref_right,
    })
}

/// Splits interferer indices into usable and guard-dropped, then truncates to `max`.
fn select_interferers(
    bs: &[CVec],
    m: usize,
    ref_left: usize,
    ref_right: usize,
    max: usize,
    method: Method,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut usable = Vec::new();
    let mut dropped = Vec::new();
    for (i, b) in bs.iter().enumerate() {
        if b.len() != m {
            return Err(Error::InvalidInput(format!(
                "interferer {i} ATF has length {}, expected {m}",
                b.len()
            )));
        }
        if reference_entries_ok(b, ref_left, ref_right) {
            usable.push(i);
        } else {
            warn!("{method}: interferer {i} dropped, reference ATF below guard");
            dropped.push(i);
        }
    }
    let truncated = if usable.len() > max {
        debug!(
            "{method}: {} interferers exceed the maximum of {max}; keeping the first {max}",
            usable.len()
        );
        usable.split_off(max)
    } else {
        Vec::new()
    };
    Ok((usable, dropped, truncated))
}

/// Closed-form GBLCMV solution.
pub fn solve_gblcmv(p: &BlockCpsd, constraints: &ConstraintSet) -> Result<BinauralFilter> {
    let n = constraints.lambda.nrows();
    let d = constraints.d();
    let m = p.mic_count();
    if n != 2 * m || constraints.f.len() != d {
        return Err(Error::InvalidInput(
            "constraint dimensions do not match the CPSD".into(),
        ));
    }
    if d > n {
        return Err(Error::InfeasibleByCount {
            constraints: d,
            max: n,
        });
    }
    if numerical_rank(&constraints.lambda, RANK_TOL) < d {
        return Err(Error::RankDeficient {
            columns: dependent_columns(&constraints.lambda, RANK_TOL),
        });
    }
    let lambda = &constraints.lambda;
    let f = &constraints.f;
    let w = if d == n {
        let lu = lambda.adjoint().lu();
        let mut w = lu
            .solve(f)
            .ok_or_else(|| Error::RankDeficient { columns: Vec::new() })?;
        let r = f - lambda.adjoint() * &w;
        if let Some(dw) = lu.solve(&r) {
            w += dw;
        }
        w
    } else {
        let x = p.solve_block(lambda);
        let mut gram = lambda.adjoint() * &x;
        let gh = gram.adjoint();
        gram = (gram + gh) * c64(0.5, 0.0);
        let solve_gram = |rhs: &CVec| -> Result<CVec> {
            match Cholesky::new(gram.clone()) {
                Some(ch) => Ok(ch.solve(rhs)),
                None => gram
                    .clone()
                    .lu()
                    .solve(rhs)
                    .ok_or_else(|| Error::RankDeficient { columns: Vec::new() }),
            }
        };
        let mut w = &x * solve_gram(f)?;
        // one refinement step on the constraint residual
        let r = f - lambda.adjoint() * &w;
        w += &x * solve_gram(&r)?;
        w
    };
    BinauralFilter::new(w, constraints.ref_left, constraints.ref_right)
}

/// BMVDR closed form.
pub fn bmvdr(p: &BlockCpsd, a: &CVec, ref_left: usize, ref_right: usize) -> Result<BinauralFilter> {
    let m = p.mic_count();
    if a.len() != m {
        return Err(Error::InvalidInput("ATF length differs from the CPSD size".into()));
    }
    check_refs(m, ref_left, ref_right)?;
    if !reference_entries_ok(a, ref_left, ref_right) {
        return Err(Error::DegenerateConstraint(
            "target ATF vanishes at a reference microphone".into(),
        ));
    }
    let x = p.solve_vec(a);
    let denom = a.dotc(&x).re;
    if !(denom > 0.0) {
        return Err(Error::NotPositiveDefinite("a^H P^-1 a is not positive".into()));
    }
    let left = &x * (a[ref_left].conj() / denom);
    let right = &x * (a[ref_right].conj() / denom);
    BinauralFilter::from_parts(&left, &right, ref_left, ref_right)
}

/// BLCMV constraints with real rejection parameters `η_L`, `η_R` in `[0, 1)`.
pub fn build_blcmv_constraints(
    a: &CVec,
    bs: &[CVec],
    eta_left: f64,
    eta_right: f64,
    ref_left: usize,
    ref_right: usize,
) -> Result<ConstraintSet> {
    for eta in [eta_left, eta_right] {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::Parameter(format!("η = {eta} outside [0, 1)")));
        }
    }
    let m = a.len();
    let mut cs = build_target_constraints(a, ref_left, ref_right)?;
    cs.method = Method::Blcmv;
    let (usable, dropped, truncated) =
        select_interferers(bs, m, ref_left, ref_right, m.saturating_sub(2), Method::Blcmv)?;
    let zero = CVec::zeros(m);
    for &i in &usable {
        let b = &bs[i];
        cs.push(stack(b, &zero), c64(eta_left, 0.0) * b[ref_left].conj());
        cs.push(stack(&zero, b), c64(eta_right, 0.0) * b[ref_right].conj());
    }
    cs.constrained = usable;
    cs.dropped = dropped;
    cs.truncated = truncated;
    Ok(cs)
}

/// Single-interferer BLCMV constraints with a common complex `η` in both ears,
/// so that `w_L^H b = η b_L` and `w_R^H b = η b_R`.
pub fn build_oblcmv_constraints(
    a: &CVec,
    b: &CVec,
    eta: C64,
    ref_left: usize,
    ref_right: usize,
) -> Result<ConstraintSet> {
    let m = a.len();
    let mut cs = build_target_constraints(a, ref_left, ref_right)?;
    cs.method = Method::Oblcmv;
    let (usable, dropped, _) =
        select_interferers(std::slice::from_ref(b), m, ref_left, ref_right, 1, Method::Oblcmv)?;
    if !usable.is_empty() {
        let zero = CVec::zeros(m);
        cs.push(stack(b, &zero), (eta * b[ref_left]).conj());
        cs.push(stack(&zero, b), (eta * b[ref_right]).conj());
    }
    cs.constrained = usable;
    cs.dropped = dropped;
    Ok(cs)
}

/// Binaural output SNR at one bin: `p_s (|w_L^H a|² + |w_R^H a|²) / w^H P̃ w`.
pub fn binaural_output_snr(p: &BlockCpsd, a: &CVec, target_psd: f64, w: &BinauralFilter) -> f64 {
    let (l, r) = w.response(a);
    target_psd * (l.norm_sqr() + r.norm_sqr()) / w.noise_power(p)
}

/// OBLCMV: BLCMV with the complex `η̂` that maximizes the binaural output SNR.
///
/// The distortionless constraints fix the output target power, so the search
/// minimizes the GBLCMV optimum `f^H (Λ^H P̃^{-1} Λ)^{-1} f` over `η`.
pub fn oblcmv(
    p: &BlockCpsd,
    a: &CVec,
    b: &CVec,
    ref_left: usize,
    ref_right: usize,
) -> Result<(BinauralFilter, C64)> {
    let m = p.mic_count();
    if m < 3 {
        return Err(Error::Parameter(format!(
            "OBLCMV needs at least 3 microphones, got {m}"
        )));
    }
    let base = build_oblcmv_constraints(a, b, c64(0.0, 0.0), ref_left, ref_right)?;
    if base.constrained.is_empty() {
        let w = bmvdr(p, a, ref_left, ref_right)?;
        return Ok((w, c64(0.0, 0.0)));
    }
    if numerical_rank(&base.lambda, RANK_TOL) < base.d() {
        return Err(Error::RankDeficient {
            columns: dependent_columns(&base.lambda, RANK_TOL),
        });
    }
    let x = p.solve_block(&base.lambda);
    let gram = base.lambda.adjoint() * &x;
    let gram = (&gram + gram.adjoint()) * c64(0.5, 0.0);
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::NotPositiveDefinite("constraint Gram matrix".into()))?;
    let f_of = |eta: C64| {
        let mut f = base.f.clone();
        f[2] = (eta * b[ref_left]).conj();
        f[3] = (eta * b[ref_right]).conj();
        f
    };
    let cost = |eta: C64| {
        let f = f_of(eta);
        f.dotc(&chol.solve(&f)).re
    };

    // coarse grid on the unit disc
    const GRID: usize = 21;
    let mut best = c64(0.0, 0.0);
    let mut best_cost = cost(best);
    for i in 0..GRID {
        for j in 0..GRID {
            let eta = c64(
                -1.0 + 2.0 * i as f64 / (GRID - 1) as f64,
                -1.0 + 2.0 * j as f64 / (GRID - 1) as f64,
            );
            if eta.norm() > 1.0 {
                continue;
            }
            let c = cost(eta);
            if c < best_cost {
                best_cost = c;
                best = eta;
            }
        }
    }

    // compass search; free to leave the disc
    let mut step = 2.0 / (GRID - 1) as f64;
    let dirs = [c64(1.0, 0.0), c64(-1.0, 0.0), c64(0.0, 1.0), c64(0.0, -1.0)];
    while step > 1e-13 {
        let mut improved = false;
        for d in dirs {
            let cand = best + d * step;
            let c = cost(cand);
            if c < best_cost {
                best_cost = c;
                best = cand;
                improved = true;
                break;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }

    let cs = build_oblcmv_constraints(a, b, best, ref_left, ref_right)?;
    let w = solve_gblcmv(p, &cs)?;
    Ok((w, best))
}

/// JBLCMV constraints: column `[b_i b_iR; -b_i b_iL]` with zero response per interferer.
pub fn build_jblcmv_constraints(
    a: &CVec,
    bs: &[CVec],
    ref_left: usize,
    ref_right: usize,
) -> Result<ConstraintSet> {
    let m = a.len();
    let mut cs = build_target_constraints(a, ref_left, ref_right)?;
    cs.method = Method::Jblcmv;
    let (usable, dropped, truncated) =
        select_interferers(bs, m, ref_left, ref_right, jblcmv_max_interferers(m), Method::Jblcmv)?;
    for &i in &usable {
        cs.push(jblcmv_column(&bs[i], ref_left, ref_right), c64(0.0, 0.0));
    }
    cs.constrained = usable;
    cs.dropped = dropped;
    cs.truncated = truncated;
    Ok(cs)
}

/// `[b b_R; -b b_L]`
pub fn jblcmv_column(b: &CVec, ref_left: usize, ref_right: usize) -> CVec {
    stack(&(b * b[ref_right]), &(b * -b[ref_left]))
}

/// Largest interferer count JBLCMV can preserve with positive degrees of freedom.
pub fn jblcmv_max_interferers(mic_count: usize) -> usize {
    (2 * mic_count).saturating_sub(3)
}

pub fn blcmv(
    p: &BlockCpsd,
    a: &CVec,
    bs: &[CVec],
    eta_left: f64,
    eta_right: f64,
    ref_left: usize,
    ref_right: usize,
) -> Result<(BinauralFilter, ConstraintSet)> {
    let cs = build_blcmv_constraints(a, bs, eta_left, eta_right, ref_left, ref_right)?;
    let w = solve_gblcmv(p, &cs)?;
    Ok((w, cs))
}

pub fn jblcmv(
    p: &BlockCpsd,
    a: &CVec,
    bs: &[CVec],
    ref_left: usize,
    ref_right: usize,
) -> Result<(BinauralFilter, ConstraintSet)> {
    let cs = build_jblcmv_constraints(a, bs, ref_left, ref_right)?;
    let w = solve_gblcmv(p, &cs)?;
    Ok((w, cs))
}
