//! Relaxed binaural LCMV beamformer: per-interferer ITF error budgets enforced
//! through a sequence of convex cone subproblems with a shrinking bound.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcmv::{bmvdr, jblcmv, jblcmv_max_interferers, BinauralFilter, BlockCpsd};
use crate::linalg::CVec;
use crate::metrics::{bmvdr_itf_error, itf_error};
use crate::scene::reference_entries_ok;
use crate::socp::{lift_subproblem, ratf_bound, solve_socp, SocpSettings, SocpStatus};

/// Absolute slack of the stopping criterion.
pub const CRITERION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationParams {
    /// Trade-off per interferer, each in `[0, 1]`.
    pub c: Vec<f64>,
    pub k_max: usize,
    pub criterion_tol: f64,
    pub socp: SocpSettings,
}

impl RelaxationParams {
    pub fn new(c: Vec<f64>, k_max: usize) -> Result<Self> {
        let p = Self {
            c,
            k_max,
            criterion_tol: CRITERION_TOL,
            socp: SocpSettings::default(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Same `c` for `r` interferers.
    pub fn uniform(c: f64, r: usize, k_max: usize) -> Result<Self> {
        Self::new(vec![c; r], k_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max < 1 {
            return Err(Error::Parameter("k_max must be at least 1".into()));
        }
        for &c in &self.c {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Parameter(format!("c = {c} outside [0, 1]")));
            }
        }
        if !(self.criterion_tol >= 0.0) {
            return Err(Error::Parameter("criterion tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Trade-off as a function of frequency. The shipped schedule is constant.
pub trait CSchedule: Sync {
    fn c_at(&self, frequency_hz: f64, base: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantC;

impl CSchedule for ConstantC {
    fn c_at(&self, _frequency_hz: f64, base: f64) -> f64 {
        base
    }
}

/// `e_i = c_i E_BMVDR,i`
pub fn relaxation_budget(c: f64, bmvdr_itf_error: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Parameter(format!("c = {c} outside [0, 1]")));
    }
    if !(bmvdr_itf_error >= 0.0) {
        return Err(Error::Parameter("reference ITF error must be non-negative".into()));
    }
    Ok(c * bmvdr_itf_error)
}

/// `τ - c / k_max`, floored at exactly zero.
pub fn tau_step(tau_prev: f64, c: f64, k_max: usize) -> f64 {
    let next = tau_prev - c / k_max as f64;
    if next <= 1e-12 * c.max(f64::MIN_POSITIVE) {
        0.0
    } else {
        next
    }
}

/// `τ_(k) = c - k c / k_max` for `k = 0..=k_max`, with `τ_(k_max) = 0` exactly.
pub fn tau_schedule(c: f64, k_max: usize) -> Vec<f64> {
    let alpha = c / k_max as f64;
    (0..=k_max)
        .map(|k| {
            if k == k_max {
                0.0
            } else {
                let t = c - k as f64 * alpha;
                if t <= 1e-12 * c { 0.0 } else { t }
            }
        })
        .collect()
}

/// True iff every error is within its budget.
pub fn stopping_criterion(errors: &[f64], budgets: &[f64]) -> bool {
    stopping_criterion_with_slack(errors, budgets, 0.0)
}

pub fn stopping_criterion_with_slack(errors: &[f64], budgets: &[f64], slack: f64) -> bool {
    errors.len() == budgets.len() && errors.iter().zip(budgets).all(|(e, b)| *e <= b + slack)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelaxedStatus {
    ConvergedByCriterion,
    ExhaustedKmax,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackKind {
    /// The last subproblem solution before the infeasible one.
    LastFeasibleIterate,
    /// JBLCMV on the first `2M - 3` interferers.
    TruncatedJblcmv,
}

#[derive(Debug, Clone)]
pub struct RelaxedSolution {
    pub filter: BinauralFilter,
    pub iterations_used: usize,
    /// Final ITF error per interferer (infinite where undefined).
    pub errors: Vec<f64>,
    pub budgets: Vec<f64>,
    pub status: RelaxedStatus,
    pub fallback: Option<FallbackKind>,
    /// Interferers skipped by the reference-channel guard.
    pub dropped: Vec<usize>,
    pub socp_iterations: usize,
    pub tau_history: Vec<f64>,
}

/// Runs the relaxed iteration for one bin.
pub fn relaxed_beamformer(
    p: &BlockCpsd,
    a: &CVec,
    bs: &[CVec],
    params: &RelaxationParams,
    ref_left: usize,
    ref_right: usize,
) -> Result<RelaxedSolution> {
    params.validate()?;
    if params.c.len() != bs.len() {
        return Err(Error::Parameter(format!(
            "{} trade-off values for {} interferers",
            params.c.len(),
            bs.len()
        )));
    }
    let m = p.mic_count();
    let w0 = bmvdr(p, a, ref_left, ref_right)?;

    let mut usable = Vec::new();
    let mut dropped = Vec::new();
    for (i, b) in bs.iter().enumerate() {
        if b.len() == m && reference_entries_ok(b, ref_left, ref_right) {
            usable.push(i);
        } else {
            warn!("relaxed: interferer {i} dropped, reference ATF below guard");
            dropped.push(i);
        }
    }
    let e_bmvdr: Vec<f64> = usable
        .iter()
        .map(|&i| bmvdr_itf_error(a, &bs[i], ref_left, ref_right))
        .collect();
    let budgets = usable
        .iter()
        .zip(&e_bmvdr)
        .map(|(&i, &e)| relaxation_budget(params.c[i], e))
        .collect::<Result<Vec<_>>>()?;
    let errors_of = |w: &BinauralFilter| -> Vec<f64> { usable.iter().map(|&i| itf_error(w, &bs[i])).collect() };
    let expand = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![f64::INFINITY; bs.len()];
        for (&i, &x) in usable.iter().zip(v) {
            out[i] = x;
        }
        out
    };
    let expand_budgets = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![f64::NAN; bs.len()];
        for (&i, &x) in usable.iter().zip(v) {
            out[i] = x;
        }
        out
    };

    let errors0 = errors_of(&w0);
    if stopping_criterion_with_slack(&errors0, &budgets, params.criterion_tol) {
        return Ok(RelaxedSolution {
            filter: w0,
            iterations_used: 0,
            errors: expand(&errors0),
            budgets: expand_budgets(&budgets),
            status: RelaxedStatus::ConvergedByCriterion,
            fallback: None,
            dropped,
            socp_iterations: 0,
            tau_history: vec![],
        });
    }

    let max_joint = jblcmv_max_interferers(m);
    let all_zero = usable.iter().all(|&i| params.c[i] == 0.0);
    let schedules: Vec<Vec<f64>> = usable.iter().map(|&i| tau_schedule(params.c[i], params.k_max)).collect();
    let zetas: Vec<f64> = usable
        .iter()
        .map(|&i| crate::socp::zeta(a, &bs[i], ref_left, ref_right))
        .collect();

    let mut previous = w0.clone();
    let mut last_feasible: Option<(BinauralFilter, Vec<f64>, usize)> = None;
    let mut socp_iterations = 0usize;
    let mut tau_history = Vec::new();

    for k in 1..=params.k_max {
        let count = if k == params.k_max || all_zero {
            usable.len().min(max_joint)
        } else {
            usable.len()
        };
        let active: Vec<usize> = (0..count).collect();
        let prev_right = previous.right();
        let bounds: Vec<f64> = active
            .iter()
            .map(|&u| ratf_bound(schedules[u][k], zetas[u], &bs[usable[u]], &prev_right, ref_right))
            .collect();
        tau_history.push(schedules.first().map_or(0.0, |s| s[k]));
        let cone_atfs: Vec<CVec> = active.iter().map(|&u| bs[usable[u]].clone()).collect();
        let problem = lift_subproblem(p, a, &cone_atfs, &bounds, ref_left, ref_right)?;
        let sol = solve_socp(&problem, &params.socp)?;
        socp_iterations += sol.iterations;
        let usable_point = match sol.status {
            SocpStatus::Optimal => true,
            SocpStatus::MaxIterations => {
                let tol = 1e-8;
                problem.equality_residual(&sol.x) <= tol
                    && problem
                        .cones
                        .iter()
                        .all(|c| (&c.g * &sol.x).norm() <= c.h + tol * (1.0 + c.h))
            }
            SocpStatus::Infeasible => false,
        };
        if !usable_point {
            debug!("relaxed: subproblem {k} not solved ({:?})", sol.status);
            return fallback(
                p, a, bs, &usable, last_feasible, budgets, dropped, socp_iterations, tau_history, ref_left, ref_right,
                &errors_of, &expand, &expand_budgets, max_joint,
            );
        }
        let w = sol.filter(ref_left, ref_right)?;
        let errors = errors_of(&w);
        if stopping_criterion_with_slack(&errors, &budgets, params.criterion_tol) {
            return Ok(RelaxedSolution {
                filter: w,
                iterations_used: k,
                errors: expand(&errors),
                budgets: expand_budgets(&budgets),
                status: RelaxedStatus::ConvergedByCriterion,
                fallback: None,
                dropped,
                socp_iterations,
                tau_history,
            });
        }
        if k == params.k_max {
            return Ok(RelaxedSolution {
                filter: w,
                iterations_used: k,
                errors: expand(&errors),
                budgets: expand_budgets(&budgets),
                status: RelaxedStatus::ExhaustedKmax,
                fallback: None,
                dropped,
                socp_iterations,
                tau_history,
            });
        }
        last_feasible = Some((w.clone(), errors, k));
        previous = w;
    }
    unreachable!("the loop returns at k = k_max")
}

#[allow(clippy::too_many_arguments)]
fn fallback(
    p: &BlockCpsd,
    a: &CVec,
    bs: &[CVec],
    usable: &[usize],
    last_feasible: Option<(BinauralFilter, Vec<f64>, usize)>,
    budgets: Vec<f64>,
    dropped: Vec<usize>,
    socp_iterations: usize,
    tau_history: Vec<f64>,
    ref_left: usize,
    ref_right: usize,
    errors_of: &dyn Fn(&BinauralFilter) -> Vec<f64>,
    expand: &dyn Fn(&[f64]) -> Vec<f64>,
    expand_budgets: &dyn Fn(&[f64]) -> Vec<f64>,
    max_joint: usize,
) -> Result<RelaxedSolution> {
    let iterations = tau_history.len();
    let (filter, errors, kind) = match last_feasible {
        Some((w, e, _)) => (w, e, FallbackKind::LastFeasibleIterate),
        None => {
            let first: Vec<CVec> = usable.iter().take(max_joint).map(|&i| bs[i].clone()).collect();
            let (w, _) = jblcmv(p, a, &first, ref_left, ref_right)?;
            let e = errors_of(&w);
            (w, e, FallbackKind::TruncatedJblcmv)
        }
    };
    Ok(RelaxedSolution {
        filter,
        iterations_used: iterations,
        errors: expand(&errors),
        budgets: expand_budgets(&budgets),
        status: RelaxedStatus::Fallback,
        fallback: Some(kind),
        dropped,
        socp_iterations,
        tau_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcmv::tests::random_instance;
    use proptest::prelude::*;

    #[test]
    fn budget_examples() {
        assert_eq!(relaxation_budget(0.0, 0.7).unwrap(), 0.0);
        assert_eq!(relaxation_budget(1.0, 0.7).unwrap(), 0.7);
        assert!((relaxation_budget(0.3, 0.5).unwrap() - 0.15).abs() < 1e-15);
        assert!(matches!(relaxation_budget(1.2, 0.5), Err(Error::Parameter(_))));
        assert!(matches!(relaxation_budget(-0.1, 0.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn tau_examples() {
        let s = tau_schedule(0.3, 10);
        assert_eq!(s[0], 0.3);
        assert!((s[1] - 0.27).abs() < 1e-15);
        assert_eq!(s[10], 0.0);
        for w in s.windows(2).take(9) {
            assert!((w[0] - w[1] - 0.03).abs() < 1e-15);
        }
        let mut t = 0.3;
        for _ in 0..10 {
            t = tau_step(t, 0.3, 10);
        }
        assert_eq!(t, 0.0);
        assert_eq!(tau_step(0.0, 0.3, 10), 0.0);
    }

    #[test]
    fn criterion_examples() {
        assert!(stopping_criterion(&[0.0, 0.0], &[0.0, 0.1]));
        assert!(!stopping_criterion(&[0.1 + 1e-6, 0.0], &[0.1, 0.1]));
        assert!(stopping_criterion(&[0.1, 0.05], &[0.1, 0.1]));
    }

    #[test]
    fn full_collapse_returns_bmvdr_untouched() {
        for seed in 0..10 {
            let (p, a, bs) = random_instance(seed, 4, 4);
            let sol = relaxed_beamformer(&p, &a, &bs, &RelaxationParams::uniform(1.0, 4, 10).unwrap(), 0, 3).unwrap();
            assert_eq!(sol.iterations_used, 0);
            assert_eq!(sol.status, RelaxedStatus::ConvergedByCriterion);
            assert_eq!(sol.filter, bmvdr(&p, &a, 0, 3).unwrap());
        }
    }

    #[test]
    fn zero_tradeoff_returns_jblcmv() {
        for seed in 0..10 {
            for r in 1..=5 {
                let (p, a, bs) = random_instance(100 + seed, 4, r);
                let sol = relaxed_beamformer(&p, &a, &bs, &RelaxationParams::uniform(0.0, r, 10).unwrap(), 0, 3).unwrap();
                let (wj, _) = jblcmv(&p, &a, &bs, 0, 3).unwrap();
                let diff = (sol.filter.w() - wj.w()).camax();
                assert!(diff <= 1e-6 * wj.w().camax().max(1.0), "seed {seed} r {r}: {diff}");
                assert_eq!(sol.status, RelaxedStatus::ConvergedByCriterion);
            }
        }
    }

    #[test]
    fn too_many_interferers_still_terminate() {
        for seed in 0..5 {
            let (p, a, bs) = random_instance(200 + seed, 4, 7);
            for c in [0.0, 0.3, 0.6] {
                let params = RelaxationParams::uniform(c, 7, 10).unwrap();
                let sol = relaxed_beamformer(&p, &a, &bs, &params, 0, 3).unwrap();
                assert!(sol.iterations_used <= 10);
                let resp = sol.filter.response(&a);
                assert!((resp.0 - a[0]).norm() < 1e-8 * a[0].norm().max(1.0));
                assert!((resp.1 - a[3]).norm() < 1e-8 * a[3].norm().max(1.0));
            }
        }
    }

    #[test]
    fn per_interferer_tradeoffs() {
        let (p, a, bs) = random_instance(300, 4, 2);
        let params = RelaxationParams::new(vec![0.0, 1.0], 10).unwrap();
        let sol = relaxed_beamformer(&p, &a, &bs, &params, 0, 3).unwrap();
        assert_eq!(sol.status, RelaxedStatus::ConvergedByCriterion);
        assert!(sol.errors[0] <= 1e-8);
        assert!(sol.errors[1] <= sol.budgets[1] + 1e-8);
        assert!(matches!(
            relaxed_beamformer(&p, &a, &bs, &RelaxationParams::uniform(0.5, 3, 10).unwrap(), 0, 3),
            Err(Error::Parameter(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn sandwich_and_budgets(seed in any::<u64>(), r in 1usize..=5, ci in 0usize..3, kbig in any::<bool>()) {
            let c = [0.25, 0.5, 0.75][ci];
            let k_max = if kbig { 50 } else { 10 };
            let (p, a, bs) = random_instance(seed, 4, r);
            let sol = relaxed_beamformer(&p, &a, &bs, &RelaxationParams::uniform(c, r, k_max).unwrap(), 0, 3).unwrap();
            prop_assert!(sol.iterations_used <= k_max);
            prop_assert!(sol.status != RelaxedStatus::Fallback);
            let jb = bmvdr(&p, &a, 0, 3).unwrap().noise_power(&p);
            let jj = jblcmv(&p, &a, &bs, 0, 3).unwrap().0.noise_power(&p);
            let jr = sol.filter.noise_power(&p);
            prop_assert!(jb <= jr * (1.0 + 1e-6));
            prop_assert!(jr <= jj * (1.0 + 1e-6));
            for (e, b) in sol.errors.iter().zip(&sol.budgets) {
                prop_assert!(*e <= b + 1e-8);
            }
            let (l, rr) = sol.filter.response(&a);
            prop_assert!((l - a[0]).norm() <= 1e-8 * a[0].norm().max(1.0));
            prop_assert!((rr - a[3]).norm() <= 1e-8 * a[3].norm().max(1.0));
        }
    }
}
