//! C ABI over the binaural beamformers.
//!
//! Complex data is passed as interleaved `(re, im)` doubles. Matrices are
//! column-major. Every function returns a [`BfStatus`]; on failure the
//! message is available from [`bf_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use binaural_beamform::experiment::{emit_results, run_experiment, ExperimentConfig, RunOptions};
use binaural_beamform::lcmv::{blcmv, bmvdr, jblcmv, BinauralFilter, BlockCpsd};
use binaural_beamform::linalg::{CMat, CVec};
use binaural_beamform::metrics::itf_error;
use binaural_beamform::relaxed::{relaxed_beamformer, RelaxationParams, RelaxedStatus};
use binaural_beamform::Error;
use num_complex::Complex64;

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Parameter = 3,
    Degenerate = 4,
    Infeasible = 5,
    Solver = 6,
    Config = 7,
    Io = 8,
    Panic = 9,
    BufferTooSmall = 10,
}

/// Outcome of the relaxed beamformer at one bin.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfRelaxedStatus {
    ConvergedByCriterion = 0,
    ExhaustedKmax = 1,
    Fallback = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BfRelaxedInfo {
    pub iterations_used: usize,
    pub status: BfRelaxedStatus,
}

/// Opaque disturbance CPSD of one bin.
pub struct BfCpsd(BlockCpsd);

/// Opaque binaural filter `[w_L; w_R]`.
pub struct BfFilter(BinauralFilter);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> BfStatus {
    match e {
        Error::InvalidInput(_) | Error::InvalidNoiseFloor(_) | Error::NotPositiveDefinite(_) => BfStatus::InvalidInput,
        Error::Parameter(_) => BfStatus::Parameter,
        Error::DegenerateGeometry(_)
        | Error::DegenerateConstraint(_)
        | Error::DegenerateDenominator
        | Error::RankDeficient { .. }
        | Error::UndefinedRatio
        | Error::EmptyBand(_) => BfStatus::Degenerate,
        Error::InfeasibleByCount { .. } => BfStatus::Infeasible,
        Error::Solver(_) => BfStatus::Solver,
        Error::Config(_) | Error::Json { .. } => BfStatus::Config,
        Error::Io { .. } | Error::Wav { .. } | Error::Csv(_) => BfStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (BfStatus, String)>) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BfStatus::Panic
        }
    }
}

type FfiResult<T> = Result<T, (BfStatus, String)>;

fn lib<T>(r: binaural_beamform::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(name: &str) -> (BfStatus, String) {
    (BfStatus::NullPointer, format!("{name} is null"))
}

unsafe fn complex_slice(data: *const f64, count: usize, name: &str) -> FfiResult<Vec<Complex64>> {
    if count == 0 {
        return Ok(vec![]);
    }
    if data.is_null() {
        return Err(null(name));
    }
    let raw = std::slice::from_raw_parts(data, 2 * count);
    Ok(raw.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
}

unsafe fn interferers(bs: *const f64, count: usize, m: usize) -> FfiResult<Vec<CVec>> {
    let flat = complex_slice(bs, count * m, "interferer ATFs")?;
    Ok(flat.chunks_exact(m.max(1)).map(CVec::from_column_slice).collect())
}

unsafe fn cpsd_ref<'a>(cpsd: *const BfCpsd) -> FfiResult<&'a BlockCpsd> {
    cpsd.as_ref().map(|c| &c.0).ok_or_else(|| null("cpsd"))
}

unsafe fn filter_ref<'a>(filter: *const BfFilter) -> FfiResult<&'a BinauralFilter> {
    filter.as_ref().map(|f| &f.0).ok_or_else(|| null("filter"))
}

unsafe fn target(cpsd: &BlockCpsd, a: *const f64) -> FfiResult<CVec> {
    Ok(CVec::from_vec(complex_slice(a, cpsd.mic_count(), "target ATF")?))
}

unsafe fn store_filter(out: *mut *mut BfFilter, w: BinauralFilter) {
    *out = Box::into_raw(Box::new(BfFilter(w)));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a CPSD handle from an `m x m` Hermitian positive-definite matrix.
///
/// # Safety
/// `data` must hold `2 m²` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_cpsd_new(data: *const f64, m: usize, out: *mut *mut BfCpsd) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if m == 0 {
            return Err((BfStatus::InvalidInput, "matrix size must be positive".into()));
        }
        let entries = complex_slice(data, m * m, "data")?;
        let p = lib(BlockCpsd::new(&CMat::from_column_slice(m, m, &entries)))?;
        *out = Box::into_raw(Box::new(BfCpsd(p)));
        Ok(())
    })
}

/// # Safety
/// `cpsd` must be null or a handle from [`bf_cpsd_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_cpsd_free(cpsd: *mut BfCpsd) {
    if !cpsd.is_null() {
        drop(Box::from_raw(cpsd));
    }
}

/// # Safety
/// `filter` must be null or a handle returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_filter_free(filter: *mut BfFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

/// Microphone count `M` of a filter (0 for a null handle).
///
/// # Safety
/// `filter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_filter_mic_count(filter: *const BfFilter) -> usize {
    filter.as_ref().map_or(0, |f| f.0.mic_count())
}

/// Copies the `2M` complex weights `[w_L; w_R]` into `out` (`4M` doubles).
///
/// # Safety
/// `filter` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bf_filter_weights(filter: *const BfFilter, out: *mut f64, len: usize) -> BfStatus {
    guard(|| {
        let w = filter_ref(filter)?.w();
        if out.is_null() {
            return Err(null("out"));
        }
        if len < 2 * w.len() {
            return Err((BfStatus::BufferTooSmall, format!("need {} doubles, got {len}", 2 * w.len())));
        }
        for (i, z) in w.iter().enumerate() {
            *out.add(2 * i) = z.re;
            *out.add(2 * i + 1) = z.im;
        }
        Ok(())
    })
}

/// `|ITF_out - ITF_in|` of an interferer with ATF `b` (`M` complex values).
///
/// # Safety
/// `filter` must be a live handle, `b` must hold `2M` doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_itf_error(filter: *const BfFilter, b: *const f64, out: *mut f64) -> BfStatus {
    guard(|| {
        let w = filter_ref(filter)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let b = CVec::from_vec(complex_slice(b, w.mic_count(), "b")?);
        *out = itf_error(w, &b);
        Ok(())
    })
}

/// Binaural MVDR filter.
///
/// # Safety
/// `cpsd` must be live, `a` must hold `2M` doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_bmvdr(
    cpsd: *const BfCpsd,
    a: *const f64,
    ref_left: usize,
    ref_right: usize,
    out: *mut *mut BfFilter,
) -> BfStatus {
    guard(|| {
        let p = cpsd_ref(cpsd)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let a = target(p, a)?;
        store_filter(out, lib(bmvdr(p, &a, ref_left, ref_right))?);
        Ok(())
    })
}

/// BLCMV with real interferer scalings `eta_left`, `eta_right` in `[0, 1)`.
///
/// # Safety
/// As [`bf_jblcmv`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bf_blcmv(
    cpsd: *const BfCpsd,
    a: *const f64,
    bs: *const f64,
    count: usize,
    eta_left: f64,
    eta_right: f64,
    ref_left: usize,
    ref_right: usize,
    out: *mut *mut BfFilter,
) -> BfStatus {
    guard(|| {
        let p = cpsd_ref(cpsd)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let a = target(p, a)?;
        let bs = interferers(bs, count, p.mic_count())?;
        let (w, _) = lib(blcmv(p, &a, &bs, eta_left, eta_right, ref_left, ref_right))?;
        store_filter(out, w);
        Ok(())
    })
}

/// Joint BLCMV preserving the ITFs of up to `2M - 3` interferers.
///
/// # Safety
/// `cpsd` must be live, `a` must hold `2M` doubles, `bs` `2M·count` doubles
/// (interferer-major), `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_jblcmv(
    cpsd: *const BfCpsd,
    a: *const f64,
    bs: *const f64,
    count: usize,
    ref_left: usize,
    ref_right: usize,
    out: *mut *mut BfFilter,
) -> BfStatus {
    guard(|| {
        let p = cpsd_ref(cpsd)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let a = target(p, a)?;
        let bs = interferers(bs, count, p.mic_count())?;
        let (w, _) = lib(jblcmv(p, &a, &bs, ref_left, ref_right))?;
        store_filter(out, w);
        Ok(())
    })
}

/// Relaxed binaural LCMV with per-interferer trade-offs `c` (`count` values
/// in `[0, 1]`). `info` may be null.
///
/// # Safety
/// As [`bf_jblcmv`]; `c` must hold `count` doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bf_relaxed(
    cpsd: *const BfCpsd,
    a: *const f64,
    bs: *const f64,
    count: usize,
    c: *const f64,
    k_max: usize,
    ref_left: usize,
    ref_right: usize,
    out: *mut *mut BfFilter,
    info: *mut BfRelaxedInfo,
) -> BfStatus {
    guard(|| {
        let p = cpsd_ref(cpsd)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let a = target(p, a)?;
        let bs = interferers(bs, count, p.mic_count())?;
        let c = if count == 0 {
            vec![]
        } else if c.is_null() {
            return Err(null("c"));
        } else {
            std::slice::from_raw_parts(c, count).to_vec()
        };
        let params = lib(RelaxationParams::new(c, k_max))?;
        let sol = lib(relaxed_beamformer(p, &a, &bs, &params, ref_left, ref_right))?;
        if let Some(info) = info.as_mut() {
            info.iterations_used = sol.iterations_used;
            info.status = match sol.status {
                RelaxedStatus::ConvergedByCriterion => BfRelaxedStatus::ConvergedByCriterion,
                RelaxedStatus::ExhaustedKmax => BfRelaxedStatus::ExhaustedKmax,
                RelaxedStatus::Fallback => BfRelaxedStatus::Fallback,
            };
        }
        store_filter(out, sol.filter);
        Ok(())
    })
}

/// Runs an experiment config and writes its results to `out_dir` (or the
/// config's `output_dir` when null). Relative paths in the config resolve
/// against its directory.
///
/// # Safety
/// `config_path` must be a NUL-terminated UTF-8 path; `out_dir` null or the same.
#[no_mangle]
pub unsafe extern "C" fn bf_run_experiment(config_path: *const c_char, out_dir: *const c_char) -> BfStatus {
    guard(|| {
        let utf8 = |p: *const c_char, name: &str| -> FfiResult<String> {
            CStr::from_ptr(p)
                .to_str()
                .map(str::to_owned)
                .map_err(|_| (BfStatus::InvalidInput, format!("{name} is not UTF-8")))
        };
        if config_path.is_null() {
            return Err(null("config_path"));
        }
        let path = utf8(config_path, "config_path")?;
        let path = Path::new(&path);
        let cfg = lib(ExperimentConfig::load(path))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let dir = if out_dir.is_null() {
            base.join(&cfg.output_dir)
        } else {
            utf8(out_dir, "out_dir")?.into()
        };
        let output = lib(run_experiment(&cfg, base, RunOptions::default()))?;
        lib(emit_results(&output, &dir))
    })
}
