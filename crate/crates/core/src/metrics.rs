//! Binaural cue errors and global segmental SNR.

use std::f64::consts::PI;
use std::ops::Range;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcmv::BinauralFilter;
use crate::linalg::{CVec, C64};

/// Relative magnitude below which an ITF denominator is degenerate.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

/// Reference errors below this value are left out of the error ratio.
pub const RATIO_GUARD: f64 = 1e-12;

pub const SNR_FLOOR_DB: f64 = -20.0;
pub const SNR_CEILING_DB: f64 = 50.0;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// `left / right`, refusing denominators that vanish relative to `scale`.
pub fn itf(left: C64, right: C64, scale: f64) -> Result<C64> {
    if right.norm() <= DENOMINATOR_GUARD * scale || right.norm() == 0.0 {
        return Err(Error::DegenerateDenominator);
    }
    Ok(left / right)
}

/// Output ITF of `b` through `w`.
pub fn output_itf(w: &BinauralFilter, b: &CVec) -> Result<C64> {
    let (l, r) = w.response(b);
    itf(l, r, w.right().norm() * b.norm())
}

/// Input ITF `b_L / b_R`.
pub fn input_itf(b: &CVec, ref_left: usize, ref_right: usize) -> Result<C64> {
    itf(b[ref_left], b[ref_right], b.norm())
}

/// `|ITF_out - ITF_in|`; infinite (and logged) when the output ITF is undefined.
pub fn itf_error(w: &BinauralFilter, b: &CVec) -> f64 {
    let (rl, rr) = w.refs();
    match (output_itf(w, b), input_itf(b, rl, rr)) {
        (Ok(o), Ok(i)) => (o - i).norm(),
        _ => {
            warn!("ITF error undefined: degenerate denominator");
            f64::INFINITY
        }
    }
}

/// ITF error of a BMVDR output written in closed form: `|a_L/a_R - b_L/b_R|`.
pub fn bmvdr_itf_error(a: &CVec, b: &CVec, ref_left: usize, ref_right: usize) -> f64 {
    (a[ref_left] / a[ref_right] - b[ref_left] / b[ref_right]).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueErrors {
    /// `|ITF_out - ITF_in|`
    pub itf: f64,
    /// `|ILD_out - ILD_in|`
    pub ild: f64,
    /// `|wrap(IPD_out - IPD_in)| / π`
    pub ipd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CueRecord {
    pub itf_in: C64,
    pub itf_out: C64,
    pub ild_in: f64,
    pub ild_out: f64,
    pub ipd_in: f64,
    pub ipd_out: f64,
}

impl CueRecord {
    pub fn from_itfs(itf_in: C64, itf_out: C64) -> Self {
        Self {
            itf_in,
            itf_out,
            ild_in: itf_in.norm_sqr(),
            ild_out: itf_out.norm_sqr(),
            ipd_in: principal_arg(itf_in),
            ipd_out: principal_arg(itf_out),
        }
    }

    pub fn errors(&self) -> CueErrors {
        cue_errors(self)
    }
}

// atan2 returns [-π, π]; move -π to π
fn principal_arg(z: C64) -> f64 {
    let a = z.arg();
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Input/output cues of one interferer through `w`.
pub fn binaural_cues(w: &BinauralFilter, b: &CVec) -> Result<CueRecord> {
    let (rl, rr) = w.refs();
    Ok(CueRecord::from_itfs(input_itf(b, rl, rr)?, output_itf(w, b)?))
}

pub fn cue_errors(record: &CueRecord) -> CueErrors {
    CueErrors {
        itf: (record.itf_out - record.itf_in).norm(),
        ild: (record.ild_out - record.ild_in).abs(),
        ipd: wrap_phase(record.ipd_out - record.ipd_in).abs() / PI,
    }
}

/// Frequency bands of the aggregate cue errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEdges {
    /// First bin at or above the ILD band edge.
    pub k_ild: usize,
    /// Last bin at or below the IPD band edge; the band is `1..=k_ipd`.
    pub k_ipd: usize,
    pub bins: usize,
}

impl BandEdges {
    pub fn new(sample_rate: f64, fft_size: usize, ild_hz: f64, ipd_hz: f64) -> Result<Self> {
        let bins = fft_size / 2 + 1;
        let freq = |k: usize| k as f64 * sample_rate / fft_size as f64;
        let k_ild = (0..bins)
            .find(|&k| freq(k) >= ild_hz)
            .ok_or_else(|| Error::EmptyBand(format!("no bin at or above {ild_hz} Hz")))?;
        let k_ipd = (1..bins)
            .take_while(|&k| freq(k) <= ipd_hz)
            .last()
            .ok_or_else(|| Error::EmptyBand(format!("no bin in (0, {ipd_hz}] Hz")))?;
        Ok(Self { k_ild, k_ipd, bins })
    }

    /// 3 kHz and 1 kHz edges.
    pub fn standard(sample_rate: f64, fft_size: usize) -> Result<Self> {
        Self::new(sample_rate, fft_size, 3000.0, 1000.0)
    }

    pub fn ild_band(&self) -> Range<usize> {
        self.k_ild..self.bins
    }

    pub fn ipd_band(&self) -> Range<usize> {
        1..self.k_ipd + 1
    }
}

/// Cue errors indexed by interferer, bin and frame. `None` marks excluded
/// (degenerate) entries. Frame-constant filters can be stored with one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGrid {
    interferers: usize,
    bins: usize,
    frames: usize,
    data: Vec<Option<CueErrors>>,
}

impl ErrorGrid {
    pub fn new(interferers: usize, bins: usize, frames: usize) -> Self {
        Self {
            interferers,
            bins,
            frames,
            data: vec![None; interferers * bins * frames],
        }
    }

    pub fn interferers(&self) -> usize {
        self.interferers
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn index(&self, i: usize, k: usize, l: usize) -> usize {
        (i * self.bins + k) * self.frames + l
    }

    pub fn set(&mut self, i: usize, k: usize, l: usize, e: Option<CueErrors>) {
        let idx = self.index(i, k, l);
        self.data[idx] = e;
    }

    pub fn get(&self, i: usize, k: usize, l: usize) -> Option<CueErrors> {
        self.data[self.index(i, k, l)]
    }

    pub fn excluded(&self) -> usize {
        self.data.iter().filter(|e| e.is_none()).count()
    }

    /// Frame mean of one field at `(i, k)` over included frames.
    fn frame_mean(&self, i: usize, k: usize, field: impl Fn(&CueErrors) -> f64) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for l in 0..self.frames {
            if let Some(e) = self.get(i, k, l) {
                sum += field(&e);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Sum over interferers of the bin mean (over `band`) of frame means.
    fn band_total(&self, band: Range<usize>, field: impl Fn(&CueErrors) -> f64 + Copy) -> f64 {
        (0..self.interferers)
            .map(|i| {
                let means: Vec<f64> = band.clone().filter_map(|k| self.frame_mean(i, k, field)).collect();
                if means.is_empty() {
                    0.0
                } else {
                    means.iter().sum::<f64>() / means.len() as f64
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalErrors {
    pub ild: f64,
    pub ipd: f64,
    pub itf: f64,
}

/// Frame mean, band-restricted bin mean, then sum over interferers.
pub fn total_errors(grid: &ErrorGrid, bands: &BandEdges) -> Result<TotalErrors> {
    if bands.bins != grid.bins {
        return Err(Error::Config(format!(
            "band edges cover {} bins, grid has {}",
            bands.bins, grid.bins
        )));
    }
    if bands.ild_band().is_empty() || bands.ipd_band().is_empty() || bands.k_ipd >= grid.bins {
        return Err(Error::EmptyBand("band edges leave an empty band".into()));
    }
    Ok(TotalErrors {
        ild: grid.band_total(bands.ild_band(), |e| e.ild),
        ipd: grid.band_total(bands.ipd_band(), |e| e.ipd),
        itf: grid.band_total(0..grid.bins, |e| e.itf),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRatio {
    pub value: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Mean over interferers, bins and frames of `E / E_BMVDR`, leaving out
/// entries whose reference error is below [`RATIO_GUARD`].
pub fn average_itf_error_ratio(proposed: &ErrorGrid, reference: &ErrorGrid) -> Result<ErrorRatio> {
    if proposed.interferers != reference.interferers || proposed.bins != reference.bins {
        return Err(Error::InvalidInput("error grids differ in shape".into()));
    }
    let mut included = 0usize;
    let mut excluded = 0usize;
    let mut outer = 0.0;
    let mut outer_n = 0usize;
    for i in 0..proposed.interferers {
        let mut bin_sum = 0.0;
        let mut bin_n = 0usize;
        for k in 0..proposed.bins {
            let frames = proposed.frames.max(reference.frames);
            let mut frame_sum = 0.0;
            let mut frame_n = 0usize;
            for l in 0..frames {
                // a one-frame grid broadcasts over frames
                let p = proposed.get(i, k, l.min(proposed.frames - 1));
                let r = reference.get(i, k, l.min(reference.frames - 1));
                match (p, r) {
                    (Some(p), Some(r)) if r.itf >= RATIO_GUARD && p.itf.is_finite() => {
                        frame_sum += p.itf / r.itf;
                        frame_n += 1;
                        included += 1;
                    }
                    _ => excluded += 1,
                }
            }
            if frame_n > 0 {
                bin_sum += frame_sum / frame_n as f64;
                bin_n += 1;
            }
        }
        if bin_n > 0 {
            outer += bin_sum / bin_n as f64;
            outer_n += 1;
        }
    }
    if outer_n == 0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(ErrorRatio {
        value: outer / outer_n as f64,
        included,
        excluded,
    })
}

pub fn clamp_db(x: f64) -> f64 {
    x.clamp(SNR_FLOOR_DB, SNR_CEILING_DB)
}

/// Per-frame target and disturbance CPSDs, seen through output powers.
pub trait FrameCpsd {
    fn frames(&self) -> usize;
    fn bins(&self) -> usize;
    /// `(w^H P̃_x w, w^H P̃ w)` of `w` at `bin` for every frame.
    fn bin_powers(&self, w: &BinauralFilter, bin: usize) -> Vec<(f64, f64)>;
}

/// PSD per bin, either constant over frames or tracked per frame.
#[derive(Debug, Clone, PartialEq)]
pub enum PsdTrack {
    Constant(Vec<f64>),
    /// Indexed `[frame][bin]`.
    PerFrame(Vec<Vec<f64>>),
}

impl PsdTrack {
    fn at(&self, frame: usize, bin: usize) -> f64 {
        match self {
            PsdTrack::Constant(v) => v[bin],
            PsdTrack::PerFrame(v) => v[frame][bin],
        }
    }

    fn frames(&self) -> Option<usize> {
        match self {
            PsdTrack::Constant(_) => None,
            PsdTrack::PerFrame(v) => Some(v.len()),
        }
    }
}

/// Rank-one source model `P_x = p_s a a^H`, `P = Σ p_i b_i b_i^H + σ² I`.
#[derive(Debug, Clone)]
pub struct SourceModelCpsd {
    pub target_atfs: Vec<CVec>,
    /// Indexed `[interferer][bin]`.
    pub interferer_atfs: Vec<Vec<CVec>>,
    pub target_psd: PsdTrack,
    pub interferer_psds: Vec<PsdTrack>,
    /// Per-bin self-noise power.
    pub self_noise: Vec<f64>,
    pub frames: usize,
}

impl SourceModelCpsd {
    pub fn new(
        target_atfs: Vec<CVec>,
        interferer_atfs: Vec<Vec<CVec>>,
        target_psd: PsdTrack,
        interferer_psds: Vec<PsdTrack>,
        self_noise: Vec<f64>,
        frames: usize,
    ) -> Result<Self> {
        let bins = target_atfs.len();
        let tracks = std::iter::once(&target_psd).chain(interferer_psds.iter());
        for t in tracks {
            if let Some(f) = t.frames() {
                if f != frames {
                    return Err(Error::InvalidInput(format!("PSD track has {f} frames, expected {frames}")));
                }
            }
        }
        if interferer_atfs.len() != interferer_psds.len()
            || interferer_atfs.iter().any(|b| b.len() != bins)
            || self_noise.len() != bins
        {
            return Err(Error::InvalidInput("source model shapes disagree".into()));
        }
        Ok(Self {
            target_atfs,
            interferer_atfs,
            target_psd,
            interferer_psds,
            self_noise,
            frames,
        })
    }
}

impl FrameCpsd for SourceModelCpsd {
    fn frames(&self) -> usize {
        self.frames
    }

    fn bins(&self) -> usize {
        self.target_atfs.len()
    }

    fn bin_powers(&self, w: &BinauralFilter, bin: usize) -> Vec<(f64, f64)> {
        let gain = |v: &CVec| {
            let (l, r) = w.response(v);
            l.norm_sqr() + r.norm_sqr()
        };
        let target_gain = gain(&self.target_atfs[bin]);
        let interferer_gains: Vec<f64> = self.interferer_atfs.iter().map(|b| gain(&b[bin])).collect();
        let white = self.self_noise[bin] * w.w().norm_squared();
        (0..self.frames)
            .map(|l| {
                let x = self.target_psd.at(l, bin) * target_gain;
                let n = white
                    + interferer_gains
                        .iter()
                        .zip(&self.interferer_psds)
                        .map(|(g, p)| g * p.at(l, bin))
                        .sum::<f64>();
                (x, n)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsSnr {
    pub input_db: f64,
    pub output_db: f64,
    pub gain_db: f64,
    pub frames_used: usize,
    pub frames_skipped: usize,
}

/// Clamped frame SNRs averaged over `frames`, with per-frame sums over bins.
pub fn segmental_snr<C: FrameCpsd + ?Sized>(
    cpsd: &C,
    filters: &[BinauralFilter],
    frames: Range<usize>,
) -> Result<(f64, usize, usize)> {
    if filters.len() != cpsd.bins() {
        return Err(Error::InvalidInput(format!(
            "{} filters for {} bins",
            filters.len(),
            cpsd.bins()
        )));
    }
    if frames.end > cpsd.frames() {
        return Err(Error::InvalidInput("frame range exceeds the CPSD frames".into()));
    }
    let mut num = vec![0.0; cpsd.frames()];
    let mut den = vec![0.0; cpsd.frames()];
    for (k, w) in filters.iter().enumerate() {
        for (l, (x, n)) in cpsd.bin_powers(w, k).into_iter().enumerate() {
            num[l] += x;
            den[l] += n;
        }
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for l in frames {
        if !(den[l] > 0.0) {
            skipped += 1;
            continue;
        }
        let db = if num[l] > 0.0 {
            10.0 * (num[l] / den[l]).log10()
        } else {
            SNR_FLOOR_DB
        };
        sum += clamp_db(db);
        used += 1;
    }
    if skipped > 0 {
        warn!("{skipped} frames skipped with zero disturbance energy");
    }
    if used == 0 {
        return Err(Error::InvalidInput("no frame with disturbance energy".into()));
    }
    Ok((sum / used as f64, used, skipped))
}

/// Input (reference microphones) and output gsSNR and their difference.
pub fn gs_snr<C: FrameCpsd + ?Sized>(
    cpsd: &C,
    filters: &[BinauralFilter],
    passthrough: &[BinauralFilter],
    frames: Range<usize>,
) -> Result<GsSnr> {
    let (input_db, _, _) = segmental_snr(cpsd, passthrough, frames.clone())?;
    let (output_db, used, skipped) = segmental_snr(cpsd, filters, frames)?;
    Ok(GsSnr {
        input_db,
        output_db,
        gain_db: output_db - input_db,
        frames_used: used,
        frames_skipped: skipped,
    })
}

/// Aggregate figures of one method at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub tot_er_ild: f64,
    pub tot_er_ipd: f64,
    pub tot_er_itf: f64,
    pub av_er_itf_ratio: Option<f64>,
    pub ratio_excluded: usize,
    pub gs_snr_in_db: f64,
    pub gs_snr_out_db: f64,
    pub gs_snr_gain_db: f64,
    pub k_ild: usize,
    pub k_ipd: usize,
    pub frames: usize,
    pub bins: usize,
    pub excluded_cue_records: usize,
    /// Per-interferer full-band ITF error (bin mean of frame means).
    pub per_interferer_itf: Vec<f64>,
}

/// Per-interferer full-band ITF error.
pub fn per_interferer_itf(grid: &ErrorGrid) -> Vec<f64> {
    (0..grid.interferers)
        .map(|i| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for k in 0..grid.bins {
                if let Some(m) = grid.frame_mean(i, k, |e| e.itf) {
                    sum += m;
                    n += 1;
                }
            }
            if n > 0 {
                sum / n as f64
            } else {
                0.0
            }
        })
        .collect()
}
