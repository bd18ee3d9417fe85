//! Experiment runner: JSON config, method sweeps over `(r, c, k_max)`, and
//! CSV/JSON result files.

use std::cmp::Ordering;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcmv::{blcmv, bmvdr, jblcmv, jblcmv_max_interferers, oblcmv, BinauralFilter, BlockCpsd, Method};
use crate::linalg::CVec;
use crate::metrics::{
    average_itf_error_ratio, binaural_cues, gs_snr, total_errors, BandEdges, ErrorGrid, PsdTrack, SourceModelCpsd,
};
use crate::relaxed::{relaxed_beamformer, CSchedule, ConstantC, RelaxationParams, RelaxedStatus};
use crate::scene::{
    position_on_circle, ArrayGeometry, AtfSet, NoiseCpsd, SourceDescriptor, SourceKind, SourceLocation,
    DEFAULT_SELF_NOISE_STD,
};
use crate::signals::{long_term_psd, periodogram_track, read_wav, speech_shaped_noise, white_noise};
use crate::stft::StftParams;

pub const DEFAULT_BLCMV_ETA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
    #[serde(default)]
    pub array: ArrayConfig,
    pub target: SourceConfig,
    #[serde(default)]
    pub interferers: Vec<SourceConfig>,
    /// Self-noise standard deviation; defaults to 3.8e-5 unless
    /// `self_noise_snr_db` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_noise_std: Option<f64>,
    /// Self-noise level as the target-to-self-noise ratio at the left
    /// reference microphone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_noise_snr_db: Option<f64>,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
}

fn default_sample_rate() -> f64 {
    16_000.0
}
fn default_speed_of_sound() -> f64 {
    343.0
}
fn default_duration() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrayConfig {
    /// Two behind-the-ear pairs on a rigid-less head model.
    Bte {
        #[serde(default = "default_head_radius")]
        head_radius: f64,
        #[serde(default = "default_spacing")]
        spacing: f64,
    },
    Custom {
        /// `[x, y]` in meters.
        mics: Vec<[f64; 2]>,
        ref_left: usize,
        ref_right: usize,
    },
}

fn default_head_radius() -> f64 {
    0.0875
}
fn default_spacing() -> f64 {
    0.0076
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig::Bte {
            head_radius: default_head_radius(),
            spacing: default_spacing(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Free-field direction, 0° = +x, 90° = +y (front).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    /// Multichannel WAV with one impulse response per microphone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impulse_responses: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<SignalConfig>,
    /// Linear power of the source signal.
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_level() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalConfig {
    White,
    SpeechShaped,
    /// Mono WAV (first channel is used).
    Wav(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_length: 160,
            hop: 80,
            fft_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum MethodConfig {
    Bmvdr,
    Blcmv {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eta_right: Option<f64>,
    },
    Oblcmv,
    Jblcmv,
    Relaxed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k_max: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Numbers of simultaneously active interferers, in declaration order.
    #[serde(default)]
    pub r: Vec<usize>,
    /// Trade-off grid for relaxed methods that do not set their own.
    #[serde(default)]
    pub c: Vec<f64>,
    #[serde(default)]
    pub k_max: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Checks every invariant; relative paths resolve against `base_dir`.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let s = &self.scene;
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(s.sample_rate > 0.0) {
            return bad("scene.sample_rate", "must be positive".into());
        }
        if !(s.speed_of_sound > 0.0) {
            return bad("scene.speed_of_sound", "must be positive".into());
        }
        match (s.self_noise_std, s.self_noise_snr_db) {
            (Some(_), Some(_)) => {
                return bad("scene.self_noise_snr_db", "conflicts with scene.self_noise_std; give one".into())
            }
            (Some(std), None) if !(std > 0.0 && std.is_finite()) => {
                return bad("scene.self_noise_std", "must be positive".into())
            }
            (None, Some(db)) if !db.is_finite() => return bad("scene.self_noise_snr_db", "must be finite".into()),
            _ => {}
        }
        if !(s.duration_s > 0.0) {
            return bad("scene.duration_s", "must be positive".into());
        }
        self.geometry()?;
        self.stft_params()?;
        let sources = std::iter::once(("scene.target".to_string(), &s.target)).chain(
            s.interferers
                .iter()
                .enumerate()
                .map(|(i, src)| (format!("scene.interferers[{i}]"), src)),
        );
        for (field, src) in sources {
            match (src.angle_deg, &src.impulse_responses) {
                (Some(a), None) => {
                    if !a.is_finite() {
                        return bad(&format!("{field}.angle_deg"), "must be finite".into());
                    }
                    match src.distance_m {
                        Some(d) if d > 0.0 => {}
                        _ => return bad(&format!("{field}.distance_m"), "a positive distance is required".into()),
                    }
                }
                (None, Some(p)) => {
                    if src.distance_m.is_some() {
                        return bad(&field, "distance_m only applies to free-field sources".into());
                    }
                    check_file(&format!("{field}.impulse_responses"), &resolve(base_dir, p))?;
                }
                _ => return bad(&field, "set exactly one of angle_deg or impulse_responses".into()),
            }
            if let Some(SignalConfig::Wav(p)) = &src.signal {
                check_file(&format!("{field}.signal.wav"), &resolve(base_dir, p))?;
            }
            if !(src.level >= 0.0 && src.level.is_finite()) {
                return bad(&format!("{field}.level"), "must be a non-negative number".into());
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            let field = format!("methods[{i}]");
            match m {
                MethodConfig::Blcmv { eta, eta_right } => {
                    for (name, v) in [("eta", eta), ("eta_right", eta_right)] {
                        if let Some(v) = v {
                            if !(0.0..1.0).contains(v) {
                                return bad(&format!("{field}.{name}"), format!("{v} outside [0, 1)"));
                            }
                        }
                    }
                }
                MethodConfig::Relaxed { c, k_max } => {
                    let cs = c.as_ref().unwrap_or(&self.sweep.c);
                    let ks = k_max.as_ref().unwrap_or(&self.sweep.k_max);
                    if cs.is_empty() {
                        return bad(&format!("{field}.c"), "no trade-off values here or in sweep.c".into());
                    }
                    if ks.is_empty() {
                        return bad(&format!("{field}.k_max"), "no k_max values here or in sweep.k_max".into());
                    }
                    if let Some(v) = cs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return bad(&format!("{field}.c"), format!("{v} outside [0, 1]"));
                    }
                    if ks.contains(&0) {
                        return bad(&format!("{field}.k_max"), "must be at least 1".into());
                    }
                }
                _ => {}
            }
        }
        if let Some(v) = self.sweep.c.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return bad("sweep.c", format!("{v} outside [0, 1]"));
        }
        for &r in &self.sweep.r {
            if r == 0 || r > s.interferers.len() {
                return bad(
                    "sweep.r",
                    format!("{r} not in 1..={} declared interferers", s.interferers.len()),
                );
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        let s = &self.scene;
        match &s.array {
            ArrayConfig::Bte { head_radius, spacing } => {
                ArrayGeometry::bte_pair(*head_radius, *spacing, s.sample_rate, s.speed_of_sound)
            }
            ArrayConfig::Custom {
                mics,
                ref_left,
                ref_right,
            } => ArrayGeometry::new(
                mics.iter().map(|p| [p[0], p[1], 0.0]).collect(),
                *ref_left,
                *ref_right,
                s.sample_rate,
                s.speed_of_sound,
            ),
        }
        .map_err(|e| Error::Config(format!("scene.array: {e}")))
    }

    pub fn stft_params(&self) -> Result<StftParams> {
        let c = self.stft;
        StftParams::new(c.frame_length, c.hop, c.fft_size, self.scene.sample_rate)
            .map_err(|e| Error::Config(format!("stft: {e}")))
    }

    /// Every `(method, η, c, k_max)` combination.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for m in &self.methods {
            match m {
                MethodConfig::Bmvdr => out.push(Variant::plain(Method::Bmvdr)),
                MethodConfig::Oblcmv => out.push(Variant::plain(Method::Oblcmv)),
                MethodConfig::Jblcmv => out.push(Variant::plain(Method::Jblcmv)),
                MethodConfig::Blcmv { eta, eta_right } => {
                    let l = eta.unwrap_or(DEFAULT_BLCMV_ETA);
                    out.push(Variant {
                        method: Method::Blcmv,
                        eta: Some((l, eta_right.unwrap_or(l))),
                        c: None,
                        k_max: None,
                    });
                }
                MethodConfig::Relaxed { c, k_max } => {
                    for &cv in c.as_ref().unwrap_or(&self.sweep.c) {
                        for &k in k_max.as_ref().unwrap_or(&self.sweep.k_max) {
                            out.push(Variant {
                                method: Method::Relaxed,
                                eta: None,
                                c: Some(cv),
                                k_max: Some(k),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_file(field: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: file not found: {}", p.display())))
    }
}

/// One method configuration at which rows are produced for every `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub method: Method,
    pub eta: Option<(f64, f64)>,
    pub c: Option<f64>,
    pub k_max: Option<usize>,
}

impl Variant {
    fn plain(method: Method) -> Self {
        Self {
            method,
            eta: None,
            c: None,
            k_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub eta_left: Option<f64>,
    pub eta_right: Option<f64>,
    pub r: usize,
    pub c: Option<f64>,
    pub k_max: Option<usize>,
    pub gs_snr_in_db: f64,
    pub gs_snr_out_db: f64,
    pub gs_snr_gain_db: f64,
    pub tot_er_itf: f64,
    pub tot_er_ild: f64,
    pub tot_er_ipd: f64,
    /// Ratio against BMVDR; absent when every reference error is zero.
    pub av_er_itf: Option<f64>,
    pub mean_iterations: Option<f64>,
    /// (bin, frame) pairs per iteration count `0..=k_max`; filters are
    /// frame-constant, so each bin counts once per evaluated frame.
    pub iteration_histogram: Option<Vec<usize>>,
    pub fallback_bins: usize,
    /// Bins where the method failed and BMVDR was used instead.
    pub failed_bins: usize,
    /// Interferer-bin pairs skipped by the reference-channel guard.
    pub dropped_interferers: usize,
    pub excluded_cue_records: usize,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 20] = [
    "method",
    "eta_left",
    "eta_right",
    "r",
    "c",
    "k_max",
    "gs_snr_in_db",
    "gs_snr_out_db",
    "gs_snr_gain_db",
    "tot_er_itf",
    "tot_er_ild",
    "tot_er_ipd",
    "av_er_itf",
    "mean_iterations",
    "iteration_histogram",
    "fallback_bins",
    "failed_bins",
    "dropped_interferers",
    "excluded_cue_records",
    "seed",
];

/// Flat CSV form of a [`ResultRow`]; the histogram is `;`-separated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: Method,
    pub eta_left: Option<f64>,
    pub eta_right: Option<f64>,
    pub r: usize,
    pub c: Option<f64>,
    pub k_max: Option<usize>,
    pub gs_snr_in_db: f64,
    pub gs_snr_out_db: f64,
    pub gs_snr_gain_db: f64,
    pub tot_er_itf: f64,
    pub tot_er_ild: f64,
    pub tot_er_ipd: f64,
    pub av_er_itf: Option<f64>,
    pub mean_iterations: Option<f64>,
    pub iteration_histogram: String,
    pub fallback_bins: usize,
    pub failed_bins: usize,
    pub dropped_interferers: usize,
    pub excluded_cue_records: usize,
    pub seed: u64,
}

impl From<&ResultRow> for CsvRow {
    fn from(r: &ResultRow) -> Self {
        Self {
            method: r.method,
            eta_left: r.eta_left,
            eta_right: r.eta_right,
            r: r.r,
            c: r.c,
            k_max: r.k_max,
            gs_snr_in_db: r.gs_snr_in_db,
            gs_snr_out_db: r.gs_snr_out_db,
            gs_snr_gain_db: r.gs_snr_gain_db,
            tot_er_itf: r.tot_er_itf,
            tot_er_ild: r.tot_er_ild,
            tot_er_ipd: r.tot_er_ipd,
            av_er_itf: r.av_er_itf,
            mean_iterations: r.mean_iterations,
            iteration_histogram: r
                .iteration_histogram
                .as_ref()
                .map(|h| h.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default(),
            fallback_bins: r.fallback_bins,
            failed_bins: r.failed_bins,
            dropped_interferers: r.dropped_interferers,
            excluded_cue_records: r.excluded_cue_records,
            seed: r.seed,
        }
    }
}

/// Per-bin diagnostics for `--dump-bins`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinDump {
    pub method: Method,
    pub eta_left: Option<f64>,
    pub r: usize,
    pub c: Option<f64>,
    pub k_max: Option<usize>,
    pub bin: usize,
    pub frequency_hz: f64,
    /// `[re, im]` per microphone.
    pub w_left: Vec<[f64; 2]>,
    pub w_right: Vec<[f64; 2]>,
    /// Per active interferer; `null` where the cue is undefined.
    pub itf_error: Vec<Option<f64>>,
    pub ild_error: Vec<Option<f64>>,
    pub ipd_error: Vec<Option<f64>>,
    pub iterations: Option<usize>,
    pub status: Option<RelaxedStatus>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub target_signal: String,
    pub frames: usize,
    pub evaluated_frames: [usize; 2],
    pub bins: usize,
    pub k_ild: usize,
    pub k_ipd: usize,
    pub cpsd_model: String,
    /// Resolved self-noise standard deviation.
    pub self_noise_std: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub bins: Option<Vec<BinDump>>,
    pub meta: RunMeta,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dump_bins: bool,
}

/// Independent stream for source `index` (0 is the target).
fn source_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct Prepared {
    geometry: ArrayGeometry,
    params: StftParams,
    bands: BandEdges,
    atfs: AtfSet,
    target_track: Vec<Vec<f64>>,
    interferer_tracks: Vec<Vec<Vec<f64>>>,
    interferer_psds: Vec<Vec<f64>>,
    self_noise_bin: f64,
    frames: usize,
    evaluated: Range<usize>,
    target_signal: String,
}

fn source_signal(
    src: &SourceConfig,
    default: SignalConfig,
    len: usize,
    fs: f64,
    seed: u64,
    base_dir: &Path,
) -> Result<(Vec<f64>, String)> {
    let spec = src.signal.clone().unwrap_or(default);
    let (mut x, desc) = match &spec {
        SignalConfig::White => (white_noise(len, seed), "white noise".to_string()),
        SignalConfig::SpeechShaped => (speech_shaped_noise(len, fs, seed), "speech-shaped noise".to_string()),
        SignalConfig::Wav(p) => {
            let path = resolve(base_dir, p);
            let (chans, wav_fs) = read_wav(&path)?;
            if wav_fs != fs {
                return Err(Error::Config(format!(
                    "{}: sample rate {wav_fs} differs from scene rate {fs}",
                    path.display()
                )));
            }
            let mut x = chans.into_iter().next().unwrap_or_default();
            if x.len() < len {
                warn!("{}: shorter than the scene duration, zero padded", path.display());
            }
            x.resize(len, 0.0);
            (x, format!("wav {}", path.display()))
        }
    };
    let g = src.level.sqrt();
    x.iter_mut().for_each(|v| *v *= g);
    Ok((x, desc))
}

fn source_descriptor(
    src: &SourceConfig,
    kind: SourceKind,
    geometry: &ArrayGeometry,
    base_dir: &Path,
) -> Result<SourceDescriptor> {
    let location = match (src.angle_deg, &src.impulse_responses) {
        (Some(a), _) => SourceLocation::Position(position_on_circle(a, src.distance_m.unwrap_or(1.0))),
        (None, Some(p)) => {
            let path = resolve(base_dir, p);
            let (irs, fs) = read_wav(&path)?;
            if fs != geometry.sample_rate() {
                return Err(Error::Config(format!(
                    "{}: sample rate {fs} differs from scene rate {}",
                    path.display(),
                    geometry.sample_rate()
                )));
            }
            SourceLocation::ImpulseResponses(irs)
        }
        (None, None) => return Err(Error::Config("source has no location".into())),
    };
    SourceDescriptor::new(kind, location, vec![])
}

fn prepare(config: &ExperimentConfig, base_dir: &Path) -> Result<Prepared> {
    let s = &config.scene;
    let geometry = config.geometry()?;
    let params = config.stft_params()?;
    let bands = BandEdges::standard(s.sample_rate, params.fft_size())?;
    let fft = params.fft_size();
    let len = (s.duration_s * s.sample_rate).round() as usize;

    let target = source_descriptor(&s.target, SourceKind::Target, &geometry, base_dir)?;
    let target_atfs = target.atfs(&geometry, fft)?;
    let interferer_atfs = s
        .interferers
        .iter()
        .map(|src| source_descriptor(src, SourceKind::Interferer, &geometry, base_dir)?.atfs(&geometry, fft))
        .collect::<Result<Vec<_>>>()?;
    let atfs = AtfSet::new(target_atfs, interferer_atfs, fft)?;

    let (target_wave, target_signal) =
        source_signal(&s.target, SignalConfig::White, len, s.sample_rate, source_seed(config.seed, 0), base_dir)?;
    let target_track = periodogram_track(&target_wave, &params)?;
    let frames = target_track.len();
    let evaluated = if frames > 2 { 1..frames - 1 } else { 0..frames };
    let interferer_tracks = s
        .interferers
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let (x, _) = source_signal(
                src,
                SignalConfig::SpeechShaped,
                len,
                s.sample_rate,
                source_seed(config.seed, i + 1),
                base_dir,
            )?;
            periodogram_track(&x, &params)
        })
        .collect::<Result<Vec<_>>>()?;
    let interferer_psds = interferer_tracks
        .iter()
        .map(|t| long_term_psd(t, evaluated.clone()))
        .collect();
    let window_energy: f64 = params.window().iter().map(|w| w * w).sum();
    let self_noise_bin = match s.self_noise_snr_db {
        Some(db) => {
            // mean target power per bin at the left reference microphone
            let rl = geometry.refs().0;
            let mut sum = 0.0;
            for l in evaluated.clone() {
                for (k, p) in target_track[l].iter().enumerate() {
                    sum += atfs.target[k][rl].norm_sqr() * p;
                }
            }
            let power = sum / (evaluated.len() * atfs.bins()) as f64;
            let floor = power / 10f64.powf(db / 10.0);
            if !(floor > 0.0) {
                return Err(Error::Config(
                    "scene.self_noise_snr_db: target is silent at the left reference microphone".into(),
                ));
            }
            floor
        }
        None => s.self_noise_std.unwrap_or(DEFAULT_SELF_NOISE_STD).powi(2) * window_energy,
    };
    Ok(Prepared {
        geometry,
        params,
        bands,
        atfs,
        target_track,
        interferer_tracks,
        interferer_psds,
        self_noise_bin,
        frames,
        evaluated,
        target_signal,
    })
}

/// Quantities shared by all methods at one `r`.
struct PerR {
    r: usize,
    blocks: Vec<Result<BlockCpsd>>,
    bmvdr: Vec<Option<BinauralFilter>>,
    bmvdr_grid: ErrorGrid,
    model: SourceModelCpsd,
    passthrough: Vec<BinauralFilter>,
}

fn error_grid(prep: &Prepared, r: usize, filters: &[BinauralFilter]) -> ErrorGrid {
    let mut grid = ErrorGrid::new(r, filters.len(), 1);
    for (k, w) in filters.iter().enumerate() {
        for i in 0..r {
            let e = binaural_cues(w, &prep.atfs.interferers[i][k]).ok().map(|c| c.errors());
            grid.set(i, k, 0, e);
        }
    }
    grid
}

fn prepare_r(prep: &Prepared, r: usize) -> Result<PerR> {
    let noise = NoiseCpsd::build(&prep.atfs, &prep.interferer_psds, r, prep.self_noise_bin)?;
    let (rl, rr) = prep.geometry.refs();
    let m = prep.geometry.mic_count();
    let blocks: Vec<Result<BlockCpsd>> = noise.per_bin.par_iter().map(BlockCpsd::new).collect();
    let bmvdr_filters: Vec<Option<BinauralFilter>> = blocks
        .par_iter()
        .enumerate()
        .map(|(k, b)| match b {
            Ok(b) => bmvdr(b, &prep.atfs.target[k], rl, rr).ok(),
            Err(_) => None,
        })
        .collect();
    let passthrough = vec![BinauralFilter::selection(m, rl, rr)?; prep.atfs.bins()];
    let resolved: Vec<BinauralFilter> = bmvdr_filters
        .iter()
        .zip(&passthrough)
        .map(|(w, p)| w.clone().unwrap_or_else(|| p.clone()))
        .collect();
    let bmvdr_grid = error_grid(prep, r, &resolved);
    let model = SourceModelCpsd::new(
        prep.atfs.target.clone(),
        prep.atfs.interferers[..r].to_vec(),
        PsdTrack::PerFrame(prep.target_track.clone()),
        prep.interferer_tracks[..r]
            .iter()
            .map(|t| PsdTrack::PerFrame(t.clone()))
            .collect(),
        vec![prep.self_noise_bin; prep.atfs.bins()],
        prep.frames,
    )?;
    Ok(PerR {
        r,
        blocks,
        bmvdr: bmvdr_filters,
        bmvdr_grid,
        model,
        passthrough,
    })
}

struct BinOutcome {
    filter: BinauralFilter,
    iterations: Option<usize>,
    status: Option<RelaxedStatus>,
    failed: bool,
    dropped: usize,
}

fn design_bin(prep: &Prepared, pr: &PerR, v: &Variant, k: usize, schedule: &dyn CSchedule) -> BinOutcome {
    let (rl, rr) = prep.geometry.refs();
    let a = &prep.atfs.target[k];
    let bs: Vec<CVec> = prep.atfs.interferers_at(k, pr.r);
    let fallback = || pr.bmvdr[k].clone().unwrap_or_else(|| pr.passthrough[k].clone());
    let failed = |e: Error| {
        warn!("{} failed at bin {k} (r = {}): {e}", v.method, pr.r);
        BinOutcome {
            filter: fallback(),
            iterations: None,
            status: None,
            failed: true,
            dropped: 0,
        }
    };
    let p = match &pr.blocks[k] {
        Ok(p) => p,
        Err(e) => return failed(Error::NotPositiveDefinite(e.to_string())),
    };
    let plain = |r: Result<(BinauralFilter, usize)>| match r {
        Ok((filter, dropped)) => BinOutcome {
            filter,
            iterations: None,
            status: None,
            failed: false,
            dropped,
        },
        Err(e) => failed(e),
    };
    match v.method {
        Method::Bmvdr => plain(bmvdr(p, a, rl, rr).map(|w| (w, 0))),
        Method::Jblcmv => plain(jblcmv(p, a, &bs, rl, rr).map(|(w, cs)| (w, cs.dropped.len()))),
        Method::Blcmv => {
            let (el, er) = v.eta.unwrap_or((DEFAULT_BLCMV_ETA, DEFAULT_BLCMV_ETA));
            plain(blcmv(p, a, &bs, el, er, rl, rr).map(|(w, cs)| (w, cs.dropped.len())))
        }
        Method::Oblcmv => plain(oblcmv(p, a, &bs[0], rl, rr).map(|(w, _)| (w, 0))),
        Method::Relaxed => {
            let c = schedule.c_at(prep.params.bin_frequency(k), v.c.unwrap_or(0.0));
            let params = match RelaxationParams::uniform(c, pr.r, v.k_max.unwrap_or(10)) {
                Ok(p) => p,
                Err(e) => return failed(e),
            };
            match relaxed_beamformer(p, a, &bs, &params, rl, rr) {
                Ok(sol) => BinOutcome {
                    filter: sol.filter,
                    iterations: Some(sol.iterations_used),
                    status: Some(sol.status),
                    failed: false,
                    dropped: sol.dropped.len(),
                },
                Err(e) => failed(e),
            }
        }
    }
}

fn evaluate(
    prep: &Prepared,
    pr: &PerR,
    v: &Variant,
    seed: u64,
    dump: bool,
) -> Result<(ResultRow, Vec<BinDump>)> {
    let outcomes: Vec<BinOutcome> = (0..prep.atfs.bins())
        .into_par_iter()
        .map(|k| design_bin(prep, pr, v, k, &ConstantC))
        .collect();
    let filters: Vec<BinauralFilter> = outcomes.iter().map(|o| o.filter.clone()).collect();
    let grid = error_grid(prep, pr.r, &filters);
    let totals = total_errors(&grid, &prep.bands)?;
    let ratio = average_itf_error_ratio(&grid, &pr.bmvdr_grid).ok();
    let snr = gs_snr(&pr.model, &filters, &pr.passthrough, prep.evaluated.clone())?;

    let (mean_iterations, histogram) = match v.k_max {
        Some(k_max) if v.method == Method::Relaxed => {
            let mut h = vec![0usize; k_max + 1];
            let its: Vec<usize> = outcomes.iter().filter_map(|o| o.iterations).collect();
            for &i in &its {
                h[i.min(k_max)] += prep.evaluated.len();
            }
            let mean = if its.is_empty() {
                None
            } else {
                Some(its.iter().sum::<usize>() as f64 / its.len() as f64)
            };
            (mean, Some(h))
        }
        _ => (None, None),
    };
    let row = ResultRow {
        method: v.method,
        eta_left: v.eta.map(|e| e.0),
        eta_right: v.eta.map(|e| e.1),
        r: pr.r,
        c: v.c,
        k_max: v.k_max,
        gs_snr_in_db: snr.input_db,
        gs_snr_out_db: snr.output_db,
        gs_snr_gain_db: snr.gain_db,
        tot_er_itf: totals.itf,
        tot_er_ild: totals.ild,
        tot_er_ipd: totals.ipd,
        av_er_itf: ratio.map(|r| r.value),
        mean_iterations,
        iteration_histogram: histogram,
        fallback_bins: outcomes
            .iter()
            .filter(|o| o.status == Some(RelaxedStatus::Fallback))
            .count(),
        failed_bins: outcomes.iter().filter(|o| o.failed).count(),
        dropped_interferers: outcomes.iter().map(|o| o.dropped).sum(),
        excluded_cue_records: grid.excluded(),
        seed,
    };
    let dumps = if dump {
        let pairs = |w: CVec| w.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>();
        outcomes
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let cues: Vec<_> = (0..pr.r).map(|i| grid.get(i, k, 0)).collect();
                BinDump {
                    method: v.method,
                    eta_left: v.eta.map(|e| e.0),
                    r: pr.r,
                    c: v.c,
                    k_max: v.k_max,
                    bin: k,
                    frequency_hz: prep.params.bin_frequency(k),
                    w_left: pairs(o.filter.left()),
                    w_right: pairs(o.filter.right()),
                    itf_error: cues.iter().map(|c| c.map(|c| c.itf)).collect(),
                    ild_error: cues.iter().map(|c| c.map(|c| c.ild)).collect(),
                    ipd_error: cues.iter().map(|c| c.map(|c| c.ipd)).collect(),
                    iterations: o.iterations,
                    status: o.status,
                    failed: o.failed,
                }
            })
            .collect()
    } else {
        vec![]
    };
    Ok((row, dumps))
}

fn method_rank(m: Method) -> u8 {
    match m {
        Method::Bmvdr => 0,
        Method::Blcmv => 1,
        Method::Oblcmv => 2,
        Method::Jblcmv => 3,
        Method::Relaxed => 4,
    }
}

fn cmp_opt_f64(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y),
    }
}

/// Sort order of emitted rows: `(method, r, c, k_max)`, then `η`.
pub fn row_order(a: &ResultRow, b: &ResultRow) -> Ordering {
    method_rank(a.method)
        .cmp(&method_rank(b.method))
        .then(a.r.cmp(&b.r))
        .then(cmp_opt_f64(a.c, b.c))
        .then(a.k_max.cmp(&b.k_max))
        .then(cmp_opt_f64(a.eta_left, b.eta_left))
        .then(cmp_opt_f64(a.eta_right, b.eta_right))
}

/// Runs every sweep point. Relative paths in the config resolve against `base_dir`.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path, options: RunOptions) -> Result<RunOutput> {
    config.validate(base_dir)?;
    let prep = prepare(config, base_dir)?;
    let variants = config.variants();
    let mut rows = Vec::new();
    let mut dumps = Vec::new();
    for &r in &config.sweep.r {
        info!("r = {r}: {} method configurations", variants.len());
        let m = prep.geometry.mic_count();
        for v in &variants {
            let max = match v.method {
                Method::Blcmv => m.saturating_sub(2),
                Method::Jblcmv => jblcmv_max_interferers(m),
                _ => usize::MAX,
            };
            if r > max {
                warn!("{}: r = {r} exceeds its {max} constrainable interferers; the first {max} are constrained", v.method);
            }
        }
        let pr = prepare_r(&prep, r)?;
        let results = variants
            .par_iter()
            .map(|v| evaluate(&prep, &pr, v, config.seed, options.dump_bins))
            .collect::<Result<Vec<_>>>()?;
        for (row, d) in results {
            rows.push(row);
            dumps.extend(d);
        }
    }
    rows.sort_by(row_order);
    if options.dump_bins {
        dumps.sort_by(|a, b| {
            method_rank(a.method)
                .cmp(&method_rank(b.method))
                .then(a.r.cmp(&b.r))
                .then(cmp_opt_f64(a.c, b.c))
                .then(a.k_max.cmp(&b.k_max))
                .then(cmp_opt_f64(a.eta_left, b.eta_left))
                .then(a.bin.cmp(&b.bin))
        });
    }
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        target_signal: prep.target_signal.clone(),
        frames: prep.frames,
        evaluated_frames: [prep.evaluated.start, prep.evaluated.end],
        bins: prep.atfs.bins(),
        k_ild: prep.bands.k_ild,
        k_ipd: prep.bands.k_ipd,
        cpsd_model: "frame-constant, long-term periodogram PSDs".into(),
        self_noise_std: (prep.self_noise_bin / prep.params.window().iter().map(|w| w * w).sum::<f64>()).sqrt(),
    };
    Ok(RunOutput {
        rows,
        bins: options.dump_bins.then_some(dumps),
        meta,
    })
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(CsvRow::from(r))?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("CSV buffer: {e}")))
}

pub fn parse_results_csv(bytes: &[u8]) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn to_json<T: Serialize>(value: &T, path: &Path) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    v.push(b'\n');
    Ok(v)
}

#[derive(Serialize)]
struct ResultsJson<'a> {
    rows: &'a [ResultRow],
}

/// Emits `results.csv`, `results.json`, `run_meta.json` and optionally `bins.json`.
pub fn emit_results(output: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("results.csv");
    write_atomic(&csv_path, &results_csv(&output.rows)?)?;
    let json_path = dir.join("results.json");
    write_atomic(&json_path, &to_json(&ResultsJson { rows: &output.rows }, &json_path)?)?;
    let meta_path = dir.join("run_meta.json");
    write_atomic(&meta_path, &to_json(&output.meta, &meta_path)?)?;
    if let Some(bins) = &output.bins {
        let p = dir.join("bins.json");
        write_atomic(&p, &to_json(bins, &p)?)?;
    }
    Ok(())
}
