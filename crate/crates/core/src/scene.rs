//! Acoustic scenes: array geometry, transfer functions, disturbance CPSDs and
//! time-domain rendering of the microphone signals.

use std::f64::consts::PI;
use std::sync::Arc;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::linalg::{c64, CMat, CVec, C64};

/// Relative magnitude below which a reference-channel ATF entry is treated as zero.
pub const REFERENCE_GUARD: f64 = 1e-12;

/// Self-noise standard deviation of the microphones.
pub const DEFAULT_SELF_NOISE_STD: f64 = 3.8e-5;

/// Half-width in taps of the windowed-sinc fractional-delay filters.
const FRACTIONAL_DELAY_HALF_WIDTH: usize = 32;

pub type Point = [f64; 3];

fn distance(p: &Point, q: &Point) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Microphone array worn as two hearing aids.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    mic_positions: Vec<Point>,
    ref_left: usize,
    ref_right: usize,
    sample_rate: f64,
    speed_of_sound: f64,
}

impl ArrayGeometry {
    pub fn new(
        mic_positions: Vec<Point>,
        ref_left: usize,
        ref_right: usize,
        sample_rate: f64,
        speed_of_sound: f64,
    ) -> Result<Self> {
        let m = mic_positions.len();
        if m < 2 || !m.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "microphone count must be even and at least 2, got {m}"
            )));
        }
        if ref_left == ref_right || ref_left >= m || ref_right >= m {
            return Err(Error::InvalidInput(format!(
                "reference channels ({ref_left}, {ref_right}) must be distinct indices below {m}"
            )));
        }
        if !(sample_rate > 0.0) || !(speed_of_sound > 0.0) {
            return Err(Error::InvalidInput(
                "sample rate and speed of sound must be positive".into(),
            ));
        }
        Ok(Self {
            mic_positions,
            ref_left,
            ref_right,
            sample_rate,
            speed_of_sound,
        })
    }

    /// Two behind-the-ear devices with two microphones each, on the interaural
    /// (x) axis at `±head_radius`, front microphones `spacing` ahead (+y) of the
    /// middle ones. Channel order: left front, left middle, right middle, right
    /// front; the front microphones are the references.
    pub fn bte_pair(head_radius: f64, spacing: f64, sample_rate: f64, speed_of_sound: f64) -> Result<Self> {
        let mics = vec![
            [-head_radius, spacing / 2.0, 0.0],
            [-head_radius, -spacing / 2.0, 0.0],
            [head_radius, -spacing / 2.0, 0.0],
            [head_radius, spacing / 2.0, 0.0],
        ];
        Self::new(mics, 0, 3, sample_rate, speed_of_sound)
    }

    pub fn mic_count(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn mic_positions(&self) -> &[Point] {
        &self.mic_positions
    }

    pub fn ref_left(&self) -> usize {
        self.ref_left
    }

    pub fn ref_right(&self) -> usize {
        self.ref_right
    }

    pub fn refs(&self) -> (usize, usize) {
        (self.ref_left, self.ref_right)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }
}

/// Position on a horizontal circle around the head; 0° is the right side
/// (+x), 90° straight ahead (+y).
pub fn position_on_circle(angle_deg: f64, radius: f64) -> Point {
    let th = angle_deg.to_radians();
    [radius * th.cos(), radius * th.sin(), 0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Target,
    Interferer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceLocation {
    /// Free-field point source.
    Position(Point),
    /// Measured impulse responses, one per microphone.
    ImpulseResponses(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDescriptor {
    pub kind: SourceKind,
    pub location: SourceLocation,
    /// Per-bin power spectral density (linear).
    pub psd: Vec<f64>,
}

impl SourceDescriptor {
    pub fn new(kind: SourceKind, location: SourceLocation, psd: Vec<f64>) -> Result<Self> {
        if psd.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidInput("PSD entries must be non-negative".into()));
        }
        if let SourceLocation::ImpulseResponses(irs) = &location {
            if irs.is_empty() || irs.iter().any(|h| h.is_empty()) {
                return Err(Error::InvalidInput("empty impulse response".into()));
            }
        }
        Ok(Self {
            kind,
            location,
            psd,
        })
    }

    /// Per-microphone impulse responses; free-field sources get fractional-delay filters.
    pub fn impulse_responses(&self, geometry: &ArrayGeometry) -> Result<Vec<Vec<f64>>> {
        match &self.location {
            SourceLocation::ImpulseResponses(irs) => {
                if irs.len() != geometry.mic_count() {
                    return Err(Error::InvalidInput(format!(
                        "{} impulse responses for {} microphones",
                        irs.len(),
                        geometry.mic_count()
                    )));
                }
                Ok(irs.clone())
            }
            SourceLocation::Position(p) => geometry
                .mic_positions()
                .iter()
                .map(|mic| {
                    let d = distance(p, mic);
                    if d <= 0.0 {
                        return Err(Error::DegenerateGeometry(
                            "source coincides with a microphone".into(),
                        ));
                    }
                    let delay = d / geometry.speed_of_sound() * geometry.sample_rate();
                    Ok(fractional_delay_filter(delay, 1.0 / (4.0 * PI * d)))
                })
                .collect(),
        }
    }

    /// Per-bin ATF vectors of this source.
    pub fn atfs(&self, geometry: &ArrayGeometry, fft_size: usize) -> Result<Vec<CVec>> {
        match &self.location {
            SourceLocation::Position(p) => synthesize_freefield_atfs(geometry, p, fft_size),
            SourceLocation::ImpulseResponses(irs) => atfs_from_impulse_responses(irs, fft_size),
        }
    }
}

/// Windowed-sinc fractional delay of `delay` samples with gain `gain`.
pub fn fractional_delay_filter(delay: f64, gain: f64) -> Vec<f64> {
    let hw = FRACTIONAL_DELAY_HALF_WIDTH as f64;
    let len = (delay + hw).ceil() as usize + 1;
    (0..len)
        .map(|n| {
            let x = n as f64 - delay;
            if x.abs() > hw {
                return 0.0;
            }
            let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            // Blackman window centred on the delay
            let t = (x + hw) / (2.0 * hw);
            let win = 0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos();
            gain * sinc * win
        })
        .collect()
}

/// Free-field ATFs: spherical spreading and propagation delay per microphone,
/// sampled on the one-sided grid of an `fft_size`-point DFT.
pub fn synthesize_freefield_atfs(
    geometry: &ArrayGeometry,
    position: &Point,
    fft_size: usize,
) -> Result<Vec<CVec>> {
    if fft_size < 2 {
        return Err(Error::InvalidInput("fft_size must be at least 2".into()));
    }
    let dists: Vec<f64> = geometry
        .mic_positions()
        .iter()
        .map(|mic| distance(position, mic))
        .collect();
    if dists.iter().any(|&d| d <= 0.0) {
        return Err(Error::DegenerateGeometry(
            "source coincides with a microphone".into(),
        ));
    }
    let bins = fft_size / 2 + 1;
    let c = geometry.speed_of_sound();
    Ok((0..bins)
        .map(|k| {
            let f = k as f64 * geometry.sample_rate() / fft_size as f64;
            CVec::from_iterator(
                dists.len(),
                dists
                    .iter()
                    .map(|&d| C64::from_polar(1.0 / (4.0 * PI * d), -2.0 * PI * f * d / c)),
            )
        })
        .collect())
}

/// One-sided DFT of each impulse response zero-padded to `fft_size`.
/// Responses longer than `fft_size` are truncated with a warning.
pub fn atfs_from_impulse_responses(irs: &[Vec<f64>], fft_size: usize) -> Result<Vec<CVec>> {
    if irs.is_empty() || irs.iter().any(|h| h.is_empty()) {
        return Err(Error::InvalidInput("empty impulse response".into()));
    }
    if fft_size < 2 {
        return Err(Error::InvalidInput("fft_size must be at least 2".into()));
    }
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let bins = fft_size / 2 + 1;
    let mut spectra = Vec::with_capacity(irs.len());
    for (j, h) in irs.iter().enumerate() {
        if h.len() > fft_size {
            warn!(
                "impulse response {j} has {} taps; truncating to {fft_size}",
                h.len()
            );
        }
        let mut buf: Vec<C64> = (0..fft_size)
            .map(|n| c64(h.get(n).copied().unwrap_or(0.0), 0.0))
            .collect();
        fft.process(&mut buf);
        spectra.push(buf);
    }
    Ok((0..bins)
        .map(|k| CVec::from_iterator(irs.len(), spectra.iter().map(|s| s[k])))
        .collect())
}

/// True when both reference entries are non-negligible relative to the largest channel.
pub fn reference_entries_ok(v: &CVec, ref_left: usize, ref_right: usize) -> bool {
    let max = v.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    max > 0.0
        && v[ref_left].norm() >= REFERENCE_GUARD * max
        && v[ref_right].norm() >= REFERENCE_GUARD * max
}

/// Per-bin ATFs of the target and of every interferer.
#[derive(Debug, Clone)]
pub struct AtfSet {
    pub target: Vec<CVec>,
    /// Indexed `[interferer][bin]`.
    pub interferers: Vec<Vec<CVec>>,
    pub fft_size: usize,
}

impl AtfSet {
    pub fn new(target: Vec<CVec>, interferers: Vec<Vec<CVec>>, fft_size: usize) -> Result<Self> {
        let bins = fft_size / 2 + 1;
        let m = target.first().map(|v| v.len()).unwrap_or(0);
        let ok = target.len() == bins
            && target.iter().all(|v| v.len() == m)
            && interferers
                .iter()
                .all(|b| b.len() == bins && b.iter().all(|v| v.len() == m));
        if !ok || m == 0 {
            return Err(Error::InvalidInput(
                "ATF set must hold fft_size/2+1 equally sized vectors per source".into(),
            ));
        }
        Ok(Self {
            target,
            interferers,
            fft_size,
        })
    }

    pub fn bins(&self) -> usize {
        self.target.len()
    }

    pub fn mic_count(&self) -> usize {
        self.target[0].len()
    }

    /// Interferer ATFs at one bin for the first `active` interferers.
    pub fn interferers_at(&self, bin: usize, active: usize) -> Vec<CVec> {
        self.interferers
            .iter()
            .take(active)
            .map(|b| b[bin].clone())
            .collect()
    }
}

/// `P = Σ p_i b_i b_i^H + σ² I` at one bin.
pub fn build_noise_cpsd(interferer_atfs: &[CVec], interferer_psds: &[f64], self_noise_power: f64) -> Result<CMat> {
    if !(self_noise_power > 0.0) {
        return Err(Error::InvalidNoiseFloor(self_noise_power));
    }
    if interferer_atfs.len() != interferer_psds.len() {
        return Err(Error::InvalidInput(format!(
            "{} interferer ATFs but {} PSDs",
            interferer_atfs.len(),
            interferer_psds.len()
        )));
    }
    let m = match interferer_atfs.first() {
        Some(b) => b.len(),
        None => return Err(Error::InvalidInput("cannot infer microphone count".into())),
    };
    let mut p = CMat::identity(m, m) * c64(self_noise_power, 0.0);
    for (b, &psd) in interferer_atfs.iter().zip(interferer_psds) {
        if b.len() != m {
            return Err(Error::InvalidInput("interferer ATFs differ in length".into()));
        }
        if !(psd >= 0.0) {
            return Err(Error::InvalidInput("PSD entries must be non-negative".into()));
        }
        p += b * b.adjoint() * c64(psd, 0.0);
    }
    // exact Hermitian symmetry
    let ph = p.adjoint();
    Ok((p + ph) * c64(0.5, 0.0))
}

/// `σ² I` for a scene without interferers.
pub fn self_noise_cpsd(mic_count: usize, self_noise_power: f64) -> Result<CMat> {
    if !(self_noise_power > 0.0) {
        return Err(Error::InvalidNoiseFloor(self_noise_power));
    }
    Ok(CMat::identity(mic_count, mic_count) * c64(self_noise_power, 0.0))
}

/// Per-bin disturbance CPSDs of a scene.
#[derive(Debug, Clone)]
pub struct NoiseCpsd {
    pub per_bin: Vec<CMat>,
    pub self_noise_power: f64,
    /// Indexed `[interferer][bin]`.
    pub interferer_psds: Vec<Vec<f64>>,
}

impl NoiseCpsd {
    /// Builds `P(k)` from the first `active` interferers of `atfs`.
    pub fn build(
        atfs: &AtfSet,
        interferer_psds: &[Vec<f64>],
        active: usize,
        self_noise_power: f64,
    ) -> Result<Self> {
        if active > atfs.interferers.len() || active > interferer_psds.len() {
            return Err(Error::InvalidInput(format!(
                "{active} active interferers requested, {} available",
                atfs.interferers.len().min(interferer_psds.len())
            )));
        }
        let m = atfs.mic_count();
        let per_bin = (0..atfs.bins())
            .map(|k| {
                if active == 0 {
                    self_noise_cpsd(m, self_noise_power)
                } else {
                    let psds: Vec<f64> = interferer_psds[..active].iter().map(|p| p[k]).collect();
                    build_noise_cpsd(&atfs.interferers_at(k, active), &psds, self_noise_power)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            per_bin,
            self_noise_power,
            interferer_psds: interferer_psds[..active].to_vec(),
        })
    }
}

/// Scene used for rendering: geometry plus the sources in a fixed order.
#[derive(Debug, Clone)]
pub struct AcousticScene {
    pub geometry: ArrayGeometry,
    pub sources: Vec<SourceDescriptor>,
}

/// White Gaussian self-noise added to every microphone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfNoise {
    pub std: f64,
    pub seed: u64,
}

/// Convolves each source with its impulse responses and sums per microphone.
/// Output channels have the length of the source waveforms.
pub fn render_microphone_signals(
    scene: &AcousticScene,
    source_waveforms: &[Vec<f64>],
    noise: Option<SelfNoise>,
) -> Result<Vec<Vec<f64>>> {
    if source_waveforms.len() != scene.sources.len() {
        return Err(Error::InvalidInput(format!(
            "{} waveforms for {} sources",
            source_waveforms.len(),
            scene.sources.len()
        )));
    }
    let len = source_waveforms.first().map(|w| w.len()).unwrap_or(0);
    if source_waveforms.iter().any(|w| w.len() != len) {
        return Err(Error::InvalidInput("source waveforms differ in length".into()));
    }
    let m = scene.geometry.mic_count();
    let mut out = vec![vec![0.0; len]; m];
    let mut planner = FftPlanner::new();
    for (src, wave) in scene.sources.iter().zip(source_waveforms) {
        let irs = src.impulse_responses(&scene.geometry)?;
        for (j, ir) in irs.iter().enumerate() {
            let y = convolve(wave, ir, &mut planner);
            for (o, v) in out[j].iter_mut().zip(y) {
                *o += v;
            }
        }
    }
    if let Some(noise) = noise {
        if noise.std > 0.0 {
            let normal = Normal::new(0.0, noise.std)
                .map_err(|e| Error::InvalidInput(format!("self-noise: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            for ch in out.iter_mut() {
                for v in ch.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
    }
    Ok(out)
}

/// Linear convolution truncated to `x.len()` samples.
pub fn convolve(x: &[f64], h: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    if n == 0 || h.is_empty() {
        return vec![0.0; n];
    }
    if h.len() * n <= 1 << 22 {
        let mut y = vec![0.0; n];
        for (i, &hv) in h.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            for (yo, &xv) in y[i.min(n)..].iter_mut().zip(x) {
                *yo += hv * xv;
            }
        }
        return y;
    }
    let size = (n + h.len() - 1).next_power_of_two();
    let fwd: Arc<dyn rustfft::Fft<f64>> = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut xs: Vec<C64> = (0..size).map(|i| c64(x.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    let mut hs: Vec<C64> = (0..size).map(|i| c64(h.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    fwd.process(&mut xs);
    fwd.process(&mut hs);
    for (a, b) in xs.iter_mut().zip(&hs) {
        *a *= b;
    }
    inv.process(&mut xs);
    let scale = 1.0 / size as f64;
    xs[..n].iter().map(|z| z.re * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermitian_defect;
    use nalgebra::DMatrix;

    fn geometry() -> ArrayGeometry {
        ArrayGeometry::bte_pair(0.0875, 0.0076, 16_000.0, 343.0).unwrap()
    }

    #[test]
    fn geometry_invariants() {
        assert!(ArrayGeometry::new(vec![[0.0; 3]; 3], 0, 2, 16e3, 343.0).is_err());
        assert!(ArrayGeometry::new(vec![[0.0; 3]; 4], 1, 1, 16e3, 343.0).is_err());
        assert!(ArrayGeometry::new(vec![[0.0; 3]; 4], 0, 4, 16e3, 343.0).is_err());
        assert!(ArrayGeometry::new(vec![[0.0; 3]; 2], 0, 1, 16e3, 343.0).is_ok());
    }

    #[test]
    fn equidistant_source_has_unit_itf() {
        let g = geometry();
        let atfs = synthesize_freefield_atfs(&g, &position_on_circle(90.0, 0.8), 256).unwrap();
        assert_eq!(atfs.len(), 129);
        for a in &atfs {
            assert!((a[0] / a[3] - c64(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn dc_bin_is_real_positive() {
        let g = geometry();
        let atfs = synthesize_freefield_atfs(&g, &position_on_circle(15.0, 0.8), 256).unwrap();
        for z in atfs[0].iter() {
            assert!(z.re > 0.0 && z.im == 0.0);
        }
    }

    #[test]
    fn coincident_source_is_rejected() {
        let g = geometry();
        let mic = g.mic_positions()[1];
        assert!(matches!(
            synthesize_freefield_atfs(&g, &mic, 256),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn phase_difference_matches_fractional_delay_oracle() {
        // d1 = 1 m, d2 = 1.1 m, 1 kHz bin of a 16-point grid at fs = 16 kHz
        let g = ArrayGeometry::new(vec![[1.0, 0.0, 0.0], [1.1, 0.0, 0.0]], 0, 1, 16_000.0, 343.0).unwrap();
        let atfs = synthesize_freefield_atfs(&g, &[0.0, 0.0, 0.0], 16).unwrap();
        let a = &atfs[1];
        let expected = -2.0 * PI * 1000.0 * 0.1 / 343.0;
        let got = (a[1] / a[0]).arg();
        let wrap = |x: f64| (x + PI).rem_euclid(2.0 * PI) - PI;
        assert!((wrap(got - expected)).abs() < 1e-12);

        // oracle: DTFT at 1 kHz of windowed-sinc fractional delays applied to an impulse
        let dtft = |h: &[f64]| -> C64 {
            let w = 2.0 * PI * 1000.0 / 16_000.0;
            h.iter()
                .enumerate()
                .map(|(n, &v)| C64::from_polar(v, -w * n as f64))
                .sum()
        };
        let h1 = fractional_delay_filter(1.0 / 343.0 * 16_000.0, 1.0);
        let h2 = fractional_delay_filter(1.1 / 343.0 * 16_000.0, 1.0);
        let oracle = (dtft(&h2) / dtft(&h1)).arg();
        assert!(wrap(oracle - expected).abs() < 1e-3, "oracle {oracle} expected {expected}");
    }

    #[test]
    fn freefield_magnitude_decreases_with_distance() {
        let g = geometry();
        let near = synthesize_freefield_atfs(&g, &position_on_circle(40.0, 0.5), 64).unwrap();
        let far = synthesize_freefield_atfs(&g, &position_on_circle(40.0, 1.5), 64).unwrap();
        for (n, f) in near.iter().zip(&far) {
            for j in 0..4 {
                assert!(n[j].norm() > f[j].norm());
            }
        }
    }

    #[test]
    fn impulse_atfs() {
        let delta = vec![vec![1.0], vec![1.0, 0.0, 0.0]];
        for a in atfs_from_impulse_responses(&delta, 32).unwrap() {
            assert!((a[0] - c64(1.0, 0.0)).norm() < 1e-15);
            assert!((a[1] - c64(1.0, 0.0)).norm() < 1e-15);
        }
        let n0 = 3;
        let mut shifted = vec![0.0; 8];
        shifted[n0] = 0.5;
        let atfs = atfs_from_impulse_responses(&[shifted], 32).unwrap();
        for (k, a) in atfs.iter().enumerate() {
            let expected = C64::from_polar(0.5, -2.0 * PI * (k * n0) as f64 / 32.0);
            assert!((a[0] - expected).norm() < 1e-14);
        }
        assert!(atfs_from_impulse_responses(&[vec![]], 32).is_err());
    }

    #[test]
    fn atf_inverse_dft_recovers_padded_ir() {
        let ir: Vec<f64> = (0..20).map(|n| ((n * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let n = 32;
        let atfs = atfs_from_impulse_responses(std::slice::from_ref(&ir), n).unwrap();
        // rebuild the full spectrum by conjugate symmetry and invert
        let full: Vec<C64> = (0..n)
            .map(|k| if k <= n / 2 { atfs[k][0] } else { atfs[n - k][0].conj() })
            .collect();
        for t in 0..n {
            let v: C64 = full
                .iter()
                .enumerate()
                .map(|(k, z)| z * C64::from_polar(1.0, 2.0 * PI * (k * t) as f64 / n as f64))
                .sum::<C64>()
                / n as f64;
            let expected = ir.get(t).copied().unwrap_or(0.0);
            assert!((v.re - expected).abs() <= 1e-12 * 5.0, "t={t}");
            assert!(v.im.abs() < 1e-12);
        }
    }

    #[test]
    fn cpsd_without_interferers_is_scaled_identity() {
        let p = self_noise_cpsd(4, 2e-3).unwrap();
        assert_eq!(p, CMat::identity(4, 4) * c64(2e-3, 0.0));
        assert!(matches!(self_noise_cpsd(4, 0.0), Err(Error::InvalidNoiseFloor(_))));
        assert!(matches!(
            build_noise_cpsd(&[CVec::zeros(4)], &[1.0], -1.0),
            Err(Error::InvalidNoiseFloor(_))
        ));
    }

    #[test]
    fn rank_one_cpsd_eigenvalues() {
        let b = CVec::from_vec(vec![c64(0.3, -0.2), c64(1.0, 0.5), c64(-0.4, 0.1), c64(0.2, 0.9)]);
        let sigma2 = 0.01;
        let p = build_noise_cpsd(std::slice::from_ref(&b), &[1.0], sigma2).unwrap();
        // oracle: eigenvalues of the real-symmetric lift come in pairs
        let lifted: DMatrix<f64> = crate::linalg::real_lift(&p);
        let mut ev: Vec<f64> = lifted.symmetric_eigen().eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top = b.norm_squared() + sigma2;
        assert!((ev[7] - top).abs() < 1e-12 && (ev[6] - top).abs() < 1e-12);
        for e in &ev[..6] {
            assert!((e - sigma2).abs() < 1e-12);
        }
        assert!(hermitian_defect(&p) <= 1e-12 * crate::linalg::max_abs(&p));
    }

    #[test]
    fn unit_impulse_render_is_identity() {
        let g = ArrayGeometry::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], 0, 1, 8000.0, 343.0).unwrap();
        let src = SourceDescriptor::new(
            SourceKind::Target,
            SourceLocation::ImpulseResponses(vec![vec![1.0], vec![1.0]]),
            vec![],
        )
        .unwrap();
        let scene = AcousticScene {
            geometry: g,
            sources: vec![src],
        };
        let x: Vec<f64> = (0..100).map(|n| (n as f64 * 0.37).sin()).collect();
        let y = render_microphone_signals(&scene, std::slice::from_ref(&x), None).unwrap();
        assert_eq!(y[0], x);
        assert_eq!(y[1], x);
    }

    #[test]
    fn render_rejects_length_mismatch() {
        let g = geometry();
        let mk = |deg| {
            SourceDescriptor::new(
                SourceKind::Interferer,
                SourceLocation::Position(position_on_circle(deg, 0.8)),
                vec![],
            )
            .unwrap()
        };
        let scene = AcousticScene {
            geometry: g,
            sources: vec![mk(10.0), mk(50.0)],
        };
        assert!(render_microphone_signals(&scene, &[vec![0.0; 10], vec![0.0; 11]], None).is_err());
    }

    #[test]
    fn fft_and_direct_convolution_agree() {
        let x: Vec<f64> = (0..70_000).map(|n| ((n * 31 % 97) as f64 - 48.0) / 50.0).collect();
        let h = fractional_delay_filter(40.3, 0.1);
        let mut planner = FftPlanner::new();
        let fast = convolve(&x, &h, &mut planner);
        let mut slow = vec![0.0; x.len()];
        for n in 0..x.len() {
            for (i, &hv) in h.iter().enumerate() {
                if n >= i {
                    slow[n] += hv * x[n - i];
                }
            }
        }
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }
}
