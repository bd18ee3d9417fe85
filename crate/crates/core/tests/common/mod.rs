#![allow(dead_code)]

use binaural_beamform::lcmv::BlockCpsd;
use binaural_beamform::linalg::{c64, CVec};
use binaural_beamform::scene::{
    build_noise_cpsd, position_on_circle, ArrayGeometry, AtfSet, NoiseCpsd, SourceDescriptor, SourceKind,
    SourceLocation,
};
use binaural_beamform::signals::speech_shaped_envelope;
use binaural_beamform::stft::StftParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INTERFERER_ANGLES: [f64; 7] = [15.0, 45.0, 75.0, 105.0, 165.0, 240.0, 300.0];
pub const SOURCE_DISTANCE: f64 = 0.8;

pub fn bte_geometry() -> ArrayGeometry {
    ArrayGeometry::bte_pair(0.0875, 0.0076, 16_000.0, 343.0).unwrap()
}

fn freefield_atfs(geometry: &ArrayGeometry, angle: f64, distance: f64, fft: usize) -> Vec<CVec> {
    SourceDescriptor::new(
        SourceKind::Interferer,
        SourceLocation::Position(position_on_circle(angle, distance)),
        vec![],
    )
    .unwrap()
    .atfs(geometry, fft)
    .unwrap()
}

/// Free-field BTE scene: unit white target at 90°, seven interferers at
/// 0.8 m with speech-shaped PSDs, self-noise 50 dB below the target at the
/// left reference microphone.
pub struct ReferenceScene {
    pub geometry: ArrayGeometry,
    pub params: StftParams,
    pub atfs: AtfSet,
    pub psds: Vec<Vec<f64>>,
    pub self_noise: f64,
}

impl ReferenceScene {
    pub fn new() -> Self {
        let geometry = bte_geometry();
        let params = StftParams::standard();
        let fft = params.fft_size();
        let target = freefield_atfs(&geometry, 90.0, SOURCE_DISTANCE, fft);
        let interferers = INTERFERER_ANGLES
            .iter()
            .map(|&a| freefield_atfs(&geometry, a, SOURCE_DISTANCE, fft))
            .collect();
        let atfs = AtfSet::new(target, interferers, fft).unwrap();
        let rl = geometry.refs().0;
        let target_power = atfs.target.iter().map(|a| a[rl].norm_sqr()).sum::<f64>() / atfs.bins() as f64;
        let energy: f64 = params.window().iter().map(|w| w * w).sum();
        let psd: Vec<f64> = (0..params.bins())
            .map(|k| speech_shaped_envelope(params.bin_frequency(k)) * energy)
            .collect();
        Self {
            geometry,
            params,
            atfs,
            psds: vec![psd; INTERFERER_ANGLES.len()],
            self_noise: target_power * energy / 1e5,
        }
    }

    pub fn refs(&self) -> (usize, usize) {
        self.geometry.refs()
    }

    pub fn bins(&self) -> usize {
        self.atfs.bins()
    }

    /// Per-bin noise CPSDs with the first `r` interferers active.
    pub fn blocks(&self, r: usize) -> Vec<BlockCpsd> {
        NoiseCpsd::build(&self.atfs, &self.psds, r, self.self_noise)
            .unwrap()
            .per_bin
            .iter()
            .map(|p| BlockCpsd::new(p).unwrap())
            .collect()
    }

    pub fn interferers(&self, bin: usize, r: usize) -> Vec<CVec> {
        self.atfs.interferers_at(bin, r)
    }
}

/// One bin of a random free-field scene around the BTE array.
pub struct RandomBin {
    pub p: BlockCpsd,
    pub a: CVec,
    pub bs: Vec<CVec>,
}

pub fn random_scene_bin(seed: u64, interferers: usize) -> RandomBin {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = bte_geometry();
    let fft = 256;
    let bin = rng.random_range(1..fft / 2);
    let target_angle: f64 = rng.random_range(0.0..360.0);
    let a = freefield_atfs(&geometry, target_angle, rng.random_range(0.5..3.0), fft)[bin].clone();
    let mut bs = Vec::new();
    while bs.len() < interferers {
        let angle: f64 = rng.random_range(0.0..360.0);
        // keep interferers apart from the target direction
        let sep = ((angle - target_angle + 540.0) % 360.0 - 180.0).abs();
        if sep < 10.0 {
            continue;
        }
        bs.push(freefield_atfs(&geometry, angle, rng.random_range(0.5..3.0), fft)[bin].clone());
    }
    let psds: Vec<f64> = (0..interferers).map(|_| 10f64.powf(rng.random_range(-2.0..1.0))).collect();
    let p = build_noise_cpsd(&bs, &psds, 1e-6).unwrap();
    RandomBin {
        p: BlockCpsd::new(&p).unwrap(),
        a,
        bs,
    }
}

/// Uniformly random complex ATFs and a random positive-definite CPSD.
pub fn random_complex_bin(seed: u64, mics: usize, interferers: usize) -> RandomBin {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_cvec(&mut rng, mics);
    let bs: Vec<CVec> = (0..interferers).map(|_| random_cvec(&mut rng, mics)).collect();
    let x = binaural_beamform::linalg::CMat::from_fn(mics, mics + 2, |_, _| {
        c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let p = &x * x.adjoint();
    RandomBin {
        p: BlockCpsd::new(&p).unwrap(),
        a,
        bs,
    }
}

pub fn random_cvec(rng: &mut ChaCha8Rng, n: usize) -> CVec {
    CVec::from_fn(n, |_, _| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

pub fn max_entry_diff(x: &CVec, y: &CVec) -> f64 {
    (x - y).iter().map(|z| z.norm()).fold(0.0, f64::max)
}
