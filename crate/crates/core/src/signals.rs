//! Source waveforms: seeded noise, speech-shaped noise, WAV I/O and periodograms.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::stft::{analyze, StftParams};

/// Unit-variance white Gaussian noise.
pub fn white_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Power envelope approximating the long-term average speech spectrum:
/// fourth-order high-pass at 100 Hz, flat to 500 Hz, then about -9 dB/octave.
pub fn speech_shaped_envelope(frequency_hz: f64) -> f64 {
    let f = frequency_hz.abs();
    let lo = (f / 100.0).powi(4);
    lo / (1.0 + lo) / (1.0 + (f / 500.0).powi(3))
}

/// White noise shaped by [`speech_shaped_envelope`], normalized to unit variance.
pub fn speech_shaped_noise(len: usize, sample_rate: f64, seed: u64) -> Vec<f64> {
    if len == 0 {
        return vec![];
    }
    let white = white_noise(len, seed);
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = white.iter().map(|&x| Complex::new(x, 0.0)).collect();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let kk = k.min(len - k);
        let f = kk as f64 * sample_rate / len as f64;
        *v *= speech_shaped_envelope(f).sqrt();
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let y: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let var = y.iter().map(|v| v * v).sum::<f64>() / len as f64;
    if var <= 0.0 {
        return y;
    }
    let s = var.sqrt().recip();
    y.into_iter().map(|v| v * s).collect()
}

/// Reads every channel of a WAV file as `f64` in `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, f64)> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mut out = vec![Vec::with_capacity(samples.len() / channels.max(1)); channels];
    for (i, s) in samples.into_iter().enumerate() {
        out[i % channels].push(s);
    }
    Ok((out, spec.sample_rate as f64))
}

/// Writes 32-bit float WAV.
pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    if channels.is_empty() || channels.iter().any(|c| c.len() != channels[0].len()) {
        return Err(Error::InvalidInput("WAV channels must be non-empty and equally long".into()));
    }
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for i in 0..channels[0].len() {
        for ch in channels {
            writer.write_sample(ch[i] as f32).map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}

/// `|X(l, k)|²` of a single-channel signal, indexed `[frame][bin]`.
pub fn periodogram_track(signal: &[f64], params: &StftParams) -> Result<Vec<Vec<f64>>> {
    let x = analyze(&[signal.to_vec()], params)?;
    Ok((0..x.frames())
        .map(|l| (0..x.bins()).map(|k| x.get(l, k, 0).norm_sqr()).collect())
        .collect())
}

/// Mean of a periodogram track over `frames`.
pub fn long_term_psd(track: &[Vec<f64>], frames: std::ops::Range<usize>) -> Vec<f64> {
    let bins = track.first().map_or(0, |f| f.len());
    let n = frames.len().max(1) as f64;
    let mut psd = vec![0.0; bins];
    for frame in &track[frames] {
        for (p, v) in psd.iter_mut().zip(frame) {
            *p += v;
        }
    }
    psd.iter_mut().for_each(|p| *p /= n);
    psd
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_noise_is_seeded_and_unit_variance() {
        let a = white_noise(100_000, 7);
        assert_eq!(a, white_noise(100_000, 7));
        assert_ne!(a, white_noise(100_000, 8));
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02);
    }

    #[test]
    fn envelope_shape() {
        assert_eq!(speech_shaped_envelope(0.0), 0.0);
        let peak = speech_shaped_envelope(300.0);
        assert!(peak > speech_shaped_envelope(50.0));
        // one octave well above the knee drops by close to 9 dB
        let drop = 10.0 * (speech_shaped_envelope(4000.0) / speech_shaped_envelope(2000.0)).log10();
        assert!((drop + 9.0).abs() < 0.3, "{drop}");
    }

    #[test]
    fn speech_shaped_spectrum_follows_envelope() {
        let fs = 16_000.0;
        let x = speech_shaped_noise(16_000 * 4, fs, 3);
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((var - 1.0).abs() < 1e-9);
        let params = StftParams::standard();
        let track = periodogram_track(&x, &params).unwrap();
        let psd = long_term_psd(&track, 1..track.len() - 1);
        let ratio_meas = psd[16] / psd[64];
        let ratio_env = speech_shaped_envelope(params.bin_frequency(16)) / speech_shaped_envelope(params.bin_frequency(64));
        assert!((10.0 * (ratio_meas / ratio_env).log10()).abs() < 1.5);
    }

    #[test]
    fn white_psd_matches_window_energy() {
        let params = StftParams::standard();
        let x = white_noise(16_000 * 8, 11);
        let track = periodogram_track(&x, &params).unwrap();
        let psd = long_term_psd(&track, 1..track.len() - 1);
        let energy: f64 = params.window().iter().map(|w| w * w).sum();
        let mean = psd[1..psd.len() - 1].iter().sum::<f64>() / (psd.len() - 2) as f64;
        assert!((mean / energy - 1.0).abs() < 0.02);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let chans = vec![vec![0.0, 0.5, -0.25], vec![0.125, -1.0, 0.75]];
        write_wav(&path, &chans, 16_000).unwrap();
        let (back, fs) = read_wav(&path).unwrap();
        assert_eq!(fs, 16_000.0);
        assert_eq!(back, chans);
        assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Wav { .. })));
    }
}
