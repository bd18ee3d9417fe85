//! Square-root-Hann STFT analysis/synthesis with 50% overlap-add, and
//! per-bin application of binaural filters.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::lcmv::BinauralFilter;
use crate::linalg::{c64, CVec, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct StftParams {
    frame_length: usize,
    hop: usize,
    fft_size: usize,
    sample_rate: f64,
    window: Vec<f64>,
}

impl StftParams {
    pub fn new(frame_length: usize, hop: usize, fft_size: usize, sample_rate: f64) -> Result<Self> {
        if frame_length < 2 || !frame_length.is_multiple_of(2) || hop * 2 != frame_length {
            return Err(Error::Config(format!(
                "hop {hop} must be half of an even frame length {frame_length} for overlap-add"
            )));
        }
        if fft_size < frame_length {
            return Err(Error::Config(format!(
                "FFT size {fft_size} is smaller than the frame length {frame_length}"
            )));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        // periodic Hann, square-rooted
        let window = (0..frame_length)
            .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / frame_length as f64).cos()).sqrt())
            .collect();
        Ok(Self {
            frame_length,
            hop,
            fft_size,
            sample_rate,
            window,
        })
    }

    /// 10 ms frames, 50% overlap, 256-point FFT at 16 kHz.
    pub fn standard() -> Self {
        Self::new(160, 80, 256, 16_000.0).expect("valid defaults")
    }

    /// Frame length from a duration in milliseconds.
    pub fn from_duration(sample_rate: f64, frame_ms: f64, fft_size: usize) -> Result<Self> {
        let frame_length = (sample_rate * frame_ms / 1000.0).round() as usize;
        Self::new(frame_length, frame_length / 2, fft_size, sample_rate)
    }

    pub fn frame_length(&self) -> usize {
        self.frame_length
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.fft_size as f64
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.frame_length {
            0
        } else {
            (samples - self.frame_length) / self.hop + 1
        }
    }
}

/// Frames × bins × channels of one-sided STFT coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct TfTensor {
    data: Vec<C64>,
    frames: usize,
    bins: usize,
    channels: usize,
    params: StftParams,
}

impl TfTensor {
    pub fn zeros(frames: usize, channels: usize, params: StftParams) -> Self {
        let bins = params.bins();
        Self {
            data: vec![c64(0.0, 0.0); frames * bins * channels],
            frames,
            bins,
            channels,
            params,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    fn index(&self, frame: usize, bin: usize, channel: usize) -> usize {
        (frame * self.bins + bin) * self.channels + channel
    }

    pub fn get(&self, frame: usize, bin: usize, channel: usize) -> C64 {
        self.data[self.index(frame, bin, channel)]
    }

    pub fn set(&mut self, frame: usize, bin: usize, channel: usize, value: C64) {
        let i = self.index(frame, bin, channel);
        self.data[i] = value;
    }

    /// All channels at one time-frequency point.
    pub fn vector(&self, frame: usize, bin: usize) -> CVec {
        let start = self.index(frame, bin, 0);
        CVec::from_column_slice(&self.data[start..start + self.channels])
    }

    pub fn scale(&mut self, factor: f64) {
        for z in &mut self.data {
            *z *= factor;
        }
    }
}

/// Splits each channel into windowed frames and takes the one-sided DFT.
pub fn analyze(waveform: &[Vec<f64>], params: &StftParams) -> Result<TfTensor> {
    let channels = waveform.len();
    if channels == 0 {
        return Err(Error::InvalidInput("no channels to analyze".into()));
    }
    let len = waveform[0].len();
    if waveform.iter().any(|c| c.len() != len) {
        return Err(Error::InvalidInput("channels differ in length".into()));
    }
    if len < params.frame_length {
        return Err(Error::InvalidInput(format!(
            "{len} samples is shorter than one frame of {}",
            params.frame_length
        )));
    }
    let frames = params.frame_count(len);
    let bins = params.bins();
    let n = params.fft_size;
    let fft = FftPlanner::new().plan_fft_forward(n);

    let per_channel: Vec<Vec<C64>> = waveform
        .par_iter()
        .map(|x| {
            let mut out = Vec::with_capacity(frames * bins);
            let mut buf = vec![c64(0.0, 0.0); n];
            for l in 0..frames {
                let start = l * params.hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = if i < params.frame_length {
                        c64(params.window[i] * x[start + i], 0.0)
                    } else {
                        c64(0.0, 0.0)
                    };
                }
                fft.process(&mut buf);
                out.extend_from_slice(&buf[..bins]);
            }
            out
        })
        .collect();

    let mut tensor = TfTensor::zeros(frames, channels, params.clone());
    for (j, spec) in per_channel.iter().enumerate() {
        for l in 0..frames {
            for k in 0..bins {
                tensor.set(l, k, j, spec[l * bins + k]);
            }
        }
    }
    Ok(tensor)
}

/// Inverse DFT per frame, synthesis window, overlap-add.
/// Output length is `(frames - 1) * hop + frame_length`.
pub fn synthesize(tensor: &TfTensor) -> Vec<Vec<f64>> {
    let params = &tensor.params;
    let n = params.fft_size;
    let frames = tensor.frames;
    if frames == 0 {
        return vec![Vec::new(); tensor.channels];
    }
    let len = (frames - 1) * params.hop + params.frame_length;
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    (0..tensor.channels)
        .into_par_iter()
        .map(|j| {
            let mut out = vec![0.0; len];
            let mut buf = vec![c64(0.0, 0.0); n];
            for l in 0..frames {
                for k in 0..n {
                    buf[k] = if k < tensor.bins {
                        tensor.get(l, k, j)
                    } else {
                        tensor.get(l, n - k, j).conj()
                    };
                }
                ifft.process(&mut buf);
                let start = l * params.hop;
                for i in 0..params.frame_length {
                    out[start + i] += params.window[i] * buf[i].re / n as f64;
                }
            }
            out
        })
        .collect()
}

/// Source of per-bin (optionally frame-varying) binaural filters.
pub trait FilterProvider {
    fn filter(&self, bin: usize, frame: usize) -> Option<&BinauralFilter>;
}

/// Frame-constant filters indexed by bin.
impl FilterProvider for [BinauralFilter] {
    fn filter(&self, bin: usize, _frame: usize) -> Option<&BinauralFilter> {
        self.get(bin)
    }
}

impl FilterProvider for Vec<BinauralFilter> {
    fn filter(&self, bin: usize, _frame: usize) -> Option<&BinauralFilter> {
        self.get(bin)
    }
}

/// Two-channel output with `x̂_L = w_L^H y` and `x̂_R = w_R^H y`.
pub fn apply_binaural_filter<P: FilterProvider + ?Sized>(tensor: &TfTensor, filters: &P) -> Result<TfTensor> {
    let mut out = TfTensor::zeros(tensor.frames, 2, tensor.params.clone());
    for l in 0..tensor.frames {
        for k in 0..tensor.bins {
            let w = filters
                .filter(k, l)
                .ok_or_else(|| Error::Config(format!("no filter for bin {k}, frame {l}")))?;
            if w.mic_count() != tensor.channels {
                return Err(Error::Config(format!(
                    "filter for bin {k} has {} channels, tensor has {}",
                    w.mic_count(),
                    tensor.channels
                )));
            }
            let (left, right) = w.response(&tensor.vector(l, k));
            out.set(l, k, 0, left);
            out.set(l, k, 1, right);
        }
    }
    Ok(out)
}
