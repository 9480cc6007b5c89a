//! Log-mel filterbank features spliced into 345-dimensional frames.
//!
//! Audio is framed with a 25 ms Hamming window and a 10 ms hop, analyzed
//! into 23 log-mel bins, and every tenth frame is concatenated with its
//! seven neighbours on each side.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 8000;
pub const WINDOW_SEC: f64 = 0.025;
pub const HOP_SEC: f64 = 0.01;
pub const FFT_SIZE: usize = 256;
pub const MEL_BINS: usize = 23;
pub const CONTEXT: usize = 15;
pub const STRIDE: usize = 10;
pub const FEATURE_DIM: usize = MEL_BINS * CONTEXT;
pub const FRAME_STEP_SEC: f64 = HOP_SEC * STRIDE as f64;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Reads a mono 16-bit PCM WAV file; samples are scaled to `[-1, 1)`.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(Error::Config(format!(
                "{}: expected mono 16-bit PCM, found {} channel(s), {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| wav_error(path, e))?;
        Self::new(samples, spec.sample_rate)
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Config(format!("{}: {other}", path.display())),
    }
}

/// Spliced features `X`, one row per 100 ms step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub data: Tensor<f32>,
    pub frame_step_sec: f64,
}

impl FeatureMatrix {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let (rows, cols) = data.dims2()?;
        if cols != FEATURE_DIM || rows == 0 {
            return Err(Error::dim("features", &[rows, cols], &[FEATURE_DIM]));
        }
        Ok(Self {
            data,
            frame_step_sec: FRAME_STEP_SEC,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }
}

fn window_len(sample_rate: u32) -> usize {
    (WINDOW_SEC * sample_rate as f64).round() as usize
}

fn hop_len(sample_rate: u32) -> usize {
    (HOP_SEC * sample_rate as f64).round() as usize
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Hamming-weighted 25 ms frames every 10 ms;
/// `floor((N - win) / hop) + 1` of them.
pub fn frame_and_window(w: &Waveform) -> Result<Vec<Vec<f64>>> {
    let (win, hop) = (window_len(w.sample_rate), hop_len(w.sample_rate));
    let n = w.samples.len();
    if n < win {
        return Err(Error::TooShort(format!(
            "{n} samples is shorter than one {win}-sample window"
        )));
    }
    let taper = hamming(win);
    let count = (n - win) / hop + 1;
    Ok((0..count)
        .map(|i| {
            w.samples[i * hop..i * hop + win]
                .iter()
                .zip(&taper)
                .map(|(s, h)| s * h)
                .collect()
        })
        .collect())
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies of the mel filters, with the two outer edges.
pub fn mel_edges(sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BINS + 1) as f64))
        .collect()
}

/// `MEL_BINS x (FFT_SIZE / 2 + 1)` triangular filter weights spanning 0 Hz
/// to Nyquist.
pub fn mel_filterbank(sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_edges(sample_rate);
    let bins = FFT_SIZE / 2 + 1;
    (0..MEL_BINS)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / FFT_SIZE as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Computes 23 natural-log mel energies per frame, floored at `1e-10`.
pub struct LogMel {
    fft: Arc<dyn Fft<f64>>,
    filters: Vec<Vec<f64>>,
}

impl LogMel {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
            filters: mel_filterbank(sample_rate),
        }
    }

    pub fn frame(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .take(FFT_SIZE)
            .map(|&s| Complex::new(s, 0.0))
            .collect();
        buf.resize(FFT_SIZE, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        self.filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect()
    }
}

pub fn log_mel(frames: &[Vec<f64>], sample_rate: u32) -> Vec<Vec<f64>> {
    let analyzer = LogMel::new(sample_rate);
    frames.iter().map(|f| analyzer.frame(f)).collect()
}

/// Concatenates `context` frames centred on every `stride`-th frame,
/// replicating the first and last frames past the edges.
pub fn splice(mel: &[Vec<f64>], context: usize, stride: usize) -> Result<Tensor<f32>> {
    if stride == 0 || context == 0 {
        return Err(Error::Config("splice context and stride must be positive".into()));
    }
    if mel.len() < context {
        return Err(Error::TooShort(format!(
            "{} mel frames is fewer than the splice context of {context}",
            mel.len()
        )));
    }
    let width = mel[0].len();
    if mel.iter().any(|r| r.len() != width) {
        return Err(Error::Contract("mel frames differ in width".into()));
    }
    let half = (context / 2) as isize;
    let last = mel.len() as isize - 1;
    let centers: Vec<usize> = (0..mel.len()).step_by(stride).collect();
    let mut data = Vec::with_capacity(centers.len() * context * width);
    for &c in &centers {
        for k in -half..context as isize - half {
            let idx = (c as isize + k).clamp(0, last) as usize;
            data.extend(mel[idx].iter().map(|v| *v as f32));
        }
    }
    Tensor::new(vec![centers.len(), context * width], data)
}

/// Full waveform-to-features pipeline.
pub fn extract(w: &Waveform) -> Result<FeatureMatrix> {
    let frames = frame_and_window(w)?;
    let mel = log_mel(&frames, w.sample_rate);
    FeatureMatrix::new(splice(&mel, CONTEXT, STRIDE)?)
}
