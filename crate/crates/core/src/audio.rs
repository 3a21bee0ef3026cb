//! Waveform loading, STFT power, mel filterbank and log-mel features.

use std::path::Path;

use dualpath_tensor::Tensor;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

/// Floor applied to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {detail}")]
    Read { path: String, detail: String },

    #[error("unsupported codec in {path}: {detail}")]
    UnsupportedCodec { path: String, detail: String },

    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    UnsupportedSampleRate(u32),

    #[error("waveform has {len} samples, shorter than one {n_fft}-sample frame")]
    TooShort { len: usize, n_fft: usize },

    #[error("invalid frequency range: {0}")]
    InvalidFrequencyRange(String),

    #[error("invalid frontend parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

type Result<T> = std::result::Result<T, AudioError>;

/// Mono 16 kHz audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(AudioError::UnsupportedSampleRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * k).collect(),
        }
    }
}

/// Reads 16-bit PCM WAV, averaging channels to mono.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let shown = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Read {
            path: shown.clone(),
            detail: io.to_string(),
        },
        other => AudioError::UnsupportedCodec {
            path: shown.clone(),
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedCodec {
            path: shown,
            detail: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedSampleRate(spec.sample_rate));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| AudioError::Read {
            path: shown,
            detail: e.to_string(),
        })?;
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM, rounding and clamping to the i16 range.
pub fn write_wav(path: &Path, wave: &Waveform) -> std::io::Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => io,
        other => std::io::Error::other(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in wave.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontendParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FrontendParams {
    fn default() -> Self {
        Self {
            n_fft: 2048,
            hop: 256,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl FrontendParams {
    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.n_fft).then(|| 1 + (len - self.n_fft) / self.hop)
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrogram `[n_fft/2 + 1, T]` of uncentered Hann-windowed frames.
pub fn stft_power(wave: &Waveform, n_fft: usize, hop: usize) -> Result<Tensor> {
    if n_fft < 2 || hop == 0 {
        return Err(AudioError::InvalidParams(format!("n_fft={n_fft}, hop={hop}")));
    }
    let x = wave.samples();
    if x.len() < n_fft {
        return Err(AudioError::TooShort {
            len: x.len(),
            n_fft,
        });
    }
    let frames = 1 + (x.len() - n_fft) / hop;
    let bins = n_fft / 2 + 1;
    let window = hann_window(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; bins * frames];
    for t in 0..frames {
        let frame = &x[t * hop..t * hop + n_fft];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, c) in buf[..bins].iter().enumerate() {
            power[k * frames + t] = c.norm_sqr();
        }
    }
    Ok(Tensor::new(&[bins, frames], power).expect("shape matches"))
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-scale triangular filters `[n_mels, n_fft/2 + 1]`, each scaled to peak 1.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Tensor> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0..f_max).contains(&f_min) || f_max > nyquist {
        return Err(AudioError::InvalidFrequencyRange(format!(
            "need 0 <= f_min < f_max <= {nyquist}, got {f_min}..{f_max}"
        )));
    }
    if n_mels == 0 || n_fft < 2 {
        return Err(AudioError::InvalidParams(format!("n_mels={n_mels}, n_fft={n_fft}")));
    }
    let bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            *w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(AudioError::InvalidFrequencyRange(format!(
                "mel filter {m} covers no FFT bin; use fewer mels or a larger n_fft"
            )));
        }
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Ok(Tensor::new(&[n_mels, bins], fb).expect("shape matches"))
}

/// Log-compressed mel energies, `F x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Tensor,
    pub params: FrontendParams,
}

impl LogMelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.params.hop as f64
    }
}

/// `ln(max(filterbank x power, 1e-10))`.
pub fn log_mel(power: &Tensor, filterbank: &Tensor) -> Result<Tensor> {
    let mel = dualpath_tensor::kernels::matmul(filterbank, power)
        .map_err(|e| AudioError::InvalidParams(e.to_string()))?;
    Ok(mel.map(|v| v.max(LOG_FLOOR).ln()))
}

pub fn spectrogram(wave: &Waveform, params: &FrontendParams) -> Result<LogMelSpectrogram> {
    let power = stft_power(wave, params.n_fft, params.hop)?;
    let fb = mel_filterbank(params.n_mels, params.n_fft, SAMPLE_RATE, params.f_min, params.f_max)?;
    Ok(LogMelSpectrogram {
        values: log_mel(&power, &fb)?,
        params: *params,
    })
}

/// `|S[:, t] - S[:, t-1]|` along the last axis, with a zero first column.
pub fn frame_difference(s: &Tensor) -> Tensor {
    let t = *s.shape().last().expect("at least one axis");
    let d = s.data();
    Tensor::from_fn(s.shape(), |i| {
        if i % t == 0 {
            0.0
        } else {
            (d[i] - d[i - 1]).abs()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_closed_forms() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.18).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn hann_is_periodic() {
        let w = hann_window(8);
        assert_eq!(w[0], 0.0);
        assert!((w[4] - 1.0).abs() < 1e-15);
        assert!((w[2] - w[6]).abs() < 1e-15);
    }

    #[test]
    fn frame_difference_examples() {
        let s = Tensor::from_rows(&[&[3.0, 4.0], &[-1.0, 0.0]]);
        assert_eq!(frame_difference(&s).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        let c = Tensor::full(&[3, 5], 2.5);
        assert!(frame_difference(&c).data().iter().all(|&v| v == 0.0));
        assert!(frame_difference(&frame_difference(&c)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_rate_and_short_input() {
        assert_eq!(
            Waveform::new(vec![0.0; 10], 44_100),
            Err(AudioError::UnsupportedSampleRate(44_100))
        );
        let w = Waveform::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        assert!(matches!(stft_power(&w, 2048, 256), Err(AudioError::TooShort { .. })));
    }

    #[test]
    fn filterbank_rejects_bad_range() {
        assert!(mel_filterbank(128, 2048, SAMPLE_RATE, 0.0, 9000.0).is_err());
        assert!(mel_filterbank(128, 2048, SAMPLE_RATE, 500.0, 100.0).is_err());
    }
}
