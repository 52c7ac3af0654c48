//! Deterministic DSP front-end: WAV I/O, spectrograms, F0, mel-cepstra,
//! DTW and mel-cepstral distortion.
//!
//! Every feature extractor shares the same framing, so for a waveform of
//! `n` samples all of them yield `n / hop + 1` frames.

mod audio;
mod cache;
mod cepstrum;
mod dtw;
mod f0;
mod stft;

pub use audio::{load_wav, save_wav};
pub use cache::FeatureRecord;
pub use cepstrum::{dct_ii_ortho, mel_cepstra, mel_cepstra_from_logmel};
pub use dtw::{dtw, mcd, mcd_from_cepstra, DtwResult, MCD_SCALE};
pub use f0::{extract_f0, F0_MAX_HZ, F0_MIN_HZ, VOICING_THRESHOLD};
pub use stft::{
    hann_window, linear_spectrogram, log_mel, mel_from_linear, reflect_index, MelBank,
    LOG_MEL_FLOOR,
};
pub(crate) use stft::{inverse_fft, stft_complex, Framer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;
pub const N_MELS: usize = 80;
pub const N_CEPSTRA: usize = 13;

/// Mono audio normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidAudio("empty audio".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// STFT framing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameConfig {
    pub fft_size: usize,
    pub win_size: usize,
    pub hop: usize,
    pub center_pad: bool,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            win_size: 1024,
            hop: 256,
            center_pad: true,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win_size == 0 || self.fft_size == 0 {
            return Err(Error::Config("frame sizes must be positive".into()));
        }
        if !(self.hop <= self.win_size && self.win_size <= self.fft_size) {
            return Err(Error::Config(format!(
                "require hop <= win_size <= fft_size, got {}/{}/{}",
                self.hop, self.win_size, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.center_pad {
            len / self.hop + 1
        } else if len < self.fft_size {
            1
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }
}

/// Magnitude spectrogram, `[fft_size / 2 + 1, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpectrogram {
    pub mag: Tensor,
    pub sample_rate: u32,
    pub fft_size: usize,
}

impl LinearSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.mag.cols()
    }
}

/// Natural-log mel magnitudes, `[80, frames]`, floored at `ln(1e-5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub logmel: Tensor,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.logmel.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn mean_voiced(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .f0
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn gather(&self, idx: &[usize]) -> F0Track {
        F0Track {
            f0: idx.iter().map(|&i| self.f0[i]).collect(),
            voiced: idx.iter().map(|&i| self.voiced[i]).collect(),
        }
    }
}

/// Mel-cepstral coefficients c1..c13, `[13, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstraSequence {
    pub coeffs: Tensor,
}

impl CepstraSequence {
    pub fn n_frames(&self) -> usize {
        self.coeffs.cols()
    }
}
