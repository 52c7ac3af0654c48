use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FrameConfig, LinearSpectrogram, MelSpectrogram, Waveform, N_MELS};
use crate::tensor::{gemm, Tensor};

/// Lower clamp applied before taking the log of mel magnitudes.
pub const LOG_MEL_FLOOR: f64 = 1e-5;

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Maps frame positions to source sample indices and window weights.
#[derive(Debug, Clone)]
pub(crate) struct Framer {
    pub cfg: FrameConfig,
    /// Window of length `fft_size` (the `win_size` Hann centered, zeros outside).
    pub window: Vec<f64>,
    pub len: usize,
}

impl Framer {
    pub fn new(cfg: FrameConfig, len: usize) -> Self {
        let mut window = vec![0.0; cfg.fft_size];
        let offset = (cfg.fft_size - cfg.win_size) / 2;
        for (i, v) in hann_window(cfg.win_size).into_iter().enumerate() {
            window[offset + i] = v;
        }
        Self { cfg, window, len }
    }

    pub fn n_frames(&self) -> usize {
        self.cfg.n_frames(self.len)
    }

    /// Source index for position `j` of frame `t`, or `None` for zero padding.
    pub fn source(&self, t: usize, j: usize) -> Option<usize> {
        let p = (t * self.cfg.hop + j) as isize;
        if self.cfg.center_pad {
            Some(reflect_index(
                p - (self.cfg.fft_size / 2) as isize,
                self.len,
            ))
        } else if (p as usize) < self.len {
            Some(p as usize)
        } else {
            None
        }
    }

    pub fn frame(&self, samples: &[f64], t: usize, out: &mut [Complex<f64>]) {
        for (j, o) in out.iter_mut().enumerate() {
            let v = self.source(t, j).map_or(0.0, |s| samples[s]);
            *o = Complex::new(v * self.window[j], 0.0);
        }
    }
}

pub(crate) fn forward_fft(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

pub(crate) fn inverse_fft(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(n)
}

/// Complex STFT, each `[fft_size / 2 + 1, frames]`.
pub(crate) fn stft_complex(samples: &[f64], cfg: FrameConfig) -> (Tensor, Tensor) {
    let framer = Framer::new(cfg, samples.len());
    let fft = forward_fft(cfg.fft_size);
    let (bins, frames) = (cfg.n_bins(), framer.n_frames());
    let mut re = Tensor::zeros(&[bins, frames]);
    let mut im = Tensor::zeros(&[bins, frames]);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..frames {
        framer.frame(samples, t, &mut buf);
        fft.process(&mut buf);
        for k in 0..bins {
            re.set(k, t, buf[k].re);
            im.set(k, t, buf[k].im);
        }
    }
    (re, im)
}

/// Hann-windowed STFT magnitude with center reflect padding.
pub fn linear_spectrogram(w: &Waveform, cfg: FrameConfig) -> LinearSpectrogram {
    let (re, im) = stft_complex(&w.samples, cfg);
    let mag = re.zip_map(&im, |a, b| a.hypot(b));
    LinearSpectrogram {
        mag,
        sample_rate: w.sample_rate,
        fft_size: cfg.fft_size,
    }
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= MIN_LOG_MEL {
        MIN_LOG_HZ * (logstep * (m - MIN_LOG_MEL)).exp()
    } else {
        F_SP * m
    }
}

/// Triangular, area-normalized filterbank on the Slaney mel scale,
/// spanning 0 Hz to Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelBank {
    /// `[n_mels, fft_size / 2 + 1]`
    pub weights: Tensor,
    /// Band edge frequencies in Hz, `n_mels + 2` points.
    pub edges_hz: Vec<f64>,
    pub sample_rate: u32,
    pub fft_size: usize,
}

impl MelBank {
    pub fn new(sample_rate: u32, fft_size: usize, n_mels: usize) -> Self {
        let bins = fft_size / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let fft_freqs: Vec<f64> = (0..bins)
            .map(|k| k as f64 * sample_rate as f64 / fft_size as f64)
            .collect();
        let mut weights = Tensor::zeros(&[n_mels, bins]);
        for m in 0..n_mels {
            let (f0, f1, f2) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let norm = 2.0 / (f2 - f0);
            for (k, &f) in fft_freqs.iter().enumerate() {
                let lower = (f - f0) / (f1 - f0);
                let upper = (f2 - f) / (f2 - f1);
                let w = lower.min(upper).max(0.0);
                weights.set(m, k, w * norm);
            }
        }
        Self {
            weights,
            edges_hz,
            sample_rate,
            fft_size,
        }
    }

    pub fn standard(sample_rate: u32, fft_size: usize) -> Self {
        Self::new(sample_rate, fft_size, N_MELS)
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    /// `weights @ mag`, without the log.
    pub fn apply(&self, mag: &Tensor) -> Tensor {
        let (m, k, n) = (self.weights.rows(), self.weights.cols(), mag.cols());
        assert_eq!(mag.rows(), k, "spectrogram bins do not match filterbank");
        let mut out = vec![0.0; m * n];
        gemm(
            self.weights.data(),
            false,
            mag.data(),
            false,
            &mut out,
            m,
            k,
            n,
            0.0,
        );
        Tensor::new(&[m, n], out)
    }
}

/// `ln(max(filterbank @ mag, 1e-5))` with the standard 80-band bank.
pub fn mel_from_linear(s: &LinearSpectrogram) -> MelSpectrogram {
    let bank = MelBank::standard(s.sample_rate, s.fft_size);
    MelSpectrogram {
        logmel: bank.apply(&s.mag).map(|v| v.max(LOG_MEL_FLOOR).ln()),
    }
}

pub fn log_mel(w: &Waveform, cfg: FrameConfig) -> MelSpectrogram {
    mel_from_linear(&linear_spectrogram(w, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft_mag(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * j) as f64 / n as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re.hypot(im)
            })
            .collect()
    }

    #[test]
    fn frame_count_law() {
        let cfg = FrameConfig::default();
        let w = Waveform::new(vec![0.1; 2560], 22050).unwrap();
        assert_eq!(linear_spectrogram(&w, cfg).n_frames(), 11);
        for len in [1usize, 2, 255, 256, 257, 1000, 5000] {
            let w = Waveform::new(vec![0.0; len], 22050).unwrap();
            let s = linear_spectrogram(&w, cfg);
            assert_eq!(s.n_frames(), len / 256 + 1);
            assert_eq!(s.mag.rows(), 513);
        }
    }

    #[test]
    fn zero_signal_zero_magnitude() {
        let w = Waveform::new(vec![0.0; 3000], 22050).unwrap();
        let s = linear_spectrogram(&w, FrameConfig::default());
        assert!(s.mag.data().iter().all(|&v| v == 0.0));
        let m = mel_from_linear(&s);
        assert!(m
            .logmel
            .data()
            .iter()
            .all(|&v| (v - LOG_MEL_FLOOR.ln()).abs() < 1e-12));
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let cfg = FrameConfig::default();
        let sr = 22050u32;
        let k = 40usize;
        let f = k as f64 * sr as f64 / cfg.fft_size as f64;
        let samples: Vec<f64> = (0..8192)
            .map(|n| (2.0 * PI * f * n as f64 / sr as f64).sin())
            .collect();
        let w = Waveform::new(samples.clone(), sr).unwrap();
        let s = linear_spectrogram(&w, cfg);
        let framer = Framer::new(cfg, samples.len());
        for t in 0..s.n_frames() {
            // independent per-frame DFT of the windowed, padded frame
            let frame: Vec<f64> = (0..cfg.fft_size)
                .map(|j| framer.source(t, j).map_or(0.0, |i| samples[i]) * framer.window[j])
                .collect();
            let oracle = naive_dft_mag(&frame);
            let col = s.mag.column(t);
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&col), argmax(&oracle));
            if t > 2 && t + 3 < s.n_frames() {
                assert_eq!(argmax(&col), k);
            }
            for (a, b) in col.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8 * (1.0 + b));
            }
        }
    }

    #[test]
    fn magnitude_is_linear_in_scale() {
        let samples: Vec<f64> = (0..3000)
            .map(|n| ((n * 7919) % 101) as f64 / 101.0 - 0.5)
            .collect();
        let w = Waveform::new(samples.clone(), 22050).unwrap();
        let w3 = Waveform::new(samples.iter().map(|v| v * 0.3).collect(), 22050).unwrap();
        let a = linear_spectrogram(&w, FrameConfig::default()).mag;
        let b = linear_spectrogram(&w3, FrameConfig::default()).mag;
        assert!(a.scale(0.3).max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn scaling_shifts_log_mel_by_ln2() {
        let samples: Vec<f64> = (0..4000).map(|n| (n as f64 * 0.05).sin() * 0.3).collect();
        let w = Waveform::new(samples, 22050).unwrap();
        let s = linear_spectrogram(&w, FrameConfig::default());
        let mut s2 = s.clone();
        s2.mag = s.mag.scale(2.0);
        let a = mel_from_linear(&s).logmel;
        let b = mel_from_linear(&s2).logmel;
        let floor = LOG_MEL_FLOOR.ln();
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x > floor {
                assert!((y - x - 2f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn impulse_lights_only_covering_bands() {
        let (sr, nfft) = (22050u32, 1024usize);
        // independent triangle edges on the Slaney scale
        let mel = |f: f64| {
            if f >= 1000.0 {
                15.0 + (f / 1000.0).ln() / (6.4f64.ln() / 27.0)
            } else {
                f * 3.0 / 200.0
            }
        };
        let top = mel(sr as f64 / 2.0);
        for bin in [3usize, 17, 60, 200, 450] {
            let mut mag = Tensor::zeros(&[nfft / 2 + 1, 1]);
            mag.set(bin, 0, 1e6);
            let s = LinearSpectrogram {
                mag,
                sample_rate: sr,
                fft_size: nfft,
            };
            let m = mel_from_linear(&s).logmel;
            let fm = mel(bin as f64 * sr as f64 / nfft as f64);
            for band in 0..N_MELS {
                let lo = top * band as f64 / 81.0;
                let hi = top * (band + 2) as f64 / 81.0;
                let covers = fm > lo + 1e-9 && fm < hi - 1e-9;
                let above = m.at(band, 0) > LOG_MEL_FLOOR.ln();
                assert_eq!(covers, above, "bin {bin} band {band}");
            }
        }
    }

    #[test]
    fn reflect_index_mirrors() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-7, 1), 0);
        assert_eq!(reflect_index(9, 5), 1);
    }
}
