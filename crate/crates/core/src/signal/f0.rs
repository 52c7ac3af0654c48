use rustfft::num_complex::Complex;

use super::stft::{forward_fft, hann_window, inverse_fft, Framer};
use super::{F0Track, FrameConfig, Waveform};

pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 600.0;
/// Minimum normalized autocorrelation peak for a frame to count as voiced.
pub const VOICING_THRESHOLD: f64 = 0.45;
/// Per-octave bonus for shorter lags when ranking autocorrelation peaks.
const OCTAVE_COST: f64 = 0.03;

/// Frame-wise F0 by normalized autocorrelation.
///
/// Each frame is `win_size` samples centered on `t * hop`, zero-padded past
/// the signal ends and Hann-weighted;
/// its autocorrelation is divided by that of the window so partially
/// filled frames are not biased toward short lags. Within the lag range for
/// 50-600 Hz the local maximum with the best octave-cost adjusted strength is
/// taken, refined by parabolic interpolation.
pub fn extract_f0(w: &Waveform, cfg: FrameConfig) -> F0Track {
    let framer = Framer::new(cfg, w.len());
    let n_frames = framer.n_frames();
    let win = cfg.win_size;
    let offset = (cfg.fft_size - cfg.win_size) / 2;
    let sr = w.sample_rate as f64;
    let min_lag = (sr / F0_MAX_HZ).ceil() as usize;
    let max_lag = ((sr / F0_MIN_HZ).floor() as usize).min(win / 3);

    let mut f0 = vec![0.0; n_frames];
    let mut voiced = vec![false; n_frames];
    if min_lag + 1 >= max_lag {
        return F0Track { f0, voiced };
    }

    let nfft = (2 * win).next_power_of_two();
    let fwd = forward_fft(nfft);
    let inv = inverse_fft(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let autocorr = |x: &[f64], buf: &mut Vec<Complex<f64>>| {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x.get(j).copied().unwrap_or(0.0), 0.0);
        }
        fwd.process(buf);
        for b in buf.iter_mut() {
            *b = Complex::new(b.norm_sqr(), 0.0);
        }
        inv.process(buf);
        buf.iter().map(|c| c.re).collect::<Vec<f64>>()
    };
    let window = hann_window(win);
    let rw = autocorr(&window, &mut buf);
    let mut frame = vec![0.0; win];
    // zero padding beyond the signal: mirrored audio breaks periodicity
    let source = |t: usize, j: usize| {
        let p = (t * cfg.hop + j) as isize
            - if cfg.center_pad {
                (cfg.fft_size / 2) as isize
            } else {
                0
            };
        (p >= 0 && (p as usize) < w.len()).then_some(p as usize)
    };

    for t in 0..n_frames {
        let mut energy = 0.0;
        for (j, v) in frame.iter_mut().enumerate() {
            let x = source(t, offset + j).map_or(0.0, |s| w.samples[s]);
            energy += x * x;
            *v = x * window[j];
        }
        if energy < 1e-10 * win as f64 {
            continue;
        }
        let ra = autocorr(&frame, &mut buf);
        if ra[0] <= 0.0 {
            continue;
        }
        let r = |lag: usize| (ra[lag] / ra[0]) / (rw[lag] / rw[0]);
        let corr: Vec<f64> = (min_lag - 1..=max_lag + 1).map(r).collect();
        let at = |lag: usize| corr[lag + 1 - min_lag];

        let score = |lag: usize| at(lag) - OCTAVE_COST * (lag as f64 / max_lag as f64).log2();
        let pick = (min_lag..=max_lag)
            .filter(|&lag| {
                let v = at(lag);
                v >= VOICING_THRESHOLD && v >= at(lag - 1) && v >= at(lag + 1)
            })
            .max_by(|&a, &b| score(a).total_cmp(&score(b)));
        let Some(lag) = pick else { continue };
        let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 {
            (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let hz = sr / (lag as f64 + shift);
        if (F0_MIN_HZ..=F0_MAX_HZ).contains(&hz) {
            f0[t] = hz;
            voiced[t] = true;
        }
    }
    F0Track { f0, voiced }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tone(hz: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * hz * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn recovers_220hz() {
        let w = tone(220.0, 1.0, 22050);
        let track = extract_f0(&w, FrameConfig::default());
        assert_eq!(track.len(), w.len() / 256 + 1);
        let voiced: Vec<f64> = track
            .f0
            .iter()
            .zip(&track.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect();
        assert!(voiced.len() > track.len() * 9 / 10);
        for f in voiced {
            assert!((f - 220.0).abs() <= 5.0, "{f}");
        }
    }

    #[test]
    fn pure_tones_100_to_400() {
        for hz in [100.0, 137.0, 180.0, 250.0, 333.0, 400.0] {
            let track = extract_f0(&tone(hz, 0.6, 22050), FrameConfig::default());
            let voiced: Vec<f64> = track
                .f0
                .iter()
                .zip(&track.voiced)
                .filter(|(_, &v)| v)
                .map(|(&f, _)| f)
                .collect();
            let good = voiced.iter().filter(|f| (*f - hz).abs() <= 5.0).count();
            assert!(!voiced.is_empty());
            assert!(
                good as f64 >= 0.95 * voiced.len() as f64,
                "{hz}: {good}/{}",
                voiced.len()
            );
        }
    }

    #[test]
    fn silence_unvoiced() {
        let w = Waveform::new(vec![0.0; 5000], 22050).unwrap();
        let track = extract_f0(&w, FrameConfig::default());
        assert!(track.voiced.iter().all(|v| !v));
        assert!(track.f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn white_noise_mostly_unvoiced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..22050).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let track = extract_f0(
            &Waveform::new(samples, 22050).unwrap(),
            FrameConfig::default(),
        );
        let unvoiced = track.voiced.iter().filter(|v| !**v).count();
        assert!(
            unvoiced as f64 >= 0.9 * track.len() as f64,
            "{unvoiced}/{}",
            track.len()
        );
    }

    #[test]
    fn partially_filled_edge_frame_is_not_a_short_lag() {
        let sr = 22050;
        let mut s: Vec<f64> = (0..6000)
            .map(|i| 0.3 * (2.0 * PI * 120.0 * i as f64 / sr as f64).sin())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        s.extend((0..700).map(|_| rng.gen_range(-0.003..0.003)));
        let t = extract_f0(&Waveform::new(s, sr).unwrap(), FrameConfig::default());
        for (&f, &v) in t.f0.iter().zip(&t.voiced) {
            assert!(!v || (f - 120.0).abs() <= 5.0, "{f}");
        }
    }

    #[test]
    fn invariants_hold() {
        let w = tone(150.0, 0.3, 22050);
        let t = extract_f0(&w, FrameConfig::default());
        for (f, v) in t.f0.iter().zip(&t.voiced) {
            if *v {
                assert!((F0_MIN_HZ..=F0_MAX_HZ).contains(f));
            } else {
                assert_eq!(*f, 0.0);
            }
        }
    }
}
