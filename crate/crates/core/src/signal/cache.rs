//! Per-utterance feature cache files.
//!
//! Layout (little-endian): magic `EVCF`, version `u32`, id (`u32` length +
//! UTF-8), sample rate `u32`, hop `u32`, then the linear spectrogram,
//! log-mel and cepstra as (`u64` rows, `u64` cols, `f64` data), then the F0
//! track as `u64` length, `f64` values and one byte per voicing flag.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{
    extract_f0, linear_spectrogram, mel_cepstra_from_logmel, mel_from_linear, CepstraSequence,
    F0Track, FrameConfig, LinearSpectrogram, MelSpectrogram, Waveform,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EVCF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub sample_rate: u32,
    pub hop: usize,
    pub linear: LinearSpectrogram,
    pub mel: MelSpectrogram,
    pub f0: F0Track,
    pub cepstra: CepstraSequence,
}

impl FeatureRecord {
    pub fn compute(id: &str, w: &Waveform, cfg: FrameConfig) -> Self {
        let linear = linear_spectrogram(w, cfg);
        let mel = mel_from_linear(&linear);
        let cepstra = mel_cepstra_from_logmel(&mel);
        let f0 = extract_f0(w, cfg);
        Self {
            id: id.to_string(),
            sample_rate: w.sample_rate,
            hop: cfg.hop,
            linear,
            mel,
            f0,
            cepstra,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.linear.n_frames()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.id.as_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.hop as u32).to_le_bytes());
        out.extend_from_slice(&(self.linear.fft_size as u32).to_le_bytes());
        for t in [&self.linear.mag, &self.mel.logmel, &self.cepstra.coeffs] {
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.f0.len() as u64).to_le_bytes());
        for v in &self.f0.f0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.f0.voiced.iter().map(|&v| v as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCache("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptCache(format!(
                "unsupported version {version}"
            )));
        }
        let id_len = r.u32()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::CorruptCache("id is not UTF-8".into()))?;
        let sample_rate = r.u32()?;
        let hop = r.u32()? as usize;
        let fft_size = r.u32()? as usize;
        let mag = r.tensor()?;
        let logmel = r.tensor()?;
        let coeffs = r.tensor()?;
        let n = r.u64()? as usize;
        let f0 = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let voiced = r.take(n)?.iter().map(|&b| b != 0).collect();
        if r.pos != bytes.len() {
            return Err(Error::CorruptCache("trailing bytes".into()));
        }
        Ok(Self {
            id,
            sample_rate,
            hop,
            linear: LinearSpectrogram {
                mag,
                sample_rate,
                fft_size,
            },
            mel: MelSpectrogram { logmel },
            f0: F0Track { f0, voiced },
            cepstra: CepstraSequence { coeffs },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCache("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n * 8 <= self.buf.len())
            .ok_or_else(|| Error::CorruptCache("implausible shape".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::new(&[rows, cols], data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let w = Waveform::new(
            (0..4000).map(|i| 0.4 * (i as f64 * 0.061).sin()).collect(),
            22050,
        )
        .unwrap();
        let rec = FeatureRecord::compute("utt_01", &w, FrameConfig::default());
        let bytes = rec.to_bytes();
        let back = FeatureRecord::from_bytes(&bytes).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(rec.f0.len(), rec.n_frames());
        assert_eq!(rec.cepstra.n_frames(), rec.n_frames());
        assert_eq!(rec.mel.n_frames(), rec.n_frames());
    }

    #[test]
    fn truncation_detected() {
        let w = Waveform::new(vec![0.1; 600], 22050).unwrap();
        let bytes = FeatureRecord::compute("x", &w, FrameConfig::default()).to_bytes();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                FeatureRecord::from_bytes(&bytes[..cut]),
                Err(Error::CorruptCache(_))
            ));
        }
    }
}
