use std::f64::consts::PI;

use super::stft::log_mel;
use super::{CepstraSequence, FrameConfig, MelSpectrogram, Waveform, N_CEPSTRA};
use crate::tensor::{gemm, Tensor};

/// Orthonormal DCT-II basis rows `first..first + count` for length `n`.
fn dct_basis(n: usize, first: usize, count: usize) -> Tensor {
    let mut basis = Tensor::zeros(&[count, n]);
    for (row, k) in (first..first + count).enumerate() {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            basis.set(
                row,
                i,
                scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos(),
            );
        }
    }
    basis
}

/// Orthonormal DCT-II of a single vector.
pub fn dct_ii_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let basis = dct_basis(n, 0, n);
    let mut out = vec![0.0; n];
    gemm(basis.data(), false, x, false, &mut out, n, n, 1, 0.0);
    out
}

/// Coefficients 1..=13 of the DCT-II over mel bands, per frame.
pub fn mel_cepstra_from_logmel(mel: &MelSpectrogram) -> CepstraSequence {
    let (bands, frames) = (mel.logmel.rows(), mel.logmel.cols());
    let basis = dct_basis(bands, 1, N_CEPSTRA);
    let mut out = vec![0.0; N_CEPSTRA * frames];
    gemm(
        basis.data(),
        false,
        mel.logmel.data(),
        false,
        &mut out,
        N_CEPSTRA,
        bands,
        frames,
        0.0,
    );
    CepstraSequence {
        coeffs: Tensor::new(&[N_CEPSTRA, frames], out),
    }
}

pub fn mel_cepstra(w: &Waveform, cfg: FrameConfig) -> CepstraSequence {
    mel_cepstra_from_logmel(&log_mel(w, cfg))
}
