use super::cepstrum::mel_cepstra;
use super::{CepstraSequence, FrameConfig, Waveform};
use crate::error::{Error, Result};

/// `10 * sqrt(2) / ln(10)`: converts cepstral Euclidean distance to dB.
pub const MCD_SCALE: f64 = 6.141_851_463_713_754;

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    /// `(index into a, index into b)`, from `(0, 0)` to the final pair.
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

fn frame_distance(a: &CepstraSequence, i: usize, b: &CepstraSequence, j: usize) -> f64 {
    let rows = a.coeffs.rows();
    (0..rows)
        .map(|r| {
            let d = a.coeffs.at(r, i) - b.coeffs.at(r, j);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Dynamic time warping with steps (1,0), (0,1), (1,1) and Euclidean
/// frame distance. Ties prefer the diagonal.
pub fn dtw(a: &CepstraSequence, b: &CepstraSequence) -> Result<DtwResult> {
    let (ta, tb) = (a.n_frames(), b.n_frames());
    if ta == 0 || tb == 0 {
        return Err(Error::Shape("dtw on empty sequence".into()));
    }
    if a.coeffs.rows() != b.coeffs.rows() {
        return Err(Error::Shape(format!(
            "dtw dimension mismatch {} vs {}",
            a.coeffs.rows(),
            b.coeffs.rows()
        )));
    }
    let mut acc = vec![f64::INFINITY; ta * tb];
    let idx = |i: usize, j: usize| i * tb + j;
    for i in 0..ta {
        for j in 0..tb {
            let d = frame_distance(a, i, b, j);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[idx(i - 1, j - 1)]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    acc[idx(i - 1, j)]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[idx(i, j - 1)]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            acc[idx(i, j)] = d + prev;
        }
    }
    let mut path = vec![(ta - 1, tb - 1)];
    let (mut i, mut j) = (ta - 1, tb - 1);
    while i > 0 || j > 0 {
        if i == 0 {
            j -= 1;
        } else if j == 0 {
            i -= 1;
        } else {
            let diag = acc[idx(i - 1, j - 1)];
            let up = acc[idx(i - 1, j)];
            let left = acc[idx(i, j - 1)];
            if diag <= up && diag <= left {
                i -= 1;
                j -= 1;
            } else if up <= left {
                i -= 1;
            } else {
                j -= 1;
            }
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        path,
        cost: acc[idx(ta - 1, tb - 1)],
    })
}

/// MCD in dB between two cepstral sequences over their DTW path.
pub fn mcd_from_cepstra(a: &CepstraSequence, b: &CepstraSequence) -> Result<f64> {
    let r = dtw(a, b)?;
    Ok(MCD_SCALE * r.cost / r.path.len() as f64)
}

/// Mel-cepstral distortion (c1..c13, DTW-aligned) in dB.
pub fn mcd(reference: &Waveform, converted: &Waveform, cfg: FrameConfig) -> Result<f64> {
    if reference.sample_rate != converted.sample_rate {
        return Err(Error::SampleRateMismatch(
            reference.sample_rate,
            converted.sample_rate,
        ));
    }
    if reference.is_empty() || converted.is_empty() {
        return Err(Error::InvalidAudio("empty audio".into()));
    }
    mcd_from_cepstra(&mel_cepstra(reference, cfg), &mel_cepstra(converted, cfg))
}
