//! Normalizing flow, prior density, monotonic alignment search and the
//! prosody alignment loss.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv1d, Init};
use crate::tensor::Tensor;
use crate::tpp::{DurationVector, GaussianSequence, GaussianVars};

const LEAKY: f64 = 0.1;

/// Elementwise `log N(x; mu, exp(log_sigma))`.
pub fn gaussian_log_prob<'g>(x: Var<'g>, mu: Var<'g>, log_sigma: Var<'g>) -> Var<'g> {
    let z = x.sub(mu).mul(log_sigma.neg().exp());
    z.square()
        .scale(-0.5)
        .sub(log_sigma)
        .add_scalar(-0.5 * (2.0 * PI).ln())
}

/// Affine coupling: the first half conditions a shift and log-scale for
/// the second half.
#[derive(Debug, Clone)]
struct Coupling {
    pre: Conv1d,
    mid: Conv1d,
    post: Conv1d,
    half: usize,
}

impl Coupling {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize, hidden: usize) -> Self {
        let half = d / 2;
        init.scope(name, |i| Self {
            pre: Conv1d::same(i, "pre", half, hidden, 1),
            mid: Conv1d::new(i, "mid", hidden, hidden, 5, ConvSpec::same(5, 1)),
            post: Conv1d::zeroed(i, "post", hidden, 2 * half, 1),
            half,
        })
    }

    fn stats<'g>(&self, p: &Binding<'g, '_>, xa: Var<'g>) -> (Var<'g>, Var<'g>) {
        let h = self.pre.forward(p, xa).leaky_relu(LEAKY);
        let h = self.mid.forward(p, h).leaky_relu(LEAKY);
        let out = self.post.forward(p, h);
        (
            out.slice_rows(0, self.half),
            out.slice_rows(self.half, 2 * self.half),
        )
    }

    fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> (Var<'g>, Var<'g>) {
        let xa = x.slice_rows(0, self.half);
        let xb = x.slice_rows(self.half, 2 * self.half);
        let (shift, log_scale) = self.stats(p, xa);
        let yb = xb.mul(log_scale.exp()).add(shift);
        (Var::concat_rows(&[xa, yb]), log_scale.sum())
    }

    fn inverse<'g>(&self, p: &Binding<'g, '_>, y: Var<'g>) -> Var<'g> {
        let ya = y.slice_rows(0, self.half);
        let yb = y.slice_rows(self.half, 2 * self.half);
        let (shift, log_scale) = self.stats(p, ya);
        let xb = yb.sub(shift).mul(log_scale.neg().exp());
        Var::concat_rows(&[ya, xb])
    }
}

/// Stack of affine couplings, each followed by a channel reversal.
#[derive(Debug, Clone)]
pub struct FlowStack {
    layers: Vec<Coupling>,
    d: usize,
}

impl FlowStack {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, d: usize, hidden: usize, n_layers: usize) -> Self {
        assert!(d % 2 == 0, "flow channels must be even");
        init.scope("flow", |i| Self {
            layers: (0..n_layers)
                .map(|k| Coupling::new(i, &format!("layer{k}"), d, hidden))
                .collect(),
            d,
        })
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check(&self, z: Var<'_>) -> Result<()> {
        if z.rows() % 2 == 1 {
            return Err(Error::Shape(format!("odd channel count {}", z.rows())));
        }
        if z.rows() != self.d {
            return Err(Error::Shape(format!(
                "flow expects {} channels, got {}",
                self.d,
                z.rows()
            )));
        }
        Ok(())
    }

    fn flip(&self) -> Vec<usize> {
        (0..self.d).rev().collect()
    }

    /// Posterior latent to prior space, with the log-determinant.
    pub fn forward<'g>(&self, p: &Binding<'g, '_>, z: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        self.check(z)?;
        let flip = self.flip();
        let mut x = z;
        let mut logdet = p.g.scalar(0.0);
        for layer in &self.layers {
            let (y, ld) = layer.forward(p, x);
            x = y.gather_rows(&flip);
            logdet = logdet.add(ld);
        }
        Ok((x, logdet))
    }

    pub fn inverse<'g>(&self, p: &Binding<'g, '_>, u: Var<'g>) -> Result<Var<'g>> {
        self.check(u)?;
        let flip = self.flip();
        let mut x = u;
        for layer in self.layers.iter().rev() {
            x = layer.inverse(p, x.gather_rows(&flip));
        }
        Ok(x)
    }

    /// `Σ log N(f(z); μ, σ) + log|det ∂f/∂z|`.
    pub fn prior_log_density<'g>(
        &self,
        p: &Binding<'g, '_>,
        z: Var<'g>,
        prior: GaussianVars<'g>,
    ) -> Result<Var<'g>> {
        if prior.len() != z.cols() || prior.mu.rows() != z.rows() {
            return Err(Error::Shape(format!(
                "latent {:?} vs prior {:?}",
                z.shape(),
                prior.mu.shape()
            )));
        }
        let (u, logdet) = self.forward(p, z)?;
        Ok(gaussian_log_prob(u, prior.mu, prior.log_sigma)
            .sum()
            .add(logdet))
    }

    /// Single-sample estimate of `KL(q || p)` per element, where `z2` was
    /// drawn from `posterior` and `prior` is frame-level.
    pub fn prosody_alignment_loss<'g>(
        &self,
        p: &Binding<'g, '_>,
        z2: Var<'g>,
        posterior: GaussianVars<'g>,
        prior: GaussianVars<'g>,
    ) -> Result<Var<'g>> {
        if posterior.len() != z2.cols() {
            return Err(Error::Shape("posterior length differs from sample".into()));
        }
        let n = z2.value().len() as f64;
        let log_q = gaussian_log_prob(z2, posterior.mu, posterior.log_sigma).sum();
        let log_p = self.prior_log_density(p, z2, prior)?;
        Ok(log_q.sub(log_p).scale(1.0 / n))
    }
}

/// Monotone, contiguous phoneme-per-frame assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMatrix {
    n_phonemes: usize,
    assignment: Vec<usize>,
}

impl AlignmentMatrix {
    pub fn from_assignment(n_phonemes: usize, assignment: Vec<usize>) -> Result<Self> {
        let bad = |msg: &str| Err(Error::Shape(format!("invalid alignment: {msg}")));
        if n_phonemes == 0 || assignment.len() < n_phonemes {
            return Err(Error::Alignment {
                phonemes: n_phonemes,
                frames: assignment.len(),
            });
        }
        if assignment[0] != 0 || *assignment.last().unwrap() != n_phonemes - 1 {
            return bad("must start at the first and end at the last phoneme");
        }
        if assignment
            .windows(2)
            .any(|w| w[1] < w[0] || w[1] > w[0] + 1)
        {
            return bad("phoneme order must advance by at most one per frame");
        }
        Ok(Self {
            n_phonemes,
            assignment,
        })
    }

    pub fn from_durations(d: &DurationVector) -> Result<Self> {
        Self::from_assignment(d.0.len(), d.expansion_index())
    }

    pub fn n_phonemes(&self) -> usize {
        self.n_phonemes
    }

    pub fn n_frames(&self) -> usize {
        self.assignment.len()
    }

    /// Phoneme index of each frame.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Binary `[N, T]` matrix.
    pub fn to_dense(&self) -> Tensor {
        let mut a = Tensor::zeros(&[self.n_phonemes, self.n_frames()]);
        for (t, &i) in self.assignment.iter().enumerate() {
            a.set(i, t, 1.0);
        }
        a
    }
}

pub fn durations_from_alignment(a: &AlignmentMatrix) -> DurationVector {
    let mut d = vec![0; a.n_phonemes];
    for &i in &a.assignment {
        d[i] += 1;
    }
    DurationVector(d)
}

/// `L[i, t] = Σ_c log N(u[c, t]; μ[c, i], σ[c, i])`.
pub fn alignment_log_likelihood(u: &Tensor, prior: &GaussianSequence) -> Result<Tensor> {
    let (d, t_len) = (u.rows(), u.cols());
    let n = prior.len();
    if prior.mu.rows() != d {
        return Err(Error::Shape(format!(
            "latent has {d} channels, prior {}",
            prior.mu.rows()
        )));
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut l = Tensor::zeros(&[n, t_len]);
    for i in 0..n {
        let base: f64 = (0..d)
            .map(|c| -prior.log_sigma.at(c, i) - half_log_2pi)
            .sum();
        for t in 0..t_len {
            let mut acc = base;
            for c in 0..d {
                let z = (u.at(c, t) - prior.mu.at(c, i)) * (-prior.log_sigma.at(c, i)).exp();
                acc -= 0.5 * z * z;
            }
            l.set(i, t, acc);
        }
    }
    Ok(l)
}

/// Maximum-likelihood monotone alignment of `u` to phoneme-level stats.
pub fn mas(u: &Tensor, prior: &GaussianSequence) -> Result<AlignmentMatrix> {
    let l = alignment_log_likelihood(u, prior)?;
    mas_from_likelihood(&l)
}

/// Alignment search over a precomputed `[N, T]` log-likelihood.
pub fn mas_from_likelihood(l: &Tensor) -> Result<AlignmentMatrix> {
    let (n, t_len) = (l.rows(), l.cols());
    if t_len < n || n == 0 {
        return Err(Error::Alignment {
            phonemes: n,
            frames: t_len,
        });
    }
    let mut q = vec![f64::NEG_INFINITY; n * t_len];
    q[0] = l.at(0, 0);
    for t in 1..t_len {
        // phoneme i is reachable at frame t iff i <= t and the remaining
        // frames can still cover the remaining phonemes
        let lo = (n + t).saturating_sub(t_len);
        for i in lo..n.min(t + 1) {
            let stay = q[i * t_len + t - 1];
            let advance = if i > 0 {
                q[(i - 1) * t_len + t - 1]
            } else {
                f64::NEG_INFINITY
            };
            q[i * t_len + t] = l.at(i, t) + stay.max(advance);
        }
    }
    let mut assignment = vec![0; t_len];
    let mut i = n - 1;
    for t in (0..t_len).rev() {
        assignment[t] = i;
        if t == 0 {
            break;
        }
        if i > 0 && (i == t || q[(i - 1) * t_len + t - 1] > q[i * t_len + t - 1]) {
            i -= 1;
        }
    }
    AlignmentMatrix::from_assignment(n, assignment)
}

/// Closed-form `KL(q || p)` between diagonal Gaussians, averaged per element.
pub fn kl_diag_gaussian(q: &GaussianSequence, p: &GaussianSequence) -> Result<f64> {
    if q.mu.shape() != p.mu.shape() || q.log_sigma.shape() != p.log_sigma.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            q.mu.shape(),
            p.mu.shape()
        )));
    }
    let n = q.mu.len();
    let mut total = 0.0;
    for k in 0..n {
        let (mq, lq) = (q.mu.data()[k], q.log_sigma.data()[k]);
        let (mp, lp) = (p.mu.data()[k], p.log_sigma.data()[k]);
        let (vq, vp) = ((2.0 * lq).exp(), (2.0 * lp).exp());
        total += lp - lq + (vq + (mq - mp).powi(2)) / (2.0 * vp) - 0.5;
    }
    Ok(total / n as f64)
}
