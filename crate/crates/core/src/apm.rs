//! Acoustic prosody modeling: emotion descriptor, speaker encoder with F0
//! head, and the prosody integrator producing the posterior.

use rand::Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv1d, Init, Linear};
use crate::signal::{LinearSpectrogram, Waveform};
use crate::tensor::Tensor;
use crate::tpp::{EmotionLabel, GaussianVars, Level};

const LEAKY: f64 = 0.1;
const SPEC_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadTriple {
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

impl VadTriple {
    pub fn new(valence: f64, arousal: f64, dominance: f64) -> Self {
        Self {
            valence: valence.clamp(0.0, 1.0),
            arousal: arousal.clamp(0.0, 1.0),
            dominance: dominance.clamp(0.0, 1.0),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.valence, self.arousal, self.dominance]
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EmotionSource<'a> {
    Label(EmotionLabel),
    Audio(&'a Waveform),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Stub,
    External,
}

/// What a backend reports: dimensional values plus class weights over the
/// five labels (a one-hot for label input).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionReport {
    pub vad: VadTriple,
    pub class_weights: [f64; 5],
}

/// Source of dimensional emotion values.
pub trait EmotionBackend: Send + Sync {
    fn describe(&self, source: EmotionSource<'_>) -> Result<EmotionReport>;
    fn provenance(&self) -> Provenance;
}

/// Fixed label-to-VAD table; audio input is not supported.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubBackend;

impl StubBackend {
    pub fn vad(label: EmotionLabel) -> VadTriple {
        let (v, a, d) = match label {
            EmotionLabel::Neutral => (0.50, 0.30, 0.50),
            EmotionLabel::Angry => (0.20, 0.90, 0.80),
            EmotionLabel::Happy => (0.90, 0.80, 0.60),
            EmotionLabel::Sad => (0.20, 0.20, 0.30),
            EmotionLabel::Surprise => (0.70, 0.90, 0.40),
        };
        VadTriple::new(v, a, d)
    }
}

impl EmotionBackend for StubBackend {
    fn describe(&self, source: EmotionSource<'_>) -> Result<EmotionReport> {
        match source {
            EmotionSource::Label(label) => {
                let mut class_weights = [0.0; 5];
                class_weights[label.index()] = 1.0;
                Ok(EmotionReport {
                    vad: Self::vad(label),
                    class_weights,
                })
            }
            EmotionSource::Audio(_) => Err(Error::Backend(
                "stub emotion backend requires a label, not audio".into(),
            )),
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::Stub
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmotionEmbedding<'g> {
    /// `[d_model, 1]`
    pub vector: Var<'g>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy)]
pub struct SpeakerEmbedding<'g> {
    /// `[d_model, 1]`
    pub vector: Var<'g>,
    /// Per-frame log-Hz, `[1, T]`.
    pub log_f0: Var<'g>,
}

impl SpeakerEmbedding<'_> {
    pub fn predicted_f0_hz(&self) -> Vec<f64> {
        self.log_f0.value().data().iter().map(|v| v.exp()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorSample<'g> {
    pub z2: Var<'g>,
    pub stats: GaussianVars<'g>,
    pub eps: Tensor,
}

/// Linear projection of VAD plus class weights.
#[derive(Debug, Clone)]
pub struct EmotionDescriptor {
    proj: Linear,
}

impl EmotionDescriptor {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, d: usize) -> Self {
        Self {
            proj: Linear::new(init, "emotion_descriptor", 8, d),
        }
    }

    pub fn embed<'g>(
        &self,
        p: &Binding<'g, '_>,
        report: &EmotionReport,
        provenance: Provenance,
    ) -> EmotionEmbedding<'g> {
        let mut x = report.vad.to_array().to_vec();
        x.extend_from_slice(&report.class_weights);
        let x = p.g.constant(Tensor::new(&[8, 1], x));
        EmotionEmbedding {
            vector: self.proj.forward(p, x),
            provenance,
        }
    }

    pub fn describe<'g>(
        &self,
        p: &Binding<'g, '_>,
        backend: &dyn EmotionBackend,
        source: EmotionSource<'_>,
    ) -> Result<(VadTriple, EmotionEmbedding<'g>)> {
        let report = backend.describe(source)?;
        Ok((report.vad, self.embed(p, &report, backend.provenance())))
    }
}

/// Per-frame log magnitude, `ln(max(mag, 1e-5))`.
pub fn log_spectrogram<'g>(g: &'g Graph, spec: &LinearSpectrogram) -> Var<'g> {
    g.constant(spec.mag.map(|v| v.max(SPEC_FLOOR).ln()))
}

/// Frame-wise trunk, mean pool for the speaker vector, conv head for F0.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    trunk1: Conv1d,
    trunk2: Conv1d,
    out: Linear,
    f0_conv: Conv1d,
    f0_head: Linear,
}

impl SpeakerEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, n_bins: usize, d: usize) -> Self {
        init.scope("speaker_encoder", |i| {
            let trunk1 = Conv1d::same(i, "trunk1", n_bins, d, 1);
            let trunk2 = Conv1d::same(i, "trunk2", d, d, 1);
            let out = Linear::new(i, "out", d, d);
            let f0_conv = Conv1d::same(i, "f0_conv", d, d, 3);
            let f0_head = Linear::new(i, "f0_head", d, 1);
            // start near 150 Hz
            let b = i.store.get_mut(f0_head.b);
            *b = Tensor::full(b.shape(), 150f64.ln());
            Self {
                trunk1,
                trunk2,
                out,
                f0_conv,
                f0_head,
            }
        })
    }

    pub fn forward<'g>(
        &self,
        p: &Binding<'g, '_>,
        log_spec: Var<'g>,
    ) -> Result<SpeakerEmbedding<'g>> {
        if log_spec.cols() == 0 {
            return Err(Error::InvalidAudio("empty spectrogram".into()));
        }
        let h = self.trunk1.forward(p, log_spec).leaky_relu(LEAKY);
        let h = self.trunk2.forward(p, h).leaky_relu(LEAKY);
        let vector = self.out.forward(p, h.mean_cols());
        let f = self.f0_conv.forward(p, h).leaky_relu(LEAKY);
        Ok(SpeakerEmbedding {
            vector,
            log_f0: self.f0_head.forward(p, f),
        })
    }
}

#[derive(Debug, Clone)]
struct WaveNetBlock {
    conv: Conv1d,
    cond: Linear,
    res_skip: Conv1d,
    hidden: usize,
    last: bool,
}

/// Gated residual stack conditioned on `emo + spk`.
#[derive(Debug, Clone)]
pub struct WaveNetIntegrator {
    pre: Conv1d,
    blocks: Vec<WaveNetBlock>,
    proj: Linear,
}

impl WaveNetIntegrator {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        n_bins: usize,
        d: usize,
        hidden: usize,
        d_latent: usize,
        n_blocks: usize,
        kernel: usize,
    ) -> Self {
        init.scope("prosody_integrator", |i| Self {
            pre: Conv1d::same(i, "pre", n_bins, hidden, 1),
            blocks: (0..n_blocks)
                .map(|b| {
                    let last = b + 1 == n_blocks;
                    i.scope(&format!("block{b}"), |i| WaveNetBlock {
                        conv: Conv1d::new(
                            i,
                            "conv",
                            hidden,
                            2 * hidden,
                            kernel,
                            ConvSpec::same(kernel, 1),
                        ),
                        cond: Linear::new(i, "cond", d, 2 * hidden),
                        res_skip: Conv1d::same(
                            i,
                            "res_skip",
                            hidden,
                            if last { hidden } else { 2 * hidden },
                            1,
                        ),
                        hidden,
                        last,
                    })
                })
                .collect(),
            proj: Linear::new(i, "proj", hidden, 2 * d_latent),
        })
    }

    fn forward<'g>(&self, p: &Binding<'g, '_>, log_spec: Var<'g>, cond: Var<'g>) -> Var<'g> {
        let mut x = self.pre.forward(p, log_spec);
        let mut skip: Option<Var<'g>> = None;
        for b in &self.blocks {
            let h = b.conv.forward(p, x).add_col(b.cond.forward(p, cond));
            let acts = h
                .slice_rows(0, b.hidden)
                .tanh()
                .mul(h.slice_rows(b.hidden, 2 * b.hidden).sigmoid());
            let rs = b.res_skip.forward(p, acts);
            let s = if b.last {
                rs
            } else {
                x = x.add(rs.slice_rows(0, b.hidden));
                rs.slice_rows(b.hidden, 2 * b.hidden)
            };
            skip = Some(match skip {
                Some(acc) => acc.add(s),
                None => s,
            });
        }
        self.proj.forward(p, skip.expect("at least one block"))
    }
}

/// Replacement used when the integrator is ablated: spectral features and
/// broadcast conditioning concatenated, then one projection.
#[derive(Debug, Clone)]
pub struct ConcatIntegrator {
    pre: Conv1d,
    proj: Conv1d,
}

impl ConcatIntegrator {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        n_bins: usize,
        d: usize,
        hidden: usize,
        d_latent: usize,
    ) -> Self {
        init.scope("concat_integrator", |i| Self {
            pre: Conv1d::same(i, "pre", n_bins, hidden, 1),
            proj: Conv1d::same(i, "proj", hidden + 2 * d, 2 * d_latent, 1),
        })
    }

    fn forward<'g>(
        &self,
        p: &Binding<'g, '_>,
        log_spec: Var<'g>,
        emo: Var<'g>,
        spk: Var<'g>,
    ) -> Var<'g> {
        let t = log_spec.cols();
        let x = Var::concat_rows(&[
            self.pre.forward(p, log_spec),
            emo.broadcast_cols(t),
            spk.broadcast_cols(t),
        ]);
        self.proj.forward(p, x)
    }
}

#[derive(Debug, Clone)]
pub enum ProsodyIntegrator {
    WaveNet(WaveNetIntegrator),
    Concat(ConcatIntegrator),
}

impl ProsodyIntegrator {
    fn d_latent(&self, stats: &Var<'_>) -> usize {
        stats.rows() / 2
    }

    /// Posterior stats and the reparameterized sample `z2 = μ + σ ⊙ ε`.
    pub fn integrate<'g>(
        &self,
        p: &Binding<'g, '_>,
        log_spec: Var<'g>,
        emo: &EmotionEmbedding<'g>,
        spk: &SpeakerEmbedding<'g>,
        eps: Tensor,
    ) -> Result<PosteriorSample<'g>> {
        if emo.vector.cols() != 1
            || spk.vector.cols() != 1
            || emo.vector.rows() != spk.vector.rows()
        {
            return Err(Error::Shape(format!(
                "conditioning vectors {:?} and {:?}",
                emo.vector.shape(),
                spk.vector.shape()
            )));
        }
        let stats = match self {
            Self::WaveNet(w) => w.forward(p, log_spec, emo.vector.add(spk.vector)),
            Self::Concat(c) => c.forward(p, log_spec, emo.vector, spk.vector),
        };
        let dl = self.d_latent(&stats);
        if eps.shape() != [dl, log_spec.cols()] {
            return Err(Error::Shape(format!(
                "noise {:?} for latent [{dl}, {}]",
                eps.shape(),
                log_spec.cols()
            )));
        }
        let mu = stats.slice_rows(0, dl);
        let log_sigma = stats.slice_rows(dl, 2 * dl);
        let z2 = mu.add(log_sigma.exp().mul(p.g.constant(eps.clone())));
        Ok(PosteriorSample {
            z2,
            stats: GaussianVars {
                mu,
                log_sigma,
                level: Level::Frame,
            },
            eps,
        })
    }
}
