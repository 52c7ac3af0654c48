//! Textual prosody prediction: phoneme encoder, emotion-conditioned
//! prosody predictor, duration predictor and the prior Gaussian stats.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::flowalign::AlignmentMatrix;
use crate::nn::{Binding, Conv1d, Init, LayerNorm, Linear, ParamId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionLabel {
    Neutral,
    Angry,
    Happy,
    Sad,
    Surprise,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 5] = [
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Surprise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Neutral => "neutral",
            Self::Angry => "angry",
            Self::Happy => "happy",
            Self::Sad => "sad",
            Self::Surprise => "surprise",
        }
    }

    /// Column heading used in evaluation tables (`Neu-Ang`, ...).
    pub fn short(self) -> &'static str {
        match self {
            Self::Neutral => "Neu",
            Self::Angry => "Ang",
            Self::Happy => "Hap",
            Self::Sad => "Sad",
            Self::Surprise => "Sur",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == lower)
            .ok_or_else(|| Error::UnknownEmotion(s.to_string()))
    }
}

/// Phoneme symbol table; id 0 is reserved for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

pub const PAD_SYMBOL: &str = "<pad>";

impl Vocabulary {
    /// Builds a vocabulary from symbols in first-seen order.
    pub fn from_symbols<'a>(symbols: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = vec![PAD_SYMBOL.to_string()];
        for s in symbols {
            if !out.iter().any(|o| o == s) {
                out.push(s.to_string());
            }
        }
        Self { symbols: out }
    }

    /// Restores a vocabulary whose first entry is the pad symbol.
    pub fn from_table(symbols: Vec<String>) -> Result<Self> {
        if symbols.first().map(String::as_str) != Some(PAD_SYMBOL) {
            return Err(Error::Config("vocabulary must start with <pad>".into()));
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownPhoneme(symbol.to_string()))
    }

    pub fn encode(&self, symbols: &[String]) -> Result<PhonemeSequence> {
        let ids = symbols
            .iter()
            .map(|s| self.id(s))
            .collect::<Result<Vec<_>>>()?;
        PhonemeSequence::new(ids, self.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidRequest("empty phoneme sequence".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::OutOfVocabulary { id, vocab });
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Phoneme,
    Frame,
}

/// Diagonal Gaussian stats per position, `[d_latent, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSequence {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub level: Level,
}

impl GaussianSequence {
    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }

    pub fn len(&self) -> usize {
        self.mu.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-graph Gaussian stats.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars<'g> {
    pub mu: Var<'g>,
    pub log_sigma: Var<'g>,
    pub level: Level,
}

impl<'g> GaussianVars<'g> {
    pub fn sigma(&self) -> Var<'g> {
        self.log_sigma.exp()
    }

    pub fn len(&self) -> usize {
        self.mu.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> GaussianSequence {
        GaussianSequence {
            mu: (*self.mu.value()).clone(),
            log_sigma: (*self.log_sigma.value()).clone(),
            level: self.level,
        }
    }

    pub fn constant(g: &'g crate::autodiff::Graph, s: &GaussianSequence) -> Self {
        Self {
            mu: g.constant(s.mu.clone()),
            log_sigma: g.constant(s.log_sigma.clone()),
            level: s.level,
        }
    }
}

/// Per-phoneme frame counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationVector(pub Vec<usize>);

impl DurationVector {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Frame-to-phoneme index obtained by repeating each phoneme index.
    pub fn expansion_index(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat(i).take(d))
            .collect()
    }
}

/// `max(1, round(exp(x)))` per phoneme.
pub fn decode_durations(log_durations: &[f64]) -> DurationVector {
    DurationVector(
        log_durations
            .iter()
            .map(|&x| {
                let d = x.exp().round();
                if d.is_finite() && d >= 1.0 {
                    d as usize
                } else {
                    1
                }
            })
            .collect(),
    )
}

/// Repeats each phoneme's stats for its duration.
pub fn expand_prior<'g>(g: GaussianVars<'g>, d: &DurationVector) -> Result<GaussianVars<'g>> {
    if d.0.len() != g.len() {
        return Err(Error::Shape(format!(
            "{} durations for {} phonemes",
            d.0.len(),
            g.len()
        )));
    }
    if d.total() == 0 {
        return Err(Error::Shape("zero-length expansion".into()));
    }
    let idx = d.expansion_index();
    Ok(GaussianVars {
        mu: g.mu.gather_cols(&idx),
        log_sigma: g.log_sigma.gather_cols(&idx),
        level: Level::Frame,
    })
}

/// Frame-level prior through an alignment: column `t` takes the stats of
/// the phoneme assigned to frame `t`.
pub fn expand_by_alignment<'g>(
    g: GaussianVars<'g>,
    a: &AlignmentMatrix,
) -> Result<GaussianVars<'g>> {
    if a.n_phonemes() != g.len() {
        return Err(Error::Shape(format!(
            "alignment over {} phonemes, prior has {}",
            a.n_phonemes(),
            g.len()
        )));
    }
    Ok(GaussianVars {
        mu: g.mu.gather_cols(a.assignment()),
        log_sigma: g.log_sigma.gather_cols(a.assignment()),
        level: Level::Frame,
    })
}

fn positional_encoding(d: usize, n: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[d, n]);
    for pos in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            pe.set(i, pos, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Self-attention plus convolutional feed-forward, each with a residual
/// connection and layer norm.
#[derive(Debug, Clone)]
struct FftBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: LayerNorm,
    ff1: Conv1d,
    ff2: Conv1d,
    norm2: LayerNorm,
    heads: usize,
}

impl FftBlock {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize, ffn: usize, heads: usize) -> Self {
        init.scope(name, |i| Self {
            q: Linear::new(i, "q", d, d),
            k: Linear::new(i, "k", d, d),
            v: Linear::new(i, "v", d, d),
            o: Linear::new(i, "o", d, d),
            norm1: LayerNorm::new(i, "norm1", d),
            ff1: Conv1d::same(i, "ff1", d, ffn, 3),
            ff2: Conv1d::same(i, "ff2", ffn, d, 3),
            norm2: LayerNorm::new(i, "norm2", d),
            heads,
        })
    }

    fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        let d = x.rows();
        let dh = d / self.heads;
        let (q, k, v) = (
            self.q.forward(p, x),
            self.k.forward(p, x),
            self.v.forward(p, x),
        );
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var<'g>> = (0..self.heads)
            .map(|h| {
                let (a, b) = (h * dh, (h + 1) * dh);
                let scores = q
                    .slice_rows(a, b)
                    .transpose()
                    .matmul(k.slice_rows(a, b))
                    .scale(scale)
                    .softmax_rows();
                v.slice_rows(a, b).matmul(scores.transpose())
            })
            .collect();
        let attn = self.o.forward(p, Var::concat_rows(&heads));
        let x = self.norm1.forward(p, x.add(attn));
        let ff = self.ff2.forward(p, self.ff1.forward(p, x).relu());
        self.norm2.forward(p, x.add(ff))
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: ParamId,
    blocks: Vec<FftBlock>,
    proj: Linear,
    d_model: usize,
    vocab: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        vocab: usize,
        d_model: usize,
        ffn: usize,
        heads: usize,
        n_blocks: usize,
    ) -> Self {
        init.scope("text_encoder", |i| Self {
            embedding: i.normal("embedding", &[vocab, d_model], (d_model as f64).powf(-0.5)),
            blocks: (0..n_blocks)
                .map(|b| FftBlock::new(i, &format!("block{b}"), d_model, ffn, heads))
                .collect(),
            proj: Linear::new(i, "proj", d_model, d_model),
            d_model,
            vocab,
        })
    }

    /// `[d_model, N]` linguistic features.
    pub fn forward<'g>(&self, p: &Binding<'g, '_>, phonemes: &PhonemeSequence) -> Result<Var<'g>> {
        if phonemes.is_empty() {
            return Err(Error::InvalidRequest("empty phoneme sequence".into()));
        }
        if let Some(&id) = phonemes.ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::OutOfVocabulary {
                id,
                vocab: self.vocab,
            });
        }
        let n = phonemes.len();
        let pe = p.g.constant(positional_encoding(self.d_model, n));
        let mut x = Var::embedding(p.p(self.embedding), &phonemes.ids)
            .scale((self.d_model as f64).sqrt())
            .add(pe);
        for b in &self.blocks {
            x = b.forward(p, x);
        }
        Ok(self.proj.forward(p, x))
    }
}

/// Conv stack with an additive emotion embedding.
#[derive(Debug, Clone)]
pub struct ProsodyPredictor {
    emotion_table: ParamId,
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    proj: Linear,
}

impl ProsodyPredictor {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, d: usize) -> Self {
        init.scope("prosody_predictor", |i| Self {
            emotion_table: i.normal("emotion_table", &[EmotionLabel::ALL.len(), d], 1.0),
            conv1: Conv1d::same(i, "conv1", d, d, 3),
            norm1: LayerNorm::new(i, "norm1", d),
            conv2: Conv1d::same(i, "conv2", d, d, 3),
            norm2: LayerNorm::new(i, "norm2", d),
            proj: Linear::new(i, "proj", d, d),
        })
    }

    pub fn forward<'g>(&self, p: &Binding<'g, '_>, h: Var<'g>, e: EmotionLabel) -> Var<'g> {
        let emb = Var::embedding(p.p(self.emotion_table), &[e.index()]);
        let x = h.add_col(emb);
        let x = self.norm1.forward(p, self.conv1.forward(p, x).relu());
        let x = self.norm2.forward(p, self.conv2.forward(p, x).relu());
        self.proj.forward(p, x)
    }
}

#[derive(Debug, Clone)]
pub struct DurationPredictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    proj: Linear,
}

impl DurationPredictor {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, d: usize) -> Self {
        init.scope("duration_predictor", |i| Self {
            conv1: Conv1d::same(i, "conv1", 2 * d, d, 3),
            norm1: LayerNorm::new(i, "norm1", d),
            conv2: Conv1d::same(i, "conv2", d, d, 3),
            norm2: LayerNorm::new(i, "norm2", d),
            proj: Linear::new(i, "proj", d, 1),
        })
    }

    /// Log-durations, `[1, N]`.
    pub fn forward<'g>(&self, p: &Binding<'g, '_>, h: Var<'g>, pr: Var<'g>) -> Var<'g> {
        let x = Var::concat_rows(&[h, pr]);
        let x = self.norm1.forward(p, self.conv1.forward(p, x).relu());
        let x = self.norm2.forward(p, self.conv2.forward(p, x).relu());
        self.proj.forward(p, x)
    }
}

/// Text side of the conditional VAE.
#[derive(Debug, Clone)]
pub struct TextProsodyModule {
    pub encoder: TextEncoder,
    pub prosody: ProsodyPredictor,
    pub prior: Linear,
    pub duration: DurationPredictor,
    pub d_model: usize,
    pub d_latent: usize,
}

impl TextProsodyModule {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        vocab: usize,
        d_model: usize,
        d_latent: usize,
        ffn: usize,
        heads: usize,
        n_blocks: usize,
    ) -> Self {
        init.scope("tpp", |i| Self {
            encoder: TextEncoder::new(i, vocab, d_model, ffn, heads, n_blocks),
            prosody: ProsodyPredictor::new(i, d_model),
            prior: Linear::new(i, "prior", 2 * d_model, 2 * d_latent),
            duration: DurationPredictor::new(i, d_model),
            d_model,
            d_latent,
        })
    }

    pub fn encode_phonemes<'g>(
        &self,
        p: &Binding<'g, '_>,
        phonemes: &PhonemeSequence,
    ) -> Result<Var<'g>> {
        self.encoder.forward(p, phonemes)
    }

    pub fn predict_prosody<'g>(&self, p: &Binding<'g, '_>, h: Var<'g>, e: EmotionLabel) -> Var<'g> {
        self.prosody.forward(p, h, e)
    }

    /// Phoneme-level prior from `concat(h, pr)`.
    pub fn project_prior<'g>(
        &self,
        p: &Binding<'g, '_>,
        h: Var<'g>,
        pr: Var<'g>,
    ) -> GaussianVars<'g> {
        let stats = self.prior.forward(p, Var::concat_rows(&[h, pr]));
        GaussianVars {
            mu: stats.slice_rows(0, self.d_latent),
            log_sigma: stats.slice_rows(self.d_latent, 2 * self.d_latent),
            level: Level::Phoneme,
        }
    }

    pub fn predict_durations<'g>(&self, p: &Binding<'g, '_>, h: Var<'g>, pr: Var<'g>) -> Var<'g> {
        self.duration.forward(p, h, pr)
    }
}
