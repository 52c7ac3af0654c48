//! Loss assembly, alternating adversarial optimization, the training log
//! and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Add;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flowalign::{durations_from_alignment, mas};
use crate::model::{AblationFlags, Model, ModelConfig};
use crate::nn::{accumulate, clip_grad_norm, Adam, Binding};
use crate::signal::{dtw, F0Track, FeatureRecord, FrameConfig, Waveform};
use crate::synth::{
    adversarial_losses, emotion_losses, generator_adversarial_loss, reconstruction_losses,
};
use crate::tensor::Tensor;
use crate::tpp::{expand_by_alignment, DurationVector, EmotionLabel, PhonemeSequence, Vocabulary};

/// Named scalar losses of one step plus the reconstruction weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub recon_cls: f64,
    pub recon_fm: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub emo_cls: f64,
    pub emo_fm: f64,
    pub psd: f64,
    pub f0: f64,
    pub dur: f64,
    /// Emotion classifier cross-entropy on real audio, trained with the
    /// discriminator.
    pub cls_real: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl LossBundle {
    pub const COMPONENTS: [&'static str; 9] = [
        "recon_cls",
        "recon_fm",
        "adv_G",
        "adv_D",
        "emo_cls",
        "emo_fm",
        "psd",
        "f0",
        "dur",
    ];

    /// Builds a bundle from named values; every component is required and
    /// `cls_real` defaults to zero.
    pub fn from_named(values: &[(&str, f64)], gamma: f64, beta: f64) -> Result<Self> {
        let get = |name: &str| {
            values
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::InvalidRequest(format!("missing loss component `{name}`")))
        };
        Ok(Self {
            recon_cls: get("recon_cls")?,
            recon_fm: get("recon_fm")?,
            adv_g: get("adv_G")?,
            adv_d: get("adv_D")?,
            emo_cls: get("emo_cls")?,
            emo_fm: get("emo_fm")?,
            psd: get("psd")?,
            f0: get("f0")?,
            dur: get("dur")?,
            cls_real: get("cls_real").unwrap_or(0.0),
            gamma,
            beta,
        })
    }

    pub fn components(&self) -> [(&'static str, f64); 9] {
        [
            ("recon_cls", self.recon_cls),
            ("recon_fm", self.recon_fm),
            ("adv_G", self.adv_g),
            ("adv_D", self.adv_d),
            ("emo_cls", self.emo_cls),
            ("emo_fm", self.emo_fm),
            ("psd", self.psd),
            ("f0", self.f0),
            ("dur", self.dur),
        ]
    }

    pub fn check_finite(&self, step: usize) -> Result<()> {
        let extra = [("cls_real", self.cls_real)];
        for (name, v) in self.components().iter().chain(&extra) {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    component: name.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Weighted generator objective.
pub fn assemble_generator_loss(b: &LossBundle) -> f64 {
    generator_total(
        b.gamma,
        b.beta,
        b.recon_cls,
        b.recon_fm,
        b.adv_g,
        b.emo_cls,
        b.emo_fm,
        b.psd,
        b.f0,
        b.dur,
    )
}

pub fn assemble_discriminator_loss(b: &LossBundle) -> f64 {
    b.adv_d + b.cls_real
}

trait Term: Copy + Add<Output = Self> {
    fn times(self, k: f64) -> Self;
}

impl Term for f64 {
    fn times(self, k: f64) -> Self {
        self * k
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl Term for Var<'_> {
    fn times(self, k: f64) -> Self {
        self.scale(k)
    }
}

#[allow(clippy::too_many_arguments)]
fn generator_total<T: Term>(
    gamma: f64,
    beta: f64,
    recon_cls: T,
    recon_fm: T,
    adv_g: T,
    emo_cls: T,
    emo_fm: T,
    psd: T,
    f0: T,
    dur: T,
) -> T {
    recon_cls.times(gamma) + recon_fm.times(beta) + adv_g + emo_cls + emo_fm + psd + f0 + dur
}

/// `(L_F0, L_dur)`: squared error of log-F0 over voiced frames (zero when
/// none are voiced) and of log-durations against the alignment counts.
pub fn f0_and_duration_losses<'g>(
    pred_log_f0: Var<'g>,
    true_f0: &F0Track,
    pred_log_dur: Var<'g>,
    mas_dur: &DurationVector,
) -> Result<(Var<'g>, Var<'g>)> {
    let g = pred_log_f0.graph();
    if pred_log_f0.value().len() != true_f0.len() {
        return Err(Error::Shape(format!(
            "{} predicted F0 frames for {} reference frames",
            pred_log_f0.value().len(),
            true_f0.len()
        )));
    }
    if pred_log_dur.value().len() != mas_dur.0.len() {
        return Err(Error::Shape(format!(
            "{} predicted durations for {} phonemes",
            pred_log_dur.value().len(),
            mas_dur.0.len()
        )));
    }
    let voiced: Vec<usize> = (0..true_f0.len()).filter(|&t| true_f0.voiced[t]).collect();
    let f0 = if voiced.is_empty() {
        g.scalar(0.0)
    } else {
        let target: Vec<f64> = voiced.iter().map(|&t| true_f0.f0[t].ln()).collect();
        let n = target.len();
        pred_log_f0
            .reshape(&[1, true_f0.len()])
            .gather_cols(&voiced)
            .sub(g.constant(Tensor::new(&[1, n], target)))
            .square()
            .mean()
    };
    let n = mas_dur.0.len();
    let target: Vec<f64> = mas_dur.0.iter().map(|&d| (d as f64).ln()).collect();
    let dur = pred_log_dur
        .reshape(&[1, n])
        .sub(g.constant(Tensor::new(&[1, n], target)))
        .square()
        .mean();
    Ok((f0, dur))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub gamma: f64,
    /// Value `gamma` decays to linearly over the run; equal to `gamma` for
    /// a static weight.
    pub gamma_end: f64,
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub grad_clip: f64,
    pub ablation: AblationFlags,
    pub d_model: usize,
    pub d_latent: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub n_text_blocks: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub wn_hidden: usize,
    pub wn_blocks: usize,
    pub wn_kernel: usize,
    pub dec_channels: usize,
    pub upsample_rates: Vec<usize>,
    pub disc_channels: usize,
    pub cls_channels: usize,
    pub sample_rate: u32,
    pub frame: FrameConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::new(2);
        Self {
            seed: 0,
            lr_g: 2e-3,
            lr_d: 2e-4,
            batch_size: 8,
            steps: 2000,
            gamma: 45.0,
            gamma_end: 45.0,
            beta: 2.0,
            adam_beta1: 0.8,
            adam_beta2: 0.99,
            grad_clip: 5.0,
            ablation: AblationFlags::default(),
            d_model: m.d_model,
            d_latent: m.d_latent,
            ffn_dim: m.ffn_dim,
            n_heads: m.n_heads,
            n_text_blocks: m.n_text_blocks,
            flow_layers: m.flow_layers,
            flow_hidden: m.flow_hidden,
            wn_hidden: m.wn_hidden,
            wn_blocks: m.wn_blocks,
            wn_kernel: m.wn_kernel,
            dec_channels: m.dec_channels,
            upsample_rates: m.upsample_rates,
            disc_channels: m.disc_channels,
            cls_channels: m.cls_channels,
            sample_rate: m.sample_rate,
            frame: m.frame,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_latent: self.d_latent,
            ffn_dim: self.ffn_dim,
            n_heads: self.n_heads,
            n_text_blocks: self.n_text_blocks,
            flow_layers: self.flow_layers,
            flow_hidden: self.flow_hidden,
            wn_hidden: self.wn_hidden,
            wn_blocks: self.wn_blocks,
            wn_kernel: self.wn_kernel,
            dec_channels: self.dec_channels,
            upsample_rates: self.upsample_rates.clone(),
            disc_channels: self.disc_channels,
            cls_channels: self.cls_channels,
            sample_rate: self.sample_rate,
            frame: self.frame,
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config(
                "batch_size and steps must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.beta > 0.0 && self.gamma_end > 0.0) {
            return Err(Error::Config("gamma and beta must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.model_config(2).validate()
    }

    /// Applies one `key = value` setting; returns `false` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "lr_g" => self.lr_g = num(key, value)?,
            "lr_d" => self.lr_d = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "gamma" => {
                self.gamma = num(key, value)?;
                self.gamma_end = self.gamma;
            }
            "gamma_end" => self.gamma_end = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "no_prosody_predictor" => self.ablation.no_prosody_predictor = flag(key, value)?,
            "no_prosody_alignment" => self.ablation.no_prosody_alignment = flag(key, value)?,
            "no_prosody_integrator" => self.ablation.no_prosody_integrator = flag(key, value)?,
            "ablate" => {
                let extra = AblationFlags::parse(value)?;
                self.ablation.no_prosody_predictor |= extra.no_prosody_predictor;
                self.ablation.no_prosody_alignment |= extra.no_prosody_alignment;
                self.ablation.no_prosody_integrator |= extra.no_prosody_integrator;
            }
            "d_model" => self.d_model = num(key, value)?,
            "d_latent" => self.d_latent = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_text_blocks" => self.n_text_blocks = num(key, value)?,
            "flow_layers" => self.flow_layers = num(key, value)?,
            "flow_hidden" => self.flow_hidden = num(key, value)?,
            "wn_hidden" => self.wn_hidden = num(key, value)?,
            "wn_blocks" => self.wn_blocks = num(key, value)?,
            "wn_kernel" => self.wn_kernel = num(key, value)?,
            "dec_channels" => self.dec_channels = num(key, value)?,
            "upsample_rates" => {
                self.upsample_rates = value
                    .split(',')
                    .map(|v| num(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "disc_channels" => self.disc_channels = num(key, value)?,
            "cls_channels" => self.cls_channels = num(key, value)?,
            "sample_rate" => self.sample_rate = num(key, value)?,
            "fft_size" => self.frame.fft_size = num(key, value)?,
            "win_size" => self.frame.win_size = num(key, value)?,
            "hop" => self.frame.hop = num(key, value)?,
            "center_pad" => self.frame.center_pad = flag(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `key = value` lines, readable by [`TrainConfig::set`].
    pub fn to_kv(&self) -> String {
        let rates: Vec<String> = self.upsample_rates.iter().map(|r| r.to_string()).collect();
        let a = self.ablation;
        format!(
            "seed = {}\nlr_g = {}\nlr_d = {}\nbatch_size = {}\nsteps = {}\ngamma = {}\ngamma_end = {}\nbeta = {}\n\
             adam_beta1 = {}\nadam_beta2 = {}\ngrad_clip = {}\nno_prosody_predictor = {}\nno_prosody_alignment = {}\n\
             no_prosody_integrator = {}\nd_model = {}\nd_latent = {}\nffn_dim = {}\nn_heads = {}\nn_text_blocks = {}\n\
             flow_layers = {}\nflow_hidden = {}\nwn_hidden = {}\nwn_blocks = {}\nwn_kernel = {}\ndec_channels = {}\n\
             upsample_rates = {}\ndisc_channels = {}\ncls_channels = {}\nsample_rate = {}\nfft_size = {}\nwin_size = {}\n\
             hop = {}\ncenter_pad = {}\n",
            self.seed,
            self.lr_g,
            self.lr_d,
            self.batch_size,
            self.steps,
            self.gamma,
            self.gamma_end,
            self.beta,
            self.adam_beta1,
            self.adam_beta2,
            self.grad_clip,
            a.no_prosody_predictor,
            a.no_prosody_alignment,
            a.no_prosody_integrator,
            self.d_model,
            self.d_latent,
            self.ffn_dim,
            self.n_heads,
            self.n_text_blocks,
            self.flow_layers,
            self.flow_hidden,
            self.wn_hidden,
            self.wn_blocks,
            self.wn_kernel,
            self.dec_channels,
            rates.join(","),
            self.disc_channels,
            self.cls_channels,
            self.sample_rate,
            self.frame.fft_size,
            self.frame.win_size,
            self.frame.hop,
            self.frame.center_pad,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_kv(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        Ok(cfg)
    }

    fn gamma_at(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.steps.max(1) as f64).min(1.0);
        self.gamma + (self.gamma_end - self.gamma) * frac
    }
}

/// Parses flat `key = value` text with `#` comments into
/// `(line number, key, value)`.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((n + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// One utterance with its audio and cached features.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub speaker: String,
    pub emotion: EmotionLabel,
    pub phonemes: PhonemeSequence,
    pub wave: Waveform,
    pub features: FeatureRecord,
}

/// Neutral source warped onto the timeline of one target rendering.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub speaker: String,
    pub target_emotion: EmotionLabel,
    pub phonemes: PhonemeSequence,
    /// `[n_bins, T]` log magnitude of the warped source.
    pub source_log_spec: Tensor,
    pub source_f0: F0Track,
    /// `[1, T * hop]`
    pub target_wave: Tensor,
    pub target_mel: Tensor,
    /// Position in the training set, used to derive per-item noise.
    pub index: usize,
}

impl TrainingExample {
    pub fn n_frames(&self) -> usize {
        self.source_log_spec.cols()
    }
}

fn log_mag(t: &Tensor) -> Tensor {
    t.map(|v| v.max(1e-5).ln())
}

/// Pairs each neutral utterance with every rendering of the same id and
/// speaker (itself included), restricted to `targets` when given.
pub fn build_examples(
    items: &[CorpusItem],
    targets: Option<&[EmotionLabel]>,
    model: &Model,
) -> Result<Vec<TrainingExample>> {
    let hop = model.hop();
    let mut out = Vec::new();
    for src in items.iter().filter(|i| i.emotion == EmotionLabel::Neutral) {
        for tgt in items
            .iter()
            .filter(|t| t.id == src.id && t.speaker == src.speaker)
            .filter(|t| targets.map_or(true, |ts| ts.contains(&t.emotion)))
        {
            let t_frames = tgt.features.n_frames();
            let path = dtw(&src.features.cepstra, &tgt.features.cepstra)?.path;
            let mut src_of = vec![usize::MAX; t_frames];
            for &(i, j) in &path {
                if src_of[j] == usize::MAX {
                    src_of[j] = i;
                }
            }
            let spec = src.features.linear.mag.gather_cols(&src_of);
            let mut wave = tgt.wave.samples.clone();
            wave.resize(t_frames * hop, 0.0);
            let target_wave = Tensor::new(&[1, t_frames * hop], wave);
            let g = Graph::new();
            let target_mel = (*model
                .mel
                .log_mel(&g, g.constant(target_wave.clone()))
                .value())
            .clone();
            out.push(TrainingExample {
                id: tgt.id.clone(),
                speaker: tgt.speaker.clone(),
                target_emotion: tgt.emotion,
                phonemes: tgt.phonemes.clone(),
                source_log_spec: log_mag(&spec),
                source_f0: src.features.f0.gather(&src_of),
                target_wave,
                target_mel,
                index: out.len(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::MissingPair(
            "no neutral source with a matching target rendering".into(),
        ));
    }
    Ok(out)
}

/// Model, optimizers and bookkeeping carried between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: usize,
    /// Mean speaker vectors used when conversion has no source audio.
    pub speaker_means: BTreeMap<String, Tensor>,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(vocab.len()), cfg.seed)?;
        Ok(Self::from_model(model, cfg, vocab))
    }

    pub fn from_model(model: Model, cfg: TrainConfig, vocab: Vocabulary) -> Self {
        let opt_g = Adam::new(&model.gen_store, cfg.adam_beta1, cfg.adam_beta2);
        let opt_d = Adam::new(&model.critic_store, cfg.adam_beta1, cfg.adam_beta2);
        Self {
            model,
            cfg,
            vocab,
            opt_g,
            opt_d,
            step: 0,
            speaker_means: BTreeMap::new(),
        }
    }

    /// Recomputes per-speaker mean speaker vectors from neutral sources.
    pub fn refresh_speaker_means(&mut self, examples: &[TrainingExample]) -> Result<()> {
        let mut sums: BTreeMap<String, (Tensor, usize)> = BTreeMap::new();
        for ex in examples
            .iter()
            .filter(|e| e.target_emotion == EmotionLabel::Neutral)
        {
            let g = Graph::new();
            let p = Binding::new(&g, &self.model.gen_store, false);
            let v = self
                .model
                .speaker(&p, g.constant(ex.source_log_spec.clone()))?
                .vector
                .value();
            let entry = sums
                .entry(ex.speaker.clone())
                .or_insert_with(|| (Tensor::zeros(v.shape()), 0));
            entry.0.add_assign(&v);
            entry.1 += 1;
        }
        self.speaker_means = sums
            .into_iter()
            .map(|(k, (s, n))| (k, s.scale(1.0 / n as f64)))
            .collect();
        Ok(())
    }
}

fn item_noise(seed: u64, step: usize, index: usize, shape: &[usize]) -> Tensor {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((step as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    Tensor::randn(shape, 1.0, &mut rng)
}

fn finite(step: usize, name: &str, v: Var<'_>) -> Result<f64> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Diverged {
            step,
            component: name.to_string(),
        })
    }
}

/// Generator-side graph pieces kept alive across the discriminator update.
struct GenPass<'g> {
    fake: Var<'g>,
    real: Var<'g>,
    /// Weighted sum of the terms that do not involve the critics.
    partial: Var<'g>,
    recon_cls: f64,
    psd: f64,
    f0: f64,
    dur: f64,
}

fn generator_pass<'g>(
    model_gen: &crate::model::Generator,
    mel: &crate::synth::MelFrontEnd,
    p: &Binding<'g, '_>,
    ex: &TrainingExample,
    cfg: &TrainConfig,
    step: usize,
    gamma: f64,
) -> Result<GenPass<'g>> {
    let g = p.g;
    let text = model_gen.text(p, &ex.phonemes, ex.target_emotion)?;
    let eps = item_noise(
        cfg.seed,
        step,
        ex.index,
        &[model_gen.d_latent, ex.n_frames()],
    );
    let log_spec = g.constant(ex.source_log_spec.clone());
    let audio = model_gen.audio(p, log_spec, ex.target_emotion, eps)?;
    let post = &audio.posterior;

    // alignment on the current latent, outside the gradient path
    let align = {
        let ag = Graph::new();
        let ap = Binding::new(&ag, p.store(), false);
        let (u, _) = model_gen
            .flow
            .forward(&ap, ag.constant((*post.z2.value()).clone()))?;
        let u = (*u.value()).clone();
        mas(&u, &text.prior.values())?
    };
    let durations = durations_from_alignment(&align);
    let prior_frames = expand_by_alignment(text.prior, &align)?;

    let psd = if cfg.ablation.no_prosody_alignment {
        g.scalar(0.0)
    } else {
        model_gen
            .flow
            .prosody_alignment_loss(p, post.z2, post.stats, prior_frames)?
    };
    let (f0, dur) = f0_and_duration_losses(
        audio.speaker.log_f0,
        &ex.source_f0,
        text.log_durations,
        &durations,
    )?;
    let fake = model_gen
        .decoder
        .decode(p, post.z2, &audio.speaker, &audio.emotion)?
        .waveform;
    let fake_mel = mel.log_mel(g, fake);
    let real_mel = g.constant(ex.target_mel.clone());
    let recon_cls = real_mel.sub(fake_mel).abs().mean();
    let partial = recon_cls.scale(gamma).add(psd).add(f0).add(dur);
    Ok(GenPass {
        fake,
        real: g.constant(ex.target_wave.clone()),
        partial,
        recon_cls: finite(step, "recon_cls", recon_cls)?,
        psd: finite(step, "psd", psd)?,
        f0: finite(step, "f0", f0)?,
        dur: finite(step, "dur", dur)?,
    })
}

/// One discriminator update followed by one generator update on `batch`.
/// Losses are those computed during the step: discriminator terms before
/// its update, generator terms against the updated discriminator.
pub fn train_step(state: &mut TrainState, batch: &[&TrainingExample]) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::InvalidRequest("empty batch".into()));
    }
    let step = state.step;
    let cfg = &state.cfg;
    let gamma = cfg.gamma_at(step);
    let beta = cfg.beta;
    let inv_b = 1.0 / batch.len() as f64;
    let Model {
        gen,
        gen_store,
        critics,
        critic_store,
        mel,
        ..
    } = &mut state.model;
    let mut sums = [0.0f64; 10];

    let graphs: Vec<Graph> = batch.iter().map(|_| Graph::new()).collect();
    let gen_bindings: Vec<Binding<'_, '_>> = graphs
        .iter()
        .map(|g| Binding::new(g, gen_store, true))
        .collect();
    let mut passes = Vec::with_capacity(batch.len());
    for (b, ex) in gen_bindings.iter().zip(batch) {
        let pass = generator_pass(gen, mel, b, ex, cfg, step, gamma)?;
        sums[0] += pass.recon_cls;
        sums[6] += pass.psd;
        sums[7] += pass.f0;
        sums[8] += pass.dur;
        passes.push(pass);
    }

    // discriminator and emotion classifier
    let mut d_grads = vec![None; critic_store.len()];
    for (pass, ex) in passes.iter().zip(batch) {
        let g = Graph::new();
        let p = Binding::new(&g, critic_store, true);
        let real = g.constant(ex.target_wave.clone());
        let fake = g.constant((*pass.fake.value()).clone());
        let rr = critics.disc.discriminate(&p, real)?;
        let fr = critics.disc.discriminate(&p, fake)?;
        let (_, adv_d) = adversarial_losses(&rr, &fr)?;
        let cls_real = critics
            .classifier
            .classify(&p, real)?
            .logits
            .cross_entropy(ex.target_emotion.index());
        sums[3] += finite(step, "adv_D", adv_d)?;
        sums[9] += finite(step, "cls_real", cls_real)?;
        let grads = g.backward(adv_d.add(cls_real).scale(inv_b));
        accumulate(&mut d_grads, p.collect(&grads));
    }
    clip_grad_norm(&mut d_grads, cfg.grad_clip);
    state.opt_d.update(critic_store, &d_grads, cfg.lr_d);

    // generator against the updated critics
    let mut g_grads = vec![None; gen_store.len()];
    for ((pass, ex), gb) in passes.iter().zip(batch).zip(&gen_bindings) {
        let g = gb.g;
        let cp = Binding::new(g, critic_store, false);
        let rr = critics.disc.discriminate(&cp, pass.real)?;
        let fr = critics.disc.discriminate(&cp, pass.fake)?;
        let adv_g = generator_adversarial_loss(&fr);
        let (_, recon_fm) = reconstruction_losses(
            g.constant(Tensor::zeros(&[1, 1])),
            g.constant(Tensor::zeros(&[1, 1])),
            &rr,
            &fr,
        )?;
        let er = critics.classifier.classify(&cp, pass.real)?;
        let ef = critics.classifier.classify(&cp, pass.fake)?;
        let (emo_cls, emo_fm) = emotion_losses(&ef, &er, ex.target_emotion)?;
        sums[1] += finite(step, "recon_fm", recon_fm)?;
        sums[2] += finite(step, "adv_G", adv_g)?;
        sums[4] += finite(step, "emo_cls", emo_cls)?;
        sums[5] += finite(step, "emo_fm", emo_fm)?;
        let total = pass
            .partial
            .add(recon_fm.scale(beta))
            .add(adv_g)
            .add(emo_cls)
            .add(emo_fm);
        finite(step, "total_G", total)?;
        let grads = g.backward(total.scale(inv_b));
        accumulate(&mut g_grads, gb.collect(&grads));
    }
    drop(gen_bindings);
    let norm = clip_grad_norm(&mut g_grads, cfg.grad_clip);
    state.opt_g.update(gen_store, &g_grads, cfg.lr_g);
    state.step += 1;

    let m: Vec<f64> = sums.iter().map(|s| s * inv_b).collect();
    let bundle = LossBundle {
        recon_cls: m[0],
        recon_fm: m[1],
        adv_g: m[2],
        adv_d: m[3],
        emo_cls: m[4],
        emo_fm: m[5],
        psd: m[6],
        f0: m[7],
        dur: m[8],
        cls_real: m[9],
        gamma,
        beta,
    };
    bundle.check_finite(step)?;
    debug!(
        "step {step}: recon_cls {:.4} grad norm {norm:.3}",
        bundle.recon_cls
    );
    Ok(bundle)
}

/// Batches of indices for a step: a seeded permutation per epoch, cut into
/// consecutive runs of `batch_size`.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let b = batch_size.min(n);
    let per_epoch = n / b;
    let epoch = step / per_epoch;
    let k = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order[k * b..(k + 1) * b].to_vec()
}

/// CSV training log with a fixed column order.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub const HEADER: &'static str =
        "step,recon_cls,recon_fm,adv_G,adv_D,emo_cls,emo_fm,psd,f0,dur,total_G,total_D";

    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(Self { out })
    }

    pub fn record(&mut self, step: usize, b: &LossBundle) -> Result<()> {
        writeln!(self.out, "{}", format_log_line(step, b))?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn format_log_line(step: usize, b: &LossBundle) -> String {
    let mut fields = vec![step.to_string()];
    fields.extend(b.components().iter().map(|(_, v)| format!("{v:.6e}")));
    fields.push(format!("{:.6e}", assemble_generator_loss(b)));
    fields.push(format!("{:.6e}", assemble_discriminator_loss(b)));
    fields.join(",")
}

/// Runs `state.cfg.steps - state.step` further steps, calling `on_step` with
/// each bundle.
pub fn train(
    state: &mut TrainState,
    examples: &[TrainingExample],
    mut on_step: impl FnMut(usize, &LossBundle) -> Result<()>,
) -> Result<()> {
    while state.step < state.cfg.steps {
        let idx = batch_indices(
            state.cfg.seed,
            state.step,
            examples.len(),
            state.cfg.batch_size,
        );
        let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
        let step = state.step;
        let b = train_step(state, &batch)?;
        on_step(step, &b)?;
    }
    state.refresh_speaker_means(examples)
}
