//! Full generator and critic networks with their shared configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::apm::{
    log_spectrogram, ConcatIntegrator, EmotionDescriptor, EmotionEmbedding, EmotionSource,
    PosteriorSample, ProsodyIntegrator, SpeakerEmbedding, SpeakerEncoder, StubBackend,
    WaveNetIntegrator,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flowalign::FlowStack;
use crate::nn::Linear;
use crate::nn::{Binding, Init, ParamStore};
use crate::signal::{FrameConfig, LinearSpectrogram, DEFAULT_SAMPLE_RATE};
use crate::synth::{Decoder, Discriminator, EmotionClassifier, MelFrontEnd};
use crate::tensor::Tensor;
use crate::tpp::{
    DurationPredictor, EmotionLabel, GaussianVars, PhonemeSequence, ProsodyPredictor, TextEncoder,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct AblationFlags {
    pub no_prosody_predictor: bool,
    pub no_prosody_alignment: bool,
    pub no_prosody_integrator: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 3] = [
        "no_prosody_predictor",
        "no_prosody_alignment",
        "no_prosody_integrator",
    ];

    /// Parses a comma-separated flag list.
    pub fn parse(list: &str) -> Result<Self> {
        let mut f = Self::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "no_prosody_predictor" => f.no_prosody_predictor = true,
                "no_prosody_alignment" => f.no_prosody_alignment = true,
                "no_prosody_integrator" => f.no_prosody_integrator = true,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(f)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let on = [
            self.no_prosody_predictor,
            self.no_prosody_alignment,
            self.no_prosody_integrator,
        ];
        Self::NAMES
            .iter()
            .zip(on)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn any(&self) -> bool {
        self.no_prosody_predictor || self.no_prosody_alignment || self.no_prosody_integrator
    }
}

/// Network dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
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
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            d_latent: 32,
            ffn_dim: 64,
            n_heads: 2,
            n_text_blocks: 2,
            flow_layers: 4,
            flow_hidden: 32,
            wn_hidden: 32,
            wn_blocks: 2,
            wn_kernel: 5,
            dec_channels: 64,
            upsample_rates: vec![8, 8, 2, 2],
            disc_channels: 32,
            cls_channels: 32,
            sample_rate: DEFAULT_SAMPLE_RATE,
            frame: FrameConfig::default(),
            ablation: AblationFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        if self.upsample_rates.iter().product::<usize>() != self.frame.hop {
            return Err(Error::Config(format!(
                "upsample rates {:?} must multiply to hop {}",
                self.upsample_rates, self.frame.hop
            )));
        }
        if self.d_latent % 2 == 1 {
            return Err(Error::Config("d_latent must be even".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must divide into heads".into()));
        }
        if self.disc_channels < 4 || self.vocab_size < 2 {
            return Err(Error::Config("model dimensions too small".into()));
        }
        Ok(())
    }

    /// Canonical text form, hashed into checkpoints.
    pub fn canonical(&self) -> String {
        format!(
            "vocab={} d_model={} d_latent={} ffn={} heads={} text_blocks={} flow={}x{} wn={}x{}k{} dec={} ups={:?} disc={} cls={} sr={} fft={} win={} hop={} center={} ablate={:?}",
            self.vocab_size,
            self.d_model,
            self.d_latent,
            self.ffn_dim,
            self.n_heads,
            self.n_text_blocks,
            self.flow_layers,
            self.flow_hidden,
            self.wn_blocks,
            self.wn_hidden,
            self.wn_kernel,
            self.dec_channels,
            self.upsample_rates,
            self.disc_channels,
            self.cls_channels,
            self.sample_rate,
            self.frame.fft_size,
            self.frame.win_size,
            self.frame.hop,
            self.frame.center_pad,
            self.ablation.names(),
        )
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
    }
}

/// Per-submodule RNG so one module's shape never shifts another's init.
fn sub_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}:{name}").as_bytes());
    ChaCha8Rng::from_seed(digest.into())
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub encoder: TextEncoder,
    pub prosody: Option<ProsodyPredictor>,
    pub prior: Linear,
    pub duration: DurationPredictor,
    pub descriptor: EmotionDescriptor,
    pub speaker: SpeakerEncoder,
    pub integrator: ProsodyIntegrator,
    pub flow: FlowStack,
    pub decoder: Decoder,
    pub d_model: usize,
    pub d_latent: usize,
    pub n_bins: usize,
}

#[derive(Debug, Clone)]
pub struct Critics {
    pub disc: Discriminator,
    pub classifier: EmotionClassifier,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub gen: Generator,
    pub gen_store: ParamStore,
    pub critics: Critics,
    pub critic_store: ParamStore,
    pub mel: MelFrontEnd,
}

/// Text-side outputs at phoneme level.
#[derive(Debug, Clone, Copy)]
pub struct TextOutputs<'g> {
    pub hidden: Var<'g>,
    pub prosody: Var<'g>,
    pub prior: GaussianVars<'g>,
    pub log_durations: Var<'g>,
}

#[derive(Debug, Clone)]
pub struct AudioOutputs<'g> {
    pub speaker: SpeakerEmbedding<'g>,
    pub emotion: EmotionEmbedding<'g>,
    pub posterior: PosteriorSample<'g>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, dl) = (cfg.d_model, cfg.d_latent);
        let bins = cfg.frame.n_bins();
        let mut gs = ParamStore::new();
        macro_rules! build {
            ($store:expr, $name:expr, |$i:ident| $body:expr) => {{
                let mut rng = sub_rng(seed, $name);
                let mut $i = Init::new(&mut $store, &mut rng);
                $body
            }};
        }
        let a = cfg.ablation;
        let encoder = build!(gs, "text_encoder", |i| i.scope(
            "tpp",
            |i| TextEncoder::new(
                i,
                cfg.vocab_size,
                d,
                cfg.ffn_dim,
                cfg.n_heads,
                cfg.n_text_blocks
            )
        ));
        let prosody = if a.no_prosody_predictor {
            None
        } else {
            Some(build!(gs, "prosody_predictor", |i| i
                .scope("tpp", |i| ProsodyPredictor::new(i, d))))
        };
        let prior = build!(gs, "prior", |i| i.scope("tpp", |i| Linear::new(
            i,
            "prior",
            2 * d,
            2 * dl
        )));
        let duration = build!(gs, "duration", |i| i
            .scope("tpp", |i| DurationPredictor::new(i, d)));
        let descriptor = build!(gs, "descriptor", |i| i
            .scope("apm", |i| EmotionDescriptor::new(i, d)));
        let speaker = build!(gs, "speaker", |i| i
            .scope("apm", |i| SpeakerEncoder::new(i, bins, d)));
        let integrator = if a.no_prosody_integrator {
            ProsodyIntegrator::Concat(build!(gs, "concat_integrator", |i| i.scope("apm", |i| {
                ConcatIntegrator::new(i, bins, d, cfg.wn_hidden, dl)
            })))
        } else {
            ProsodyIntegrator::WaveNet(build!(gs, "integrator", |i| i.scope("apm", |i| {
                WaveNetIntegrator::new(i, bins, d, cfg.wn_hidden, dl, cfg.wn_blocks, cfg.wn_kernel)
            })))
        };
        let flow = build!(gs, "flow", |i| FlowStack::new(
            &mut i,
            dl,
            cfg.flow_hidden,
            cfg.flow_layers
        ));
        let decoder = build!(gs, "decoder", |i| Decoder::new(
            &mut i,
            dl,
            d,
            cfg.dec_channels,
            &cfg.upsample_rates
        ));
        let mel = MelFrontEnd::new(cfg.sample_rate, cfg.frame);
        let mut cs = ParamStore::new();
        let disc = build!(cs, "disc", |i| Discriminator::new(
            &mut i,
            cfg.disc_channels
        ));
        let classifier = build!(cs, "classifier", |i| EmotionClassifier::new(
            &mut i,
            mel.clone(),
            cfg.cls_channels
        ));
        Ok(Self {
            gen: Generator {
                encoder,
                prosody,
                prior,
                duration,
                descriptor,
                speaker,
                integrator,
                flow,
                decoder,
                d_model: d,
                d_latent: dl,
                n_bins: bins,
            },
            gen_store: gs,
            critics: Critics { disc, classifier },
            critic_store: cs,
            mel,
            cfg,
            seed,
        })
    }

    pub fn hop(&self) -> usize {
        self.cfg.frame.hop
    }

    pub fn text<'g>(
        &self,
        p: &Binding<'g, '_>,
        phonemes: &PhonemeSequence,
        emotion: EmotionLabel,
    ) -> Result<TextOutputs<'g>> {
        self.gen.text(p, phonemes, emotion)
    }

    pub fn emotion<'g>(
        &self,
        p: &Binding<'g, '_>,
        label: EmotionLabel,
    ) -> Result<EmotionEmbedding<'g>> {
        self.gen.emotion(p, label)
    }

    pub fn speaker<'g>(
        &self,
        p: &Binding<'g, '_>,
        log_spec: Var<'g>,
    ) -> Result<SpeakerEmbedding<'g>> {
        self.gen.speaker.forward(p, log_spec)
    }

    pub fn audio<'g>(
        &self,
        p: &Binding<'g, '_>,
        log_spec: Var<'g>,
        emotion: EmotionLabel,
        eps: Tensor,
    ) -> Result<AudioOutputs<'g>> {
        self.gen.audio(p, log_spec, emotion, eps)
    }

    pub fn log_spec<'g>(&self, g: &'g Graph, spec: &LinearSpectrogram) -> Var<'g> {
        log_spectrogram(g, spec)
    }
}

impl Generator {
    pub fn text<'g>(
        &self,
        p: &Binding<'g, '_>,
        phonemes: &PhonemeSequence,
        emotion: EmotionLabel,
    ) -> Result<TextOutputs<'g>> {
        let g = self;
        let hidden = g.encoder.forward(p, phonemes)?;
        let prosody = match &g.prosody {
            Some(pp) => pp.forward(p, hidden, emotion),
            None => p.g.constant(Tensor::zeros(&[self.d_model, phonemes.len()])),
        };
        let dl = self.d_latent;
        let stats = g.prior.forward(p, Var::concat_rows(&[hidden, prosody]));
        let prior = GaussianVars {
            mu: stats.slice_rows(0, dl),
            log_sigma: stats.slice_rows(dl, 2 * dl),
            level: crate::tpp::Level::Phoneme,
        };
        let log_durations = g.duration.forward(p, hidden, prosody);
        Ok(TextOutputs {
            hidden,
            prosody,
            prior,
            log_durations,
        })
    }

    pub fn emotion<'g>(
        &self,
        p: &Binding<'g, '_>,
        label: EmotionLabel,
    ) -> Result<EmotionEmbedding<'g>> {
        Ok(self
            .descriptor
            .describe(p, &StubBackend, EmotionSource::Label(label))?
            .1)
    }

    pub fn speaker<'g>(
        &self,
        p: &Binding<'g, '_>,
        log_spec: Var<'g>,
    ) -> Result<SpeakerEmbedding<'g>> {
        self.speaker.forward(p, log_spec)
    }

    /// Posterior path from a log-magnitude spectrogram node.
    pub fn audio<'g>(
        &self,
        p: &Binding<'g, '_>,
        log_spec: Var<'g>,
        emotion: EmotionLabel,
        eps: Tensor,
    ) -> Result<AudioOutputs<'g>> {
        if log_spec.rows() != self.n_bins {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, model expects {}",
                log_spec.rows(),
                self.n_bins
            )));
        }
        let speaker = self.speaker.forward(p, log_spec)?;
        let emo = self.emotion(p, emotion)?;
        let posterior = self
            .integrator
            .integrate(p, log_spec, &emo, &speaker, eps)?;
        Ok(AudioOutputs {
            speaker,
            emotion: emo,
            posterior,
        })
    }
}

/// Returns `model` rebuilt with `flags`; identical when nothing changes.
pub fn apply_ablation(flags: AblationFlags, model: Model) -> Result<Model> {
    if flags == model.cfg.ablation {
        return Ok(model);
    }
    let mut cfg = model.cfg.clone();
    cfg.ablation = flags;
    Model::new(cfg, model.seed)
}
