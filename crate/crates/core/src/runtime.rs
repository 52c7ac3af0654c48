//! Corpus handling, synthetic data, fixed- and variable-length conversion
//! and MCD evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::Binding;
use crate::signal::{
    linear_spectrogram, load_wav, mcd, save_wav, FeatureRecord, FrameConfig, Waveform,
    DEFAULT_SAMPLE_RATE,
};
use crate::tensor::Tensor;
use crate::tpp::{
    decode_durations, expand_prior, DurationVector, EmotionLabel, PhonemeSequence, Vocabulary,
};
use crate::train::{
    build_examples, format_log_line, parse_kv, train, CorpusItem, LossLog, TrainConfig, TrainState,
};

pub const MANIFEST_HEADER: &str = "id|audio_path|phonemes|emotion|speaker";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub phonemes: Vec<String>,
    pub emotion: EmotionLabel,
    pub speaker: String,
}

impl UtteranceRecord {
    /// Cache and output file stem.
    pub fn key(&self) -> String {
        format!("{}_{}", self.id, self.emotion)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    /// Parses manifest text; relative audio paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::Manifest {
                    line: 1,
                    msg: format!("header `{MANIFEST_HEADER}` required"),
                })
            }
        }
        let mut records: Vec<UtteranceRecord> = Vec::new();
        for (n, line) in lines {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Manifest { line: line_no, msg };
            let f: Vec<&str> = line.split('|').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", f.len())));
            }
            let phonemes: Vec<String> = f[2].split_whitespace().map(str::to_string).collect();
            if phonemes.is_empty() {
                return Err(err("empty phoneme sequence".into()));
            }
            let emotion = EmotionLabel::from_str(f[3]).map_err(|e| err(e.to_string()))?;
            let id = f[0].trim().to_string();
            if id.is_empty() {
                return Err(err("empty id".into()));
            }
            if records.iter().any(|r| r.id == id && r.emotion == emotion) {
                return Err(err(format!("duplicate id `{id}` for emotion {emotion}")));
            }
            let path = PathBuf::from(f[1].trim());
            records.push(UtteranceRecord {
                id,
                audio_path: if path.is_absolute() {
                    path
                } else {
                    base.join(path)
                },
                phonemes,
                emotion,
                speaker: f[4].trim().to_string(),
            });
        }
        if records.is_empty() {
            return Err(Error::Manifest {
                line: 1,
                msg: "no records".into(),
            });
        }
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Sorted unique phoneme symbols, after the pad entry.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut symbols: Vec<&str> = self
            .records
            .iter()
            .flat_map(|r| r.phonemes.iter().map(String::as_str))
            .collect();
        symbols.sort_unstable();
        symbols.dedup();
        Vocabulary::from_symbols(symbols)
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{MANIFEST_HEADER}")?;
        for r in &self.records {
            writeln!(
                f,
                "{}|{}|{}|{}|{}",
                r.id,
                r.audio_path.display(),
                r.phonemes.join(" "),
                r.emotion,
                r.speaker
            )?;
        }
        Ok(())
    }
}

fn cache_path(cache_dir: &Path, r: &UtteranceRecord) -> PathBuf {
    cache_dir.join(format!("{}.evcf", r.key()))
}

/// Computes and stores features for every record; returns how many files
/// were written.
pub fn prepare(manifest: &Manifest, cache_dir: &Path, cfg: FrameConfig) -> Result<usize> {
    fs::create_dir_all(cache_dir)?;
    for r in &manifest.records {
        let w = load_wav(&r.audio_path)?;
        FeatureRecord::compute(&r.key(), &w, cfg).save(cache_path(cache_dir, r))?;
    }
    Ok(manifest.records.len())
}

/// Loads audio and features (from the cache when present and matching).
pub fn load_corpus(
    manifest: &Manifest,
    vocab: &Vocabulary,
    cache_dir: Option<&Path>,
    cfg: FrameConfig,
    sample_rate: u32,
) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let wave = load_wav(&r.audio_path)?;
        if wave.sample_rate != sample_rate {
            return Err(Error::SampleRateMismatch(wave.sample_rate, sample_rate));
        }
        let cached = match cache_dir {
            Some(dir) if cache_path(dir, r).exists() => {
                let f = FeatureRecord::load(cache_path(dir, r))?;
                (f.hop == cfg.hop
                    && f.linear.mag.rows() == cfg.n_bins()
                    && f.n_frames() == cfg.n_frames(wave.len()))
                .then_some(f)
            }
            _ => None,
        };
        let features = match cached {
            Some(f) => f,
            None => FeatureRecord::compute(&r.key(), &wave, cfg),
        };
        items.push(CorpusItem {
            id: r.id.clone(),
            speaker: r.speaker.clone(),
            emotion: r.emotion,
            phonemes: vocab.encode(&r.phonemes)?,
            wave,
            features,
        });
    }
    Ok(items)
}

/// Training run settings: data locations plus every [`TrainConfig`] key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses flat `key = value` text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut manifest = None;
        let mut cache_dir = None;
        let mut out_dir = None;
        let mut train = TrainConfig::default();
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (line, key, value) in parse_kv(text)? {
            match key.as_str() {
                "manifest" => manifest = Some(resolve(&value)),
                "cache_dir" => cache_dir = Some(resolve(&value)),
                "out_dir" => out_dir = Some(resolve(&value)),
                _ => {
                    if !train.set(&key, &value)? {
                        return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
                    }
                }
            }
        }
        train.validate()?;
        Ok(Self {
            manifest: manifest.ok_or_else(|| Error::Config("`manifest` is required".into()))?,
            cache_dir,
            out_dir: out_dir.ok_or_else(|| Error::Config("`out_dir` is required".into()))?,
            train,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(
            &fs::read_to_string(path)?,
            path.parent().unwrap_or(Path::new(".")),
        )
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("model.ckpt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.csv")
    }
}

/// Trains from scratch, writing the loss log and final checkpoint under
/// `out_dir`.
pub fn run_training(run: &RunConfig) -> Result<TrainState> {
    let manifest = Manifest::load(&run.manifest)?;
    let vocab = manifest.vocabulary();
    let items = load_corpus(
        &manifest,
        &vocab,
        run.cache_dir.as_deref(),
        run.train.frame,
        run.train.sample_rate,
    )?;
    let mut state = TrainState::new(run.train.clone(), vocab)?;
    let examples = build_examples(&items, None, &state.model)?;
    info!(
        "training on {} pairs for {} steps",
        examples.len(),
        run.train.steps
    );
    fs::create_dir_all(&run.out_dir)?;
    let mut log = LossLog::new(BufWriter::new(fs::File::create(run.log_path())?))?;
    train(&mut state, &examples, |step, b| {
        if step % 10 == 0 {
            info!("{}", format_log_line(step, b));
        }
        log.record(step, b)
    })?;
    log.into_inner().flush()?;
    checkpoint::save(&state, run.checkpoint_path())?;
    Ok(state)
}

/// The toy phoneme alphabet of the synthetic corpus.
pub const SYNTH_PHONEMES: [&str; 16] = [
    "a", "e", "i", "o", "u", "m", "n", "l", "r", "s", "k", "t", "p", "b", "d", "g",
];

/// Formant-like resonance centre of each toy phoneme, in Hz.
pub fn synth_formant(phoneme: usize) -> f64 {
    400.0 + 180.0 * phoneme as f64
}

/// Rendering rule for one emotion: pitch factor, duration factor, peak
/// amplitude, and amplitude slope over the utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionStyle {
    pub pitch: f64,
    pub duration: f64,
    pub amplitude: f64,
    pub slope: f64,
}

/// Fixed emotion rules of the synthetic corpus. High-arousal labels raise
/// pitch by 30%; sad lowers it; durations vary by up to 25%.
pub fn synth_style(e: EmotionLabel) -> EmotionStyle {
    let (pitch, duration, amplitude, slope) = match e {
        EmotionLabel::Neutral => (1.0, 1.0, 0.5, 0.0),
        EmotionLabel::Angry => (1.3, 0.8, 0.8, -0.3),
        EmotionLabel::Happy => (1.3, 0.9, 0.65, 0.3),
        EmotionLabel::Sad => (0.85, 1.25, 0.35, -0.4),
        EmotionLabel::Surprise => (1.3, 1.0, 0.7, 0.5),
    };
    EmotionStyle {
        pitch,
        duration,
        amplitude,
        slope,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpusSpec {
    pub n_utterances: usize,
    pub seed: u64,
    pub n_speakers: usize,
    pub phonemes_per_utterance: (usize, usize),
    /// Frames per phoneme before the emotion duration factor.
    pub frames_per_phoneme: (usize, usize),
    pub emotions: Vec<EmotionLabel>,
    pub sample_rate: u32,
    pub hop: usize,
}

impl SynthCorpusSpec {
    pub fn new(n_utterances: usize, seed: u64) -> Self {
        Self {
            n_utterances,
            seed,
            n_speakers: 2,
            phonemes_per_utterance: (4, 6),
            frames_per_phoneme: (4, 6),
            emotions: EmotionLabel::ALL.to_vec(),
            sample_rate: DEFAULT_SAMPLE_RATE,
            hop: 256,
        }
    }
}

fn speaker_f0(speaker: usize) -> f64 {
    [120.0, 180.0, 150.0, 210.0][speaker % 4]
}

/// Renders one utterance; deterministic in its arguments.
pub fn render_utterance(
    phonemes: &[usize],
    base_frames: &[usize],
    speaker: usize,
    emotion: EmotionLabel,
    spec: &SynthCorpusSpec,
    noise_seed: u64,
) -> Vec<f64> {
    let style = synth_style(emotion);
    let sr = spec.sample_rate as f64;
    let seg: Vec<usize> = base_frames
        .iter()
        .map(|&f| ((f as f64 * style.duration).round() as usize).max(2) * spec.hop)
        .collect();
    let lead = 2 * spec.hop;
    let voiced_len: usize = seg.iter().sum();
    let total = voiced_len + 2 * lead;
    let mut out = vec![0.0; total];
    let f0_base = speaker_f0(speaker) * style.pitch;
    let ramp = (0.01 * sr) as usize;
    let mut phase = 0.0;
    let mut start = lead;
    for (&ph, &len) in phonemes.iter().zip(&seg) {
        let formant = synth_formant(ph);
        for n in 0..len {
            let pos = (start + n - lead) as f64 / voiced_len as f64;
            // gentle declination over the utterance
            let f0 = f0_base * (1.0 - 0.08 * pos);
            phase += 2.0 * PI * f0 / sr;
            let mut v = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < sr / 2.0 - 500.0 && h <= 40 {
                let fh = h as f64 * f0;
                let a = (-((fh - formant) / 250.0).powi(2)).exp() + 0.3 / h as f64;
                v += a * (h as f64 * phase).sin();
                h += 1;
            }
            let edge = (n.min(len - 1 - n) as f64 / ramp as f64).min(1.0);
            let env = 0.5 - 0.5 * (PI * edge).cos();
            let amp = style.amplitude * (1.0 + style.slope * (pos - 0.5)) * 0.35;
            out[start + n] = amp * env * v;
        }
        start += len;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for v in out.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + 2e-3 * n).clamp(-0.99, 0.99);
    }
    out
}

/// Writes WAVs and `manifest.txt` under `out`; returns the manifest.
pub fn generate_synthetic_corpus(spec: &SynthCorpusSpec, out: &Path) -> Result<Manifest> {
    if spec.n_utterances == 0 || spec.n_speakers == 0 || spec.emotions.is_empty() {
        return Err(Error::InvalidRequest("empty synthetic corpus".into()));
    }
    let wav_dir = out.join("wavs");
    fs::create_dir_all(&wav_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for u in 0..spec.n_utterances {
        let n = rng.gen_range(spec.phonemes_per_utterance.0..=spec.phonemes_per_utterance.1);
        let phonemes: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(0..SYNTH_PHONEMES.len()))
            .collect();
        let frames: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(spec.frames_per_phoneme.0..=spec.frames_per_phoneme.1))
            .collect();
        let speaker = u % spec.n_speakers;
        let id = format!("utt{u:03}");
        for (ei, &e) in spec.emotions.iter().enumerate() {
            let noise_seed = spec.seed.wrapping_mul(1_000_003) ^ ((u as u64) << 8 | ei as u64);
            let samples = render_utterance(&phonemes, &frames, speaker, e, spec, noise_seed);
            let rel = PathBuf::from("wavs").join(format!("{id}_{e}.wav"));
            save_wav(&Waveform::new(samples, spec.sample_rate)?, out.join(&rel))?;
            records.push(UtteranceRecord {
                id: id.clone(),
                audio_path: rel,
                phonemes: phonemes
                    .iter()
                    .map(|&p| SYNTH_PHONEMES[p].to_string())
                    .collect(),
                emotion: e,
                speaker: format!("spk{speaker}"),
            });
        }
    }
    let manifest = Manifest { records };
    fs::write(out.join("manifest.txt"), manifest.to_string())?;
    info!(
        "wrote {} synthetic utterances to {}",
        manifest.records.len(),
        out.display()
    );
    Manifest::load(out.join("manifest.txt"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConversionMode {
    Fixed,
    Variable,
}

impl FromStr for ConversionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fl" => Ok(Self::Fixed),
            "vl" => Ok(Self::Variable),
            other => Err(Error::InvalidRequest(format!(
                "mode must be fl or vl, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ConversionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fl",
            Self::Variable => "vl",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConversionRequest {
    pub mode: ConversionMode,
    pub audio: Option<Waveform>,
    pub phonemes: Option<PhonemeSequence>,
    pub speaker: Option<String>,
    pub target_emotion: EmotionLabel,
}

#[derive(Debug, Clone)]
pub struct ConversionOutput {
    pub wave: Waveform,
    /// Decoded durations on the variable-length path.
    pub durations: Option<DurationVector>,
}

pub const DEFAULT_NOISE_SCALE: f64 = 0.667;

/// Audio → posterior (ε = 0) → waveform; keeps the source frame count.
pub fn convert_fl(state: &TrainState, audio: &Waveform, target: EmotionLabel) -> Result<Waveform> {
    let model = &state.model;
    if audio.sample_rate != model.cfg.sample_rate {
        return Err(Error::SampleRateMismatch(
            audio.sample_rate,
            model.cfg.sample_rate,
        ));
    }
    let spec = linear_spectrogram(audio, model.cfg.frame);
    let g = Graph::new();
    let p = Binding::new(&g, &model.gen_store, false);
    let t = spec.n_frames();
    let out = model.audio(
        &p,
        model.log_spec(&g, &spec),
        target,
        Tensor::zeros(&[model.cfg.d_latent, t]),
    )?;
    let wave = model
        .gen
        .decoder
        .decode(&p, out.posterior.z2, &out.speaker, &out.emotion)?
        .waveform;
    Waveform::new(wave.value().data().to_vec(), model.cfg.sample_rate)
}

/// Text → prior → durations → inverse flow → waveform.
pub fn convert_vl(
    state: &TrainState,
    phonemes: &PhonemeSequence,
    target: EmotionLabel,
    speaker_audio: Option<&Waveform>,
    speaker: Option<&str>,
    noise_scale: f64,
    seed: u64,
) -> Result<(Waveform, DurationVector)> {
    let model = &state.model;
    let g = Graph::new();
    let p = Binding::new(&g, &model.gen_store, false);
    let spk = match (speaker_audio, speaker) {
        (Some(w), _) => {
            let spec = linear_spectrogram(w, model.cfg.frame);
            model.speaker(&p, model.log_spec(&g, &spec))?
        }
        (None, Some(name)) => {
            let v = state.speaker_means.get(name).ok_or_else(|| {
                Error::InvalidRequest(format!("no stored speaker vector for `{name}`"))
            })?;
            crate::apm::SpeakerEmbedding {
                vector: g.constant(v.clone()),
                log_f0: g.constant(Tensor::zeros(&[1, 1])),
            }
        }
        (None, None) => {
            return Err(Error::InvalidRequest(
                "variable-length conversion needs source audio or a speaker name".into(),
            ))
        }
    };
    let text = model.text(&p, phonemes, target)?;
    let durations = decode_durations(text.log_durations.value().data());
    let prior = expand_prior(text.prior, &durations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = prior.mu.shape();
    let eps = Tensor::randn(&shape, 1.0, &mut rng).scale(noise_scale);
    let u = prior.mu.add(prior.sigma().mul(g.constant(eps)));
    let z = model.gen.flow.inverse(&p, u)?;
    let emo = model.emotion(&p, target)?;
    let wave = model.gen.decoder.decode(&p, z, &spk, &emo)?.waveform;
    Ok((
        Waveform::new(wave.value().data().to_vec(), model.cfg.sample_rate)?,
        durations,
    ))
}

/// Dispatches on the request mode.
pub fn convert(
    state: &TrainState,
    req: &ConversionRequest,
    noise_scale: f64,
    seed: u64,
) -> Result<ConversionOutput> {
    match req.mode {
        ConversionMode::Fixed => {
            let audio = req.audio.as_ref().ok_or_else(|| {
                Error::InvalidRequest("fixed-length conversion needs source audio".into())
            })?;
            Ok(ConversionOutput {
                wave: convert_fl(state, audio, req.target_emotion)?,
                durations: None,
            })
        }
        ConversionMode::Variable => {
            let phonemes = req.phonemes.as_ref().ok_or_else(|| {
                Error::InvalidRequest("variable-length conversion needs phonemes".into())
            })?;
            let (wave, d) = convert_vl(
                state,
                phonemes,
                req.target_emotion,
                req.audio.as_ref(),
                req.speaker.as_deref(),
                noise_scale,
                seed,
            )?;
            Ok(ConversionOutput {
                wave,
                durations: Some(d),
            })
        }
    }
}

pub const EVAL_TARGETS: [EmotionLabel; 4] = [
    EmotionLabel::Angry,
    EmotionLabel::Happy,
    EmotionLabel::Sad,
    EmotionLabel::Surprise,
];

/// Mean MCD per neutral-to-target pair column.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub columns: BTreeMap<EmotionLabel, (f64, usize)>,
}

impl EvalReport {
    pub fn column_name(e: EmotionLabel) -> String {
        format!("Neu-{}", e.short())
    }

    pub fn to_tsv(&self) -> String {
        let mut head = vec!["model".to_string()];
        let mut row = vec![self.model.clone()];
        for e in EVAL_TARGETS {
            if let Some(&(mean, n)) = self.columns.get(&e) {
                head.push(Self::column_name(e));
                row.push(format!("{mean:.4} (n={n})"));
            }
        }
        format!("{}\n{}\n", head.join("\t"), row.join("\t"))
    }
}

/// Converts every neutral utterance to each target emotion and scores it
/// against the real target recording.
pub fn evaluate_corpus(
    state: &TrainState,
    manifest: &Manifest,
    mode: ConversionMode,
    model_name: &str,
) -> Result<EvalReport> {
    let vocab = &state.vocab;
    let frame = state.model.cfg.frame;
    let mut sums: BTreeMap<EmotionLabel, (f64, usize)> = BTreeMap::new();
    let sources: Vec<&UtteranceRecord> = manifest
        .records
        .iter()
        .filter(|r| r.emotion == EmotionLabel::Neutral)
        .collect();
    if sources.is_empty() {
        return Err(Error::MissingPair(
            "manifest has no neutral utterances".into(),
        ));
    }
    for src in sources {
        let audio = load_wav(&src.audio_path)?;
        let phonemes = vocab.encode(&src.phonemes)?;
        for target in EVAL_TARGETS {
            let reference = manifest
                .records
                .iter()
                .find(|r| r.id == src.id && r.emotion == target)
                .ok_or_else(|| {
                    Error::MissingPair(format!("{} has no {target} rendering", src.id))
                })?;
            let reference = load_wav(&reference.audio_path)?;
            let req = ConversionRequest {
                mode,
                audio: Some(audio.clone()),
                phonemes: Some(phonemes.clone()),
                speaker: Some(src.speaker.clone()),
                target_emotion: target,
            };
            let converted = convert(state, &req, 0.0, 0)?.wave;
            let d = mcd(&reference, &converted, frame)?;
            let e = sums.entry(target).or_insert((0.0, 0));
            e.0 += d;
            e.1 += 1;
        }
    }
    Ok(EvalReport {
        model: model_name.to_string(),
        columns: sums
            .into_iter()
            .map(|(k, (s, n))| (k, (s / n as f64, n)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::extract_f0;

    #[test]
    fn manifest_round_trip_and_errors() {
        let text =
            format!("{MANIFEST_HEADER}\nu1|a.wav|a b c|neutral|s0\nu1|b.wav|a b c|angry|s0\n");
        let m = Manifest::parse(&text, Path::new("/data")).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].audio_path, PathBuf::from("/data/a.wav"));
        let v = m.vocabulary();
        assert_eq!(v.len(), 4);
        assert!(Manifest::parse("u1|a.wav|a|neutral|s0\n", Path::new(".")).is_err());
        let bad = format!("{MANIFEST_HEADER}\nu1|a.wav|a|bored|s0\n");
        assert!(matches!(
            Manifest::parse(&bad, Path::new(".")),
            Err(Error::Manifest { line: 2, .. })
        ));
        let dup = format!("{MANIFEST_HEADER}\nu1|a.wav|a|sad|s0\nu1|b.wav|a|sad|s0\n");
        assert!(Manifest::parse(&dup, Path::new(".")).is_err());
        let short = format!("{MANIFEST_HEADER}\nu1|a.wav|a|sad\n");
        assert!(Manifest::parse(&short, Path::new(".")).is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_parallel() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthCorpusSpec::new(3, 42);
        let ma = generate_synthetic_corpus(&spec, a.path()).unwrap();
        generate_synthetic_corpus(&spec, b.path()).unwrap();
        for r in &ma.records {
            let rel = r.audio_path.strip_prefix(a.path()).unwrap();
            assert_eq!(
                fs::read(&r.audio_path).unwrap(),
                fs::read(b.path().join(rel)).unwrap()
            );
        }
        assert_eq!(
            fs::read(a.path().join("manifest.txt")).unwrap(),
            fs::read(b.path().join("manifest.txt")).unwrap()
        );
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &ma.records {
            *counts.entry(&r.id).or_default() += 1;
        }
        assert!(counts.values().all(|&c| c == 5));
    }

    #[test]
    fn angry_rendering_has_higher_pitch() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&SynthCorpusSpec::new(2, 7), dir.path()).unwrap();
        let cfg = FrameConfig::default();
        for id in ["utt000", "utt001"] {
            let f0 = |e: EmotionLabel| {
                let r = m
                    .records
                    .iter()
                    .find(|r| r.id == id && r.emotion == e)
                    .unwrap();
                extract_f0(&load_wav(&r.audio_path).unwrap(), cfg)
                    .mean_voiced()
                    .unwrap()
            };
            let (n, a, s) = (
                f0(EmotionLabel::Neutral),
                f0(EmotionLabel::Angry),
                f0(EmotionLabel::Sad),
            );
            assert!(a > n && n > s, "{a} {n} {s}");
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "FL".parse::<ConversionMode>().unwrap(),
            ConversionMode::Fixed
        );
        assert_eq!(
            "vl".parse::<ConversionMode>().unwrap(),
            ConversionMode::Variable
        );
        assert!("xl".parse::<ConversionMode>().is_err());
    }
}
