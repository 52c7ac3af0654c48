use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{error, info};

use emovc::checkpoint;
use emovc::runtime::{
    convert, evaluate_corpus, generate_synthetic_corpus, prepare, run_training, ConversionMode,
    ConversionRequest, Manifest, RunConfig, SynthCorpusSpec, DEFAULT_NOISE_SCALE,
};
use emovc::signal::{load_wav, save_wav, FrameConfig};
use emovc::tpp::EmotionLabel;
use emovc::Error;

#[derive(Parser)]
#[command(name = "emovc", version, about = "Emotional voice conversion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and cache features for every manifest entry.
    Prepare {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a parallel toy corpus with all five emotions.
    SynthCorpus {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a key-value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ablation flags.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Convert a WAV file or every entry of a manifest.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mode: ConversionMode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target_emotion: EmotionLabel,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NOISE_SCALE)]
        noise_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score neutral-to-emotion conversions against the parallel recordings.
    EvalMcd {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mode: ConversionMode,
        #[arg(long)]
        out: PathBuf,
        /// Row label in the report.
        #[arg(long)]
        name: Option<String>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::MissingCheckpoint(_)) => 3,
        Some(Error::Diverged { .. }) => 4,
        _ => 2,
    }
}

fn convert_cmd(
    ckpt: &Path,
    mode: ConversionMode,
    input: &Path,
    target: EmotionLabel,
    out: &Path,
    noise_scale: f64,
    seed: u64,
) -> Result<()> {
    let state = checkpoint::load(ckpt)?;
    fs::create_dir_all(out)?;
    let is_wav = input
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let mut jobs = Vec::new();
    if is_wav {
        let stem = input
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let req = ConversionRequest {
            mode,
            audio: Some(load_wav(input)?),
            phonemes: None,
            speaker: None,
            target_emotion: target,
        };
        jobs.push((stem, req));
    } else {
        let manifest = Manifest::load(input)?;
        for r in &manifest.records {
            let req = ConversionRequest {
                mode,
                audio: Some(load_wav(&r.audio_path)?),
                phonemes: Some(state.vocab.encode(&r.phonemes)?),
                speaker: Some(r.speaker.clone()),
                target_emotion: target,
            };
            jobs.push((r.key(), req));
        }
    }
    for (stem, req) in jobs {
        let result = convert(&state, &req, noise_scale, seed)
            .with_context(|| format!("converting {stem}"))?;
        let path = out.join(format!("{stem}_to_{target}_{mode}.wav"));
        save_wav(&result.wave, &path)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let n = prepare(&m, &out, FrameConfig::default())?;
            info!("cached features for {n} utterances in {}", out.display());
        }
        Command::SynthCorpus { n, seed, out } => {
            let m = generate_synthetic_corpus(&SynthCorpusSpec::new(n, seed), &out)?;
            info!("{} recordings written", m.records.len());
        }
        Command::Train { config, ablate } => {
            let mut run = RunConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            if let Some(list) = ablate {
                run.train.set("ablate", &list)?;
            }
            let state = run_training(&run)?;
            info!(
                "finished {} steps; checkpoint at {}",
                state.step,
                run.checkpoint_path().display()
            );
        }
        Command::Convert {
            ckpt,
            mode,
            input,
            target_emotion,
            out,
            noise_scale,
            seed,
        } => convert_cmd(&ckpt, mode, &input, target_emotion, &out, noise_scale, seed)?,
        Command::EvalMcd {
            ckpt,
            manifest,
            mode,
            out,
            name,
        } => {
            let state = checkpoint::load(&ckpt)?;
            let m = Manifest::load(&manifest)?;
            let name = name.unwrap_or_else(|| format!("emovc-{mode}"));
            let report = evaluate_corpus(&state, &m, mode, &name)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, report.to_tsv())?;
            print!("{}", report.to_tsv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
