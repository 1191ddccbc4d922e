use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mmtts_core::audio::{read_mel_json, read_wav, write_mel_json, write_wav};
use mmtts_core::checkpoint::Checkpoint;
use mmtts_core::config::{ModelConfig, SamplerKind};
use mmtts_core::dataset::{build_manifest, read_manifest, write_manifest, BuildOptions, ManifestEntry, SidecarTranscriber, Split};
use mmtts_core::evaluation::MetricReport;
use mmtts_core::pipeline::{
    emotion_references, evaluate_entries, image_payload, load_alignments, Corpus, Prompt, Stage1Bundle, Stage1Trainer,
    Stage2Trainer, Synthesizer,
};
use mmtts_core::plot::plot_mel;
use mmtts_core::style_space::Modality;
use mmtts_core::toy::{generate_toy_corpus, ToyCorpusConfig};
use mmtts_core::vocoder::MelFrontend;
use mmtts_core::Error;

#[derive(Parser)]
#[command(name = "mmtts", version, about = "Multi-modal prompted TTS: training, synthesis, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

impl SplitArg {
    fn keep(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Dev => s == Split::Dev,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Speech,
    Image,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Rk45,
    Euler,
}

#[derive(Subcommand)]
enum Command {
    /// Scan `<speaker>/<emotion>/<level>/<clip>.wav` and write a JSONL manifest.
    BuildManifest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        frames_per_clip: usize,
        #[arg(long)]
        no_paraphrase: bool,
        #[arg(long, default_value_t = 0.3)]
        review_threshold: f64,
    },
    /// Write a config file (full-size defaults, or the small toy model).
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        toy: bool,
    },
    /// Generate the synthetic labeled corpus used by tests and demos.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        clips: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// The six-clip layout of the bundled test fixture (ignores --clips/--seed).
        #[arg(long)]
        fixture: bool,
    },
    /// Train the acoustic model, style encoder and prompt adapters.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Lines of `utt_id dur1 dur2 ...`; uniform durations when absent.
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Initialize matching parameters from a checkpoint, e.g. a speech-prompt-only run.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Train with speech prompts only (no adapters, no alignment loss).
        #[arg(long)]
        speech_prompt_only: bool,
        #[arg(long, default_value_t = 500)]
        save_every: usize,
        /// Per-step loss log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the mel refiner on a frozen stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        save_every: usize,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Synthesize `--text` with exactly one of --wav / --image / --prompt-text.
    Synthesize {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        text: String,
        #[arg(long, group = "prompt")]
        wav: Option<PathBuf>,
        #[arg(long, group = "prompt")]
        image: Option<PathBuf>,
        #[arg(long, group = "prompt")]
        prompt_text: Option<String>,
        /// Output WAV; mels go next to it as `<stem>.stage1.mel.json` and `<stem>.refined.mel.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        #[arg(long)]
        euler_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthesize a manifest split and report MCD, SECS and style accuracy.
    Evaluate {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ModalityArg::Speech)]
        modality: ModalityArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// JSONL report: one line per item, then a summary line.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a mel (`.mel.json`, or a WAV analysed on the fly) as a PNG.
    PlotMel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::BuildManifest {
            root,
            out,
            seed,
            frames_per_clip,
            no_paraphrase,
            review_threshold,
        } => {
            let opts = BuildOptions {
                seed,
                frames_per_clip,
                paraphrase: !no_paraphrase,
                review_threshold,
            };
            let build = build_manifest(&root, &opts, &SidecarTranscriber)?;
            for w in &build.warnings {
                log::warn!("{w}");
            }
            write_manifest(&out, &build.entries)?;
            println!("{}", serde_json::to_string_pretty(&build.summary)?);
        }
        Command::InitConfig { out, toy } => {
            let cfg = if toy { ModelConfig::toy() } else { ModelConfig::default() };
            cfg.save(&out)?;
        }
        Command::MakeToyCorpus { out, clips, seed, fixture } => {
            let cfg = if fixture { ToyCorpusConfig::fixture() } else { ToyCorpusConfig::new(clips, seed) };
            let made = generate_toy_corpus(&out, &cfg, &ModelConfig::default().frontend)?;
            println!("wrote {} clips under {}", made.len(), out.display());
        }
        Command::TrainStage1 {
            config,
            manifest,
            alignments,
            out,
            steps,
            split,
            resume,
            init,
            speech_prompt_only,
            save_every,
            log,
        } => train_stage1(Stage1Args {
            config,
            manifest,
            alignments,
            out,
            steps,
            split,
            resume,
            init,
            speech_prompt_only,
            save_every,
            log,
        })?,
        Command::TrainStage2 {
            config,
            manifest,
            stage1,
            alignments,
            out,
            steps,
            split,
            resume,
            save_every,
            log,
        } => train_stage2(&config, &manifest, &stage1, alignments.as_deref(), &out, steps, split, resume.as_deref(), save_every, log)?,
        Command::Synthesize {
            stage1,
            stage2,
            text,
            wav,
            image,
            prompt_text,
            out,
            sampler,
            euler_steps,
            seed,
        } => {
            let mut synth = Synthesizer::load(&stage1, stage2.as_deref())?;
            apply_sampler(&mut synth, sampler, euler_steps);
            let prompt = match (wav, image, prompt_text) {
                (Some(p), None, None) => Prompt::Speech(read_wav(&p, synth.stage1.cfg.frontend.sample_rate)?),
                (None, Some(p), None) => Prompt::Image(image_payload(&p.to_string_lossy())?),
                (None, None, Some(t)) => Prompt::Text(t),
                _ => bail!(Error::MissingPrompt("give exactly one of --wav, --image, --prompt-text".into())),
            };
            let s = synth.synthesize(&text, &prompt, seed)?;
            write_wav(&out, &s.wav)?;
            let stem = out.with_extension("");
            write_mel_json(&PathBuf::from(format!("{}.stage1.mel.json", stem.display())), &s.stage1_mel)?;
            write_mel_json(&PathBuf::from(format!("{}.refined.mel.json", stem.display())), &s.refined_mel)?;
            println!(
                "{}: {} frames, {:.2} s, durations {:?}",
                out.display(),
                s.refined_mel.n_frames(),
                s.wav.duration_secs(),
                s.durations
            );
        }
        Command::Evaluate {
            stage1,
            stage2,
            manifest,
            modality,
            split,
            out,
            sampler,
            seed,
        } => {
            let mut synth = Synthesizer::load(&stage1, stage2.as_deref())?;
            apply_sampler(&mut synth, sampler, None);
            let all = read_manifest(&manifest)?;
            let entries = select(&all, split)?;
            let sr = synth.stage1.cfg.frontend.sample_rate;
            // Emotion references come from the training split's own recordings.
            let refs = all
                .iter()
                .filter(|e| e.split == Split::Train)
                .map(|e| Ok((read_wav(Path::new(&e.audio_path), sr)?, e.labels.emotion.as_str().to_string())))
                .collect::<Result<Vec<_>>>()?;
            let refs = if refs.is_empty() {
                entries
                    .iter()
                    .map(|e| Ok((read_wav(Path::new(&e.audio_path), sr)?, e.labels.emotion.as_str().to_string())))
                    .collect::<Result<Vec<_>>>()?
            } else {
                refs
            };
            let modality = match modality {
                ModalityArg::Speech => Modality::Speech,
                ModalityArg::Image => Modality::Image,
                ModalityArg::Text => Modality::Text,
            };
            let items = evaluate_entries(&synth, &entries, modality, &emotion_references(&refs), seed)?;
            let report = MetricReport::aggregate(&items)?;
            fs::write(&out, report.to_jsonl(&items)?).with_context(|| out.display().to_string())?;
            print!("{}", report.table());
            if report.has_nan() {
                eprintln!("error: a metric is NaN");
                return Ok(ExitCode::from(2));
            }
        }
        Command::PlotMel { input, out } => {
            let name = input.to_string_lossy().to_lowercase();
            let mel = if name.ends_with(".wav") {
                let fe = ModelConfig::default().frontend;
                MelFrontend::new(&fe).extract_mel(&read_wav(&input, fe.sample_rate)?)?
            } else {
                read_mel_json(&input)?
            };
            plot_mel(&mel.frames, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_sampler(synth: &mut Synthesizer, sampler: Option<SamplerArg>, euler_steps: Option<usize>) {
    if let Some(s) = sampler {
        synth.sampler.sampler = match s {
            SamplerArg::Rk45 => SamplerKind::Rk45,
            SamplerArg::Euler => SamplerKind::Euler,
        };
    }
    if let Some(n) = euler_steps {
        synth.sampler.euler_steps = n;
    }
}

fn select(entries: &[ManifestEntry], split: SplitArg) -> Result<Vec<ManifestEntry>> {
    let picked: Vec<ManifestEntry> = entries.iter().filter(|e| split.keep(e.split)).cloned().collect();
    if picked.is_empty() {
        bail!(Error::InvalidInput("no manifest entries in the requested split (try --split all)".into()));
    }
    Ok(picked)
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())))
}

/// Writes `<out>.diverged.json` next to the checkpoint with the failing step and recent losses.
fn write_snapshot(out: &Path, stage: &str, err: &Error, recent: &[serde_json::Value]) -> Result<PathBuf> {
    let path = PathBuf::from(format!("{}.diverged.json", out.display()));
    let snap = serde_json::json!({
        "stage": stage,
        "error": err.to_string(),
        "recent": recent,
    });
    fs::write(&path, serde_json::to_string_pretty(&snap)?).with_context(|| path.display().to_string())?;
    Ok(path)
}

struct Stage1Args {
    config: PathBuf,
    manifest: PathBuf,
    alignments: Option<PathBuf>,
    out: PathBuf,
    steps: Option<usize>,
    split: SplitArg,
    resume: Option<PathBuf>,
    init: Option<PathBuf>,
    speech_prompt_only: bool,
    save_every: usize,
    log: Option<PathBuf>,
}

fn train_stage1(a: Stage1Args) -> Result<()> {
    let mut cfg = ModelConfig::load(&a.config)?;
    if a.speech_prompt_only {
        cfg.train.speech_prompt_only = true;
    }
    if let Some(n) = a.steps {
        cfg.train.stage1_steps = n;
    }
    let entries = select(&read_manifest(&a.manifest)?, a.split)?;
    let alignments = load_alignments(a.alignments.as_deref())?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut t = Stage1Trainer::resume(&ck)?;
            t.cfg.train.stage1_steps = cfg.train.stage1_steps;
            t.cfg.train.speech_prompt_only = cfg.train.speech_prompt_only;
            t
        }
        None => {
            let stats = Corpus::load(&entries, &cfg, alignments.as_ref(), None)?.stats;
            Stage1Trainer::new(&cfg, stats)?
        }
    };
    let corpus = Corpus::load(&entries, &trainer.cfg, alignments.as_ref(), Some(trainer.stats.clone()))?;
    if let Some(p) = &a.init {
        let n = trainer.init_from(&Checkpoint::load(p)?)?;
        log::info!("initialized {n} tensors from {}", p.display());
    }
    let log_file = log_path(&a.out, a.log);
    let mut log_w = open_log(&log_file, a.resume.is_some())?;
    let total = trainer.cfg.train.stage1_steps as u64;
    let every = trainer.cfg.train.log_every.max(1) as u64;
    let mut recent = Vec::new();
    while trainer.step < total {
        match trainer.train_step(&corpus) {
            Ok(r) => {
                let line = serde_json::to_value(r)?;
                writeln!(log_w, "{line}")?;
                push_recent(&mut recent, line);
                if r.step % every == 0 || r.step == total {
                    log::info!(
                        "stage1 step {} total {:.4} mel {:.4} var {:.4} ampe {:.4}",
                        r.step,
                        r.total,
                        r.mel,
                        r.variance,
                        r.ampe
                    );
                }
                if a.save_every > 0 && r.step % a.save_every as u64 == 0 {
                    trainer.checkpoint().save(&a.out)?;
                }
            }
            Err(e @ Error::Diverged(_)) => {
                let snap = write_snapshot(&a.out, "stage1", &e, &recent)?;
                trainer.checkpoint().save(&PathBuf::from(format!("{}.diverged.ck", a.out.display())))?;
                bail!("{e}; snapshot at {}", snap.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    trainer.checkpoint().save(&a.out)?;
    log::info!("saved {}", a.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_stage2(
    config: &Path,
    manifest: &Path,
    stage1: &Path,
    alignments: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    split: SplitArg,
    resume: Option<&Path>,
    save_every: usize,
    log: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = ModelConfig::load(config)?;
    if let Some(n) = steps {
        cfg.train.stage2_steps = n;
    }
    let s1 = Stage1Bundle::load(stage1)?;
    let entries = select(&read_manifest(manifest)?, split)?;
    let corpus = Corpus::load(&entries, &s1.cfg, load_alignments(alignments)?.as_ref(), Some(s1.stats.clone()))?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Stage2Trainer::resume(&Checkpoint::load(p)?, s1)?;
            t.cfg.train.stage2_steps = cfg.train.stage2_steps;
            t
        }
        None => Stage2Trainer::new(&cfg, s1)?,
    };
    let mut log_w = open_log(&log_path(out, log), resume.is_some())?;
    let total = trainer.cfg.train.stage2_steps as u64;
    let every = trainer.cfg.train.log_every.max(1) as u64;
    let mut recent = Vec::new();
    while trainer.step < total {
        match trainer.train_step(&corpus) {
            Ok(r) => {
                let line = serde_json::to_value(r)?;
                writeln!(log_w, "{line}")?;
                push_recent(&mut recent, line);
                if r.step % every == 0 || r.step == total {
                    log::info!("stage2 step {} reflow {:.4}", r.step, r.reflow);
                }
                if save_every > 0 && r.step % save_every as u64 == 0 {
                    trainer.checkpoint().save(out)?;
                }
            }
            Err(e @ Error::Diverged(_)) => {
                let snap = write_snapshot(out, "stage2", &e, &recent)?;
                bail!("{e}; snapshot at {}", snap.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    trainer.checkpoint().save(out)?;
    log::info!("saved {}", out.display());
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Result<std::io::BufWriter<fs::File>> {
    let f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| path.display().to_string())?;
    Ok(std::io::BufWriter::new(f))
}

fn push_recent(recent: &mut Vec<serde_json::Value>, v: serde_json::Value) {
    const KEEP: usize = 20;
    if recent.len() == KEEP {
        recent.remove(0);
    }
    recent.push(v);
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
