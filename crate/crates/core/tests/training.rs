//! Training-loop contracts on a 16-clip synthetic corpus. Stage 1 is trained
//! once and shared; each test works on its own copies.

use std::path::PathBuf;
use std::sync::OnceLock;

use mmtts_core::checkpoint::Checkpoint;
use mmtts_core::config::{ModelConfig, SamplerConfig, SamplerKind};
use mmtts_core::dataset::{build_manifest, BuildOptions, ManifestEntry, SidecarTranscriber};
use mmtts_core::pipeline::{load_alignments, Corpus, Prompt, RefinerBundle, Stage1Bundle, Stage1Trainer, Stage2Trainer, Synthesizer};
use mmtts_core::toy::{generate_toy_corpus, ToyCorpusConfig};
use mmtts_core::Error;

const STAGE1_STEPS: usize = 500;

struct Shared {
    _dir: tempfile::TempDir,
    cfg: ModelConfig,
    entries: Vec<ManifestEntry>,
    corpus: Corpus,
    mel_losses: Vec<f64>,
    stage1: Checkpoint,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::toy();
        cfg.train.stage1_steps = STAGE1_STEPS;
        let root = dir.path().join("toy");
        generate_toy_corpus(&root, &ToyCorpusConfig::new(16, 3), &cfg.frontend).unwrap();
        let entries = build_manifest(&root, &BuildOptions::default(), &SidecarTranscriber).unwrap().entries;
        let al = load_alignments(Some(&root.join("alignments.txt"))).unwrap();
        let corpus = Corpus::load(&entries, &cfg, al.as_ref(), None).unwrap();
        let mut tr = Stage1Trainer::new(&cfg, corpus.stats.clone()).unwrap();
        let mel_losses = (0..STAGE1_STEPS).map(|_| tr.train_step(&corpus).unwrap().mel).collect();
        Shared {
            stage1: tr.checkpoint(),
            _dir: dir,
            cfg,
            entries,
            corpus,
            mel_losses,
        }
    })
}

fn window_means(xs: &[f64], w: usize) -> Vec<f64> {
    xs.chunks(w).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn stage1_mel_loss_falls_every_100_steps() {
    let s = shared();
    let means = window_means(&s.mel_losses, 100);
    assert_eq!(means.len(), 5);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "{means:?}");
    }
}

#[test]
fn stage1_first_step_and_checkpoint_are_deterministic() {
    let s = shared();
    let run = || {
        let mut tr = Stage1Trainer::new(&s.cfg, s.corpus.stats.clone()).unwrap();
        let first = tr.train_step(&s.corpus).unwrap();
        for _ in 0..3 {
            tr.train_step(&s.corpus).unwrap();
        }
        (first.total.to_bits(), tr.checkpoint().to_bytes().unwrap())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn resume_continues_the_run() {
    let s = shared();
    let mut tr = Stage1Trainer::new(&s.cfg, s.corpus.stats.clone()).unwrap();
    for _ in 0..20 {
        tr.train_step(&s.corpus).unwrap();
    }
    let before = tr.evaluate_loss(&s.corpus).unwrap().total;
    let bytes = tr.checkpoint().to_bytes().unwrap();
    let mut resumed = Stage1Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, 20);
    let after = resumed.evaluate_loss(&s.corpus).unwrap().total;
    assert!((after - before).abs() <= 0.05 * before, "{before} -> {after}");
    // The next step is the same one the uninterrupted run would take.
    let a = tr.train_step(&s.corpus).unwrap();
    let b = resumed.train_step(&s.corpus).unwrap();
    assert_eq!(a, b);
    assert!((b.total - before).abs() <= 0.05 * before);
}

#[test]
fn speech_prompt_only_checkpoint_initializes_full_training() {
    let s = shared();
    let mut cfg = s.cfg.clone();
    cfg.train.speech_prompt_only = true;
    let mut pre = Stage1Trainer::new(&cfg, s.corpus.stats.clone()).unwrap();
    let r = pre.train_step(&s.corpus).unwrap();
    assert_eq!(r.ampe, 0.0);
    let mut full = Stage1Trainer::new(&s.cfg, s.corpus.stats.clone()).unwrap();
    let n = full.init_from(&pre.checkpoint()).unwrap();
    assert_eq!(n, full.store.len());
    assert!(full.train_step(&s.corpus).unwrap().ampe > 0.0);
}

#[test]
fn stage2_keeps_stage1_frozen_and_halves_the_reflow_loss() {
    let s = shared();
    let mut cfg = s.cfg.clone();
    cfg.train.stage2_steps = 2000;
    let bundle = Stage1Bundle::from_checkpoint(&s.stage1).unwrap();
    let digest = bundle.param_digest();
    let mut tr = Stage2Trainer::new(&cfg, bundle).unwrap();
    let losses: Vec<f64> = (0..cfg.train.stage2_steps).map(|_| tr.train_step(&s.corpus).unwrap().reflow).collect();
    assert_eq!(tr.stage1.param_digest(), digest);
    let means = window_means(&losses, 100);
    let (first, last) = (means[0], *means.last().unwrap());
    assert!(last <= 0.5 * first, "reflow loss {first} -> {last}");

    let ck = tr.checkpoint();
    let stage1 = Stage1Bundle::from_checkpoint(&s.stage1).unwrap();
    let mut synth = Synthesizer::new(stage1, Some(RefinerBundle::from_checkpoint(&ck, cfg.frontend.n_mels).unwrap()));
    let text = &s.entries[0].transcript;
    let happy = synth.synthesize(text, &Prompt::Text("A woman says with a extremely happy tone".into()), 3).unwrap();
    let sad = synth.synthesize(text, &Prompt::Text("A man says with a slightly sad tone".into()), 3).unwrap();
    assert_eq!(happy.refined_mel.frames.shape(), happy.stage1_mel.frames.shape());
    assert_eq!(happy.wav.sample_rate, 16_000);
    let same_len = happy.refined_norm.shape() == sad.refined_norm.shape();
    assert!(!same_len || happy.refined_norm.sub(&sad.refined_norm).norm() > 0.0);

    synth.sampler = SamplerConfig {
        sampler: SamplerKind::Euler,
        euler_steps: 1,
        ..SamplerConfig::default()
    };
    let euler = synth.synthesize(text, &Prompt::Text("A woman says with a extremely happy tone".into()), 3).unwrap();
    assert_eq!(euler.stage1_norm, happy.stage1_norm);
}

#[test]
fn stage2_loss_curve_is_reproducible() {
    let s = shared();
    let curve = || {
        let mut tr = Stage2Trainer::new(&s.cfg, Stage1Bundle::from_checkpoint(&s.stage1).unwrap()).unwrap();
        (0..5).map(|_| tr.train_step(&s.corpus).unwrap().reflow.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(curve(), curve());
}

#[test]
fn stage2_without_stage1_is_a_config_error() {
    let missing = PathBuf::from("/nonexistent/stage1.ck");
    assert!(matches!(Stage1Bundle::load(&missing), Err(Error::Config(_))));
    assert!(matches!(Synthesizer::load(&missing, None), Err(Error::Config(_))));
}
