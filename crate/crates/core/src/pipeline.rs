//! Two-stage training, synthesis from any prompt modality, and evaluation.
//!
//! Stage 1 trains the prompt encoders and the acoustic model jointly on
//! `L_Mel + L_Var + L_AMPE`. Stage 2 freezes all of that and trains the drift
//! net on the straight-path regression loss, conditioned on mels generated by
//! the frozen stage-1 model. Everything the networks see is z-scored with
//! corpus statistics that travel inside the stage-1 checkpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::acoustic::{parse_alignments, stage1_loss, uniform_durations, AcousticModel, VarianceTargets};
use crate::audio::{read_wav, MelSpectrogram, Waveform};
use crate::autograd::{Graph, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, SamplerConfig, SamplerKind};
use crate::dataset::{ManifestEntry, Split, StyleLabels};
use crate::error::{Error, Result};
use crate::evaluation::{
    mel_mcd, secs, Classifier, ItemMetrics, LoudnessEmotionClassifier, MeanMelEmbedder, PitchGenderClassifier,
    SpeakerEmbedder,
};
use crate::nn::{Adam, AdamConfig};
use crate::reflow::{gaussian, reflow_loss, sample_euler, sample_rk45, BoundDrift, DriftNet};
use crate::style_space::{
    ampe_loss, provider_vector, select_unified, Ampe, EmbeddingProvider, Modality, Phase, PromptKind, StubProvider,
    StyleEmbedding,
};
use crate::tensor::Tensor;
use crate::text::PhonemeSequence;
use crate::vocoder::{GriffinLim, MelFrontend, Vocoder};

/// The stub provider is a frozen stand-in for a pretrained encoder, so its
/// projection is fixed and independent of the training seed.
pub const PROVIDER_SEED: u64 = 0x5eed_0f_57ab;
/// Lower bound on per-bin mel standard deviation used for z-scoring.
pub const MEL_STD_FLOOR: f64 = 0.1;
pub const GRIFFIN_LIM_ITERS: usize = 48;

pub fn stub_provider(cfg: &ModelConfig) -> StubProvider {
    StubProvider::new(cfg.style.provider_dim, PROVIDER_SEED)
}

/// Z-scoring statistics for mels (per bin), voiced pitch and log energy.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub mel_mean: Vec<f64>,
    pub mel_std: Vec<f64>,
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn log_energy(e: f64) -> f64 {
    (e + 1e-4).ln()
}

impl CorpusStats {
    pub fn compute(features: &[RawFeatures]) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::invalid("no utterances to compute statistics from"))?;
        let n_mels = first.mel.cols();
        let mut mel_mean = Vec::with_capacity(n_mels);
        let mut mel_std = Vec::with_capacity(n_mels);
        for c in 0..n_mels {
            let col = features.iter().flat_map(|f| (0..f.mel.rows()).map(move |r| f.mel.get(r, c)));
            let (m, s) = mean_std(col);
            mel_mean.push(m);
            mel_std.push(s.max(MEL_STD_FLOOR));
        }
        let voiced = features.iter().flat_map(|f| f.pitch.iter().copied().filter(|&p| p > 0.0));
        let (pitch_mean, pitch_std) = mean_std(voiced);
        let (energy_mean, energy_std) = mean_std(features.iter().flat_map(|f| f.energy.iter().map(|&e| log_energy(e))));
        Ok(Self {
            mel_mean,
            mel_std,
            pitch_mean,
            pitch_std: pitch_std.max(1e-3),
            energy_mean,
            energy_std: energy_std.max(1e-3),
        })
    }

    pub fn normalize_mel(&self, mel: &Tensor) -> Tensor {
        Tensor::from_fn(mel.rows(), mel.cols(), |r, c| (mel.get(r, c) - self.mel_mean[c]) / self.mel_std[c])
    }

    pub fn denormalize_mel(&self, mel: &Tensor) -> Tensor {
        Tensor::from_fn(mel.rows(), mel.cols(), |r, c| mel.get(r, c) * self.mel_std[c] + self.mel_mean[c])
    }

    /// Unvoiced frames map to 0.
    pub fn normalize_pitch(&self, pitch: &[f64]) -> Vec<f64> {
        pitch
            .iter()
            .map(|&p| if p > 0.0 { (p - self.pitch_mean) / self.pitch_std } else { 0.0 })
            .collect()
    }

    pub fn normalize_energy(&self, energy: &[f64]) -> Vec<f64> {
        energy.iter().map(|&e| (log_energy(e) - self.energy_mean) / self.energy_std).collect()
    }

    pub fn write_to(&self, ck: &mut Checkpoint) {
        ck.tensors.insert("stats.mel_mean".into(), Tensor::row_vector(&self.mel_mean));
        ck.tensors.insert("stats.mel_std".into(), Tensor::row_vector(&self.mel_std));
        ck.tensors.insert(
            "stats.scalars".into(),
            Tensor::row_vector(&[self.pitch_mean, self.pitch_std, self.energy_mean, self.energy_std]),
        );
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let s = ck.tensor("stats.scalars")?.data();
        if s.len() != 4 {
            return Err(Error::Checkpoint("stats.scalars must hold 4 values".into()));
        }
        Ok(Self {
            mel_mean: ck.tensor("stats.mel_mean")?.data().to_vec(),
            mel_std: ck.tensor("stats.mel_std")?.data().to_vec(),
            pitch_mean: s[0],
            pitch_std: s[1],
            energy_mean: s[2],
            energy_std: s[3],
        })
    }
}

/// Front-end output for one clip before normalization.
#[derive(Clone, Debug)]
pub struct RawFeatures {
    pub mel: Tensor,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

pub fn extract_features(frontend: &MelFrontend, wav: &Waveform) -> Result<RawFeatures> {
    let mel = frontend.extract_mel(wav)?.frames;
    let (pitch, energy) = frontend.extract_pitch_energy(wav)?;
    Ok(RawFeatures { mel, pitch, energy })
}

/// A training-ready utterance; every array is already normalized.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub utt_id: String,
    pub labels: StyleLabels,
    pub split: Split,
    pub transcript: String,
    pub phonemes: PhonemeSequence,
    pub mel: Tensor,
    pub targets: VarianceTargets,
    pub image: Option<Tensor>,
    pub text: Tensor,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub stats: CorpusStats,
}

/// Bytes standing in for a face image. A `video.mp4#frame=N` reference whose
/// file cannot be decoded here contributes the reference string itself.
pub fn image_payload(path: &str) -> Result<Vec<u8>> {
    let p = Path::new(path);
    if p.exists() {
        return std::fs::read(p).map_err(|e| Error::io(p, e));
    }
    if path.contains("#frame=") {
        return Ok(path.as_bytes().to_vec());
    }
    Err(Error::invalid(format!("image prompt {path} not found")))
}

impl Corpus {
    /// Loads audio and prompts for `entries`. Statistics are computed from
    /// these entries unless `stats` is given (e.g. from a stage-1 checkpoint).
    pub fn load(
        entries: &[ManifestEntry],
        cfg: &ModelConfig,
        alignments: Option<&HashMap<String, Vec<usize>>>,
        stats: Option<CorpusStats>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("manifest has no entries"));
        }
        let frontend = MelFrontend::new(&cfg.frontend);
        let provider = stub_provider(cfg);
        let raw: Vec<RawFeatures> = entries
            .iter()
            .map(|e| extract_features(&frontend, &read_wav(Path::new(&e.audio_path), cfg.frontend.sample_rate)?))
            .collect::<Result<_>>()?;
        let stats = match stats {
            Some(s) => s,
            None => CorpusStats::compute(&raw)?,
        };
        let embed = |bytes: &[u8], kind| -> Result<Tensor> {
            let v = provider.embed(bytes, kind)?;
            Ok(Tensor::row_vector(&v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>()))
        };
        let mut utterances = Vec::with_capacity(entries.len());
        for (e, f) in entries.iter().zip(raw) {
            let phonemes = PhonemeSequence::from_text(&e.transcript)?;
            let frames = f.mel.rows();
            let durations = match alignments.and_then(|a| a.get(&e.utt_id)) {
                Some(d) => {
                    if d.len() != phonemes.len() || d.iter().sum::<usize>() != frames {
                        return Err(Error::invalid(format!(
                            "{}: alignment has {} tokens / {} frames, utterance has {} / {frames}",
                            e.utt_id,
                            d.len(),
                            d.iter().sum::<usize>(),
                            phonemes.len()
                        )));
                    }
                    d.clone()
                }
                None => uniform_durations(phonemes.len(), frames)?,
            };
            let targets = VarianceTargets::new(durations, stats.normalize_pitch(&f.pitch), stats.normalize_energy(&f.energy))?;
            let image = match &e.face_image_path {
                Some(p) => Some(embed(&image_payload(p)?, PromptKind::Image)?),
                None => None,
            };
            utterances.push(Utterance {
                utt_id: e.utt_id.clone(),
                labels: e.labels,
                split: e.split,
                transcript: e.transcript.clone(),
                phonemes,
                mel: stats.normalize_mel(&f.mel),
                targets,
                image,
                text: embed(e.prompt_text.as_bytes(), PromptKind::Text)?,
            });
        }
        Ok(Self { utterances, stats })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Reads an alignment file if present.
pub fn load_alignments(path: Option<&Path>) -> Result<Option<HashMap<String, Vec<usize>>>> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(Some(parse_alignments(&text)?))
        }
        None => Ok(None),
    }
}

/// Utterance indices for one step; a pure function of `(seed, step)` so a
/// resumed run sees the same batches as an uninterrupted one.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    sample(&mut rng, n, batch.min(n)).into_vec()
}

fn step_rng(seed: u64, salt: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(step);
    rng
}

/// Prompt encoders plus acoustic model sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub ampe: Ampe,
    pub acoustic: AcousticModel,
}

impl Stage1Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_mels = cfg.frontend.n_mels;
        let ampe = Ampe::new(store, n_mels, &cfg.style, &mut rng);
        let acoustic = AcousticModel::new(store, &cfg.acoustic, cfg.style.style_dim, n_mels, &mut rng)?;
        Ok(Self { ampe, acoustic })
    }
}

/// Mean losses over one batch.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Stage1Record {
    pub step: u64,
    pub total: f64,
    pub mel: f64,
    pub variance: f64,
    pub ampe: f64,
}

fn mse_term(g: &mut Graph, a: Var, target: Var) -> Var {
    let t = g.detach(target);
    let d = g.sub(a, t);
    let d2 = g.mul(d, d);
    g.mean(d2)
}

/// Batch objective on the tape, averaged over utterances. Also returns the
/// per-term means for logging.
pub fn stage1_batch_loss(
    g: &mut Graph,
    model: &Stage1Model,
    batch: &[&Utterance],
    speech_prompt_only: bool,
) -> Result<(Var, [f64; 3])> {
    let mut totals = Vec::with_capacity(batch.len());
    let mut terms = [0.0; 3];
    for u in batch {
        let mel = g.input(u.mel.clone());
        let e_s = model.ampe.speech.forward(g, mel)?;
        let ampe = if speech_prompt_only {
            g.input(Tensor::scalar(0.0))
        } else {
            let ti = g.input(u.text.clone());
            let e_t = model.ampe.text_adapter.forward(g, ti);
            match &u.image {
                Some(img) => {
                    let ii = g.input(img.clone());
                    let e_i = model.ampe.image_adapter.forward(g, ii);
                    ampe_loss(g, e_i, e_t, e_s)?
                }
                None => mse_term(g, e_t, e_s),
            }
        };
        let out = model.acoustic.forward_train(g, &u.phonemes, e_s, &u.targets)?;
        let l = stage1_loss(g, out.mel, &u.mel, &out.variance, &u.targets, ampe)?;
        terms[0] += g.value(l.mel).item();
        terms[1] += g.value(l.variance).item();
        terms[2] += g.value(l.ampe).item();
        totals.push(l.total);
    }
    let n = batch.len() as f64;
    let stacked = g.concat_rows(&totals);
    let mean = g.mean(stacked);
    Ok((mean, terms.map(|t| t / n)))
}

pub struct Stage1Trainer {
    pub cfg: ModelConfig,
    pub model: Stage1Model,
    pub store: ParamStore,
    pub stats: CorpusStats,
    pub opt: Adam,
    pub step: u64,
}

impl Stage1Trainer {
    pub fn new(cfg: &ModelConfig, stats: CorpusStats) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Stage1Model::new(&mut store, cfg)?;
        let mut adam = AdamConfig::with_lr(cfg.train.stage1_lr);
        adam.clip_norm = (cfg.train.grad_clip > 0.0).then_some(cfg.train.grad_clip);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            stats,
            opt: Adam::new(adam),
            step: 0,
        })
    }

    /// Continues a saved run: parameters, optimizer moments, step and statistics.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("stage") != Some("stage1") {
            return Err(Error::config("resume checkpoint is not a stage-1 checkpoint"));
        }
        let mut t = Self::new(&ck.config, CorpusStats::read_from(ck)?)?;
        ck.load_params(&mut t.store)?;
        ck.restore_adam("stage1", &mut t.opt, &t.store)?;
        t.step = ck.meta_u64("step").unwrap_or(0);
        Ok(t)
    }

    /// Initializes matching parameters from another checkpoint (e.g. speech-prompt-only pretraining).
    pub fn init_from(&mut self, ck: &Checkpoint) -> Result<usize> {
        ck.load_params_filtered(&mut self.store, |_| true, false)
    }

    pub fn train_step(&mut self, corpus: &Corpus) -> Result<Stage1Record> {
        let idx = batch_indices(self.cfg.seed, self.step, corpus.len(), self.cfg.train.batch_size);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus.utterances[i]).collect();
        let speech_only = self.cfg.train.speech_prompt_only;
        let tc = &self.cfg.train;
        self.opt.config.lr = tc.lr_schedule.lr(tc.stage1_lr, self.step, tc.stage1_steps);
        let (total, terms, grads) = {
            let mut g = Graph::new(&self.store).with_dropout(step_rng(self.cfg.seed, 0xd5, self.step));
            let (loss, terms) = stage1_batch_loss(&mut g, &self.model, &batch, speech_only)?;
            let total = g.value(loss).item();
            (total, terms, g.backward(loss).into_param_grads(&self.store))
        };
        let record = Stage1Record {
            step: self.step + 1,
            total,
            mel: terms[0],
            variance: terms[1],
            ampe: terms[2],
        };
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "stage 1 step {}: total {total}, mel {}, variance {}, ampe {}, gradient norm {}; batch {:?}",
                record.step,
                record.mel,
                record.variance,
                record.ampe,
                grads.global_norm(),
                batch.iter().map(|u| u.utt_id.as_str()).collect::<Vec<_>>()
            )));
        }
        self.opt.step(&mut self.store, &grads);
        self.step += 1;
        Ok(record)
    }

    /// Mean objective over the whole corpus with dropout off.
    pub fn evaluate_loss(&self, corpus: &Corpus) -> Result<Stage1Record> {
        let batch: Vec<&Utterance> = corpus.utterances.iter().collect();
        let mut g = Graph::inference(&self.store);
        let (loss, terms) = stage1_batch_loss(&mut g, &self.model, &batch, self.cfg.train.speech_prompt_only)?;
        Ok(Stage1Record {
            step: self.step,
            total: g.value(loss).item(),
            mel: terms[0],
            variance: terms[1],
            ampe: terms[2],
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.cfg.clone());
        ck.set_meta("stage", "stage1");
        ck.set_meta("step", self.step);
        ck.insert_params(&self.store);
        ck.insert_adam("stage1", &self.opt, &self.store);
        self.stats.write_to(&mut ck);
        ck
    }
}

/// A loaded, frozen stage-1 model.
pub struct Stage1Bundle {
    pub cfg: ModelConfig,
    pub model: Stage1Model,
    pub store: ParamStore,
    pub stats: CorpusStats,
}

impl Stage1Bundle {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("stage") != Some("stage1") {
            return Err(Error::config("not a stage-1 checkpoint"));
        }
        let mut store = ParamStore::new();
        let model = Stage1Model::new(&mut store, &ck.config)?;
        ck.load_params(&mut store)?;
        Ok(Self {
            cfg: ck.config.clone(),
            model,
            store,
            stats: CorpusStats::read_from(ck)?,
        })
    }

    /// Missing files are configuration errors: stage 2 cannot run without stage 1.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config(format!("stage-1 checkpoint {} does not exist", path.display())));
        }
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn speech_style(&self, normalized_mel: &Tensor) -> Result<StyleEmbedding> {
        self.model.ampe.speech.encode(&self.store, normalized_mel)
    }

    /// Teacher-forced stage-1 mel for a training utterance, conditioned on its own E_S.
    pub fn teacher_forced_mel(&self, u: &Utterance) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let mel = g.input(u.mel.clone());
        let e_s = self.model.ampe.speech.forward(&mut g, mel)?;
        let out = self.model.acoustic.forward_train(&mut g, &u.phonemes, e_s, &u.targets)?;
        Ok(g.value(out.mel).clone())
    }

    pub fn param_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (_, name, t) in self.store.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Stage2Record {
    pub step: u64,
    pub reflow: f64,
}

pub struct Stage2Trainer {
    pub cfg: ModelConfig,
    pub stage1: Stage1Bundle,
    pub net: DriftNet,
    pub store: ParamStore,
    pub opt: Adam,
    pub step: u64,
    /// Stage-1 mels per utterance, keyed by utt_id.
    conditions: BTreeMap<String, Tensor>,
}

impl Stage2Trainer {
    /// `cfg` supplies the refiner, sampler and optimizer settings; the model
    /// shapes of stage 1 come from its own checkpoint.
    pub fn new(cfg: &ModelConfig, stage1: Stage1Bundle) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2);
        let net = DriftNet::new(&mut store, "refiner", stage1.cfg.frontend.n_mels, &cfg.refiner, &mut rng)?;
        let mut adam = AdamConfig::with_lr(cfg.train.stage2_lr);
        adam.clip_norm = (cfg.train.grad_clip > 0.0).then_some(cfg.train.grad_clip);
        Ok(Self {
            cfg: cfg.clone(),
            stage1,
            net,
            store,
            opt: Adam::new(adam),
            step: 0,
            conditions: BTreeMap::new(),
        })
    }

    pub fn resume(ck: &Checkpoint, stage1: Stage1Bundle) -> Result<Self> {
        if ck.meta_str("stage") != Some("stage2") {
            return Err(Error::config("resume checkpoint is not a stage-2 checkpoint"));
        }
        let mut t = Self::new(&ck.config, stage1)?;
        ck.load_params(&mut t.store)?;
        ck.restore_adam("stage2", &mut t.opt, &t.store)?;
        t.step = ck.meta_u64("step").unwrap_or(0);
        Ok(t)
    }

    // The frozen stage-1 model is deterministic with dropout off, so its output
    // for an utterance is computed once and reused by every later batch.
    fn condition(&mut self, u: &Utterance) -> Result<Tensor> {
        if let Some(c) = self.conditions.get(&u.utt_id) {
            return Ok(c.clone());
        }
        let c = self.stage1.teacher_forced_mel(u)?;
        self.conditions.insert(u.utt_id.clone(), c.clone());
        Ok(c)
    }

    pub fn train_step(&mut self, corpus: &Corpus) -> Result<Stage2Record> {
        let idx = batch_indices(self.cfg.seed ^ 0x2, self.step, corpus.len(), self.cfg.train.batch_size);
        let mut rng = step_rng(self.cfg.seed, 0x2f, self.step);
        let tc = &self.cfg.train;
        self.opt.config.lr = tc.lr_schedule.lr(tc.stage2_lr, self.step, tc.stage2_steps);
        let mut items = Vec::with_capacity(idx.len());
        for &i in &idx {
            let u = &corpus.utterances[i];
            let c = self.condition(u)?;
            let x0 = gaussian(u.mel.rows(), u.mel.cols(), &mut rng);
            let t: f64 = rng.gen_range(0.0..1.0);
            items.push((x0, u.mel.clone(), c, t));
        }
        let (loss, grads) = {
            let mut g = Graph::new(&self.store);
            let mut terms = Vec::with_capacity(items.len());
            for (x0, x1, c, t) in &items {
                terms.push(reflow_loss(&mut g, &self.net, x0, x1, &[*t], c)?);
            }
            let stacked = g.concat_rows(&terms);
            let mean = g.mean(stacked);
            (g.value(mean).item(), g.backward(mean).into_param_grads(&self.store))
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "stage 2 step {}: reflow loss {loss}, gradient norm {}",
                self.step + 1,
                grads.global_norm()
            )));
        }
        self.opt.step(&mut self.store, &grads);
        self.step += 1;
        Ok(Stage2Record {
            step: self.step,
            reflow: loss,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.cfg.clone());
        ck.set_meta("stage", "stage2");
        ck.set_meta("step", self.step);
        ck.insert_params(&self.store);
        ck.insert_adam("stage2", &self.opt, &self.store);
        ck
    }
}

pub struct RefinerBundle {
    pub cfg: ModelConfig,
    pub net: DriftNet,
    pub store: ParamStore,
}

impl RefinerBundle {
    pub fn from_checkpoint(ck: &Checkpoint, n_mels: usize) -> Result<Self> {
        if ck.meta_str("stage") != Some("stage2") {
            return Err(Error::config("not a stage-2 checkpoint"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DriftNet::new(&mut store, "refiner", n_mels, &ck.config.refiner, &mut rng)?;
        ck.load_params(&mut store)?;
        Ok(Self {
            cfg: ck.config.clone(),
            net,
            store,
        })
    }

    pub fn field(&self) -> BoundDrift<'_> {
        BoundDrift {
            net: &self.net,
            store: &self.store,
        }
    }

    /// Transports Gaussian noise (seeded) to a refined normalized mel.
    pub fn refine(&self, c_mel: &Tensor, sampler: &SamplerConfig, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = gaussian(c_mel.rows(), c_mel.cols(), &mut rng);
        self.refine_from(&x0, c_mel, sampler)
    }

    pub fn refine_from(&self, x0: &Tensor, c_mel: &Tensor, sampler: &SamplerConfig) -> Result<Tensor> {
        let field = self.field();
        match sampler.sampler {
            SamplerKind::Rk45 => sample_rk45(&field, x0, c_mel, sampler.rtol, sampler.atol),
            SamplerKind::Euler => sample_euler(&field, x0, c_mel, sampler.euler_steps),
        }
    }
}

/// One of the three prompt modalities.
#[derive(Clone, Debug)]
pub enum Prompt {
    Speech(Waveform),
    Image(Vec<u8>),
    Text(String),
}

impl Prompt {
    pub fn modality(&self) -> Modality {
        match self {
            Prompt::Speech(_) => Modality::Speech,
            Prompt::Image(_) => Modality::Image,
            Prompt::Text(_) => Modality::Text,
        }
    }
}

/// Normalized and log-domain mels from both stages plus the waveform.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub style: StyleEmbedding,
    pub durations: Vec<usize>,
    pub stage1_norm: Tensor,
    pub refined_norm: Tensor,
    pub stage1_mel: MelSpectrogram,
    pub refined_mel: MelSpectrogram,
    pub wav: Waveform,
}

pub struct Synthesizer {
    pub stage1: Stage1Bundle,
    pub refiner: Option<RefinerBundle>,
    pub sampler: SamplerConfig,
    pub griffin_lim_iters: usize,
    provider: StubProvider,
    frontend: MelFrontend,
}

impl Synthesizer {
    pub fn new(stage1: Stage1Bundle, refiner: Option<RefinerBundle>) -> Self {
        let sampler = refiner.as_ref().map_or_else(|| stage1.cfg.sampler.clone(), |r| r.cfg.sampler.clone());
        Self {
            provider: stub_provider(&stage1.cfg),
            frontend: MelFrontend::new(&stage1.cfg.frontend),
            sampler,
            griffin_lim_iters: GRIFFIN_LIM_ITERS,
            stage1,
            refiner,
        }
    }

    pub fn load(stage1: &Path, stage2: Option<&Path>) -> Result<Self> {
        let s1 = Stage1Bundle::load(stage1)?;
        let refiner = match stage2 {
            Some(p) => Some(RefinerBundle::from_checkpoint(&Checkpoint::load(p)?, s1.cfg.frontend.n_mels)?),
            None => None,
        };
        Ok(Self::new(s1, refiner))
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.frontend
    }

    /// E_U for a prompt: the requested modality's embedding.
    pub fn style(&self, prompt: &Prompt) -> Result<StyleEmbedding> {
        let (e_s, e_i, e_t) = match prompt {
            Prompt::Speech(w) => {
                let mel = self.frontend.extract_mel(&w.resample(self.stage1.cfg.frontend.sample_rate))?;
                (Some(self.stage1.speech_style(&self.stage1.stats.normalize_mel(&mel.frames))?), None, None)
            }
            Prompt::Image(bytes) => (None, Some(self.adapter_style(bytes, PromptKind::Image)?), None),
            Prompt::Text(t) => {
                if t.trim().is_empty() {
                    return Err(Error::invalid("text prompt is empty"));
                }
                (None, None, Some(self.adapter_style(t.as_bytes(), PromptKind::Text)?))
            }
        };
        select_unified(e_s.as_ref(), e_i.as_ref(), e_t.as_ref(), Phase::Infer, prompt.modality())
    }

    fn adapter_style(&self, raw: &[u8], kind: PromptKind) -> Result<StyleEmbedding> {
        crate::style_space::encode_adapter_prompt(
            raw,
            kind,
            &self.provider,
            self.stage1.model.ampe.adapter(kind),
            &self.stage1.store,
        )
    }

    /// Adapter output for a provider vector already computed (as stored in a corpus).
    pub fn adapter_style_from_vector(&self, v: &Tensor, kind: PromptKind) -> Result<StyleEmbedding> {
        let adapter = self.stage1.model.ampe.adapter(kind);
        let mut g = Graph::inference(&self.stage1.store);
        let x = g.input(v.clone());
        let y = adapter.forward(&mut g, x);
        let modality = match kind {
            PromptKind::Text => Modality::Text,
            PromptKind::Image => Modality::Image,
        };
        StyleEmbedding::new(g.value(y).data().to_vec(), modality)
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        &self.provider
    }

    /// Checks that the provider and adapters agree on widths.
    pub fn check_provider(&self) -> Result<()> {
        provider_vector(b"probe", PromptKind::Text, &self.provider, &self.stage1.model.ampe.text_adapter).map(|_| ())
    }

    pub fn synthesize(&self, text: &str, prompt: &Prompt, seed: u64) -> Result<Synthesis> {
        let style = self.style(prompt)?;
        self.synthesize_with_style(text, style, seed)
    }

    pub fn synthesize_with_style(&self, text: &str, style: StyleEmbedding, seed: u64) -> Result<Synthesis> {
        let seq = PhonemeSequence::from_text(text)?;
        let (stage1_norm, durations) = self.stage1.model.acoustic.infer(&self.stage1.store, &seq, &style)?;
        let refined_norm = match &self.refiner {
            Some(r) => r.refine(&stage1_norm, &self.sampler, seed)?,
            None => stage1_norm.clone(),
        };
        let fe = &self.stage1.cfg.frontend;
        let stats = &self.stage1.stats;
        let stage1_mel = MelSpectrogram::new(stats.denormalize_mel(&stage1_norm), fe.sample_rate, fe.hop_length)?;
        let refined_mel = MelSpectrogram::new(stats.denormalize_mel(&refined_norm), fe.sample_rate, fe.hop_length)?;
        let mut wav = GriffinLim::new(fe, self.griffin_lim_iters).vocode(&refined_mel)?;
        wav.limit_peak();
        Ok(Synthesis {
            style,
            durations,
            stage1_norm,
            refined_norm,
            stage1_mel,
            refined_mel,
            wav,
        })
    }
}

/// Per-emotion mean loudness of reference clips, for the loudness classifier.
pub fn emotion_references(wavs: &[(Waveform, String)]) -> LoudnessEmotionClassifier {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (w, label) in wavs {
        let e = acc.entry(label.clone()).or_default();
        e.0 += LoudnessEmotionClassifier::rms_db(w);
        e.1 += 1;
    }
    LoudnessEmotionClassifier {
        references: acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    }
}

/// Synthesizes every entry with the requested prompt modality and scores it
/// against its own recording. Speech prompts use the entry's own audio.
pub fn evaluate_entries(
    synth: &Synthesizer,
    entries: &[ManifestEntry],
    modality: Modality,
    emotion: &LoudnessEmotionClassifier,
    seed: u64,
) -> Result<Vec<ItemMetrics>> {
    let fe = &synth.stage1.cfg.frontend;
    let embedder = MeanMelEmbedder::new(fe);
    let gender = PitchGenderClassifier::new(fe);
    let mut items = Vec::with_capacity(entries.len());
    for e in entries {
        let reference = read_wav(Path::new(&e.audio_path), fe.sample_rate)?;
        let prompt = match modality {
            Modality::Speech => Prompt::Speech(reference.clone()),
            Modality::Text => Prompt::Text(e.prompt_text.clone()),
            Modality::Image => Prompt::Image(image_payload(
                e.face_image_path
                    .as_deref()
                    .ok_or_else(|| Error::MissingPrompt(format!("{} has no face image", e.utt_id)))?,
            )?),
        };
        let s = synth.synthesize(&e.transcript, &prompt, seed)?;
        let ref_mel = synth.frontend().extract_mel(&reference)?;
        let verdict = |c: &dyn Classifier, truth: &str| match c.classify(&s.wav) {
            Ok(label) => Some(label == truth),
            Err(err) => {
                log::warn!("{}: classifier failed: {err}", e.utt_id);
                Some(false)
            }
        };
        items.push(ItemMetrics {
            utt_id: e.utt_id.clone(),
            mcd: mel_mcd(&ref_mel.frames, &s.refined_mel.frames)?,
            secs: secs(&embedder.embed(&reference)?, &embedder.embed(&s.wav)?)?,
            emotion_correct: verdict(emotion, e.labels.emotion.as_str()),
            gender_correct: verdict(&gender, e.labels.gender.as_str()),
        });
    }
    Ok(items)
}
