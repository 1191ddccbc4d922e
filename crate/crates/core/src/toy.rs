//! Synthetic labeled corpus in the on-disk layout `build_manifest` expects.
//!
//! Each character is a short harmonic tone whose spectral envelope depends on
//! the character. The speaker sets F0 (male voices sit below 150 Hz, female
//! above 175 Hz), the emotion shifts pitch, loudness and brightness, and the
//! level scales how far those shifts go. Durations are a function of the
//! character and emotion, so the emitted alignment file is exact.

use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acoustic::format_alignment;
use crate::audio::{write_wav, Waveform};
use crate::config::FrontendConfig;
use crate::dataset::{Emotion, Gender, StyleLabels};
use crate::error::{Error, Result};
use crate::text::{self, PhonemeSequence};

pub const SENTENCES: [&str; 8] = [
    "a cat sat.",
    "go home now",
    "we ran far!",
    "it is red",
    "she hid it",
    "hop on up",
    "dogs bark",
    "tea time?",
];

pub const SPEAKERS: [(&str, Gender, f64); 4] = [
    ("M01", Gender::Male, 112.0),
    ("M02", Gender::Male, 128.0),
    ("W01", Gender::Female, 200.0),
    ("W02", Gender::Female, 222.0),
];

/// Pitch ratio, loudness offset (dB) and spectral tilt per emotion at level 3.
fn emotion_profile(e: Emotion) -> (f64, f64, f64) {
    match e {
        Emotion::Neutral => (1.0, 0.0, 0.0),
        Emotion::Angry => (1.08, 8.0, 0.6),
        Emotion::Contempt => (0.96, -3.0, -0.2),
        Emotion::Disgusted => (0.92, -5.0, -0.4),
        Emotion::Fear => (1.10, -8.0, 0.3),
        Emotion::Happy => (1.12, 4.0, 0.4),
        Emotion::Sad => (0.88, -11.0, -0.6),
        Emotion::Surprised => (1.06, 11.0, 0.2),
    }
}

#[derive(Clone, Debug)]
pub struct ToyCorpusConfig {
    pub clips: usize,
    pub seed: u64,
    /// Clip indices that get a `.frames` sidecar instead of a face PNG.
    pub video_clips: Vec<usize>,
    /// Clip indices whose ASR hypothesis is unrelated noise.
    pub garbled_clips: Vec<usize>,
}

impl ToyCorpusConfig {
    pub fn new(clips: usize, seed: u64) -> Self {
        Self {
            clips,
            seed,
            video_clips: Vec::new(),
            garbled_clips: Vec::new(),
        }
    }

    /// The six-clip layout of the bundled fixture.
    pub fn fixture() -> Self {
        Self {
            clips: 6,
            seed: 11,
            video_clips: vec![1, 4],
            garbled_clips: vec![5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyClip {
    pub utt_id: String,
    pub speaker: String,
    pub labels: StyleLabels,
    pub sentence: String,
    pub durations: Vec<usize>,
    pub wav_path: PathBuf,
}

fn frames_for(symbol: usize, emotion: Emotion) -> usize {
    let slow = usize::from(matches!(emotion, Emotion::Sad | Emotion::Disgusted));
    2 + symbol % 3 + slow
}

/// Renders one utterance; returns the waveform and per-character frame counts.
pub fn render_utterance(
    sentence: &str,
    f0_base: f64,
    labels: &StyleLabels,
    fe: &FrontendConfig,
) -> Result<(Waveform, Vec<usize>)> {
    let seq = PhonemeSequence::from_text(sentence)?;
    let (ratio, db, tilt) = emotion_profile(labels.emotion);
    let k = f64::from(labels.emotion_level) / 3.0;
    let f0 = f0_base * (1.0 + (ratio - 1.0) * k);
    let amp = 0.12 * 10f64.powf(db * k / 20.0);
    let tilt = tilt * k;
    let sr = f64::from(fe.sample_rate);
    let hop = fe.hop_length;

    let durations: Vec<usize> = seq.ids().iter().map(|&s| frames_for(s, labels.emotion)).collect();
    let mut samples = Vec::with_capacity(durations.iter().sum::<usize>() * hop);
    let mut phase = 0.0;
    let ramp = hop / 2;
    for (&sym, &d) in seq.ids().iter().zip(&durations) {
        let n = d * hop;
        let silent = text::symbol(sym) == Some(' ') || text::symbol(sym).is_some_and(|c| c.is_ascii_punctuation());
        // Character-specific formant centre and a small intonation offset.
        let formant = 350.0 + ((sym * 389) % 2600) as f64;
        let glide = 1.0 + 0.03 * (((sym * 7) % 5) as f64 - 2.0) / 2.0;
        for i in 0..n {
            let f = f0 * glide;
            phase += 2.0 * PI * f / sr;
            if silent {
                samples.push(0.0);
                continue;
            }
            let env = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
            let mut s = 0.0;
            let mut h = 1;
            while f * h as f64 <= 4000.0 {
                let fh = f * h as f64;
                let g = (-((fh - formant) / 500.0).powi(2)).exp() + 0.3 / h as f64;
                let g = g * (fh / 1000.0).powf(tilt);
                s += g * (phase * h as f64).sin();
                h += 1;
            }
            samples.push(amp * env * s / 2.0);
        }
    }
    let mut w = Waveform::new(samples, fe.sample_rate);
    w.limit_peak();
    Ok((w, durations))
}

fn write_face_png(path: &Path, labels: &StyleLabels, rng: &mut ChaCha8Rng) -> Result<()> {
    const S: usize = 16;
    let base = match labels.gender {
        Gender::Male => [90u8, 120, 170],
        Gender::Female => [190, 110, 120],
    };
    let e = labels.emotion.index();
    let mut px = vec![0u8; S * S * 3];
    for y in 0..S {
        for x in 0..S {
            let i = (y * S + x) * 3;
            let mouth_y = 11 + (e % 3);
            let curve = ((x as f64 - 7.5).powi(2) / 12.0) as usize;
            let on_mouth = (4..12).contains(&x) && y == (mouth_y + curve * (e % 2)).min(S - 1);
            let on_eye = y == 5 && (x == 4 + e % 2 || x == 11 - e % 2);
            for c in 0..3 {
                let v = if on_mouth || on_eye {
                    20 + 30 * u16::from(labels.emotion_level)
                } else {
                    u16::from(base[c]) + rng.gen_range(0..8)
                };
                px[i + c] = v.min(255) as u8;
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), S as u32, S as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(&px)?;
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the corpus under `root` and returns what was generated, in clip order.
///
/// Also writes `transcripts.txt` and `alignments.txt` (frame durations keyed by utt_id).
pub fn generate_toy_corpus(root: &Path, cfg: &ToyCorpusConfig, fe: &FrontendConfig) -> Result<Vec<ToyClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut clips = Vec::with_capacity(cfg.clips);
    let mut alignments = String::new();
    for i in 0..cfg.clips {
        let (speaker, gender, f0) = SPEAKERS[i % SPEAKERS.len()];
        let emotion = Emotion::ALL[rng.gen_range(0..Emotion::ALL.len())];
        let level = rng.gen_range(1..=3u8);
        let labels = StyleLabels::new(gender, emotion, level)?;
        let sentence = SENTENCES[(i / SPEAKERS.len() + i) % SENTENCES.len()];
        let clip = format!("{:03}", i);
        let dir = root.join(speaker).join(emotion.as_str()).join(format!("level_{level}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let wav_path = dir.join(format!("{clip}.wav"));
        let (wav, durations) = render_utterance(sentence, f0, &labels, fe)?;
        write_wav(&wav_path, &wav)?;

        let hypothesis = if cfg.garbled_clips.contains(&i) {
            "zxq vvk".to_string()
        } else {
            text::normalize(sentence).replace(['.', '!', '?', ','], "")
        };
        write(&wav_path.with_extension("asr.txt"), &format!("{hypothesis}\n"))?;
        if cfg.video_clips.contains(&i) {
            write(&wav_path.with_extension("frames"), &format!("{}\n", 20 + i))?;
        } else {
            write_face_png(&wav_path.with_extension("png"), &labels, &mut rng)?;
        }

        let utt_id = format!("{speaker}_{emotion}_{level}_{clip}");
        alignments.push_str(&format_alignment(&utt_id, &durations));
        alignments.push('\n');
        clips.push(ToyClip {
            utt_id,
            speaker: speaker.to_string(),
            labels,
            sentence: sentence.to_string(),
            durations,
            wav_path,
        });
    }
    write(&root.join("transcripts.txt"), &(SENTENCES.join("\n") + "\n"))?;
    write(&root.join("alignments.txt"), &alignments)?;
    Ok(clips)
}
