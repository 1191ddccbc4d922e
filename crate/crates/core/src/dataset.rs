//! Builds a (speech, face image, text description) manifest from a tree of
//! labeled clips laid out as `<speaker>/<emotion>/<level>/<clip>.wav`.
//!
//! Sidecars next to each clip:
//! - `<clip>.asr.txt`: ASR hypothesis (file-backed stand-in for a recognizer)
//! - `<clip>.png`: face image, used directly when present
//! - `<clip>.frames`: frame count of `<clip>.mp4`; frame indices are emitted as `<clip>.mp4#frame=N`
//!
//! `transcripts.txt` at the root lists candidate sentences, one per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::wav_duration_secs;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Angry,
    Contempt,
    Disgusted,
    Fear,
    Happy,
    Sad,
    Surprised,
}

impl Emotion {
    pub const ALL: [Emotion; 8] = [
        Emotion::Neutral,
        Emotion::Angry,
        Emotion::Contempt,
        Emotion::Disgusted,
        Emotion::Fear,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Surprised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Angry => "angry",
            Emotion::Contempt => "contempt",
            Emotion::Disgusted => "disgusted",
            Emotion::Fear => "fear",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Surprised => "surprised",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&e| e == self).unwrap_or(0)
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_lowercase();
        Emotion::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown emotion {s:?}")))
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const LEVEL_WORDS: [&str; 3] = ["slightly", "moderately", "extremely"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StyleLabels {
    pub gender: Gender,
    pub emotion: Emotion,
    pub emotion_level: u8,
}

impl StyleLabels {
    pub fn new(gender: Gender, emotion: Emotion, emotion_level: u8) -> Result<Self> {
        if !(1..=3).contains(&emotion_level) {
            return Err(Error::invalid(format!("emotion level {emotion_level} not in 1..=3")));
        }
        Ok(Self {
            gender,
            emotion,
            emotion_level,
        })
    }

    /// Every label combination: 2 genders × 8 emotions × 3 levels.
    pub fn grid() -> Vec<StyleLabels> {
        let mut out = Vec::with_capacity(48);
        for g in Gender::ALL {
            for e in Emotion::ALL {
                for l in 1..=3 {
                    out.push(StyleLabels {
                        gender: g,
                        emotion: e,
                        emotion_level: l,
                    });
                }
            }
        }
        out
    }
}

/// "A {gender} says with a {level word} {emotion} tone".
pub fn render_prompt(labels: &StyleLabels) -> String {
    let level = LEVEL_WORDS[usize::from(labels.emotion_level.clamp(1, 3)) - 1];
    format!("A {} says with a {level} {} tone", labels.gender, labels.emotion)
}

/// Recovers labels from any description that keeps the gender, level and emotion keywords.
pub fn parse_prompt(text: &str) -> Result<StyleLabels> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let has = |w: &str| words.contains(&w);
    let gender = match (has("male") || has("man"), has("female") || has("woman")) {
        (true, false) => Gender::Male,
        (false, true) => Gender::Female,
        _ => return Err(Error::invalid(format!("no unambiguous gender in {text:?}"))),
    };
    let levels: Vec<u8> = LEVEL_WORDS
        .iter()
        .enumerate()
        .filter(|(_, w)| has(w))
        .map(|(i, _)| i as u8 + 1)
        .collect();
    let emotions: Vec<Emotion> = Emotion::ALL.into_iter().filter(|e| has(e.as_str())).collect();
    match (levels.as_slice(), emotions.as_slice()) {
        ([l], [e]) => StyleLabels::new(gender, *e, *l),
        _ => Err(Error::invalid(format!("no unambiguous level and emotion in {text:?}"))),
    }
}

pub type ParaphraseTable = BTreeMap<String, Vec<String>>;

/// Three fixed rewordings per template prompt; all keep the label keywords.
pub fn builtin_paraphrases() -> ParaphraseTable {
    StyleLabels::grid()
        .into_iter()
        .map(|l| {
            let level = LEVEL_WORDS[usize::from(l.emotion_level) - 1];
            let (g, e) = (l.gender, l.emotion);
            (
                render_prompt(&l),
                vec![
                    format!("A {g} speaker talks in a {level} {e} manner"),
                    format!("With a {level} {e} voice, a {g} is speaking"),
                    format!("The voice of a {g}, sounding {level} {e}"),
                ],
            )
        })
        .collect()
}

/// One stored paraphrase chosen uniformly under `seed`; the prompt itself if none are stored.
pub fn paraphrase(prompt: &str, table: &ParaphraseTable, seed: u64) -> String {
    match table.get(prompt) {
        Some(options) if !options.is_empty() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            options[rng.gen_range(0..options.len())].clone()
        }
        _ => prompt.to_string(),
    }
}

fn normalize_for_match(s: &str) -> Vec<char> {
    let kept: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ").chars().collect()
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − edit distance / longer length` on lowercased, punctuation-free text.
pub fn similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (normalize_for_match(a), normalize_for_match(b));
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&a, &b) as f64 / longest as f64
}

/// Best-scoring candidate; ties go to the first.
pub fn match_transcript(hypothesis: &str, candidates: &[String]) -> Result<(String, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = similarity(hypothesis, c);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, s)| (candidates[i].clone(), s))
        .ok_or_else(|| Error::invalid("no transcript candidates"))
}

/// `k` distinct frame indices drawn uniformly without replacement, sorted.
pub fn select_frames(frame_count: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > frame_count {
        return Err(Error::invalid(format!("cannot pick {k} frames from {frame_count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, frame_count, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Speech recognizer plugin.
pub trait Transcriber {
    fn transcribe(&self, wav_path: &Path) -> Result<String>;
}

/// Reads the precomputed hypothesis from `<clip>.asr.txt`.
pub struct SidecarTranscriber;

impl Transcriber for SidecarTranscriber {
    fn transcribe(&self, wav_path: &Path) -> Result<String> {
        let p = wav_path.with_extension("asr.txt");
        fs::read_to_string(&p).map(|s| s.trim().to_string()).map_err(|e| Error::io(&p, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Speaker-level split: hash buckets 0–7 train, 8 dev, 9 test.
pub fn speaker_split(speaker: &str) -> Split {
    let d = Sha256::digest(speaker.as_bytes());
    match u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]]) % 10 {
        8 => Split::Dev,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker: String,
    pub audio_path: String,
    pub duration_secs: f64,
    pub transcript: String,
    pub transcript_score: f64,
    pub needs_review: bool,
    pub face_image_path: Option<String>,
    pub prompt_template: String,
    pub prompt_text: String,
    pub labels: StyleLabels,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub pairs: usize,
    pub hours: f64,
    pub speakers: usize,
    pub male_speakers: usize,
    pub female_speakers: usize,
    pub flagged_for_review: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub seed: u64,
    pub frames_per_clip: usize,
    pub paraphrase: bool,
    /// Transcript matches scoring below this are flagged for review.
    pub review_threshold: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            frames_per_clip: 2,
            paraphrase: true,
            review_threshold: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestBuild {
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
    pub summary: ManifestSummary,
}

fn gender_of(speaker: &str) -> Option<Gender> {
    match speaker.chars().next()?.to_ascii_uppercase() {
        'M' => Some(Gender::Male),
        'W' | 'F' => Some(Gender::Female),
        _ => None,
    }
}

fn parse_level(s: &str) -> Option<u8> {
    let digits = s.trim_start_matches("level").trim_start_matches(['_', '-']);
    digits.parse::<u8>().ok().filter(|l| (1..=3).contains(l))
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_wavs(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    Ok(())
}

fn seed_for(seed: u64, utt_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(utt_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

/// Scans `root` and pairs every clip with a transcript, a face image and a description.
pub fn build_manifest(root: &Path, opts: &BuildOptions, asr: &dyn Transcriber) -> Result<ManifestBuild> {
    let transcripts_path = root.join("transcripts.txt");
    let candidates: Vec<String> = if transcripts_path.exists() {
        fs::read_to_string(&transcripts_path)
            .map_err(|e| Error::io(&transcripts_path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        Vec::new()
    };
    let table = builtin_paraphrases();
    let mut wavs = Vec::new();
    collect_wavs(root, &mut wavs)?;

    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for wav in wavs {
        let rel = wav.strip_prefix(root).unwrap_or(&wav);
        let parts: Vec<String> = rel.iter().map(|p| p.to_string_lossy().into_owned()).collect();
        let parsed = (parts.len() == 4)
            .then(|| {
                let gender = gender_of(&parts[0])?;
                let emotion = parts[1].parse::<Emotion>().ok()?;
                let level = parse_level(&parts[2])?;
                Some((parts[0].clone(), StyleLabels::new(gender, emotion, level).ok()?))
            })
            .flatten();
        let Some((speaker, labels)) = parsed else {
            warnings.push(format!("skipped {}: path does not match <speaker>/<emotion>/<level>/<clip>.wav", rel.display()));
            continue;
        };
        let clip = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let utt_id = format!("{speaker}_{}_{}_{clip}", labels.emotion, labels.emotion_level);
        let useed = seed_for(opts.seed, &utt_id);

        let hypothesis = match asr.transcribe(&wav) {
            Ok(h) => h,
            Err(e) => {
                warnings.push(format!("skipped {utt_id}: {e}"));
                continue;
            }
        };
        let (transcript, score) = if candidates.is_empty() {
            (hypothesis, 1.0)
        } else {
            match_transcript(&hypothesis, &candidates)?
        };
        let needs_review = score < opts.review_threshold;
        if needs_review {
            warnings.push(format!("{utt_id}: transcript match score {score:.3} flagged for review"));
        }

        let png = wav.with_extension("png");
        let frames = wav.with_extension("frames");
        let face_image_path = if png.exists() {
            Some(png.to_string_lossy().into_owned())
        } else if frames.exists() {
            let count: usize = fs::read_to_string(&frames)
                .map_err(|e| Error::io(&frames, e))?
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{}: not a frame count", frames.display())))?;
            let k = opts.frames_per_clip.min(count);
            let picked = select_frames(count, k, useed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(useed ^ 0x9e37_79b9);
            picked
                .get(rng.gen_range(0..picked.len().max(1)))
                .map(|f| format!("{}#frame={f}", wav.with_extension("mp4").to_string_lossy()))
        } else {
            None
        };

        let template = render_prompt(&labels);
        let prompt_text = if opts.paraphrase {
            paraphrase(&template, &table, useed)
        } else {
            template.clone()
        };
        entries.push(ManifestEntry {
            utt_id,
            split: speaker_split(&speaker),
            speaker,
            audio_path: wav.to_string_lossy().into_owned(),
            duration_secs: wav_duration_secs(&wav)?,
            transcript,
            transcript_score: score,
            needs_review,
            face_image_path,
            prompt_template: template,
            prompt_text,
            labels,
        });
    }
    entries.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let summary = summarize(&entries, warnings.iter().filter(|w| w.starts_with("skipped")).count());
    Ok(ManifestBuild {
        entries,
        warnings,
        summary,
    })
}

pub fn summarize(entries: &[ManifestEntry], skipped: usize) -> ManifestSummary {
    let speakers: BTreeMap<&str, Gender> = entries.iter().map(|e| (e.speaker.as_str(), e.labels.gender)).collect();
    ManifestSummary {
        pairs: entries.len(),
        hours: entries.iter().map(|e| e.duration_secs).sum::<f64>() / 3600.0,
        speakers: speakers.len(),
        male_speakers: speakers.values().filter(|&&g| g == Gender::Male).count(),
        female_speakers: speakers.values().filter(|&&g| g == Gender::Female).count(),
        flagged_for_review: entries.iter().filter(|e| e.needs_review).count(),
        skipped,
    }
}

pub fn manifest_to_jsonl(entries: &[ManifestEntry]) -> Result<String> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, manifest_to_jsonl(entries)?).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Speakers appearing in more than one split; empty for a valid manifest.
pub fn split_leaks(entries: &[ManifestEntry]) -> Vec<String> {
    let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for e in entries {
        seen.entry(&e.speaker).or_default().insert(e.split);
    }
    seen.into_iter().filter(|(_, s)| s.len() > 1).map(|(k, _)| k.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn render_examples_and_injectivity() {
        let l = StyleLabels::new(Gender::Male, Emotion::Happy, 2).unwrap();
        assert_eq!(render_prompt(&l), "A male says with a moderately happy tone");
        let l = StyleLabels::new(Gender::Female, Emotion::Neutral, 1).unwrap();
        assert_eq!(render_prompt(&l), "A female says with a slightly neutral tone");
        let all: BTreeSet<String> = StyleLabels::grid().iter().map(render_prompt).collect();
        assert_eq!(all.len(), 48);
        assert!(StyleLabels::new(Gender::Male, Emotion::Sad, 4).is_err());
    }

    #[test]
    fn prompts_and_paraphrases_round_trip_through_parser() {
        let table = builtin_paraphrases();
        for l in StyleLabels::grid() {
            let p = render_prompt(&l);
            assert_eq!(parse_prompt(&p).unwrap(), l);
            for alt in &table[&p] {
                assert_eq!(parse_prompt(alt).unwrap(), l, "{alt}");
            }
        }
        assert!(parse_prompt("someone speaks").is_err());
    }

    #[test]
    fn paraphrase_examples() {
        let mut table = ParaphraseTable::new();
        let stored = vec!["one".to_string(), "two".to_string(), "three".to_string()];
        table.insert("p".into(), stored.clone());
        let a = paraphrase("p", &table, 5);
        assert!(stored.contains(&a));
        assert_eq!(a, paraphrase("p", &table, 5));
        assert_eq!(paraphrase("p", &ParaphraseTable::new(), 5), "p");
        let mut seen = BTreeSet::new();
        for seed in 0..100 {
            let out = paraphrase("p", &table, seed);
            assert!(stored.contains(&out) || out == "p");
            seen.insert(out);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn transcript_matching_examples() {
        let c = vec!["the cat sat.".to_string(), "dogs run".to_string()];
        assert_eq!(match_transcript("dogs run", &c).unwrap(), ("dogs run".to_string(), 1.0));
        let (best, score) = match_transcript("the cat sat", &c).unwrap();
        assert_eq!(best, "the cat sat.");
        assert!(score > 0.9);
        let (_, score) = match_transcript("xyzzy qwv", &c).unwrap();
        assert!(score < 0.3, "{score}");
        assert!(match_transcript("a", &[]).is_err());
        let tie = vec!["ab".to_string(), "ab".to_string()];
        assert_eq!(match_transcript("ab", &tie).unwrap().0, "ab");
        // Edit distance oracle: kitten → sitting is 3 edits over 7 characters.
        assert!((similarity("kitten", "sitting") - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn frame_selection_examples() {
        assert_eq!(select_frames(2, 2, 9).unwrap(), vec![0, 1]);
        assert_eq!(select_frames(100, 2, 3).unwrap(), select_frames(100, 2, 3).unwrap());
        assert!(select_frames(1, 2, 0).is_err());
    }

    #[test]
    fn frame_selection_is_uniform() {
        let trials = 10_000u64;
        let mut counts = [0f64; 100];
        for s in 0..trials {
            for i in select_frames(100, 2, s).unwrap() {
                counts[i] += 1.0;
            }
        }
        let p = 2.0 / 100.0;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c - mean).abs() < 3.0 * sd, "{c} vs {mean}±{sd}");
        }
        let chi2: f64 = counts.iter().map(|c| (c - mean).powi(2) / mean).sum();
        // 99.9th percentile of χ² with 99 degrees of freedom is about 148.
        assert!(chi2 < 148.0, "{chi2}");
    }

    #[test]
    fn speaker_split_is_a_function_of_speaker() {
        assert_eq!(speaker_split("M003"), speaker_split("M003"));
        let counts = (0..1000).map(|i| speaker_split(&format!("S{i}"))).fold([0; 3], |mut acc, s| {
            acc[s as usize] += 1;
            acc
        });
        assert!(counts[0] > 700 && counts[1] > 50 && counts[2] > 50, "{counts:?}");
    }

    proptest! {
        #[test]
        fn similarity_is_bounded_and_symmetric(a in "[a-z ]{0,20}", b in "[a-z ]{0,20}") {
            let s = similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((s - similarity(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn select_frames_returns_distinct_in_range(n in 1usize..200, k in 0usize..10, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let f = select_frames(n, k, seed).unwrap();
            prop_assert_eq!(f.len(), k);
            prop_assert!(f.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(f.iter().all(|&i| i < n));
        }
    }
}
