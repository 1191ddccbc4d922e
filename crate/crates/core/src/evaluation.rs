//! Objective metrics: mel-cepstral distortion, speaker-embedding cosine
//! similarity, and classification accuracy over pluggable classifiers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::config::FrontendConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocoder::MelFrontend;

/// Cepstral order used for MCD.
pub const MCD_ORDER: usize = 13;

/// Orthonormal type-II DCT of each log-mel frame, first `k` coefficients.
pub fn mel_to_cepstra(mel: &Tensor, k: usize) -> Result<Tensor> {
    let n = mel.cols();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cepstral order {k} not in 1..={n}")));
    }
    let basis = Tensor::from_fn(n, k, |m, q| {
        let w = if q == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        w * (std::f64::consts::PI * q as f64 * (2 * m + 1) as f64 / (2 * n) as f64).cos()
    });
    Ok(mel.matmul(&basis))
}

fn frame_dist(a: &[f64], b: &[f64]) -> f64 {
    a[1..]
        .iter()
        .zip(&b[1..])
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Minimum-cost monotone alignment with unit steps.
///
/// Frame distance is euclidean over coefficients 1.. (c0 excluded). Among
/// equal-cost paths the shorter one wins, which keeps the result symmetric.
pub fn dtw_path(a: &Tensor, b: &Tensor) -> Result<Vec<(usize, usize)>> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid("cannot align an empty sequence"));
    }
    if a.cols() != b.cols() || a.cols() < 2 {
        return Err(Error::invalid(format!(
            "cepstral widths {} and {} must match and be at least 2",
            a.cols(),
            b.cols()
        )));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut cost = vec![(f64::INFINITY, usize::MAX); n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = frame_dist(a.row(i), b.row(j));
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut cands = Vec::with_capacity(3);
                if i > 0 && j > 0 {
                    cands.push(cost[at(i - 1, j - 1)]);
                }
                if i > 0 {
                    cands.push(cost[at(i - 1, j)]);
                }
                if j > 0 {
                    cands.push(cost[at(i, j - 1)]);
                }
                cands
                    .into_iter()
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .unwrap_or((f64::INFINITY, usize::MAX))
            };
            cost[at(i, j)] = (best.0 + d, best.1.wrapping_add(1));
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let mut cands = Vec::with_capacity(3);
        if i > 0 && j > 0 {
            cands.push((i - 1, j - 1));
        }
        if i > 0 {
            cands.push((i - 1, j));
        }
        if j > 0 {
            cands.push((i, j - 1));
        }
        let next = cands
            .into_iter()
            .min_by(|p, q| {
                let (cp, cq) = (cost[at(p.0, p.1)], cost[at(q.0, q.1)]);
                cp.0.total_cmp(&cq.0).then(cp.1.cmp(&cq.1))
            })
            .unwrap_or((0, 0));
        i = next.0;
        j = next.1;
        path.push(next);
    }
    path.reverse();
    Ok(path)
}

/// DTW-aligned mel-cepstral distortion in dB, c0 excluded.
pub fn mcd(reference: &Tensor, synthesized: &Tensor) -> Result<f64> {
    let path = dtw_path(reference, synthesized)?;
    let total: f64 = path
        .iter()
        .map(|&(i, j)| frame_dist(reference.row(i), synthesized.row(j)))
        .sum();
    Ok(10.0 / std::f64::consts::LN_10 * 2f64.sqrt() * total / path.len() as f64)
}

/// MCD between two log-mel spectrograms at the default cepstral order.
pub fn mel_mcd(reference: &Tensor, synthesized: &Tensor) -> Result<f64> {
    mcd(
        &mel_to_cepstra(reference, MCD_ORDER)?,
        &mel_to_cepstra(synthesized, MCD_ORDER)?,
    )
}

/// Cosine similarity of two speaker embeddings.
pub fn secs(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("embedding lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero speaker embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Speaker-embedding extractor plugin.
pub trait SpeakerEmbedder {
    fn embed(&self, wav: &Waveform) -> Result<Vec<f64>>;
}

/// Label classifier plugin.
pub trait Classifier {
    fn classify(&self, wav: &Waveform) -> Result<String>;
}

/// Fraction of items the classifier labels correctly; failures count as wrong.
pub fn classification_accuracy(items: &[(Waveform, String)], classifier: &dyn Classifier) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("no items to classify"));
    }
    let mut correct = 0usize;
    for (i, (wav, label)) in items.iter().enumerate() {
        match classifier.classify(wav) {
            Ok(pred) if &pred == label => correct += 1,
            Ok(_) => {}
            Err(e) => log::warn!("classifier failed on item {i}: {e}"),
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Mean and standard deviation of the log-mel frames, concatenated.
pub struct MeanMelEmbedder {
    frontend: MelFrontend,
}

impl MeanMelEmbedder {
    pub fn new(cfg: &FrontendConfig) -> Self {
        Self {
            frontend: MelFrontend::new(cfg),
        }
    }
}

impl SpeakerEmbedder for MeanMelEmbedder {
    fn embed(&self, wav: &Waveform) -> Result<Vec<f64>> {
        let mel = self.frontend.extract_mel(wav)?;
        let f = &mel.frames;
        let mean = f.mean_rows();
        let mut out = mean.data().to_vec();
        for c in 0..f.cols() {
            let m = mean.data()[c];
            let var = (0..f.rows()).map(|r| (f.get(r, c) - m).powi(2)).sum::<f64>() / f.rows() as f64;
            out.push(var.sqrt());
        }
        Ok(out)
    }
}

fn median_voiced_pitch(frontend: &MelFrontend, wav: &Waveform) -> Result<Option<f64>> {
    let (pitch, _) = frontend.extract_pitch_energy(wav)?;
    let mut voiced: Vec<f64> = pitch.into_iter().filter(|&p| p > 0.0).collect();
    if voiced.is_empty() {
        return Ok(None);
    }
    voiced.sort_by(f64::total_cmp);
    Ok(Some(voiced[voiced.len() / 2]))
}

/// `"male"` below the threshold, `"female"` above, by median voiced F0.
pub struct PitchGenderClassifier {
    frontend: MelFrontend,
    pub threshold_hz: f64,
}

impl PitchGenderClassifier {
    pub fn new(cfg: &FrontendConfig) -> Self {
        Self {
            frontend: MelFrontend::new(cfg),
            threshold_hz: 165.0,
        }
    }
}

impl Classifier for PitchGenderClassifier {
    fn classify(&self, wav: &Waveform) -> Result<String> {
        match median_voiced_pitch(&self.frontend, wav)? {
            Some(f0) if f0 < self.threshold_hz => Ok("male".into()),
            Some(_) => Ok("female".into()),
            None => Err(Error::invalid("no voiced frames")),
        }
    }
}

/// Nearest reference level of RMS loudness (in dB) wins.
pub struct LoudnessEmotionClassifier {
    pub references: Vec<(String, f64)>,
}

impl LoudnessEmotionClassifier {
    pub fn rms_db(wav: &Waveform) -> f64 {
        let ms = wav.samples.iter().map(|s| s * s).sum::<f64>() / wav.len().max(1) as f64;
        10.0 * ms.max(1e-12).log10()
    }
}

impl Classifier for LoudnessEmotionClassifier {
    fn classify(&self, wav: &Waveform) -> Result<String> {
        if wav.is_empty() {
            return Err(Error::invalid("empty waveform"));
        }
        let db = Self::rms_db(wav);
        self.references
            .iter()
            .min_by(|a, b| (a.1 - db).abs().total_cmp(&(b.1 - db).abs()))
            .map(|(l, _)| l.clone())
            .ok_or_else(|| Error::config("emotion classifier has no reference levels"))
    }
}

/// Per-utterance scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub utt_id: String,
    pub mcd: f64,
    pub secs: f64,
    pub emotion_correct: Option<bool>,
    pub gender_correct: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mcd: f64,
    pub secs: f64,
    pub acc_emo: f64,
    pub acc_gen: f64,
    pub n_items: usize,
}

impl MetricReport {
    /// Means over items; accuracies over items that carry a verdict.
    pub fn aggregate(items: &[ItemMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("no items to aggregate"));
        }
        let n = items.len() as f64;
        let acc = |f: fn(&ItemMetrics) -> Option<bool>| {
            let v: Vec<bool> = items.iter().filter_map(f).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
            }
        };
        Ok(Self {
            mcd: items.iter().map(|i| i.mcd).sum::<f64>() / n,
            secs: items.iter().map(|i| i.secs).sum::<f64>() / n,
            acc_emo: acc(|i| i.emotion_correct),
            acc_gen: acc(|i| i.gender_correct),
            n_items: items.len(),
        })
    }

    pub fn has_nan(&self) -> bool {
        [self.mcd, self.secs, self.acc_emo, self.acc_gen].iter().any(|v| v.is_nan())
    }

    /// One JSON object per item, then the summary line.
    pub fn to_jsonl(&self, items: &[ItemMetrics]) -> Result<String> {
        let mut s = String::new();
        for i in items {
            s.push_str(&serde_json::to_string(i)?);
            s.push('\n');
        }
        let mut summary = serde_json::to_value(self)?;
        summary["summary"] = serde_json::Value::Bool(true);
        s.push_str(&serde_json::to_string(&summary)?);
        s.push('\n');
        Ok(s)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<10} {:>10.4}", "MCD (dB)", self.mcd);
        let _ = writeln!(s, "{:<10} {:>10.4}", "SECS", self.secs);
        let _ = writeln!(s, "{:<10} {:>10.4}", "ACC emo", self.acc_emo);
        let _ = writeln!(s, "{:<10} {:>10.4}", "ACC gen", self.acc_gen);
        let _ = writeln!(s, "{:<10} {:>10}", "items", self.n_items);
        s
    }
}
