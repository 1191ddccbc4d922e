//! Waveforms, mel-spectrogram containers and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Scales down so that `|sample| ≤ 1`; quieter signals are left as they are.
    pub fn limit_peak(&mut self) {
        let p = self.peak();
        if p > 1.0 {
            for s in &mut self.samples {
                *s /= p;
            }
        }
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> Self {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Self::new(self.samples.clone(), target_rate);
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let n_out = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Self::new(samples, target_rate)
    }
}

/// Log-mel spectrogram, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub sample_rate: u32,
    pub hop_length: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor, sample_rate: u32, hop_length: usize) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::invalid("mel spectrogram has no frames"));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("mel spectrogram contains non-finite values"));
        }
        Ok(Self {
            frames,
            sample_rate,
            hop_length,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MelFile {
    sample_rate: u32,
    hop_length: usize,
    frames: Vec<Vec<f64>>,
}

/// Writes a mel as JSON: `{sample_rate, hop_length, frames: [[f64; n_mels]; T]}`.
pub fn write_mel_json(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let file = MelFile {
        sample_rate: mel.sample_rate,
        hop_length: mel.hop_length,
        frames: (0..mel.n_frames()).map(|r| mel.frames.row(r).to_vec()).collect(),
    };
    std::fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
}

pub fn read_mel_json(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: MelFile = serde_json::from_slice(&bytes)?;
    let cols = file.frames.first().map_or(0, Vec::len);
    if file.frames.iter().any(|f| f.len() != cols) {
        return Err(Error::invalid(format!("{}: ragged mel frames", path.display())));
    }
    let rows = file.frames.len();
    let frames = Tensor::from_vec(rows, cols, file.frames.into_iter().flatten().collect());
    MelSpectrogram::new(frames, file.sample_rate, file.hop_length)
}

/// Reads a WAV file as mono at `target_rate`, downmixing and resampling as needed.
pub fn read_wav(path: &Path, target_rate: u32) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(Waveform::new(mono, spec.sample_rate).resample(target_rate))
}

/// Writes mono 16-bit PCM; samples are clamped to [−1, 1].
pub fn write_wav(path: &Path, wav: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &wav.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Duration of a WAV file from its header.
pub fn wav_duration_secs(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}
