//! Mel front-end (analysis) and Griffin-Lim resynthesis.
//!
//! Frames are centred: frame `t` is centred on sample `t · hop`, with the
//! signal zero-padded by `n_fft / 2` on both ends, so a signal of `n`
//! samples yields `⌈n / hop⌉` frames.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{MelSpectrogram, Waveform};
use crate::config::FrontendConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Lowest and highest F0 the pitch tracker searches.
const PITCH_MIN_HZ: f64 = 50.0;
const PITCH_MAX_HZ: f64 = 500.0;
const VOICING_THRESHOLD: f64 = 0.45;
const SILENCE_RMS: f64 = 1e-4;

pub struct MelFrontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    /// `[n_mels × n_bins]` triangular filters, peak weight 1.
    filterbank: Tensor,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("cfg", &self.cfg).finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: padded_hann(cfg.win_length, cfg.n_fft),
            filterbank: mel_filterbank(cfg),
            fft: planner.plan_fft_forward(cfg.n_fft),
            ifft: planner.plan_fft_inverse(cfg.n_fft),
            cfg: cfg.clone(),
        }
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn n_bins(&self) -> usize {
        self.cfg.n_fft / 2 + 1
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    /// Centre frequency of each mel filter in Hz.
    pub fn mel_centers_hz(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.cfg.f_min), hz_to_mel(self.cfg.f_max));
        let n = self.cfg.n_mels;
        (1..=n)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n + 1) as f64))
            .collect()
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.cfg.hop_length)
    }

    fn padded(&self, samples: &[f64]) -> Vec<f64> {
        let pad = self.cfg.n_fft / 2;
        let mut out = vec![0.0; samples.len() + 2 * pad];
        out[pad..pad + samples.len()].copy_from_slice(samples);
        out
    }

    /// Complex STFT, one row of `n_bins` values per frame.
    pub fn stft(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n_fft = self.cfg.n_fft;
        let hop = self.cfg.hop_length;
        let padded = self.padded(samples);
        let n_frames = self.n_frames(samples.len());
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        (0..n_frames)
            .map(|t| {
                let start = t * hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    let s = padded.get(start + i).copied().unwrap_or(0.0);
                    *b = Complex::new(s * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..self.n_bins()].to_vec()
            })
            .collect()
    }

    /// Overlap-add inverse of [`Self::stft`], producing `frames · hop` samples.
    pub fn istft(&self, spec: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let n_fft = self.cfg.n_fft;
        let hop = self.cfg.hop_length;
        let pad = n_fft / 2;
        let n_out = spec.len() * hop;
        let total = n_out + 2 * pad + n_fft;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let n_bins = self.n_bins();
        for (t, frame) in spec.iter().enumerate() {
            buf[..n_bins].copy_from_slice(frame);
            for k in n_bins..n_fft {
                buf[k] = buf[n_fft - k].conj();
            }
            buf[0].im = 0.0;
            if n_fft % 2 == 0 {
                buf[n_fft / 2].im = 0.0;
            }
            self.ifft.process(&mut buf);
            let start = t * hop;
            for i in 0..n_fft {
                let w = self.window[i];
                acc[start + i] += buf[i].re / n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        (0..n_out)
            .map(|i| {
                let j = i + pad;
                if norm[j] > 1e-10 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn magnitude(&self, samples: &[f64]) -> Tensor {
        let spec = self.stft(samples);
        let rows: Vec<Vec<f64>> = spec
            .iter()
            .map(|f| f.iter().map(|c| c.norm()).collect())
            .collect();
        Tensor::from_rows(&rows)
    }

    /// `ln(max(M · |X|, floor))`, `[T × n_mels]`.
    pub fn log_mel_from_magnitude(&self, mag: &Tensor) -> Tensor {
        let mut mel = Tensor::zeros(mag.rows(), self.cfg.n_mels);
        crate::tensor::gemm(false, mag, true, &self.filterbank, 0.0, &mut mel);
        mel.map(|v| v.max(self.cfg.log_floor).ln())
    }

    pub fn extract_mel(&self, wav: &Waveform) -> Result<MelSpectrogram> {
        if wav.is_empty() {
            return Err(Error::invalid("cannot extract a mel spectrogram from empty audio"));
        }
        self.check_rate(wav)?;
        let mag = self.magnitude(&wav.samples);
        MelSpectrogram::new(
            self.log_mel_from_magnitude(&mag),
            self.cfg.sample_rate,
            self.cfg.hop_length,
        )
    }

    /// Per-frame F0 (Hz, 0 when unvoiced) and spectral energy.
    ///
    /// Energy is the L2 norm of the frame's magnitude spectrum. F0 comes from
    /// the first dominant peak of the frame autocorrelation within
    /// 50–500 Hz, refined by parabolic interpolation.
    pub fn extract_pitch_energy(&self, wav: &Waveform) -> Result<(Vec<f64>, Vec<f64>)> {
        if wav.is_empty() {
            return Err(Error::invalid("cannot extract pitch from empty audio"));
        }
        self.check_rate(wav)?;
        let mag = self.magnitude(&wav.samples);
        let energy: Vec<f64> = (0..mag.rows())
            .map(|t| mag.row(t).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();

        let sr = self.cfg.sample_rate as f64;
        let win = self.cfg.win_length;
        let padded = self.padded(&wav.samples);
        let offset = (self.cfg.n_fft - win) / 2;
        let min_lag = (sr / PITCH_MAX_HZ).floor() as usize;
        let max_lag = ((sr / PITCH_MIN_HZ).ceil() as usize).min(win - 1);
        let pitch = (0..mag.rows())
            .map(|t| {
                let start = t * self.cfg.hop_length + offset;
                let seg = &padded[start..start + win];
                frame_pitch(seg, sr, min_lag, max_lag)
            })
            .collect();
        Ok((pitch, energy))
    }

    fn check_rate(&self, wav: &Waveform) -> Result<()> {
        if wav.sample_rate != self.cfg.sample_rate {
            return Err(Error::invalid(format!(
                "audio is {} Hz, front-end expects {} Hz",
                wav.sample_rate, self.cfg.sample_rate
            )));
        }
        Ok(())
    }

    /// Non-negative linear magnitude whose mel projection approximates `mel`.
    ///
    /// Starts from the transposed filterbank and runs projected Landweber
    /// iterations, clipping to zero after every step.
    pub fn mel_to_magnitude(&self, mel: &MelSpectrogram) -> Tensor {
        let target = mel.frames.map(f64::exp);
        let fb = &self.filterbank;
        let col_sums: Vec<f64> = (0..fb.cols())
            .map(|k| (0..fb.rows()).map(|m| fb.get(m, k)).sum())
            .collect();
        let row_sums: Vec<f64> = (0..fb.rows()).map(|m| fb.row(m).iter().sum()).collect();
        // ‖M‖₂² ≤ ‖M‖₁‖M‖∞ keeps the step size stable.
        let bound = col_sums.iter().copied().fold(0.0, f64::max)
            * row_sums.iter().copied().fold(0.0, f64::max);
        let step = 1.0 / bound.max(1e-12);

        let mut mag = target.matmul(fb);
        for (k, &cs) in col_sums.iter().enumerate() {
            let scale = if cs > 0.0 { 1.0 / cs } else { 0.0 };
            for t in 0..mag.rows() {
                let v = mag.get(t, k) * scale;
                mag.set(t, k, v);
            }
        }
        let mut approx = Tensor::zeros(mag.rows(), fb.rows());
        for _ in 0..200 {
            crate::tensor::gemm(false, &mag, true, fb, 0.0, &mut approx);
            let resid = target.sub(&approx);
            let update = resid.matmul(fb);
            for (m, u) in mag.data_mut().iter_mut().zip(update.data()) {
                *m = (*m + step * u).max(0.0);
            }
        }
        mag
    }

    /// Griffin-Lim phase reconstruction from a log-mel spectrogram.
    ///
    /// The initial phase comes from a fixed-seed generator, so the output is
    /// deterministic. Samples are scaled down only if they exceed unit peak.
    pub fn griffin_lim(&self, mel: &MelSpectrogram, iters: usize) -> Result<Waveform> {
        if iters == 0 {
            return Err(Error::invalid("griffin-lim needs at least one iteration"));
        }
        if mel.n_mels() != self.cfg.n_mels {
            return Err(Error::invalid(format!(
                "mel has {} bins, front-end expects {}",
                mel.n_mels(),
                self.cfg.n_mels
            )));
        }
        let mag = self.mel_to_magnitude(mel);
        let mut rng = ChaCha8Rng::seed_from_u64(0x6c17);
        let mut spec: Vec<Vec<Complex<f64>>> = (0..mag.rows())
            .map(|t| {
                mag.row(t)
                    .iter()
                    .map(|&m| Complex::from_polar(m, rng.gen_range(-PI..PI)))
                    .collect()
            })
            .collect();
        let mut samples = self.istft(&spec);
        for _ in 1..iters {
            let rebuilt = self.stft(&samples);
            for (t, frame) in spec.iter_mut().enumerate() {
                for (k, c) in frame.iter_mut().enumerate() {
                    let r = rebuilt[t][k];
                    let n = r.norm();
                    let phase = if n > 1e-12 { r / n } else { Complex::new(1.0, 0.0) };
                    *c = phase * mag.get(t, k);
                }
            }
            samples = self.istft(&spec);
        }
        let mut wav = Waveform::new(samples, self.cfg.sample_rate);
        wav.limit_peak();
        Ok(wav)
    }
}

fn frame_pitch(seg: &[f64], sr: f64, min_lag: usize, max_lag: usize) -> f64 {
    let mean = seg.iter().sum::<f64>() / seg.len() as f64;
    let x: Vec<f64> = seg.iter().map(|v| v - mean).collect();
    let r0: f64 = x.iter().map(|v| v * v).sum();
    if (r0 / x.len() as f64).sqrt() < SILENCE_RMS || max_lag <= min_lag + 1 {
        return 0.0;
    }
    let ac = |lag: usize| -> f64 {
        x[..x.len() - lag]
            .iter()
            .zip(&x[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / r0
    };
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1).map(ac).collect();
    let at = |lag: usize| r[lag + 1 - min_lag];
    let mut best = None;
    let mut best_val = f64::NEG_INFINITY;
    for lag in min_lag..=max_lag {
        let v = at(lag);
        if v > at(lag - 1) && v >= at(lag + 1) && v > best_val {
            best_val = v;
            best = Some(lag);
        }
    }
    let Some(lag) = best else {
        return 0.0;
    };
    if best_val < VOICING_THRESHOLD {
        return 0.0;
    }
    // Prefer the shortest lag whose peak is nearly as strong (avoids octave-down errors).
    let mut chosen = lag;
    for l in min_lag..lag {
        let v = at(l);
        if v > at(l - 1) && v >= at(l + 1) && v > 0.9 * best_val {
            chosen = l;
            break;
        }
    }
    let (a, b, c) = (at(chosen - 1), at(chosen), at(chosen + 1));
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    sr / (chosen as f64 + shift)
}

/// Periodic Hann window of `win` samples, centred in `n_fft` zeros.
fn padded_hann(win: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let off = (n_fft - win) / 2;
    for i in 0..win {
        w[off + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos();
    }
    w
}

fn mel_filterbank(cfg: &FrontendConfig) -> Tensor {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Tensor::from_fn(cfg.n_mels, n_bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - l) / (c - l);
        let down = (r - f) / (r - c);
        up.min(down).max(0.0)
    })
}

/// `mel → waveform` plugin contract.
pub trait Vocoder {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform>;
}

/// The built-in vocoder.
#[derive(Debug)]
pub struct GriffinLim {
    pub frontend: MelFrontend,
    pub iters: usize,
}

impl GriffinLim {
    pub fn new(cfg: &FrontendConfig, iters: usize) -> Self {
        Self {
            frontend: MelFrontend::new(cfg),
            iters,
        }
    }
}

impl Vocoder for GriffinLim {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        self.frontend.griffin_lim(mel, self.iters)
    }
}

/// Adapter for an externally supplied neural vocoder.
pub struct ExternalVocoder<F>(pub F);

impl<F> Vocoder for ExternalVocoder<F>
where
    F: Fn(&MelSpectrogram) -> Result<Waveform>,
{
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        let wav = (self.0)(mel)?;
        if wav.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("external vocoder produced non-finite samples"));
        }
        Ok(wav)
    }
}
