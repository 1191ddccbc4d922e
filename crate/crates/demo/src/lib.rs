//! Browser bindings for `www/index.html`: a gliding harmonic tone is analysed
//! into a log-mel, drawn, and turned back into audio with Griffin-Lim; a small
//! rectified flow is trained in the plane and its sample paths are exposed for drawing.
//!
//! Everything here is plain Rust behind `#[wasm_bindgen]`, so it builds and
//! tests natively as well.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use mmtts_core::audio::{MelSpectrogram, Waveform};
use mmtts_core::config::FrontendConfig;
use mmtts_core::plot::render_mel;
use mmtts_core::reflow::{gaussian, DriftField, ToyTransport, TrainedToy};
use mmtts_core::tensor::Tensor;
use mmtts_core::vocoder::MelFrontend;

fn js_err(e: mmtts_core::Error) -> String {
    e.to_string()
}

/// An RGBA raster ready for `ImageData`.
#[wasm_bindgen]
pub struct MelImage {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl MelImage {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

#[wasm_bindgen]
pub struct Mel {
    mel: MelSpectrogram,
    frontend: MelFrontend,
}

#[wasm_bindgen]
impl Mel {
    /// Harmonic tone whose pitch glides from `f0_start` to `f0_end` Hz, analysed at 16 kHz.
    pub fn tone(f0_start: f64, f0_end: f64, secs: f64, harmonics: usize) -> Result<Mel, String> {
        if !(f0_start > 0.0 && f0_end > 0.0 && secs > 0.0 && secs <= 10.0 && harmonics >= 1) {
            return Err("need positive pitches, 0 < secs <= 10 and at least one harmonic".into());
        }
        let cfg = FrontendConfig::default();
        let sr = f64::from(cfg.sample_rate);
        let n = (secs * sr) as usize;
        let mut phase = 0.0;
        let samples = (0..n)
            .map(|i| {
                let u = i as f64 / n as f64;
                phase += 2.0 * PI * (f0_start + u * (f0_end - f0_start)) / sr;
                let env = (PI * u).sin();
                let s: f64 = (1..=harmonics).map(|h| (h as f64 * phase).sin() / h as f64).sum();
                0.3 * env * s
            })
            .collect();
        let frontend = MelFrontend::new(&cfg);
        let mel = frontend.extract_mel(&Waveform::new(samples, cfg.sample_rate)).map_err(js_err)?;
        Ok(Mel { mel, frontend })
    }

    #[wasm_bindgen(getter)]
    pub fn n_frames(&self) -> usize {
        self.mel.n_frames()
    }

    #[wasm_bindgen(getter)]
    pub fn n_mels(&self) -> usize {
        self.mel.n_mels()
    }

    /// Frame-major log-mel values.
    pub fn values(&self) -> Vec<f64> {
        self.mel.frames.data().to_vec()
    }

    pub fn render(&self) -> Result<MelImage, String> {
        let img = render_mel(&self.mel.frames).map_err(js_err)?;
        let rgba = img.pixels.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        Ok(MelImage {
            width: img.width,
            height: img.height,
            rgba,
        })
    }

    /// Griffin-Lim reconstruction, as `f32` samples for `AudioBuffer`.
    pub fn griffin_lim(&self, iters: usize) -> Result<Vec<f32>, String> {
        let wav = self.frontend.griffin_lim(&self.mel, iters).map_err(js_err)?;
        Ok(wav.samples.iter().map(|&s| s as f32).collect())
    }

    #[wasm_bindgen(getter)]
    pub fn sample_rate(&self) -> u32 {
        self.mel.sample_rate
    }
}

/// Noise-to-mixture transport in the plane.
#[wasm_bindgen]
pub struct Transport {
    toy: ToyTransport,
    trained: TrainedToy,
}

#[wasm_bindgen]
impl Transport {
    /// A scaled-down version of the toy problem so training finishes in seconds in a browser.
    pub fn train(steps: usize, rectifications: usize, seed: u64) -> Result<Transport, String> {
        let toy = ToyTransport {
            batch: 128,
            steps,
            reflow_steps: steps / 2,
            rectifications,
            reflow_pairs: 1024,
            seed,
            ..ToyTransport::default()
        };
        let trained = toy.train().map_err(js_err)?;
        Ok(Transport { toy, trained })
    }

    /// Mean training loss of the final `window` steps of each rectification pass.
    pub fn final_losses(&self, window: usize) -> Vec<f64> {
        self.trained
            .losses
            .iter()
            .map(|l| {
                let tail = &l[l.len().saturating_sub(window.max(1))..];
                tail.iter().sum::<f64>() / tail.len().max(1) as f64
            })
            .collect()
    }

    /// Euler paths of `n` noise points: `(steps + 1) × n` points as flat `x, y` pairs.
    pub fn paths(&self, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>, String> {
        paths(&self.trained, n, steps, seed).map_err(js_err)
    }

    /// `n` draws from the target mixture as flat `x, y` pairs.
    pub fn target(&self, n: usize, seed: u64) -> Vec<f64> {
        self.toy.sample_target(n, &mut ChaCha8Rng::seed_from_u64(seed)).into_vec()
    }
}

fn paths(trained: &TrainedToy, n: usize, steps: usize, seed: u64) -> mmtts_core::Result<Vec<f64>> {
    if steps == 0 {
        return Err(mmtts_core::Error::InvalidInput("need at least one step".into()));
    }
    let field = trained.field();
    let mut x = gaussian(n, 2, &mut ChaCha8Rng::seed_from_u64(seed));
    let c = Tensor::zeros(n, 2);
    let dt = 1.0 / steps as f64;
    let mut out = x.data().to_vec();
    for i in 0..steps {
        let v = field.drift(&x, i as f64 * dt, &c)?;
        x.add_assign(&v.scale(dt));
        out.extend_from_slice(x.data());
    }
    Ok(out)
}
