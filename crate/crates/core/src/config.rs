//! Model, front-end, sampler and training configuration.
//!
//! `ModelConfig::default()` is the full-size model. [`ModelConfig::toy`] is a
//! desk-scale variant used by tests, the fixtures and the demo.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

/// Environment variable that overrides [`ModelConfig::seed`].
pub const SEED_ENV: &str = "MMTTS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub provider: ProviderKind,
    pub frontend: FrontendConfig,
    pub style: StyleConfig,
    pub acoustic: AcousticConfig,
    pub refiner: DriftNetConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Stub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop_length: 200,
            win_length: 800,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeechStyleEncoderConfig {
    pub gru_layers: usize,
    pub conv_kernel: usize,
    pub attention_heads: usize,
    pub conv_filter_size: usize,
}

impl Default for SpeechStyleEncoderConfig {
    fn default() -> Self {
        Self {
            gru_layers: 3,
            conv_kernel: 5,
            attention_heads: 1,
            conv_filter_size: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    /// Width of the shared style space (E_S, E_I, E_T, E_U).
    pub style_dim: usize,
    /// Width of the first adapter layer.
    pub adapter_hidden: usize,
    /// Output width of the frozen embedding provider.
    pub provider_dim: usize,
    pub speech_encoder: SpeechStyleEncoderConfig,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            style_dim: 256,
            adapter_hidden: 256,
            provider_dim: 512,
            speech_encoder: SpeechStyleEncoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FftStackConfig {
    pub layers: usize,
    pub hidden: usize,
    pub conv_kernel: usize,
    pub conv_filter: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for FftStackConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 256,
            conv_kernel: 9,
            conv_filter: 1024,
            heads: 2,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariancePredictorConfig {
    pub conv_kernel: usize,
    pub conv_filter: usize,
    pub dropout: f64,
}

impl Default for VariancePredictorConfig {
    fn default() -> Self {
        Self {
            conv_kernel: 3,
            conv_filter: 256,
            dropout: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelPredictorConfig {
    /// Width of the predictor's own convolutions and of the predicted kernels.
    pub conv_kernel: usize,
    pub conv_filter: usize,
    /// Convolutions in the residual module (pairs form one residual block).
    pub residual_convs: usize,
}

impl Default for KernelPredictorConfig {
    fn default() -> Self {
        Self {
            conv_kernel: 3,
            conv_filter: 16,
            residual_convs: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticConfig {
    pub vocab_size: usize,
    pub phoneme_embed: usize,
    pub encoder: FftStackConfig,
    pub decoder: FftStackConfig,
    pub variance: VariancePredictorConfig,
    pub kernel_predictor: KernelPredictorConfig,
    /// Epsilon added to σ in context normalization.
    pub norm_eps: f64,
    /// Upper bound on a single predicted token duration, in frames.
    pub max_duration: usize,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            vocab_size: text::VOCAB_SIZE,
            phoneme_embed: 192,
            encoder: FftStackConfig::default(),
            decoder: FftStackConfig::default(),
            variance: VariancePredictorConfig::default(),
            kernel_predictor: KernelPredictorConfig::default(),
            norm_eps: 1e-5,
            max_duration: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftNetConfig {
    pub step_embed_dim: usize,
    pub residual_layers: usize,
    pub residual_channels: usize,
    pub conv_kernel: usize,
    /// Channels of the dilated convolution before the tanh/sigmoid gate.
    pub conv_filter: usize,
    /// Dilation doubles every layer and resets after this many layers.
    pub dilation_cycle: usize,
    pub output: DriftOutput,
    /// Lower bound on `1 - t` when an endpoint estimate is turned into a velocity.
    pub endpoint_min_gap: f64,
}

/// What the network's last layer estimates.
///
/// `Endpoint` reads it as a correction to the condition, `x̂1 = c + net`, and
/// returns the velocity `(x̂1 - x_t) / max(1 - t, gap)`. When the target is a
/// deterministic function of the condition the best `x̂1` ignores `x_t` and `t`,
/// so learned paths come out nearly straight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftOutput {
    Velocity,
    Endpoint,
}

impl Default for DriftNetConfig {
    fn default() -> Self {
        Self {
            step_embed_dim: 256,
            residual_layers: 20,
            residual_channels: 256,
            conv_kernel: 3,
            conv_filter: 512,
            dilation_cycle: 1,
            output: DriftOutput::Endpoint,
            endpoint_min_gap: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Rk45,
    Euler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub sampler: SamplerKind,
    pub euler_steps: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Rk45,
            euler_steps: 1,
            rtol: 1e-5,
            atol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub grad_clip: f64,
    pub log_every: usize,
    /// Train with speech prompts only (no adapters, no alignment loss).
    pub speech_prompt_only: bool,
    pub lr_schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay over the stage's step budget down to 2% of the base rate.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: u64, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let p = (step as f64 / total.max(1) as f64).min(1.0);
                base * (0.02 + 0.98 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_lr: 1e-4,
            stage2_lr: 2e-4,
            batch_size: 16,
            stage1_steps: 200_000,
            stage2_steps: 200_000,
            grad_clip: 1.0,
            log_every: 100,
            speech_prompt_only: false,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            provider: ProviderKind::Stub,
            frontend: FrontendConfig::default(),
            style: StyleConfig::default(),
            acoustic: AcousticConfig::default(),
            refiner: DriftNetConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale model that trains on a laptop CPU in minutes.
    pub fn toy() -> Self {
        let stack = FftStackConfig {
            layers: 1,
            hidden: 48,
            conv_kernel: 3,
            conv_filter: 96,
            heads: 2,
            dropout: 0.0,
        };
        Self {
            style: StyleConfig {
                style_dim: 16,
                adapter_hidden: 32,
                provider_dim: 64,
                speech_encoder: SpeechStyleEncoderConfig {
                    gru_layers: 1,
                    conv_kernel: 5,
                    attention_heads: 1,
                    conv_filter_size: 32,
                },
            },
            acoustic: AcousticConfig {
                phoneme_embed: 32,
                encoder: stack.clone(),
                decoder: FftStackConfig {
                    layers: 2,
                    ..stack
                },
                variance: VariancePredictorConfig {
                    conv_kernel: 3,
                    conv_filter: 32,
                    dropout: 0.0,
                },
                kernel_predictor: KernelPredictorConfig {
                    conv_kernel: 3,
                    conv_filter: 8,
                    residual_convs: 2,
                },
                ..AcousticConfig::default()
            },
            refiner: DriftNetConfig {
                step_embed_dim: 32,
                residual_layers: 4,
                residual_channels: 48,
                conv_kernel: 3,
                conv_filter: 96,
                dilation_cycle: 2,
                ..DriftNetConfig::default()
            },
            train: TrainConfig {
                stage1_lr: 2e-3,
                stage2_lr: 3e-3,
                batch_size: 16,
                stage1_steps: 2000,
                stage2_steps: 1500,
                grad_clip: 1.0,
                log_every: 50,
                speech_prompt_only: false,
                lr_schedule: LrSchedule::Cosine,
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Reads a TOML config, then applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&s)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fe = &self.frontend;
        check(fe.sample_rate > 0, "frontend.sample_rate must be positive")?;
        check(fe.hop_length > 0, "frontend.hop_length must be positive")?;
        check(
            fe.win_length > 0 && fe.win_length <= fe.n_fft,
            "frontend.win_length must be in 1..=n_fft",
        )?;
        check(fe.n_mels >= 2, "frontend.n_mels must be at least 2")?;
        check(
            fe.f_min >= 0.0 && fe.f_max > fe.f_min && fe.f_max <= fe.sample_rate as f64 / 2.0,
            "frontend.f_min/f_max must satisfy 0 <= f_min < f_max <= sample_rate/2",
        )?;
        check(fe.log_floor > 0.0, "frontend.log_floor must be positive")?;

        let st = &self.style;
        check(st.style_dim > 0, "style.style_dim must be positive")?;
        check(st.adapter_hidden > 0, "style.adapter_hidden must be positive")?;
        check(st.provider_dim > 0, "style.provider_dim must be positive")?;
        let se = &st.speech_encoder;
        check(se.gru_layers > 0, "style.speech_encoder.gru_layers must be positive")?;
        check(odd(se.conv_kernel), "style.speech_encoder.conv_kernel must be odd")?;
        check(
            se.attention_heads > 0 && st.style_dim % se.attention_heads == 0,
            "style.speech_encoder.attention_heads must divide style_dim",
        )?;
        check(
            se.conv_filter_size >= 2 && se.conv_filter_size % 2 == 0,
            "style.speech_encoder.conv_filter_size must be even (gated convolution)",
        )?;

        let ac = &self.acoustic;
        check(ac.vocab_size >= text::VOCAB_SIZE, "acoustic.vocab_size smaller than the symbol set")?;
        check(ac.phoneme_embed > 0, "acoustic.phoneme_embed must be positive")?;
        for (name, s) in [("encoder", &ac.encoder), ("decoder", &ac.decoder)] {
            check(s.layers > 0, &format!("acoustic.{name}.layers must be positive"))?;
            check(odd(s.conv_kernel), &format!("acoustic.{name}.conv_kernel must be odd"))?;
            check(s.conv_filter > 0, &format!("acoustic.{name}.conv_filter must be positive"))?;
            check(
                s.heads > 0 && s.hidden % s.heads == 0,
                &format!("acoustic.{name}.heads must divide hidden"),
            )?;
            check(
                (0.0..1.0).contains(&s.dropout),
                &format!("acoustic.{name}.dropout must be in [0, 1)"),
            )?;
        }
        check(
            ac.encoder.hidden == ac.decoder.hidden,
            "acoustic.encoder.hidden and acoustic.decoder.hidden must match",
        )?;
        check(odd(ac.variance.conv_kernel), "acoustic.variance.conv_kernel must be odd")?;
        check(ac.variance.conv_filter > 0, "acoustic.variance.conv_filter must be positive")?;
        check(
            (0.0..1.0).contains(&ac.variance.dropout),
            "acoustic.variance.dropout must be in [0, 1)",
        )?;
        let kp = &ac.kernel_predictor;
        check(odd(kp.conv_kernel), "acoustic.kernel_predictor.conv_kernel must be odd")?;
        check(kp.conv_filter > 0, "acoustic.kernel_predictor.conv_filter must be positive")?;
        check(
            kp.residual_convs % 2 == 0,
            "acoustic.kernel_predictor.residual_convs must be even (two per residual block)",
        )?;
        check(ac.norm_eps > 0.0, "acoustic.norm_eps must be positive")?;
        check(ac.max_duration > 0, "acoustic.max_duration must be positive")?;

        let rf = &self.refiner;
        check(
            rf.step_embed_dim >= 2 && rf.step_embed_dim % 2 == 0,
            "refiner.step_embed_dim must be even",
        )?;
        check(rf.residual_layers > 0, "refiner.residual_layers must be positive")?;
        check(rf.residual_channels > 0, "refiner.residual_channels must be positive")?;
        check(odd(rf.conv_kernel), "refiner.conv_kernel must be odd")?;
        check(
            rf.conv_filter >= 2 && rf.conv_filter % 2 == 0,
            "refiner.conv_filter must be even (tanh/sigmoid halves)",
        )?;
        check(rf.dilation_cycle > 0, "refiner.dilation_cycle must be positive")?;

        let sa = &self.sampler;
        check(sa.euler_steps >= 1, "sampler.euler_steps must be at least 1")?;
        check(sa.rtol > 0.0 && sa.atol > 0.0, "sampler.rtol and sampler.atol must be positive")?;

        let tr = &self.train;
        check(tr.stage1_lr > 0.0 && tr.stage2_lr > 0.0, "train learning rates must be positive")?;
        check(tr.batch_size > 0, "train.batch_size must be positive")?;
        check(tr.grad_clip > 0.0, "train.grad_clip must be positive")?;
        Ok(())
    }
}

fn odd(k: usize) -> bool {
    k % 2 == 1
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_hyperparameter_tables() {
        let c = ModelConfig::default();
        let se = &c.style.speech_encoder;
        assert_eq!(c.style.adapter_hidden, 256);
        assert_eq!((se.gru_layers, se.conv_kernel, se.attention_heads, se.conv_filter_size), (3, 5, 1, 512));
        let a = &c.acoustic;
        assert_eq!(a.phoneme_embed, 192);
        for s in [&a.encoder, &a.decoder] {
            assert_eq!((s.layers, s.hidden, s.conv_kernel, s.conv_filter, s.heads), (4, 256, 9, 1024, 2));
            assert_eq!(s.dropout, 0.1);
        }
        assert_eq!((a.variance.conv_kernel, a.variance.conv_filter, a.variance.dropout), (3, 256, 0.5));
        assert_eq!((a.kernel_predictor.conv_kernel, a.kernel_predictor.conv_filter), (3, 16));
        assert_eq!(a.kernel_predictor.residual_convs, 6);
        let r = &c.refiner;
        assert_eq!(
            (r.step_embed_dim, r.residual_layers, r.residual_channels, r.conv_kernel, r.conv_filter),
            (256, 20, 256, 3, 512)
        );
        assert_eq!(c.sampler.sampler, SamplerKind::Rk45);
        assert_eq!((c.train.stage1_lr, c.train.stage2_lr, c.train.batch_size), (1e-4, 2e-4, 16));
        assert_eq!(c.train.stage1_steps, 200_000);
        c.validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_identity() {
        for cfg in [ModelConfig::default(), ModelConfig::toy()] {
            let s = cfg.to_toml_string();
            let back = ModelConfig::from_toml_str(&s).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml_string(), s);
        }
    }

    #[test]
    fn partial_files_fill_defaults_and_bad_values_are_rejected() {
        let cfg = ModelConfig::from_toml_str("seed = 7\n[sampler]\nsampler = \"euler\"\neuler_steps = 4\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sampler.sampler, SamplerKind::Euler);
        assert_eq!(cfg.sampler.euler_steps, 4);
        assert_eq!(cfg.acoustic, AcousticConfig::default());

        let err = ModelConfig::from_toml_str("[refiner]\nstep_embed_dim = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ModelConfig::from_toml_str("bogus = 1\n").is_err());
        assert!(ModelConfig::from_toml_str("[sampler]\neuler_steps = 0\n").is_err());
    }
}
