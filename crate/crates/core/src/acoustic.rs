//! Text-to-mel backbone conditioned on a unified style embedding.
//!
//! Phoneme encoder → style-conditioned variance adaptor → mel decoder. Every
//! encoder and decoder layer carries two style-adaptive convolutions whose
//! depthwise kernels and biases are predicted from E_U.
//!
//! All sequences are time-major: `[T × C]`.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Axis, Graph, ParamStore, Var};
use crate::config::{AcousticConfig, FftStackConfig, KernelPredictorConfig, VariancePredictorConfig};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_positions, xavier, Conv1d, LayerNorm, Linear, MultiHeadAttention};
use crate::style_space::StyleEmbedding;
use crate::tensor::Tensor;
use crate::text::PhonemeSequence;

/// `(x − μ) / (σ + eps)` per channel over time, population statistics.
pub fn normalize_context(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(Error::invalid("context feature has no frames"));
    }
    Ok(crate::autograd::standardize_forward(x, Axis::Rows, eps))
}

/// Predicted depthwise kernel `[C × K]` and bias `[1 × C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SAConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Maps E_U to a depthwise kernel and bias.
///
/// E_U is projected to a length-C sequence, lifted to `conv_filter` channels,
/// passed through residual convolutions, and read out by two heads.
#[derive(Clone, Debug)]
pub struct KernelPredictor {
    pub proj: Linear,
    pub input: Conv1d,
    pub residual: Vec<Conv1d>,
    pub kernel_head: Conv1d,
    pub bias_head: Conv1d,
    pub channels: usize,
    pub width: usize,
    pub style_dim: usize,
}

impl KernelPredictor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        style_dim: usize,
        channels: usize,
        cfg: &KernelPredictorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = cfg.conv_kernel;
        let f = cfg.conv_filter;
        let proj = Linear::new(store, &format!("{name}.proj"), style_dim, channels, rng);
        let input = Conv1d::new(store, &format!("{name}.input"), 1, f, k, 1, rng);
        let residual = (0..cfg.residual_convs)
            .map(|i| Conv1d::new(store, &format!("{name}.res.{i}"), f, f, k, 1, rng))
            .collect();
        let kernel_head = Conv1d::new(store, &format!("{name}.kernel"), f, k, k, 1, rng);
        let bias_head = Conv1d::new(store, &format!("{name}.bias"), f, 1, k, 1, rng);
        // Start near a centred delta so fresh layers pass the normalized input through.
        store.get_mut(kernel_head.w).scale_assign(0.1);
        store.get_mut(kernel_head.b).set(0, k / 2, 1.0);
        store.get_mut(bias_head.w).scale_assign(0.1);
        Self {
            proj,
            input,
            residual,
            kernel_head,
            bias_head,
            channels,
            width: k,
            style_dim,
        }
    }

    /// `e_u [1 × S]` → (`kernel [C × K]`, `bias [1 × C]`).
    pub fn forward(&self, g: &mut Graph, e_u: Var) -> (Var, Var) {
        let p = self.proj.forward(g, e_u);
        let seq = g.transpose(p);
        let h = self.input.forward(g, seq);
        let mut h = g.relu(h);
        for conv in &self.residual {
            let y = conv.forward(g, h);
            let y = g.relu(y);
            h = g.add(h, y);
        }
        let kernel = self.kernel_head.forward(g, h);
        let b = self.bias_head.forward(g, h);
        let bias = g.transpose(b);
        (kernel, bias)
    }

    pub fn predict(&self, store: &ParamStore, e_u: &StyleEmbedding) -> Result<SAConvParams> {
        if e_u.len() != self.style_dim {
            return Err(Error::invalid(format!(
                "style embedding has {} values, kernel predictor expects {}",
                e_u.len(),
                self.style_dim
            )));
        }
        let mut g = Graph::inference(store);
        let e = g.input(e_u.to_row());
        let (k, b) = self.forward(&mut g, e);
        Ok(SAConvParams {
            kernel: g.value(k).clone(),
            bias: g.value(b).clone(),
        })
    }
}

/// Style-adaptive convolution: predicted depthwise kernel over the
/// normalized context plus a predicted bias.
#[derive(Clone, Debug)]
pub struct SAConv {
    pub predictor: KernelPredictor,
    pub eps: f64,
}

impl SAConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        style_dim: usize,
        channels: usize,
        cfg: &KernelPredictorConfig,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            predictor: KernelPredictor::new(store, name, style_dim, channels, cfg, rng),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, e_u: Var) -> Var {
        let (kernel, bias) = self.predictor.forward(g, e_u);
        let xn = g.standardize(x, Axis::Rows, self.eps);
        let y = g.depthwise_conv(xn, kernel);
        g.add_row(y, bias)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor, e_u: &StyleEmbedding) -> Result<Tensor> {
        if x.cols() != self.predictor.channels {
            return Err(Error::invalid(format!(
                "input has {} channels, SAConv expects {}",
                x.cols(),
                self.predictor.channels
            )));
        }
        if x.rows() == 0 {
            return Err(Error::invalid("input has no frames"));
        }
        if e_u.len() != self.predictor.style_dim {
            return Err(Error::invalid(format!(
                "style embedding has {} values, SAConv expects {}",
                e_u.len(),
                self.predictor.style_dim
            )));
        }
        let mut g = Graph::inference(store);
        let xv = g.input(x.clone());
        let e = g.input(e_u.to_row());
        let y = self.forward(&mut g, xv, e);
        Ok(g.value(y).clone())
    }
}

/// Self-attention and convolutional feed-forward sublayers, each followed by SAConv.
#[derive(Clone, Debug)]
pub struct FftBlock {
    attn: MultiHeadAttention,
    sa_attn: SAConv,
    ffn_in: Conv1d,
    ffn_out: Conv1d,
    sa_ffn: SAConv,
    dropout: f64,
}

impl FftBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &FftStackConfig,
        style_dim: usize,
        kp: &KernelPredictorConfig,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = cfg.hidden;
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), h, cfg.heads, rng),
            sa_attn: SAConv::new(store, &format!("{name}.saconv1"), style_dim, h, kp, eps, rng),
            ffn_in: Conv1d::new(store, &format!("{name}.ffn_in"), h, cfg.conv_filter, cfg.conv_kernel, 1, rng),
            ffn_out: Conv1d::new(store, &format!("{name}.ffn_out"), cfg.conv_filter, h, 1, 1, rng),
            sa_ffn: SAConv::new(store, &format!("{name}.saconv2"), style_dim, h, kp, eps, rng),
            dropout: cfg.dropout,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, e_u: Var) -> Var {
        let a = self.attn.forward(g, x);
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let x = self.sa_attn.forward(g, x, e_u);
        let f = self.ffn_in.forward(g, x);
        let f = g.relu(f);
        let f = self.ffn_out.forward(g, f);
        let f = g.dropout(f, self.dropout);
        let x = g.add(x, f);
        self.sa_ffn.forward(g, x, e_u)
    }
}

fn fft_stack(
    store: &mut ParamStore,
    name: &str,
    cfg: &FftStackConfig,
    style_dim: usize,
    kp: &KernelPredictorConfig,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<FftBlock> {
    (0..cfg.layers)
        .map(|i| FftBlock::new(store, &format!("{name}.{i}"), cfg, style_dim, kp, eps, rng))
        .collect()
}

fn add_positions(g: &mut Graph, x: Var) -> Var {
    let (t, h) = g.shape(x);
    let pos = g.input(sinusoid_positions(t, h));
    g.add(x, pos)
}

#[derive(Clone, Debug)]
pub struct PhonemeEncoder {
    embedding: crate::autograd::ParamId,
    proj: Linear,
    blocks: Vec<FftBlock>,
    vocab: usize,
}

impl PhonemeEncoder {
    pub fn forward(&self, g: &mut Graph, seq: &PhonemeSequence, e_u: Var) -> Result<Var> {
        if let Some(bad) = seq.ids().iter().find(|&&i| i >= self.vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        let table = g.param(self.embedding);
        let x = g.gather_rows(table, seq.ids().to_vec());
        let x = self.proj.forward(g, x);
        let mut x = add_positions(g, x);
        for b in &self.blocks {
            x = b.forward(g, x, e_u);
        }
        Ok(x)
    }
}

/// Expands row `i` of `hidden` `durations[i]` times.
pub fn length_regulate(g: &mut Graph, hidden: Var, durations: &[usize]) -> Result<Var> {
    let idx = regulate_indices(g.shape(hidden).0, durations)?;
    Ok(g.gather_rows(hidden, idx))
}

fn regulate_indices(len: usize, durations: &[usize]) -> Result<Vec<usize>> {
    if durations.len() != len {
        return Err(Error::invalid(format!(
            "{} durations for {len} tokens",
            durations.len()
        )));
    }
    let idx: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat(i).take(d))
        .collect();
    if idx.is_empty() {
        return Err(Error::invalid("total duration is zero"));
    }
    Ok(idx)
}

/// Tensor form of [`length_regulate`].
pub fn length_regulate_tensor(hidden: &Tensor, durations: &[usize]) -> Result<Tensor> {
    Ok(hidden.select_rows(&regulate_indices(hidden.rows(), durations)?))
}

/// Two conv/ReLU/LayerNorm stages and a scalar readout per row.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
    ln2: LayerNorm,
    out: Linear,
    dropout: f64,
}

impl VariancePredictor {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, cfg: &VariancePredictorConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.conv_filter;
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), hidden, f, cfg.conv_kernel, 1, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), f),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), f, f, cfg.conv_kernel, 1, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), f),
            out: Linear::new(store, &format!("{name}.out"), f, 1, rng),
            dropout: cfg.dropout,
        }
    }

    /// `[N × H]` → `[N × 1]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = self.ln1.forward(g, h);
        let h = g.dropout(h, self.dropout);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = self.ln2.forward(g, h);
        let h = g.dropout(h, self.dropout);
        self.out.forward(g, h)
    }
}

/// Ground-truth durations (frames per token) with frame-level pitch and energy.
///
/// Pitch and energy are expected in the model's normalized domain.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceTargets {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl VarianceTargets {
    pub fn new(durations: Vec<usize>, pitch: Vec<f64>, energy: Vec<f64>) -> Result<Self> {
        let t: usize = durations.iter().sum();
        if t == 0 {
            return Err(Error::invalid("total duration is zero"));
        }
        if pitch.len() != t || energy.len() != t {
            return Err(Error::invalid(format!(
                "durations sum to {t} frames but pitch has {} and energy {}",
                pitch.len(),
                energy.len()
            )));
        }
        Ok(Self { durations, pitch, energy })
    }

    pub fn n_frames(&self) -> usize {
        self.pitch.len()
    }
}

/// Predictions on the tape: `log(d+1)` per token, pitch and energy per frame.
#[derive(Clone, Copy, Debug)]
pub struct VariancePrediction {
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
}

#[derive(Clone, Debug)]
pub struct VarianceAdaptor {
    style: Linear,
    pub duration: VariancePredictor,
    pub pitch: VariancePredictor,
    pub energy: VariancePredictor,
    pitch_embed: Linear,
    energy_embed: Linear,
    max_duration: usize,
}

impl VarianceAdaptor {
    /// Returns the frame-level hidden sequence, the predictions and the durations used.
    ///
    /// With `targets`, ground-truth durations, pitch and energy drive the
    /// expansion (teacher forcing); without, the predictions do.
    pub fn forward(
        &self,
        g: &mut Graph,
        hidden: Var,
        e_u: Var,
        targets: Option<&VarianceTargets>,
    ) -> Result<(Var, VariancePrediction, Vec<usize>)> {
        let s = self.style.forward(g, e_u);
        let h = g.add_row(hidden, s);
        let log_duration = self.duration.forward(g, h);
        let durations = match targets {
            Some(t) => t.durations.clone(),
            None => {
                let mut d: Vec<usize> = g
                    .value(log_duration)
                    .data()
                    .iter()
                    .map(|&l| (l.exp() - 1.0).round().clamp(1.0, self.max_duration as f64) as usize)
                    .collect();
                d.truncate(g.shape(h).0);
                d
            }
        };
        let x = length_regulate(g, h, &durations)?;
        let pitch = self.pitch.forward(g, x);
        let energy = self.energy.forward(g, x);
        let (p_in, e_in) = match targets {
            Some(t) => {
                let n = t.n_frames();
                (
                    g.input(Tensor::from_vec(n, 1, t.pitch.clone())),
                    g.input(Tensor::from_vec(n, 1, t.energy.clone())),
                )
            }
            None => (g.detach(pitch), g.detach(energy)),
        };
        let pe = self.pitch_embed.forward(g, p_in);
        let ee = self.energy_embed.forward(g, e_in);
        let x = g.add(x, pe);
        let x = g.add(x, ee);
        Ok((
            x,
            VariancePrediction {
                log_duration,
                pitch,
                energy,
            },
            durations,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct MelDecoder {
    blocks: Vec<FftBlock>,
    out: Linear,
}

impl MelDecoder {
    pub fn forward(&self, g: &mut Graph, expanded: Var, e_u: Var) -> Result<Var> {
        if g.shape(expanded).0 == 0 {
            return Err(Error::invalid("decoder input has no frames"));
        }
        let mut x = add_positions(g, expanded);
        for b in &self.blocks {
            x = b.forward(g, x, e_u);
        }
        Ok(self.out.forward(g, x))
    }
}

/// Outputs of a teacher-forced forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AcousticOutputs {
    pub mel: Var,
    pub variance: VariancePrediction,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub encoder: PhonemeEncoder,
    pub adaptor: VarianceAdaptor,
    pub decoder: MelDecoder,
    pub style_dim: usize,
    pub n_mels: usize,
    pub hidden: usize,
}

impl AcousticModel {
    pub fn new(
        store: &mut ParamStore,
        cfg: &AcousticConfig,
        style_dim: usize,
        n_mels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.encoder.hidden != cfg.decoder.hidden {
            return Err(Error::config("encoder and decoder hidden sizes differ"));
        }
        let h = cfg.encoder.hidden;
        let kp = &cfg.kernel_predictor;
        let e = cfg.phoneme_embed;
        let encoder = PhonemeEncoder {
            embedding: store.add("acoustic.embedding", xavier(rng, cfg.vocab_size, e, e, e)),
            proj: Linear::new(store, "acoustic.embed_proj", e, h, rng),
            blocks: fft_stack(store, "acoustic.encoder", &cfg.encoder, style_dim, kp, cfg.norm_eps, rng),
            vocab: cfg.vocab_size,
        };
        let vp = &cfg.variance;
        let adaptor = VarianceAdaptor {
            style: Linear::new(store, "acoustic.variance.style", style_dim, h, rng),
            duration: VariancePredictor::new(store, "acoustic.variance.duration", h, vp, rng),
            pitch: VariancePredictor::new(store, "acoustic.variance.pitch", h, vp, rng),
            energy: VariancePredictor::new(store, "acoustic.variance.energy", h, vp, rng),
            pitch_embed: Linear::new(store, "acoustic.variance.pitch_embed", 1, h, rng),
            energy_embed: Linear::new(store, "acoustic.variance.energy_embed", 1, h, rng),
            max_duration: cfg.max_duration,
        };
        let decoder = MelDecoder {
            blocks: fft_stack(store, "acoustic.decoder", &cfg.decoder, style_dim, kp, cfg.norm_eps, rng),
            out: Linear::new(store, "acoustic.mel_out", h, n_mels, rng),
        };
        Ok(Self {
            encoder,
            adaptor,
            decoder,
            style_dim,
            n_mels,
            hidden: h,
        })
    }

    fn check_style(&self, g: &Graph, e_u: Var) -> Result<()> {
        let s = g.shape(e_u);
        if s != (1, self.style_dim) {
            return Err(Error::invalid(format!(
                "style embedding shape {s:?}, expected (1, {})",
                self.style_dim
            )));
        }
        Ok(())
    }

    /// Teacher-forced pass used for training.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        seq: &PhonemeSequence,
        e_u: Var,
        targets: &VarianceTargets,
    ) -> Result<AcousticOutputs> {
        self.check_style(g, e_u)?;
        let h = self.encoder.forward(g, seq, e_u)?;
        let (x, variance, _) = self.adaptor.forward(g, h, e_u, Some(targets))?;
        let mel = self.decoder.forward(g, x, e_u)?;
        Ok(AcousticOutputs { mel, variance })
    }

    /// Free-running pass on the tape; durations, pitch and energy come from the predictors.
    pub fn forward_infer(&self, g: &mut Graph, seq: &PhonemeSequence, e_u: Var) -> Result<(Var, Vec<usize>)> {
        self.check_style(g, e_u)?;
        let h = self.encoder.forward(g, seq, e_u)?;
        let (x, _, d) = self.adaptor.forward(g, h, e_u, None)?;
        Ok((self.decoder.forward(g, x, e_u)?, d))
    }

    /// Normalized-domain mel `[T × n_mels]` and the predicted durations.
    pub fn infer(&self, store: &ParamStore, seq: &PhonemeSequence, e_u: &StyleEmbedding) -> Result<(Tensor, Vec<usize>)> {
        let mut g = Graph::inference(store);
        let e = g.input(e_u.to_row());
        let (mel, d) = self.forward_infer(&mut g, seq, e)?;
        Ok((g.value(mel).clone(), d))
    }

    pub fn encode_phonemes(&self, store: &ParamStore, seq: &PhonemeSequence, e_u: &StyleEmbedding) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let e = g.input(e_u.to_row());
        self.check_style(&g, e)?;
        let h = self.encoder.forward(&mut g, seq, e)?;
        Ok(g.value(h).clone())
    }

    /// Predicted `(log(d+1) per token, pitch per frame, energy per frame)`.
    pub fn predict_variances(
        &self,
        store: &ParamStore,
        hidden: &Tensor,
        e_u: &StyleEmbedding,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if hidden.cols() != self.hidden || hidden.rows() == 0 {
            return Err(Error::invalid(format!(
                "hidden shape {:?}, expected [L × {}]",
                hidden.shape(),
                self.hidden
            )));
        }
        let mut g = Graph::inference(store);
        let e = g.input(e_u.to_row());
        self.check_style(&g, e)?;
        let h = g.input(hidden.clone());
        let (_, p, _) = self.adaptor.forward(&mut g, h, e, None)?;
        Ok((
            g.value(p.log_duration).data().to_vec(),
            g.value(p.pitch).data().to_vec(),
            g.value(p.energy).data().to_vec(),
        ))
    }

    pub fn decode_mel(&self, store: &ParamStore, expanded: &Tensor, e_u: &StyleEmbedding) -> Result<Tensor> {
        if expanded.cols() != self.hidden {
            return Err(Error::invalid(format!(
                "decoder input has {} channels, expected {}",
                expanded.cols(),
                self.hidden
            )));
        }
        let mut g = Graph::inference(store);
        let e = g.input(e_u.to_row());
        self.check_style(&g, e)?;
        let x = g.input(expanded.clone());
        let m = self.decoder.forward(&mut g, x, e)?;
        Ok(g.value(m).clone())
    }
}

/// Terms of the first-stage objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss {
    pub total: Var,
    pub mel: Var,
    pub variance: Var,
    pub ampe: Var,
}

fn mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d2 = g.mul(d, d);
    g.mean(d2)
}

/// `L_Mel + L_Var + L_AMPE`, unweighted.
///
/// `L_Mel` is the mean absolute error; `L_Var` sums the MSE of `log(d+1)`,
/// frame pitch and frame energy.
pub fn stage1_loss(
    g: &mut Graph,
    pred_mel: Var,
    gt_mel: &Tensor,
    pred: &VariancePrediction,
    gt: &VarianceTargets,
    ampe: Var,
) -> Result<Stage1Loss> {
    if g.shape(pred_mel) != gt_mel.shape() {
        return Err(Error::invalid(format!(
            "predicted mel {:?} vs target {:?}",
            g.shape(pred_mel),
            gt_mel.shape()
        )));
    }
    let l = gt.durations.len();
    let t = gt.n_frames();
    let check = |name: &str, s: (usize, usize), n: usize| {
        if s != (n, 1) {
            Err(Error::invalid(format!("{name} prediction {s:?}, expected ({n}, 1)")))
        } else {
            Ok(())
        }
    };
    check("duration", g.shape(pred.log_duration), l)?;
    check("pitch", g.shape(pred.pitch), t)?;
    check("energy", g.shape(pred.energy), t)?;
    if g.shape(ampe) != (1, 1) {
        return Err(Error::invalid("alignment loss must be a scalar"));
    }

    let gm = g.input(gt_mel.clone());
    let d = g.sub(pred_mel, gm);
    let d = g.abs(d);
    let mel = g.mean(d);

    let log_d: Vec<f64> = gt.durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect();
    let gd = g.input(Tensor::from_vec(l, 1, log_d));
    let gp = g.input(Tensor::from_vec(t, 1, gt.pitch.clone()));
    let ge = g.input(Tensor::from_vec(t, 1, gt.energy.clone()));
    let ld = mse(g, pred.log_duration, gd);
    let lp = mse(g, pred.pitch, gp);
    let le = mse(g, pred.energy, ge);
    let lpe = g.add(lp, le);
    let variance = g.add(ld, lpe);

    let mv = g.add(mel, variance);
    let total = g.add(mv, ampe);
    Ok(Stage1Loss {
        total,
        mel,
        variance,
        ampe,
    })
}

/// Plain-value predictions for [`stage1_loss_value`].
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceValues {
    pub log_duration: Vec<f64>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Scalar `(total, mel, variance)` of the first-stage objective.
pub fn stage1_loss_value(
    pred_mel: &Tensor,
    gt_mel: &Tensor,
    pred: &VarianceValues,
    gt: &VarianceTargets,
    ampe: f64,
) -> Result<(f64, f64, f64)> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let pm = g.input(pred_mel.clone());
    let col = |g: &mut Graph, v: &[f64]| g.input(Tensor::from_vec(v.len(), 1, v.to_vec()));
    let p = VariancePrediction {
        log_duration: col(&mut g, &pred.log_duration),
        pitch: col(&mut g, &pred.pitch),
        energy: col(&mut g, &pred.energy),
    };
    let a = g.input(Tensor::scalar(ampe));
    let l = stage1_loss(&mut g, pm, gt_mel, &p, gt, a)?;
    Ok((g.value(l.total).item(), g.value(l.mel).item(), g.value(l.variance).item()))
}

/// Parses `utt_id dur1 dur2 ...` lines; blank lines and `#` comments are skipped.
pub fn parse_alignments(text: &str) -> Result<HashMap<String, Vec<usize>>> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap_or_default().to_string();
        let durs = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::invalid(format!("alignment line {}: bad duration {p:?}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if durs.is_empty() {
            return Err(Error::invalid(format!("alignment line {}: no durations", n + 1)));
        }
        if out.insert(id.clone(), durs).is_some() {
            return Err(Error::invalid(format!("alignment line {}: duplicate id {id}", n + 1)));
        }
    }
    Ok(out)
}

pub fn format_alignment(utt_id: &str, durations: &[usize]) -> String {
    let mut s = utt_id.to_string();
    for d in durations {
        s.push(' ');
        s.push_str(&d.to_string());
    }
    s
}

/// Spreads `n_frames` over `n_tokens` as evenly as possible.
pub fn uniform_durations(n_tokens: usize, n_frames: usize) -> Result<Vec<usize>> {
    if n_tokens == 0 {
        return Err(Error::invalid("no tokens to align"));
    }
    Ok((0..n_tokens)
        .map(|i| (i + 1) * n_frames / n_tokens - i * n_frames / n_tokens)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::{Adam, AdamConfig};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn kp_cfg() -> KernelPredictorConfig {
        KernelPredictorConfig {
            conv_kernel: 3,
            conv_filter: 4,
            residual_convs: 2,
        }
    }

    #[test]
    fn normalize_context_examples() {
        let x = Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let y = normalize_context(&x, 1e-5).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        for (v, e) in y.data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((v - e).abs() < 1e-4);
        }
        assert!((y.data()[2] - 1.2247).abs() < 1e-4);

        let c = normalize_context(&Tensor::full(5, 2, 3.5), 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let again = normalize_context(&y, 1e-5).unwrap();
        assert!(again.max_abs_diff(&y) < 1e-4);
        assert!(normalize_context(&Tensor::zeros(0, 3), 1e-5).is_err());
    }

    #[test]
    fn kernel_predictor_shapes_and_distinct_styles() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kp = KernelPredictor::new(&mut store, "kp", 256, 256, &KernelPredictorConfig::default(), &mut rng);
        let a = StyleEmbedding::new(rand_tensor(&mut rng, 1, 256).into_vec(), crate::style_space::Modality::Speech).unwrap();
        let b = StyleEmbedding::new(rand_tensor(&mut rng, 1, 256).into_vec(), crate::style_space::Modality::Speech).unwrap();
        let pa = kp.predict(&store, &a).unwrap();
        let pb = kp.predict(&store, &b).unwrap();
        assert_eq!(pa.kernel.shape(), (256, 3));
        assert_eq!(pa.bias.shape(), (1, 256));
        assert_ne!(pa.kernel, pb.kernel);
        let short = StyleEmbedding::new(vec![0.0; 10], crate::style_space::Modality::Speech).unwrap();
        assert!(matches!(kp.predict(&store, &short), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kernel_predictor_jacobian_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kp = KernelPredictor::new(&mut store, "kp", 5, 4, &kp_cfg(), &mut rng);
        let e0 = rand_tensor(&mut rng, 1, 5);
        let h = 1e-5;
        let n_out = 4 * 3 + 4;
        let eval = |e: &Tensor| {
            let mut g = Graph::inference(&store);
            let v = g.input(e.clone());
            let (k, b) = kp.forward(&mut g, v);
            let mut out = g.value(k).data().to_vec();
            out.extend_from_slice(g.value(b).data());
            out
        };
        for o in 0..n_out {
            let mut g = Graph::new(&store);
            let v = g.watch(e0.clone());
            let (k, b) = kp.forward(&mut g, v);
            let flat = g.reshape(k, 1, 12);
            let both = g.concat_cols(&[flat, b]);
            let pick = g.slice_cols(both, o, 1);
            let s = g.sum(pick);
            let an = g.backward(s).wrt(v).cloned().unwrap();
            for i in 0..5 {
                let mut p = e0.clone();
                p.data_mut()[i] += h;
                let mut m = e0.clone();
                m.data_mut()[i] -= h;
                let fd = (eval(&p)[o] - eval(&m)[o]) / (2.0 * h);
                let a = an.data()[i];
                let scale = fd.abs().max(a.abs());
                assert!((fd - a).abs() <= 1e-4 * scale.max(1e-6), "out {o} in {i}: {fd} vs {a}");
            }
        }
    }

    /// Nested-loop oracle: normalize per channel, correlate with a centred kernel, add bias.
    fn saconv_oracle(x: &Tensor, p: &SAConvParams, eps: f64) -> Tensor {
        let (t, c) = x.shape();
        let k = p.kernel.cols();
        let mut out = Tensor::zeros(t, c);
        for ch in 0..c {
            let col: Vec<f64> = (0..t).map(|i| x.get(i, ch)).collect();
            let mean = col.iter().sum::<f64>() / t as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
            let xn: Vec<f64> = col.iter().map(|v| (v - mean) / (sd + eps)).collect();
            for i in 0..t {
                let mut acc = p.bias.get(0, ch);
                for j in 0..k {
                    let src = i as isize + j as isize - (k / 2) as isize;
                    if (0..t as isize).contains(&src) {
                        acc += p.kernel.get(ch, j) * xn[src as usize];
                    }
                }
                out.set(i, ch, acc);
            }
        }
        out
    }

    #[test]
    fn saconv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let c = rng.gen_range(1..=8);
            let t = rng.gen_range(1..=16);
            let mut store = ParamStore::new();
            let sa = SAConv::new(&mut store, "sa", 6, c, &kp_cfg(), 1e-5, &mut rng);
            let e = StyleEmbedding::new(rand_tensor(&mut rng, 1, 6).into_vec(), crate::style_space::Modality::Text).unwrap();
            let x = rand_tensor(&mut rng, t, c);
            let y = sa.apply(&store, &x, &e).unwrap();
            let p = sa.predictor.predict(&store, &e).unwrap();
            assert!(y.max_abs_diff(&saconv_oracle(&x, &p, 1e-5)) < 1e-6);
        }
    }

    #[test]
    fn saconv_constant_input_yields_bias_and_delta_kernel_yields_normalized_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sa = SAConv::new(&mut store, "sa", 6, 4, &kp_cfg(), 1e-5, &mut rng);
        let e = StyleEmbedding::new(vec![0.3, -0.1, 0.5, 0.2, 0.0, 1.0], crate::style_space::Modality::Speech).unwrap();
        let bias = sa.predictor.predict(&store, &e).unwrap().bias;
        let y = sa.apply(&store, &Tensor::full(7, 4, 2.0), &e).unwrap();
        for r in 0..7 {
            assert_eq!(y.row(r), bias.data());
        }

        let kp = &sa.predictor;
        store.get_mut(kp.kernel_head.w).scale_assign(0.0);
        *store.get_mut(kp.kernel_head.b) = Tensor::row_vector(&[0.0, 1.0, 0.0]);
        store.get_mut(kp.bias_head.w).scale_assign(0.0);
        store.get_mut(kp.bias_head.b).scale_assign(0.0);
        let x = rand_tensor(&mut rng, 9, 4);
        let y = sa.apply(&store, &x, &e).unwrap();
        assert!(y.max_abs_diff(&normalize_context(&x, 1e-5).unwrap()) < 1e-12);

        assert!(matches!(sa.apply(&store, &Tensor::zeros(3, 5), &e), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn length_regulate_examples() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let y = length_regulate_tensor(&h, &[2, 1]).unwrap();
        assert_eq!(y, Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![3.0, 4.0]]));
        assert_eq!(length_regulate_tensor(&h, &[1, 1]).unwrap(), h);
        let z = length_regulate_tensor(&h, &[0, 3]).unwrap();
        assert_eq!(z, Tensor::from_rows(&vec![vec![3.0, 4.0]; 3]));
        assert!(length_regulate_tensor(&h, &[0, 0]).is_err());
        assert!(length_regulate_tensor(&h, &[1]).is_err());
    }

    #[test]
    fn stage1_loss_examples() {
        let gt = VarianceTargets::new(vec![1, 2], vec![0.1, 0.2, 0.3], vec![1.0, 0.0, -1.0]).unwrap();
        let perfect = VarianceValues {
            log_duration: vec![2f64.ln(), 3f64.ln()],
            pitch: gt.pitch.clone(),
            energy: gt.energy.clone(),
        };
        let mel = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1);
        let (total, _, _) = stage1_loss_value(&mel, &mel, &perfect, &gt, 0.0).unwrap();
        assert_eq!(total, 0.0);

        let shifted = mel.map(|v| v + 0.5);
        let (total, l_mel, l_var) = stage1_loss_value(&shifted, &mel, &perfect, &gt, 0.0).unwrap();
        assert!((l_mel - 0.5).abs() < 1e-12);
        assert_eq!(l_var, 0.0);
        assert!((total - 0.5).abs() < 1e-12);

        let noisy = VarianceValues {
            log_duration: vec![0.0, 0.0],
            pitch: vec![0.0; 3],
            energy: vec![0.0; 3],
        };
        let (total, l_mel, l_var) = stage1_loss_value(&shifted, &mel, &noisy, &gt, 0.7).unwrap();
        let ld = (2f64.ln().powi(2) + 3f64.ln().powi(2)) / 2.0;
        let lp = (0.01 + 0.04 + 0.09) / 3.0;
        let le = 2.0 / 3.0;
        assert!((l_var - (ld + lp + le)).abs() < 1e-12);
        assert_eq!(total, l_mel + l_var + 0.7);

        assert!(stage1_loss_value(&mel.slice_rows(0, 2), &mel, &perfect, &gt, 0.0).is_err());
    }

    #[test]
    fn alignment_file_round_trip_and_uniform_durations() {
        let text = "# header\nutt1 3 0 2\n\nutt2 1\n";
        let a = parse_alignments(text).unwrap();
        assert_eq!(a["utt1"], vec![3, 0, 2]);
        assert_eq!(format_alignment("utt1", &a["utt1"]), "utt1 3 0 2");
        assert!(parse_alignments("u x").is_err());
        assert!(parse_alignments("u").is_err());
        assert!(parse_alignments("u 1\nu 2").is_err());
        let d = uniform_durations(3, 10).unwrap();
        assert_eq!(d.iter().sum::<usize>(), 10);
        assert!(d.iter().all(|&x| x == 3 || x == 4));
    }

    pub(crate) fn micro_config() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.style.style_dim = 6;
        for s in [&mut cfg.acoustic.encoder, &mut cfg.acoustic.decoder] {
            s.layers = 1;
            s.hidden = 8;
            s.conv_filter = 8;
            s.conv_kernel = 3;
            s.heads = 2;
            s.dropout = 0.0;
        }
        cfg.acoustic.phoneme_embed = 4;
        cfg.acoustic.variance.conv_filter = 4;
        cfg.acoustic.kernel_predictor = kp_cfg();
        cfg.frontend.n_mels = 5;
        cfg
    }

    fn micro_model(store: &mut ParamStore) -> (AcousticModel, ModelConfig) {
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m = AcousticModel::new(store, &cfg.acoustic, cfg.style.style_dim, cfg.frontend.n_mels, &mut rng).unwrap();
        (m, cfg)
    }

    fn style(v: &[f64]) -> StyleEmbedding {
        StyleEmbedding::new(v.to_vec(), crate::style_space::Modality::Speech).unwrap()
    }

    #[test]
    fn encoder_shape_conditioning_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig::default();
        let m = AcousticModel::new(&mut store, &cfg.acoustic, 256, 80, &mut rng).unwrap();
        let seq = PhonemeSequence::from_text("hello, world!").unwrap();
        assert_eq!(seq.len(), 13);
        let a = style(&rand_tensor(&mut rng, 1, 256).into_vec());
        let b = style(&rand_tensor(&mut rng, 1, 256).into_vec());
        let ha = m.encode_phonemes(&store, &seq, &a).unwrap();
        assert_eq!(ha.shape(), (13, 256));
        assert_eq!(ha, m.encode_phonemes(&store, &seq, &a).unwrap());
        assert_ne!(ha, m.encode_phonemes(&store, &seq, &b).unwrap());
        let (ld, _, _) = m.predict_variances(&store, &ha, &a).unwrap();
        assert_eq!(ld.len(), 13);
    }

    #[test]
    fn decoder_shape_and_style_sensitivity() {
        let mut store = ParamStore::new();
        let (m, _) = micro_model(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 50, 8);
        let a = style(&[0.1, 0.2, 0.3, -0.4, 0.5, 0.0]);
        let b = style(&[-0.3, 0.9, 0.1, 0.4, -0.5, 0.2]);
        let ma = m.decode_mel(&store, &x, &a).unwrap();
        let mb = m.decode_mel(&store, &x, &b).unwrap();
        assert_eq!(ma.shape(), (50, 5));
        assert!(ma.sub(&mb).norm() > 0.0);
    }

    #[test]
    fn duration_loss_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let (m, _) = micro_model(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hidden = rand_tensor(&mut rng, 4, 8);
        let e = Tensor::row_vector(&[0.1, 0.2, 0.3, -0.4, 0.5, 0.0]);
        let target = Tensor::from_vec(4, 1, vec![1.0, 0.5, 2.0, 1.5]);
        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let h = g.input(hidden.clone());
            let ev = g.input(e.clone());
            let st = m.adaptor.style.forward(&mut g, ev);
            let hc = g.add_row(h, st);
            let ld = m.adaptor.duration.forward(&mut g, hc);
            let t = g.input(target.clone());
            let l = mse(&mut g, ld, t);
            (g.value(l).item(), g.backward(l).into_param_grads(s))
        };
        let (_, grads) = loss_of(&store);
        let ids: Vec<_> = store.ids_with_prefix("acoustic.variance.duration").collect();
        crate::testutil::check_param_grads(&mut store, &ids, &grads, |s| loss_of(s).0, 1e-4);
    }

    #[test]
    fn end_to_end_stage1_gradient_on_micro_model() {
        let mut store = ParamStore::new();
        let (m, _) = micro_model(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = PhonemeSequence::from_text("abc").unwrap();
        let gt = VarianceTargets::new(vec![2, 1, 3], rand_tensor(&mut rng, 1, 6).into_vec(), rand_tensor(&mut rng, 1, 6).into_vec()).unwrap();
        let mel = rand_tensor(&mut rng, 6, 5);
        let e = Tensor::row_vector(&[0.1, 0.2, 0.3, -0.4, 0.5, 0.0]);
        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let ev = g.input(e.clone());
            let out = m.forward_train(&mut g, &seq, ev, &gt).unwrap();
            let zero = g.input(Tensor::scalar(0.0));
            let l = stage1_loss(&mut g, out.mel, &mel, &out.variance, &gt, zero).unwrap();
            (g.value(l.total).item(), g.backward(l.total).into_param_grads(s))
        };
        let (_, grads) = loss_of(&store);
        let ids: Vec<_> = store.ids().collect();
        crate::testutil::check_param_grads(&mut store, &ids, &grads, |s| loss_of(s).0, 1e-3);
    }

    #[test]
    fn single_utterance_overfits_below_tenth_mae() {
        let mut store = ParamStore::new();
        let mut cfg = micro_config();
        cfg.acoustic.encoder.hidden = 16;
        cfg.acoustic.decoder.hidden = 16;
        cfg.acoustic.decoder.conv_filter = 32;
        cfg.frontend.n_mels = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = AcousticModel::new(&mut store, &cfg.acoustic, 6, 12, &mut rng).unwrap();
        let seq = PhonemeSequence::from_text("hi there").unwrap();
        let d = uniform_durations(seq.len(), 24).unwrap();
        let gt = VarianceTargets::new(d, vec![0.0; 24], vec![0.0; 24]).unwrap();
        let mel = Tensor::from_fn(24, 12, |t, b| ((t as f64 * 0.4).sin() + (b as f64 * 0.5).cos()) * 0.8);
        let e = Tensor::row_vector(&[0.1, 0.2, 0.3, -0.4, 0.5, 0.0]);
        let mut opt = Adam::new(AdamConfig::with_lr(3e-3));
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let ev = g.input(e.clone());
                let out = m.forward_train(&mut g, &seq, ev, &gt).unwrap();
                let zero = g.input(Tensor::scalar(0.0));
                let l = stage1_loss(&mut g, out.mel, &mel, &out.variance, &gt, zero).unwrap();
                last = g.value(l.mel).item();
                g.backward(l.total).into_param_grads(&store)
            };
            opt.step(&mut store, &grads);
        }
        assert!(last < 0.1, "L_Mel after 500 steps: {last}");
    }
}
