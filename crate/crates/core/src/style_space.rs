//! Aligned multi-modal prompt encoder.
//!
//! Speech prompts go through a trainable [`SpeechStyleEncoder`]. Text and
//! face-image prompts go through a frozen [`EmbeddingProvider`] followed by a
//! trainable two-layer [`Adapter`]. All three land in one `style_dim`-wide
//! space, pulled together by [`ampe_loss`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamStore, Var};
use crate::config::{SpeechStyleEncoderConfig, StyleConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Conv1d, Gru, Linear, MultiHeadAttention};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Image,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// A point in the shared style space.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    values: Vec<f64>,
    modality: Modality,
}

impl StyleEmbedding {
    pub fn new(values: Vec<f64>, modality: Modality) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("style embedding is empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("style embedding has non-finite values"));
        }
        Ok(Self { values, modality })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_row(&self) -> Tensor {
        Tensor::row_vector(&self.values)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            modality: self.modality,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Text,
    Image,
}

/// Frozen pretrained encoder behind the text and image adapters.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn deterministic(&self) -> bool;
    fn embed(&self, payload: &[u8], kind: PromptKind) -> Result<Vec<f32>>;
}

/// Offline stand-in for a pretrained text/image encoder.
///
/// The payload is turned into a sparse hashed feature vector (word tokens
/// for text, 8-byte chunks for images), projected by a fixed seeded random
/// matrix, and L2-normalized. Similar payloads share features and land close.
#[derive(Clone, Debug)]
pub struct StubProvider {
    projection: Tensor,
    seed: u64,
}

const STUB_FEATURES: usize = 256;

impl StubProvider {
    pub fn new(output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (STUB_FEATURES as f64).sqrt();
        let projection = Tensor::from_fn(STUB_FEATURES, output_dim, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * scale
        });
        Self { projection, seed }
    }

    /// The frozen projection matrix.
    pub fn parameters(&self) -> &Tensor {
        &self.projection
    }

    fn features(&self, payload: &[u8], kind: PromptKind) -> Vec<f64> {
        let mut feats = vec![0.0; STUB_FEATURES];
        let mut add = |chunk: &[u8]| {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update([kind as u8]);
            h.update(chunk);
            let d = h.finalize();
            let bucket = u16::from_le_bytes([d[0], d[1]]) as usize % STUB_FEATURES;
            let sign = if d[2] & 1 == 0 { 1.0 } else { -1.0 };
            feats[bucket] += sign;
        };
        match kind {
            PromptKind::Text => {
                let text = String::from_utf8_lossy(payload).to_lowercase();
                for tok in text
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|t| !t.is_empty())
                {
                    add(tok.as_bytes());
                }
            }
            PromptKind::Image => {
                for chunk in payload.chunks(8) {
                    add(chunk);
                }
            }
        }
        feats
    }
}

impl EmbeddingProvider for StubProvider {
    fn name(&self) -> &str {
        "stub"
    }

    fn output_dim(&self) -> usize {
        self.projection.cols()
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, payload: &[u8], kind: PromptKind) -> Result<Vec<f32>> {
        if payload.is_empty() {
            return Err(Error::invalid("empty prompt payload"));
        }
        let f = Tensor::row_vector(&self.features(payload, kind));
        let out = f.matmul(&self.projection);
        let norm = out.norm();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        Ok(out.data().iter().map(|v| (v * scale) as f32).collect())
    }
}

/// Two fully connected layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Adapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        style_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, style_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn forward(&self, g: &mut Graph, provider_out: Var) -> Var {
        let h = self.fc1.forward(g, provider_out);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Applies the frozen provider to a raw payload and checks its width.
pub fn provider_vector(
    raw: &[u8],
    kind: PromptKind,
    provider: &dyn EmbeddingProvider,
    adapter: &Adapter,
) -> Result<Tensor> {
    if provider.output_dim() != adapter.input_dim() {
        return Err(Error::config(format!(
            "provider {} emits {} values, adapter expects {}",
            provider.name(),
            provider.output_dim(),
            adapter.input_dim()
        )));
    }
    let v = provider.embed(raw, kind)?;
    if v.len() != adapter.input_dim() {
        return Err(Error::config(format!(
            "provider {} returned {} values, declared {}",
            provider.name(),
            v.len(),
            provider.output_dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("provider output is not finite"));
    }
    Ok(Tensor::row_vector(&v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>()))
}

/// E_T or E_I: frozen provider followed by the trainable adapter.
pub fn encode_adapter_prompt(
    raw: &[u8],
    kind: PromptKind,
    provider: &dyn EmbeddingProvider,
    adapter: &Adapter,
    store: &ParamStore,
) -> Result<StyleEmbedding> {
    let pv = provider_vector(raw, kind, provider, adapter)?;
    let mut g = Graph::inference(store);
    let x = g.input(pv);
    let y = adapter.forward(&mut g, x);
    let modality = match kind {
        PromptKind::Text => Modality::Text,
        PromptKind::Image => Modality::Image,
    };
    StyleEmbedding::new(g.value(y).data().to_vec(), modality)
}

/// Mel-based reference encoder: spectral processing, gated temporal
/// convolutions, self-attention, a stacked GRU and temporal mean pooling.
#[derive(Clone, Debug)]
pub struct SpeechStyleEncoder {
    spectral1: Linear,
    spectral2: Linear,
    temporal: Vec<(Conv1d, Linear)>,
    attention: MultiHeadAttention,
    gru: Gru,
    out: Linear,
    n_mels: usize,
    style_dim: usize,
}

impl SpeechStyleEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_mels: usize,
        style_dim: usize,
        cfg: &SpeechStyleEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = style_dim;
        let gated = cfg.conv_filter_size / 2;
        let temporal = (0..2)
            .map(|i| {
                (
                    Conv1d::new(
                        store,
                        &format!("{name}.temporal.{i}.conv"),
                        h,
                        cfg.conv_filter_size,
                        cfg.conv_kernel,
                        1,
                        rng,
                    ),
                    Linear::new(store, &format!("{name}.temporal.{i}.proj"), gated, h, rng),
                )
            })
            .collect();
        Self {
            spectral1: Linear::new(store, &format!("{name}.spectral1"), n_mels, h, rng),
            spectral2: Linear::new(store, &format!("{name}.spectral2"), h, h, rng),
            temporal,
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), h, cfg.attention_heads, rng),
            gru: Gru::new(store, &format!("{name}.gru"), h, h, cfg.gru_layers, rng),
            out: Linear::new(store, &format!("{name}.out"), h, style_dim, rng),
            n_mels,
            style_dim,
        }
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    /// `mel [T × n_mels]` → E_S `[1 × style_dim]`.
    pub fn forward(&self, g: &mut Graph, mel: Var) -> Result<Var> {
        let (t, c) = g.shape(mel);
        if t == 0 {
            return Err(Error::invalid("speech prompt mel has no frames"));
        }
        if c != self.n_mels {
            return Err(Error::invalid(format!(
                "speech prompt has {c} mel bins, encoder expects {}",
                self.n_mels
            )));
        }
        let x = self.spectral1.forward(g, mel);
        let x = g.silu(x);
        let x = self.spectral2.forward(g, x);
        let mut x = g.silu(x);
        for (conv, proj) in &self.temporal {
            let y = conv.forward(g, x);
            let half = g.shape(y).1 / 2;
            let a = g.slice_cols(y, 0, half);
            let b = g.slice_cols(y, half, half);
            let gate = g.sigmoid(b);
            let glu = g.mul(a, gate);
            let y = proj.forward(g, glu);
            x = g.add(x, y);
        }
        let a = self.attention.forward(g, x);
        let x = g.add(x, a);
        let h = self.gru.forward(g, x);
        let pooled = g.mean_rows(h);
        Ok(self.out.forward(g, pooled))
    }

    pub fn encode(&self, store: &ParamStore, mel: &Tensor) -> Result<StyleEmbedding> {
        let mut g = Graph::inference(store);
        let m = g.input(mel.clone());
        let e = self.forward(&mut g, m)?;
        StyleEmbedding::new(g.value(e).data().to_vec(), Modality::Speech)
    }
}

/// The three prompt encoders sharing one style space.
#[derive(Clone, Debug)]
pub struct Ampe {
    pub speech: SpeechStyleEncoder,
    pub text_adapter: Adapter,
    pub image_adapter: Adapter,
    pub style_dim: usize,
}

impl Ampe {
    pub fn new(store: &mut ParamStore, n_mels: usize, cfg: &StyleConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            speech: SpeechStyleEncoder::new(store, "ampe.speech", n_mels, cfg.style_dim, &cfg.speech_encoder, rng),
            text_adapter: Adapter::new(store, "ampe.text_adapter", cfg.provider_dim, cfg.adapter_hidden, cfg.style_dim, rng),
            image_adapter: Adapter::new(store, "ampe.image_adapter", cfg.provider_dim, cfg.adapter_hidden, cfg.style_dim, rng),
            style_dim: cfg.style_dim,
        }
    }

    pub fn adapter(&self, kind: PromptKind) -> &Adapter {
        match kind {
            PromptKind::Text => &self.text_adapter,
            PromptKind::Image => &self.image_adapter,
        }
    }
}

/// `MSE(E_I, sg(E_S)) + MSE(E_T, sg(E_S))` on the tape.
///
/// E_S is detached: it is the alignment target and receives no gradient here.
pub fn ampe_loss(g: &mut Graph, e_i: Var, e_t: Var, e_s: Var) -> Result<Var> {
    let (si, st, ss) = (g.shape(e_i), g.shape(e_t), g.shape(e_s));
    if si != ss || st != ss {
        return Err(Error::invalid(format!(
            "embedding shapes differ: E_I {si:?}, E_T {st:?}, E_S {ss:?}"
        )));
    }
    let target = g.detach(e_s);
    let di = g.sub(e_i, target);
    let di2 = g.mul(di, di);
    let li = g.mean(di2);
    let dt = g.sub(e_t, target);
    let dt2 = g.mul(dt, dt);
    let lt = g.mean(dt2);
    Ok(g.add(li, lt))
}

/// Scalar form of [`ampe_loss`].
pub fn ampe_loss_value(e_i: &StyleEmbedding, e_t: &StyleEmbedding, e_s: &StyleEmbedding) -> Result<f64> {
    if e_i.len() != e_s.len() || e_t.len() != e_s.len() {
        return Err(Error::invalid(format!(
            "embedding lengths differ: E_I {}, E_T {}, E_S {}",
            e_i.len(),
            e_t.len(),
            e_s.len()
        )));
    }
    let mse = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    };
    Ok(mse(e_i.values(), e_s.values()) + mse(e_t.values(), e_s.values()))
}

/// E_U: E_S while training; the requested modality's embedding at inference.
pub fn select_unified(
    e_s: Option<&StyleEmbedding>,
    e_i: Option<&StyleEmbedding>,
    e_t: Option<&StyleEmbedding>,
    phase: Phase,
    modality: Modality,
) -> Result<StyleEmbedding> {
    let want = match phase {
        Phase::Train => Modality::Speech,
        Phase::Infer => modality,
    };
    let chosen = match want {
        Modality::Speech => e_s,
        Modality::Image => e_i,
        Modality::Text => e_t,
    };
    chosen
        .cloned()
        .ok_or_else(|| Error::MissingPrompt(format!("no {want:?} embedding available")))
}

/// Fits an adapter so that provider vectors map onto fixed speech-style targets.
///
/// Returns the final mean alignment loss.
pub fn fit_adapter(
    adapter: &Adapter,
    store: &mut ParamStore,
    pairs: &[(Tensor, Tensor)],
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no alignment pairs"));
    }
    let inputs = Tensor::concat_rows(&pairs.iter().map(|(x, _)| x).collect::<Vec<_>>());
    let targets = Tensor::concat_rows(&pairs.iter().map(|(_, y)| y).collect::<Vec<_>>());
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    let mut last = f64::INFINITY;
    for _ in 0..steps {
        let grads = {
            let mut g = Graph::new(store);
            let x = g.input(inputs.clone());
            let y = adapter.forward(&mut g, x);
            let t = g.input(targets.clone());
            let d = g.sub(y, t);
            let d2 = g.mul(d, d);
            let loss = g.mean(d2);
            last = g.value(loss).item();
            g.backward(loss).into_param_grads(store)
        };
        if !last.is_finite() {
            return Err(Error::Diverged(format!("alignment loss is {last}")));
        }
        opt.step(store, &grads);
    }
    Ok(last)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64], m: Modality) -> StyleEmbedding {
        StyleEmbedding::new(v.to_vec(), m).unwrap()
    }

    #[test]
    fn ampe_loss_examples() {
        let s = emb(&[0.1, 0.2], Modality::Speech);
        let i = emb(&[0.1, 0.2], Modality::Image);
        let t = emb(&[0.1, 0.2], Modality::Text);
        assert_eq!(ampe_loss_value(&i, &t, &s).unwrap(), 0.0);

        // MSE([1,0],[0,0]) = 0.5, MSE([0,2],[0,0]) = 2.0
        let s = emb(&[0.0, 0.0], Modality::Speech);
        let i = emb(&[1.0, 0.0], Modality::Image);
        let t = emb(&[0.0, 2.0], Modality::Text);
        assert_eq!(ampe_loss_value(&i, &t, &s).unwrap(), 2.5);

        let short = emb(&[1.0], Modality::Text);
        assert!(matches!(ampe_loss_value(&i, &short, &s), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ampe_loss_graph_stops_gradient_into_speech_target() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.watch(Tensor::row_vector(&[0.0, 0.0]));
        let i = g.watch(Tensor::row_vector(&[1.0, 0.0]));
        let t = g.watch(Tensor::row_vector(&[0.0, 2.0]));
        let l = ampe_loss(&mut g, i, t, s).unwrap();
        assert_eq!(g.value(l).item(), 2.5);
        let grads = g.backward(l);
        assert!(grads.wrt(s).is_none());
        // d/dE_I mean((E_I − E_S)²) = 2(E_I − E_S)/n
        assert_eq!(grads.wrt(i).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.wrt(t).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn select_unified_follows_phase_and_modality() {
        let s = emb(&[1.0], Modality::Speech);
        let i = emb(&[2.0], Modality::Image);
        let t = emb(&[3.0], Modality::Text);
        for m in [Modality::Speech, Modality::Image, Modality::Text] {
            let u = select_unified(Some(&s), Some(&i), Some(&t), Phase::Train, m).unwrap();
            assert_eq!(u, s);
        }
        let u = select_unified(Some(&s), Some(&i), Some(&t), Phase::Infer, Modality::Image).unwrap();
        assert_eq!(u, i);
        let err = select_unified(Some(&s), Some(&i), None, Phase::Infer, Modality::Text).unwrap_err();
        assert!(matches!(err, Error::MissingPrompt(_)));
    }

    #[test]
    fn stub_provider_is_deterministic_unit_norm_and_content_sensitive() {
        let p = StubProvider::new(64, 9);
        let a = p.embed(b"A male says with a moderately happy tone", PromptKind::Text).unwrap();
        let b = p.embed(b"A male says with a moderately happy tone", PromptKind::Text).unwrap();
        let c = p.embed(b"A female says with a slightly sad tone", PromptKind::Text).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert!(p.embed(b"", PromptKind::Image).is_err());
        assert!(p.deterministic());
    }

    #[test]
    fn adapter_zero_weights_give_zero_embedding() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adapter = Adapter::new(&mut store, "a", 8, 16, 4, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).scale_assign(0.0);
        }
        let provider = StubProvider::new(8, 1);
        let e = encode_adapter_prompt(b"anything", PromptKind::Text, &provider, &adapter, &store).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
        assert_eq!(e.modality(), Modality::Text);
    }

    #[test]
    fn adapter_identity_weights_pass_provider_output_through_relu() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adapter = Adapter::new(&mut store, "a", 6, 6, 6, &mut rng);
        let eye = Tensor::from_fn(6, 6, |i, j| if i == j { 1.0 } else { 0.0 });
        *store.get_mut(adapter.fc1.w) = eye.clone();
        *store.get_mut(adapter.fc2.w) = eye;
        let provider = StubProvider::new(6, 3);
        let raw = provider.embed(b"hello there", PromptKind::Text).unwrap();
        let e = encode_adapter_prompt(b"hello there", PromptKind::Text, &provider, &adapter, &store).unwrap();
        for (out, inp) in e.values().iter().zip(&raw) {
            assert!((out - f64::from(*inp).max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_matches_manual_two_layer_product() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let adapter = Adapter::new(&mut store, "a", 8, 5, 3, &mut rng);
        for id in [adapter.fc1.b.unwrap(), adapter.fc2.b.unwrap()] {
            let b = store.get_mut(id);
            for (k, v) in b.data_mut().iter_mut().enumerate() {
                *v = 0.1 * k as f64 - 0.2;
            }
        }
        let provider = StubProvider::new(8, 5);
        let e = encode_adapter_prompt(b"xyz", PromptKind::Image, &provider, &adapter, &store).unwrap();
        let x: Vec<f64> = provider
            .embed(b"xyz", PromptKind::Image)
            .unwrap()
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let (w1, b1) = (store.get(adapter.fc1.w), store.get(adapter.fc1.b.unwrap()));
        let (w2, b2) = (store.get(adapter.fc2.w), store.get(adapter.fc2.b.unwrap()));
        let hidden: Vec<f64> = (0..5)
            .map(|j| ((0..8).map(|i| x[i] * w1.get(i, j)).sum::<f64>() + b1.get(0, j)).max(0.0))
            .collect();
        for k in 0..3 {
            let expect = (0..5).map(|j| hidden[j] * w2.get(j, k)).sum::<f64>() + b2.get(0, k);
            assert!((e.values()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_a_configuration_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adapter = Adapter::new(&mut store, "a", 8, 4, 4, &mut rng);
        let provider = StubProvider::new(16, 1);
        let err = encode_adapter_prompt(b"x", PromptKind::Text, &provider, &adapter, &store).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn small_encoder(store: &mut ParamStore) -> SpeechStyleEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = SpeechStyleEncoderConfig {
            gru_layers: 2,
            conv_kernel: 5,
            attention_heads: 1,
            conv_filter_size: 16,
        };
        SpeechStyleEncoder::new(store, "enc", 10, 8, &cfg, &mut rng)
    }

    #[test]
    fn speech_encoder_shapes_determinism_and_single_frame() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let mel = Tensor::from_fn(30, 10, |t, m| ((t * 10 + m) as f64 * 0.13).sin());
        let a = enc.encode(&store, &mel).unwrap();
        let b = enc.encode(&store, &mel).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        let one = enc.encode(&store, &mel.slice_rows(0, 1)).unwrap();
        assert!(one.values().iter().all(|v| v.is_finite()));
        assert!(matches!(enc.encode(&store, &Tensor::zeros(0, 10)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn default_speech_encoder_emits_256_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = SpeechStyleEncoder::new(&mut store, "enc", 80, 256, &SpeechStyleEncoderConfig::default(), &mut rng);
        let mel = Tensor::from_fn(100, 80, |t, m| ((t + 3 * m) as f64 * 0.05).cos());
        assert_eq!(enc.encode(&store, &mel).unwrap().len(), 256);
    }

    #[test]
    fn speech_encoder_is_differentiable_wrt_mel() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let mel = Tensor::from_fn(6, 10, |t, m| ((t * 10 + m) as f64 * 0.31).cos());
        let loss_of = |m: &Tensor| {
            let mut g = Graph::new(&store);
            let x = g.watch(m.clone());
            let e = enc.forward(&mut g, x).unwrap();
            let sq = g.mul(e, e);
            let l = g.sum(sq);
            (g.value(l).item(), g.backward(l).wrt(x).cloned().unwrap())
        };
        let (_, grad) = loss_of(&mel);
        let h = 1e-6;
        for i in [0, 13, 37, 59] {
            let mut p = mel.clone();
            p.data_mut()[i] += h;
            let mut m = mel.clone();
            m.data_mut()[i] -= h;
            let fd = (loss_of(&p).0 - loss_of(&m).0) / (2.0 * h);
            let an = grad.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8), "{fd} vs {an}");
        }
    }
}
