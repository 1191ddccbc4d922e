//! Layers built on the autograd tape, plus the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Axis, Graph, ParamGrads, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub(crate) fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

/// `x · W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, in_dim, out_dim, in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialized layer; its output is exactly zero until trained.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = x.matmul(store.get(self.w));
        if let Some(b) = self.b {
            let b = store.get(b);
            for r in 0..y.rows() {
                for (v, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        y
    }
}

/// Same-padded 1-D convolution over the time (row) axis.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel;
        let w = store.add(
            format!("{name}.w"),
            xavier(rng, fan_in, out_ch, fan_in, out_ch * kernel),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_ch));
        Self {
            w,
            b,
            kernel,
            dilation,
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = if self.kernel == 1 {
            x
        } else {
            g.unfold(x, self.kernel, self.dilation)
        };
        let w = g.param(self.w);
        let y = g.matmul(cols, w);
        let b = g.param(self.b);
        g.add_row(y, b)
    }
}

/// Layer normalization across channels with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.standardize(x, Axis::Cols, 1e-5);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

#[derive(Clone, Debug)]
struct GruLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    hidden: usize,
}

/// Stacked GRU running over rows; returns every step's output of the last layer.
#[derive(Clone, Debug)]
pub struct Gru {
    layers: Vec<GruLayer>,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { hidden };
                GruLayer {
                    w_ih: store.add(
                        format!("{name}.{l}.w_ih"),
                        xavier(rng, in_dim, 3 * hidden, in_dim, hidden),
                    ),
                    w_hh: store.add(
                        format!("{name}.{l}.w_hh"),
                        xavier(rng, hidden, 3 * hidden, hidden, hidden),
                    ),
                    b_ih: store.add(format!("{name}.{l}.b_ih"), Tensor::zeros(1, 3 * hidden)),
                    b_hh: store.add(format!("{name}.{l}.b_hh"), Tensor::zeros(1, 3 * hidden)),
                    hidden,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut seq = x;
        for layer in &self.layers {
            seq = layer.forward(g, seq);
        }
        seq
    }
}

impl GruLayer {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h_dim = self.hidden;
        let steps = g.shape(x).0;
        let w_ih = g.param(self.w_ih);
        let b_ih = g.param(self.b_ih);
        let w_hh = g.param(self.w_hh);
        let b_hh = g.param(self.b_hh);
        let gi_all = g.matmul(x, w_ih);
        let gi_all = g.add_row(gi_all, b_ih);
        let mut h = g.input(Tensor::zeros(1, h_dim));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gi = g.slice_rows(gi_all, t, 1);
            let gh = g.matmul(h, w_hh);
            let gh = g.add_row(gh, b_hh);
            let gi_rz = g.slice_cols(gi, 0, 2 * h_dim);
            let gh_rz = g.slice_cols(gh, 0, 2 * h_dim);
            let rz = g.add(gi_rz, gh_rz);
            let rz = g.sigmoid(rz);
            let r = g.slice_cols(rz, 0, h_dim);
            let z = g.slice_cols(rz, h_dim, h_dim);
            let gi_n = g.slice_cols(gi, 2 * h_dim, h_dim);
            let gh_n = g.slice_cols(gh, 2 * h_dim, h_dim);
            let rn = g.mul(r, gh_n);
            let n = g.add(gi_n, rn);
            let n = g.tanh(n);
            // h' = n + z ⊙ (h − n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

/// Multi-head scaled dot-product self-attention over rows.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let dim = self.q.out_dim;
        let dk = dim / self.heads;
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.o.forward(g, cat)
    }
}

/// Fixed sinusoidal position table `[len × dim]`.
pub fn sinusoid_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(len, dim, |pos, i| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let a = pos as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction. Parameters without a gradient are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let n = grads.global_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else {
                continue;
            };
            let i = id.index();
            let p = store.get_mut(id);
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * clip;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Moment tensors keyed by parameter index, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (usize, &Tensor, &Tensor)> {
        self.m
            .iter()
            .zip(&self.v)
            .enumerate()
            .filter_map(|(i, (m, v))| Some((i, m.as_ref()?, v.as_ref()?)))
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(usize, Tensor, Tensor)>, n_params: usize) {
        self.step = step;
        self.m = vec![None; n_params];
        self.v = vec![None; n_params];
        for (i, m, v) in moments {
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 2, 3, 3, 1, &mut rng);
        let x = Tensor::from_fn(5, 2, |i, j| (i as f64 - 2.0) * 0.5 + j as f64);
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = conv.forward(&mut g, xv);
        let w = store.get(conv.w);
        let b = store.get(conv.b);
        for t in 0..5 {
            for o in 0..3 {
                let mut acc = b.get(0, o);
                for k in 0..3 {
                    let src = t as isize + k as isize - 1;
                    if !(0..5).contains(&src) {
                        continue;
                    }
                    for i in 0..2 {
                        acc += w.get(k * 2 + i, o) * x.get(src as usize, i);
                    }
                }
                assert!((g.value(y).get(t, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_and_attention_keep_sequence_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 4, 6, 2, &mut rng);
        let attn = MultiHeadAttention::new(&mut store, "attn", 6, 2, &mut rng);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::from_fn(9, 4, |i, j| ((i + j) as f64).sin()));
        let h = gru.forward(&mut g, x);
        assert_eq!(g.shape(h), (9, 6));
        let a = attn.forward(&mut g, h);
        assert_eq!(g.shape(a), (9, 6));
        assert!(g.value(a).is_finite());
    }

    #[test]
    fn gru_parameter_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, 2, &mut rng);
        let x = Tensor::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.37).cos());
        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let xv = g.input(x.clone());
            let h = gru.forward(&mut g, xv);
            let sq = g.mul(h, h);
            let l = g.sum(sq);
            (g.value(l).item(), g.backward(l).into_param_grads(s))
        };
        let (_, grads) = loss_of(&store);
        let id = store.id("gru.0.w_hh").unwrap();
        let h = 1e-6;
        for i in [0, 5, 17, 30] {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            let an = grads.get(id).unwrap().data()[i];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {an}");
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row_vector(&[3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig {
            clip_norm: None,
            ..AdamConfig::with_lr(0.05)
        });
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let v = g.param(p);
                let sq = g.mul(v, v);
                let l = g.sum(sq);
                g.backward(l).into_param_grads(&store)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(p).norm() < 1e-2);
    }

    #[test]
    fn positions_start_with_sin_zero_cos_one() {
        let t = sinusoid_positions(3, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }
}
