//! Rectified-flow mel refiner.
//!
//! A drift field `v(x, t, c)` is regressed onto the straight displacement
//! `x1 − x0` between Gaussian noise and data. Samples come from integrating
//! `dx/dt = v` from `t = 0` to `t = 1`, either with fixed-step Euler or with
//! adaptive Dormand–Prince.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, ParamStore, Var};
use crate::config::{DriftNetConfig, DriftOutput};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Conv1d, Linear};
use crate::tensor::Tensor;

/// `t·x1 + (1−t)·x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::invalid(format!("shapes differ: {:?} vs {:?}", x0.shape(), x1.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a))
}

pub const STEP_SCALE: f64 = 50.0;

/// Sinusoidal encoding of `t`: `dim/2` sines followed by `dim/2` cosines.
///
/// `t` is multiplied by [`STEP_SCALE`] before the geometric frequency ladder.
/// A moderate scale keeps the learned field smooth in `t`, which fixed-step
/// solvers rely on.
pub fn step_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::config(format!("step embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
        let a = STEP_SCALE * t * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Ok(out)
}

/// Non-causal WaveNet over the time axis with gated residual layers.
///
/// The step embedding is added to every layer's input; the conditioning
/// mel enters each layer through a 1×1 convolution before the gate.
/// Projections use SiLU so the learned field is smooth for ODE solvers.
#[derive(Clone, Debug)]
pub struct DriftNet {
    input: Conv1d,
    step1: Linear,
    step2: Linear,
    layers: Vec<ResidualLayer>,
    skip: Conv1d,
    out: Conv1d,
    n_mels: usize,
    step_dim: usize,
    output: DriftOutput,
    min_gap: f64,
}

#[derive(Clone, Debug)]
struct ResidualLayer {
    step: Linear,
    dilated: Conv1d,
    cond: Conv1d,
    out: Conv1d,
    channels: usize,
}

impl DriftNet {
    pub fn new(store: &mut ParamStore, name: &str, n_mels: usize, cfg: &DriftNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.step_embed_dim % 2 == 1 {
            return Err(Error::config(format!("step_embed_dim {} is odd", cfg.step_embed_dim)));
        }
        if !(cfg.endpoint_min_gap > 0.0 && cfg.endpoint_min_gap <= 1.0) {
            return Err(Error::config(format!("endpoint_min_gap {} outside (0, 1]", cfg.endpoint_min_gap)));
        }
        if cfg.conv_filter % 2 == 1 {
            return Err(Error::config(format!("conv_filter {} is odd", cfg.conv_filter)));
        }
        let r = cfg.residual_channels;
        let cycle = cfg.dilation_cycle.max(1);
        let layers = (0..cfg.residual_layers)
            .map(|i| ResidualLayer {
                step: Linear::new(store, &format!("{name}.layer{i}.step"), r, r, rng),
                dilated: Conv1d::new(
                    store,
                    &format!("{name}.layer{i}.dilated"),
                    r,
                    cfg.conv_filter,
                    cfg.conv_kernel,
                    1 << (i % cycle),
                    rng,
                ),
                cond: Conv1d::new(store, &format!("{name}.layer{i}.cond"), n_mels, cfg.conv_filter, 1, 1, rng),
                out: Conv1d::new(store, &format!("{name}.layer{i}.out"), cfg.conv_filter / 2, 2 * r, 1, 1, rng),
                channels: r,
            })
            .collect();
        let out = Conv1d::new(store, &format!("{name}.out"), r, n_mels, 1, 1, rng);
        store.get_mut(out.w).scale_assign(0.0);
        Ok(Self {
            input: Conv1d::new(store, &format!("{name}.input"), n_mels, r, 1, 1, rng),
            step1: Linear::new(store, &format!("{name}.step1"), cfg.step_embed_dim, r, rng),
            step2: Linear::new(store, &format!("{name}.step2"), r, r, rng),
            layers,
            skip: Conv1d::new(store, &format!("{name}.skip"), r, r, 1, 1, rng),
            out,
            n_mels,
            step_dim: cfg.step_embed_dim,
            output: cfg.output,
            min_gap: cfg.endpoint_min_gap,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// `x, c: [T × n_mels]`; `t` holds one time for all rows or one per row.
    pub fn forward(&self, g: &mut Graph, x: Var, t: &[f64], c: Var) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if cols != self.n_mels || g.shape(c) != (rows, cols) {
            return Err(Error::invalid(format!(
                "drift input {:?} / condition {:?}, expected [T × {}] for both",
                (rows, cols),
                g.shape(c),
                self.n_mels
            )));
        }
        if rows == 0 {
            return Err(Error::invalid("drift input has no frames"));
        }
        if t.len() != 1 && t.len() != rows {
            return Err(Error::invalid(format!("{} step values for {rows} rows", t.len())));
        }
        let mut emb = Vec::with_capacity(t.len() * self.step_dim);
        for &ti in t {
            emb.extend(step_embedding(ti, self.step_dim)?);
        }
        let e = g.input(Tensor::from_vec(t.len(), self.step_dim, emb));
        let s = self.step1.forward(g, e);
        let s = g.silu(s);
        let s = self.step2.forward(g, s);
        let s = g.silu(s);

        let h0 = self.input.forward(g, x);
        let mut h = g.silu(h0);
        let mut skips = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let sp = layer.step.forward(g, s);
            let y = if t.len() == 1 { g.add_row(h, sp) } else { g.add(h, sp) };
            let y = layer.dilated.forward(g, y);
            let cc = layer.cond.forward(g, c);
            let y = g.add(y, cc);
            let half = g.shape(y).1 / 2;
            let a = g.slice_cols(y, 0, half);
            let b = g.slice_cols(y, half, half);
            let a = g.tanh(a);
            let b = g.sigmoid(b);
            let z = g.mul(a, b);
            let z = layer.out.forward(g, z);
            let res = g.slice_cols(z, 0, layer.channels);
            let skip = g.slice_cols(z, layer.channels, layer.channels);
            let hr = g.add(h, res);
            h = g.scale(hr, std::f64::consts::FRAC_1_SQRT_2);
            skips.push(skip);
        }
        let mut acc = skips[0];
        for &s in &skips[1..] {
            acc = g.add(acc, s);
        }
        let acc = g.scale(acc, 1.0 / (skips.len() as f64).sqrt());
        let y = self.skip.forward(g, acc);
        let y = g.silu(y);
        let o = self.out.forward(g, y);
        match self.output {
            DriftOutput::Velocity => Ok(o),
            DriftOutput::Endpoint => {
                let x1 = g.add(o, c);
                let d = g.sub(x1, x);
                let inv: Vec<f64> = (0..rows)
                    .map(|r| 1.0 / (1.0 - t[if t.len() == 1 { 0 } else { r }]).max(self.min_gap))
                    .collect();
                let w = g.input(Tensor::from_vec(rows, 1, inv));
                let ones = g.input(Tensor::full(1, cols, 1.0));
                let w = g.matmul(w, ones);
                Ok(g.mul(d, w))
            }
        }
    }
}

/// Anything that can be integrated by the samplers.
pub trait DriftField {
    fn drift(&self, x: &Tensor, t: f64, c: &Tensor) -> Result<Tensor>;
}

impl<F> DriftField for F
where
    F: Fn(&Tensor, f64, &Tensor) -> Tensor,
{
    fn drift(&self, x: &Tensor, t: f64, c: &Tensor) -> Result<Tensor> {
        Ok(self(x, t, c))
    }
}

/// A drift net bound to its parameters.
#[derive(Clone, Copy)]
pub struct BoundDrift<'a> {
    pub net: &'a DriftNet,
    pub store: &'a ParamStore,
}

impl DriftField for BoundDrift<'_> {
    fn drift(&self, x: &Tensor, t: f64, c: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(self.store);
        let xv = g.input(x.clone());
        let cv = g.input(c.clone());
        let v = self.net.forward(&mut g, xv, &[t], cv)?;
        Ok(g.value(v).clone())
    }
}

/// Regression loss on the tape: `mean((x1 − x0 − v(x_t, t, c))²)`.
pub fn reflow_loss(g: &mut Graph, net: &DriftNet, x0: &Tensor, x1: &Tensor, t: &[f64], c: &Tensor) -> Result<Var> {
    if x0.shape() != x1.shape() {
        return Err(Error::invalid(format!("shapes differ: {:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let rows = x0.rows();
    let row_t = |r: usize| if t.len() == 1 { t[0] } else { t[r] };
    if t.len() != 1 && t.len() != rows {
        return Err(Error::invalid(format!("{} step values for {rows} rows", t.len())));
    }
    if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("t outside [0, 1]"));
    }
    let mut xt = x0.clone();
    for r in 0..rows {
        let tr = row_t(r);
        for (o, (&a, &b)) in xt.row_mut(r).iter_mut().zip(x0.row(r).iter().zip(x1.row(r))) {
            *o = tr * b + (1.0 - tr) * a;
        }
    }
    let xv = g.input(xt);
    let cv = g.input(c.clone());
    let v = net.forward(g, xv, t, cv)?;
    let target = g.input(x1.sub(x0));
    let d = g.sub(target, v);
    let d2 = g.mul(d, d);
    Ok(g.mean(d2))
}

/// Scalar regression loss for an arbitrary field and a shared `t`.
pub fn reflow_loss_value(field: &dyn DriftField, x0: &Tensor, x1: &Tensor, t: f64, c: &Tensor) -> Result<f64> {
    let xt = interpolate(x0, x1, t)?;
    let v = field.drift(&xt, t, c)?;
    if v.shape() != x0.shape() {
        return Err(Error::invalid("drift output shape differs from input"));
    }
    let target = x1.sub(x0);
    Ok(target.sub(&v).data().iter().map(|d| d * d).sum::<f64>() / v.len() as f64)
}

/// Uniform explicit Euler from `t = 0` to `t = 1`.
pub fn sample_euler(field: &dyn DriftField, x0: &Tensor, c: &Tensor, n_steps: usize) -> Result<Tensor> {
    if n_steps < 1 {
        return Err(Error::invalid("euler_steps must be at least 1"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for i in 0..n_steps {
        let v = field.drift(&x, i as f64 * dt, c)?;
        x.add_assign(&v.scale(dt));
    }
    Ok(x)
}

/// Counters from an adaptive solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const MAX_STEPS: usize = 100_000;

fn error_norm(err: &Tensor, y0: &Tensor, y1: &Tensor, rtol: f64, atol: f64) -> f64 {
    // Max norm: every element, not just the average, meets the tolerance.
    err.data()
        .iter()
        .zip(y0.data().iter().zip(y1.data()))
        .map(|(e, (a, b))| (e / (atol + rtol * a.abs().max(b.abs()))).abs())
        .fold(0.0, f64::max)
}

fn rms(x: &Tensor) -> f64 {
    (x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Adaptive Dormand–Prince 5(4) from `t0` to `t1`; either direction.
pub fn integrate_rk45(
    field: &dyn DriftField,
    x0: &Tensor,
    c: &Tensor,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
) -> Result<(Tensor, SolveStats)> {
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::invalid("rtol and atol must be positive"));
    }
    let mut stats = SolveStats::default();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok((x0.clone(), stats));
    }
    let dir = span.signum();
    let mut eval = |x: &Tensor, t: f64| -> Result<Tensor> {
        stats.evaluations += 1;
        let v = field.drift(x, t, c)?;
        if !v.is_finite() {
            return Err(Error::Integration(format!("drift is not finite at t = {t}")));
        }
        Ok(v)
    };

    let mut t = t0;
    let mut y = x0.clone();
    let mut f = eval(&y, t)?;

    // Starting step size.
    let scale = y.map(|v| atol + rtol * v.abs());
    let d0 = rms(&y.zip_map(&scale, |a, s| a / s));
    let d1 = rms(&f.zip_map(&scale, |a, s| a / s));
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y_probe = y.add(&f.scale(dir * h0));
    let f_probe = eval(&y_probe, t + dir * h0)?;
    let d2 = rms(&f_probe.sub(&f).zip_map(&scale, |a, s| a / s)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    let mut h = (100.0 * h0).min(h1).min(span.abs());

    let mut k: Vec<Tensor> = Vec::with_capacity(7);
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        if stats.accepted + stats.rejected >= MAX_STEPS {
            return Err(Error::Integration(format!("exceeded {MAX_STEPS} steps")));
        }
        let min_step = 16.0 * f64::EPSILON * t.abs().max(1.0);
        if h < min_step {
            return Err(Error::Integration(format!("step size underflow at t = {t}")));
        }
        h = h.min(remaining);
        let hs = dir * h;

        k.clear();
        k.push(f.clone());
        for s in 1..7 {
            let mut yi = y.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = DP_A[s][j];
                if a != 0.0 {
                    yi.add_assign(&kj.scale(hs * a));
                }
            }
            let ks = eval(&yi, t + DP_C[s] * hs)?;
            k.push(ks);
        }
        // Row 6 of A holds the fifth-order weights, so stage 7 is evaluated at y_new.
        let mut y_new = y.clone();
        for (j, kj) in k.iter().take(6).enumerate() {
            let a = DP_A[6][j];
            if a != 0.0 {
                y_new.add_assign(&kj.scale(hs * a));
            }
        }
        let mut err = Tensor::zeros(y.rows(), y.cols());
        for (j, kj) in k.iter().enumerate() {
            if DP_E[j] != 0.0 {
                err.add_assign(&kj.scale(hs * DP_E[j]));
            }
        }
        let en = error_norm(&err, &y, &y_new, rtol, atol);
        if en <= 1.0 {
            t = if h == remaining { t1 } else { t + hs };
            y = y_new;
            f = k[6].clone();
            stats.accepted += 1;
            let factor = if en == 0.0 { 10.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 10.0) };
            h *= factor;
        } else {
            stats.rejected += 1;
            h *= (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok((y, stats))
}

/// Adaptive Dormand–Prince from `t = 0` to `t = 1`.
pub fn sample_rk45(field: &dyn DriftField, x0: &Tensor, c: &Tensor, rtol: f64, atol: f64) -> Result<Tensor> {
    integrate_rk45(field, x0, c, 0.0, 1.0, rtol, atol).map(|(x, _)| x)
}

/// Gaussian noise of the given shape, one independent draw per element.
pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Squared energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` between row samples.
///
/// V-statistic form, so the value is never negative.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 || a.cols() != b.cols() {
        return Err(Error::invalid("energy distance needs non-empty samples of equal width"));
    }
    let mean_dist = |p: &Tensor, q: &Tensor| {
        let mut s = 0.0;
        for i in 0..p.rows() {
            let pi = p.row(i);
            for j in 0..q.rows() {
                let d: f64 = pi.iter().zip(q.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                s += d.sqrt();
            }
        }
        s / (p.rows() * q.rows()) as f64
    };
    Ok((2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)).max(0.0))
}

/// Adam training of a drift net on batches from `batch`.
///
/// `batch` returns `(x0, x1, c, t)` where `t` has one entry or one per row.
/// Returns the loss at every step.
pub fn train_drift(
    net: &DriftNet,
    store: &mut ParamStore,
    opt: &mut Adam,
    steps: usize,
    mut batch: impl FnMut(usize) -> (Tensor, Tensor, Tensor, Vec<f64>),
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (x0, x1, c, t) = batch(step);
        let (loss, grads) = {
            let mut g = Graph::new(store);
            let l = reflow_loss(&mut g, net, &x0, &x1, &t, &c)?;
            let v = g.value(l).item();
            (v, g.backward(l).into_param_grads(store))
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!("reflow loss {loss} at step {step}")));
        }
        opt.step(store, &grads);
        losses.push(loss);
    }
    Ok(losses)
}

/// Two-component Gaussian mixture in the plane used by the transport check.
#[derive(Clone, Debug)]
pub struct ToyTransport {
    pub centers: [[f64; 2]; 2],
    pub std: f64,
    pub batch: usize,
    pub steps: usize,
    pub reflow_steps: usize,
    pub rectifications: usize,
    pub reflow_pairs: usize,
    pub lr: f64,
    pub net: DriftNetConfig,
    pub seed: u64,
}

impl Default for ToyTransport {
    fn default() -> Self {
        Self {
            centers: [[-2.0, 0.0], [2.0, 0.0]],
            std: 0.8,
            batch: 256,
            steps: 2000,
            reflow_steps: 1000,
            rectifications: 2,
            reflow_pairs: 4096,
            lr: 2e-3,
            net: DriftNetConfig {
                step_embed_dim: 32,
                residual_layers: 4,
                residual_channels: 32,
                conv_kernel: 1,
                conv_filter: 64,
                dilation_cycle: 1,
                output: DriftOutput::Velocity,
                endpoint_min_gap: 0.05,
            },
            seed: 7,
        }
    }
}

/// A trained toy refiner plus its per-pass loss traces.
pub struct TrainedToy {
    pub net: DriftNet,
    pub store: ParamStore,
    pub losses: Vec<Vec<f64>>,
}

impl TrainedToy {
    pub fn field(&self) -> BoundDrift<'_> {
        BoundDrift {
            net: &self.net,
            store: &self.store,
        }
    }
}

impl ToyTransport {
    pub fn sample_target(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = self.centers[usize::from(rng.gen::<bool>())];
                vec![
                    c[0] + self.std * rng.sample::<f64, _>(StandardNormal),
                    c[1] + self.std * rng.sample::<f64, _>(StandardNormal),
                ]
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    /// First pass pairs independent noise and data; each further pass
    /// retrains on `(z, ODE(z))` pairs produced by the previous field.
    pub fn train(&self) -> Result<TrainedToy> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut store = ParamStore::new();
        let net = DriftNet::new(&mut store, "toy", 2, &self.net, &mut rng)?;
        let mut losses = Vec::new();
        let zeros = Tensor::zeros(self.batch, 2);
        for pass in 0..self.rectifications.max(1) {
            let mut opt = Adam::new(AdamConfig::with_lr(self.lr));
            let pairs = if pass == 0 {
                None
            } else {
                let z = gaussian(self.reflow_pairs, 2, &mut rng);
                let field = BoundDrift { net: &net, store: &store };
                let x1 = sample_rk45(&field, &z, &Tensor::zeros(self.reflow_pairs, 2), 1e-5, 1e-5)?;
                Some((z, x1))
            };
            let trace = train_drift(&net, &mut store, &mut opt, if pass == 0 { self.steps } else { self.reflow_steps }, |_| {
                let (x0, x1) = match &pairs {
                    None => (gaussian(self.batch, 2, &mut rng), self.sample_target(self.batch, &mut rng)),
                    Some((z, x)) => {
                        let idx: Vec<usize> = (0..self.batch).map(|_| rng.gen_range(0..z.rows())).collect();
                        (z.select_rows(&idx), x.select_rows(&idx))
                    }
                };
                let t: Vec<f64> = (0..self.batch).map(|_| rng.gen::<f64>()).collect();
                (x0, x1, zeros.clone(), t)
            })?;
            losses.push(trace);
        }
        Ok(TrainedToy { net, store, losses })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn interpolate_examples() {
        let x0 = Tensor::row_vector(&[0.0, 0.0]);
        let x1 = Tensor::row_vector(&[2.0, 4.0]);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, 0.5).unwrap().data(), &[1.0, 2.0]);
        assert!(interpolate(&x0, &x1, 1.5).is_err());
    }

    #[test]
    fn step_embedding_examples() {
        let e = step_embedding(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_eq!(step_embedding(0.3, 256).unwrap(), step_embedding(0.3, 256).unwrap());
        let a = step_embedding(0.1, 256).unwrap();
        let b = step_embedding(0.9, 256).unwrap();
        let cos = crate::style_space::cosine(&a, &b);
        assert!(cos < 1.0 - 1e-6);
        assert!(matches!(step_embedding(0.1, 7), Err(Error::Config(_))));
    }

    #[test]
    fn reflow_loss_stub_examples() {
        let x0 = Tensor::row_vector(&[0.0]);
        let x1 = Tensor::row_vector(&[2.0]);
        let c = Tensor::row_vector(&[0.0]);
        let zero = |x: &Tensor, _: f64, _: &Tensor| Tensor::zeros(x.rows(), x.cols());
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(reflow_loss_value(&zero, &x0, &x1, t, &c).unwrap(), 4.0);
        }
        let a = Tensor::row_vector(&[0.5, -1.0, 2.0]);
        let b = Tensor::row_vector(&[1.5, 3.0, -2.0]);
        let disp = b.sub(&a);
        let perfect = move |_: &Tensor, _: f64, _: &Tensor| disp.clone();
        assert_eq!(reflow_loss_value(&perfect, &a, &b, 0.4, &a).unwrap(), 0.0);
    }

    #[test]
    fn euler_examples() {
        let c = scalar(0.0);
        let konst = |x: &Tensor, _: f64, _: &Tensor| Tensor::full(x.rows(), x.cols(), 0.75);
        let x0 = Tensor::row_vector(&[1.0, -2.0]);
        for n in [1, 3, 17] {
            let y = sample_euler(&konst, &x0, &c, n).unwrap();
            assert!(y.max_abs_diff(&x0.map(|v| v + 0.75)) < 1e-12);
        }
        let zero = |x: &Tensor, _: f64, _: &Tensor| Tensor::zeros(x.rows(), x.cols());
        assert_eq!(sample_euler(&zero, &x0, &c, 5).unwrap(), x0);

        let lin = |x: &Tensor, _: f64, _: &Tensor| x.clone();
        assert_eq!(sample_euler(&lin, &scalar(1.0), &c, 1).unwrap().item(), 2.0);
        let e = sample_euler(&lin, &scalar(1.0), &c, 10_000).unwrap().item();
        assert!((e - std::f64::consts::E).abs() < 1e-3);
        assert!(matches!(sample_euler(&lin, &scalar(1.0), &c, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rk45_examples() {
        let c = scalar(0.0);
        let konst = |x: &Tensor, _: f64, _: &Tensor| Tensor::full(x.rows(), x.cols(), -1.25);
        let x0 = Tensor::row_vector(&[0.5, 3.0]);
        let y = sample_rk45(&konst, &x0, &c, 1e-6, 1e-6).unwrap();
        assert!(y.max_abs_diff(&x0.map(|v| v - 1.25)) < 1e-6);
        let ye = sample_euler(&konst, &x0, &c, 7).unwrap();
        assert!(y.max_abs_diff(&ye) < 1e-6);

        let lin = |x: &Tensor, _: f64, _: &Tensor| x.clone();
        let e = sample_rk45(&lin, &scalar(1.0), &c, 1e-6, 1e-6).unwrap().item();
        assert!((e - std::f64::consts::E).abs() < 1e-5);

        // Time-dependent field: dx/dt = cos(t), x(1) = x0 + sin(1).
        let tf = |x: &Tensor, t: f64, _: &Tensor| Tensor::full(x.rows(), x.cols(), t.cos());
        let y = sample_rk45(&tf, &scalar(0.0), &c, 1e-8, 1e-8).unwrap().item();
        assert!((y - 1f64.sin()).abs() < 1e-7);

        let (back, _) = integrate_rk45(&lin, &scalar(std::f64::consts::E), &c, 1.0, 0.0, 1e-8, 1e-8).unwrap();
        assert!((back.item() - 1.0).abs() < 1e-6);

        assert!(sample_rk45(&lin, &scalar(1.0), &c, 0.0, 1e-6).is_err());
    }

    #[test]
    fn rk45_agrees_with_dense_euler_on_nonlinear_field() {
        let c = scalar(0.0);
        let f = |x: &Tensor, t: f64, _: &Tensor| x.map(|v| (v * 1.3).sin() - 0.5 * t);
        let x0 = Tensor::row_vector(&[0.2, -1.0, 2.5]);
        let r = sample_rk45(&f, &x0, &c, 1e-6, 1e-6).unwrap();
        let e = sample_euler(&f, &x0, &c, 10_000).unwrap();
        let tol = (10.0 * 1e-6 * r.norm()).max(10.0 * 1e-6);
        // Euler's own O(1/n) error dominates at 10⁴ steps.
        assert!(r.max_abs_diff(&e) < tol.max(1e-4), "{}", r.max_abs_diff(&e));
    }

    #[test]
    fn stiff_blowup_is_an_integration_error() {
        let c = scalar(0.0);
        let f = |x: &Tensor, _: f64, _: &Tensor| x.map(|v| v * v * 1e6 + 1e6);
        let err = sample_rk45(&f, &scalar(1.0), &c, 1e-6, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Integration(_)), "{err}");
    }

    #[test]
    fn energy_distance_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(400, 2, &mut rng);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        let b = gaussian(400, 2, &mut rng);
        let shifted = b.map(|v| v + 1.0);
        let same = energy_distance(&a, &b).unwrap();
        let far = energy_distance(&a, &shifted).unwrap();
        assert!(same < 0.02 && far > 0.5, "{same} {far}");
        assert!(energy_distance(&a, &Tensor::zeros(3, 3)).is_err());
    }

    fn micro_net(store: &mut ParamStore, seed: u64) -> DriftNet {
        micro_net_with(store, seed, DriftOutput::Velocity)
    }

    fn micro_net_with(store: &mut ParamStore, seed: u64, output: DriftOutput) -> DriftNet {
        let cfg = DriftNetConfig {
            step_embed_dim: 4,
            residual_layers: 2,
            residual_channels: 8,
            conv_kernel: 3,
            conv_filter: 8,
            dilation_cycle: 2,
            output,
            endpoint_min_gap: 0.05,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DriftNet::new(store, "d", 3, &cfg, &mut rng).unwrap();
        // Break the zero-initialized readout so every path carries gradient.
        let w = store.get_mut(net.out.w);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = ((i * 7 % 11) as f64 - 5.0) * 0.05;
        }
        net
    }

    #[test]
    fn drift_shape_and_conditioning() {
        let mut store = ParamStore::new();
        let net = micro_net(&mut store, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(50, 3, &mut rng);
        let c1 = gaussian(50, 3, &mut rng);
        let c2 = gaussian(50, 3, &mut rng);
        let f = BoundDrift { net: &net, store: &store };
        let v1 = f.drift(&x, 0.3, &c1).unwrap();
        assert_eq!(v1.shape(), (50, 3));
        assert_ne!(v1, f.drift(&x, 0.3, &c2).unwrap());
        assert!(f.drift(&x, 0.3, &Tensor::zeros(49, 3)).is_err());
    }

    #[test]
    fn untrained_endpoint_drift_points_at_condition() {
        let mut store = ParamStore::new();
        let cfg = DriftNetConfig {
            step_embed_dim: 4,
            residual_layers: 2,
            residual_channels: 8,
            conv_filter: 8,
            ..DriftNetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DriftNet::new(&mut store, "d", 3, &cfg, &mut rng).unwrap();
        let x = gaussian(20, 3, &mut rng);
        let c = gaussian(20, 3, &mut rng);
        let f = BoundDrift { net: &net, store: &store };
        for (t, gap) in [(0.0, 1.0), (0.6, 0.4), (0.99, 0.05)] {
            let v = f.drift(&x, t, &c).unwrap();
            for i in 0..v.len() {
                let want = (c.data()[i] - x.data()[i]) / gap;
                assert!((v.data()[i] - want).abs() < 1e-12);
            }
        }
        // A field that ignores x_t and t is a straight line: one Euler step lands on c.
        let one = sample_euler(&f, &x, &c, 1).unwrap();
        assert!(one.max_abs_diff(&c) < 1e-12);
        let mut bad = cfg.clone();
        bad.endpoint_min_gap = 0.0;
        assert!(matches!(DriftNet::new(&mut store, "e", 3, &bad, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn default_drift_net_preserves_mel_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DriftNet::new(&mut store, "d", 80, &DriftNetConfig::default(), &mut rng).unwrap();
        let x = gaussian(50, 80, &mut rng);
        let f = BoundDrift { net: &net, store: &store };
        assert_eq!(f.drift(&x, 0.5, &x).unwrap().shape(), (50, 80));
        let bad = DriftNetConfig {
            step_embed_dim: 7,
            ..DriftNetConfig::default()
        };
        assert!(matches!(DriftNet::new(&mut store, "e", 80, &bad, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn drift_gradients_match_finite_differences() {
        for output in [DriftOutput::Velocity, DriftOutput::Endpoint] {
            check_drift_gradients(output);
        }
    }

    fn check_drift_gradients(output: DriftOutput) {
        let mut store = ParamStore::new();
        let net = micro_net_with(&mut store, 9, output);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = gaussian(5, 3, &mut rng);
        let x1 = gaussian(5, 3, &mut rng);
        let c = gaussian(5, 3, &mut rng);
        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = reflow_loss(&mut g, &net, &x0, &x1, &[0.37], &c).unwrap();
            (g.value(l).item(), g.backward(l).into_param_grads(s))
        };
        let (_, grads) = loss_of(&store);
        let ids: Vec<_> = store.ids().collect();
        crate::testutil::check_param_grads(&mut store, &ids, &grads, |s| loss_of(s).0, 1e-4);

        // And with respect to x and c.
        let f = |x: &Tensor, cc: &Tensor| {
            let mut g = Graph::new(&store);
            let xv = g.watch(x.clone());
            let cv = g.watch(cc.clone());
            let v = net.forward(&mut g, xv, &[0.6], cv).unwrap();
            let sq = g.mul(v, v);
            let l = g.sum(sq);
            let gr = g.backward(l);
            (g.value(l).item(), gr.wrt(xv).cloned().unwrap(), gr.wrt(cv).cloned().unwrap())
        };
        let (_, gx, gc) = f(&x0, &c);
        let h = 1e-5;
        for i in [0, 4, 11] {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p, &c).0 - f(&m, &c).0) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-6));
            let mut p = c.clone();
            p.data_mut()[i] += h;
            let mut m = c.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&x0, &p).0 - f(&x0, &m).0) / (2.0 * h);
            assert!((fd - gc.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
    }

    #[test]
    fn reflow_loss_is_permutation_symmetric_for_pointwise_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = gaussian(1, 6, &mut rng);
        let x1 = gaussian(1, 6, &mut rng);
        let f = |x: &Tensor, t: f64, _: &Tensor| x.map(|v| v.tanh() * (1.0 + t));
        let perm = [3, 0, 5, 1, 4, 2];
        let p = |x: &Tensor| Tensor::row_vector(&perm.iter().map(|&i| x.data()[i]).collect::<Vec<_>>());
        let a = reflow_loss_value(&f, &x0, &x1, 0.3, &x0).unwrap();
        let b = reflow_loss_value(&f, &p(&x0), &p(&x1), 0.3, &p(&x0)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
