//! Straight-through training of the FSQ affine maps.
//!
//! The forward value path is [`quantize`]; the backward pass treats rounding as the identity
//! and differentiates through the `tanh` bound. Gradients are computed in `f64`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{input, Error, Result};
use crate::fsq::{bound_coefficients, quantize, FsqConfig, FsqParams, GroupLayout};
use crate::linalg::Matrix;

/// Weights of the reconstruction and dot-product terms of the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub dot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon: 1.0, dot: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 500,
            batch_size: 64,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.loss_weights;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(w.recon.is_finite() && w.dot.is_finite() && w.recon >= 0.0 && w.dot >= 0.0) || w.recon + w.dot == 0.0 {
            return Err(Error::Config(format!("invalid loss weights {w:?}")));
        }
        Ok(())
    }
}

/// One training example: a query and the catalogue embedding it should score against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub q: Vec<f32>,
    pub c: Vec<f32>,
}

/// Intermediates of one forward pass, consumed by a single [`backward`] call.
#[derive(Debug, Clone)]
pub struct GradTape {
    config: FsqConfig,
    input: Vec<f64>,
    /// Pre-activations `A_in c + b_in`, group-major.
    pre: Vec<f64>,
    /// Normalized values fed to `A_out`.
    normalized: Vec<f64>,
    /// `d normalized / d pre` of the smooth path.
    slope: Vec<f64>,
    consumed: bool,
}

impl GradTape {
    pub fn pre_activations(&self) -> &[f64] {
        &self.pre
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slope
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// Forward pass over `f64` weights in the flat parameter layout. With `codes`, the normalized
/// values are taken from them; without, rounding is replaced by the identity.
fn forward_flat(cfg: &FsqConfig, w: &[f64], c: &[f32], codes: Option<&[u16]>) -> Result<(Vec<f64>, GradTape)> {
    if c.len() != cfg.dim() {
        return input(format!("embedding has dimension {}, expected {}", c.len(), cfg.dim()));
    }
    let layout = GroupLayout::of(cfg);
    if w.len() != layout.block_len() * cfg.groups() {
        return input(format!("{} weights do not match the quantizer layout", w.len()));
    }
    let levels = cfg.levels().levels();
    let (nl, d) = (levels.len(), cfg.sub_dim());
    let mut pre = Vec::with_capacity(cfg.code_len());
    let mut normalized = Vec::with_capacity(cfg.code_len());
    let mut slope = Vec::with_capacity(cfg.code_len());
    let mut z = vec![0f64; cfg.dim()];
    for g in 0..cfg.groups() {
        let block = &w[g * layout.block_len()..(g + 1) * layout.block_len()];
        let (a_in, b_in) = (&block[layout.a_in()], &block[layout.b_in()]);
        let (a_out, b_out) = (&block[layout.a_out()], &block[layout.b_out()]);
        let sub = &c[g * d..(g + 1) * d];
        let start = normalized.len();
        for (i, &l) in levels.iter().enumerate() {
            let p: f64 = a_in[i * d..(i + 1) * d]
                .iter()
                .zip(sub)
                .map(|(&a, &x)| a * x as f64)
                .sum::<f64>()
                + b_in[i];
            let (scale, shift, offset) = bound_coefficients(l);
            let (scale, shift, offset) = (scale as f64, shift as f64, offset as f64);
            let t = (p + shift).tanh();
            let den = (l - 1) as f64;
            let n = match codes {
                Some(codes) => (2.0 * codes[g * nl + i] as f64 - den) / den,
                None => (2.0 * (scale * t - offset + (l / 2) as f64) - den) / den,
            };
            pre.push(p);
            normalized.push(n);
            slope.push(2.0 / den * scale * (1.0 - t * t));
        }
        let n = &normalized[start..];
        for (k, zk) in z[g * d..(g + 1) * d].iter_mut().enumerate() {
            *zk = a_out[k * nl..(k + 1) * nl].iter().zip(n).map(|(&a, &v)| a * v).sum::<f64>() + b_out[k];
        }
    }
    let tape = GradTape {
        config: cfg.clone(),
        input: c.iter().map(|&v| v as f64).collect(),
        pre,
        normalized,
        slope,
        consumed: false,
    };
    Ok((z, tape))
}

fn widen(params: &FsqParams) -> Vec<f64> {
    params.as_flat().iter().map(|&v| v as f64).collect()
}

/// Quantizes `c` exactly as [`quantize`] does and records the straight-through tape.
pub fn forward_ste(c: &[f32], params: &FsqParams) -> Result<(Vec<f32>, GradTape)> {
    let q = quantize(c, params)?;
    let (_, tape) = forward_flat(params.config(), &widen(params), c, Some(q.codes.as_slice()))?;
    Ok((q.z, tape))
}

/// Forward pass of the smooth relaxation, with rounding replaced by the identity.
pub fn forward_smooth(c: &[f32], params: &FsqParams) -> Result<(Vec<f64>, GradTape)> {
    forward_flat(params.config(), &widen(params), c, None)
}

fn backward_flat(tape: &mut GradTape, w: &[f64], upstream: &[f64], grads: &mut [f64]) -> Result<()> {
    if tape.consumed {
        return Err(Error::State("gradient tape already consumed".into()));
    }
    let cfg = &tape.config;
    if upstream.len() != cfg.dim() {
        return input(format!("upstream gradient has length {}, expected {}", upstream.len(), cfg.dim()));
    }
    tape.consumed = true;
    let layout = GroupLayout::of(cfg);
    let (nl, d) = (cfg.levels().len(), cfg.sub_dim());
    let mut dpre = vec![0f64; nl];
    for g in 0..cfg.groups() {
        let span = g * layout.block_len()..(g + 1) * layout.block_len();
        let block = &w[span.clone()];
        let gb = &mut grads[span];
        let dz = &upstream[g * d..(g + 1) * d];
        let n = &tape.normalized[g * nl..(g + 1) * nl];
        let slope = &tape.slope[g * nl..(g + 1) * nl];
        let x = &tape.input[g * d..(g + 1) * d];
        let a_out = &block[layout.a_out()];
        dpre.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..d {
            let row = layout.a_out().start + k * nl;
            for i in 0..nl {
                gb[row + i] += dz[k] * n[i];
                dpre[i] += a_out[k * nl + i] * dz[k];
            }
            gb[layout.b_out().start + k] += dz[k];
        }
        for i in 0..nl {
            let dp = dpre[i] * slope[i];
            let row = layout.a_in().start + i * d;
            for (gv, &xv) in gb[row..row + d].iter_mut().zip(x) {
                *gv += dp * xv;
            }
            gb[layout.b_in().start + i] += dp;
        }
    }
    Ok(())
}

/// Parameter gradients (flat layout of [`FsqParams::as_flat`]) given `dL/dz`.
pub fn backward(tape: &mut GradTape, params: &FsqParams, upstream: &[f64]) -> Result<Vec<f64>> {
    if tape.config != *params.config() {
        return input("tape and parameters have different configurations");
    }
    let mut grads = vec![0f64; params.as_flat().len()];
    backward_flat(tape, &widen(params), upstream, &mut grads)?;
    Ok(grads)
}

/// `W_k q` for a row-convention key projection, so that `q·(c W_k) = c·(W_k q)`.
fn key_direction(w_k: &Matrix, q: &[f32]) -> Vec<f64> {
    (0..w_k.rows())
        .map(|i| w_k.row(i).iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect()
}

/// Which forward path the loss differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relaxation {
    /// Quantized forward values, straight-through gradients.
    StraightThrough,
    /// Rounding replaced by the identity in both passes.
    Smooth,
}

fn check_batch(batch: &[TrainPair], cfg: &FsqConfig, w_k: &Matrix) -> Result<()> {
    if batch.is_empty() {
        return input("empty batch");
    }
    if w_k.rows() != cfg.dim() || w_k.cols() != cfg.dim() {
        return input(format!("W_k is {}x{}, expected {1}x{1}", w_k.rows(), cfg.dim()));
    }
    for (j, p) in batch.iter().enumerate() {
        if p.q.len() != cfg.dim() || p.c.len() != cfg.dim() {
            return input(format!("pair {j} has the wrong dimension"));
        }
    }
    Ok(())
}

/// Loss and gradient over `f64` flat weights.
pub fn loss_and_grad_flat(
    batch: &[TrainPair],
    cfg: &FsqConfig,
    w: &[f64],
    w_k: &Matrix,
    weights: LossWeights,
    mode: Relaxation,
) -> Result<(f64, Vec<f64>)> {
    check_batch(batch, cfg, w_k)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = vec![0f64; w.len()];
    let mut total = 0f64;
    let params32 = match mode {
        Relaxation::StraightThrough => Some(FsqParams::from_flat(
            cfg.clone(),
            w.iter().map(|&v| v as f32).collect(),
        )?),
        Relaxation::Smooth => None,
    };
    let mut dz = vec![0f64; cfg.dim()];
    for p in batch {
        let (z, mut tape) = match &params32 {
            Some(p32) => {
                let q = quantize(&p.c, p32)?;
                let (_, tape) = forward_flat(cfg, w, &p.c, Some(q.codes.as_slice()))?;
                (q.z.iter().map(|&v| v as f64).collect(), tape)
            }
            None => forward_flat(cfg, w, &p.c, None)?,
        };
        let kq = key_direction(w_k, &p.q);
        let mut recon = 0f64;
        let mut delta = 0f64;
        for ((&c, &zv), &k) in p.c.iter().zip(&z).zip(&kq) {
            let r = c as f64 - zv;
            recon += r * r;
            delta += r * k;
        }
        total += weights.recon * recon + weights.dot * delta * delta;
        for (((d, &c), &zv), &k) in dz.iter_mut().zip(&p.c).zip(&z).zip(&kq) {
            *d = scale * (-2.0 * weights.recon * (c as f64 - zv) - 2.0 * weights.dot * delta * k);
        }
        backward_flat(&mut tape, w, &dz, &mut grads)?;
    }
    Ok((total * scale, grads))
}

pub fn loss_and_grad(
    batch: &[TrainPair],
    params: &FsqParams,
    w_k: &Matrix,
    weights: LossWeights,
    mode: Relaxation,
) -> Result<(f64, Vec<f64>)> {
    loss_and_grad_flat(batch, params.config(), &widen(params), w_k, weights, mode)
}

/// `w_recon·mean‖c − z‖² + w_dot·mean(q·(c W_k) − q·(z W_k))²` with `z` the quantized
/// reconstruction.
pub fn loss(batch: &[TrainPair], params: &FsqParams, w_k: &Matrix, weights: LossWeights) -> Result<f64> {
    check_batch(batch, params.config(), w_k)?;
    let mut total = 0f64;
    for p in batch {
        let z = quantize(&p.c, params)?.z;
        let kq = key_direction(w_k, &p.q);
        let mut recon = 0f64;
        let mut delta = 0f64;
        for ((&c, &zv), &k) in p.c.iter().zip(&z).zip(&kq) {
            let r = c as f64 - zv as f64;
            recon += r * r;
            delta += r * k;
        }
        total += weights.recon * recon + weights.dot * delta * delta;
    }
    Ok(total / batch.len() as f64)
}

/// Smooth-relaxation loss over `f64` flat weights.
pub fn smooth_loss_flat(
    batch: &[TrainPair],
    cfg: &FsqConfig,
    w: &[f64],
    w_k: &Matrix,
    weights: LossWeights,
) -> Result<f64> {
    check_batch(batch, cfg, w_k)?;
    let mut total = 0f64;
    for p in batch {
        let (z, _) = forward_flat(cfg, w, &p.c, None)?;
        let kq = key_direction(w_k, &p.q);
        let mut recon = 0f64;
        let mut delta = 0f64;
        for ((&c, &zv), &k) in p.c.iter().zip(&z).zip(&kq) {
            let r = c as f64 - zv;
            recon += r * r;
            delta += r * k;
        }
        total += weights.recon * recon + weights.dot * delta * delta;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FsqParams,
    /// `(step, loss)` of the minibatch at each step.
    pub trace: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,loss")?;
        for (s, l) in &self.trace {
            writeln!(out, "{s},{l}")?;
        }
        Ok(())
    }
}

/// SGD with momentum over shuffled minibatches.
pub fn train(dataset: &[TrainPair], config: &TrainConfig, init: FsqParams, w_k: &Matrix) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return input("empty training set");
    }
    check_batch(dataset, init.config(), w_k)?;
    let cfg = init.config().clone();
    let mut master = widen(&init);
    let mut velocity = vec![0f64; master.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut trace = Vec::with_capacity(config.steps);
    let mut params = init;

    for step in 0..config.steps {
        batch.clear();
        while batch.len() < config.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let (l, grads) = loss_and_grad_flat(&batch, &cfg, &master, w_k, config.loss_weights, Relaxation::StraightThrough)?;
        if !l.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: l });
        }
        trace.push((step, l));
        for ((m, v), g) in master.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
            *v = config.momentum * *v + g;
            *m -= config.learning_rate * *v;
        }
        if master.iter().any(|&m| !(m as f32).is_finite()) {
            return Err(Error::Diverged { step, loss: l });
        }
        params = FsqParams::from_flat(cfg.clone(), master.iter().map(|&v| v as f32).collect())?;
    }
    Ok(TrainOutcome { params, trace })
}

/// Rescales each row of `A_in` so that its pre-activation over `samples` has standard
/// deviation `target`. Rows that are constant over the samples are left unchanged.
pub fn calibrate_input_scale(params: &mut FsqParams, samples: &[Vec<f32>], target: f64) -> Result<()> {
    let cfg = params.config().clone();
    if samples.is_empty() {
        return input("no calibration samples");
    }
    if !(target.is_finite() && target > 0.0) {
        return input(format!("target deviation {target} must be positive"));
    }
    if let Some(j) = samples.iter().position(|c| c.len() != cfg.dim()) {
        return input(format!("sample {j} has the wrong dimension"));
    }
    let layout = GroupLayout::of(&cfg);
    let (d, n) = (layout.sub_dim, samples.len() as f64);
    let block_len = layout.block_len();
    for (g, block) in params.as_flat_mut().chunks_exact_mut(block_len).enumerate() {
        for row in block[layout.a_in()].chunks_exact_mut(d) {
            let (mut sum, mut sq) = (0f64, 0f64);
            for c in samples {
                let p: f64 = row.iter().zip(&c[g * d..(g + 1) * d]).map(|(&a, &x)| a as f64 * x as f64).sum();
                sum += p;
                sq += p * p;
            }
            let var = (sq / n - (sum / n).powi(2)).max(0.0);
            if var > 0.0 {
                let gain = (target / var.sqrt()) as f32;
                row.iter_mut().for_each(|a| *a *= gain);
            }
        }
    }
    if params.as_flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("calibration produced non-finite weights".into()));
    }
    Ok(())
}
