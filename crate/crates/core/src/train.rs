//! Adapter-only training with AdamW and a cosine schedule, plus evaluation metrics.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ModelMode, Site};
use crate::nn::Mode;
use crate::rng::{streams, RngState};
use crate::tasks::{next_token_pairs, RegressionDataset, SequenceDataset};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 3e-3,
            lr_min: 3e-5,
            steps: 5000,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    /// `steps = 0` is accepted and means "evaluate only".
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "need lr_max ≥ lr_min ≥ 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/steps))` for `0 ≤ t ≤ steps`.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t > cfg.steps {
        return Err(Error::Domain(format!("step {t} beyond schedule of {}", cfg.steps)));
    }
    if cfg.steps == 0 {
        return Ok(cfg.lr_max);
    }
    let phase = std::f64::consts::PI * t as f64 / cfg.steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One AdamW update with decoupled weight decay (`θ ← θ − lr·wd·θ` before the Adam step).
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("adamw_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape("adamw_step", "optimizer state built for other parameters"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w -= lr * cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

/// What a model trains and is evaluated on.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Regression(&'a RegressionDataset),
    Sequences(&'a SequenceDataset),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Perplexity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub lr_curve: Vec<f64>,
    pub final_train_loss: f64,
    pub metric: Metric,
    pub test_metric: f64,
    pub trainable_params: usize,
    pub backbone_checksum: String,
    pub wallclock_seconds: f64,
    pub tokens_per_second: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV with columns `step, lr, loss`.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "lr", "loss"])?;
        for (i, (lr, loss)) in self.lr_curve.iter().zip(&self.loss_curve).enumerate() {
            w.write_record([i.to_string(), lr.to_string(), loss.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        crate::io::write_atomic(path, &bytes)
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.data().iter().map(|x| x * x).sum::<f64>() / d.len().max(1) as f64)
}

/// Eval-mode test MSE of a regressor on a regression split.
pub fn regression_mse(model: &Model, x: &Tensor, y: &Tensor) -> Result<f64> {
    let pred = model.forward(Batch::Features(x), Mode::Eval, &mut RngState::new(0, streams::PROBE))?;
    mse(&pred, y)
}

/// `exp(mean cross-entropy)` of row logits against targets, natural log.
pub fn perplexity_from_logits(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, targets)?;
    Ok(tape.value(ce).data()[0].exp())
}

const EVAL_CHUNK: usize = 32;

/// Next-token perplexity over `seqs` in eval mode.
pub fn perplexity(model: &Model, seqs: &[Vec<usize>]) -> Result<f64> {
    if model.config().mode != ModelMode::LanguageModel {
        return Err(Error::Config("perplexity needs a language model".into()));
    }
    if seqs.is_empty() {
        return Err(Error::Input("perplexity over an empty split".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut rng = RngState::new(0, streams::PROBE);
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let (inputs, targets) = next_token_pairs(chunk);
        if targets.is_empty() {
            continue;
        }
        let logits = model.forward(Batch::Tokens(&inputs), Mode::Eval, &mut rng)?;
        let v = model.config().vocab_size;
        let flat = logits.reshape(vec![targets.len(), v])?;
        total += perplexity_from_logits(&flat, &targets)?.ln() * targets.len() as f64;
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::Input("sequences too short to predict any token".into()));
    }
    Ok((total / count as f64).exp())
}

/// Test metric for the data's kind: MSE for regression, perplexity for sequences.
pub fn evaluate(model: &Model, data: TrainData<'_>) -> Result<(Metric, f64)> {
    match data {
        TrainData::Regression(ds) => Ok((Metric::Mse, regression_mse(model, &ds.test_x, &ds.test_y)?)),
        TrainData::Sequences(ds) => Ok((Metric::Perplexity, perplexity(model, &ds.test)?)),
    }
}

fn train_loss_eval(model: &Model, data: TrainData<'_>) -> Result<f64> {
    match data {
        TrainData::Regression(ds) => regression_mse(model, &ds.train_x, &ds.train_y),
        TrainData::Sequences(ds) => Ok(perplexity(model, &ds.train)?.ln()),
    }
}

/// Cycles through shuffled epochs of `n` indices.
struct Batcher {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: RngState,
}

impl Batcher {
    fn new(n: usize, rng: RngState) -> Self {
        Batcher {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = self.rng.permutation(self.n);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Trains every injected adapter; backbone weights are read-only by construction.
///
/// Batches and dropout draw from separate streams of `cfg.seed`, so identical configs
/// yield bit-identical loss curves.
pub fn train_adapter(model: &mut Model, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if model.adapters().is_empty() {
        return Err(Error::Config("no adapter injected".into()));
    }
    let n_train = match data {
        TrainData::Regression(ds) => ds.train_x.rows(),
        TrainData::Sequences(ds) => ds.train.len(),
    };
    if n_train == 0 {
        return Err(Error::Input("empty training split".into()));
    }
    let checksum = model.backbone().checksum();
    let mut batcher = Batcher::new(n_train, RngState::new(cfg.seed, streams::BATCHES));
    let mut dropout_rng = RngState::new(cfg.seed, streams::DROPOUT);
    let mut opt = AdamState::new();
    let sites: Vec<Site> = model.adapters().keys().copied().collect();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut lr_curve = Vec::with_capacity(cfg.steps);
    let mut positions = 0usize;
    let start = Instant::now();

    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg)?;
        let idx = batcher.next(cfg.batch_size);
        let mut tape = Tape::new();
        let vars = model.adapter_vars(&mut tape, true);
        let loss = match data {
            TrainData::Regression(ds) => {
                let (x, y) = ds.rows(false, &idx)?;
                positions += x.rows();
                let fwd = model.forward_on_tape(&mut tape, Batch::Features(&x), &vars, Mode::Train, &mut dropout_rng, false)?;
                let target = tape.constant(y);
                tape.mse(fwd.output, target)?
            }
            TrainData::Sequences(ds) => {
                let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| ds.train[i].clone()).collect();
                let (inputs, targets) = next_token_pairs(&seqs);
                positions += targets.len();
                let fwd = model.forward_on_tape(&mut tape, Batch::Tokens(&inputs), &vars, Mode::Train, &mut dropout_rng, false)?;
                tape.cross_entropy(fwd.output, &targets)?
            }
        };
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss became {loss_value} at lr {lr:.3e}"),
            });
        }
        let grads = tape.backward(loss)?;
        let mut flat_grads = Vec::with_capacity(2 * sites.len());
        for site in &sites {
            let (up, down) = vars[site];
            flat_grads.push(grads.get(up).expect("adapter parameters are trainable"));
            flat_grads.push(grads.get(down).expect("adapter parameters are trainable"));
        }
        if let Some(c) = cfg.grad_clip {
            let norm = clip_global_norm(&mut flat_grads, c);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("gradient norm became {norm}"),
                });
            }
        }
        let adapters = model.adapters_mut();
        let mut params: Vec<&mut Tensor> = Vec::with_capacity(2 * sites.len());
        for a in adapters.values_mut() {
            params.push(&mut a.state.w_up);
            params.push(&mut a.state.w_down);
        }
        adamw_step(&mut params, &flat_grads, &mut opt, lr, cfg)?;
        loss_curve.push(loss_value);
        lr_curve.push(lr);
    }
    let wallclock = start.elapsed().as_secs_f64();

    if model.backbone().checksum() != checksum {
        return Err(Error::Contract("backbone weights changed during training".into()));
    }
    let (metric, test_metric) = evaluate(model, data)?;
    let final_train_loss = match loss_curve.last() {
        Some(&l) => l,
        None => train_loss_eval(model, data)?,
    };
    Ok(TrainReport {
        loss_curve,
        lr_curve,
        final_train_loss,
        metric,
        test_metric,
        trainable_params: model.trainable_params(),
        backbone_checksum: checksum,
        wallclock_seconds: wallclock,
        tokens_per_second: if wallclock > 0.0 { positions as f64 / wallclock } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub repetitions: usize,
    pub positions_per_call: usize,
    pub median_seconds: f64,
    pub baseline_median_seconds: f64,
    pub tokens_per_second: f64,
    /// Median latency relative to the backbone with every adapter folded away.
    pub relative_latency: f64,
    /// Coefficient of variation of the adapted model's timings.
    pub cv: f64,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 || xs.len() < 2 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

/// Eval-mode latency of `model` against `baseline`, timed in interleaved pairs.
///
/// `baseline` is usually the same backbone with no adapters: identical work to a model
/// whose linear adapters have been merged.
pub fn measure_throughput(model: &Model, baseline: &Model, batch: Batch<'_>, repetitions: usize) -> Result<Throughput> {
    let reps = repetitions.max(1);
    let mut rng = RngState::new(0, streams::PROBE);
    // warm-up so allocation effects do not land in the first sample
    model.forward(batch, Mode::Eval, &mut rng)?;
    baseline.forward(batch, Mode::Eval, &mut rng)?;
    let mut ours = Vec::with_capacity(reps);
    let mut base = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(model.forward(batch, Mode::Eval, &mut rng)?);
        ours.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(baseline.forward(batch, Mode::Eval, &mut rng)?);
        base.push(t.elapsed().as_secs_f64());
    }
    let cv = coefficient_of_variation(&ours);
    let m = median(&mut ours);
    let b = median(&mut base);
    let positions = batch.positions();
    Ok(Throughput {
        repetitions: reps,
        positions_per_call: positions,
        median_seconds: m,
        baseline_median_seconds: b,
        tokens_per_second: if m > 0.0 { positions as f64 / m } else { 0.0 },
        relative_latency: if b > 0.0 { m / b } else { 1.0 },
        cv,
    })
}
