//! Continual-learning engine: replay buffers, the decoupled invariant/variant
//! objective, the warmup stage, AdamW with a cosine schedule, and run-state
//! checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    init_adapter, load_adapter, orthogonal_penalty, orthogonal_penalty_on_tape, save_adapter, AdapterRole, BoundAdapter, LoraAdapter,
    Projection,
};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{BaseModel, Example, Tokenizer};
use crate::numerics::{Gradients, Matrix, ParamId, Tape, Var};
use crate::tasks::{build_instruction, target_text, Instance};

const RUN_FORMAT: &str = "abscl-run";
const RUN_VERSION: u32 = 1;

/// How the post-sequence warmup treats the invariant adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupMode {
    /// One warmed clone per domain, trained next to that domain's variant.
    PerDomain,
    /// A single warmed clone trained alone and shared by every domain.
    Shared,
}

impl fmt::Display for WarmupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WarmupMode::PerDomain => "per_domain",
            WarmupMode::Shared => "shared",
        })
    }
}

impl FromStr for WarmupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_domain" | "per-domain" => Ok(WarmupMode::PerDomain),
            "shared" => Ok(WarmupMode::Shared),
            _ => Err(Error::usage(format!("unknown warmup mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_decouple: f64,
    pub lambda_warmup: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Multiplies `lr` for every update of the invariant adapter and its
    /// warmup clones.
    pub invariant_lr_scale: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub rank: usize,
    /// Adapter initialization, replay draws and batch shuffling.
    pub seed: u64,
    pub warmup_mode: WarmupMode,
    pub projections: Vec<Projection>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_decouple: 1e-6,
            lambda_warmup: 1e-5,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            invariant_lr_scale: 1.0,
            epochs: 30,
            warmup_epochs: 10,
            batch_size: 16,
            replay_capacity: 8,
            rank: 8,
            seed: 0,
            warmup_mode: WarmupMode::PerDomain,
            projections: vec![Projection::Q, Projection::V],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("{k} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lambda_decouple", self.lambda_decouple),
            ("lambda_warmup", self.lambda_warmup),
            ("weight_decay", self.weight_decay),
            ("invariant_lr_scale", self.invariant_lr_scale),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("{k} must be non-negative, got {v}")));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::usage(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.rank == 0 {
            return Err(Error::usage("batch_size, replay_capacity and rank must be at least 1"));
        }
        if self.projections.is_empty() {
            return Err(Error::usage("at least one injection projection is required"));
        }
        Ok(())
    }

    /// Flat `key=value` lines, keys named after the fields.
    pub fn to_kv(&self) -> String {
        let projections: Vec<&str> = self.projections.iter().map(|p| p.name()).collect();
        format!(
            "lambda_decouple={:?}\nlambda_warmup={:?}\nlr={:?}\nbeta1={:?}\nbeta2={:?}\nadam_eps={:?}\n\
             weight_decay={:?}\ninvariant_lr_scale={:?}\nepochs={}\nwarmup_epochs={}\nbatch_size={}\nreplay_capacity={}\nrank={}\n\
             seed={}\nwarmup_mode={}\nprojections={}\n",
            self.lambda_decouple,
            self.lambda_warmup,
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.weight_decay,
            self.invariant_lr_scale,
            self.epochs,
            self.warmup_epochs,
            self.batch_size,
            self.replay_capacity,
            self.rank,
            self.seed,
            self.warmup_mode,
            projections.join(",")
        )
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::usage(format!("invalid value `{value}` for `{key}`")))
        }
        match key.trim() {
            "lambda_decouple" => self.lambda_decouple = num(key, value)?,
            "lambda_warmup" => self.lambda_warmup = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "invariant_lr_scale" => self.invariant_lr_scale = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "replay_capacity" => self.replay_capacity = num(key, value)?,
            "rank" => self.rank = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "warmup_mode" => self.warmup_mode = value.trim().parse()?,
            "projections" => {
                self.projections = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<Vec<_>>>()?
            }
            other => return Err(Error::usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn from_kv(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("config line `{line}` is not key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Prompt and response of `instance`, tokenized into a teacher-forced example.
pub fn encode_instance(tokenizer: &Tokenizer, instance: &Instance) -> Result<Example> {
    let prompt = tokenizer.encode(&build_instruction(instance.task, instance)?);
    let target = tokenizer.encode(&target_text(instance)?);
    Ok(Example::new(&prompt, &target))
}

pub fn encode_all(tokenizer: &Tokenizer, instances: &[Instance]) -> Result<Vec<Example>> {
    instances.iter().map(|i| encode_instance(tokenizer, i)).collect()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB))
        ^ 0x2545_F491_4F6C_DD1D
}

/// Uniform sample without replacement, in original order. A domain smaller
/// than `capacity` is kept whole.
pub fn replay_sample(data: &[Instance], capacity: usize, seed: u64) -> Result<Vec<Instance>> {
    if capacity == 0 {
        return Err(Error::usage("replay capacity must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::degenerate("cannot sample replay data from an empty domain"));
    }
    if data.len() <= capacity {
        return Ok(data.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, data.len(), capacity).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| data[i].clone()).collect())
}

/// Retained samples of every seen domain, in training order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    domains: Vec<(String, Vec<Instance>)>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_domain(&mut self, name: &str, data: &[Instance], capacity: usize, seed: u64) -> Result<()> {
        if self.contains(name) {
            return Err(Error::usage(format!("replay buffer already holds domain `{name}`")));
        }
        let kept = replay_sample(data, capacity, seed)?;
        self.domains.push((name.to_string(), kept));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.domains.iter().any(|(n, _)| n == name)
    }

    pub fn domain(&self, name: &str) -> Option<&[Instance]> {
        self.domains.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn domains(&self) -> impl Iterator<Item = (&str, &[Instance])> {
        self.domains.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    /// Every retained instance, tagged with its domain.
    pub fn all(&self) -> Vec<Instance> {
        self.domains
            .iter()
            .flat_map(|(n, v)| {
                v.iter().map(move |i| Instance {
                    domain: Some(n.clone()),
                    ..i.clone()
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `base_lr · ½(1 + cos(π·step/total_steps))`
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::usage("cosine schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::usage(format!("step {step} beyond schedule of {total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Matrix]) -> Self {
        Self {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    pub fn for_adapter(adapter: &LoraAdapter) -> Self {
        Self::zeros_like(&adapter.matrices())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
/// Nothing is modified when a gradient is non-finite or shapes disagree.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::usage(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient in optimizer step".into()));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * *w);
        }
    }
    Ok(())
}

/// Epoch-mean losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_d: f64,
    pub l_o: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_s: f64, l_d: f64, l_o: f64, lambda: f64) -> Self {
        Self {
            l_s,
            l_d,
            l_o,
            total: l_s + l_d + lambda * l_o,
        }
    }
}

/// Mean over examples of each example's token-mean cross-entropy, recorded
/// as one batched forward pass.
pub fn batch_lm_loss<'a>(
    model: &'a BaseModel,
    tape: &mut Tape<'a>,
    adapters: &[&BoundAdapter],
    batch: &[&Example],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::degenerate("empty batch"));
    }
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.input.as_slice()).collect();
    let hidden = model.forward_batch_on_tape(tape, adapters, &seqs)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut offset = 0;
    for e in batch {
        let count = e.mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::degenerate("example without response tokens"));
        }
        let w = 1.0 / (count as f64 * batch.len() as f64);
        for (t, &m) in e.mask.iter().enumerate() {
            if m {
                rows.push(offset + t);
                targets.push(e.targets[t]);
                weights.push(w);
            }
        }
        offset += e.input.len();
    }
    let logits = model.logits_on_tape(tape, hidden, Some(&rows))?;
    tape.weighted_cross_entropy(logits, &targets, &weights)
}

/// Mean language-modelling loss with the given adapters active, no gradient.
pub fn lm_loss(model: &BaseModel, adapters: &[&LoraAdapter], batch: &[&Example]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound: Vec<BoundAdapter> = adapters.iter().map(|a| a.bind(&mut tape, None)).collect();
    let refs: Vec<&BoundAdapter> = bound.iter().collect();
    let loss = batch_lm_loss(model, &mut tape, &refs, batch)?;
    Ok(tape.scalar(loss))
}

/// Losses and routed gradients of one decoupling step.
///
/// Invariant matrices are parameters `0..n`, variant matrices `n..2n` with
/// `n = invariant.num_matrices()`, both in [`LoraAdapter::matrices`] order.
#[derive(Clone, Debug)]
pub struct DecoupledGradients {
    pub report: LossReport,
    /// Gradient of `L_S`; every variant id is exactly zero.
    pub ls: Gradients,
    /// Gradient of `L_D`; every invariant id is exactly zero.
    pub ld: Gradients,
    /// Gradient of `L_O` (unscaled).
    pub lo: Gradients,
}

impl DecoupledGradients {
    /// `∇L_S + ∇L_D + λ∇L_O`, split into invariant and variant lists.
    pub fn combined(&self, lambda: f64, n: usize) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        let mut total = self.ls.clone();
        total.accumulate(&self.ld)?;
        let mut lo = self.lo.clone();
        lo.scale(lambda);
        total.accumulate(&lo)?;
        let take = |range: std::ops::Range<usize>| -> Vec<Matrix> {
            range
                .map(|i| total.get(ParamId(i)).expect("registered parameter").clone())
                .collect()
        };
        Ok((take(0..n), take(n..2 * n)))
    }
}

pub fn decoupled_gradients(
    model: &BaseModel,
    invariant: &LoraAdapter,
    variant: &LoraAdapter,
    replay_batch: &[&Example],
    domain_batch: &[&Example],
    lambda: f64,
) -> Result<DecoupledGradients> {
    if !invariant.same_structure(variant) {
        return Err(Error::usage("invariant and variant adapters differ in structure"));
    }
    let n = invariant.num_matrices();

    let (l_s, ls) = {
        let mut tape = Tape::new();
        let inv = invariant.bind(&mut tape, Some(0));
        let var = variant.bind_masked(&mut tape, n);
        let loss = batch_lm_loss(model, &mut tape, &[&inv, &var], replay_batch)?;
        (tape.scalar(loss), tape.backward(loss)?)
    };
    let (l_d, ld) = {
        let mut tape = Tape::new();
        let inv = invariant.bind_masked(&mut tape, 0);
        let var = variant.bind(&mut tape, Some(n));
        let loss = batch_lm_loss(model, &mut tape, &[&inv, &var], domain_batch)?;
        (tape.scalar(loss), tape.backward(loss)?)
    };
    let (l_o, lo) = {
        let mut tape = Tape::new();
        let inv = invariant.bind(&mut tape, Some(0));
        let var = variant.bind(&mut tape, Some(n));
        let loss = orthogonal_penalty_on_tape(&mut tape, (variant, &var), (invariant, &inv))?;
        (tape.scalar(loss), tape.backward(loss)?)
    };
    Ok(DecoupledGradients {
        report: LossReport::new(l_s, l_d, l_o, lambda),
        ls,
        ld,
        lo,
    })
}

/// Worst relative error, `|analytic − numeric| / max(1, |numeric|)`, of the
/// routed gradient against central differences: invariant coordinates
/// against `L_S + λL_O`, variant coordinates against `L_D + λL_O`.
pub fn check_decoupled_gradients(
    model: &BaseModel,
    invariant: &LoraAdapter,
    variant: &LoraAdapter,
    replay_batch: &[&Example],
    domain_batch: &[&Example],
    lambda: f64,
    eps: f64,
) -> Result<f64> {
    let n = invariant.num_matrices();
    let (g_inv, g_var) = decoupled_gradients(model, invariant, variant, replay_batch, domain_batch, lambda)?
        .combined(lambda, n)?;
    let objective = |inv: &LoraAdapter, var: &LoraAdapter, batch: &[&Example]| -> Result<f64> {
        Ok(lm_loss(model, &[inv, var], batch)? + lambda * orthogonal_penalty(var, inv)?)
    };
    let mut worst = 0.0f64;
    for (side, grads) in [(0, &g_inv), (1, &g_var)] {
        let batch = if side == 0 { replay_batch } else { domain_batch };
        for (m, grad) in grads.iter().enumerate() {
            for k in 0..grad.len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut inv = invariant.clone();
                    let mut var = variant.clone();
                    let target = if side == 0 { &mut inv } else { &mut var };
                    target.matrices_mut()[m].data_mut()[k] += delta;
                    objective(&inv, &var, batch)
                };
                let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
                worst = worst.max((grad.data()[k] - numeric).abs() / numeric.abs().max(1.0));
            }
        }
    }
    Ok(worst)
}

/// Worst finite-difference errors of one randomized gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReport {
    pub lml: f64,
    pub orthogonal: f64,
    /// Full `L_S + L_D + λL_O` and its routed split, whichever is worse.
    pub combined: f64,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        self.lml.max(self.orthogonal).max(self.combined)
    }
}

fn fd_error(
    adapters: &[&LoraAdapter],
    analytic: &Gradients,
    eps: f64,
    objective: &dyn Fn(&[LoraAdapter]) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut offset = 0;
    for (which, a) in adapters.iter().enumerate() {
        for m in 0..a.num_matrices() {
            let grad = analytic
                .get(ParamId(offset + m))
                .ok_or_else(|| Error::usage(format!("no gradient for parameter {}", offset + m)))?;
            for k in 0..grad.len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut work: Vec<LoraAdapter> = adapters.iter().map(|a| (*a).clone()).collect();
                    work[which].matrices_mut()[m].data_mut()[k] += delta;
                    objective(&work)
                };
                let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
                worst = worst.max((grad.data()[k] - numeric).abs() / numeric.abs().max(1.0));
            }
        }
        offset += a.num_matrices();
    }
    Ok(worst)
}

/// Checks the language-model loss, the orthogonal penalty and the combined
/// decoupling loss on a small random model, adapters and batches drawn from
/// `seed`. Errors are `|analytic − numeric| / max(1, |numeric|)`.
pub fn gradient_suite(seed: u64, eps: f64) -> Result<GradientReport> {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=2);
    let config = crate::model::ModelConfig {
        vocab_size: rng.random_range(10..16),
        d_model: heads * rng.random_range(2..=4),
        n_layers: rng.random_range(1..=2),
        n_heads: heads,
        max_len: 12,
        seed: rng.random(),
    };
    let model = BaseModel::new(config.clone())?;
    let mut projections: Vec<Projection> = Projection::ALL.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    if projections.is_empty() {
        projections.push(Projection::ALL[rng.random_range(0..6)]);
    }
    let points = model.injection_points(&projections);
    let rank = rng.random_range(1..=config.d_model.min(3));
    let normal = Normal::new(0.0, 0.3).expect("valid std");
    let mut random_adapter = |role| -> Result<LoraAdapter> {
        let mut a = init_adapter(rank, config.d_model, &points, rng.random(), role)?;
        for m in a.matrices_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Ok(a)
    };
    let inv = random_adapter(AdapterRole::Invariant)?;
    let var = random_adapter(AdapterRole::Variant(0))?;
    let mut example = || {
        let word = |rng: &mut ChaCha8Rng| rng.random_range(crate::model::RESERVED.len()..config.vocab_size);
        let prompt: Vec<usize> = (0..rng.random_range(1..5)).map(|_| word(&mut rng)).collect();
        let target: Vec<usize> = (0..rng.random_range(1..4)).map(|_| word(&mut rng)).collect();
        Example::new(&prompt, &target)
    };
    let replay: Vec<Example> = (0..2).map(|_| example()).collect();
    let domain: Vec<Example> = (0..2).map(|_| example()).collect();
    let replay: Vec<&Example> = replay.iter().collect();
    let domain: Vec<&Example> = domain.iter().collect();
    let lambda = 0.5;
    let n = inv.num_matrices();

    let lml = {
        let mut tape = Tape::new();
        let bi = inv.bind(&mut tape, Some(0));
        let bv = var.bind(&mut tape, Some(n));
        let loss = batch_lm_loss(&model, &mut tape, &[&bi, &bv], &domain)?;
        let g = tape.backward(loss)?;
        fd_error(&[&inv, &var], &g, eps, &|w| lm_loss(&model, &[&w[0], &w[1]], &domain))?
    };
    let orthogonal = {
        let mut tape = Tape::new();
        let bi = inv.bind(&mut tape, Some(0));
        let bv = var.bind(&mut tape, Some(n));
        let loss = orthogonal_penalty_on_tape(&mut tape, (&var, &bv), (&inv, &bi))?;
        let g = tape.backward(loss)?;
        fd_error(&[&inv, &var], &g, eps, &|w| orthogonal_penalty(&w[1], &w[0]))?
    };
    let full = {
        let mut tape = Tape::new();
        let bi = inv.bind(&mut tape, Some(0));
        let bv = var.bind(&mut tape, Some(n));
        let ls = batch_lm_loss(&model, &mut tape, &[&bi, &bv], &replay)?;
        let ld = batch_lm_loss(&model, &mut tape, &[&bi, &bv], &domain)?;
        let lo = orthogonal_penalty_on_tape(&mut tape, (&var, &bv), (&inv, &bi))?;
        let lo = tape.scale(lo, lambda);
        let sum = tape.add(ls, ld)?;
        let loss = tape.add(sum, lo)?;
        let g = tape.backward(loss)?;
        fd_error(&[&inv, &var], &g, eps, &|w| {
            Ok(lm_loss(&model, &[&w[0], &w[1]], &replay)?
                + lm_loss(&model, &[&w[0], &w[1]], &domain)?
                + lambda * orthogonal_penalty(&w[1], &w[0])?)
        })?
    };
    let routed = check_decoupled_gradients(&model, &inv, &var, &replay, &domain, lambda, eps)?;
    Ok(GradientReport {
        lml,
        orthogonal,
        combined: full.max(routed),
    })
}

fn apply_update(adapter: &mut LoraAdapter, grads: &[Matrix], state: &mut AdamState, lr: f64, hp: AdamParams) -> Result<()> {
    let refs: Vec<&Matrix> = grads.iter().collect();
    let mut params = adapter.matrices_mut();
    adamw_step(&mut params, &refs, state, lr, hp)?;
    for p in params {
        p.round_to_f32();
    }
    Ok(())
}

/// Everything that evolves over a continual-learning run.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSequenceState {
    /// Planned domain order.
    pub order: Vec<String>,
    pub invariant: LoraAdapter,
    /// One per completed domain, in order.
    pub variants: Vec<LoraAdapter>,
    /// One per domain once warmup has run.
    pub warmed: Vec<LoraAdapter>,
    pub replay: ReplayBuffer,
    pub invariant_optimizer: AdamState,
    pub step: u64,
    /// `(domain index, epoch, report)` of every completed epoch.
    pub history: Vec<(usize, usize, LossReport)>,
}

impl DomainSequenceState {
    pub fn new(model: &BaseModel, order: Vec<String>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if order.is_empty() {
            return Err(Error::usage("domain order is empty"));
        }
        let points = model.injection_points(&config.projections);
        let invariant = init_adapter(
            config.rank,
            model.config().d_model,
            &points,
            mix(config.seed, 0, 0),
            AdapterRole::Invariant,
        )?;
        let invariant_optimizer = AdamState::for_adapter(&invariant);
        Ok(Self {
            order,
            invariant,
            variants: Vec::new(),
            warmed: Vec::new(),
            replay: ReplayBuffer::new(),
            invariant_optimizer,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn completed(&self) -> usize {
        self.variants.len()
    }

    pub fn is_warmed(&self) -> bool {
        !self.warmed.is_empty()
    }

    /// Adds the replay draw of the next domain in the order.
    pub fn begin_domain(&mut self, data: &[Instance], config: &TrainConfig) -> Result<()> {
        let i = self.completed();
        let name = self
            .order
            .get(i)
            .ok_or_else(|| Error::usage("every domain in the order is already trained"))?
            .clone();
        self.replay
            .add_domain(&name, data, config.replay_capacity, mix(config.seed, 1, i as u64))
    }
}

fn batches(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn mean_report(sum: (f64, f64, f64), steps: usize, lambda: f64) -> LossReport {
    let n = steps.max(1) as f64;
    LossReport::new(sum.0 / n, sum.1 / n, sum.2 / n, lambda)
}

/// Trains the next domain of `state.order` on `data`. The replay buffer must
/// already hold that domain's draw (see [`DomainSequenceState::begin_domain`]).
pub fn train_domain(
    model: &BaseModel,
    tokenizer: &Tokenizer,
    state: &mut DomainSequenceState,
    data: &[Instance],
    config: &TrainConfig,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    let i = state.completed();
    let name = state
        .order
        .get(i)
        .ok_or_else(|| Error::usage("every domain in the order is already trained"))?
        .clone();
    if !state.replay.contains(&name) {
        return Err(Error::usage(format!(
            "replay buffer has no draw from the current domain `{name}`"
        )));
    }
    if data.is_empty() {
        return Err(Error::degenerate(format!("domain `{name}` has no training data")));
    }
    let domain_examples = encode_all(tokenizer, data)?;
    let replay_examples = encode_all(tokenizer, &state.replay.all())?;

    let mut variant = init_adapter(
        config.rank,
        model.config().d_model,
        &model.injection_points(&config.projections),
        mix(config.seed, 2, i as u64),
        AdapterRole::Variant(i),
    )?;
    if !variant.same_structure(&state.invariant) {
        return Err(Error::usage("configured injection points differ from the run's invariant adapter"));
    }
    let mut invariant = state.invariant.clone();
    let mut inv_opt = AdamState::for_adapter(&invariant);
    let mut var_opt = AdamState::for_adapter(&variant);
    let hp = AdamParams::from(config);
    let n = invariant.num_matrices();

    let per_epoch = domain_examples.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let replay_size = config.batch_size.min(replay_examples.len());
    let mut reports = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut sum = (0.0, 0.0, 0.0);
        for (b, idx) in batches(domain_examples.len(), config.batch_size, mix(config.seed, 3, (i * 100_003 + epoch) as u64))
            .into_iter()
            .enumerate()
        {
            let domain_batch: Vec<&Example> = idx.iter().map(|&k| &domain_examples[k]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 4, ((i * 100_003 + epoch) * 10_007 + b) as u64));
            let replay_batch: Vec<&Example> = replay_examples.choose_multiple(&mut rng, replay_size).collect();
            let g = decoupled_gradients(model, &invariant, &variant, &replay_batch, &domain_batch, config.lambda_decouple)?;
            let (g_inv, g_var) = g.combined(config.lambda_decouple, n)?;
            let lr = cosine_lr(step, total_steps, config.lr)?;
            apply_update(&mut invariant, &g_inv, &mut inv_opt, lr * config.invariant_lr_scale, hp)?;
            apply_update(&mut variant, &g_var, &mut var_opt, lr, hp)?;
            sum.0 += g.report.l_s;
            sum.1 += g.report.l_d;
            sum.2 += g.report.l_o;
            step += 1;
        }
        reports.push(mean_report(sum, per_epoch, config.lambda_decouple));
    }

    state.invariant = invariant;
    state.invariant_optimizer = inv_opt;
    state.variants.push(variant);
    state.step += step as u64;
    state
        .history
        .extend(reports.iter().enumerate().map(|(e, r)| (i, e, *r)));
    Ok(reports)
}

/// Fine-tunes `adapter` alone on `data` with LML plus `λ·Σ L_O` against each
/// frozen partner; `active` adapters join the forward pass without training.
fn finetune(
    model: &BaseModel,
    adapter: &mut LoraAdapter,
    active: &[&LoraAdapter],
    partners: &[&LoraAdapter],
    examples: &[Example],
    epochs: usize,
    lambda: f64,
    lr: f64,
    config: &TrainConfig,
    seed: u64,
    optimizer: &mut AdamState,
) -> Result<Vec<LossReport>> {
    let hp = AdamParams::from(config);
    let per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * epochs;
    let mut reports = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut sum = (0.0, 0.0, 0.0);
        for idx in batches(examples.len(), config.batch_size, mix(seed, 5, epoch as u64)) {
            let batch: Vec<&Example> = idx.iter().map(|&k| &examples[k]).collect();
            let (lm, mut grads) = {
                let mut tape = Tape::new();
                let own = adapter.bind(&mut tape, Some(0));
                let mut bound = vec![own];
                bound.extend(active.iter().map(|a| a.bind(&mut tape, None)));
                let refs: Vec<&BoundAdapter> = bound.iter().collect();
                let loss = batch_lm_loss(model, &mut tape, &refs, &batch)?;
                (tape.scalar(loss), tape.backward(loss)?)
            };
            let mut lo_total = 0.0;
            for p in partners {
                let mut tape = Tape::new();
                let own = adapter.bind(&mut tape, Some(0));
                let other = p.bind(&mut tape, None);
                let loss = orthogonal_penalty_on_tape(&mut tape, (p, &other), (adapter, &own))?;
                lo_total += tape.scalar(loss);
                let mut g = tape.backward(loss)?;
                g.scale(lambda);
                grads.accumulate(&g)?;
            }
            let list: Vec<Matrix> = (0..adapter.num_matrices())
                .map(|k| grads.get(ParamId(k)).expect("registered parameter").clone())
                .collect();
            let lr = cosine_lr(step, total_steps, lr)?;
            apply_update(adapter, &list, optimizer, lr, hp)?;
            sum.0 += lm;
            sum.2 += lo_total;
            step += 1;
        }
        reports.push(mean_report(sum, per_epoch, lambda));
    }
    Ok(reports)
}

/// Post-sequence warmup of the invariant adapter on the full replay set.
/// Variant adapters are read-only here.
pub fn warmup(
    model: &BaseModel,
    tokenizer: &Tokenizer,
    state: &mut DomainSequenceState,
    config: &TrainConfig,
) -> Result<Vec<LoraAdapter>> {
    config.validate()?;
    let n = state.order.len();
    if state.variants.len() != n {
        return Err(Error::usage(format!(
            "warmup needs a variant adapter for each of the {n} domains, found {}",
            state.variants.len()
        )));
    }
    let examples = encode_all(tokenizer, &state.replay.all())?;
    if examples.is_empty() {
        return Err(Error::degenerate("warmup with an empty replay buffer"));
    }
    let warmed: Vec<LoraAdapter> = match config.warmup_mode {
        WarmupMode::PerDomain => (0..n)
            .into_par_iter()
            .map(|i| {
                let mut clone = state.invariant.with_role(AdapterRole::WarmedInvariant(i));
                let mut opt = AdamState::for_adapter(&clone);
                let variant = &state.variants[i];
                finetune(
                    model,
                    &mut clone,
                    &[variant],
                    &[variant],
                    &examples,
                    config.warmup_epochs,
                    config.lambda_warmup,
                    config.lr * config.invariant_lr_scale,
                    config,
                    mix(config.seed, 6, i as u64),
                    &mut opt,
                )?;
                Ok(clone)
            })
            .collect::<Result<Vec<_>>>()?,
        WarmupMode::Shared => {
            let mut clone = state.invariant.clone();
            let mut opt = AdamState::for_adapter(&clone);
            let partners: Vec<&LoraAdapter> = state.variants.iter().collect();
            finetune(
                model,
                &mut clone,
                &[],
                &partners,
                &examples,
                config.warmup_epochs,
                config.lambda_warmup,
                config.lr * config.invariant_lr_scale,
                config,
                mix(config.seed, 7, 0),
                &mut opt,
            )?;
            (0..n).map(|i| clone.with_role(AdapterRole::WarmedInvariant(i))).collect()
        }
    };
    state.warmed = warmed.clone();
    Ok(warmed)
}

/// Plain sequential fine-tuning of one adapter on one domain (the
/// `sequence` baseline). Returns per-epoch reports with only `L_D` set.
pub fn train_sequential(
    model: &BaseModel,
    tokenizer: &Tokenizer,
    adapter: &mut LoraAdapter,
    optimizer: &mut AdamState,
    domain_index: usize,
    data: &[Instance],
    config: &TrainConfig,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::degenerate("domain has no training data"));
    }
    let examples = encode_all(tokenizer, data)?;
    let reports = finetune(
        model,
        adapter,
        &[],
        &[],
        &examples,
        config.epochs,
        0.0,
        config.lr,
        config,
        mix(config.seed, 8, domain_index as u64),
        optimizer,
    )?;
    Ok(reports
        .into_iter()
        .map(|r| LossReport::new(0.0, r.l_s, 0.0, 0.0))
        .collect())
}

/// Optional stage that teaches the random base the instruction format on
/// general, domain-free data before it is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// 0 keeps the purely random base.
    pub epochs: usize,
    pub rank: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            rank: 32,
            lr: 5e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Trains a full-grid adapter on `data`; fold it into the base with
/// [`BaseModel::merged`].
pub fn pretrain_base(
    model: &BaseModel,
    tokenizer: &Tokenizer,
    data: &[Instance],
    config: &PretrainConfig,
) -> Result<(LoraAdapter, Vec<LossReport>)> {
    if data.is_empty() {
        return Err(Error::degenerate("no pretraining data"));
    }
    let train = TrainConfig {
        lr: config.lr,
        batch_size: config.batch_size,
        rank: config.rank,
        seed: config.seed,
        projections: Projection::ALL.to_vec(),
        ..TrainConfig::default()
    };
    train.validate()?;
    let examples = encode_all(tokenizer, data)?;
    let mut adapter = init_adapter(
        config.rank,
        model.config().d_model,
        &model.injection_points(&Projection::ALL),
        mix(config.seed, 9, 0),
        AdapterRole::Pretraining,
    )?;
    let mut opt = AdamState::for_adapter(&adapter);
    let reports = finetune(model, &mut adapter, &[], &[], &examples, config.epochs, 0.0, config.lr, &train, mix(config.seed, 10, 0), &mut opt)?;
    Ok((adapter, reports))
}

#[derive(Serialize, Deserialize)]
struct RunHeader {
    format: String,
    version: u32,
    completed: usize,
    warmed: bool,
    step: u64,
    optimizer_t: u64,
}

#[derive(Serialize, Deserialize)]
struct ReplayRecord {
    #[serde(rename = "buffer")]
    domain: String,
    #[serde(flatten)]
    instance: Instance,
}

fn missing(path: &Path) -> Error {
    Error::format(format!("run state file {} is missing", path.display()))
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(missing(path))
    }
}

/// Writes the state into `dir`: `config.txt`, `state.json`, `order.json`,
/// `replay.jsonl`, `losses.csv`, `adapters/` and `optimizer/`.
pub fn save_run(state: &DomainSequenceState, config: &TrainConfig, dir: &Path) -> Result<()> {
    io::create_dir_all(&dir.join("adapters"))?;
    io::create_dir_all(&dir.join("optimizer"))?;
    io::write_text(&dir.join("config.txt"), &config.to_kv())?;
    io::write_json(
        &dir.join("state.json"),
        &RunHeader {
            format: RUN_FORMAT.into(),
            version: RUN_VERSION,
            completed: state.completed(),
            warmed: state.is_warmed(),
            step: state.step,
            optimizer_t: state.invariant_optimizer.t,
        },
    )?;
    io::write_json(&dir.join("order.json"), &state.order)?;

    let mut replay = String::new();
    for (domain, items) in state.replay.domains() {
        for inst in items {
            let rec = ReplayRecord {
                domain: domain.to_string(),
                instance: inst.clone(),
            };
            replay.push_str(&serde_json::to_string(&rec).map_err(|e| Error::format(e.to_string()))?);
            replay.push('\n');
        }
    }
    io::write_text(&dir.join("replay.jsonl"), &replay)?;

    let mut losses = String::from("domain,epoch,L_S,L_D,L_O,total\n");
    for (d, e, r) in &state.history {
        losses.push_str(&format!("{d},{e},{:?},{:?},{:?},{:?}\n", r.l_s, r.l_d, r.l_o, r.total));
    }
    io::write_text(&dir.join("losses.csv"), &losses)?;

    let adapters = dir.join("adapters");
    save_adapter(&state.invariant, &adapters.join("invariant.json"))?;
    for (i, v) in state.variants.iter().enumerate() {
        save_adapter(v, &adapters.join(format!("variant_{i}.json")))?;
    }
    for (i, w) in state.warmed.iter().enumerate() {
        save_adapter(w, &adapters.join(format!("warmed_{i}.json")))?;
    }
    let opt = &state.invariant_optimizer;
    let flat = |ms: &[Matrix]| ms.iter().flat_map(|m| m.data().to_vec()).collect::<Vec<f64>>();
    io::write_f64_values(&dir.join("optimizer/invariant.m.bin"), flat(&opt.m))?;
    io::write_f64_values(&dir.join("optimizer/invariant.v.bin"), flat(&opt.v))?;
    Ok(())
}

/// Reads a directory written by [`save_run`].
pub fn load_run(dir: &Path) -> Result<(DomainSequenceState, TrainConfig)> {
    let header_path = dir.join("state.json");
    require(&header_path)?;
    let header: RunHeader = io::read_json(&header_path)?;
    if header.format != RUN_FORMAT || header.version != RUN_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported run format {} v{}",
            header_path.display(),
            header.format,
            header.version
        )));
    }
    for f in ["config.txt", "order.json", "replay.jsonl", "losses.csv"] {
        require(&dir.join(f))?;
    }
    let config = TrainConfig::from_kv(&io::read_text(&dir.join("config.txt"))?)
        .map_err(|e| Error::format(format!("config.txt: {e}")))?;
    let order: Vec<String> = io::read_json(&dir.join("order.json"))?;
    if header.completed > order.len() {
        return Err(Error::format("state reports more completed domains than the order holds"));
    }

    let mut replay = ReplayBuffer::new();
    let replay_path = dir.join("replay.jsonl");
    for (k, line) in io::read_text(&replay_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReplayRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("{}:{}: {e}", replay_path.display(), k + 1)))?;
        match replay.domains.iter_mut().find(|(n, _)| *n == rec.domain) {
            Some((_, v)) => v.push(rec.instance),
            None => replay.domains.push((rec.domain, vec![rec.instance])),
        }
    }

    let mut history = Vec::new();
    let losses_path = dir.join("losses.csv");
    for (k, line) in io::read_text(&losses_path)?.lines().enumerate().skip(1) {
        let bad = || Error::format(format!("{}:{}: malformed row", losses_path.display(), k + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let d: usize = f[0].parse().map_err(|_| bad())?;
        let e: usize = f[1].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[2..].iter().map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        history.push((
            d,
            e,
            LossReport {
                l_s: v[0],
                l_d: v[1],
                l_o: v[2],
                total: v[3],
            },
        ));
    }

    let adapters = dir.join("adapters");
    let load = |name: String| -> Result<LoraAdapter> {
        let p = adapters.join(name);
        require(&p)?;
        load_adapter(&p)
    };
    let invariant = load("invariant.json".into())?;
    let variants = (0..header.completed)
        .map(|i| load(format!("variant_{i}.json")))
        .collect::<Result<Vec<_>>>()?;
    let warmed = if header.warmed {
        (0..order.len())
            .map(|i| load(format!("warmed_{i}.json")))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut opt = AdamState::for_adapter(&invariant);
    opt.t = header.optimizer_t;
    for (suffix, slots) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        let p = dir.join(format!("optimizer/invariant.{suffix}.bin"));
        require(&p)?;
        let values = io::read_f64_values(&p)?;
        let expected: usize = slots.iter().map(|m| m.len()).sum();
        if values.len() != expected {
            return Err(Error::format(format!(
                "{}: {} values, expected {expected}",
                p.display(),
                values.len()
            )));
        }
        let mut off = 0;
        for m in slots.iter_mut() {
            let len = m.len();
            m.data_mut().copy_from_slice(&values[off..off + len]);
            off += len;
        }
    }

    let state = DomainSequenceState {
        order,
        invariant,
        variants,
        warmed,
        replay,
        invariant_optimizer: opt,
        step: header.step,
        history,
    };
    Ok((state, config))
}

/// Domain names of `state` already trained, for reporting.
pub fn completed_domains(state: &DomainSequenceState) -> &[String] {
    &state.order[..state.completed()]
}

/// Groups instances by their domain label, preserving first-seen order.
pub fn group_by_domain(instances: &[Instance]) -> BTreeMap<String, Vec<Instance>> {
    let mut out: BTreeMap<String, Vec<Instance>> = BTreeMap::new();
    for i in instances {
        out.entry(i.domain.clone().unwrap_or_default()).or_default().push(i.clone());
    }
    out
}
