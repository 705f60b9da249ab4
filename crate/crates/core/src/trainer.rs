//! Two-phase training of gated adapters, plus the baselines.
//!
//! Warm-up (steps `1..=T`): every step takes one Adam step on all adapters
//! and one projected gradient step on the gates. At step `T` the gates are
//! frozen, adapters behind closed gates are disconnected and their optimizer
//! state dropped, and the batch size switches to `post_t_batch_size`. The
//! `+` variant additionally grows each survivor's rank so that the total
//! adapter size stays at `n * r (d + k)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    expand_rank, expansion_residual, AdapterConfig, ExpansionScheme, ScaleConvention,
};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::models::{attach_adapters, AdaptedModel, ToyModel};
use crate::optim::{linear_warmup_lr, Adam, Moments};
use crate::sparsifier::{random_select_rlora, GateRule, GateVector, ProjectionMode};
use crate::tasks::{loss_value, loss_var, sample_batch, Dataset, SyntheticTask};
use crate::tensor::Tensor;

/// Training methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "wlora")]
    WLora,
    #[serde(rename = "wlora+")]
    WLoraPlus,
    #[serde(rename = "rlora")]
    RLora,
    #[serde(rename = "full")]
    Full,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::WLora => "wlora",
            Method::WLoraPlus => "wlora+",
            Method::RLora => "rlora",
            Method::Full => "full",
        }
    }

    pub fn is_gated(self) -> bool {
        matches!(self, Method::WLora | Method::WLoraPlus | Method::RLora)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "wlora" => Ok(Method::WLora),
            "wlora+" => Ok(Method::WLoraPlus),
            "rlora" => Ok(Method::RLora),
            "full" => Ok(Method::Full),
            other => Err(Error::config(
                "method",
                format!("unknown method `{other}` (expected lora, wlora, wlora+, rlora or full)"),
            )),
        }
    }
}

/// How survivors' new rank is chosen at expansion time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum RankPolicy {
    /// `floor(n * r / K)`, keeping `K * r_new <= n * r`.
    #[default]
    ConstantMemory,
    /// A fixed target rank.
    Fixed(usize),
}

/// `floor(n * r / K)`.
pub fn constant_memory_rank(n: usize, r: usize, k: usize) -> usize {
    n * r / k
}

/// Update rule for the gate vector before each Top-K projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOptimizer {
    /// `omega - lr_omega * grad`.
    #[default]
    Sgd,
    /// `omega - lr_omega * adam_direction(grad)`.
    Adam,
}

impl FromStr for GateOptimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::config(
                "gate_optimizer",
                format!("unknown gate optimizer `{other}` (expected sgd or adam)"),
            )),
        }
    }
}

/// Hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Adapters kept after the warm-up.
    pub k: usize,
    /// Warm-up length; gates freeze at the end of step `t`.
    pub t: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub post_t_batch_size: usize,
    pub expansion: Option<ExpansionScheme>,
    pub rank_policy: RankPolicy,
    pub scale_convention: ScaleConvention,
    /// Fall back to the Gaussian scheme when QR finds a rank-deficient `A`.
    pub qr_fallback: bool,
    pub lr: f64,
    /// Gate step size.
    pub lr_omega: f64,
    /// Linear warm-up of the adapter learning rate.
    pub warmup_steps: usize,
    pub seed: u64,
    pub projection: ProjectionMode,
    pub gate_optimizer: GateOptimizer,
    pub gate_rule: GateRule,
    /// The first gate update happens at this step (0 means step 1); its
    /// gradient is the mean gate gradient over all steps before it.
    /// `None` means `3 t / 4`.
    pub gate_delay: Option<usize>,
    /// Adapter steps per gate step after the first; each gate step uses the
    /// mean gate gradient since the previous one.
    pub gate_interval: usize,
    /// Keep taking gradient steps on the open gates after the freeze.
    pub joint_gates_after_freeze: bool,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    /// Evaluate validation loss every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            k: 1,
            t: 200,
            total_steps: 500,
            batch_size: 32,
            post_t_batch_size: 32,
            expansion: None,
            rank_policy: RankPolicy::ConstantMemory,
            scale_convention: ScaleConvention::Rescale,
            qr_fallback: true,
            lr: 1e-2,
            lr_omega: 1.0,
            warmup_steps: 50,
            seed: 0,
            projection: ProjectionMode::EveryStep,
            gate_optimizer: GateOptimizer::Sgd,
            gate_rule: GateRule::NonZero,
            gate_delay: None,
            gate_interval: 1,
            joint_gates_after_freeze: false,
            grad_accum: 1,
            eval_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn gate_delay(&self) -> usize {
        self.gate_delay.unwrap_or(3 * self.t / 4)
    }

    /// Checks the schedule against `n` adapters.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "k must be ≥ 1"));
        }
        if n > 0 && self.k > n {
            return Err(Error::config("k", format!("k = {} exceeds {n} adapters", self.k)));
        }
        if self.t >= self.total_steps {
            return Err(Error::config(
                "t",
                format!("t = {} must be below total_steps = {}", self.t, self.total_steps),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "batch_size must be ≥ 1"));
        }
        if self.post_t_batch_size < self.batch_size {
            return Err(Error::config(
                "post_t_batch_size",
                "post_t_batch_size must be ≥ batch_size",
            ));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(
                "warmup_steps",
                "warmup_steps must not exceed total_steps",
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr", "lr must be finite and ≥ 0"));
        }
        if !(self.lr_omega.is_finite() && self.lr_omega >= 0.0) {
            return Err(Error::config("lr_omega", "lr_omega must be finite and ≥ 0"));
        }
        if self.gate_delay.is_some_and(|d| d > self.t) {
            return Err(Error::config(
                "gate_delay",
                format!("gate_delay must not exceed t = {}", self.t),
            ));
        }
        if self.gate_interval == 0 {
            return Err(Error::config("gate_interval", "gate_interval must be ≥ 1"));
        }
        if self.grad_accum == 0 {
            return Err(Error::config("grad_accum", "grad_accum must be ≥ 1"));
        }
        if let RankPolicy::Fixed(0) = self.rank_policy {
            return Err(Error::config("r_new", "fixed r_new must be ≥ 1"));
        }
        Ok(())
    }

    /// Batch size in effect at `step` (1-based).
    pub fn batch_size_at(&self, step: usize) -> usize {
        if step > self.t {
            self.post_t_batch_size
        } else {
            self.batch_size
        }
    }
}

/// Optimizer parameter keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    A(usize),
    B(usize),
    Weight(usize),
}

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub omega_l0: usize,
    pub trainable_params: usize,
    pub batch_size: usize,
    /// Adapters that received a gradient this step.
    pub adapters_with_grad: usize,
    /// Nonzero gate indices (all adapters when ungated).
    pub omega_support: Vec<usize>,
    pub val_loss: Option<f64>,
}

/// Expansion at the phase boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub scheme: ExpansionScheme,
    pub scale_convention: ScaleConvention,
    pub r_before: usize,
    pub r_new: usize,
    /// `(adapter index, ||A~B~ - AB||_F / max(1, ||AB||_F))`.
    pub residuals: Vec<(usize, f64)>,
    pub max_residual: f64,
    /// Adapters that fell back to the Gaussian scheme.
    pub fallbacks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub n_adapters: usize,
    pub steps: Vec<StepRecord>,
    pub initial_val_loss: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_omega: Option<Vec<f64>>,
    pub active_set: Option<Vec<usize>>,
    pub params_before_t: usize,
    pub params_after_t: usize,
    pub expansion: Option<ExpansionRecord>,
}

impl RunReport {
    /// Per-step CSV: `step,loss,lr,omega_l0,trainable_params,batch_size,adapters_with_grad,omega_support,val_loss`.
    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "loss",
            "lr",
            "omega_l0",
            "trainable_params",
            "batch_size",
            "adapters_with_grad",
            "omega_support",
            "val_loss",
        ])?;
        for s in &self.steps {
            let support = s
                .omega_support
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                s.step.to_string(),
                s.loss.to_string(),
                s.lr.to_string(),
                s.omega_l0.to_string(),
                s.trainable_params.to_string(),
                s.batch_size.to_string(),
                s.adapters_with_grad.to_string(),
                support,
                s.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trained model plus its report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: AdaptedModel,
}

/// Train/validation data for a run.
pub trait FineTuneData {
    fn train(&self) -> &Dataset;
    fn val(&self) -> &Dataset;
}

impl FineTuneData for SyntheticTask {
    fn train(&self) -> &Dataset {
        &self.train
    }
    fn val(&self) -> &Dataset {
        &self.val
    }
}

/// A plain train/val pair.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub val: Dataset,
}

impl FineTuneData for DataSplit {
    fn train(&self) -> &Dataset {
        &self.train
    }
    fn val(&self) -> &Dataset {
        &self.val
    }
}

/// Independent RNG streams derived from one seed.
struct Streams {
    data: ChaCha8Rng,
    dropout: ChaCha8Rng,
    expand: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// RNG used for adapter initialization by [`prepare`].
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 1)
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            data: stream(seed, 2),
            dropout: stream(seed, 3),
            expand: stream(seed, 4),
        }
    }
}

/// Validation loss in evaluation mode (no dropout).
pub fn evaluate(model: &AdaptedModel, data: &Dataset) -> Result<f64> {
    let (x, y) = data.all();
    loss_value(&model.predict(&x)?, &y)
}

/// Attaches adapters to every slot as `method` requires (gated for the
/// gated methods) using the seed's init stream.
pub fn prepare(
    model: &ToyModel,
    slots: &[usize],
    adapter: &AdapterConfig,
    method: Method,
    schedule: &TrainSchedule,
) -> Result<AdaptedModel> {
    let slots: &[usize] = if method == Method::Full { &[] } else { slots };
    attach_adapters(model, slots, adapter, method.is_gated(), &mut init_rng(schedule.seed))
}

/// Which optimizer parameters one step updates.
struct StepGrads {
    loss: f64,
    adapter: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    omega: Vec<f64>,
    weights: Vec<(usize, Vec<f64>)>,
}

fn compute_grads(
    model: &AdaptedModel,
    batch: &(Tensor, crate::tasks::Targets),
    track: &[usize],
    dropout: &mut ChaCha8Rng,
) -> Result<StepGrads> {
    let tape = Tape::new();
    let x = tape.constant(batch.0.clone());
    let mut binding = model.bind(&tape);
    let out = model.forward(&tape, &x, &mut binding, track, Some(dropout))?;
    let loss = loss_var(&out, &batch.1)?;
    let value = loss.item();
    let grads = tape.backward(&loss)?;
    let adapter = binding
        .adapters
        .iter()
        .map(|b| {
            b.as_ref().map(|b| {
                let ga = grads.get(&b.a).map_or_else(|| vec![0.0; b.a.value().len()], <[f64]>::to_vec);
                let gb = grads.get(&b.b).map_or_else(|| vec![0.0; b.b.value().len()], <[f64]>::to_vec);
                (ga, gb)
            })
        })
        .collect();
    let omega = binding
        .omega
        .iter()
        .map(|w| grads.get(w).map_or(0.0, |g| g[0]))
        .collect();
    let weights = binding
        .tracked_weights
        .iter()
        .map(|(layer, v)| (*layer, grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();
    Ok(StepGrads {
        loss: value,
        adapter,
        omega,
        weights,
    })
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += s * b);
}

/// Averages gradients over `grad_accum` micro-batches.
fn accumulate(
    model: &AdaptedModel,
    data: &Dataset,
    schedule: &TrainSchedule,
    step: usize,
    track: &[usize],
    streams: &mut Streams,
) -> Result<StepGrads> {
    let bs = schedule.batch_size_at(step);
    let micro = schedule.grad_accum;
    let w = 1.0 / micro as f64;
    let mut total: Option<StepGrads> = None;
    for _ in 0..micro {
        let idx = sample_batch(data.len(), bs, &mut streams.data);
        let batch = data.batch(&idx)?;
        let g = compute_grads(model, &batch, track, &mut streams.dropout)?;
        if micro == 1 {
            return Ok(g);
        }
        match &mut total {
            None => {
                let mut g = g;
                g.loss *= w;
                g.omega.iter_mut().for_each(|v| *v *= w);
                for (ga, gb) in g.adapter.iter_mut().flatten() {
                    ga.iter_mut().for_each(|v| *v *= w);
                    gb.iter_mut().for_each(|v| *v *= w);
                }
                for (_, gw) in &mut g.weights {
                    gw.iter_mut().for_each(|v| *v *= w);
                }
                total = Some(g);
            }
            Some(t) => {
                t.loss += w * g.loss;
                add_scaled(&mut t.omega, &g.omega, w);
                for (acc, new) in t.adapter.iter_mut().zip(&g.adapter) {
                    if let (Some((aa, ab)), Some((na, nb))) = (acc.as_mut(), new.as_ref()) {
                        add_scaled(aa, na, w);
                        add_scaled(ab, nb, w);
                    }
                }
                for ((_, acc), (_, new)) in t.weights.iter_mut().zip(&g.weights) {
                    add_scaled(acc, new, w);
                }
            }
        }
    }
    Ok(total.expect("grad_accum >= 1"))
}

fn support_of(model: &AdaptedModel) -> Vec<usize> {
    match model.gates() {
        Some(g) => g.support(),
        None => (0..model.adapters().len()).collect(),
    }
}

/// Moves Adam state of a Gaussian-expanded adapter into the larger shape:
/// old entries kept, new columns of `A` and new rows of `B` start at zero.
fn remap_gaussian_moments(
    opt: &mut Adam<ParamKey>,
    idx: usize,
    d: usize,
    r_old: usize,
    r_new: usize,
) {
    if let Some(old) = opt.discard(&ParamKey::A(idx)) {
        let mut m = Moments::zeros(d * r_new);
        m.t = old.t;
        for i in 0..d {
            m.m[i * r_new..i * r_new + r_old].copy_from_slice(&old.m[i * r_old..(i + 1) * r_old]);
            m.v[i * r_new..i * r_new + r_old].copy_from_slice(&old.v[i * r_old..(i + 1) * r_old]);
        }
        opt.insert(ParamKey::A(idx), m);
    }
    if let Some(mut old) = opt.discard(&ParamKey::B(idx)) {
        let k = old.m.len() / r_old;
        old.m.resize(r_new * k, 0.0);
        old.v.resize(r_new * k, 0.0);
        opt.insert(ParamKey::B(idx), old);
    }
}

/// Rank survivors are grown to.
fn target_rank(model: &AdaptedModel, schedule: &TrainSchedule, survivors: &[usize]) -> usize {
    let n = model.adapters().len();
    let r = model.adapters()[survivors[0]].rank();
    match schedule.rank_policy {
        RankPolicy::ConstantMemory => constant_memory_rank(n, r, survivors.len().max(1)),
        RankPolicy::Fixed(v) => v,
    }
}

fn expand_survivors(
    model: &mut AdaptedModel,
    schedule: &TrainSchedule,
    scheme: ExpansionScheme,
    survivors: &[usize],
    opt: &mut Adam<ParamKey>,
    rng: &mut ChaCha8Rng,
) -> Result<ExpansionRecord> {
    let r_before = model.adapters()[survivors[0]].rank();
    let wanted = target_rank(model, schedule, survivors);
    let mut residuals = Vec::new();
    let mut fallbacks = Vec::new();
    let mut r_new_seen = r_before;
    for &i in survivors {
        let old = model.adapters()[i].clone();
        let cap = old.d().min(old.k());
        let r_new = wanted.min(cap);
        if r_new <= old.rank() {
            residuals.push((i, 0.0));
            continue;
        }
        // new columns use the same spread as the existing ones
        let std = column_std(old.a());
        let expanded = match expand_rank(&old, r_new, scheme, std, schedule.scale_convention, rng) {
            Ok(e) => e,
            Err(Error::Degenerate(msg)) if scheme == ExpansionScheme::Qr => {
                if !schedule.qr_fallback {
                    return Err(Error::Degenerate(msg));
                }
                fallbacks.push(i);
                expand_rank(
                    &old,
                    r_new,
                    ExpansionScheme::Gaussian,
                    std,
                    schedule.scale_convention,
                    rng,
                )?
            }
            Err(e) => return Err(e),
        };
        residuals.push((i, expansion_residual(&old, &expanded)));
        let used_gaussian = scheme == ExpansionScheme::Gaussian || fallbacks.contains(&i);
        if used_gaussian {
            remap_gaussian_moments(opt, i, old.d(), old.rank(), r_new);
        } else {
            // QR rewrites the old block, so its moments no longer apply.
            opt.discard(&ParamKey::A(i));
            opt.discard(&ParamKey::B(i));
        }
        r_new_seen = r_new_seen.max(r_new);
        model.adapters_mut()[i] = expanded;
    }
    let max_residual = residuals.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(ExpansionRecord {
        scheme,
        scale_convention: schedule.scale_convention,
        r_before,
        r_new: r_new_seen,
        residuals,
        max_residual,
        fallbacks,
    })
}

fn column_std(a: &Tensor) -> f64 {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0 / (a.rows() as f64).sqrt()
    }
}

/// Core loop shared by every adapter method.
fn train_adapters(
    mut model: AdaptedModel,
    data: &dyn FineTuneData,
    schedule: &TrainSchedule,
    method: Method,
) -> Result<RunOutcome> {
    let n = model.adapters().len();
    schedule.validate(n)?;
    if n == 0 {
        return Err(Error::contract("no adapters attached"));
    }
    let mut streams = Streams::new(schedule.seed);
    let mut opt: Adam<ParamKey> = Adam::new();
    let mut gate_opt: Adam<()> = Adam::new();
    let mut omega_acc = vec![0.0; n];
    let mut omega_acc_steps = 0usize;
    let initial_val_loss = evaluate(&model, data.val())?;
    let params_before_t = model.trainable_params();
    let mut params_after_t = params_before_t;
    let mut expansion = None;
    let mut steps = Vec::with_capacity(schedule.total_steps);
    let lr_omega = schedule.lr_omega;
    let gate_delay = schedule.gate_delay();

    for step in 1..=schedule.total_steps {
        let lr = linear_warmup_lr(step, schedule.warmup_steps, schedule.total_steps, schedule.lr)?;
        let grads = accumulate(&model, data.train(), schedule, step, &[], &mut streams)?;
        if !grads.loss.is_finite() {
            return Err(Error::Degenerate(format!("loss diverged at step {step}")));
        }
        let adapters_with_grad = grads.adapter.iter().filter(|g| g.is_some()).count();

        for (i, g) in grads.adapter.iter().enumerate() {
            if let Some((ga, gb)) = g {
                let ad = &mut model.adapters_mut()[i];
                opt.step(ParamKey::A(i), ad.a_mut().data_mut(), ga, lr)?;
                opt.step(ParamKey::B(i), ad.b_mut().data_mut(), gb, lr)?;
            }
        }

        if let Some(gates) = model.gates_mut() {
            let frozen = gates.is_frozen();
            let due = if frozen {
                schedule.joint_gates_after_freeze && method != Method::RLora
            } else {
                let first = gate_delay.max(1);
                step >= first && (step - first).is_multiple_of(schedule.gate_interval)
            };
            add_scaled(&mut omega_acc, &grads.omega, 1.0);
            omega_acc_steps += 1;
            if due {
                let mean: Vec<f64> = omega_acc
                    .iter()
                    .map(|g| g / omega_acc_steps as f64)
                    .collect();
                omega_acc.iter_mut().for_each(|g| *g = 0.0);
                omega_acc_steps = 0;
                let dir = match schedule.gate_optimizer {
                    GateOptimizer::Sgd => mean,
                    GateOptimizer::Adam => gate_opt.direction((), &mean)?,
                };
                if frozen {
                    gates.step_frozen_support(&dir, lr_omega)?;
                } else {
                    gates.step(&dir, lr_omega, schedule.projection)?;
                }
            }
        }

        if step == schedule.t && matches!(method, Method::WLora | Method::WLoraPlus) {
            let (adapters, gates) = model.parts_mut();
            let gates = gates.expect("gated method has gates");
            let active = crate::sparsifier::freeze_and_disconnect(gates, adapters)?;
            if active.is_empty() {
                return Err(Error::Degenerate(format!(
                    "all gates are zero at step {step}; no adapter selected"
                )));
            }
            for i in 0..n {
                if !model.adapters()[i].active {
                    opt.discard(&ParamKey::A(i));
                    opt.discard(&ParamKey::B(i));
                }
            }
            if method == Method::WLoraPlus {
                let scheme = schedule
                    .expansion
                    .ok_or_else(|| Error::config("expansion", "wlora+ needs an expansion scheme"))?;
                expansion = Some(expand_survivors(
                    &mut model,
                    schedule,
                    scheme,
                    &active,
                    &mut opt,
                    &mut streams.expand,
                )?);
            }
            params_after_t = model.trainable_params();
        }

        let val_loss = (schedule.eval_every > 0 && step % schedule.eval_every == 0)
            .then(|| evaluate(&model, data.val()))
            .transpose()?;
        let support = support_of(&model);
        steps.push(StepRecord {
            step,
            loss: grads.loss,
            lr,
            omega_l0: support.len(),
            trainable_params: model.trainable_params(),
            batch_size: schedule.batch_size_at(step),
            adapters_with_grad,
            omega_support: support,
            val_loss,
        });
    }

    let final_train_loss = evaluate(&model, data.train())?;
    let final_val_loss = evaluate(&model, data.val())?;
    let report = RunReport {
        method,
        seed: schedule.seed,
        n_adapters: n,
        steps,
        initial_val_loss,
        final_train_loss,
        final_val_loss,
        final_omega: model.gates().map(|g| g.values().to_vec()),
        active_set: model
            .gates()
            .and_then(|g| g.active_set().map(<[usize]>::to_vec)),
        params_before_t,
        params_after_t,
        expansion,
    };
    Ok(RunOutcome { report, model })
}

fn require_gates(model: &mut AdaptedModel, schedule: &TrainSchedule) -> Result<()> {
    let n = model.adapters().len();
    match model.gates() {
        None => Err(Error::contract("gated adapters must be attached")),
        Some(g) if g.is_frozen() => Err(Error::state("gate vector already frozen")),
        Some(g) => {
            let values = g.values().to_vec();
            schedule.validate(n)?;
            if schedule.t == 0 {
                return Err(Error::config("t", "t must be ≥ 1 for gated training"));
            }
            let gates = GateVector::from_values(values, schedule.k)?.with_rule(schedule.gate_rule);
            model.set_gates(Some(gates))
        }
    }
}

/// Gated training with Top-K gate projection and disconnection at step `T`.
pub fn run_weightlora(
    mut model: AdaptedModel,
    data: &dyn FineTuneData,
    schedule: &TrainSchedule,
) -> Result<RunOutcome> {
    require_gates(&mut model, schedule)?;
    train_adapters(model, data, schedule, Method::WLora)
}

/// [`run_weightlora`] followed by rank expansion of the survivors at step `T`.
pub fn run_weightlora_plus(
    mut model: AdaptedModel,
    data: &dyn FineTuneData,
    schedule: &TrainSchedule,
) -> Result<RunOutcome> {
    if schedule.expansion.is_none() {
        return Err(Error::config("expansion", "wlora+ needs expansion gaussian or qr"));
    }
    require_gates(&mut model, schedule)?;
    train_adapters(model, data, schedule, Method::WLoraPlus)
}

/// Baselines: plain LoRA on every slot, random `K`-subset, or full
/// fine-tuning of the base weights.
pub fn run_baseline(
    mut model: AdaptedModel,
    data: &dyn FineTuneData,
    schedule: &TrainSchedule,
    method: Method,
) -> Result<RunOutcome> {
    match method {
        Method::Lora => {
            model.set_gates(None)?;
            train_adapters(model, data, schedule, Method::Lora)
        }
        Method::RLora => {
            let n = model.adapters().len();
            schedule.validate(n)?;
            let gates = random_select_rlora(n, schedule.k, schedule.seed)?;
            let (adapters, _) = model.parts_mut();
            for (i, ad) in adapters.iter_mut().enumerate() {
                ad.active = gates.is_open(i);
            }
            model.set_gates(Some(gates))?;
            train_adapters(model, data, schedule, Method::RLora)
        }
        Method::Full => run_full(model.base(), data, schedule),
        other => Err(Error::contract(format!("{other} is not a baseline"))),
    }
}

/// Dispatches on `method` after attaching adapters to `slots`.
pub fn run_method(
    method: Method,
    model: &ToyModel,
    slots: &[usize],
    adapter: &AdapterConfig,
    data: &dyn FineTuneData,
    schedule: &TrainSchedule,
) -> Result<RunOutcome> {
    let adapted = prepare(model, slots, adapter, method, schedule)?;
    match method {
        Method::WLora => run_weightlora(adapted, data, schedule),
        Method::WLoraPlus => run_weightlora_plus(adapted, data, schedule),
        _ => run_baseline(adapted, data, schedule, method),
    }
}

/// Trains every base weight of a copy of `base` with Adam.
fn run_full(base: &ToyModel, data: &dyn FineTuneData, schedule: &TrainSchedule) -> Result<RunOutcome> {
    schedule.validate(0)?;
    let mut streams = Streams::new(schedule.seed);
    let mut opt: Adam<ParamKey> = Adam::new();
    let layers: Vec<usize> = (0..base.n_layers()).collect();
    let mut current = attach_adapters(base, &[], &AdapterConfig::new(1), false, &mut init_rng(schedule.seed))?;
    let initial_val_loss = evaluate(&current, data.val())?;
    let total: usize = base.layers().iter().map(|l| l.base.weight().len()).sum();
    let mut steps = Vec::with_capacity(schedule.total_steps);
    for step in 1..=schedule.total_steps {
        let lr = linear_warmup_lr(step, schedule.warmup_steps, schedule.total_steps, schedule.lr)?;
        let grads = accumulate(&current, data.train(), schedule, step, &layers, &mut streams)?;
        if !grads.loss.is_finite() {
            return Err(Error::Degenerate(format!("loss diverged at step {step}")));
        }
        let mut weights: Vec<Tensor> = current
            .base()
            .layers()
            .iter()
            .map(|l| l.base.weight().detach())
            .collect();
        for (layer, g) in &grads.weights {
            opt.step(ParamKey::Weight(*layer), weights[*layer].data_mut(), g, lr)?;
        }
        let next = current.base().with_weights(weights)?;
        current = attach_adapters(&next, &[], &AdapterConfig::new(1), false, &mut init_rng(schedule.seed))?;
        let val_loss = (schedule.eval_every > 0 && step % schedule.eval_every == 0)
            .then(|| evaluate(&current, data.val()))
            .transpose()?;
        steps.push(StepRecord {
            step,
            loss: grads.loss,
            lr,
            omega_l0: 0,
            trainable_params: total,
            batch_size: schedule.batch_size_at(step),
            adapters_with_grad: 0,
            omega_support: Vec::new(),
            val_loss,
        });
    }
    let report = RunReport {
        method: Method::Full,
        seed: schedule.seed,
        n_adapters: 0,
        steps,
        initial_val_loss,
        final_train_loss: evaluate(&current, data.train())?,
        final_val_loss: evaluate(&current, data.val())?,
        final_omega: None,
        active_set: None,
        params_before_t: total,
        params_after_t: total,
        expansion: None,
    };
    Ok(RunOutcome {
        report,
        model: current,
    })
}
