//! Importance probe, exact parameter accounting and an analytic memory model.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{adapter_param_count, lora_param_count, AdapterConfig};
use crate::autograd::Tape;
use crate::catalog::ModelShapes;
use crate::error::{Error, Result};
use crate::models::{attach_adapters, AdaptedModel, ToyModel};
use crate::tasks::{loss_var, Dataset};
use crate::tensor::Tensor;
use crate::trainer::{init_rng, run_baseline, FineTuneData, Method, TrainSchedule};

/// `sum_ij a_ij * b_ij`.
pub fn frobenius_inner(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("frobenius_inner", a.shape(), b.shape()));
    }
    a.dot(b)
}

/// Where the probe gradient is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPoint {
    /// At the frozen base weights, so the score is the first-order loss
    /// change the trained adapter predicts.
    #[default]
    Pretrained,
    /// At the adapted weights `W + delta`.
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Passes over the training set per single-adapter run.
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub gradient_point: GradientPoint,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            seeds: vec![0, 1, 2],
            batch_size: 32,
            lr: 1e-2,
            rank: 2,
            alpha: 4.0,
            dropout: crate::adapters::DEFAULT_DROPOUT,
            gradient_point: GradientPoint::Pretrained,
        }
    }
}

impl ProbeConfig {
    fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            alpha: self.alpha,
            dropout_p: self.dropout,
            ..AdapterConfig::new(self.rank)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotScore {
    pub slot_id: usize,
    pub layer: usize,
    pub projection_type: String,
    /// Mean over seeds of `|<grad_W f, delta W>|`.
    pub score: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub config: ProbeConfig,
    /// The loss is the per-example mean over the full training set.
    pub loss_convention: String,
    pub scores: Vec<SlotScore>,
}

impl ImportanceProfile {
    /// Positions (slot ids) of the `k` largest scores, ties to the lower id,
    /// returned in ascending order.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].score.total_cmp(&self.scores[a].score).then(a.cmp(&b)));
        let mut out: Vec<usize> = idx.into_iter().take(k).map(|i| self.scores[i].slot_id).collect();
        out.sort_unstable();
        out
    }

    /// `slot_id,layer,projection_type,score`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slot_id", "layer", "projection_type", "score"])?;
        for s in &self.scores {
            w.write_record([
                s.slot_id.to_string(),
                s.layer.to_string(),
                s.projection_type.clone(),
                s.score.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Full-dataset gradient of the mean loss w.r.t. the base weight of `layer`.
pub fn weight_gradient(model: &AdaptedModel, data: &Dataset, layer: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let (x, y) = data.all();
    let x = tape.constant(x);
    let mut binding = model.bind(&tape);
    let out = model.forward(&tape, &x, &mut binding, &[layer], None::<&mut ChaCha8Rng>)?;
    let loss = loss_var(&out, &y)?;
    let grads = tape.backward(&loss)?;
    let (_, w) = binding
        .tracked_weights
        .first()
        .ok_or_else(|| Error::contract(format!("layer {layer} is not in the model")))?;
    Ok(grads
        .tensor(w)
        .unwrap_or_else(|| Tensor::zeros(&w.shape())))
}

/// For each slot: train a lone adapter there for `epochs`, then score it by
/// `|<grad_W f, delta W>|`, averaged over seeds. Sub-runs are independent.
pub fn importance_probe(
    model: &ToyModel,
    data: &dyn FineTuneData,
    slots: &[usize],
    cfg: &ProbeConfig,
) -> Result<ImportanceProfile> {
    if slots.is_empty() {
        return Err(Error::contract("importance probe needs at least one slot"));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds", "probe needs at least one seed"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "batch_size must be ≥ 1"));
    }
    let adapter = cfg.adapter();
    adapter.validate()?;
    let n_train = data.train().len();
    let steps_per_epoch = n_train.div_ceil(cfg.batch_size);
    let bare = attach_adapters(model, &[], &adapter, false, &mut init_rng(0))?;

    let mut scores = Vec::with_capacity(slots.len());
    for (slot_id, &layer) in slots.iter().enumerate() {
        let base_grad = match cfg.gradient_point {
            GradientPoint::Pretrained => Some(weight_gradient(&bare, data.train(), layer)?),
            GradientPoint::Adapted => None,
        };
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let run_seed = seed.wrapping_mul(1_000_003).wrapping_add(layer as u64);
            let mut adapted = attach_adapters(model, &[layer], &adapter, false, &mut init_rng(run_seed))?;
            if cfg.epochs > 0 {
                let total = cfg.epochs * steps_per_epoch;
                let schedule = TrainSchedule {
                    k: 1,
                    t: 0,
                    total_steps: total,
                    batch_size: cfg.batch_size,
                    post_t_batch_size: cfg.batch_size,
                    lr: cfg.lr,
                    warmup_steps: 0,
                    seed: run_seed,
                    ..TrainSchedule::default()
                };
                adapted = run_baseline(adapted, data, &schedule, Method::Lora)?.model;
            }
            let delta = adapted.adapters()[0].delta();
            let grad = match &base_grad {
                Some(g) => g.clone(),
                None => weight_gradient(&adapted, data.train(), layer)?,
            };
            per_seed.push(frobenius_inner(&grad, &delta)?.abs());
        }
        let score = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        scores.push(SlotScore {
            slot_id,
            layer,
            projection_type: model.layers()[layer].name.clone(),
            score,
            per_seed,
        });
    }
    Ok(ImportanceProfile {
        config: cfg.clone(),
        loss_convention: "mean".to_string(),
        scores,
    })
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Percent with the rounding used in published tables: two decimals, or
/// one significant figure when that would print as zero.
pub fn table_percent(count: u64, total: u64) -> String {
    let p = 100.0 * count as f64 / total as f64;
    if p == 0.0 || p >= 0.01 {
        format!("{p:.2}")
    } else {
        let decimals = (-p.log10().floor()) as usize;
        format!("{p:.decimals$}")
    }
}

fn two_significant(p: f64) -> f64 {
    if p == 0.0 {
        return 0.0;
    }
    let mag = 10f64.powi(p.abs().log10().floor() as i32 - 1);
    (p / mag).round() * mag
}

/// Trainable-parameter count with its share of a reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub count: u64,
    pub total_params: Option<u64>,
    /// Reduced fraction `numerator / denominator` equal to the percentage.
    pub percent_exact: Option<(u64, u64)>,
    pub percent: Option<f64>,
    pub percent_display: Option<String>,
    /// The display value differs from the two-significant-figure value.
    pub display_rounded: bool,
}

impl ParamCount {
    pub fn new(count: u64, total_params: Option<u64>) -> Self {
        let Some(total) = total_params.filter(|&t| t > 0) else {
            return Self {
                count,
                total_params,
                percent_exact: None,
                percent: None,
                percent_display: None,
                display_rounded: false,
            };
        };
        let num = count as u128 * 100;
        let g = gcd(num as u64, total) as u128;
        let exact = ((num / g) as u64, (total as u128 / g) as u64);
        let p = 100.0 * count as f64 / total as f64;
        let display = table_percent(count, total);
        let shown: f64 = display.parse().expect("formatted number");
        let two = two_significant(p);
        Self {
            count,
            total_params,
            percent_exact: Some(exact),
            percent: Some(p),
            display_rounded: (shown - two).abs() > 1e-12 * two.abs().max(1e-300),
            percent_display: Some(display),
        }
    }

    /// `"442368 (0.24%)"`, or the bare count without a reference total.
    pub fn display(&self) -> String {
        match &self.percent_display {
            Some(p) => format!("{} ({p}%)", self.count),
            None => self.count.to_string(),
        }
    }
}

/// Sum of `r (d + k)` over the model's connected adapters.
pub fn count_trainable(model: &AdaptedModel, reference: Option<&ModelShapes>) -> ParamCount {
    let count: u64 = model
        .adapters()
        .iter()
        .enumerate()
        .filter(|(i, _)| model.is_connected(*i))
        .map(|(_, a)| adapter_param_count(a) as u64)
        .sum();
    ParamCount::new(count, reference.map(|m| m.total_params))
}

/// Adapter parameters for `active` slots (all when `None`) of a catalog
/// grouping, each with rank `r`.
pub fn count_catalog(
    shapes: &ModelShapes,
    grouping: &str,
    r: usize,
    active: Option<&[usize]>,
) -> Result<ParamCount> {
    if r == 0 {
        return Err(Error::config("rank", "rank must be ≥ 1"));
    }
    let slots = shapes.slots(grouping)?;
    let chosen: Vec<usize> = match active {
        Some(ids) => {
            let mut seen = vec![false; slots.len()];
            for &i in ids {
                if i >= slots.len() {
                    return Err(Error::config(
                        "slots",
                        format!("slot {i} out of range for {} slots", slots.len()),
                    ));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::config("slots", format!("slot {i} listed twice")));
                }
            }
            ids.to_vec()
        }
        None => (0..slots.len()).collect(),
    };
    let count = chosen
        .iter()
        .map(|&i| lora_param_count(slots[i].d, slots[i].k, r) as u64)
        .sum();
    Ok(ParamCount::new(count, Some(shapes.total_params)))
}

/// Analytic training-memory model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryModel {
    pub bytes_per_param: f64,
    /// Extra per-parameter buffers kept by the optimizer (Adam: 2).
    pub optimizer_multiplier: f64,
    /// Activations stored per connected adapter.
    pub activation_bytes_per_adapter: f64,
    /// Everything independent of the adapters.
    pub base_bytes: f64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        Self {
            bytes_per_param: 4.0,
            optimizer_multiplier: 2.0,
            // batch 32, sequence 128, width 768, fp32 input kept for backward
            activation_bytes_per_adapter: 32.0 * 128.0 * 768.0 * 4.0,
            base_bytes: 0.0,
        }
    }
}

impl MemoryModel {
    /// Base cost of holding `total_params` frozen weights.
    pub fn for_model(total_params: u64) -> Self {
        Self {
            base_bytes: total_params as f64 * 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("bytes_per_param", self.bytes_per_param, true),
            ("optimizer_multiplier", self.optimizer_multiplier, false),
            ("activation_bytes_per_adapter", self.activation_bytes_per_adapter, false),
            ("base_bytes", self.base_bytes, false),
        ];
        for (key, v, strict) in fields {
            if !v.is_finite() || v < 0.0 || (strict && v == 0.0) {
                return Err(Error::config(key, format!("{key} must be finite and {}", if strict { "> 0" } else { "≥ 0" })));
            }
        }
        Ok(())
    }
}

/// `base + sum over the first n_active slots of r (d + k) * bytes * (1 + opt)
/// + n_active * activation`.
pub fn estimate_memory(
    slot_dims: &[(usize, usize)],
    n_active: usize,
    r: usize,
    mm: &MemoryModel,
) -> Result<f64> {
    mm.validate()?;
    if n_active > slot_dims.len() {
        return Err(Error::contract(format!(
            "n_active {n_active} exceeds {} slots",
            slot_dims.len()
        )));
    }
    let params: usize = slot_dims[..n_active]
        .iter()
        .map(|&(d, k)| lora_param_count(d, k, r))
        .sum();
    Ok(mm.base_bytes
        + params as f64 * mm.bytes_per_param * (1.0 + mm.optimizer_multiplier)
        + n_active as f64 * mm.activation_bytes_per_adapter)
}

/// `(n_active, bytes)` for `n_active = 0..=len`.
pub fn memory_curve(slot_dims: &[(usize, usize)], r: usize, mm: &MemoryModel) -> Result<Vec<(usize, f64)>> {
    (0..=slot_dims.len())
        .map(|n| Ok((n, estimate_memory(slot_dims, n, r, mm)?)))
        .collect()
}

/// Largest `n_active` whose estimate fits in `budget` bytes.
pub fn max_active_within(slot_dims: &[(usize, usize)], r: usize, mm: &MemoryModel, budget: f64) -> Result<Option<usize>> {
    let curve = memory_curve(slot_dims, r, mm)?;
    Ok(curve.iter().rev().find(|(_, b)| *b <= budget).map(|(n, _)| *n))
}

/// Memory curve as `n_active,bytes` CSV.
pub fn write_memory_csv<W: Write>(curve: &[(usize, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_active", "bytes"])?;
    for (n, b) in curve {
        w.write_record([n.to_string(), format!("{b:.0}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ShapeCatalog;
    use crate::tasks::{make_planted_task, PlantedSpec};

    fn deberta() -> ModelShapes {
        ShapeCatalog::builtin().model("deberta-v3-base").unwrap().clone()
    }

    #[test]
    fn table_counts() {
        let m = deberta();
        let all = count_catalog(&m, "self_attention", 8, None).unwrap();
        assert_eq!(all.count, 442_368);
        assert_eq!(all.display(), "442368 (0.24%)");
        assert!(!all.display_rounded);
        let cases = [(1, 12_288, "12288 (0.007%)"), (5, 61_440, "61440 (0.03%)"), (10, 122_880, "122880 (0.07%)")];
        for (k, count, shown) in cases {
            let ids: Vec<usize> = (0..k).collect();
            let c = count_catalog(&m, "self_attention", 8, Some(&ids)).unwrap();
            assert_eq!(c.count, count);
            assert_eq!(c.display(), shown);
            assert!(c.display_rounded, "{k}");
        }
    }

    #[test]
    fn exact_fraction() {
        let c = ParamCount::new(122_880, Some(184_000_000));
        let (n, d) = c.percent_exact.unwrap();
        assert_eq!(n as f64 / d as f64, 100.0 * 122_880.0 / 184_000_000.0);
        assert_eq!(gcd(n, d), 1);
    }

    #[test]
    fn bad_slot_lists() {
        let m = deberta();
        assert!(count_catalog(&m, "self_attention", 8, Some(&[36])).is_err());
        assert!(count_catalog(&m, "self_attention", 8, Some(&[1, 1])).is_err());
        assert!(count_catalog(&m, "self_attention", 0, None).is_err());
    }

    #[test]
    fn memory_basics() {
        let dims = vec![(768, 768); 36];
        let mm = MemoryModel::for_model(184_000_000);
        assert_eq!(estimate_memory(&dims, 0, 8, &mm).unwrap(), mm.base_bytes);
        let one = estimate_memory(&dims, 1, 8, &mm).unwrap() - mm.base_bytes;
        let two = estimate_memory(&dims, 2, 8, &mm).unwrap() - mm.base_bytes;
        assert!((two - 2.0 * one).abs() < 1e-6);
        assert!(estimate_memory(&dims, 37, 8, &mm).is_err());
        let curve = memory_curve(&dims, 1, &mm).unwrap();
        assert!(curve.windows(2).all(|w| w[1].1 > w[0].1));
        let budget = curve[20].1;
        assert_eq!(max_active_within(&dims, 1, &mm, budget).unwrap(), Some(20));
    }

    #[test]
    fn inner_product_matches_double_loop() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let mut want = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                want += a.at(i, j) * b.at(i, j);
            }
        }
        assert!((frobenius_inner(&a, &b).unwrap() - want).abs() <= 1e-12);
        assert!(frobenius_inner(&a, &Tensor::zeros(&[5, 7])).is_err());
    }

    #[test]
    fn zero_epoch_probe_is_all_zero() {
        let mut spec = PlantedSpec::new(3, vec![1], 1, 0);
        spec.width = 6;
        spec.n_train = 32;
        spec.n_val = 16;
        let task = make_planted_task(&spec).unwrap();
        let cfg = ProbeConfig { epochs: 0, ..ProbeConfig::default() };
        let p = importance_probe(&task.student, &task, &task.slots(), &cfg).unwrap();
        assert_eq!(p.scores.len(), 3);
        assert!(p.scores.iter().all(|s| s.score == 0.0));
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("slot_id,layer,projection_type,score\n0,0,layer0,0\n"));
    }

    #[test]
    fn probe_rejects_empty_slots() {
        let task = make_planted_task(&PlantedSpec::new(2, vec![0], 1, 0)).unwrap();
        let err = importance_probe(&task.student, &task, &[], &ProbeConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn top_k_ties_to_lower_id() {
        let mk = |id, score| SlotScore { slot_id: id, layer: id, projection_type: "x".into(), score, per_seed: vec![score] };
        let p = ImportanceProfile {
            config: ProbeConfig::default(),
            loss_convention: "mean".into(),
            scores: vec![mk(0, 1.0), mk(1, 3.0), mk(2, 1.0), mk(3, 2.0)],
        };
        assert_eq!(p.top_k(2), vec![1, 3]);
        assert_eq!(p.top_k(3), vec![0, 1, 3]);
    }
}
