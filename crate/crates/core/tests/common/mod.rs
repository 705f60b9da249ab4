//! Helpers shared by the integration tests: finite-difference gradient
//! checks and brute-force oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weightlora::adapters::{weighted_forward_var, AdapterConfig, BoundAdapter};
use weightlora::autograd::{Tape, Var};
use weightlora::models::{attach_adapters, Activation, ToyModel};
use weightlora::sparsifier::GateVector;
use weightlora::trainer::RunReport;
use weightlora::{Result, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss from the recorded inputs.
pub type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// `sum(out * C)` with a fixed pseudo-random `C` shaped like `out`, turning
/// any output into a scalar whose gradient touches every entry.
pub fn project<'t>(tape: &'t Tape, out: &Var<'t>) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let c = Tensor::randn(&out.shape(), 1.0, &mut rng);
    out.mul(&tape.constant(c))?.sum()
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    build(&tape, &vars).expect("forward").item()
}

/// `||g - g_fd|| / max(||g||, ||g_fd||, 1e-12)`, Euclidean norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Worst relative error over all inputs between the tape gradient and
/// central differences.
pub fn gradcheck(inputs: &[Tensor], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&tape, &vars).expect("forward");
    let grads = tape.backward(&loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut worst: f64 = 0.0;
    for (p, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[p].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[p].data_mut()[j] -= FD_STEP;
            *slot = (eval(&plus, build) - eval(&minus, build)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[p], &numeric));
    }
    worst
}

/// Entries drawn from `N(0, 1)` and pushed at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// One named primitive check: `instance(seed)` returns the worst relative error.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub instance: fn(u64) -> f64,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unary_case(seed: u64, f: for<'t> fn(&Var<'t>) -> Result<Var<'t>>) -> f64 {
    unary_case_rows(seed, 1, f)
}

/// `min_rows` matters for layer norm: a two-entry column normalizes to
/// `(±1, ∓1)` up to `eps`, so its true gradient is `O(eps)` and a central
/// difference measures only rounding noise.
fn unary_case_rows(seed: u64, min_rows: usize, f: for<'t> fn(&Var<'t>) -> Result<Var<'t>>) -> f64 {
    let mut r = rng(seed);
    let (m, n, _) = dims(&mut r);
    let x = away_from_zero(&[m - 1 + min_rows, n], 0.05, &mut r);
    gradcheck(&[x], &move |tape, v| project(tape, &f(&v[0])?))
}

fn binary_case(seed: u64, f: for<'t> fn(&Var<'t>, &Var<'t>) -> Result<Var<'t>>) -> f64 {
    let mut r = rng(seed);
    let (m, n, _) = dims(&mut r);
    let a = Tensor::randn(&[m, n], 1.0, &mut r);
    let b = Tensor::randn(&[m, n], 1.0, &mut r);
    gradcheck(&[a, b], &move |tape, v| project(tape, &f(&v[0], &v[1])?))
}

/// Every differentiable tape primitive.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        PrimitiveCase {
            name: "matmul",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, p) = dims(&mut r);
                let a = Tensor::randn(&[m, n], 1.0, &mut r);
                let b = Tensor::randn(&[n, p], 1.0, &mut r);
                gradcheck(&[a, b], &|tape, v| project(tape, &v[0].matmul(&v[1])?))
            },
        },
        PrimitiveCase { name: "add", instance: |s| binary_case(s, |a, b| a.add(b)) },
        PrimitiveCase { name: "sub", instance: |s| binary_case(s, |a, b| a.sub(b)) },
        PrimitiveCase { name: "mul", instance: |s| binary_case(s, |a, b| a.mul(b)) },
        PrimitiveCase {
            name: "mse",
            instance: |s| binary_case(s, |a, b| a.mse(b)),
        },
        PrimitiveCase {
            name: "add_bias",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let x = Tensor::randn(&[m, n], 1.0, &mut r);
                let b = Tensor::randn(&[m, 1], 1.0, &mut r);
                gradcheck(&[x, b], &|tape, v| project(tape, &v[0].add_bias(&v[1])?))
            },
        },
        PrimitiveCase {
            name: "scale",
            instance: |s| {
                let c = rng(s ^ 0xabc).random_range(-3.0..3.0);
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let x = Tensor::randn(&[m, n], 1.0, &mut r);
                gradcheck(&[x], &move |tape, v| project(tape, &v[0].scale(c)?))
            },
        },
        PrimitiveCase {
            name: "scale_by",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let x = Tensor::randn(&[m, n], 1.0, &mut r);
                let c = Tensor::scalar(r.random_range(-2.0..2.0));
                gradcheck(&[x, c], &|tape, v| project(tape, &v[0].scale_by(&v[1])?))
            },
        },
        PrimitiveCase { name: "relu", instance: |s| unary_case(s, |x| x.relu()) },
        PrimitiveCase { name: "tanh", instance: |s| unary_case(s, |x| x.tanh()) },
        PrimitiveCase { name: "transpose", instance: |s| unary_case(s, |x| x.transpose()) },
        PrimitiveCase { name: "softmax_cols", instance: |s| unary_case(s, |x| x.softmax_cols()) },
        PrimitiveCase {
            name: "layer_norm_cols",
            instance: |s| unary_case_rows(s, 3, |x| x.layer_norm_cols(1e-5)),
        },
        PrimitiveCase { name: "sum", instance: |s| unary_case(s, |x| x.sum()) },
        PrimitiveCase { name: "mean", instance: |s| unary_case(s, |x| x.mean()) },
        PrimitiveCase {
            name: "cross_entropy",
            instance: |s| {
                let mut r = rng(s);
                let classes = r.random_range(2..=5);
                let cols = r.random_range(1..=4);
                let labels: Vec<usize> = (0..cols).map(|_| r.random_range(0..classes)).collect();
                let z = Tensor::randn(&[classes, cols], 1.5, &mut r);
                gradcheck(&[z], &move |_, v| v[0].cross_entropy(&labels))
            },
        },
        PrimitiveCase {
            name: "mask",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let x = Tensor::randn(&[m, n], 1.0, &mut r);
                let mask: Vec<f64> = (0..m * n)
                    .map(|_| if r.random_bool(0.3) { 0.0 } else { 1.0 / 0.7 })
                    .collect();
                gradcheck(&[x], &move |tape, v| project(tape, &v[0].mask(mask.clone())?))
            },
        },
        PrimitiveCase {
            name: "slice_rows",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let x = Tensor::randn(&[m + 2, n], 1.0, &mut r);
                let start = r.random_range(0..=m);
                let end = r.random_range(start + 1..=m + 2);
                gradcheck(&[x], &move |tape, v| project(tape, &v[0].slice_rows(start, end)?))
            },
        },
        PrimitiveCase {
            name: "slice_cols",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let x = Tensor::randn(&[m, n + 2], 1.0, &mut r);
                let start = r.random_range(0..=n);
                let end = r.random_range(start + 1..=n + 2);
                gradcheck(&[x], &move |tape, v| project(tape, &v[0].slice_cols(start, end)?))
            },
        },
        PrimitiveCase {
            name: "reshape",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let x = Tensor::randn(&[m, 2 * n], 1.0, &mut r);
                gradcheck(&[x], &move |tape, v| project(tape, &v[0].reshape(&[2 * m, n])?))
            },
        },
        PrimitiveCase {
            name: "concat_rows",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, p) = dims(&mut r);
                let a = Tensor::randn(&[m, n], 1.0, &mut r);
                let b = Tensor::randn(&[p, n], 1.0, &mut r);
                gradcheck(&[a, b], &|tape, v| project(tape, &Var::concat_rows(&[v[0], v[1]])?))
            },
        },
        PrimitiveCase {
            name: "concat_cols",
            instance: |s| {
                let mut r = rng(s);
                let (m, n, p) = dims(&mut r);
                let a = Tensor::randn(&[m, n], 1.0, &mut r);
                let b = Tensor::randn(&[m, p], 1.0, &mut r);
                gradcheck(&[a, b], &|tape, v| project(tape, &Var::concat_cols(&[v[0], v[1]])?))
            },
        },
    ]
}

/// `W x + omega (alpha / r) A (B x)` differentiated in `A`, `B`, `omega`
/// and `x`, with random nonzero `B` and `omega`.
pub fn gated_layer_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.random_range(2..=6);
    let k = r.random_range(2..=6);
    let rank = r.random_range(1..=d.min(k));
    let cols = r.random_range(1..=4);
    let scale = r.random_range(0.5..4.0) / rank as f64;
    let w = Tensor::randn(&[d, k], 1.0, &mut r);
    let inputs = [
        Tensor::randn(&[d, rank], 0.5, &mut r),
        Tensor::randn(&[rank, k], 0.5, &mut r),
        Tensor::scalar(r.random_range(-2.0..2.0)),
        Tensor::randn(&[k, cols], 1.0, &mut r),
    ];
    gradcheck(&inputs, &move |tape, v| {
        let adapter = BoundAdapter { a: v[0], b: v[1], scale, dropout_p: 0.0 };
        let wv = tape.constant(w.clone());
        let out = weighted_forward_var(&wv, &adapter, &v[2], true, &v[3], None::<&mut ChaCha8Rng>)?;
        project(tape, &out.tanh()?)
    })
}

/// Full gated multi-layer forward through `AdaptedModel`, differentiated
/// in every adapter factor and gate.
pub fn gated_model_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n_layers = r.random_range(2..=4);
    let width = r.random_range(3..=5);
    let rank = r.random_range(1..=2);
    let model = ToyModel::mlp(&vec![width; n_layers + 1], Activation::Tanh, 1.2, &mut r).unwrap();
    let slots: Vec<usize> = (0..n_layers).filter(|_| r.random_bool(0.7)).collect();
    let slots = if slots.is_empty() { vec![0] } else { slots };
    let cfg = AdapterConfig { alpha: 4.0, dropout_p: 0.0, ..AdapterConfig::new(rank) };
    let mut adapted = attach_adapters(&model, &slots, &cfg, true, &mut r).unwrap();
    for ad in adapted.adapters_mut() {
        let shape = ad.b().shape().to_vec();
        *ad.b_mut() = Tensor::randn(&shape, 0.5, &mut r);
    }
    let omega: Vec<f64> = slots.iter().map(|_| r.random_range(0.3..1.5)).collect();
    let n = omega.len();
    adapted.set_gates(Some(GateVector::from_values(omega.clone(), n).unwrap())).unwrap();
    let x = Tensor::randn(&[width, 3], 1.0, &mut r);
    let target = Tensor::randn(&[width, 3], 1.0, &mut r);

    let loss_of = |m: &weightlora::models::AdaptedModel| -> f64 {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut b = m.bind(&tape);
        let out = m.forward(&tape, &xv, &mut b, &[], None::<&mut ChaCha8Rng>).unwrap();
        out.mse(&tape.constant(target.clone())).unwrap().item()
    };

    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut binding = adapted.bind(&tape);
    let out = adapted.forward(&tape, &xv, &mut binding, &[], None::<&mut ChaCha8Rng>).unwrap();
    let loss = out.mse(&tape.constant(target.clone())).unwrap();
    let grads = tape.backward(&loss).unwrap();

    let mut worst: f64 = 0.0;
    for i in 0..n {
        let bound = binding.adapters[i].expect("open adapter is bound");
        for (which, var) in [(0, bound.a), (1, bound.b)] {
            let analytic = grads.get(&var).unwrap().to_vec();
            let mut numeric = vec![0.0; analytic.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let shifted = |h: f64| {
                    let mut m = adapted.clone();
                    let ad = &mut m.adapters_mut()[i];
                    let t = if which == 0 { ad.a_mut() } else { ad.b_mut() };
                    t.data_mut()[j] += h;
                    loss_of(&m)
                };
                *slot = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            }
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    let analytic: Vec<f64> = binding.omega.iter().map(|w| grads.get(w).unwrap()[0]).collect();
    let numeric: Vec<f64> = (0..n)
        .map(|i| {
            let shifted = |h: f64| {
                let mut m = adapted.clone();
                let mut w = omega.clone();
                w[i] += h;
                m.set_gates(Some(GateVector::from_values(w, n).unwrap())).unwrap();
                loss_of(&m)
            };
            (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP)
        })
        .collect();
    worst.max(relative_error(&analytic, &numeric))
}

/// Sort-based Top-K oracle: stable sort of indices by descending magnitude.
pub fn topk_by_sort(v: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()));
    let mut out = vec![0.0; v.len()];
    for &i in idx.iter().take(k) {
        out[i] = v[i];
    }
    out
}

/// Exhaustive oracle: among all supports of size `k`, the one with the
/// smallest residual `||v - P_S v||^2`, earliest in lexicographic order.
pub fn topk_exhaustive(v: &[f64], k: usize) -> Vec<f64> {
    let n = v.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let support: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let residual: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 0)
            .map(|i| v[i] * v[i])
            .sum();
        let better = match &best {
            None => true,
            Some((r, s)) => residual < *r || (residual == *r && support < *s),
        };
        if better {
            best = Some((residual, support));
        }
    }
    let (_, support) = best.expect("k <= n");
    let mut out = vec![0.0; n];
    for i in support {
        out[i] = v[i];
    }
    out
}

/// One metrics row as read back from `metrics.csv`.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub omega_l0: usize,
    pub support: Vec<usize>,
}

pub fn read_metrics(path: &std::path::Path) -> Vec<MetricsRow> {
    let mut reader = csv::Reader::from_path(path).expect("metrics.csv");
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).expect(name);
    let (c_step, c_l0, c_sup) = (col("step"), col("omega_l0"), col("omega_support"));
    reader
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            MetricsRow {
                step: rec[c_step].parse().unwrap(),
                omega_l0: rec[c_l0].parse().unwrap(),
                support: rec[c_sup]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().unwrap())
                    .collect(),
            }
        })
        .collect()
}

/// Checks the logged gate trajectory: `l0 <= k` from `first_update` on,
/// support size equal to `l0`, and a constant support from step `t` on.
/// Returns a description of the first violation.
pub fn check_l0_log(rows: &[MetricsRow], k: usize, t: usize, first_update: usize) -> Option<String> {
    let mut frozen: Option<&Vec<usize>> = None;
    for row in rows {
        if row.support.len() != row.omega_l0 {
            return Some(format!("step {}: support {:?} but l0 {}", row.step, row.support, row.omega_l0));
        }
        if row.step >= first_update && row.omega_l0 > k {
            return Some(format!("step {}: l0 {} > K {k}", row.step, row.omega_l0));
        }
        if row.step >= t {
            match frozen {
                None => frozen = Some(&row.support),
                Some(s) if *s != row.support => {
                    return Some(format!("step {}: support changed after T to {:?}", row.step, row.support));
                }
                _ => {}
            }
        }
    }
    None
}

/// Writes `report` to `dir/name.csv` and reads it back.
pub fn roundtrip_metrics(report: &RunReport, dir: &std::path::Path, name: &str) -> Vec<MetricsRow> {
    let path = dir.join(format!("{name}.csv"));
    report
        .write_metrics_csv(std::fs::File::create(&path).unwrap())
        .unwrap();
    read_metrics(&path)
}
