//! Synthetic fine-tuning tasks with planted sparse low-rank structure.
//!
//! A frozen student network and a teacher that differs from it only by a
//! rank-`rank_star` perturbation on a known subset `S*` of layers. Targets
//! come from the teacher, so adapters on exactly `S*` can fit the task.

use std::collections::BTreeSet;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::models::{Activation, ToyModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `out x N`, one column per example.
    Values(Tensor),
    /// One class per example.
    Classes { labels: Vec<usize>, n_classes: usize },
}

/// Inputs stored column-wise; each example occupies `example_cols` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
    pub example_cols: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.cols() / self.example_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the listed examples.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Targets)> {
        if idx.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let (rows, cols) = self.inputs.dims2();
        let ec = self.example_cols;
        let width = idx.len() * ec;
        let mut x = vec![0.0; rows * width];
        for r in 0..rows {
            let src = &self.inputs.data()[r * cols..(r + 1) * cols];
            for (b, &i) in idx.iter().enumerate() {
                if i >= self.len() {
                    return Err(Error::contract(format!("example {i} out of range")));
                }
                x[r * width + b * ec..r * width + (b + 1) * ec]
                    .copy_from_slice(&src[i * ec..(i + 1) * ec]);
            }
        }
        let targets = match &self.targets {
            Targets::Values(y) => {
                let (out, n) = y.dims2();
                let mut t = vec![0.0; out * idx.len()];
                for r in 0..out {
                    for (b, &i) in idx.iter().enumerate() {
                        t[r * idx.len() + b] = y.data()[r * n + i];
                    }
                }
                Targets::Values(Tensor::from_vec(&[out, idx.len()], t)?)
            }
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        };
        Ok((Tensor::from_vec(&[rows, width], x)?, targets))
    }

    /// Full dataset as one batch.
    pub fn all(&self) -> (Tensor, Targets) {
        (self.inputs.clone(), self.targets.clone())
    }
}

/// Loss of predictions `out` against `targets`: mean squared error for
/// values, mean cross-entropy for classes.
pub fn loss_var<'t>(out: &Var<'t>, targets: &Targets) -> Result<Var<'t>> {
    match targets {
        Targets::Values(y) => {
            let t = out.tape().constant(y.clone());
            out.mse(&t)
        }
        Targets::Classes { labels, .. } => out.cross_entropy(labels),
    }
}

/// Loss on plain tensors.
pub fn loss_value(out: &Tensor, targets: &Targets) -> Result<f64> {
    let tape = crate::autograd::Tape::new();
    let o = tape.constant(out.clone());
    Ok(loss_var(&o, targets)?.item())
}

fn default_gain() -> f64 {
    1.5
}

/// Shape of a planted task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub n_layers: usize,
    /// Layers carrying the teacher's perturbation.
    pub planted: Vec<usize>,
    pub rank_star: usize,
    pub width: usize,
    pub kind: TaskKind,
    /// Scale of each planted perturbation (operator-norm order).
    pub strength: f64,
    /// Student weights are `N(0, gain^2 / width)`; larger gains push tanh
    /// into saturation.
    #[serde(default = "default_gain")]
    pub gain: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl PlantedSpec {
    /// Defaults for an `n_layers`-deep, width-16 regression task.
    pub fn new(n_layers: usize, planted: Vec<usize>, rank_star: usize, seed: u64) -> Self {
        Self {
            n_layers,
            planted,
            rank_star,
            width: 16,
            kind: TaskKind::Regression,
            strength: 2.0,
            gain: 1.5,
            n_train: 512,
            n_val: 256,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: PlantedSpec,
    /// The frozen network to fine-tune.
    pub student: ToyModel,
    pub teacher: ToyModel,
    pub train: Dataset,
    pub val: Dataset,
}

/// Student/teacher pair with a planted perturbation on `spec.planted`.
pub fn make_planted_task(spec: &PlantedSpec) -> Result<SyntheticTask> {
    if spec.planted.is_empty() {
        return Err(Error::contract("planted layer set S* must be non-empty"));
    }
    if spec.n_layers == 0 {
        return Err(Error::contract("n_layers must be positive"));
    }
    let set: BTreeSet<usize> = spec.planted.iter().copied().collect();
    if set.len() != spec.planted.len() {
        return Err(Error::contract("planted layers must be distinct"));
    }
    if let Some(&bad) = set.iter().find(|&&s| s >= spec.n_layers) {
        return Err(Error::contract(format!(
            "planted layer {bad} out of range for {} layers",
            spec.n_layers
        )));
    }
    if spec.rank_star == 0 || spec.rank_star > spec.width {
        return Err(Error::contract(format!(
            "rank_star must be in 1..={}",
            spec.width
        )));
    }
    if spec.n_train == 0 || spec.n_val == 0 {
        return Err(Error::contract("train and val sizes must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let widths = vec![spec.width; spec.n_layers + 1];
    let student = ToyModel::mlp(&widths, Activation::Tanh, spec.gain, &mut rng)?;
    let std = 1.0 / (spec.width as f64).sqrt();
    let deltas: Vec<(usize, Tensor)> = set
        .iter()
        .map(|&layer| {
            let u = Tensor::randn(&[spec.width, spec.rank_star], std, &mut rng);
            let v = Tensor::randn(&[spec.rank_star, spec.width], std, &mut rng);
            Ok((layer, u.matmul(&v)?.scale(spec.strength)))
        })
        .collect::<Result<_>>()?;
    let teacher = student.perturbed(&deltas)?;

    // Train and val draw from one stream, so they never share an example.
    let n = spec.n_train + spec.n_val;
    let x = Tensor::randn(&[spec.width, n], 1.0, &mut rng);
    let y = teacher.predict(&x)?;
    let targets = match spec.kind {
        TaskKind::Regression => Targets::Values(y),
        TaskKind::Classification => Targets::Classes {
            labels: (0..n)
                .map(|j| {
                    (0..spec.width)
                        .max_by(|&a, &b| y.at(a, j).total_cmp(&y.at(b, j)))
                        .expect("width > 0")
                })
                .collect(),
            n_classes: spec.width,
        },
    };
    let full = Dataset {
        inputs: x,
        targets,
        example_cols: 1,
    };
    let train_idx: Vec<usize> = (0..spec.n_train).collect();
    let val_idx: Vec<usize> = (spec.n_train..n).collect();
    let (tx, ty) = full.batch(&train_idx)?;
    let (vx, vy) = full.batch(&val_idx)?;
    Ok(SyntheticTask {
        spec: spec.clone(),
        student,
        teacher,
        train: Dataset {
            inputs: tx,
            targets: ty,
            example_cols: 1,
        },
        val: Dataset {
            inputs: vx,
            targets: vy,
            example_cols: 1,
        },
    })
}

impl SyntheticTask {
    /// Validation loss of the unadapted student.
    pub fn baseline_val_loss(&self) -> Result<f64> {
        loss_value(&self.student.predict(&self.val.inputs)?, &self.val.targets)
    }

    /// Every layer is an adapter slot.
    pub fn slots(&self) -> Vec<usize> {
        (0..self.student.n_layers()).collect()
    }

    /// Writes `split,x0..,y0..` (or `label`) rows, one per example.
    pub fn export_columnar<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let in_dim = self.train.inputs.rows();
        let mut header = vec!["split".to_string()];
        header.extend((0..in_dim).map(|i| format!("x{i}")));
        match &self.train.targets {
            Targets::Values(y) => header.extend((0..y.rows()).map(|i| format!("y{i}"))),
            Targets::Classes { .. } => header.push("label".into()),
        }
        w.write_record(&header)?;
        for (name, ds) in [("train", &self.train), ("val", &self.val)] {
            for j in 0..ds.len() {
                let mut row = vec![name.to_string()];
                row.extend((0..in_dim).map(|i| ds.inputs.at(i, j).to_string()));
                match &ds.targets {
                    Targets::Values(y) => {
                        row.extend((0..y.rows()).map(|i| y.at(i, j).to_string()))
                    }
                    Targets::Classes { labels, .. } => row.push(labels[j].to_string()),
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Compact task descriptor used on the command line:
/// `planted:n<layers>k<|S*|>[r<rank_star>][w<width>]` for regression, or
/// `planted-cls:...` for classification. `S*` is drawn from the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskDescriptor {
    pub kind: TaskKind,
    pub n_layers: usize,
    pub n_planted: usize,
    pub rank_star: usize,
    pub width: usize,
}

impl TaskDescriptor {
    /// Planted spec for `seed`; `S*` is a seeded random subset.
    pub fn to_spec(&self, seed: u64) -> PlantedSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5e75);
        let mut planted = sample(&mut rng, self.n_layers, self.n_planted).into_vec();
        planted.sort_unstable();
        let mut spec = PlantedSpec::new(self.n_layers, planted, self.rank_star, seed);
        spec.width = self.width;
        spec.kind = self.kind;
        spec
    }
}

impl FromStr for TaskDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::config("task", format!("`{s}`: {msg}"));
        let (prefix, body) = s
            .split_once(':')
            .ok_or_else(|| bad("expected planted:n<layers>k<count>"))?;
        let kind = match prefix {
            "planted" => TaskKind::Regression,
            "planted-cls" => TaskKind::Classification,
            _ => return Err(bad("unknown task family")),
        };
        let mut fields = std::collections::BTreeMap::new();
        let mut chars = body.chars().peekable();
        while let Some(c) = chars.next() {
            if !c.is_ascii_alphabetic() {
                return Err(bad("expected a field letter"));
            }
            let mut digits = String::new();
            while let Some(d) = chars.peek().filter(|d| d.is_ascii_digit()) {
                digits.push(*d);
                chars.next();
            }
            let value: usize = digits.parse().map_err(|_| bad("missing number"))?;
            if fields.insert(c, value).is_some() {
                return Err(bad("repeated field"));
            }
        }
        let n_layers = *fields.get(&'n').ok_or_else(|| bad("missing n"))?;
        let n_planted = *fields.get(&'k').ok_or_else(|| bad("missing k"))?;
        if let Some(extra) = fields.keys().find(|c| !"nkrw".contains(**c)) {
            return Err(bad(&format!("unknown field `{extra}`")));
        }
        let rank_star = fields.get(&'r').copied().unwrap_or(1);
        let width = fields.get(&'w').copied().unwrap_or(16);
        if n_layers == 0 || n_planted == 0 || n_planted > n_layers {
            return Err(bad("need 1 <= k <= n"));
        }
        if rank_star == 0 || rank_star > width {
            return Err(bad("need 1 <= r <= w"));
        }
        Ok(Self {
            kind,
            n_layers,
            n_planted,
            rank_star,
            width,
        })
    }
}

impl std::fmt::Display for TaskDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let prefix = match self.kind {
            TaskKind::Regression => "planted",
            TaskKind::Classification => "planted-cls",
        };
        write!(
            f,
            "{prefix}:n{}k{}r{}w{}",
            self.n_layers, self.n_planted, self.rank_star, self.width
        )
    }
}

impl TryFrom<String> for TaskDescriptor {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TaskDescriptor> for String {
    fn from(t: TaskDescriptor) -> Self {
        t.to_string()
    }
}

/// Random mini-batch indices (with replacement across batches, without
/// within a batch).
pub fn sample_batch<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    sample(rng, n, size).into_vec()
}
