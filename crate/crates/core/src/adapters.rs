//! Low-rank adapters on frozen linear layers.
//!
//! A layer with frozen weight `W: d x k` and adapter `(A: d x r, B: r x k)`
//! computes `W x + (alpha / r) * A (B x)`. The gated variant multiplies the
//! adapter branch by a scalar gate `omega_i`, and skips it outright once the
//! gate vector is frozen with that gate closed.
//!
//! Rank expansion grows an adapter to `r_new > r` without changing the
//! product `A B`, either by appending Gaussian columns to `A` and zero rows
//! to `B`, or by re-expressing `A` through its thin QR factors and appending
//! Gaussian columns projected onto the orthogonal complement of `range(A)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::thin_qr;
use crate::tensor::Tensor;

/// Default LoRA scale numerator.
pub const DEFAULT_ALPHA: f64 = 32.0;
/// Default dropout probability on the adapter branch input.
pub const DEFAULT_DROPOUT: f64 = 0.05;
/// QR expansion refuses `A` when `min |R_jj| < RANK_TOL * max |R_jj|`.
pub const RANK_TOL: f64 = 1e-12;

/// A pretrained weight that never receives updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBase {
    weight: Tensor,
}

impl FrozenBase {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::contract(format!(
                "base weight must be a matrix, got shape {:?}",
                weight.shape()
            )));
        }
        Ok(Self {
            weight: weight.with_requires_grad(false),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Output dimension `d`.
    pub fn d(&self) -> usize {
        self.weight.rows()
    }

    /// Input dimension `k`.
    pub fn k(&self) -> usize {
        self.weight.cols()
    }

    /// Records `W` as a non-differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.leaf(&self.weight)
    }
}

/// How the `alpha / r` scale reacts to a rank change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    /// Keep `alpha`, so the scale becomes `alpha / r_new`.
    #[default]
    Rescale,
    /// Grow `alpha` with the rank, so the scale stays `alpha / r`.
    Preserve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    /// Standard deviation of the Gaussian entries of `A`.
    pub init_std: f64,
}

impl AdapterConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: DEFAULT_ALPHA,
            dropout_p: DEFAULT_DROPOUT,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank", "rank must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout", "dropout must be in [0, 1)"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", "alpha must be positive"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("init_std", "init_std must be positive"));
        }
        Ok(())
    }
}

/// One adapter `(A, B)` bound to layer `layer_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub layer_id: usize,
    a: Tensor,
    b: Tensor,
    pub alpha: f64,
    pub dropout_p: f64,
    pub active: bool,
}

impl AdapterState {
    /// Fresh adapter: `A` Gaussian, `B = 0`, so `A B = 0`.
    pub fn new<R: Rng + ?Sized>(
        layer_id: usize,
        d: usize,
        k: usize,
        config: &AdapterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let r = config.rank;
        if r > d.min(k) {
            return Err(Error::contract(format!(
                "rank {r} exceeds min(d, k) = {}",
                d.min(k)
            )));
        }
        Ok(Self {
            layer_id,
            a: Tensor::randn(&[d, r], config.init_std, rng).with_requires_grad(true),
            b: Tensor::zeros(&[r, k]).with_requires_grad(true),
            alpha: config.alpha,
            dropout_p: config.dropout_p,
            active: true,
        })
    }

    /// Builds an adapter from explicit factors.
    pub fn from_parts(
        layer_id: usize,
        a: Tensor,
        b: Tensor,
        alpha: f64,
        dropout_p: f64,
    ) -> Result<Self> {
        let (d, r) = a.dims2();
        let (r2, k) = b.dims2();
        if r != r2 {
            return Err(Error::dim("adapter", a.shape(), b.shape()));
        }
        if r > d.min(k) {
            return Err(Error::contract(format!(
                "rank {r} exceeds min(d, k) = {}",
                d.min(k)
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::contract("dropout must be in [0, 1)"));
        }
        Ok(Self {
            layer_id,
            a: a.with_requires_grad(true),
            b: b.with_requires_grad(true),
            alpha,
            dropout_p,
            active: true,
        })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d(&self) -> usize {
        self.a.rows()
    }

    pub fn k(&self) -> usize {
        self.b.cols()
    }

    /// Effective multiplier `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Materialized `A B` (unscaled).
    pub fn product(&self) -> Tensor {
        self.a.matmul(&self.b).expect("adapter factors agree")
    }

    /// Materialized `(alpha / r) A B`.
    pub fn delta(&self) -> Tensor {
        self.product().scale(self.scale())
    }

    /// Trainable parameter count: `r (d + k)` when active, else 0.
    pub fn param_count(&self) -> usize {
        if self.active {
            self.rank() * (self.d() + self.k())
        } else {
            0
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundAdapter<'t> {
        BoundAdapter {
            a: tape.param(&self.a),
            b: tape.param(&self.b),
            scale: self.scale(),
            dropout_p: self.dropout_p,
        }
    }

    pub(crate) fn check_base(&self, base: &FrozenBase) -> Result<()> {
        if base.d() != self.d() || base.k() != self.k() {
            return Err(Error::dim(
                "adapter/base",
                base.weight().shape(),
                &[self.d(), self.rank(), self.k()],
            ));
        }
        Ok(())
    }
}

/// Free function form of [`AdapterState::param_count`].
/// `r (d + k)`: trainable scalars of one rank-`r` adapter on a `d x k` weight.
pub fn lora_param_count(d: usize, k: usize, r: usize) -> usize {
    r * (d + k)
}

pub fn adapter_param_count(adapter: &AdapterState) -> usize {
    adapter.param_count()
}

/// An adapter's factors recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub scale: f64,
    pub dropout_p: f64,
}

impl<'t> BoundAdapter<'t> {
    /// `(alpha / r) A (B drop(x))`. Dropout only when `rng` is given.
    pub fn branch<R: Rng + ?Sized>(&self, x: &Var<'t>, rng: Option<&mut R>) -> Result<Var<'t>> {
        let input = match rng {
            Some(rng) if self.dropout_p > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout_p);
                let mask: Vec<f64> = (0..x.value().len())
                    .map(|_| {
                        if rng.random::<f64>() < self.dropout_p {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                x.mask(mask)?
            }
            _ => *x,
        };
        self.a.matmul(&self.b.matmul(&input)?)?.scale(self.scale)
    }
}

fn base_output<'t>(w: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    w.matmul(x)
}

/// `W x + (alpha / r) A (B x)` on the tape.
pub fn lora_forward_var<'t, R: Rng + ?Sized>(
    w: &Var<'t>,
    adapter: &BoundAdapter<'t>,
    x: &Var<'t>,
    rng: Option<&mut R>,
) -> Result<Var<'t>> {
    let base = base_output(w, x)?;
    base.add(&adapter.branch(x, rng)?)
}

/// `W x + omega * (alpha / r) A (B x)` on the tape. With `open == false` the
/// branch is not built at all: no compute and no gradient reaches `A`, `B`
/// or `omega`.
pub fn weighted_forward_var<'t, R: Rng + ?Sized>(
    w: &Var<'t>,
    adapter: &BoundAdapter<'t>,
    omega: &Var<'t>,
    open: bool,
    x: &Var<'t>,
    rng: Option<&mut R>,
) -> Result<Var<'t>> {
    let base = base_output(w, x)?;
    if !open {
        return Ok(base);
    }
    let branch = adapter.branch(x, rng)?.scale_by(omega)?;
    base.add(&branch)
}

/// Evaluation-mode LoRA forward on plain tensors.
pub fn lora_forward(base: &FrozenBase, adapter: &AdapterState, x: &Tensor) -> Result<Tensor> {
    adapter.check_base(base)?;
    let tape = Tape::new();
    let w = base.bind(&tape);
    let bound = adapter.bind(&tape);
    let xv = tape.constant(x.clone());
    let out = lora_forward_var::<rand::rngs::ThreadRng>(&w, &bound, &xv, None)?;
    Ok(out.value())
}

/// Evaluation-mode gated forward on plain tensors. A frozen zero gate
/// (`frozen && omega == 0`) or an inactive adapter skips the branch.
pub fn weighted_forward(
    base: &FrozenBase,
    adapter: &AdapterState,
    omega: f64,
    frozen: bool,
    x: &Tensor,
) -> Result<Tensor> {
    adapter.check_base(base)?;
    let tape = Tape::new();
    let w = base.bind(&tape);
    let bound = adapter.bind(&tape);
    let om = tape.scalar_param(omega);
    let xv = tape.constant(x.clone());
    let open = adapter.active && !(frozen && omega == 0.0);
    let out = weighted_forward_var::<rand::rngs::ThreadRng>(&w, &bound, &om, open, &xv, None)?;
    Ok(out.value())
}

/// Which initialization grows the rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionScheme {
    Gaussian,
    Qr,
}

impl std::str::FromStr for ExpansionScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "qr" => Ok(Self::Qr),
            other => Err(Error::config(
                "expansion",
                format!("unknown expansion scheme `{other}` (expected none, gaussian or qr)"),
            )),
        }
    }
}

fn check_expansion(adapter: &AdapterState, r_new: usize) -> Result<()> {
    if !adapter.active {
        return Err(Error::state("cannot expand an inactive adapter"));
    }
    let r = adapter.rank();
    if r_new <= r {
        return Err(Error::contract(format!(
            "new rank {r_new} must exceed current rank {r}"
        )));
    }
    let cap = adapter.d().min(adapter.k());
    if r_new > cap {
        return Err(Error::contract(format!(
            "new rank {r_new} exceeds min(d, k) = {cap}"
        )));
    }
    Ok(())
}

fn rescaled_alpha(adapter: &AdapterState, r_new: usize, convention: ScaleConvention) -> f64 {
    match convention {
        ScaleConvention::Rescale => adapter.alpha,
        ScaleConvention::Preserve => adapter.alpha * r_new as f64 / adapter.rank() as f64,
    }
}

/// `A~ = [A | G]`, `B~ = [B ; 0]` with `G` Gaussian of standard deviation `std`.
pub fn expand_rank_gaussian<R: Rng + ?Sized>(
    adapter: &AdapterState,
    r_new: usize,
    std: f64,
    convention: ScaleConvention,
    rng: &mut R,
) -> Result<AdapterState> {
    check_expansion(adapter, r_new)?;
    let extra = r_new - adapter.rank();
    let g = Tensor::randn(&[adapter.d(), extra], std, rng);
    let a = adapter.a.detach().hstack(&g)?;
    let b = adapter.b.detach().vstack(&Tensor::zeros(&[extra, adapter.k()]))?;
    let mut out = AdapterState::from_parts(
        adapter.layer_id,
        a,
        b,
        rescaled_alpha(adapter, r_new, convention),
        adapter.dropout_p,
    )?;
    out.active = adapter.active;
    Ok(out)
}

/// `A = Q R`; `A~ = [Q | (I - Q Q^T) N]`, `B~ = [R B ; 0]` with `N` Gaussian.
pub fn expand_rank_qr<R: Rng + ?Sized>(
    adapter: &AdapterState,
    r_new: usize,
    std: f64,
    convention: ScaleConvention,
    rng: &mut R,
) -> Result<AdapterState> {
    check_expansion(adapter, r_new)?;
    let qr = thin_qr(&adapter.a)?;
    let ratio = qr.diag_ratio();
    if ratio < RANK_TOL {
        return Err(Error::Degenerate(format!(
            "A of layer {} is rank deficient (min/max |R_jj| = {ratio:e}); use the gaussian expansion scheme",
            adapter.layer_id
        )));
    }
    let extra = r_new - adapter.rank();
    let noise = Tensor::randn(&[adapter.d(), extra], std, rng);
    // (I - Q Q^T) N without forming the d x d projector.
    let coeffs = qr.q.transpose().matmul(&noise)?;
    let projected = noise.sub(&qr.q.matmul(&coeffs)?)?;
    let a = qr.q.hstack(&projected)?;
    let top = qr.r.matmul(&adapter.b)?;
    let b = top.vstack(&Tensor::zeros(&[extra, adapter.k()]))?;
    let mut out = AdapterState::from_parts(
        adapter.layer_id,
        a,
        b,
        rescaled_alpha(adapter, r_new, convention),
        adapter.dropout_p,
    )?;
    out.active = adapter.active;
    Ok(out)
}

/// Expands with the given scheme.
pub fn expand_rank<R: Rng + ?Sized>(
    adapter: &AdapterState,
    r_new: usize,
    scheme: ExpansionScheme,
    std: f64,
    convention: ScaleConvention,
    rng: &mut R,
) -> Result<AdapterState> {
    match scheme {
        ExpansionScheme::Gaussian => expand_rank_gaussian(adapter, r_new, std, convention, rng),
        ExpansionScheme::Qr => expand_rank_qr(adapter, r_new, std, convention, rng),
    }
}

/// `||A~B~ - AB||_F / max(1, ||AB||_F)`.
pub fn expansion_residual(before: &AdapterState, after: &AdapterState) -> f64 {
    let old = before.product();
    let new = after.product();
    let diff = new.sub(&old).expect("expansion keeps d x k").frobenius_norm();
    diff / old.frobenius_norm().max(1.0)
}

/// One adapter in a checkpoint file. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRecord {
    pub layer_id: usize,
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub active: bool,
}

impl From<&AdapterState> for AdapterRecord {
    fn from(s: &AdapterState) -> Self {
        Self {
            layer_id: s.layer_id,
            d: s.d(),
            k: s.k(),
            r: s.rank(),
            alpha: s.alpha,
            dropout_p: s.dropout_p,
            a: s.a.data().to_vec(),
            b: s.b.data().to_vec(),
            active: s.active,
        }
    }
}

impl TryFrom<&AdapterRecord> for AdapterState {
    type Error = Error;
    fn try_from(rec: &AdapterRecord) -> Result<Self> {
        let a = Tensor::from_vec(&[rec.d, rec.r], rec.a.clone())?;
        let b = Tensor::from_vec(&[rec.r, rec.k], rec.b.clone())?;
        let mut s = AdapterState::from_parts(rec.layer_id, a, b, rec.alpha, rec.dropout_p)?;
        s.active = rec.active;
        Ok(s)
    }
}
