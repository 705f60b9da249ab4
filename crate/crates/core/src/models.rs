//! Toy host networks with adapter attachment points.
//!
//! Two architectures are provided: a stack of frozen linear layers with a
//! pointwise nonlinearity, and a single-block transformer encoder
//! (embedding, multi-head self-attention with q/k/v/o projections, a two-layer
//! MLP, layer norms, mean pooling and a linear head). Every linear layer is
//! an adapter slot.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    weighted_forward_var, AdapterConfig, AdapterState, BoundAdapter, FrozenBase,
};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparsifier::GateVector;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply<'t>(self, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
            Activation::Identity => Ok(*x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// `h_{i+1} = act(W_i h_i)`, no activation after the last layer.
    Mlp { activation: Activation },
    /// One encoder block over sequences of `seq_len` tokens.
    Encoder { heads: usize, seq_len: usize },
}

/// A named frozen linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub base: FrozenBase,
}

/// Layer indices of the encoder's linear maps.
pub mod encoder_layer {
    pub const EMBED: usize = 0;
    pub const QUERY: usize = 1;
    pub const KEY: usize = 2;
    pub const VALUE: usize = 3;
    pub const OUTPUT: usize = 4;
    pub const MLP_UP: usize = 5;
    pub const MLP_DOWN: usize = 6;
    pub const HEAD: usize = 7;
}

/// Hook deciding how each linear layer is bound and applied.
pub trait LayerContext<'t> {
    /// Records the weight of `layer` on the tape.
    fn weight(&mut self, tape: &'t Tape, _layer: usize, base: &FrozenBase) -> Var<'t> {
        base.bind(tape)
    }

    /// Applies `layer` with bound weight `w` to `x`.
    fn linear(&mut self, _layer: usize, w: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        w.matmul(x)
    }
}

/// The unmodified network.
#[derive(Debug, Default)]
pub struct Plain;

impl<'t> LayerContext<'t> for Plain {}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub architecture: Architecture,
    layers: Vec<Layer>,
}

const LN_EPS: f64 = 1e-5;

impl ToyModel {
    /// Frozen MLP with the given widths, `widths[0]` being the input size.
    /// Weights are `N(0, gain^2 / fan_in)`.
    pub fn mlp<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = gain / (w[0] as f64).sqrt();
                Ok(Layer {
                    name: format!("layer{i}"),
                    base: FrozenBase::new(Tensor::randn(&[w[1], w[0]], std, rng))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            architecture: Architecture::Mlp { activation },
            layers,
        })
    }

    /// Frozen single-block encoder. Inputs are `in_features x (batch * seq_len)`
    /// with each sequence's tokens in consecutive columns.
    pub fn encoder<R: Rng + ?Sized>(
        in_features: usize,
        width: usize,
        hidden: usize,
        heads: usize,
        seq_len: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "width {width} must be divisible by heads {heads}"
            )));
        }
        if seq_len == 0 {
            return Err(Error::contract("seq_len must be positive"));
        }
        let mut make = |name: &str, rows: usize, cols: usize| -> Result<Layer> {
            let std = 1.0 / (cols as f64).sqrt();
            Ok(Layer {
                name: name.to_string(),
                base: FrozenBase::new(Tensor::randn(&[rows, cols], std, rng))?,
            })
        };
        let layers = vec![
            make("embed", width, in_features)?,
            make("attn.q", width, width)?,
            make("attn.k", width, width)?,
            make("attn.v", width, width)?,
            make("attn.o", width, width)?,
            make("mlp.up", hidden, width)?,
            make("mlp.down", width, hidden)?,
            make("head", out_features, width)?,
        ];
        Ok(Self {
            architecture: Architecture::Encoder { heads, seq_len },
            layers,
        })
    }

    pub fn from_layers(architecture: Architecture, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("model needs at least one layer"));
        }
        Ok(Self {
            architecture,
            layers,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].base.k()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").base.d()
    }

    /// Columns consumed per example.
    pub fn example_cols(&self) -> usize {
        match self.architecture {
            Architecture::Mlp { .. } => 1,
            Architecture::Encoder { seq_len, .. } => seq_len,
        }
    }

    /// Copy with `delta[i]` added to the weight of layer `i` where present.
    pub fn perturbed(&self, deltas: &[(usize, Tensor)]) -> Result<Self> {
        let mut out = self.clone();
        for (i, delta) in deltas {
            let layer = out
                .layers
                .get_mut(*i)
                .ok_or_else(|| Error::contract(format!("layer {i} out of range")))?;
            layer.base = FrozenBase::new(layer.base.weight().add(delta)?)?;
        }
        Ok(out)
    }

    /// Copy with every weight replaced.
    pub fn with_weights(&self, weights: Vec<Tensor>) -> Result<Self> {
        if weights.len() != self.layers.len() {
            return Err(Error::dim("with_weights", &[self.layers.len()], &[weights.len()]));
        }
        let mut out = self.clone();
        for (layer, w) in out.layers.iter_mut().zip(weights) {
            if w.shape() != layer.base.weight().shape() {
                return Err(Error::dim("with_weights", layer.base.weight().shape(), w.shape()));
            }
            layer.base = FrozenBase::new(w)?;
        }
        Ok(out)
    }

    /// Forward pass; `ctx` controls each linear layer.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: &Var<'t>,
        ctx: &mut dyn LayerContext<'t>,
    ) -> Result<Var<'t>> {
        let lin = |i: usize, h: &Var<'t>, ctx: &mut dyn LayerContext<'t>| -> Result<Var<'t>> {
            let w = ctx.weight(tape, i, &self.layers[i].base);
            ctx.linear(i, &w, h)
        };
        match self.architecture {
            Architecture::Mlp { activation } => {
                let mut h = *x;
                let last = self.layers.len() - 1;
                for i in 0..=last {
                    h = lin(i, &h, ctx)?;
                    if i < last {
                        h = activation.apply(&h)?;
                    }
                }
                Ok(h)
            }
            Architecture::Encoder { heads, seq_len } => {
                use encoder_layer::*;
                let cols = x.shape()[1];
                if !cols.is_multiple_of(seq_len) {
                    return Err(Error::contract(format!(
                        "{cols} input columns is not a multiple of seq_len {seq_len}"
                    )));
                }
                let batch = cols / seq_len;
                let e = lin(EMBED, x, ctx)?;
                let q = lin(QUERY, &e, ctx)?;
                let k = lin(KEY, &e, ctx)?;
                let v = lin(VALUE, &e, ctx)?;
                let width = e.shape()[0];
                let dh = width / heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let mut seqs = Vec::with_capacity(batch);
                for s in 0..batch {
                    let (c0, c1) = (s * seq_len, (s + 1) * seq_len);
                    let (qs, ks, vs) = (q.slice_cols(c0, c1)?, k.slice_cols(c0, c1)?, v.slice_cols(c0, c1)?);
                    let mut per_head = Vec::with_capacity(heads);
                    for h in 0..heads {
                        let (r0, r1) = (h * dh, (h + 1) * dh);
                        let qh = qs.slice_rows(r0, r1)?;
                        let kh = ks.slice_rows(r0, r1)?;
                        let vh = vs.slice_rows(r0, r1)?;
                        // scores[j, i] = k_j . q_i; softmax over keys j per query i
                        let scores = kh.transpose()?.matmul(&qh)?.scale(inv_sqrt)?;
                        let attn = scores.softmax_cols()?;
                        per_head.push(vh.matmul(&attn)?);
                    }
                    seqs.push(Var::concat_rows(&per_head)?);
                }
                let ctxv = Var::concat_cols(&seqs)?;
                let o = lin(OUTPUT, &ctxv, ctx)?;
                let h1 = e.add(&o)?.layer_norm_cols(LN_EPS)?;
                let up = lin(MLP_UP, &h1, ctx)?.relu()?;
                let down = lin(MLP_DOWN, &up, ctx)?;
                let h2 = h1.add(&down)?.layer_norm_cols(LN_EPS)?;
                let pool = tape.constant(pooling_matrix(batch, seq_len));
                let pooled = h2.matmul(&pool)?;
                lin(HEAD, &pooled, ctx)
            }
        }
    }

    /// Evaluation forward of the frozen network on a plain tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.forward(&tape, &xv, &mut Plain)?.value())
    }
}

/// `(batch * seq_len) x batch` matrix averaging each sequence's tokens.
fn pooling_matrix(batch: usize, seq_len: usize) -> Tensor {
    let mut p = Tensor::zeros(&[batch * seq_len, batch]);
    let w = 1.0 / seq_len as f64;
    for s in 0..batch {
        for t in 0..seq_len {
            p.set(s * seq_len + t, s, w);
        }
    }
    p
}

/// A toy model with adapters on a subset of its layers, optionally gated.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    model: ToyModel,
    slots: Vec<usize>,
    adapters: Vec<AdapterState>,
    gates: Option<GateVector>,
}

/// Attaches one adapter per slot. With `gated`, an all-ones gate vector with
/// `K = n` is created; trainers replace it with their own `K`.
pub fn attach_adapters<R: Rng + ?Sized>(
    model: &ToyModel,
    slots: &[usize],
    config: &AdapterConfig,
    gated: bool,
    rng: &mut R,
) -> Result<AdaptedModel> {
    config.validate()?;
    let mut seen = BTreeSet::new();
    for &s in slots {
        if s >= model.n_layers() {
            return Err(Error::contract(format!(
                "slot {s} out of range for {} layers",
                model.n_layers()
            )));
        }
        if !seen.insert(s) {
            return Err(Error::contract(format!("duplicate slot {s}")));
        }
    }
    let adapters = slots
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let base = &model.layers[s].base;
            AdapterState::new(i, base.d(), base.k(), config, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let gates = if gated && !slots.is_empty() {
        Some(GateVector::ones(slots.len(), slots.len())?)
    } else {
        None
    };
    Ok(AdaptedModel {
        model: model.clone(),
        slots: slots.to_vec(),
        adapters,
        gates,
    })
}

/// Tape handles for one forward pass of an [`AdaptedModel`].
#[derive(Debug)]
pub struct Binding<'t> {
    /// Per adapter; `None` when the adapter is disconnected.
    pub adapters: Vec<Option<BoundAdapter<'t>>>,
    /// Per gate, when gated.
    pub omega: Vec<Var<'t>>,
    /// Base weights recorded as differentiable leaves, by layer.
    pub tracked_weights: Vec<(usize, Var<'t>)>,
}

struct AdaptedContext<'a, 't, R: Rng + ?Sized> {
    model: &'a AdaptedModel,
    binding: &'a mut Binding<'t>,
    slot_of_layer: Vec<Option<usize>>,
    track: &'a [usize],
    rng: Option<&'a mut R>,
}

impl<'t, R: Rng + ?Sized> LayerContext<'t> for AdaptedContext<'_, 't, R> {
    fn weight(&mut self, tape: &'t Tape, layer: usize, base: &FrozenBase) -> Var<'t> {
        if self.track.contains(&layer) {
            let v = tape.param(base.weight());
            self.binding.tracked_weights.push((layer, v));
            v
        } else {
            base.bind(tape)
        }
    }

    fn linear(&mut self, layer: usize, w: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let Some(idx) = self.slot_of_layer[layer] else {
            return w.matmul(x);
        };
        let Some(bound) = self.binding.adapters[idx] else {
            return w.matmul(x);
        };
        let rng = self.rng.as_deref_mut();
        match &self.model.gates {
            Some(gates) => weighted_forward_var(
                w,
                &bound,
                &self.binding.omega[idx],
                gates.is_open(idx),
                x,
                rng,
            ),
            None => crate::adapters::lora_forward_var(w, &bound, x, rng),
        }
    }
}

impl AdaptedModel {
    pub fn base(&self) -> &ToyModel {
        &self.model
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn adapters(&self) -> &[AdapterState] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [AdapterState] {
        &mut self.adapters
    }

    pub fn gates(&self) -> Option<&GateVector> {
        self.gates.as_ref()
    }

    pub fn gates_mut(&mut self) -> Option<&mut GateVector> {
        self.gates.as_mut()
    }

    pub fn set_gates(&mut self, gates: Option<GateVector>) -> Result<()> {
        if let Some(g) = &gates {
            if g.len() != self.adapters.len() {
                return Err(Error::dim("set_gates", &[self.adapters.len()], &[g.len()]));
            }
        }
        self.gates = gates;
        Ok(())
    }

    /// Split borrow of adapters and gates.
    pub fn parts_mut(&mut self) -> (&mut [AdapterState], Option<&mut GateVector>) {
        (&mut self.adapters, self.gates.as_mut())
    }

    /// `(d, k)` of each slot.
    pub fn slot_dims(&self) -> Vec<(usize, usize)> {
        self.slots
            .iter()
            .map(|&s| {
                let b = &self.model.layers[s].base;
                (b.d(), b.k())
            })
            .collect()
    }

    /// Sum of active adapters' `r (d + k)`.
    pub fn trainable_params(&self) -> usize {
        self.adapters.iter().map(AdapterState::param_count).sum()
    }

    /// Whether adapter `i` takes part in the forward pass.
    pub fn is_connected(&self, i: usize) -> bool {
        self.adapters[i].active && self.gates.as_ref().is_none_or(|g| g.is_open(i))
    }

    /// Records adapters (and gates) on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        let adapters = self
            .adapters
            .iter()
            .enumerate()
            .map(|(i, a)| self.is_connected(i).then(|| a.bind(tape)))
            .collect();
        let omega = match &self.gates {
            Some(g) => g.values().iter().map(|&w| tape.scalar_param(w)).collect(),
            None => Vec::new(),
        };
        Binding {
            adapters,
            omega,
            tracked_weights: Vec::new(),
        }
    }

    /// Forward with adapters. Dropout runs iff `rng` is given. Layers listed
    /// in `track_weights` get their base weight recorded as a differentiable
    /// leaf (see [`Binding::tracked_weights`]).
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        x: &Var<'t>,
        binding: &mut Binding<'t>,
        track_weights: &[usize],
        rng: Option<&mut R>,
    ) -> Result<Var<'t>> {
        let mut slot_of_layer = vec![None; self.model.n_layers()];
        for (i, &s) in self.slots.iter().enumerate() {
            slot_of_layer[s] = Some(i);
        }
        let mut ctx = AdaptedContext {
            model: self,
            binding,
            slot_of_layer,
            track: track_weights,
            rng,
        };
        self.model.forward(tape, x, &mut ctx)
    }

    /// Evaluation forward on a plain tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut binding = self.bind(&tape);
        Ok(self
            .forward::<rand::rngs::ThreadRng>(&tape, &xv, &mut binding, &[], None)?
            .value())
    }
}
