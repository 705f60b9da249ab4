//! Adam and the linear warm-up / linear decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Adam with per-parameter state keyed by `K`.
#[derive(Debug, Clone)]
pub struct Adam<K: Ord + Clone> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<K, Moments>,
}

impl<K: Ord + Clone> Default for Adam<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Ord + Clone> Adam<K> {
    pub fn new() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            state: BTreeMap::new(),
        }
    }

    /// One update of `param` in place.
    pub fn step(&mut self, key: K, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::dim("adam", &[param.len()], &[grad.len()]));
        }
        let dir = self.direction(key, grad)?;
        param.iter_mut().zip(&dir).for_each(|(p, d)| *p -= lr * d);
        Ok(())
    }

    /// Advances the moments of `key` with `grad` and returns the
    /// bias-corrected step direction `m_hat / (sqrt(v_hat) + eps)`.
    pub fn direction(&mut self, key: K, grad: &[f64]) -> Result<Vec<f64>> {
        let st = self
            .state
            .entry(key)
            .or_insert_with(|| Moments::zeros(grad.len()));
        if st.m.len() != grad.len() {
            return Err(Error::state(
                "optimizer state does not match parameter size; remap it after resizing",
            ));
        }
        st.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(st.t as i32);
        let c2 = 1.0 - b2.powi(st.t as i32);
        let mut dir = Vec::with_capacity(grad.len());
        for (i, &g) in grad.iter().enumerate() {
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            dir.push((st.m[i] / c1) / ((st.v[i] / c2).sqrt() + self.eps));
        }
        Ok(dir)
    }

    pub fn get(&self, key: &K) -> Option<&Moments> {
        self.state.get(key)
    }

    pub fn insert(&mut self, key: K, moments: Moments) {
        self.state.insert(key, moments);
    }

    /// Drops the state of `key`.
    pub fn discard(&mut self, key: &K) -> Option<Moments> {
        self.state.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.state.keys()
    }

    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    /// Total number of moment scalars held.
    pub fn buffer_len(&self) -> usize {
        self.state.values().map(|s| s.m.len() + s.v.len()).sum()
    }
}

/// `base_lr * step / warmup` during warm-up, then linear decay to zero at
/// `total_steps`.
pub fn linear_warmup_lr(
    step: usize,
    warmup_steps: usize,
    total_steps: usize,
    base_lr: f64,
) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::contract(format!(
            "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if step >= total_steps {
        return Ok(0.0);
    }
    let remaining = (total_steps - step) as f64;
    Ok(base_lr * remaining / (total_steps - warmup_steps) as f64)
}
