//! Gate vector and the Top-K projected gradient step on it.
//!
//! Each gate update is a plain gradient step followed by hard thresholding:
//! all but the `K` largest-magnitude entries are set to zero. After the
//! warm-up phase the gate vector is frozen and adapters behind a closed gate
//! are disconnected.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterState;
use crate::error::{Error, Result};

/// Which gates count as open once the vector is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRule {
    /// Open iff `omega_i != 0`.
    #[default]
    NonZero,
    /// Open iff `omega_i > 0`.
    Positive,
}

/// When the Top-K projection is applied during warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// After every gate update.
    #[default]
    EveryStep,
    /// Once, when the gates are frozen.
    AtFreeze,
}

/// Keeps the `k` largest-magnitude entries of `v` and zeroes the rest.
/// Ties are broken by the lowest index.
pub fn hard_threshold_topk(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let support = topk_support(v, k)?;
    let mut out = vec![0.0; v.len()];
    for i in support {
        out[i] = v[i];
    }
    Ok(out)
}

/// Indices of the `k` largest `|v_i|`, lowest index first among equals.
pub fn topk_support(v: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = v.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("K must be in 1..={n}, got {k}")));
    }
    if let Some(i) = v.iter().position(|x| x.is_nan()) {
        return Err(Error::contract(format!("NaN at index {i}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let by_mag = |a: &usize, b: &usize| {
        v[*b]
            .abs()
            .partial_cmp(&v[*a].abs())
            .expect("no NaN")
            .then(a.cmp(b))
    };
    if k < n {
        idx.select_nth_unstable_by(k - 1, by_mag);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Number of nonzero entries.
pub fn l0_norm(v: &[f64]) -> usize {
    v.iter().filter(|&&x| x != 0.0).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    omega: Vec<f64>,
    k: usize,
    frozen: bool,
    active_set: Option<Vec<usize>>,
    rule: GateRule,
}

impl GateVector {
    /// All-ones gates. `1 <= k <= n`.
    pub fn ones(n: usize, k: usize) -> Result<Self> {
        Self::from_values(vec![1.0; n], k)
    }

    pub fn from_values(omega: Vec<f64>, k: usize) -> Result<Self> {
        let n = omega.len();
        if n == 0 {
            return Err(Error::contract("gate vector must be non-empty"));
        }
        if k == 0 || k > n {
            return Err(Error::contract(format!("K must be in 1..={n}, got {k}")));
        }
        Ok(Self {
            omega,
            k,
            frozen: false,
            active_set: None,
            rule: GateRule::NonZero,
        })
    }

    pub fn with_rule(mut self, rule: GateRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.omega
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rule(&self) -> GateRule {
        self.rule
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn l0(&self) -> usize {
        l0_norm(&self.omega)
    }

    /// Indices of open gates; `None` until frozen.
    pub fn active_set(&self) -> Option<&[usize]> {
        self.active_set.as_deref()
    }

    /// Nonzero indices, frozen or not.
    pub fn support(&self) -> Vec<usize> {
        (0..self.omega.len())
            .filter(|&i| self.omega[i] != 0.0)
            .collect()
    }

    fn passes(&self, v: f64) -> bool {
        match self.rule {
            GateRule::NonZero => v != 0.0,
            GateRule::Positive => v > 0.0,
        }
    }

    /// Whether adapter `i` contributes to the forward pass. Before freezing
    /// every gate multiplies its branch, zero or not.
    pub fn is_open(&self, i: usize) -> bool {
        !self.frozen || self.passes(self.omega[i])
    }

    /// In-place Top-K projection.
    pub fn project(&mut self) -> Result<()> {
        self.omega = hard_threshold_topk(&self.omega, self.k)?;
        Ok(())
    }

    /// `omega <- H_K(omega - lr * grad)`, or without `H_K` under
    /// [`ProjectionMode::AtFreeze`].
    pub fn step(&mut self, grad: &[f64], lr: f64, mode: ProjectionMode) -> Result<()> {
        if self.frozen {
            return Err(Error::state("gate vector is frozen"));
        }
        if grad.len() != self.omega.len() {
            return Err(Error::dim("gate_step", &[self.omega.len()], &[grad.len()]));
        }
        for (w, g) in self.omega.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        if mode == ProjectionMode::EveryStep {
            self.project()?;
        }
        Ok(())
    }

    /// Plain gradient step on the open gates of a frozen vector, keeping the
    /// zero pattern. Used by the joint fine-tune mode.
    pub fn step_frozen_support(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if !self.frozen {
            return Err(Error::state("gate vector is not frozen"));
        }
        if grad.len() != self.omega.len() {
            return Err(Error::dim("gate_step", &[self.omega.len()], &[grad.len()]));
        }
        let open: BTreeSet<usize> = self.active_set.iter().flatten().copied().collect();
        for (i, (w, g)) in self.omega.iter_mut().zip(grad).enumerate() {
            if open.contains(&i) {
                let next = *w - lr * g;
                // an open gate never collapses to exactly zero mid-training
                *w = if next == 0.0 { f64::MIN_POSITIVE } else { next };
            }
        }
        Ok(())
    }

    /// Projects (so `||omega||_0 <= K` regardless of mode), freezes, and
    /// records the open gates as the active set.
    pub fn freeze(&mut self) -> Result<Vec<usize>> {
        if self.frozen {
            return Err(Error::state("gate vector already frozen"));
        }
        self.project()?;
        if self.rule == GateRule::Positive {
            for w in &mut self.omega {
                if *w < 0.0 {
                    *w = 0.0;
                }
            }
        }
        self.frozen = true;
        let set: Vec<usize> = (0..self.omega.len())
            .filter(|&i| self.passes(self.omega[i]))
            .collect();
        self.active_set = Some(set.clone());
        Ok(set)
    }
}

/// Same as [`GateVector::step`], consuming and returning the vector.
pub fn gate_step(mut gates: GateVector, grad: &[f64], lr: f64) -> Result<GateVector> {
    gates.step(grad, lr, ProjectionMode::EveryStep)?;
    Ok(gates)
}

/// Freezes the gates and deactivates every adapter behind a closed gate.
/// `adapters[i]` must correspond to gate `i`.
pub fn freeze_and_disconnect(
    gates: &mut GateVector,
    adapters: &mut [AdapterState],
) -> Result<Vec<usize>> {
    if adapters.len() != gates.len() {
        return Err(Error::dim("freeze_and_disconnect", &[gates.len()], &[adapters.len()]));
    }
    let set = gates.freeze()?;
    for (i, ad) in adapters.iter_mut().enumerate() {
        ad.active = gates.is_open(i);
    }
    Ok(set)
}

/// Uniformly random `K`-subset of `0..n`, sorted.
pub fn random_subset(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::contract(format!("K must be in 1..={n}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = sample(&mut rng, n, k).into_vec();
    set.sort_unstable();
    Ok(set)
}

/// Random-selection baseline: gates on a random `K`-subset set to 1, the
/// rest to 0, frozen immediately.
pub fn random_select_rlora(n: usize, k: usize, seed: u64) -> Result<GateVector> {
    let set = random_subset(n, k, seed)?;
    let mut omega = vec![0.0; n];
    for &i in &set {
        omega[i] = 1.0;
    }
    let mut gates = GateVector::from_values(omega, k)?;
    gates.freeze()?;
    Ok(gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterConfig;
    use proptest::prelude::*;

    /// Full-sort reference: stable sort by descending magnitude.
    fn sort_oracle(v: &[f64], k: usize) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap());
        let mut out = vec![0.0; v.len()];
        for &i in &idx[..k] {
            out[i] = v[i];
        }
        out
    }

    #[test]
    fn single_largest_magnitude() {
        assert_eq!(
            hard_threshold_topk(&[3.0, -5.0, 1.0], 1).unwrap(),
            vec![0.0, -5.0, 0.0]
        );
    }

    #[test]
    fn ties_prefer_low_index() {
        assert_eq!(
            hard_threshold_topk(&[2.0, 2.0, 2.0], 2).unwrap(),
            vec![2.0, 2.0, 0.0]
        );
    }

    #[test]
    fn k_out_of_range() {
        assert_eq!(hard_threshold_topk(&[1.0], 0).unwrap_err().kind(), "contract");
        assert_eq!(hard_threshold_topk(&[1.0], 2).unwrap_err().kind(), "contract");
    }

    #[test]
    fn matches_sort_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.random_range(1..30);
            let k = rng.random_range(1..=n);
            // coarse grid forces ties
            let v: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(-8i32..=8) as f64) * 0.5)
                .collect();
            assert_eq!(hard_threshold_topk(&v, k).unwrap(), sort_oracle(&v, k));
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let g = GateVector::from_values(vec![0.0, 0.7, 0.0, -0.2], 2).unwrap();
        let next = gate_step(g.clone(), &[0.0; 4], 0.5).unwrap();
        assert_eq!(next.values(), g.values());
    }

    #[test]
    fn two_gate_hand_step() {
        let g = GateVector::from_values(vec![1.0, 1.0], 1).unwrap();
        let next = gate_step(g, &[0.0, 10.0], 0.1).unwrap();
        assert_eq!(next.values(), &[1.0, 0.0]);
    }

    #[test]
    fn frozen_gates_reject_steps() {
        let mut g = GateVector::from_values(vec![0.0, 0.9, 0.0], 1).unwrap();
        g.freeze().unwrap();
        assert_eq!(gate_step(g, &[0.0; 3], 0.1).unwrap_err().kind(), "state");
    }

    #[test]
    fn freeze_disconnects_zero_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut adapters: Vec<_> = (0..3)
            .map(|i| AdapterState::new(i, 6, 6, &AdapterConfig::new(2), &mut rng).unwrap())
            .collect();
        let mut g = GateVector::from_values(vec![0.0, 0.9, 0.0], 1).unwrap();
        let set = freeze_and_disconnect(&mut g, &mut adapters).unwrap();
        assert_eq!(set, vec![1]);
        assert_eq!(
            adapters.iter().map(|a| a.active).collect::<Vec<_>>(),
            vec![false, true, false]
        );
        let total: usize = adapters.iter().map(|a| a.param_count()).sum();
        assert_eq!(total, 2 * (6 + 6));
        assert_eq!(
            freeze_and_disconnect(&mut g, &mut adapters).unwrap_err().kind(),
            "state"
        );
    }

    #[test]
    fn all_zero_gates_give_empty_set() {
        let mut g = GateVector::from_values(vec![0.0; 4], 2).unwrap();
        assert!(g.freeze().unwrap().is_empty());
    }

    #[test]
    fn positive_rule_closes_negative_gates() {
        let mut g = GateVector::from_values(vec![-2.0, 1.0, 0.5], 2)
            .unwrap()
            .with_rule(GateRule::Positive);
        assert_eq!(g.freeze().unwrap(), vec![1]);
        assert!(!g.is_open(0));
        let mut nz = GateVector::from_values(vec![-2.0, 1.0, 0.5], 2).unwrap();
        assert_eq!(nz.freeze().unwrap(), vec![0, 1]);
    }

    #[test]
    fn at_freeze_mode_projects_only_once() {
        let mut g = GateVector::ones(4, 2).unwrap();
        g.step(&[0.1, -0.3, 0.2, 0.0], 1.0, ProjectionMode::AtFreeze)
            .unwrap();
        assert_eq!(g.l0(), 4);
        assert_eq!(g.freeze().unwrap(), vec![1, 3]);
        assert_eq!(g.l0(), 2);
    }

    #[test]
    fn rlora_full_set_and_determinism() {
        for seed in 0..5 {
            let g = random_select_rlora(6, 6, seed).unwrap();
            assert_eq!(g.active_set().unwrap(), &[0, 1, 2, 3, 4, 5]);
        }
        assert_eq!(
            random_select_rlora(10, 3, 42).unwrap(),
            random_select_rlora(10, 3, 42).unwrap()
        );
    }

    #[test]
    fn rlora_selection_frequency() {
        let draws = 10_000u64;
        let mut counts = [0usize; 10];
        for seed in 0..draws {
            for i in random_subset(10, 3, seed).unwrap() {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / draws as f64;
            assert!((f - 0.3).abs() <= 0.015, "index {i}: {f}");
        }
    }

    /// Brute force over all K-supports: the best support maximizes the
    /// retained squared mass.
    fn enumeration_oracle(v: &[f64], k: usize) -> f64 {
        let n = v.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let dist: f64 = (0..n)
                .filter(|&i| mask & (1 << i) == 0)
                .map(|i| v[i] * v[i])
                .sum();
            best = best.min(dist);
        }
        best
    }

    proptest! {
        #[test]
        fn projection_is_euclidean_optimal(
            v in prop::collection::vec(-10.0f64..10.0, 1..=8),
            kseed in 0usize..8,
        ) {
            let k = kseed % v.len() + 1;
            let p = hard_threshold_topk(&v, k).unwrap();
            let dist: f64 = v.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
            let best = enumeration_oracle(&v, k);
            prop_assert!((dist - best).abs() <= 1e-12 * (1.0 + best));
        }

        #[test]
        fn projection_is_idempotent(
            v in prop::collection::vec(-10.0f64..10.0, 1..20),
            kseed in 0usize..20,
        ) {
            let k = kseed % v.len() + 1;
            let once = hard_threshold_topk(&v, k).unwrap();
            let twice = hard_threshold_topk(&once, k).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(l0_norm(&once) <= k);
        }

        #[test]
        fn support_invariant_under_positive_scaling(
            v in prop::collection::vec(-10.0f64..10.0, 1..20),
            kseed in 0usize..20,
            c in 0.01f64..100.0,
        ) {
            let k = kseed % v.len() + 1;
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(topk_support(&v, k).unwrap(), topk_support(&scaled, k).unwrap());
        }

        #[test]
        fn step_output_is_k_sparse(
            w in prop::collection::vec(-3.0f64..3.0, 1..15),
            kseed in 0usize..15,
            lr in 0.0f64..2.0,
        ) {
            let k = kseed % w.len() + 1;
            let grad: Vec<f64> = w.iter().map(|x| x.sin()).collect();
            let g = gate_step(GateVector::from_values(w, k).unwrap(), &grad, lr).unwrap();
            prop_assert!(g.l0() <= k);
        }
    }
}
