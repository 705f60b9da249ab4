//! Run configuration shared by every command, loadable from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, DEFAULT_DROPOUT};
use crate::diagnostics::{MemoryModel, ProbeConfig};
use crate::error::{Error, Result};
use crate::tasks::{make_planted_task, PlantedSpec, SyntheticTask, TaskDescriptor};
use crate::trainer::{Method, TrainSchedule};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "WEIGHTLORA_OUT";

/// Output directory used when neither the config nor the environment sets one.
pub const DEFAULT_OUT_DIR: &str = "runs";

/// Knobs of the planted task beyond its descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskOptions {
    pub strength: f64,
    pub gain: f64,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for TaskOptions {
    fn default() -> Self {
        let spec = PlantedSpec::new(1, vec![0], 1, 0);
        Self {
            strength: spec.strength,
            gain: spec.gain,
            n_train: spec.n_train,
            n_val: spec.n_val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    /// `planted:n<layers>k<|S*|>[r<rank>][w<width>]` or `planted-cls:...`.
    pub task: String,
    pub task_options: TaskOptions,
    pub seed: u64,
    /// Seeds for `ablate`.
    pub seeds: Vec<u64>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub schedule: TrainSchedule,
    pub probe: ProbeConfig,
    /// Catalog model for `count`.
    pub catalog: String,
    pub grouping: String,
    /// Active slot ids for `count`; `None` counts all slots.
    pub slots: Option<Vec<usize>>,
    pub memory: MemoryModel,
    /// Random adapters per scheme for `expand-check`.
    pub expand_trials: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::WLora,
            task: "planted:n6k2".to_string(),
            task_options: TaskOptions::default(),
            seed: 0,
            seeds: (0..20).collect(),
            rank: 2,
            alpha: 4.0,
            dropout: DEFAULT_DROPOUT,
            schedule: TrainSchedule {
                k: 2,
                ..TrainSchedule::default()
            },
            probe: ProbeConfig::default(),
            catalog: "deberta-v3-base".to_string(),
            grouping: "self_attention".to_string(),
            slots: None,
            memory: MemoryModel::for_model(184_000_000),
            expand_trials: 100,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde names the offending field in backticks
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("config")
                .to_string();
            Error::config(key, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            alpha: self.alpha,
            dropout_p: self.dropout,
            ..AdapterConfig::new(self.rank)
        }
    }

    /// The schedule with the run seed applied.
    pub fn schedule_for(&self, seed: u64) -> TrainSchedule {
        TrainSchedule {
            seed,
            ..self.schedule.clone()
        }
    }

    pub fn descriptor(&self) -> Result<TaskDescriptor> {
        self.task.parse()
    }

    pub fn planted_spec(&self, seed: u64) -> Result<PlantedSpec> {
        let mut spec = self.descriptor()?.to_spec(seed);
        let o = &self.task_options;
        spec.strength = o.strength;
        spec.gain = o.gain;
        spec.n_train = o.n_train;
        spec.n_val = o.n_val;
        Ok(spec)
    }

    pub fn build_task(&self, seed: u64) -> Result<SyntheticTask> {
        let spec = self.planted_spec(seed)?;
        make_planted_task(&spec).map_err(|e| match e {
            Error::Contract(msg) => Error::config("task", msg),
            other => other,
        })
    }

    /// Checks everything a training command needs.
    pub fn validate(&self) -> Result<()> {
        self.adapter().validate()?;
        let d = self.descriptor()?;
        self.schedule.validate(d.n_layers)?;
        if self.method == Method::WLoraPlus && self.schedule.expansion.is_none() {
            return Err(Error::config("expansion", "wlora+ needs expansion gaussian or qr"));
        }
        let o = &self.task_options;
        if !(o.strength.is_finite() && o.gain.is_finite() && o.gain > 0.0) {
            return Err(Error::config("task_options", "strength and gain must be finite, gain > 0"));
        }
        if o.n_train == 0 || o.n_val == 0 {
            return Err(Error::config("task_options", "n_train and n_val must be ≥ 1"));
        }
        Ok(())
    }

    /// Hex digest of the command name, the config (output directory
    /// excluded) and `seed`.
    pub fn run_id(&self, command: &str, seed: u64) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::new()
            .chain_update(command.as_bytes())
            .chain_update([0u8])
            .chain_update(canonical.as_bytes())
            .chain_update(seed.to_le_bytes())
            .finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Config value, then `WEIGHTLORA_OUT`, then `runs`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_is_lossless() {
        let mut c = RunConfig {
            slots: Some(vec![1, 4]),
            out_dir: Some(PathBuf::from("/tmp/x")),
            ..RunConfig::default()
        };
        c.schedule.expansion = Some(crate::adapters::ExpansionScheme::Qr);
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = RunConfig::from_json(r#"{"rank": 2, "bogus": 1}"#).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "bogus"),
            e => panic!("{e}"),
        }
        let err = RunConfig::from_json(r#"{"schedule": {"kk": 1}}"#).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_json(r#"{"rank": 8, "schedule": {"k": 5}}"#).unwrap();
        assert_eq!(c.rank, 8);
        assert_eq!(c.schedule.k, 5);
        assert_eq!(c.schedule.t, TrainSchedule::default().t);
    }

    #[test]
    fn run_id_depends_on_config_and_seed_only() {
        let c = RunConfig::default();
        assert_eq!(c.run_id("train", 1), c.run_id("train", 1));
        assert_ne!(c.run_id("train", 1), c.run_id("train", 2));
        let mut moved = c.clone();
        moved.out_dir = Some(PathBuf::from("elsewhere"));
        assert_eq!(moved.run_id("train", 1), c.run_id("train", 1));
        let mut other = c.clone();
        other.rank = 3;
        assert_ne!(other.run_id("train", 1), c.run_id("train", 1));
        assert_eq!(c.run_id("train", 0).len(), 16);
        assert_ne!(c.run_id("probe", 0), c.run_id("train", 0));
    }

    #[test]
    fn validation_names_keys() {
        let mut c = RunConfig::default();
        c.schedule.k = 0;
        match c.validate().unwrap_err() {
            Error::Config { key, message } => {
                assert_eq!(key, "k");
                assert_eq!(message, "k must be ≥ 1");
            }
            e => panic!("{e}"),
        }
        let c = RunConfig {
            task: "planted:n6".into(),
            ..RunConfig::default()
        };
        assert_eq!(c.validate().unwrap_err().kind(), "config");
    }
}
