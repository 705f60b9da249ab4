//! Command-line front end: `train`, `probe`, `count`, `ablate`, `expand-check`.
//!
//! Every command reads an optional JSON config, applies flag overrides,
//! writes its reports under `<out>/<run-id>/` and returns a process exit
//! code: 0 on success, 2 for invalid configuration, 3 for a degenerate run,
//! 1 for anything else. Failures print exactly one `error: <kind>: ...` line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::adapters::{expand_rank, expansion_residual, AdapterConfig, AdapterState, ExpansionScheme};
use crate::catalog::ShapeCatalog;
use crate::config::RunConfig;
use crate::diagnostics::{count_catalog, importance_probe};
use crate::error::{Error, Result};
use crate::stats::sign_test;
use crate::trainer::{run_method, Method, RankPolicy, RunReport};

#[derive(Debug, Parser)]
#[command(name = "weightlora", version, about = "Gated LoRA adapter selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one method on a planted task.
    Train(Flags),
    /// Score every slot with single-adapter runs.
    Probe(Flags),
    /// Count trainable adapter parameters for a catalog model.
    Count(Flags),
    /// Paired wlora vs rlora runs over several seeds.
    Ablate(Flags),
    /// Check value preservation of rank expansion on random adapters.
    ExpandCheck(Flags),
}

#[derive(Debug, Args)]
struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $WEIGHTLORA_OUT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds for `ablate`, or a count `n` meaning 0..n.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    k: Option<i64>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    post_t_batch_size: Option<usize>,
    /// `gaussian` or `qr`.
    #[arg(long)]
    expansion: Option<String>,
    #[arg(long)]
    r_new: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_omega: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    gate_delay: Option<usize>,
    #[arg(long)]
    rank: Option<i64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Probe epochs per slot.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    catalog: Option<String>,
    #[arg(long)]
    grouping: Option<String>,
    /// Comma-separated active slot ids for `count`.
    #[arg(long)]
    slots: Option<String>,
    /// Random adapters per scheme for `expand-check`.
    #[arg(long)]
    trials: Option<usize>,
}

fn non_negative(key: &str, v: i64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::config(key, format!("{key} must be ≥ 0")))
}

fn parse_list(key: &str, text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(key, format!("`{s}` is not a non-negative integer")))
        })
        .collect()
}

impl Flags {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| match e {
                Error::Io(io) => Error::config("config", format!("{}: {io}", path.display())),
                other => other,
            })?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out {
            c.out_dir = Some(v.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.seeds {
            c.seeds = match v.parse::<u64>() {
                Ok(n) if !v.contains(',') => (0..n).collect(),
                _ => parse_list("seeds", v)?,
            };
        }
        if let Some(v) = &self.method {
            c.method = v.parse()?;
        }
        if let Some(v) = &self.task {
            c.task = v.clone();
        }
        let s = &mut c.schedule;
        if let Some(v) = self.k {
            s.k = non_negative("k", v)?;
        }
        if let Some(v) = self.t {
            s.t = v;
        }
        if let Some(v) = self.total_steps {
            s.total_steps = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
            if self.post_t_batch_size.is_none() && s.post_t_batch_size < v {
                s.post_t_batch_size = v;
            }
        }
        if let Some(v) = self.post_t_batch_size {
            s.post_t_batch_size = v;
        }
        if let Some(v) = &self.expansion {
            s.expansion = match v.as_str() {
                "none" => None,
                other => Some(other.parse::<ExpansionScheme>()?),
            };
            if s.expansion.is_some() && self.method.is_none() && self.config.is_none() {
                c.method = Method::WLoraPlus;
            }
        }
        let s = &mut c.schedule;
        if let Some(v) = self.r_new {
            s.rank_policy = RankPolicy::Fixed(v);
        }
        if let Some(v) = self.lr {
            s.lr = v;
        }
        if let Some(v) = self.lr_omega {
            s.lr_omega = v;
        }
        if let Some(v) = self.warmup_steps {
            s.warmup_steps = v;
        }
        if let Some(v) = self.gate_delay {
            s.gate_delay = Some(v);
        }
        if let Some(v) = self.rank {
            c.rank = non_negative("rank", v)?;
            c.probe.rank = c.rank;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
            c.probe.alpha = v;
        }
        if let Some(v) = self.dropout {
            c.dropout = v;
            c.probe.dropout = v;
        }
        if let Some(v) = self.epochs {
            c.probe.epochs = v;
        }
        if let Some(v) = &self.catalog {
            c.catalog = v.clone();
        }
        if let Some(v) = &self.grouping {
            c.grouping = v.clone();
        }
        if let Some(v) = &self.slots {
            c.slots = Some(parse_list("slots", v)?.into_iter().map(|x| x as usize).collect());
        }
        if let Some(v) = self.trials {
            c.expand_trials = v;
        }
        Ok(c)
    }
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Degenerate(_) => 3,
        _ => 1,
    }
}

/// One-line rendering: `error: <kind>: <message>`.
pub fn error_line(err: &Error) -> String {
    let detail = match err {
        Error::Config { key, message } => format!("{key}: {message}"),
        Error::Degenerate(m) | Error::Contract(m) | Error::State(m) => m.clone(),
        other => other.to_string(),
    };
    let flat: String = detail
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    format!("error: {}: {}", err.kind(), flat)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            let _ = writeln!(err, "error: config: args: {first}");
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Train(f) => f.load().and_then(|c| cmd_train(&c, f.json, out)),
        Command::Probe(f) => f.load().and_then(|c| cmd_probe(&c, f.json, out)),
        Command::Count(f) => f.load().and_then(|c| cmd_count(&c, f.k, f.json, out)),
        Command::Ablate(f) => f.load().and_then(|c| cmd_ablate(&c, f.json, out)),
        Command::ExpandCheck(f) => f.load().and_then(|c| cmd_expand_check(&c, f.json, out)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            exit_code(&e)
        }
    }
}

fn run_dir(config: &RunConfig, command: &str, seed: u64) -> Result<PathBuf> {
    let dir = config.resolved_out_dir().join(config.run_id(command, seed));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn emit(out: &mut dyn Write, json_mode: bool, summary: &Value, human: &str) -> Result<()> {
    if json_mode {
        writeln!(out, "{}", serde_json::to_string(summary)?)?;
    } else {
        writeln!(out, "{human}")?;
    }
    Ok(())
}

fn report_summary(report: &RunReport) -> Value {
    json!({
        "method": report.method,
        "seed": report.seed,
        "n_adapters": report.n_adapters,
        "initial_val_loss": report.initial_val_loss,
        "final_train_loss": report.final_train_loss,
        "final_val_loss": report.final_val_loss,
        "final_omega": report.final_omega,
        "active_set": report.active_set,
        "params_before_t": report.params_before_t,
        "params_after_t": report.params_after_t,
        "expansion": report.expansion,
        "expansion_residual": report.expansion.as_ref().map(|e| e.max_residual),
    })
}

fn cmd_train(config: &RunConfig, json_mode: bool, out: &mut dyn Write) -> Result<i32> {
    config.validate()?;
    let seed = config.seed;
    let task = config.build_task(seed)?;
    let schedule = config.schedule_for(seed);
    let outcome = run_method(
        config.method,
        &task.student,
        &task.slots(),
        &config.adapter(),
        &task,
        &schedule,
    )?;
    let dir = run_dir(config, "train", seed)?;
    let run_id = config.run_id("train", seed);
    outcome
        .report
        .write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?)?;
    let identified = outcome
        .report
        .active_set
        .as_ref()
        .filter(|_| config.method != Method::RLora)
        .map(|a| *a == task.spec.planted);
    let summary = json!({
        "run_id": run_id,
        "command": "train",
        "output_dir": dir,
        "config": config,
        "task": { "descriptor": config.task, "planted": task.spec.planted },
        "identified": identified,
        "report": report_summary(&outcome.report),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    let r = &outcome.report;
    let mut human = format!(
        "{} seed {seed}: val loss {:.4e} -> {:.4e}, trainable {} -> {}",
        r.method, r.initial_val_loss, r.final_val_loss, r.params_before_t, r.params_after_t
    );
    if let Some(a) = &r.active_set {
        human.push_str(&format!(", active {a:?} (planted {:?})", task.spec.planted));
    }
    if let Some(e) = &r.expansion {
        human.push_str(&format!(", expansion residual {:.2e}", e.max_residual));
    }
    human.push_str(&format!("\nwrote {}", dir.display()));
    emit(out, json_mode, &summary, &human)?;
    Ok(0)
}

fn cmd_probe(config: &RunConfig, json_mode: bool, out: &mut dyn Write) -> Result<i32> {
    config.validate()?;
    let seed = config.seed;
    let task = config.build_task(seed)?;
    let slots = task.slots();
    let profile = importance_probe(&task.student, &task, &slots, &config.probe)?;
    let k = config.schedule.k;
    let top = profile.top_k(k);
    let starred = run_method(
        Method::WLora,
        &task.student,
        &slots,
        &config.adapter(),
        &task,
        &config.schedule_for(seed),
    )?
    .report
    .active_set
    .unwrap_or_default();
    let overlap = top.iter().filter(|i| starred.contains(i)).count();
    let dir = run_dir(config, "probe", seed)?;
    profile.write_csv(fs::File::create(dir.join("profile.csv"))?)?;
    let summary = json!({
        "run_id": config.run_id("probe", seed),
        "command": "probe",
        "output_dir": dir,
        "config": config,
        "task": { "descriptor": config.task, "planted": task.spec.planted },
        "loss_convention": profile.loss_convention,
        "top_k": top,
        "starred": starred,
        "overlap": overlap,
        "scores": profile.scores,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    let mut human = String::new();
    for s in &profile.scores {
        let star = if starred.contains(&s.slot_id) { "*" } else { " " };
        human.push_str(&format!("{star} slot {:2} {:>10} {:.4e}\n", s.slot_id, s.projection_type, s.score));
    }
    human.push_str(&format!(
        "top-{k} {top:?}, starred {starred:?}, planted {:?}\nwrote {}",
        task.spec.planted,
        dir.display()
    ));
    emit(out, json_mode, &summary, &human)?;
    Ok(0)
}

fn cmd_count(config: &RunConfig, k_flag: Option<i64>, json_mode: bool, out: &mut dyn Write) -> Result<i32> {
    let catalog = ShapeCatalog::builtin();
    let model = catalog.model(&config.catalog)?;
    let n_slots = model.slots(&config.grouping)?.len();
    let active: Option<Vec<usize>> = match (&config.slots, k_flag) {
        (Some(s), _) => Some(s.clone()),
        (None, Some(k)) => {
            let k = non_negative("k", k)?;
            if k == 0 {
                return Err(Error::config("k", "k must be ≥ 1"));
            }
            if k > n_slots {
                return Err(Error::config("k", format!("k = {k} exceeds {n_slots} slots")));
            }
            Some((0..k).collect())
        }
        (None, None) => None,
    };
    let count = count_catalog(model, &config.grouping, config.rank, active.as_deref())?;
    let n_active = active.as_ref().map_or(n_slots, Vec::len);
    let summary = json!({
        "command": "count",
        "catalog": config.catalog,
        "grouping": config.grouping,
        "grouping_inferred": model.grouping(&config.grouping)?.inferred,
        "rank": config.rank,
        "n_active": n_active,
        "count": count.count,
        "total_params": count.total_params,
        "percent": count.percent,
        "percent_exact": count.percent_exact,
        "percent_display": count.percent_display,
        "display_rounded": count.display_rounded,
    });
    emit(out, json_mode, &summary, &count.display())?;
    Ok(0)
}

fn cmd_ablate(config: &RunConfig, json_mode: bool, out: &mut dyn Write) -> Result<i32> {
    config.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::config("seeds", "ablate needs at least one seed"));
    }
    let dir = run_dir(config, "ablate", config.seed)?;
    let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
    w.write_record([
        "seed",
        "planted",
        "wlora_active",
        "rlora_active",
        "wlora_final_loss",
        "rlora_final_loss",
        "difference",
    ])?;
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
    let (mut wl, mut rl) = (Vec::new(), Vec::new());
    let mut identified = 0;
    for &seed in &config.seeds {
        let task = config.build_task(seed)?;
        let schedule = config.schedule_for(seed);
        let adapter = config.adapter();
        let slots = task.slots();
        let w_run = run_method(Method::WLora, &task.student, &slots, &adapter, &task, &schedule)?.report;
        let r_run = run_method(Method::RLora, &task.student, &slots, &adapter, &task, &schedule)?.report;
        let wa = w_run.active_set.clone().unwrap_or_default();
        let ra = r_run.active_set.clone().unwrap_or_default();
        identified += usize::from(wa == task.spec.planted);
        w.write_record([
            seed.to_string(),
            join(&task.spec.planted),
            join(&wa),
            join(&ra),
            w_run.final_val_loss.to_string(),
            r_run.final_val_loss.to_string(),
            (w_run.final_val_loss - r_run.final_val_loss).to_string(),
        ])?;
        wl.push(w_run.final_val_loss);
        rl.push(r_run.final_val_loss);
    }
    w.flush()?;
    let test = sign_test(&wl, &rl);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = json!({
        "run_id": config.run_id("ablate", config.seed),
        "command": "ablate",
        "output_dir": dir,
        "config": config,
        "n_seeds": config.seeds.len(),
        "wlora_mean_final_loss": mean(&wl),
        "rlora_mean_final_loss": mean(&rl),
        "wlora_identified": identified,
        "sign_test": test,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    let human = format!(
        "{} seeds: wlora mean {:.4e}, rlora mean {:.4e}; wlora better in {}, worse in {}, tied {} (sign test p = {:.3e}); S* recovered in {identified}\nwrote {}",
        config.seeds.len(),
        mean(&wl),
        mean(&rl),
        test.wins,
        test.losses,
        test.ties,
        test.p_value,
        dir.display()
    );
    emit(out, json_mode, &summary, &human)?;
    Ok(0)
}

/// Largest `|q_i . n_j|` between the first `r` columns of `a` and the rest.
fn cross_orthogonality(a: &crate::Tensor, r: usize) -> f64 {
    let (d, cols) = (a.rows(), a.cols());
    let mut worst: f64 = 0.0;
    for i in 0..r {
        for j in r..cols {
            let dot: f64 = (0..d).map(|row| a.at(row, i) * a.at(row, j)).sum();
            worst = worst.max(dot.abs());
        }
    }
    worst
}

fn cmd_expand_check(config: &RunConfig, json_mode: bool, out: &mut dyn Write) -> Result<i32> {
    const TOL: f64 = 1e-10;
    if config.expand_trials == 0 {
        return Err(Error::config("trials", "trials must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut results = serde_json::Map::new();
    let mut pass = true;
    let mut human = Vec::new();
    for scheme in [ExpansionScheme::Gaussian, ExpansionScheme::Qr] {
        let (mut max_res, mut max_orth) = (0.0f64, 0.0f64);
        for _ in 0..config.expand_trials {
            let d = rng.random_range(4..=24);
            let k = rng.random_range(4..=24);
            let r = rng.random_range(1..d.min(k));
            let r_new = rng.random_range(r + 1..=d.min(k));
            let mut ad = AdapterState::new(0, d, k, &AdapterConfig::new(r), &mut rng)?;
            *ad.a_mut() = crate::Tensor::randn(&[d, r], 1.0, &mut rng);
            *ad.b_mut() = crate::Tensor::randn(&[r, k], 1.0, &mut rng);
            let ex = expand_rank(&ad, r_new, scheme, 1.0, Default::default(), &mut rng)?;
            max_res = max_res.max(expansion_residual(&ad, &ex));
            if scheme == ExpansionScheme::Qr {
                max_orth = max_orth.max(cross_orthogonality(ex.a(), r));
            }
        }
        let ok = max_res <= TOL && max_orth <= TOL;
        pass &= ok;
        let name = format!("{scheme:?}").to_lowercase();
        human.push(format!(
            "{name}: {} adapters, max residual {max_res:.3e}{}, {}",
            config.expand_trials,
            if scheme == ExpansionScheme::Qr { format!(", max |Q^T N| {max_orth:.3e}") } else { String::new() },
            if ok { "pass" } else { "FAIL" }
        ));
        results.insert(
            name,
            json!({ "max_residual": max_res, "max_cross_orthogonality": max_orth, "pass": ok }),
        );
    }
    let summary = json!({
        "command": "expand-check",
        "trials": config.expand_trials,
        "tolerance": TOL,
        "schemes": results,
        "pass": pass,
    });
    emit(out, json_mode, &summary, &human.join("\n"))?;
    if pass {
        Ok(0)
    } else {
        Err(Error::Degenerate(format!("expansion residual above {TOL:e}")))
    }
}
