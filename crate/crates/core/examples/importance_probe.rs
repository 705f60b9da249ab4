//! Which layers need tuning? Scores every slot by
//! `|<grad_W f(W), Delta W>|` after a short single-adapter run, and stars
//! the layers WeightLoRA keeps.
//!
//! cargo run --release --example importance_probe -- [seed]

use weightlora::config::RunConfig;
use weightlora::diagnostics::importance_probe;
use weightlora::trainer::{run_method, Method};

fn main() -> weightlora::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = RunConfig::default();
    let task = config.build_task(seed)?;
    let slots = task.slots();

    let profile = importance_probe(&task.student, &task, &slots, &config.probe)?;
    let run = run_method(Method::WLora, &task.student, &slots, &config.adapter(), &task, &config.schedule_for(seed))?;
    let active = run.report.active_set.unwrap_or_default();

    let max = profile.scores.iter().map(|s| s.score).fold(0.0, f64::max);
    for s in &profile.scores {
        let bar = "#".repeat((40.0 * s.score / max).round() as usize);
        let star = if active.contains(&s.slot_id) { '*' } else { ' ' };
        println!("{star} {:<8} {:.3e} {bar}", format!("layer{}", s.layer), s.score);
    }
    println!(
        "probe top-{} {:?}, WeightLoRA {:?}, planted {:?}",
        config.schedule.k,
        profile.top_k(config.schedule.k),
        active,
        task.spec.planted
    );
    Ok(())
}
