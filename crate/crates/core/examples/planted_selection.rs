//! WeightLoRA on a planted task: six layers, two of which carry the
//! teacher's change. Prints the gate vector as it sparsifies and the
//! selected layers against the planted ones.
//!
//! cargo run --release --example planted_selection -- [seed]

use weightlora::config::RunConfig;
use weightlora::trainer::{run_method, Method};

fn main() -> weightlora::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = RunConfig { seed, ..RunConfig::default() };
    let task = config.build_task(seed)?;
    let schedule = config.schedule_for(seed);
    println!(
        "task {} seed {seed}: planted layers {:?}, K = {}, T = {}, first gate update at step {}",
        config.task,
        task.spec.planted,
        schedule.k,
        schedule.t,
        schedule.gate_delay().max(1)
    );

    let run = run_method(Method::WLora, &task.student, &task.slots(), &config.adapter(), &task, &schedule)?;
    let report = &run.report;
    for s in &report.steps {
        if s.step == 1 || s.step % 50 == 0 || s.step == schedule.gate_delay() {
            println!(
                "step {:>3}  loss {:.4e}  l0 {}  support {:?}  trainable {}",
                s.step, s.loss, s.omega_l0, s.omega_support, s.trainable_params
            );
        }
    }
    let omega: Vec<String> = report
        .final_omega
        .iter()
        .flatten()
        .map(|w| format!("{w:.3}"))
        .collect();
    println!("final omega [{}]", omega.join(", "));
    println!(
        "active set {:?} vs planted {:?}; val loss {:.4e} -> {:.4e}",
        report.active_set.as_deref().unwrap_or_default(),
        task.spec.planted,
        report.initial_val_loss,
        report.final_val_loss
    );
    Ok(())
}
