//! Learned gates against a random choice of the same number of adapters,
//! paired by seed.
//!
//! cargo run --release --example rlora_ablation -- [n_seeds]

use weightlora::config::RunConfig;
use weightlora::stats::sign_test;
use weightlora::trainer::{run_method, Method};

fn main() -> weightlora::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let config = RunConfig::default();
    let (mut wlora, mut rlora) = (Vec::new(), Vec::new());

    println!("seed  planted  wlora         rlora         wlora loss  rlora loss");
    for seed in 0..n {
        let task = config.build_task(seed)?;
        let schedule = config.schedule_for(seed);
        let slots = task.slots();
        let w = run_method(Method::WLora, &task.student, &slots, &config.adapter(), &task, &schedule)?.report;
        let r = run_method(Method::RLora, &task.student, &slots, &config.adapter(), &task, &schedule)?.report;
        println!(
            "{seed:>4}  {:<7}  {:<12}  {:<12}  {:.3e}   {:.3e}",
            format!("{:?}", task.spec.planted),
            format!("{:?}", w.active_set.unwrap_or_default()),
            format!("{:?}", r.active_set.unwrap_or_default()),
            w.final_val_loss,
            r.final_val_loss
        );
        wlora.push(w.final_val_loss);
        rlora.push(r.final_val_loss);
    }
    let t = sign_test(&wlora, &rlora);
    println!(
        "wlora lower in {} of {} seeds ({} ties), one-sided sign test p = {:.3e}",
        t.wins,
        t.wins + t.losses,
        t.ties,
        t.p_value
    );
    Ok(())
}
