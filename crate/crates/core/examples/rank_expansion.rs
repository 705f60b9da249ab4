//! Rank expansion of a trained adapter. Both schemes leave the product
//! `A B` unchanged; the QR scheme also makes the new columns orthogonal to
//! the old ones. The second half runs WeightLoRA+ so the survivors take
//! over the memory of the disconnected adapters.
//!
//! cargo run --release --example rank_expansion

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use weightlora::adapters::{expand_rank, expansion_residual, AdapterConfig, AdapterState, ExpansionScheme, ScaleConvention};
use weightlora::config::RunConfig;
use weightlora::trainer::{run_method, Method};
use weightlora::Tensor;

fn main() -> weightlora::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, k, r, r_new) = (16, 12, 2, 6);
    let mut adapter = AdapterState::new(0, d, k, &AdapterConfig::new(r), &mut rng)?;
    *adapter.b_mut() = Tensor::randn(&[r, k], 0.1, &mut rng);

    for scheme in [ExpansionScheme::Gaussian, ExpansionScheme::Qr] {
        let wide = expand_rank(&adapter, r_new, scheme, 0.02, ScaleConvention::Rescale, &mut rng)?;
        println!(
            "{scheme:?}: rank {r} -> {}, residual {:.2e}, scale {} -> {}",
            wide.rank(),
            expansion_residual(&adapter, &wide),
            adapter.scale(),
            wide.scale()
        );
    }

    let config = RunConfig::default();
    let task = config.build_task(3)?;
    for scheme in [ExpansionScheme::Gaussian, ExpansionScheme::Qr] {
        let mut schedule = config.schedule_for(3);
        schedule.expansion = Some(scheme);
        let run = run_method(Method::WLoraPlus, &task.student, &task.slots(), &config.adapter(), &task, &schedule)?;
        let r = &run.report;
        let e = r.expansion.as_ref().expect("wlora+ expands");
        println!(
            "wlora+ {scheme:?}: active {:?}, rank {} -> {}, trainable {} -> {}, val loss {:.4e}",
            r.active_set.as_deref().unwrap_or_default(),
            e.r_before,
            e.r_new,
            r.params_before_t,
            r.params_after_t,
            r.final_val_loss
        );
    }
    let plain = run_method(Method::WLora, &task.student, &task.slots(), &config.adapter(), &task, &config.schedule_for(3))?;
    println!(
        "wlora (no expansion): trainable {} -> {}, val loss {:.4e}",
        plain.report.params_before_t, plain.report.params_after_t, plain.report.final_val_loss
    );
    Ok(())
}
