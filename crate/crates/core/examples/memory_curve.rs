//! Analytic training memory against the number of active adapters on
//! DeBERTa-v3-base, and how many adapters fit a budget.
//!
//! cargo run --example memory_curve -- [budget_gib]

use weightlora::catalog::ShapeCatalog;
use weightlora::diagnostics::{max_active_within, memory_curve, write_memory_csv, MemoryModel};

fn main() -> weightlora::Result<()> {
    let budget_gib: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let catalog = ShapeCatalog::builtin();
    let model = catalog.model("deberta-v3-base")?;
    let dims: Vec<(usize, usize)> = model.slots("self_attention")?.iter().map(|s| (s.d, s.k)).collect();
    let mm = MemoryModel::for_model(model.total_params);

    let curve = memory_curve(&dims, 8, &mm)?;
    write_memory_csv(&curve, std::io::stdout())?;

    let budget = budget_gib * (1u64 << 30) as f64;
    match max_active_within(&dims, 8, &mm, budget)? {
        Some(n) => eprintln!("{budget_gib} GiB fits {n} active rank-8 adapters"),
        None => eprintln!("{budget_gib} GiB does not hold the frozen base model"),
    }
    Ok(())
}
