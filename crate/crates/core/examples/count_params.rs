//! Trainable adapter parameters on DeBERTa-v3-base at rank 8, for a few
//! active-set sizes and both slot groupings.
//!
//! cargo run --example count_params

use weightlora::catalog::ShapeCatalog;
use weightlora::diagnostics::count_catalog;

fn main() -> weightlora::Result<()> {
    let catalog = ShapeCatalog::builtin();
    let model = catalog.model("deberta-v3-base")?;
    let r = 8;

    for grouping in ["self_attention", "all_attention"] {
        let g = model.grouping(grouping)?;
        let n = model.slots(grouping)?.len();
        let note = if g.inferred { " (inferred grouping)" } else { "" };
        println!("{} / {grouping}: {n} slots{note}", model.model_name);
        for k in [1, 5, 10, n] {
            let active: Vec<usize> = (0..k).collect();
            let c = count_catalog(model, grouping, r, Some(&active))?;
            let (num, den) = c.percent_exact.expect("catalog has a total");
            let flag = if c.display_rounded { "  (display rounded)" } else { "" };
            println!("  K = {k:>2}: {:<18} exact {num}/{den} %{flag}", c.display());
        }
    }
    Ok(())
}
