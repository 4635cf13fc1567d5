//! Local versus global magnitude pruning along the one-shot sparsity
//! sequence on the DeepLabV3 fixture.
//!
//!     cargo run --release --example weight_pruning

use segprune::init::init_model;
use segprune::prune::weight::{prune_weights, sparsity_report, sparsity_sequence, Scope};
use segprune::zoo;

fn main() -> segprune::Result<()> {
    let graph = init_model(zoo::deeplabv3_resnet50_os8(), 0);
    println!("{:>3} {:>9} {:>8} {:>12} {:>10}", "x", "S", "scope", "prunable nnz", "ratio");
    for x in 1..=6 {
        let s = sparsity_sequence(x)?;
        for scope in [Scope::Local, Scope::Global] {
            let masks = prune_weights(&graph, scope, s)?;
            let r = sparsity_report(&graph, &masks, Some(s))?;
            let ratio = r.compression_ratio.map_or("-".into(), |c| format!("{c:.1}x"));
            println!("{x:>3} {s:>9.6} {:>8} {:>12} {ratio:>10}", format!("{scope:?}"), r.prunable_nnz);
        }
    }

    // Global pruning concentrates sparsity where magnitudes are small.
    let masks = prune_weights(&graph, Scope::Global, sparsity_sequence(6)?)?;
    let r = sparsity_report(&graph, &masks, None)?;
    let mut layers = r.layers.clone();
    layers.sort_by(|a, b| b.sparsity.total_cmp(&a.sparsity));
    println!("most pruned layers at S = 0.984375 (global):");
    for l in layers.iter().take(5) {
        println!("  {:<40} {:.4}", l.name, l.sparsity);
    }
    Ok(())
}
