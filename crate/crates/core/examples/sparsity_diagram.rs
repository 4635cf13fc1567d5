//! Writes sparsity diagrams (one pixel per weight) for local and global
//! pruning of tiny-segnet.
//!
//!     cargo run --example sparsity_diagram -- [out-dir]

use segprune::init::init_model;
use segprune::prune::weight::{prune_weights, sparsity_diagram, Scope};
use segprune::zoo;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/sparsity-example".into());
    std::fs::create_dir_all(&out)?;
    let graph = init_model(zoo::tiny_segnet(), 0);
    for scope in [Scope::Local, Scope::Global] {
        let masks = prune_weights(&graph, scope, 0.9375)?;
        let path = format!("{out}/{scope:?}.pgm").to_lowercase();
        let summary = sparsity_diagram(&graph, &masks, &path, 256)?;
        println!("{path}: {}x{}", summary.width, summary.height);
        for b in &summary.bands {
            println!("  rows {:>4}..{:<4} {:<24} sparsity {:.4}", b.first_row, b.first_row + b.rows, b.name, b.sparsity);
        }
    }
    Ok(())
}
