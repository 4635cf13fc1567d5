//! DICE under pixel-removal noise for a trained tiny-segnet and its
//! filter-pruned, fine-tuned counterpart.
//!
//!     cargo run --release --example noise_robustness

use segprune::cli::noise_sweep;
use segprune::init::init_model;
use segprune::metrics::{generate, SynthKind, SynthSpec};
use segprune::pipeline::{prune_and_finetune, PruneMethod};
use segprune::prune::filter::MergeRule;
use segprune::train::{one_cycle_for, train, TrainConfig};
use segprune::zoo;

fn main() -> segprune::Result<()> {
    let data = generate(&SynthSpec::new(SynthKind::Blob, 240, 64, 0))?;
    let (val, train_set) = data.split(40);
    let cfg = TrainConfig::default();
    let base = train(init_model(zoo::tiny_segnet(), 0), &train_set, None, &cfg, one_cycle_for(&cfg, train_set.len(), 0.05), None)?;

    let ft = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let method = PruneMethod::Filters { fraction: 0.875, norm: 1.0, merge: MergeRule::Union };
    let lean = prune_and_finetune(base.graph.clone(), method, &train_set, None, &ft, one_cycle_for(&ft, train_set.len(), 0.01))
        .map_err(|(e, _)| e)?
        .graph;

    let ratios = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    println!("{:>6} {:>10} {:>10}", "ratio", "dense", "pruned");
    let dense = noise_sweep(&base.graph, None, &val, &ratios, 7)?;
    let pruned = noise_sweep(&lean, None, &val, &ratios, 7)?;
    for (a, b) in dense.points.iter().zip(&pruned.points) {
        println!("{:>6.2} {:>10.4} {:>10.4}", a.ratio, a.dice, b.dice);
    }
    Ok(())
}
