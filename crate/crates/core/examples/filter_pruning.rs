//! Structured filter pruning: plans kept channels per dependency group,
//! rewrites tiny-segnet into a smaller dense graph and checks that the
//! lean graph computes what the masked original computes.
//!
//!     cargo run --release --example filter_pruning

use segprune::exec::forward;
use segprune::footprint::count_params;
use segprune::init::init_model;
use segprune::prune::filter::{build_dependency_groups, plan_filters, prune_filters, zero_pruned, MergeRule};
use segprune::{zoo, Tensor, TensorShape};

fn main() -> segprune::Result<()> {
    let graph = init_model(zoo::tiny_segnet(), 0);
    let groups = build_dependency_groups(graph.arch())?;
    println!("{} dependency groups", groups.len());

    let x = Tensor::random(TensorShape::new(2, 1, 64, 64)?, 1);
    for fraction in [0.25, 0.5, 0.75, 0.875] {
        let (lean, report) = prune_filters(&graph, fraction, 1.0, MergeRule::Union)?;
        let plan = plan_filters(&graph, fraction, 1.0, MergeRule::Union)?;
        let masked = zero_pruned(&graph, &plan)?;
        let gap = forward(&lean, &x, None)?.max_abs_diff(&forward(&masked, &x, None)?);
        println!(
            "fraction {fraction:<5} params {:>7} -> {:>6} ({:>5.1}x)  max |lean - masked| {gap:.1e}",
            report.params_before, report.params_after, report.compression_ratio
        );
    }

    let (_, report) = prune_filters(&graph, 0.875, 1.0, MergeRule::Union)?;
    for l in &report.layers {
        println!("  {:<16} {:>3} -> {:>2} filters", l.layer, l.before, l.after);
    }

    let big = init_model(zoo::deeplabv3_resnet50_os8(), 0);
    println!("deeplabv3 at fraction 0.984375:");
    for rule in [MergeRule::Union, MergeRule::GroupNorm, MergeRule::Intersection] {
        let plan = plan_filters(&big, 0.984375, 1.0, rule)?;
        let lean = segprune::prune::filter::rewrite(&big, &plan)?;
        println!("  {rule:?}: {} params", count_params(&lean).total_params);
    }
    Ok(())
}
