//! CPU latency of tiny-segnet before and after filter pruning, with 95%
//! confidence intervals.
//!
//!     cargo run --release --example latency_bench

use segprune::exec::{bench, BenchReport};
use segprune::init::init_model;
use segprune::prune::filter::{prune_filters, MergeRule};
use segprune::{zoo, TensorShape};

fn main() -> segprune::Result<()> {
    let input = TensorShape::new(1, 1, 64, 64)?;
    let dense = init_model(zoo::tiny_segnet(), 0);
    let base = bench(&dense, input, 5, 50, 0)?;
    println!("{}", serde_json::to_string_pretty(&BenchReport::new(base.clone(), input)).expect("serialisable"));
    for fraction in [0.5, 0.75, 0.875] {
        let (lean, report) = prune_filters(&dense, fraction, 1.0, MergeRule::Union)?;
        let s = bench(&lean, input, 5, 50, 0)?;
        println!(
            "fraction {fraction:<5} {:>7} params  {:.3} +- {:.3} ms  {:>5} fps  {:.2}x baseline latency",
            report.params_after,
            s.mean_ms,
            s.ci95_ms,
            s.throughput_fps,
            s.mean_ms / base.mean_ms
        );
    }
    Ok(())
}
