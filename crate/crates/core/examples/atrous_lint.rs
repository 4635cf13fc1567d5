//! Lints the DeepLabV3 fixture at the frame size it was trained on and at a
//! size large enough for its atrous rates.
//!
//!     cargo run --example atrous_lint -- [HxW ...]

use segprune::lint::{atrous_degeneration, lint};
use segprune::{zoo, TensorShape};

fn main() -> segprune::Result<()> {
    let sizes: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.split('x').next()?.parse().ok()).collect();
    let sizes = if sizes.is_empty() { vec![112, 288, 1024] } else { sizes };
    let graph = zoo::deeplabv3_resnet50_os8();
    for s in sizes {
        let report = lint(&graph, TensorShape::new(1, 3, s, s)?)?;
        println!("== {s}x{s}");
        print!("{}", report.to_text());
    }

    println!("== per-rate context on a 14x14 map");
    for rate in [6, 12, 24, 36] {
        let d = atrous_degeneration(14, 14, rate, 3)?;
        println!(
            "rate {rate:>2}: pointwise {:<5} per-axis {:.4} joint {:.4}",
            d.pointwise, d.context_h, d.context_fraction
        );
    }
    Ok(())
}
