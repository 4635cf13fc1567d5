//! Parameter, buffer, size and MAC counts for the bundled architectures.
//!
//!     cargo run --example footprint

use segprune::footprint::footprint;
use segprune::init::init_model;
use segprune::{zoo, TensorShape};

fn main() -> segprune::Result<()> {
    for (name, channels, size) in [("deeplabv3-resnet50-os8", 3, 112), ("tiny-segnet", 1, 64)] {
        let graph = init_model(zoo::by_name(name).expect("bundled"), 0);
        let f = footprint(&graph, TensorShape::new(1, channels, size, size)?)?;
        println!("{name} @ {size}x{size}");
        println!("  params  {:>12}", f.total_params);
        println!("  buffers {:>12}", f.buffer_count);
        println!("  size    {:>12.3} MB", f.size_mb());
        println!("  MACs    {:>12.4e}", f.macs.unwrap_or(0) as f64);
        let mut heavy = f.layers.clone();
        heavy.sort_by_key(|l| std::cmp::Reverse(l.params));
        for l in heavy.iter().take(4) {
            println!("    {:<32} {:>10} params {:>5.1}%", l.node, l.params, 100.0 * l.params as f64 / f.total_params as f64);
        }
    }
    Ok(())
}
