//! Trains tiny-segnet on synthetic blobs with SGD and a one-cycle schedule.
//!
//!     cargo run --release --example train_blobs -- [epochs]

use segprune::init::init_model;
use segprune::metrics::{evaluate, generate, SynthKind, SynthSpec};
use segprune::train::{one_cycle_for, Trainer, TrainConfig};
use segprune::zoo;

fn main() -> segprune::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let data = generate(&SynthSpec::new(SynthKind::Blob, 240, 64, 0))?;
    let (val, train) = data.split(40);
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let schedule = one_cycle_for(&cfg, train.len(), 0.05);
    let mut trainer = Trainer::new(init_model(zoo::tiny_segnet(), 0), cfg, schedule, None)?;
    for _ in 0..epochs {
        let e = trainer.run_epoch(&train, Some(&val))?;
        println!("epoch {:>2}  loss {:.4}  val dice {:.4}", e.epoch + 1, e.mean_loss, e.val_dice.unwrap_or(f64::NAN));
    }
    let report = evaluate(trainer.graph(), None, &val, None)?;
    println!(
        "dice {:.4} +- {:.4}  iou {:.4}  sensitivity {:.4}  specificity {:.4}",
        report.dice.mean, report.dice.margin95, report.iou.mean, report.sensitivity.mean, report.specificity.mean
    );
    Ok(())
}
