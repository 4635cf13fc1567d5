//! DICE, IoU, sensitivity, specificity, AUC and average Hausdorff distance
//! on hand-made masks, plus a difference image and an area trend.
//!
//!     cargo run --example segmentation_metrics -- [out-dir]

use segprune::metrics::{area_trend, difference_image, BinaryMask, MetricSet};

fn disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    let bits = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (y - cy).powi(2) + (x - cx).powi(2) <= r * r
        })
        .collect();
    BinaryMask::new(h, w, bits).expect("sized")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/metrics-example".into());
    std::fs::create_dir_all(&out)?;

    let gt = disc(48, 48, 24.0, 24.0, 12.0);
    for shift in [0.0, 2.0, 6.0] {
        let pred = disc(48, 48, 24.0, 24.0 + shift, 11.0);
        // Scores fall off with distance from the predicted centre.
        let scores: Vec<f32> = (0..48 * 48)
            .map(|i| {
                let (y, x) = ((i / 48) as f32, (i % 48) as f32);
                -((y - 24.0).powi(2) + (x - 24.0 - shift as f32).powi(2)).sqrt()
            })
            .collect();
        let m = MetricSet::compute(&scores, &pred, &gt)?;
        println!(
            "shift {shift}: dice {:.4} iou {:.4} sens {:.4} spec {:.4} auc {:.4} ahd {:.3}",
            m.dice,
            m.iou,
            m.sensitivity,
            m.specificity,
            m.auc.unwrap_or(f64::NAN),
            m.ahd.unwrap_or(f64::NAN)
        );
        difference_image(&pred, &gt, format!("{out}/diff_shift{shift}.ppm"))?;
    }

    // A pulsing region: the trend finds the largest and smallest frames.
    let frames: Vec<BinaryMask> =
        (0..24).map(|t| disc(48, 48, 24.0, 24.0, 10.0 + 5.0 * (t as f64 * std::f64::consts::PI / 6.0).sin())).collect();
    let trend = area_trend(&frames)?;
    println!("areas {:?}", trend.areas);
    println!("peaks {:?} valleys {:?}", trend.peaks, trend.valleys);
    println!("difference images in {out}");
    Ok(())
}
