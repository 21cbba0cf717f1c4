//! Distills the relevancy head from a saved dataset and compares its
//! held-out loss with the best constant predictor.
//!
//! cargo run --release --example train_fastrm -- dataset.frmd [steps] [out.frmc]

use std::path::Path;

use fastrm::distill::{constant_bce, mean_bce, train_with, Dataset, TrainConfig};

fn main() -> fastrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dataset = Dataset::load(Path::new(args.get(1).map_or("runs/gen-dataset/dataset.frmd", String::as_str)))?;
    let mut cfg = TrainConfig::default();
    if let Some(s) = args.get(2) {
        cfg.steps = s.parse().expect("steps");
    }
    let (head, losses) = train_with(&dataset, &cfg, |step, _| {
        if step % 500 == 0 {
            println!("step {step}");
        }
    })?;
    let (_, held) = dataset.split();
    let rate = dataset.manifest.prevalence();
    println!("final train loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    println!("held-out BCE {:.4}  constant {:.4}", mean_bce(&head, &held)?, constant_bce(&held, rate));
    if let Some(out) = args.get(3) {
        head.save(out.as_ref())?;
    }
    Ok(())
}
