//! Pretrains the toy model and reports held-out accuracy.
//!
//! cargo run --release --example pretrain_toy -- [n_samples] [epochs] [out.tlvm]

use std::time::Instant;

use fastrm::toy::train::{pretrain_toy, PretrainConfig};

fn main() -> fastrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = PretrainConfig::default();
    if let Some(n) = args.get(1) {
        cfg.n_samples = n.parse().expect("n_samples");
    }
    if let Some(e) = args.get(2) {
        cfg.epochs = e.parse().expect("epochs");
    }
    let start = Instant::now();
    let (model, _) = pretrain_toy(&cfg, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  acc d_in {:.3}  acc d_shift {:.3}  ({:.0?})",
            e.epoch,
            e.mean_loss,
            e.in_domain_accuracy,
            e.shifted_accuracy,
            start.elapsed()
        )
    })?;
    if let Some(path) = args.get(3) {
        model.save(path.as_ref())?;
        println!("saved {path} ({})", &model.fingerprint()[..16]);
    }
    Ok(())
}
