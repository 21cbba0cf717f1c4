//! Labels a query stream with gradient relevancy and saves the dataset.
//!
//! cargo run --release --example gen_dataset -- toy.tlvm [n_queries] [out.frmd]

use std::path::Path;
use std::time::Instant;

use fastrm::distill::build_from_stream;
use fastrm::relevancy::LABEL_THRESHOLD;
use fastrm::toy::ToyModel;

fn main() -> fastrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = ToyModel::load(Path::new(args.get(1).map_or("runs/pretrain-toy/toy.tlvm", String::as_str)))?;
    let n: usize = args.get(2).map_or(1000, |v| v.parse().expect("n_queries"));
    let start = Instant::now();
    let dataset = build_from_stream(&model, n, 0, &[LABEL_THRESHOLD], |done, total| {
        if done % 500 == 0 || done == total {
            println!("{done}/{total} queries ({:.0?})", start.elapsed());
        }
    })?
    .remove(0);
    print!("{}", dataset.manifest.to_text());
    let (train, held) = dataset.split();
    println!("train samples {}  held-out samples {}", train.len(), held.len());
    if let Some(out) = args.get(3) {
        dataset.save(out.as_ref())?;
    }
    Ok(())
}
