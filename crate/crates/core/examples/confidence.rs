//! Fits an entropy threshold on one set of noisy questions and audits it on
//! a disjoint set.
//!
//! cargo run --release --example confidence -- toy.tlvm fastrm.frmc [n]

use std::path::Path;

use fastrm::cli::confidence_sets;
use fastrm::confidence::fit_and_audit;
use fastrm::fastrm::FastRm;
use fastrm::toy::ToyModel;

fn main() -> fastrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = ToyModel::load(Path::new(args.get(1).map_or("runs/pretrain-toy/toy.tlvm", String::as_str)))?;
    let head = FastRm::load(Path::new(args.get(2).map_or("runs/train-fastrm/fastrm.frmc", String::as_str)))?;
    let n: usize = args.get(3).map_or(500, |v| v.parse().expect("n"));
    for (name, h) in [("fastrm", Some(&head)), ("baseline", None)] {
        let (fit, audit_set) = confidence_sets(&model, h, "in", n, n, 1.0, 0)?;
        println!("== {name}");
        print!("{}", fit_and_audit(&fit, &audit_set)?.summary());
    }
    Ok(())
}
