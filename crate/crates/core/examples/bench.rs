//! Times gradient relevancy against the head as the answer grows.
//!
//! cargo run --release --example bench -- toy.tlvm fastrm.frmc [start:end:step] [repeats]

use std::path::Path;

use fastrm::bench::{loglog_slope, parse_sweep, run_bench, summarize, BenchConfig, BenchMethod};
use fastrm::cli::bench_prompt;
use fastrm::fastrm::FastRm;
use fastrm::toy::ToyModel;

fn main() -> fastrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = ToyModel::load(Path::new(args.get(1).map_or("runs/pretrain-toy/toy.tlvm", String::as_str)))?;
    let head = FastRm::load(Path::new(args.get(2).map_or("runs/train-fastrm/fastrm.frmc", String::as_str)))?;
    let config = BenchConfig {
        sweep: parse_sweep(args.get(3).map_or("10:100:10", String::as_str))?,
        repeats: args.get(4).map_or(3, |v| v.parse().expect("repeats")),
    };
    let records = run_bench(&model, &head, &bench_prompt(&model, 0), &config)?;
    let base = summarize(&records, BenchMethod::Baseline);
    let fast = summarize(&records, BenchMethod::FastRm);
    println!("{:>5} {:>12} {:>12} {:>8} {:>12} {:>12}", "n", "baseline s", "fastrm s", "ratio", "base peak", "fast peak");
    for (b, f) in base.iter().zip(&fast) {
        println!("{:>5} {:>12.6} {:>12.6} {:>8.1} {:>12} {:>12}", b.0, b.1, f.1, b.1 / f.1, b.2, f.2);
    }
    let slope = |rows: &[(usize, f64, usize)]| loglog_slope(&rows.iter().map(|r| (r.0 as f64, r.1)).collect::<Vec<_>>());
    println!("log-log slope baseline {:.2}  fastrm {:.2}", slope(&base)?, slope(&fast)?);
    Ok(())
}
