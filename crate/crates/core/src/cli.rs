//! Command-line front end. Every subcommand reads flat `key=value` settings
//! (defaults, then `--config FILE`, then `--key value` flags), writes its
//! artifacts under `--out`, and finishes with a `manifest.txt` there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::bench::{bench_csv, loglog_slope, parse_sweep, run_bench, summarize, BenchConfig, BenchMethod};
use crate::confidence::{density_csv, fit_and_audit, kde_fit, noisy_inputs, score_inputs, scores_csv, ScoredSample};
use crate::distill::{
    build_from_stream, constant_bce, draw_shifted, held_out_queries, loss_csv, mean_bce, train, Dataset, TrainConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    auc_csv, best_accuracy_threshold, classify_metrics, constant_f1, curves_csv, default_thresholds, head_predictions,
    metrics_csv, prevalence, saliency, Aggregation, Method, PerturbationCurve, PerturbationSetup,
};
use crate::experiment::{
    ablate_dataset_size, ablate_labeling_threshold, ablate_steps, ablation_csv, write_heatmap, AblationAxis, AblationEval,
};
use crate::fastrm::FastRm;
use crate::relevancy::{compute_relevancy, extract_vision, LABEL_THRESHOLD};
use crate::toy::scene::{QaSample, Scene};
use crate::toy::train::{accuracy, pretrain_toy, PretrainConfig};
use crate::toy::vocab::{self, tokenize};
use crate::toy::{Distribution, ModelInput, ToyModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const SUBCOMMANDS: [&str; 9] = [
    "pretrain-toy",
    "gen-dataset",
    "train-fastrm",
    "eval",
    "perturb",
    "confidence",
    "bench",
    "explain",
    "ablate",
];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Settings of one invocation after defaults, file and flags are merged.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub subcommand: String,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T> {
        self.raw(key)
            .parse()
            .map_err(|_| CliError::Usage(format!("--{} expects a value of another type, got {:?}", flag(key), self.raw(key))))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out")
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.get("seed")
    }

    fn require_file(&self, key: &str) -> CliResult<PathBuf> {
        let p = self.path(key);
        if self.raw(key).is_empty() || !p.is_file() {
            return Err(CliError::Usage(format!("--{} must name an existing file, got {:?}", flag(key), self.raw(key))));
        }
        Ok(p)
    }
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn key_of(flag: &str) -> String {
    flag.replace('-', "_")
}

/// Default settings of `subcommand`; the key set doubles as the list of
/// accepted flags.
pub fn defaults(subcommand: &str) -> Option<Vec<(&'static str, String)>> {
    let pre = PretrainConfig::default();
    let tr = TrainConfig::default();
    let toy = || ("toy", "runs/pretrain-toy/toy.tlvm".to_string());
    let head = || ("fastrm", "runs/train-fastrm/fastrm.frmc".to_string());
    let dataset = || ("dataset", "runs/gen-dataset/dataset.frmd".to_string());
    let mut v: Vec<(&'static str, String)> = match subcommand {
        "pretrain-toy" => vec![
            ("n_samples", pre.n_samples.to_string()),
            ("epochs", pre.epochs.to_string()),
            ("batch_size", pre.batch_size.to_string()),
            ("lr", pre.lr.to_string()),
            ("warmup_steps", pre.warmup_steps.to_string()),
            ("shift_fraction", pre.shift_fraction.to_string()),
            ("eval_samples", pre.eval_samples.to_string()),
            ("test_samples", "1000".into()),
            ("layers", pre.model.n_layers.to_string()),
            ("heads", pre.model.n_heads.to_string()),
            ("d_model", pre.model.d_model.to_string()),
            ("grid", pre.model.grid.to_string()),
            ("mlp_dim", pre.model.mlp_dim.to_string()),
        ],
        "gen-dataset" => vec![
            toy(),
            ("n_queries", "10000".into()),
            ("labeling_threshold", LABEL_THRESHOLD.to_string()),
        ],
        "train-fastrm" => vec![
            dataset(),
            ("steps", tr.steps.to_string()),
            ("batch_size", tr.batch_size.to_string()),
            ("lr", tr.learning_rate.to_string()),
            ("labeling_threshold", tr.labeling_threshold.to_string()),
        ],
        "eval" => vec![
            toy(),
            head(),
            dataset(),
            ("split", "held_out".into()),
            ("methods", "fastrm,baseline,raw_attention,random".into()),
            ("n_samples", "200".into()),
            ("aggregation", "first".into()),
        ],
        "perturb" => vec![
            toy(),
            head(),
            ("methods", "fastrm,baseline,raw_attention,random".into()),
            ("n_samples", "200".into()),
            ("distribution", "in".into()),
            ("aggregation", "first".into()),
            ("heatmaps", "0".into()),
        ],
        "confidence" => vec![
            toy(),
            head(),
            ("maps", "fastrm".into()),
            ("distribution", "in".into()),
            ("n_fit", "1000".into()),
            ("n_audit", "1000".into()),
            ("max_noise", "1.0".into()),
        ],
        "bench" => vec![toy(), head(), ("sweep", "10:100:10".into()), ("repeats", "5".into())],
        "explain" => vec![
            toy(),
            head(),
            ("question", "color at row 2 col 3 ?".into()),
            ("methods", "fastrm,baseline".into()),
        ],
        "ablate" => vec![
            toy(),
            ("grid", "labeling_threshold=0.1,0.3,0.5".into()),
            ("n_queries", "10000".into()),
            ("eval_samples", "600".into()),
            ("steps", tr.steps.to_string()),
            ("batch_size", tr.batch_size.to_string()),
            ("lr", tr.learning_rate.to_string()),
            ("labeling_threshold", tr.labeling_threshold.to_string()),
        ],
        _ => return None,
    };
    v.push(("seed", "0".into()));
    v.push(("out", format!("runs/{subcommand}")));
    Some(v)
}

/// Parses a `key=value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> CliResult<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {} is not key=value: {l:?}", i + 1)))?;
            Ok((key_of(k.trim()), v.trim().to_string()))
        })
        .collect()
}

/// Builds the run configuration from `args` (subcommand first).
pub fn parse_args(args: &[String]) -> CliResult<RunConfig> {
    let sub = args.first().ok_or_else(|| CliError::Usage("missing subcommand".into()))?;
    let defaults = defaults(sub).ok_or_else(|| CliError::Usage(format!("unknown subcommand {sub:?}")))?;
    let mut values: BTreeMap<String, String> = defaults.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let mut flags = Vec::new();
    let mut config_file = None;
    let mut it = args[1..].iter();
    while let Some(a) = it.next() {
        let name = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument {a:?}")))?;
        let (name, value) = match name.split_once('=') {
            Some((n, v)) => (n.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?;
                (name.to_string(), v.clone())
            }
        };
        if name == "config" {
            config_file = Some(value);
        } else {
            flags.push((key_of(&name), value));
        }
    }
    let mut set = |k: String, v: String| {
        if !values.contains_key(&k) {
            return Err(CliError::Usage(format!("unknown flag --{} for {sub}", flag(&k))));
        }
        values.insert(k, v);
        Ok(())
    };
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
        for (k, v) in parse_config_text(&text)? {
            set(k, v)?;
        }
    }
    for (k, v) in flags {
        set(k, v)?;
    }
    Ok(RunConfig {
        subcommand: sub.clone(),
        values,
    })
}

pub fn usage() -> String {
    let mut s = String::from("usage: fastrm <subcommand> [--config FILE] [--key value ...]\n\nsubcommands:\n");
    for sub in SUBCOMMANDS {
        let keys: Vec<String> = defaults(sub)
            .unwrap_or_default()
            .into_iter()
            .map(|(k, v)| format!("--{} {}", flag(k), v))
            .collect();
        let _ = writeln!(s, "  {sub}\n      {}", keys.join("\n      "));
    }
    s.push_str("\nexit codes: 0 success, 1 usage error, 2 runtime error\n");
    s
}

/// Runs one invocation and maps the outcome to an exit code.
pub fn dispatch(args: &[String]) -> i32 {
    if args.is_empty() || matches!(args[0].as_str(), "-h" | "--help" | "help") {
        eprint!("{}", usage());
        return EXIT_USAGE;
    }
    match parse_args(args).and_then(|cfg| execute(&cfg)) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n");
            eprint!("{}", usage());
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Runs a parsed configuration, writing artifacts and the manifest.
pub fn execute(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let summary = match cfg.subcommand.as_str() {
        "pretrain-toy" => cmd_pretrain(cfg, &out)?,
        "gen-dataset" => cmd_gen_dataset(cfg, &out)?,
        "train-fastrm" => cmd_train(cfg, &out)?,
        "eval" => cmd_eval(cfg, &out)?,
        "perturb" => cmd_perturb(cfg, &out)?,
        "confidence" => cmd_confidence(cfg, &out)?,
        "bench" => cmd_bench(cfg, &out)?,
        "explain" => cmd_explain(cfg, &out)?,
        "ablate" => cmd_ablate(cfg, &out)?,
        other => return Err(CliError::Usage(format!("unknown subcommand {other:?}"))),
    };
    std::fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    std::fs::write(out.join("manifest.txt"), manifest_text(cfg, start.elapsed().as_secs_f64()))?;
    Ok(())
}

pub fn manifest_text(cfg: &RunConfig, wall_seconds: f64) -> String {
    let mut s = format!(
        "subcommand={}\nseed={}\ngit_describe={}\nwall_seconds={:.3}\n",
        cfg.subcommand,
        cfg.raw("seed"),
        git_describe(),
        wall_seconds
    );
    for (k, v) in &cfg.values {
        let _ = writeln!(s, "config.{k}={v}");
    }
    s
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn load_toy(cfg: &RunConfig) -> CliResult<ToyModel> {
    Ok(ToyModel::load(&cfg.require_file("toy")?)?)
}

fn load_head(cfg: &RunConfig) -> CliResult<FastRm> {
    Ok(FastRm::load(&cfg.require_file("fastrm")?)?)
}

fn parse_methods(s: &str) -> CliResult<Vec<Method>> {
    s.split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| Method::parse(m.trim()).ok_or_else(|| CliError::Usage(format!("unknown method {m:?}"))))
        .collect()
}

fn parse_aggregation(s: &str) -> CliResult<Aggregation> {
    match s {
        "first" => Ok(Aggregation::FirstToken),
        "max" => Ok(Aggregation::MaxOverTokens),
        _ => Err(CliError::Usage(format!("aggregation must be first or max, got {s:?}"))),
    }
}

/// The perturbation population: held-out in-domain queries of the stream
/// with the given seed, or shifted queries.
fn eval_queries(dist: &str, n: usize, grid: usize, seed: u64) -> CliResult<Vec<QaSample>> {
    match dist {
        "in" => {
            let mut q = held_out_queries(n * 10, grid, seed);
            q.truncate(n);
            Ok(q)
        }
        "shift" => Ok(draw_shifted(n, grid, seed)),
        _ => Err(CliError::Usage(format!("distribution must be in or shift, got {dist:?}"))),
    }
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let mut pc = PretrainConfig {
        n_samples: cfg.get("n_samples")?,
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        lr: cfg.get("lr")?,
        warmup_steps: cfg.get("warmup_steps")?,
        shift_fraction: cfg.get("shift_fraction")?,
        eval_samples: cfg.get("eval_samples")?,
        seed: cfg.seed()?,
        ..Default::default()
    };
    pc.model.n_layers = cfg.get("layers")?;
    pc.model.n_heads = cfg.get("heads")?;
    pc.model.d_model = cfg.get("d_model")?;
    pc.model.grid = cfg.get("grid")?;
    pc.model.mlp_dim = cfg.get("mlp_dim")?;
    pc.model.seed = pc.seed;
    let (model, logs) = pretrain_toy(&pc, |e| {
        eprintln!(
            "epoch {} loss {:.4} in-domain {:.3} shifted {:.3}",
            e.epoch, e.mean_loss, e.in_domain_accuracy, e.shifted_accuracy
        )
    })?;
    model.save(&out.join("toy.tlvm"))?;
    let mut log = String::from("epoch,mean_loss,in_domain_accuracy,shifted_accuracy\n");
    for e in &logs {
        let _ = writeln!(log, "{},{:.8},{:.6},{:.6}", e.epoch, e.mean_loss, e.in_domain_accuracy, e.shifted_accuracy);
    }
    std::fs::write(out.join("pretrain_log.csv"), log)?;
    let n_test: usize = cfg.get("test_samples")?;
    let test_in = crate::toy::train::test_samples(Distribution::InDomain, n_test, pc.model.grid, pc.seed);
    let test_shift = crate::toy::train::test_samples(Distribution::Shifted, n_test, pc.model.grid, pc.seed);
    Ok(format!(
        "checkpoint={}\nfingerprint={}\ntest_in_domain_accuracy={:.6}\ntest_shifted_accuracy={:.6}\n",
        out.join("toy.tlvm").display(),
        model.fingerprint(),
        accuracy(&model, &test_in)?,
        accuracy(&model, &test_shift)?
    ))
}

fn cmd_gen_dataset(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = load_toy(cfg)?;
    let n: usize = cfg.get("n_queries")?;
    let thr: f64 = cfg.get("labeling_threshold")?;
    let ds = build_from_stream(&model, n, cfg.seed()?, &[thr], |done, total| {
        if done % 1000 == 0 || done == total {
            eprintln!("{done}/{total} queries");
        }
    })?
    .remove(0);
    ds.save(&out.join("dataset.frmd"))?;
    let text = ds.manifest.to_text();
    std::fs::write(out.join("dataset_manifest.txt"), &text)?;
    Ok(text)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let ds = Dataset::load(&cfg.require_file("dataset")?)?;
    let tc = TrainConfig {
        learning_rate: cfg.get("lr")?,
        batch_size: cfg.get("batch_size")?,
        steps: cfg.get("steps")?,
        labeling_threshold: cfg.get("labeling_threshold")?,
        seed: cfg.seed()?,
    };
    let (head, losses) = train(&ds, &tc)?;
    head.save(&out.join("fastrm.frmc"))?;
    std::fs::write(out.join("train_loss.csv"), loss_csv(&losses))?;
    let (train_set, held) = ds.split();
    let rate = prevalence(&train_set.iter().map(|s| s.target.clone()).collect::<Vec<_>>());
    Ok(format!(
        "checkpoint={}\nsteps={}\nfinal_loss={:.6}\nheld_out_bce={:.6}\nconstant_bce={:.6}\n",
        out.join("fastrm.frmc").display(),
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        mean_bce(&head, &held)?,
        constant_bce(&held, rate)
    ))
}

fn write_perturbation(out: &Path, curves: &[PerturbationCurve]) -> CliResult<String> {
    std::fs::write(out.join("curves.csv"), curves_csv(curves))?;
    let table = auc_csv(curves);
    std::fs::write(out.join("auc.csv"), &table)?;
    Ok(table)
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = load_toy(cfg)?;
    let head = load_head(cfg)?;
    let ds = Dataset::load(&cfg.require_file("dataset")?)?;
    let (train_set, held) = ds.split();
    let samples = match cfg.raw("split") {
        "held_out" => held,
        "train" => train_set,
        "all" => ds.samples.iter().collect(),
        s => return Err(CliError::Usage(format!("split must be held_out, train or all, got {s:?}"))),
    };
    let (preds, targets) = head_predictions(&head, &samples)?;
    let rows = classify_metrics(&preds, &targets, &default_thresholds())?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&rows))?;
    let at_half = rows.iter().find(|r| (r.threshold - 0.5).abs() < 1e-9).map(|r| r.f1).unwrap_or(f64::NAN);
    let prev = prevalence(&targets);
    let mut summary = format!(
        "samples={}\nprevalence={:.6}\nf1_at_0.5={:.6}\nconstant_f1={:.6}\nbest_accuracy_threshold={:.1}\n",
        samples.len(),
        prev,
        at_half,
        constant_f1(prev),
        best_accuracy_threshold(&rows).unwrap_or(f64::NAN)
    );
    let methods = parse_methods(cfg.raw("methods"))?;
    if !methods.is_empty() {
        let n: usize = cfg.get("n_samples")?;
        let queries = eval_queries("in", n, model.config().grid, ds.manifest.query_seed)?;
        let mut setup = PerturbationSetup::new(&model, Some(&head));
        setup.aggregation = parse_aggregation(cfg.raw("aggregation"))?;
        setup.seed = cfg.seed()?;
        let curves = setup.run(&queries, &methods)?;
        summary.push_str(&write_perturbation(out, &curves)?);
    }
    Ok(summary)
}

fn cmd_perturb(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = load_toy(cfg)?;
    let methods = parse_methods(cfg.raw("methods"))?;
    let head = if methods.contains(&Method::FastRm) { Some(load_head(cfg)?) } else { None };
    let n: usize = cfg.get("n_samples")?;
    let seed = cfg.seed()?;
    let queries = eval_queries(cfg.raw("distribution"), n, model.config().grid, seed)?;
    let mut setup = PerturbationSetup::new(&model, head.as_ref());
    setup.aggregation = parse_aggregation(cfg.raw("aggregation"))?;
    setup.seed = seed;
    let curves = setup.run(&queries, &methods)?;
    let heatmaps: usize = cfg.get("heatmaps")?;
    for (k, q) in queries.iter().take(heatmaps).enumerate() {
        let trace = model.generate_greedy(&q.scene, &q.question_tokens())?;
        for &m in methods.iter().filter(|&&m| m != Method::Random) {
            let map = saliency(m, &model, head.as_ref(), q, &trace, setup.aggregation)?;
            write_heatmap(&out.join(format!("sample{k}_{}.pgm", m.name())), &map, model.config().grid)?;
        }
    }
    write_perturbation(out, &curves)
}

fn cmd_confidence(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = load_toy(cfg)?;
    let head = match cfg.raw("maps") {
        "fastrm" => Some(load_head(cfg)?),
        "baseline" => None,
        s => return Err(CliError::Usage(format!("maps must be fastrm or baseline, got {s:?}"))),
    };
    let (n_fit, n_audit): (usize, usize) = (cfg.get("n_fit")?, cfg.get("n_audit")?);
    let seed = cfg.seed()?;
    let max_noise: f64 = cfg.get("max_noise")?;
    let (fit, audit_set) = confidence_sets(&model, head.as_ref(), cfg.raw("distribution"), n_fit, n_audit, max_noise, seed)?;
    let report = fit_and_audit(&fit, &audit_set)?;
    std::fs::write(out.join("scores.csv"), scores_csv(&fit, &audit_set))?;
    for (name, correct) in [("correct", true), ("incorrect", false)] {
        let h: Vec<f64> = fit.iter().chain(&audit_set).filter(|s| s.correct == correct).map(|s| s.entropy).collect();
        if let Ok(kde) = kde_fit(&h) {
            std::fs::write(out.join(format!("density_{name}.csv")), density_csv(&kde.curve(200)))?;
        }
    }
    Ok(report.summary())
}

/// Scores `n_fit + n_audit` noisy samples and splits them into the
/// τ-fitting and audit sets. Ids are positions in the drawn population.
#[allow(clippy::too_many_arguments)]
pub fn confidence_sets(
    model: &ToyModel,
    head: Option<&FastRm>,
    dist: &str,
    n_fit: usize,
    n_audit: usize,
    max_noise: f64,
    seed: u64,
) -> Result<(Vec<ScoredSample>, Vec<ScoredSample>)> {
    let grid = model.config().grid;
    let n = n_fit + n_audit;
    let samples = match dist {
        "in" => {
            let mut q = held_out_queries(n * 10, grid, seed);
            q.truncate(n);
            q
        }
        "shift" => draw_shifted(n, grid, seed),
        _ => return Err(Error::Config(format!("distribution must be in or shift, got {dist:?}"))),
    };
    let ids: Vec<u64> = (0..n as u64).collect();
    let mut scored = score_inputs(model, head, &noisy_inputs(&samples, max_noise, seed), &ids)?;
    let audit_set = scored.split_off(n_fit.min(scored.len()));
    Ok((scored, audit_set))
}

fn cmd_bench(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = load_toy(cfg)?;
    let head = load_head(cfg)?;
    let sweep = parse_sweep(cfg.raw("sweep")).map_err(|e| CliError::Usage(e.to_string()))?;
    let bc = BenchConfig {
        sweep,
        repeats: cfg.get("repeats")?,
    };
    let prompt = bench_prompt(&model, cfg.seed()?);
    let records = run_bench(&model, &head, &prompt, &bc)?;
    std::fs::write(out.join("bench.csv"), bench_csv(&records))?;
    Ok(bench_summary(&records)?)
}

/// A fixed in-domain question on a seeded scene.
pub fn bench_prompt(model: &ToyModel, seed: u64) -> ModelInput {
    let q = &held_out_queries(10, model.config().grid, seed)[0];
    ModelInput::new(&q.scene, q.question_tokens())
}

pub fn bench_summary(records: &[crate::bench::BenchRecord]) -> Result<String> {
    let mut s = String::new();
    let base = summarize(records, BenchMethod::Baseline);
    let fast = summarize(records, BenchMethod::FastRm);
    for (name, rows) in [("baseline", &base), ("fastrm", &fast)] {
        let pts: Vec<(f64, f64)> = rows.iter().map(|&(n, t, _)| (n as f64, t)).collect();
        let _ = writeln!(s, "{name}_slope={:.4}", loglog_slope(&pts)?);
    }
    for ((n, tb, mb), (_, tf, mf)) in base.iter().zip(&fast) {
        let _ = writeln!(
            s,
            "n={n} baseline_s={tb:.6} fastrm_s={tf:.6} ratio={:.1} baseline_peak={mb} fastrm_peak={mf}",
            tb / tf
        );
    }
    Ok(s)
}

fn cmd_explain(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = load_toy(cfg)?;
    let methods = parse_methods(cfg.raw("methods"))?;
    let head = if methods.contains(&Method::FastRm) { Some(load_head(cfg)?) } else { None };
    let mut question = tokenize(cfg.raw("question"))
        .ok_or_else(|| CliError::Usage(format!("question {:?} has words outside the vocabulary", cfg.raw("question"))))?;
    if question.last() != Some(&vocab::QMARK) {
        question.push(vocab::QMARK);
    }
    let grid = model.config().grid;
    let scene = Scene::random(grid, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed()?));
    let trace = model.generate_greedy(&scene, &question)?;
    let p = trace.n_patches;
    let mut csv = String::from("token_index,token,method,patch,row,col,value\n");
    for i in 0..trace.n_explained() {
        for &m in &methods {
            let map = match m {
                Method::FastRm => head.as_ref().expect("loaded above").forward(&trace.hidden_prefix(i)?, p)?,
                Method::Baseline => extract_vision(&compute_relevancy(&model, &trace, i)?, p)?,
                Method::RawAttention => crate::relevancy::raw_attention(&trace, i)?,
                other => return Err(CliError::Usage(format!("explain does not support {}", other.name()))),
            };
            write_heatmap(&out.join(format!("token{i}_{}.pgm", m.name())), &map, grid)?;
            for (j, v) in map.iter().enumerate() {
                let _ = writeln!(csv, "{i},{},{},{j},{},{},{v:.9}", vocab::word(trace.output[i]), m.name(), j / grid, j % grid);
            }
        }
    }
    std::fs::write(out.join("relevancy.csv"), csv)?;
    let words = |t: &[usize]| t.iter().map(|&t| vocab::word(t)).collect::<Vec<_>>().join(" ");
    let mut scene_txt = String::new();
    for r in 0..grid {
        let row: Vec<String> = (0..grid).map(|c| format!("{:?}", scene.cell(r * grid + c))).collect();
        let _ = writeln!(scene_txt, "{}", row.join(" | "));
    }
    std::fs::write(out.join("scene.txt"), &scene_txt)?;
    Ok(format!("question={}\nanswer={}\ntokens={}\n", words(&question), words(trace.answer()), trace.n_explained()))
}

fn parse_grid(spec: &str) -> CliResult<(AblationAxis, Vec<f64>)> {
    let (name, values) = spec.split_once('=').unwrap_or((spec, ""));
    let axis = AblationAxis::parse(name.trim()).ok_or_else(|| CliError::Usage(format!("unknown ablation axis {name:?}")))?;
    let values = if values.trim().is_empty() {
        axis.default_values()
    } else {
        values
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| CliError::Usage(format!("bad ablation value {v:?}"))))
            .collect::<CliResult<_>>()?
    };
    Ok((axis, values))
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = load_toy(cfg)?;
    let (axis, values) = parse_grid(cfg.raw("grid"))?;
    let seed = cfg.seed()?;
    let n_queries: usize = cfg.get("n_queries")?;
    let n_eval: usize = cfg.get("eval_samples")?;
    let grid = model.config().grid;
    let samples = eval_queries("in", n_eval, grid, seed)?;
    let eval = AblationEval {
        model: &model,
        samples: &samples,
        seed,
    };
    let tc = TrainConfig {
        learning_rate: cfg.get("lr")?,
        batch_size: cfg.get("batch_size")?,
        steps: cfg.get("steps")?,
        labeling_threshold: cfg.get("labeling_threshold")?,
        seed,
    };
    let points = match axis {
        AblationAxis::LabelingThreshold => {
            let queries = crate::distill::draw_queries(n_queries, grid, seed);
            ablate_labeling_threshold(&eval, &queries, seed, &values, &tc)?
        }
        AblationAxis::DatasetSize | AblationAxis::Steps => {
            let ds = build_from_stream(&model, n_queries, seed, &[tc.labeling_threshold], |_, _| {})?.remove(0);
            let counts: Vec<usize> = values.iter().map(|&v| v as usize).collect();
            if axis == AblationAxis::DatasetSize {
                ablate_dataset_size(&eval, &ds, &counts, &tc)?
            } else {
                ablate_steps(&eval, &ds, &counts, &tc)?
            }
        }
    };
    let csv = ablation_csv(&points);
    std::fs::write(out.join("ablation.csv"), &csv)?;
    Ok(csv)
}
