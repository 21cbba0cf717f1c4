//! Next-token pretraining of the toy model on generated question/answer data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig};
use crate::toy::config::ModelConfig;
use crate::toy::model::{AttnHooks, ModelInput, ToyModel};
use crate::toy::scene::{Distribution, QaSample};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub n_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in optimizer steps, followed by cosine decay to
    /// `lr / 10`.
    pub warmup_steps: usize,
    /// Share of training questions drawn from the shifted family.
    pub shift_fraction: f64,
    /// Held-out questions used for the per-epoch accuracy log.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            n_samples: 12_000,
            epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 100,
            shift_fraction: 0.5,
            eval_samples: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub in_domain_accuracy: f64,
    pub shifted_accuracy: f64,
}

/// Draws `n` samples, each from the shifted family with probability
/// `shift_fraction`.
pub fn sample_mix<R: Rng>(n: usize, grid: usize, shift_fraction: f64, rng: &mut R) -> Vec<QaSample> {
    (0..n)
        .map(|_| {
            let dist = if rng.gen_bool(shift_fraction) {
                Distribution::Shifted
            } else {
                Distribution::InDomain
            };
            QaSample::generate(dist, grid, rng)
        })
        .collect()
}

/// Test questions from a stream disjoint from training and per-epoch eval.
pub fn test_samples(dist: Distribution, n: usize, grid: usize, seed: u64) -> Vec<QaSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7374);
    (0..n).map(|_| QaSample::generate(dist, grid, &mut rng)).collect()
}

/// Exact-match accuracy of greedy answers.
pub fn accuracy(model: &ToyModel, samples: &[QaSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut hits = 0;
    for s in samples {
        let emb = model.embed_scene(&s.scene)?;
        if model.answer(&emb, &s.question_tokens())? == s.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Teacher-forced cross-entropy of one batch. Targets are the answer tokens
/// and the closing end token.
pub fn batch_loss(model: &ToyModel, g: &mut Graph, pv: &[Var], batch: &[&QaSample]) -> Result<Var> {
    let p = model.config().n_patches();
    let mut seqs = Vec::with_capacity(batch.len());
    let mut spans = Vec::with_capacity(batch.len());
    for s in batch {
        let q = s.question_tokens();
        let target = s.target_tokens();
        let mut tokens = q.clone();
        tokens.extend_from_slice(&s.answer);
        spans.push((p + q.len() - 1, target));
        seqs.push(ModelInput::new(&s.scene, tokens));
    }
    let fwd = model.forward_graph(g, pv, &seqs, &AttnHooks::default())?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for ((first, target), off) in spans.into_iter().zip(&fwd.offsets) {
        for (k, t) in target.into_iter().enumerate() {
            rows.push(off + first + k);
            labels.push(t);
        }
    }
    let logits = model.logits_graph(g, pv, fwd.hidden, &rows)?;
    g.cross_entropy(logits, &labels)
}

fn schedule(cfg: &PretrainConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let t = (step - cfg.warmup_steps) as f64 / span as f64;
    let floor = cfg.lr / 10.0;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

/// Trains a fresh model. `log` receives one entry per finished epoch.
pub fn pretrain_toy(cfg: &PretrainConfig, mut log: impl FnMut(&EpochLog)) -> Result<(ToyModel, Vec<EpochLog>)> {
    crate::alloc::tune_malloc();
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.shift_fraction) {
        return Err(Error::Config(format!("shift_fraction {} outside [0, 1]", cfg.shift_fraction)));
    }
    let mut model = ToyModel::init(cfg.model)?;
    let grid = cfg.model.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574_7261_696e);
    let train = sample_mix(cfg.n_samples, grid, cfg.shift_fraction, &mut rng);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6576_616c);
    let eval_in: Vec<_> = (0..cfg.eval_samples)
        .map(|_| QaSample::generate(Distribution::InDomain, grid, &mut eval_rng))
        .collect();
    let eval_shift: Vec<_> = (0..cfg.eval_samples)
        .map(|_| QaSample::generate(Distribution::Shifted, grid, &mut eval_rng))
        .collect();

    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, model.params());
    let steps_per_epoch = cfg.n_samples.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&QaSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let pv = model.bind(&mut g, true);
            let loss = batch_loss(&model, &mut g, &pv, &batch)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            g.backward(loss)?;
            let grads: Vec<_> = pv.iter().map(|&v| g.take_grad(v)).collect();
            adam.step(model.params_mut(), &grads, schedule(cfg, step, total))?;
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            in_domain_accuracy: if eval_in.is_empty() { f64::NAN } else { accuracy(&model, &eval_in)? },
            shifted_accuracy: if eval_shift.is_empty() { f64::NAN } else { accuracy(&model, &eval_shift)? },
        };
        log(&entry);
        logs.push(entry);
    }
    Ok((model, logs))
}
