//! Building the (hidden states, relevancy labels) corpus and fitting the
//! proxy head to it.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::fastrm::{FastRm, FastRmConfig};
use crate::params::{Adam, AdamConfig};
use crate::relevancy::{binarize, compute_relevancy, extract_vision, LABEL_THRESHOLD};
use crate::tensor::{read_u32, read_u64, Tensor};
use crate::toy::scene::{Distribution, QaSample};
use crate::toy::ToyModel;

const MAGIC: &[u8; 4] = b"FRMD";

/// Every tenth query id is held out.
pub const HELD_OUT_MODULUS: u64 = 10;

pub fn is_held_out(query_id: u64) -> bool {
    query_id % HELD_OUT_MODULUS == HELD_OUT_MODULUS - 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Final hidden states of positions `[0, n_in + token_index)`.
    pub hidden: Tensor,
    pub token_index: usize,
    pub target: Vec<bool>,
    pub query_id: u64,
}

impl TrainingSample {
    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut body = Vec::new();
        body.extend_from_slice(&self.query_id.to_le_bytes());
        body.extend_from_slice(&(self.token_index as u32).to_le_bytes());
        body.extend_from_slice(&(self.target.len() as u32).to_le_bytes());
        body.extend(self.target.iter().map(|&b| b as u8));
        self.hidden.write_to(&mut body)?;
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let len = read_u64(r)?;
        let mut body = r.take(len);
        let query_id = read_u64(&mut body)?;
        let token_index = read_u32(&mut body)? as usize;
        let p = read_u32(&mut body)? as usize;
        let mut bits = vec![0u8; p];
        body.read_exact(&mut bits)?;
        let hidden = Tensor::read_from(&mut body)?;
        if body.limit() != 0 {
            return Err(Error::Format("sample record length disagrees with its contents".into()));
        }
        Ok(TrainingSample {
            hidden,
            token_index,
            target: bits.into_iter().map(|b| b != 0).collect(),
            query_id,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub samples: usize,
    pub queries: usize,
    /// Output tokens per query → number of queries.
    pub tokens_per_query: BTreeMap<usize, usize>,
    pub labeling_threshold: f64,
    pub skipped_degenerate: usize,
    pub positive_bits: usize,
    pub n_patches: usize,
    pub d_model: usize,
    pub checkpoint: String,
    /// Seed of the query stream the samples came from.
    pub query_seed: u64,
}

impl DatasetManifest {
    /// Fraction of target bits that are set.
    pub fn prevalence(&self) -> f64 {
        self.positive_bits as f64 / (self.samples * self.n_patches).max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let hist: Vec<String> = self.tokens_per_query.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        format!(
            "samples={}\nqueries={}\ntokens_per_query={}\nlabeling_threshold={}\nskipped_degenerate={}\npositive_bits={}\nprevalence={:.6}\nn_patches={}\nd_model={}\ncheckpoint={}\nquery_seed={}\n",
            self.samples,
            self.queries,
            hist.join(","),
            self.labeling_threshold,
            self.skipped_degenerate,
            self.positive_bits,
            self.prevalence(),
            self.n_patches,
            self.d_model,
            self.checkpoint,
            self.query_seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::Format(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad manifest field {k}"))) };
        let mut tokens_per_query = BTreeMap::new();
        for pair in get("tokens_per_query")?.split(',').filter(|s| !s.is_empty()) {
            let (a, b) = pair.split_once(':').ok_or_else(|| Error::Format("bad histogram entry".into()))?;
            let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format("bad histogram entry".into()));
            tokens_per_query.insert(parse(a)?, parse(b)?);
        }
        Ok(DatasetManifest {
            samples: num("samples")?,
            queries: num("queries")?,
            tokens_per_query,
            labeling_threshold: get("labeling_threshold")?
                .parse()
                .map_err(|_| Error::Format("bad labeling threshold".into()))?,
            skipped_degenerate: num("skipped_degenerate")?,
            positive_bits: num("positive_bits")?,
            n_patches: num("n_patches")?,
            d_model: num("d_model")?,
            checkpoint: get("checkpoint")?.to_string(),
            query_seed: get("query_seed")?
                .parse()
                .map_err(|_| Error::Format("bad query seed".into()))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<TrainingSample>,
}

impl Dataset {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        let text = self.manifest.to_text();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        for s in &self.samples {
            s.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a distillation dataset".into()));
        }
        let len = read_u32(r)? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let manifest = DatasetManifest::from_text(&String::from_utf8_lossy(&text))?;
        let samples = (0..manifest.samples)
            .map(|_| TrainingSample::read_from(r))
            .collect::<Result<Vec<_>>>()?;
        let bits: usize = samples.iter().map(|s| s.target.iter().filter(|&&b| b).count()).sum();
        if bits != manifest.positive_bits {
            return Err(Error::Format("manifest counts disagree with stored samples".into()));
        }
        Ok(Dataset { manifest, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }

    /// Splits samples by query id into (train, held-out).
    pub fn split(&self) -> (Vec<&TrainingSample>, Vec<&TrainingSample>) {
        self.samples.iter().partition(|s| !is_held_out(s.query_id))
    }

    /// Keeps the shortest run of whole queries holding at least `n` samples,
    /// or everything when there are fewer.
    pub fn truncate_samples(&self, n: usize) -> Dataset {
        match self.samples.get(n.max(1) - 1) {
            Some(s) if n > 0 => self.truncate_queries(s.query_id as usize + 1),
            _ if n == 0 => self.truncate_queries(0),
            _ => self.clone(),
        }
    }

    /// Keeps samples from the first `n_queries` query ids.
    pub fn truncate_queries(&self, n_queries: usize) -> Dataset {
        let samples: Vec<_> = self.samples.iter().filter(|s| (s.query_id as usize) < n_queries).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.samples = samples.len();
        manifest.queries = n_queries.min(self.manifest.queries);
        manifest.positive_bits = samples.iter().map(|s| s.target.iter().filter(|&&b| b).count()).sum();
        let mut hist = BTreeMap::new();
        let mut per_query: BTreeMap<u64, usize> = BTreeMap::new();
        for s in &samples {
            *per_query.entry(s.query_id).or_default() = s.token_index + 1;
        }
        for n in per_query.values() {
            *hist.entry(*n).or_default() += 1;
        }
        manifest.tokens_per_query = hist;
        Dataset { manifest, samples }
    }
}

/// Draws `n_queries` from the seeded stream and builds one dataset per
/// labeling threshold, recording the seed in each manifest.
pub fn build_from_stream(
    model: &ToyModel,
    n_queries: usize,
    seed: u64,
    thresholds: &[f64],
    progress: impl FnMut(usize, usize),
) -> Result<Vec<Dataset>> {
    let queries = draw_queries(n_queries, model.config().grid, seed);
    let mut out = build_datasets(model, &queries, thresholds, progress)?;
    for d in &mut out {
        d.manifest.query_seed = seed;
    }
    Ok(out)
}

/// The held-out queries among the first `n_queries` of the stream.
pub fn held_out_queries(n_queries: usize, grid: usize, seed: u64) -> Vec<QaSample> {
    draw_queries(n_queries, grid, seed)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| is_held_out(*i as u64))
        .map(|(_, q)| q)
        .collect()
}

/// Attribute-reference queries from their own seeded stream.
pub fn draw_shifted(n: usize, grid: usize, seed: u64) -> Vec<QaSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7368_6966_74);
    (0..n).map(|_| QaSample::generate(Distribution::Shifted, grid, &mut rng)).collect()
}

/// The query stream: in-domain samples drawn from one seeded generator, so
/// query `k` is the same whatever the total count.
pub fn draw_queries(n: usize, grid: usize, seed: u64) -> Vec<QaSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| QaSample::generate(Distribution::InDomain, grid, &mut rng)).collect()
}

/// Generates each query greedily, labels every answer token with the
/// thresholded relevancy of its replayed step, and keeps the hidden-state
/// prefix the head will read.
pub fn build_dataset(model: &ToyModel, queries: &[QaSample], labeling_threshold: f64) -> Result<Dataset> {
    build_dataset_with(model, queries, labeling_threshold, |_, _| {})
}

/// As [`build_dataset`], calling `progress(done, total)` after each query.
pub fn build_dataset_with(
    model: &ToyModel,
    queries: &[QaSample],
    labeling_threshold: f64,
    progress: impl FnMut(usize, usize),
) -> Result<Dataset> {
    Ok(build_datasets(model, queries, &[labeling_threshold], progress)?.remove(0))
}

/// One dataset per labeling threshold, sharing the relevancy computation.
pub fn build_datasets(
    model: &ToyModel,
    queries: &[QaSample],
    thresholds: &[f64],
    mut progress: impl FnMut(usize, usize),
) -> Result<Vec<Dataset>> {
    crate::alloc::tune_malloc();
    if thresholds.is_empty() {
        return Err(Error::Config("no labeling threshold given".into()));
    }
    if let Some(t) = thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::Config(format!("labeling threshold {t} outside (0, 1]")));
    }
    let p = model.config().n_patches();
    let mut samples = vec![Vec::new(); thresholds.len()];
    let mut skipped = vec![0; thresholds.len()];
    let mut tokens_per_query = BTreeMap::new();
    for (qid, q) in queries.iter().enumerate() {
        let trace = model.generate_greedy(&q.scene, &q.question_tokens())?;
        let n = trace.n_explained();
        *tokens_per_query.entry(n).or_insert(0) += 1;
        for i in 0..n {
            let v = extract_vision(&compute_relevancy(model, &trace, i)?, p)?;
            let hidden = trace.hidden_prefix(i)?;
            for (k, &t) in thresholds.iter().enumerate() {
                match binarize(&v, t) {
                    Ok(target) => samples[k].push(TrainingSample {
                        hidden: hidden.clone(),
                        token_index: i,
                        target,
                        query_id: qid as u64,
                    }),
                    Err(Error::Degenerate(_)) => skipped[k] += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        progress(qid + 1, queries.len());
    }
    Ok(thresholds
        .iter()
        .zip(samples)
        .zip(skipped)
        .map(|((&labeling_threshold, samples), skipped_degenerate)| {
            let positive_bits = samples.iter().map(|s| s.target.iter().filter(|&&b| b).count()).sum();
            Dataset {
                manifest: DatasetManifest {
                    samples: samples.len(),
                    queries: queries.len(),
                    tokens_per_query: tokens_per_query.clone(),
                    labeling_threshold,
                    skipped_degenerate,
                    positive_bits,
                    n_patches: p,
                    d_model: model.config().d_model,
                    checkpoint: model.fingerprint(),
                    query_seed: 0,
                },
                samples,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub labeling_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 128,
            steps: 3500,
            labeling_threshold: LABEL_THRESHOLD,
            seed: 0,
        }
    }
}

/// Stacks the patch rows, predicting rows and targets of a batch.
fn batch_tensors(batch: &[&TrainingSample], p: usize, d: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let b = batch.len();
    let mut patches = Vec::with_capacity(b * p * d);
    let mut queries = Vec::with_capacity(b * d);
    let mut targets = Vec::with_capacity(b * p);
    for s in batch {
        if s.hidden.cols() != d || s.target.len() != p || s.hidden.rows() <= p {
            return Err(Error::Data(format!(
                "sample of query {} has hidden {:?} and {} targets",
                s.query_id,
                s.hidden.shape(),
                s.target.len()
            )));
        }
        patches.extend_from_slice(&s.hidden.data()[..p * d]);
        queries.extend_from_slice(s.hidden.row(s.hidden.rows() - 1));
        targets.extend(s.target.iter().map(|&t| t as u8 as f64));
    }
    Ok((
        Tensor::from_vec(&[b * p, d], patches)?,
        Tensor::from_vec(&[b, d], queries)?,
        Tensor::from_vec(&[b, p], targets)?,
    ))
}

/// Mean per-patch binary cross-entropy of `head` over `samples`.
pub fn mean_bce(head: &FastRm, samples: &[&TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (mut total, mut count) = (0.0, 0usize);
    for s in samples {
        let probs = head.forward(&s.hidden, s.target.len())?;
        for (&pr, &t) in probs.iter().zip(&s.target) {
            let pr = pr.clamp(1e-12, 1.0 - 1e-12);
            total -= if t { pr.ln() } else { (1.0 - pr).ln() };
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// BCE of always predicting `rate`, the label prevalence of `samples`.
pub fn constant_bce(samples: &[&TrainingSample], rate: f64) -> f64 {
    let rate = rate.clamp(1e-12, 1.0 - 1e-12);
    let (mut total, mut count) = (0.0, 0usize);
    for s in samples {
        for &t in &s.target {
            total -= if t { rate.ln() } else { (1.0 - rate).ln() };
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Fits a freshly initialized head on the training split. Returns the head
/// and the loss of every step.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(FastRm, Vec<f64>)> {
    train_with(dataset, config, |_, _| {})
}

/// As [`train`], calling `after_step(steps_done, head)` after every update.
/// The learning rate is constant, so a snapshot after `k` steps equals the
/// result of a `k`-step run.
pub fn train_with(dataset: &Dataset, config: &TrainConfig, mut after_step: impl FnMut(usize, &FastRm)) -> Result<(FastRm, Vec<f64>)> {
    crate::alloc::tune_malloc();
    let m = &dataset.manifest;
    if config.labeling_threshold != m.labeling_threshold {
        return Err(Error::Config(format!(
            "dataset labeled at threshold {} but training configured for {}",
            m.labeling_threshold, config.labeling_threshold
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut head = FastRm::init(FastRmConfig::new(m.d_model, config.seed))?;
    let (train_set, _) = dataset.split();
    if train_set.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (p, d) = (m.n_patches, m.d_model);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            ..Default::default()
        },
        head.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6865_6164);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&TrainingSample> = order[cursor..end].iter().map(|&i| train_set[i]).collect();
        cursor = end;
        let (patches, queries, targets) = batch_tensors(&batch, p, d)?;
        let mut g = Graph::new();
        let pv = head.bind(&mut g);
        let patches = g.constant(patches);
        let queries = g.constant(queries);
        let probs = head.forward_graph(&mut g, &pv, patches, queries, p)?;
        let loss = g.binary_cross_entropy(probs, &targets)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        g.backward(loss)?;
        let grads: Vec<_> = pv.iter().map(|&v| g.take_grad(v)).collect();
        adam.step(head.params_mut(), &grads, config.learning_rate)?;
        losses.push(value);
        after_step(step + 1, &head);
    }
    Ok((head, losses))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{:.10}\n", i + 1, l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(qid: u64, p: usize, d: usize) -> TrainingSample {
        TrainingSample {
            hidden: Tensor::from_vec(&[p + 2, d], (0..(p + 2) * d).map(|v| (v as f64).sin()).collect()).unwrap(),
            token_index: 1,
            target: (0..p).map(|j| j % 3 == 0).collect(),
            query_id: qid,
        }
    }

    fn dataset(n: u64) -> Dataset {
        let samples: Vec<_> = (0..n).map(|q| sample(q, 4, 3)).collect();
        let positive_bits = samples.iter().map(|s| s.target.iter().filter(|&&b| b).count()).sum();
        Dataset {
            manifest: DatasetManifest {
                samples: samples.len(),
                queries: n as usize,
                tokens_per_query: BTreeMap::from([(2, n as usize)]),
                labeling_threshold: 0.3,
                skipped_degenerate: 0,
                positive_bits,
                n_patches: 4,
                d_model: 3,
                checkpoint: "abc".into(),
                query_seed: 7,
            },
            samples,
        }
    }

    #[test]
    fn dataset_round_trips() {
        let ds = dataset(5);
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn split_is_by_query() {
        let ds = dataset(30);
        let (train, held) = ds.split();
        assert_eq!(held.len(), 3);
        assert!(held.iter().all(|s| s.query_id % 10 == 9));
        assert_eq!(train.len(), 27);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ds = dataset(12);
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let (head, losses) = train(&ds, &cfg).unwrap();
        assert!(losses.is_empty());
        assert_eq!(head, FastRm::init(FastRmConfig::new(3, 0)).unwrap());
    }

    #[test]
    fn threshold_mismatch_is_config_error() {
        let cfg = TrainConfig { labeling_threshold: 0.5, ..Default::default() };
        assert!(matches!(train(&dataset(3), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = dataset(20);
        let cfg = TrainConfig { steps: 7, batch_size: 4, learning_rate: 1e-2, ..Default::default() };
        assert_eq!(train(&ds, &cfg).unwrap(), train(&ds, &cfg).unwrap());
    }
}
