//! Pre-norm decoder-only transformer over `[patch tokens | text tokens]`.
//!
//! Two execution paths share one parameter set: a recorded [`Graph`] path
//! for training and gradient replay, and a plain KV-cached path for
//! inference. They compute the same function.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{causal_row_softmax, dot, gelu, row_moments, AttnLayout, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, xavier_uniform, ParamStore};
use crate::tensor::Tensor;
use crate::toy::config::ModelConfig;
use crate::toy::scene::{Scene, FEATURE_DIM};
use crate::toy::vocab::{self, Token};

const CHECKPOINT_MAGIC: &[u8; 4] = b"TLVM";
const EMB_STD: f64 = 0.5;

#[derive(Clone, Debug)]
struct LayerIx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct ParamIx {
    patch_w: usize,
    patch_b: usize,
    tok: usize,
    pos: usize,
    cell: usize,
    layers: Vec<LayerIx>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

impl ParamIx {
    fn resolve(store: &ParamStore, n_layers: usize) -> Result<Self> {
        let at = |name: &str| {
            store
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name:?}")))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = |s: &str| at(&format!("layer{l}.{s}"));
            layers.push(LayerIx {
                ln1_g: p("ln1.gain")?,
                ln1_b: p("ln1.bias")?,
                wq: p("attn.wq")?,
                wk: p("attn.wk")?,
                wv: p("attn.wv")?,
                wo: p("attn.wo")?,
                ln2_g: p("ln2.gain")?,
                ln2_b: p("ln2.bias")?,
                w1: p("mlp.w1")?,
                b1: p("mlp.b1")?,
                w2: p("mlp.w2")?,
                b2: p("mlp.b2")?,
            });
        }
        Ok(ParamIx {
            patch_w: at("patch.w")?,
            patch_b: at("patch.b")?,
            tok: at("tok_emb")?,
            pos: at("pos_emb")?,
            cell: at("cell_emb")?,
            layers,
            lnf_g: at("final_ln.gain")?,
            lnf_b: at("final_ln.bias")?,
            head: at("lm_head")?,
        })
    }
}

/// One sequence fed to the graph path.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// Cell features, `P × FEATURE_DIM`.
    pub features: Tensor,
    /// Patch indices whose embedding is replaced by zeros.
    pub masked: Vec<usize>,
    /// Text tokens following the patches.
    pub tokens: Vec<Token>,
}

impl ModelInput {
    pub fn new(scene: &Scene, tokens: Vec<Token>) -> Self {
        ModelInput {
            features: scene.features(),
            masked: Vec::new(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Nodes produced by [`ToyModel::forward_graph`].
pub struct GraphForward {
    /// Final-layer hidden states after the closing norm, one row per token.
    pub hidden: Var,
    /// Post-softmax attention per layer, packed per `layout`.
    pub attention: Vec<Var>,
    pub layout: Rc<AttnLayout>,
    /// First row of each sequence within `hidden`.
    pub offsets: Vec<usize>,
}

/// Optional instrumentation of the graph forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttnHooks {
    /// Make every layer's attention a gradient target even when the
    /// parameters are bound as constants.
    pub watch: bool,
    pub delta: Option<AttnOverride>,
}

/// Additive change applied to one layer's attention weights after the
/// softmax. Used to probe the forward pass by finite differences.
#[derive(Clone, Debug)]
pub struct AttnOverride {
    pub layer: usize,
    pub delta: Tensor,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ModelConfig,
    params: ParamStore,
    ix: ParamIx,
    fingerprint: OnceLock<String>,
}

impl PartialEq for ToyModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl ToyModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.d_model, config.mlp_dim);
        let mut s = ParamStore::new();
        s.insert("patch.w", xavier_uniform(&mut rng, FEATURE_DIM, d))?;
        s.insert("patch.b", Tensor::zeros(&[d]))?;
        s.insert("tok_emb", normal_init(&mut rng, &[config.vocab_size, d], EMB_STD))?;
        s.insert("pos_emb", normal_init(&mut rng, &[config.max_seq_len, d], EMB_STD))?;
        // One row per grid cell plus a spare row shared by most text tokens.
        s.insert("cell_emb", normal_init(&mut rng, &[config.n_patches() + 1, d], EMB_STD))?;
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            s.insert(&p("ln1.gain"), Tensor::full(&[d], 1.0))?;
            s.insert(&p("ln1.bias"), Tensor::zeros(&[d]))?;
            // Queries and keys start equal, so early attention favors
            // similar tokens.
            let wq = xavier_uniform(&mut rng, d, d);
            s.insert(&p("attn.wq"), wq.clone())?;
            s.insert(&p("attn.wk"), wq)?;
            s.insert(&p("attn.wv"), xavier_uniform(&mut rng, d, d))?;
            s.insert(&p("attn.wo"), xavier_uniform(&mut rng, d, d))?;
            s.insert(&p("ln2.gain"), Tensor::full(&[d], 1.0))?;
            s.insert(&p("ln2.bias"), Tensor::zeros(&[d]))?;
            s.insert(&p("mlp.w1"), xavier_uniform(&mut rng, d, f))?;
            s.insert(&p("mlp.b1"), Tensor::zeros(&[f]))?;
            s.insert(&p("mlp.w2"), xavier_uniform(&mut rng, f, d))?;
            s.insert(&p("mlp.b2"), Tensor::zeros(&[d]))?;
        }
        s.insert("final_ln.gain", Tensor::full(&[d], 1.0))?;
        s.insert("final_ln.bias", Tensor::zeros(&[d]))?;
        s.insert("lm_head", xavier_uniform(&mut rng, d, config.vocab_size))?;
        Self::from_parts(config, s)
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ix = ParamIx::resolve(&params, config.n_layers)?;
        let model = ToyModel {
            config,
            params,
            ix,
            fingerprint: OnceLock::new(),
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let expect = |idx: usize, shape: &[usize]| {
            let got = self.p(idx).shape();
            if got != shape {
                return Err(Error::dim("checkpoint", got, shape));
            }
            Ok(())
        };
        expect(self.ix.patch_w, &[FEATURE_DIM, c.d_model])?;
        expect(self.ix.tok, &[c.vocab_size, c.d_model])?;
        expect(self.ix.pos, &[c.max_seq_len, c.d_model])?;
        expect(self.ix.cell, &[c.n_patches() + 1, c.d_model])?;
        expect(self.ix.head, &[c.d_model, c.vocab_size])?;
        for l in &self.ix.layers {
            expect(l.wq, &[c.d_model, c.d_model])?;
            expect(l.w1, &[c.d_model, c.mlp_dim])?;
            expect(l.w2, &[c.mlp_dim, c.d_model])?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.fingerprint = OnceLock::new();
        &mut self.params
    }

    fn p(&self, idx: usize) -> &Tensor {
        self.params.at(idx)
    }

    /// SHA-256 over the serialized checkpoint, hex encoded.
    pub fn fingerprint(&self) -> String {
        self.fingerprint
            .get_or_init(|| {
                let mut buf = Vec::new();
                self.write_to(&mut buf).expect("in-memory write");
                hex(&Sha256::digest(&buf))
            })
            .clone()
    }

    /// Patch embeddings (`P × d`), one row per cell in row-major order.
    pub fn embed_scene(&self, scene: &Scene) -> Result<Tensor> {
        self.embed_features(&scene.features())
    }

    pub fn embed_features(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != FEATURE_DIM {
            return Err(Error::dim("embed_scene", features.shape(), &[features.rows(), FEATURE_DIM]));
        }
        let mut e = features.matmul(self.p(self.ix.patch_w))?;
        let b = self.p(self.ix.patch_b).data();
        for r in 0..e.rows() {
            e.row_mut(r).iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
        Ok(e)
    }

    // ---------------------------------------------------------------------
    // Graph path
    // ---------------------------------------------------------------------

    /// Adds every parameter to `g`. With `trainable == false` they enter as
    /// constants, so the backward sweep skips weight gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .values()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        pv: &[Var],
        seqs: &[ModelInput],
        hooks: &AttnHooks,
    ) -> Result<GraphForward> {
        let c = &self.config;
        let (p, d) = (c.n_patches(), c.d_model);
        let ix = &self.ix;
        if seqs.is_empty() {
            return Err(Error::Contract("forward over no sequences".into()));
        }
        let mut feats = Vec::with_capacity(seqs.len() * p * FEATURE_DIM);
        let mut ids = Vec::new();
        let mut keep = Vec::with_capacity(seqs.len() * p * d);
        let mut any_masked = false;
        for s in seqs {
            if s.features.shape() != [p, FEATURE_DIM] {
                return Err(Error::dim("forward", s.features.shape(), &[p, FEATURE_DIM]));
            }
            if s.len() > c.max_seq_len {
                return Err(Error::Capacity { len: s.len(), max: c.max_seq_len });
            }
            feats.extend_from_slice(s.features.data());
            ids.extend_from_slice(&s.tokens);
            let mut k = vec![1.0; p];
            for &m in &s.masked {
                if m >= p {
                    return Err(Error::Bounds { index: m, extent: p });
                }
                k[m] = 0.0;
                any_masked = true;
            }
            keep.extend(k.into_iter().flat_map(|v| std::iter::repeat_n(v, d)));
        }
        let bp = seqs.len() * p;
        let feats = g.constant(Tensor::from_vec(&[bp, FEATURE_DIM], feats)?);
        let pe = g.matmul(feats, pv[ix.patch_w])?;
        let mut pe = g.add_row(pe, pv[ix.patch_b])?;
        if any_masked {
            let keep = g.constant(Tensor::from_vec(&[bp, d], keep)?);
            pe = g.mul(pe, keep)?;
        }
        let mut perm = Vec::new();
        let mut pos = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut tok_row = bp;
        for (si, s) in seqs.iter().enumerate() {
            offsets.push(perm.len());
            perm.extend(si * p..(si + 1) * p);
            perm.extend(tok_row..tok_row + s.tokens.len());
            tok_row += s.tokens.len();
            pos.extend(0..s.len());
            lens.push(s.len());
        }
        let x0 = if ids.is_empty() {
            pe
        } else {
            let te = g.embedding(pv[ix.tok], &ids)?;
            g.concat_rows(&[pe, te])?
        };
        let x0 = g.gather_rows(x0, &perm)?;
        let cells: Vec<usize> = seqs.iter().flat_map(|s| (0..p).chain(cell_slots(c.grid, &[], &s.tokens))).collect();
        let pos = g.embedding(pv[ix.pos], &pos)?;
        let mut x = g.add(x0, pos)?;
        let cells = g.embedding(pv[ix.cell], &cells)?;
        x = g.add(x, cells)?;

        let layout = Rc::new(AttnLayout::new(c.n_heads, c.head_dim(), &lens));
        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        let mut attention = Vec::with_capacity(c.n_layers);
        for (l, lx) in ix.layers.iter().enumerate() {
            let h = g.layer_norm(x, pv[lx.ln1_g], pv[lx.ln1_b])?;
            let q = g.matmul(h, pv[lx.wq])?;
            let k = g.matmul(h, pv[lx.wk])?;
            let v = g.matmul(h, pv[lx.wv])?;
            let s = g.attn_scores(q, k, &layout, scale)?;
            let mut a = g.causal_softmax(s, &layout)?;
            if hooks.watch {
                a = g.watch(a);
            }
            attention.push(a);
            let a_used = match &hooks.delta {
                Some(o) if o.layer == l => {
                    let delta = g.constant(o.delta.clone().reshape(g.value(a).shape())?);
                    g.add(a, delta)?
                }
                _ => a,
            };
            let o = g.attn_mix(a_used, v, &layout)?;
            let o = g.matmul(o, pv[lx.wo])?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, pv[lx.ln2_g], pv[lx.ln2_b])?;
            let m = g.matmul(h, pv[lx.w1])?;
            let m = g.add_row(m, pv[lx.b1])?;
            let m = g.gelu(m);
            let m = g.matmul(m, pv[lx.w2])?;
            let m = g.add_row(m, pv[lx.b2])?;
            x = g.add(x, m)?;
        }
        let hidden = g.layer_norm(x, pv[ix.lnf_g], pv[ix.lnf_b])?;
        Ok(GraphForward {
            hidden,
            attention,
            layout,
            offsets,
        })
    }

    /// Vocabulary logits for the listed rows of `hidden`.
    pub fn logits_graph(&self, g: &mut Graph, pv: &[Var], hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        g.matmul(h, pv[self.ix.head])
    }

    // ---------------------------------------------------------------------
    // Inference path
    // ---------------------------------------------------------------------

    pub(crate) fn new_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    /// Runs `x` (new rows, embeddings without positions) through the stack,
    /// extending `cache`. Returns final hidden states of the new rows.
    pub(crate) fn extend(&self, cache: &mut KvCache, x: Tensor, mut rec: Option<&mut AttnRecord>) -> Result<Tensor> {
        let c = &self.config;
        let (d, nh, dh) = (c.d_model, c.n_heads, c.head_dim());
        let m = x.rows();
        let start = cache.len;
        if start + m > c.max_seq_len {
            return Err(Error::Capacity { len: start + m, max: c.max_seq_len });
        }
        let mut x = x;
        {
            let (pos, cells) = (self.p(self.ix.pos), self.p(self.ix.cell));
            for r in 0..m {
                x.row_mut(r).iter_mut().zip(pos.row(start + r)).for_each(|(o, v)| *o += v);
                if start + r < c.n_patches() {
                    x.row_mut(r).iter_mut().zip(cells.row(start + r)).for_each(|(o, v)| *o += v);
                }
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, lx) in self.ix.layers.iter().enumerate() {
            let h = layer_norm_plain(&x, self.p(lx.ln1_g), self.p(lx.ln1_b));
            let q = h.matmul(self.p(lx.wq))?;
            let k = h.matmul(self.p(lx.wk))?;
            let v = h.matmul(self.p(lx.wv))?;
            cache.keys[l].extend_from_slice(k.data());
            cache.values[l].extend_from_slice(v.data());
            let (keys, vals) = (&cache.keys[l], &cache.values[l]);
            let mut mixed = Tensor::zeros(&[m, d]);
            let mut weights = vec![0.0; start + m];
            for r in 0..m {
                let p = start + r;
                for hd in 0..nh {
                    let cols = hd * dh..(hd + 1) * dh;
                    let qr = &q.row(r)[cols.clone()];
                    for j in 0..=p {
                        weights[j] = scale * dot(qr, &keys[j * d + hd * dh..j * d + (hd + 1) * dh]);
                    }
                    let mut probs = vec![0.0; p + 1];
                    causal_row_softmax(&weights[..=p], &mut probs);
                    let out = &mut mixed.row_mut(r)[cols];
                    for (j, &a) in probs.iter().enumerate() {
                        let vj = &vals[j * d + hd * dh..j * d + (hd + 1) * dh];
                        out.iter_mut().zip(vj).for_each(|(o, v)| *o += a * v);
                    }
                    if let Some(rec) = rec.as_deref_mut() {
                        rec.rows[l][hd].push(probs);
                    }
                }
            }
            let o = mixed.matmul(self.p(lx.wo))?;
            x.add_assign(&o);
            let h = layer_norm_plain(&x, self.p(lx.ln2_g), self.p(lx.ln2_b));
            let mut mm = h.matmul(self.p(lx.w1))?;
            add_bias(&mut mm, self.p(lx.b1));
            let mm = mm.map(gelu);
            let mut mm = mm.matmul(self.p(lx.w2))?;
            add_bias(&mut mm, self.p(lx.b2));
            x.add_assign(&mm);
        }
        cache.len += m;
        Ok(layer_norm_plain(&x, self.p(self.ix.lnf_g), self.p(self.ix.lnf_b)))
    }

    /// Embeddings of `tokens` including their cell slots; `context` is the
    /// text preceding them.
    pub(crate) fn token_embeddings(&self, context: &[Token], tokens: &[Token]) -> Result<Tensor> {
        let (table, cells) = (self.p(self.ix.tok), self.p(self.ix.cell));
        let d = self.config.d_model;
        let mut out = Tensor::zeros(&[tokens.len(), d]);
        let slots = cell_slots(self.config.grid, context, tokens);
        for (r, (&t, slot)) in tokens.iter().zip(slots).enumerate() {
            if t >= self.config.vocab_size {
                return Err(Error::Bounds { index: t, extent: self.config.vocab_size });
            }
            let (a, b) = (table.row(t), cells.row(slot));
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = a[j] + b[j];
            }
        }
        Ok(out)
    }

    pub(crate) fn logits_row(&self, hidden_row: &[f64]) -> Vec<f64> {
        let head = self.p(self.ix.head);
        let v = self.config.vocab_size;
        let mut out = vec![0.0; v];
        for (k, &h) in hidden_row.iter().enumerate() {
            out.iter_mut().zip(head.row(k)).for_each(|(o, w)| *o += h * w);
        }
        debug_assert_eq!(out.len(), v);
        out
    }

    // ---------------------------------------------------------------------
    // Checkpoints
    // ---------------------------------------------------------------------

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        self.config.write_to(w)?;
        self.params.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a toy model checkpoint".into()));
        }
        let config = ModelConfig::read_from(r)?;
        let params = ParamStore::read_from(r)?;
        Self::from_parts(config, params)
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
}

/// Zeroes the listed patch rows of an embedding matrix.
pub fn mask_patches(embedding: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let p = embedding.rows();
    let mut out = embedding.clone();
    for &i in indices {
        if i >= p {
            return Err(Error::Bounds { index: i, extent: p });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Cell embedding slots of `tokens`, which follow `context` in the text.
/// The column digit of a "row r col c" reference and the question mark
/// after it take the slot of cell `(r, c)`, the same row its patch uses.
/// Every other text token uses the spare slot `grid²`.
pub fn cell_slots(grid: usize, context: &[Token], tokens: &[Token]) -> Vec<usize> {
    let spare = grid * grid;
    let (mut prev, mut row, mut cell) = (None, None, None);
    let mut slots = Vec::with_capacity(tokens.len());
    for (k, &t) in context.iter().chain(tokens).enumerate() {
        let value = vocab::digit_value(t).filter(|&v| v < grid);
        let slot = match (prev, value, row) {
            (Some(vocab::ROW), Some(v), _) => {
                row = Some(v);
                spare
            }
            (Some(vocab::COL), Some(v), Some(r)) => {
                cell = Some(r * grid + v);
                r * grid + v
            }
            _ if t == vocab::QMARK => cell.unwrap_or(spare),
            _ => spare,
        };
        if k >= context.len() {
            slots.push(slot);
        }
        prev = Some(t);
    }
    slots
}

pub(crate) struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

/// Attention rows captured during inference: `rows[layer][head][position]`.
pub(crate) struct AttnRecord {
    pub rows: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttnRecord {
    pub fn new(layers: usize, heads: usize) -> Self {
        AttnRecord {
            rows: vec![vec![Vec::new(); heads]; layers],
        }
    }

    /// Dense `[heads, n, n]` tensor per layer.
    pub fn into_tensors(self) -> Vec<Tensor> {
        self.rows
            .into_iter()
            .map(|heads| {
                let nh = heads.len();
                let n = heads.first().map_or(0, |h| h.len());
                let mut t = Tensor::zeros(&[nh, n, n]);
                for (h, rows) in heads.into_iter().enumerate() {
                    for (i, row) in rows.into_iter().enumerate() {
                        let off = h * n * n + i * n;
                        t.data_mut()[off..off + row.len()].copy_from_slice(&row);
                    }
                }
                t
            })
            .collect()
    }
}

fn layer_norm_plain(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let (g, b) = (gain.data(), bias.data());
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, rstd) = row_moments(row);
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * rstd * g[c] + b[c];
        }
    }
    out
}

fn add_bias(x: &mut Tensor, b: &Tensor) {
    for r in 0..x.rows() {
        x.row_mut(r).iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::scene::{Cell, Color, Shape};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            grid: 2,
            vocab_size: 32,
            max_seq_len: 24,
            mlp_dim: 16,
            seed: 5,
        }
    }

    #[test]
    fn identical_cells_embed_identically() {
        let m = ToyModel::init(tiny()).unwrap();
        let obj = Cell::Object { shape: Shape::Circle, color: Color::Red };
        let a = Scene::new(2, vec![obj, Cell::Empty, Cell::Empty, obj]);
        let b = Scene::new(2, vec![obj, obj, obj, Cell::Empty]);
        let (ea, eb) = (m.embed_scene(&a).unwrap(), m.embed_scene(&b).unwrap());
        assert_eq!(ea.row(0), eb.row(0));
        let blank = m.embed_scene(&Scene::new(2, vec![Cell::Empty; 4])).unwrap();
        assert_eq!(ea.row(2), blank.row(2));
        // Same contents at another position differ only through position features.
        assert_ne!(ea.row(0), ea.row(3));
    }

    #[test]
    fn swapping_cells_changes_only_those_rows() {
        let m = ToyModel::init(tiny()).unwrap();
        let red = Cell::Object { shape: Shape::Circle, color: Color::Red };
        let blue = Cell::Object { shape: Shape::Square, color: Color::Blue };
        let a = Scene::new(2, vec![red, blue, Cell::Empty, Cell::Empty]);
        let b = Scene::new(2, vec![blue, red, Cell::Empty, Cell::Empty]);
        let (ea, eb) = (m.embed_scene(&a).unwrap(), m.embed_scene(&b).unwrap());
        assert_ne!(ea.row(0), eb.row(0));
        assert_ne!(ea.row(1), eb.row(1));
        assert_eq!(ea.row(2), eb.row(2));
        assert_eq!(ea.row(3), eb.row(3));
    }

    #[test]
    fn mask_cases() {
        let e = Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(mask_patches(&e, &[]).unwrap(), e);
        assert_eq!(mask_patches(&e, &[0, 1, 2]).unwrap(), Tensor::zeros(&[3, 2]));
        assert_eq!(mask_patches(&e, &[1]).unwrap().data(), &[1., 2., 0., 0., 5., 6.]);
        assert!(matches!(mask_patches(&e, &[3]), Err(Error::Bounds { .. })));
    }

    #[test]
    fn graph_and_cached_paths_agree() {
        let m = ToyModel::init(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = Scene::random(2, &mut rng);
        let tokens = vec![2, 4, 5, 18, 6, 19, 1, 10];
        let input = ModelInput::new(&scene, tokens.clone());
        let mut g = Graph::new();
        let pv = m.bind(&mut g, false);
        let fwd = m.forward_graph(&mut g, &pv, &[input], &AttnHooks::default()).unwrap();
        let graph_h = g.value(fwd.hidden).clone();

        let mut cache = m.new_cache();
        let emb = m.embed_scene(&scene).unwrap();
        let h1 = m.extend(&mut cache, emb, None).unwrap();
        let te = m.token_embeddings(&[], &tokens[..5]).unwrap();
        let h2 = m.extend(&mut cache, te, None).unwrap();
        let mut rows = h1.into_vec();
        rows.extend(h2.into_vec());
        for k in 5..tokens.len() {
            let te = m.token_embeddings(&tokens[..k], &tokens[k..k + 1]).unwrap();
            rows.extend(m.extend(&mut cache, te, None).unwrap().into_vec());
        }
        for (a, b) in graph_h.data().iter().zip(&rows) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn batched_graph_matches_single() {
        let m = ToyModel::init(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s1 = ModelInput::new(&Scene::random(2, &mut rng), vec![3, 7, 8, 12, 9, 1]);
        let mut s2 = ModelInput::new(&Scene::random(2, &mut rng), vec![2, 4, 5, 18, 6, 19, 1]);
        s2.masked = vec![1];
        let mut g = Graph::new();
        let pv = m.bind(&mut g, false);
        let both = m.forward_graph(&mut g, &pv, &[s1.clone(), s2.clone()], &AttnHooks::default()).unwrap();
        let one = m.forward_graph(&mut g, &pv, &[s2], &AttnHooks::default()).unwrap();
        let hb = g.value(both.hidden);
        let h1 = g.value(one.hidden);
        let off = both.offsets[1];
        assert_eq!(off, s1.len());
        for r in 0..h1.rows() {
            for (a, b) in hb.row(off + r).iter().zip(h1.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ToyModel::init(tiny()).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TLVM");
        let back = ToyModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
    }
}
