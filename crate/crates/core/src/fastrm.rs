//! Proxy relevancy head: layer norm followed by one query/key attention
//! score per patch, squashed with a sigmoid.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{row_moments, sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamStore};
use crate::tensor::{gemm, read_u64, Layout, Tensor};

const MAGIC: &[u8; 4] = b"FRMC";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FastRmConfig {
    pub d_model: usize,
    /// Width of the query/key projections.
    pub head_dim: usize,
    pub seed: u64,
}

impl FastRmConfig {
    pub fn new(d_model: usize, seed: u64) -> Self {
        FastRmConfig {
            d_model,
            head_dim: d_model,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.head_dim == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter indices inside [`FastRm::params`].
const GAIN: usize = 0;
const BIAS: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const NAMES: [&str; 4] = ["norm.gain", "norm.bias", "attn.wq", "attn.wk"];

#[derive(Clone, Debug, PartialEq)]
pub struct FastRm {
    config: FastRmConfig,
    params: ParamStore,
}

impl FastRm {
    pub fn init(config: FastRmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, k) = (config.d_model, config.head_dim);
        let mut params = ParamStore::new();
        params.insert(NAMES[GAIN], Tensor::full(&[d], 1.0))?;
        params.insert(NAMES[BIAS], Tensor::zeros(&[d]))?;
        params.insert(NAMES[WQ], xavier_uniform(&mut rng, d, k))?;
        params.insert(NAMES[WK], xavier_uniform(&mut rng, d, k))?;
        Ok(FastRm { config, params })
    }

    pub fn from_parts(config: FastRmConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.d_model, config.head_dim);
        let want: [&[usize]; 4] = [&[d], &[d], &[d, k], &[d, k]];
        if params.len() != NAMES.len() {
            return Err(Error::Format(format!("expected {} head parameters, found {}", NAMES.len(), params.len())));
        }
        for (i, (p, shape)) in params.iter().zip(want).enumerate() {
            if p.name != NAMES[i] {
                return Err(Error::Format(format!("unexpected parameter {:?}", p.name)));
            }
            if p.value.shape() != shape {
                return Err(Error::dim("fastrm_checkpoint", p.value.shape(), shape));
            }
        }
        Ok(FastRm { config, params })
    }

    pub fn config(&self) -> &FastRmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn scale(&self) -> f64 {
        1.0 / (self.config.head_dim as f64).sqrt()
    }

    fn norm_row(&self, row: &[f64], out: &mut [f64]) {
        let (mean, rstd) = row_moments(row);
        let (g, b) = (self.params.at(GAIN).data(), self.params.at(BIAS).data());
        for (j, o) in out.iter_mut().enumerate() {
            *o = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }

    /// Relevance probability of each of the first `p` positions for the token
    /// predicted at the last row of `h`. Only those rows are read.
    pub fn forward(&self, h: &Tensor, p: usize) -> Result<Vec<f64>> {
        self.forward_at(h, h.rows(), p)
    }

    /// As [`FastRm::forward`] on the first `n` rows of `h`, without copying
    /// them out.
    pub fn forward_at(&self, h: &Tensor, n: usize, p: usize) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        if h.shape().len() != 2 || h.cols() != d {
            return Err(Error::Config(format!(
                "hidden states {:?} do not match head width {d}",
                h.shape()
            )));
        }
        if n > h.rows() {
            return Err(Error::Bounds { index: n, extent: h.rows() });
        }
        if p == 0 || p >= n {
            return Err(Error::Bounds { index: p, extent: n });
        }
        let k = self.config.head_dim;
        // Tensors rather than plain vectors so allocation tracking sees them.
        let mut normed = Tensor::zeros(&[p + 1, d]);
        for r in 0..p {
            self.norm_row(h.row(r), normed.row_mut(r));
        }
        self.norm_row(h.row(n - 1), normed.row_mut(p));
        let mut proj = Tensor::zeros(&[p + 1, k]);
        let wk = self.params.at(WK).data();
        let wq = self.params.at(WQ).data();
        let (nk, nq) = normed.data().split_at(p * d);
        let (keys, query) = proj.data_mut().split_at_mut(p * k);
        gemm(p, d, k, nk, Layout::Normal, wk, Layout::Normal, keys, 0.0);
        gemm(1, d, k, nq, Layout::Normal, wq, Layout::Normal, query, 0.0);
        let s = self.scale();
        Ok(keys
            .chunks(k)
            .map(|kr| sigmoid(s * kr.iter().zip(query.iter()).map(|(a, b)| a * b).sum::<f64>()))
            .collect())
    }

    /// Binds the parameters into `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.values().map(|t| g.param(t.clone())).collect()
    }

    /// Batched probabilities: `patches` stacks `B·p` patch rows, `queries`
    /// holds the `B` predicting rows. Returns a `B × p` node.
    pub fn forward_graph(&self, g: &mut Graph, pv: &[Var], patches: Var, queries: Var, p: usize) -> Result<Var> {
        let kn = g.layer_norm(patches, pv[GAIN], pv[BIAS])?;
        let qn = g.layer_norm(queries, pv[GAIN], pv[BIAS])?;
        let keys = g.matmul(kn, pv[WK])?;
        let q = g.matmul(qn, pv[WQ])?;
        let scores = g.group_dot(q, keys, p)?;
        let scores = g.scale(scores, self.scale());
        Ok(g.sigmoid(scores))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.config.d_model as u64, self.config.head_dim as u64, self.config.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        self.params.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a relevancy head checkpoint".into()));
        }
        let config = FastRmConfig {
            d_model: read_u64(r)? as usize,
            head_dim: read_u64(r)? as usize,
            seed: read_u64(r)?,
        };
        Self::from_parts(config, ParamStore::read_from(r)?)
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_projections_give_one_half() {
        let mut head = FastRm::init(FastRmConfig::new(4, 0)).unwrap();
        head.params_mut().param_mut(WQ).value.data_mut().fill(0.0);
        head.params_mut().param_mut(WK).value.data_mut().fill(0.0);
        let h = Tensor::from_vec(&[5, 4], (0..20).map(|v| v as f64 * 0.3).collect()).unwrap();
        assert!(head.forward(&h, 3).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_width_is_config_error() {
        let head = FastRm::init(FastRmConfig::new(4, 0)).unwrap();
        assert!(matches!(head.forward(&Tensor::zeros(&[5, 3]), 2), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trips() {
        let head = FastRm::init(FastRmConfig::new(6, 9)).unwrap();
        let mut buf = Vec::new();
        head.write_to(&mut buf).unwrap();
        assert_eq!(FastRm::read_from(&mut buf.as_slice()).unwrap(), head);
        buf[0] = b'X';
        assert!(FastRm::read_from(&mut buf.as_slice()).is_err());
    }
}
