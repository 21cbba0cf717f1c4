//! Named parameter collections, their on-disk block format, and Adam.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            trainable: true,
        });
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.params[i].value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.value)
    }

    pub fn at(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[p.trainable as u8])?;
            p.value.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(Error::Format(format!("parameter name of {len} bytes")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let value = Tensor::read_from(r)?;
            let idx = store.insert(&name, value)?;
            store.params[idx].trainable = flag[0] != 0;
        }
        Ok(store)
    }
}

/// Xavier/Glorot uniform initialization for a `fan_in × fan_out` matrix.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("sized by construction")
}

pub fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * standard_normal(rng)).collect();
    Tensor::from_vec(shape, data).expect("sized by construction")
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple to reason about.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Adam {
            config,
            step: 0,
            first: params.values().map(|t| Tensor::zeros(t.shape())).collect(),
            second: params.values().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. `grads[i]` pairs with parameter
    /// `i`; `None` means no gradient reached it.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let p = params.param_mut(i);
            if !p.trainable {
                continue;
            }
            let Some(grad) = grad else { continue };
            if grad.shape() != p.value.shape() {
                return Err(Error::dim("adam_step", p.value.shape(), grad.shape()));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
