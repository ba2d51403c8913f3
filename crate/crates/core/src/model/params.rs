use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub descriptor_dim: usize,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            descriptor_dim: 1024,
            model_dim: 1024,
            num_blocks: 8,
            num_heads: 8,
            mlp_hidden: 4096,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.descriptor_dim,
            self.model_dim,
            self.num_blocks,
            self.num_heads,
            self.mlp_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be ≥ 1: {self:?}")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Canonical parameter names with their shapes, in lexicographic order.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, m, h) = (self.descriptor_dim, self.model_dim, self.mlp_hidden);
        let mut shapes = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        put("input.weight".into(), vec![d, m]);
        put("input.bias".into(), vec![m]);
        for b in 0..self.num_blocks {
            let p = format!("blocks.{b}");
            for attn in ["self_attn", "cross_attn"] {
                for w in ["q", "k", "v", "o"] {
                    put(format!("{p}.{attn}.{w}"), vec![m, m]);
                }
            }
            for norm in ["self_norm", "cross_q_norm", "cross_kv_norm", "mlp_norm"] {
                put(format!("{p}.{norm}.gain"), vec![m]);
                put(format!("{p}.{norm}.bias"), vec![m]);
            }
            put(format!("{p}.mlp.fc1.weight"), vec![m, h]);
            put(format!("{p}.mlp.fc1.bias"), vec![h]);
            put(format!("{p}.mlp.fc2.weight"), vec![h, m]);
            put(format!("{p}.mlp.fc2.bias"), vec![m]);
        }
        put("pool.latent".into(), vec![m]);
        put("pool.kv_norm.gain".into(), vec![m]);
        put("pool.kv_norm.bias".into(), vec![m]);
        for w in ["q", "k", "v", "o"] {
            put(format!("pool.attn.{w}"), vec![m, m]);
        }
        put("output.weight".into(), vec![m, d]);
        put("output.bias".into(), vec![d]);
        put("loss.log_t".into(), vec![1]);
        put("loss.b".into(), vec![1]);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub weight_std: f64,
    pub temperature: f64,
    pub bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            weight_std: 0.02,
            temperature: 10.0,
            bias: -10.0,
        }
    }
}

/// All learnable tensors keyed by canonical name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn is_norm(name: &str) -> bool {
    name.contains("_norm.")
}

fn is_bias_vector(name: &str) -> bool {
    name.ends_with(".bias")
}

impl Parameters {
    pub fn init(config: ModelConfig, init: InitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(init.temperature > 0.0) {
            return Err(Error::Config("initial temperature must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name == "loss.log_t" {
                Tensor::filled(&shape, init.temperature.ln())
            } else if name == "loss.b" {
                Tensor::filled(&shape, init.bias)
            } else if is_norm(&name) && name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else if is_bias_vector(&name) {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, init.weight_std, &mut rng)
            };
            tensors.insert(name, t);
        }
        Ok(Self { config, tensors })
    }

    /// Assembles parameters from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        for (name, shape) in &shapes {
            match tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        tensors.retain(|k, _| shapes.contains_key(k));
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn temperature(&self) -> f64 {
        self.get("loss.log_t").item().exp()
    }

    /// Bias in the `sigmoid(t·s + b)` convention used for scoring. The
    /// contrastive losses take `t·s − b`, so they receive the negation.
    pub fn bias(&self) -> f64 {
        self.get("loss.b").item()
    }

    /// Weight decay applies to everything except loss scalars, the latent
    /// query and layer-norm affine terms.
    pub fn decays(name: &str) -> bool {
        !(name.starts_with("loss.") || name == "pool.latent" || is_norm(name))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
