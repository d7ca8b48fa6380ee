//! Toy vision transformer producing a global descriptor per image crop.
//!
//! The forward pass records every post-softmax attention map plus the
//! activations needed to differentiate the descriptor with respect to those
//! maps, treating each map as an independent leaf. That gradient path (no
//! backprop through softmax into Q/K) is what the explainability and
//! refinement modules consume; full parameter gradients for training live in
//! [`grad`] as a separate reverse pass.

mod forward;
mod grad;
mod io;

pub use forward::{descriptor_from_attention, encode, AttentionTrace};
pub use grad::{attention_gradient, attention_jacobian, backward_to_params, GradStore};
pub use io::{load_weights, persist_weights};

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{matmul_acc, Tensor};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Architecture of the toy encoder. Defaults give 17 tokens (1 CLS + 4x4
/// patches) and a 64-dimensional descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_side: 8,
            layers: 2,
            heads: 2,
            embed_dim: 64,
            mlp_ratio: 2.0,
            channels: 3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_side {} must be a positive multiple of patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.embed_dim == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig(
                "layers, embed_dim and channels must be positive".into(),
            ));
        }
        if self.mlp_dim() == 0 {
            return Err(Error::InvalidConfig("mlp_ratio too small".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// CLS token plus one token per patch.
    pub fn n_tokens(&self) -> usize {
        1 + self.n_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }
}

/// Named tensors of one encoder instance, plus its architecture.
///
/// Immutable during encoding; the trainer produces an updated copy.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    config: EncoderConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn layer_prefix(l: usize) -> String {
    format!("layer{:02}", l)
}

impl WeightStore {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::WeightsFormat(format!("missing tensor {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::WeightsFormat(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub(crate) fn insert(&mut self, name: String, t: Tensor) {
        self.tensors.insert(name, t);
    }

    pub(crate) fn from_parts(config: EncoderConfig, tensors: BTreeMap<String, Tensor>) -> Self {
        Self { config, tensors }
    }

    pub fn has_adapters(&self) -> bool {
        self.tensors.keys().any(|k| k.ends_with(".lora_a"))
    }

    /// Names of the low-rank adapter tensors, if present.
    pub fn adapter_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| k.ends_with(".lora_a") || k.ends_with(".lora_b"))
            .cloned()
            .collect()
    }

    /// Attach rank-`rank` additive adapters to the Q, K, V and output
    /// projections of every layer. `lora_b` starts at zero so the effective
    /// weights are unchanged until training moves them.
    pub fn add_adapters(&mut self, rank: usize, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be positive".into()));
        }
        let d = self.config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_7261);
        for l in 0..self.config.layers {
            for mat in ["wq", "wk", "wv", "wo"] {
                let base = format!("{}.attn.{}", layer_prefix(l), mat);
                let a = uniform_tensor(&mut rng, &[rank, d], 1.0 / (d as f64).sqrt());
                let b = Tensor::zeros(&[d, rank]);
                self.tensors.insert(format!("{base}.lora_a"), a);
                self.tensors.insert(format!("{base}.lora_b"), b);
            }
        }
        Ok(())
    }

    /// Projection matrix with its adapter folded in, when one exists.
    pub(crate) fn effective_mat(&self, name: &str) -> Result<Cow<'_, [f64]>> {
        let base = self.tensor(name)?;
        let a = self.tensors.get(&format!("{name}.lora_a"));
        let b = self.tensors.get(&format!("{name}.lora_b"));
        match (a, b) {
            (Some(a), Some(b)) => {
                let d_in = b.shape()[0];
                let rank = b.shape()[1];
                let d_out = a.shape()[1];
                let mut eff = base.data().to_vec();
                matmul_acc(&mut eff, b.data(), a.data(), d_in, rank, d_out);
                Ok(Cow::Owned(eff))
            }
            (None, None) => Ok(Cow::Borrowed(base.data())),
            _ => Err(Error::WeightsFormat(format!(
                "adapter pair for {name} is incomplete"
            ))),
        }
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/len agree by construction")
}

/// Deterministic seeded initialization: same seed, same bytes.
pub fn init_encoder(config: &EncoderConfig) -> Result<WeightStore> {
    config.validate()?;
    let d = config.embed_dim;
    let n = config.n_tokens();
    let m = config.mlp_dim();
    let pd = config.patch_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = BTreeMap::new();

    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    tensors.insert("cls".to_string(), uniform_tensor(&mut rng, &[d], inv(d)));
    tensors.insert(
        "pos".to_string(),
        uniform_tensor(&mut rng, &[n, d], inv(d)),
    );
    tensors.insert(
        "patch_proj.w".to_string(),
        uniform_tensor(&mut rng, &[pd, d], inv(pd)),
    );
    tensors.insert("patch_proj.b".to_string(), Tensor::zeros(&[d]));

    for l in 0..config.layers {
        let p = layer_prefix(l);
        tensors.insert(format!("{p}.ln1.g"), ones(&[d]));
        tensors.insert(format!("{p}.ln1.b"), Tensor::zeros(&[d]));
        for mat in ["wq", "wk", "wv", "wo"] {
            tensors.insert(
                format!("{p}.attn.{mat}"),
                uniform_tensor(&mut rng, &[d, d], inv(d)),
            );
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            tensors.insert(format!("{p}.attn.{bias}"), Tensor::zeros(&[d]));
        }
        tensors.insert(format!("{p}.ln2.g"), ones(&[d]));
        tensors.insert(format!("{p}.ln2.b"), Tensor::zeros(&[d]));
        tensors.insert(
            format!("{p}.mlp.w1"),
            uniform_tensor(&mut rng, &[d, m], inv(d)),
        );
        tensors.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[m]));
        tensors.insert(
            format!("{p}.mlp.w2"),
            uniform_tensor(&mut rng, &[m, d], inv(m)),
        );
        tensors.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[d]));
    }

    tensors.insert("final_ln.g".to_string(), ones(&[d]));
    tensors.insert("final_ln.b".to_string(), Tensor::zeros(&[d]));

    Ok(WeightStore {
        config: config.clone(),
        tensors,
    })
}

fn ones(shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = 1.0);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_stores() {
        let cfg = EncoderConfig {
            seed: 7,
            ..Default::default()
        };
        let a = init_encoder(&cfg).unwrap();
        let b = init_encoder(&cfg).unwrap();
        assert_eq!(a.tensors(), b.tensors());
    }

    #[test]
    fn default_config_token_count() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.n_tokens(), 17);
        assert_eq!(cfg.head_dim(), 32);
        let store = init_encoder(&cfg).unwrap();
        // 4 stem tensors + 16 per layer x 2 layers + 2 final-norm tensors
        assert_eq!(store.tensors().len(), 4 + 16 * 2 + 2);
    }

    #[test]
    fn invalid_divisibility_rejected() {
        let cfg = EncoderConfig {
            image_side: 30,
            ..Default::default()
        };
        assert!(init_encoder(&cfg).is_err());
        let cfg = EncoderConfig {
            embed_dim: 65,
            ..Default::default()
        };
        assert!(init_encoder(&cfg).is_err());
    }

    #[test]
    fn adapters_fold_to_identity_at_init() {
        let cfg = EncoderConfig::default();
        let mut store = init_encoder(&cfg).unwrap();
        store.add_adapters(4, 3).unwrap();
        let eff = store.effective_mat("layer00.attn.wq").unwrap();
        let base = store.tensor("layer00.attn.wq").unwrap();
        assert_eq!(eff.as_ref(), base.data());
        assert_eq!(store.adapter_names().len(), 2 * 4 * cfg.layers);
    }
}
