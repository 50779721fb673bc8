//! Named, ordered parameter storage for the encoder, the convolution head
//! and the across-transformer.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::{seeded, truncated_normal};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::EncoderConfig;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Prefix shared by every across-transformer parameter.
pub const ACROSS_PREFIX: &str = "across.";

fn block_layout(prefix: &str, dim: usize, mlp: usize) -> Vec<(String, Vec<usize>, Init)> {
    let p = |s: &str| format!("{prefix}.{s}");
    vec![
        (p("norm1.weight"), vec![dim], Init::Ones),
        (p("norm1.bias"), vec![dim], Init::Zeros),
        (p("attn.qkv.weight"), vec![dim, 3 * dim], Init::TruncNormal),
        (p("attn.qkv.bias"), vec![3 * dim], Init::Zeros),
        (p("attn.proj.weight"), vec![dim, dim], Init::TruncNormal),
        (p("attn.proj.bias"), vec![dim], Init::Zeros),
        (p("norm2.weight"), vec![dim], Init::Ones),
        (p("norm2.bias"), vec![dim], Init::Zeros),
        (p("mlp.fc1.weight"), vec![dim, mlp], Init::TruncNormal),
        (p("mlp.fc1.bias"), vec![mlp], Init::Zeros),
        (p("mlp.fc2.weight"), vec![mlp, dim], Init::TruncNormal),
        (p("mlp.fc2.bias"), vec![dim], Init::Zeros),
    ]
}

fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let patch_len = cfg.patch_size * cfg.patch_size * cfg.channels;
    let mut out = vec![
        (
            "patch_embed.weight".to_string(),
            vec![patch_len, d],
            Init::TruncNormal,
        ),
        ("patch_embed.bias".to_string(), vec![d], Init::Zeros),
        ("cls_token".to_string(), vec![1, d], Init::TruncNormal),
        (
            "pos_embed".to_string(),
            vec![cfg.num_patches() + 1, d],
            Init::Zeros,
        ),
    ];
    for l in 0..cfg.layers {
        out.extend(block_layout(&format!("blocks.{l}"), d, d * cfg.mlp_ratio));
    }
    out.push(("norm.weight".into(), vec![d], Init::Ones));
    out.push(("norm.bias".into(), vec![d], Init::Zeros));
    let c = cfg.num_classes;
    out.push(("head.weight".into(), vec![c, d, 3, 3], Init::TruncNormal));
    out.push(("head.bias".into(), vec![c], Init::Zeros));
    let dx = cfg.across_dim;
    out.push(("across.in.weight".into(), vec![c, dx], Init::TruncNormal));
    out.push(("across.in.bias".into(), vec![dx], Init::Zeros));
    out.extend(block_layout("across.block", dx, dx * cfg.mlp_ratio));
    out.push(("across.out.weight".into(), vec![dx, c], Init::TruncNormal));
    out.push(("across.out.bias".into(), vec![c], Init::Zeros));
    out
}

/// Every learnable tensor of the model, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: EncoderConfig,
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    /// Truncated-normal (std 0.02) projections, zero biases and position
    /// embeddings, unit layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let tensors = layout(config)
            .into_iter()
            .map(|(name, dims, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&dims),
                    Init::Ones => Tensor::ones(&dims),
                    Init::TruncNormal => {
                        Tensor::from_fn(&dims, |_| truncated_normal(&mut rng, INIT_STD))
                    }
                };
                (name, t)
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: &EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this configuration, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut tensors = IndexMap::new();
        for ((name, dims, _), (got_name, t)) in expected.into_iter().zip(named) {
            if name != got_name || t.dims() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {dims:?}, found {got_name} {:?}",
                    t.dims()
                )));
            }
            tensors.insert(name, t);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if slot.dims() != value.dims() {
            return Err(Error::Invalid(format!(
                "parameter {name} has dims {:?}, got {:?}",
                slot.dims(),
                value.dims()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Puts every parameter on the tape as a trainable leaf. Both Siamese
    /// branches then read the same node, so their gradients add up in one
    /// accumulator per parameter.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Parameters living on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Wraps vars that are already on a tape, in parameter order.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::Invalid(format!(
                "{} names for {} vars",
                names.len(),
                vars.len()
            )));
        }
        Ok(BoundParams {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
