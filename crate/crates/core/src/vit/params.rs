use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::ViTConfig;

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn is_head(name: &str) -> bool {
    name == HEAD_WEIGHT || name == HEAD_BIAS
}

/// Name of a per-layer parameter, e.g. `layer_param(3, "attn.w_q")` is
/// `encoder.3.attn.w_q`.
pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("encoder.{layer}.{suffix}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every parameter of the model with its shape and initializer, in
/// architecture order.
pub fn layout(config: &ViTConfig) -> Vec<ParamSpec> {
    use Init::*;
    let d = config.hidden_dim;
    let mut specs = vec![
        ParamSpec::new("embed.patch.weight", &[config.patch_dim(), d], TruncNormal),
        ParamSpec::new("embed.patch.bias", &[d], Zeros),
        ParamSpec::new("embed.cls", &[1, d], TruncNormal),
        ParamSpec::new("embed.pos", &[config.num_patches() + 1, d], TruncNormal),
    ];
    for l in 0..config.num_layers {
        let p = |s: &str| layer_param(l, s);
        specs.extend([
            ParamSpec::new(p("ln1.scale"), &[d], Ones),
            ParamSpec::new(p("ln1.shift"), &[d], Zeros),
            ParamSpec::new(p("attn.w_q"), &[d, d], TruncNormal),
            ParamSpec::new(p("attn.b_q"), &[d], Zeros),
            ParamSpec::new(p("attn.w_k"), &[d, d], TruncNormal),
            ParamSpec::new(p("attn.b_k"), &[d], Zeros),
            ParamSpec::new(p("attn.w_v"), &[d, d], TruncNormal),
            ParamSpec::new(p("attn.b_v"), &[d], Zeros),
            ParamSpec::new(p("attn.w_o"), &[d, d], TruncNormal),
            ParamSpec::new(p("attn.b_o"), &[d], Zeros),
            ParamSpec::new(p("ln2.scale"), &[d], Ones),
            ParamSpec::new(p("ln2.shift"), &[d], Zeros),
            ParamSpec::new(p("mlp.w_1"), &[d, config.mlp_dim], TruncNormal),
            ParamSpec::new(p("mlp.b_1"), &[config.mlp_dim], Zeros),
            ParamSpec::new(p("mlp.w_2"), &[config.mlp_dim, d], TruncNormal),
            ParamSpec::new(p("mlp.b_2"), &[d], Zeros),
        ]);
    }
    specs.extend([
        ParamSpec::new("final_norm.scale", &[d], Ones),
        ParamSpec::new("final_norm.shift", &[d], Zeros),
        ParamSpec::new(HEAD_WEIGHT, &[d, config.num_classes], Zeros),
        ParamSpec::new(HEAD_BIAS, &[config.num_classes], Zeros),
    ]);
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter set, kept in sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Fresh parameters: truncated normal (σ = 0.02) for projections and
    /// embeddings, zeros for biases and the head, unit layer-norm scales.
    /// All parameters start trainable.
    pub fn init(config: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Self::new();
        for spec in layout(config) {
            let tensor = match spec.init {
                Init::TruncNormal => {
                    Tensor::from_fn(&spec.shape, |_| T::of(rng.truncated_normal(INIT_STD)))
                }
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
            };
            params.insert(spec.name, tensor);
        }
        Ok(params)
    }

    /// All-zero parameters with the configured shapes.
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Self::new();
        for spec in layout(config) {
            params.insert(spec.name, Tensor::zeros(&spec.shape));
        }
        Ok(params)
    }

    /// Inserts (or replaces) a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(
            name.into(),
            Param {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_trainable(&mut self, mut f: impl FnMut(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = f(name);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks that names and shapes match `config` exactly.
    pub fn check_layout(&self, config: &ViTConfig) -> Result<()> {
        let specs = layout(config);
        for spec in &specs {
            let p = self.get(&spec.name)?;
            if p.tensor.shape() != spec.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: spec.name.clone(),
                    reason: format!(
                        "shape {:?} does not match config (expected {:?})",
                        p.tensor.shape(),
                        spec.shape
                    ),
                });
            }
        }
        if self.len() != specs.len() {
            let extra = self
                .names()
                .find(|n| !specs.iter().any(|s| s.name == *n))
                .unwrap_or_default();
            return Err(Error::TensorShape {
                name: extra.to_string(),
                reason: "parameter not part of the configured architecture".into(),
            });
        }
        Ok(())
    }
}

/// Total element count, optionally restricted to trainable parameters.
pub fn count_parameters<T: Scalar>(params: &ModelParams<T>, trainable_only: bool) -> usize {
    params
        .iter()
        .filter(|(_, p)| !trainable_only || p.trainable)
        .map(|(_, p)| p.tensor.numel())
        .sum()
}
