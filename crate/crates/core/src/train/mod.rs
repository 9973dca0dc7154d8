//! Reverse-mode gradients, AdamW, backbone freezing and the training loop.

pub mod gradcheck;
mod optim;
mod tape;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::vit::{is_head, ModelParams};

pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use tape::{cross_entropy_loss, Gradients, Tape, Var};
pub use trainer::{
    accuracy, batch_gradients, predict_logits, prepare_eval, sample_gradients, train,
    train_step, EpochRecord, TrainOutcome,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Only the classification head is trained.
    #[default]
    HeadOnly,
    Full,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_only" => Ok(Self::HeadOnly),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown freeze mode `{other}` (expected head_only or full)"
            ))),
        }
    }
}

impl std::fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::HeadOnly => "head_only",
            Self::Full => "full",
        })
    }
}

pub fn set_freeze<T: Scalar>(params: &mut ModelParams<T>, mode: FreezeMode) {
    match mode {
        FreezeMode::HeadOnly => params.set_trainable(is_head),
        FreezeMode::Full => params.set_trainable(|_| true),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    ValAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_mode: FreezeMode,
    pub selection_metric: SelectionMetric,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            freeze_mode: FreezeMode::default(),
            selection_metric: SelectionMetric::default(),
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use crate::vit::{count_parameters, ViTConfig};

    #[test]
    fn freeze_modes() {
        let cfg = ViTConfig::tiny(3);
        let mut p = ModelParams::<f32>::zeros(&cfg).unwrap();
        set_freeze(&mut p, FreezeMode::HeadOnly);
        assert_eq!(count_parameters(&p, true), 32 * 3 + 3);
        set_freeze(&mut p, FreezeMode::Full);
        assert_eq!(count_parameters(&p, true), count_parameters(&p, false));
    }

    #[test]
    fn head_only_trainable_count_for_base() {
        // Only shapes matter; build the head of a ViT-Base layout directly.
        let mut p = ModelParams::<f32>::new();
        p.insert("head.weight", Tensor::zeros(&[768, 3]));
        p.insert("head.bias", Tensor::zeros(&[3]));
        p.insert("final_norm.scale", Tensor::zeros(&[768]));
        set_freeze(&mut p, FreezeMode::HeadOnly);
        assert_eq!(count_parameters(&p, true), 2_307);
    }

    #[test]
    fn head_only_backbone_is_bitwise_constant_over_steps() {
        let cfg = ViTConfig::tiny(2);
        let mut p = ModelParams::<f32>::init(&cfg, &mut Rng::new(4)).unwrap();
        set_freeze(&mut p, FreezeMode::HeadOnly);
        let before = p.clone();
        let mut state = AdamWState::new(AdamWConfig {
            lr: 0.05,
            ..Default::default()
        });
        for step in 0..100 {
            let grads = p
                .trainable_names()
                .map(|n| {
                    let shape = p.tensor(n).unwrap().shape().to_vec();
                    (n.to_string(), Tensor::full(&shape, (step as f32).sin()))
                })
                .collect();
            adamw_step(&mut p, &grads, &mut state).unwrap();
        }
        for (name, param) in before.iter().filter(|(n, _)| !is_head(n)) {
            assert_eq!(p.tensor(name).unwrap().data(), param.tensor.data());
        }
    }

    #[test]
    fn plan_validation_and_parsing() {
        assert!(TrainPlan::default().validate().is_ok());
        assert_eq!(TrainPlan::default().epochs, 50);
        assert!(TrainPlan { batch_size: 0, ..Default::default() }.validate().is_err());
        assert_eq!("full".parse::<FreezeMode>().unwrap(), FreezeMode::Full);
        assert!("partial".parse::<FreezeMode>().is_err());
    }
}
