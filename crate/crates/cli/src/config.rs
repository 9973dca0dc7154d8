//! Run configuration: line-oriented `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and
//! repeated keys are rejected. Command-line `--set key=value` overrides are
//! applied after the file, then `--seed`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vitforge_core::data::AugmentConfig;
use vitforge_core::train::{AdamWConfig, FreezeMode, SelectionMetric, TrainPlan};
use vitforge_core::ViTConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelPreset {
    VitBase,
    Tiny,
}

impl FromStr for ModelPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vit_base" => Ok(Self::VitBase),
            "tiny" => Ok(Self::Tiny),
            _ => Err("expected vit_base or tiny".into()),
        }
    }
}

impl std::fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::VitBase => "vit_base",
            Self::Tiny => "tiny",
        })
    }
}

/// Architecture keys that can override the preset.
pub const ARCH_KEYS: [&str; 7] = [
    "image_size",
    "channels",
    "patch_size",
    "hidden_dim",
    "mlp_dim",
    "num_heads",
    "num_layers",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    /// Initial weights; a seeded random init when absent.
    pub checkpoint_in: Option<PathBuf>,
    /// Defaults to `<output_dir>/model.vitc`.
    pub checkpoint_out: Option<PathBuf>,
    pub num_classes: usize,
    /// Class name scored as positive in binary metrics; the first class when absent.
    pub positive_class: Option<String>,
    /// Names printed by `predict`; taken from the dataset when empty.
    pub class_names: Vec<String>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_mode: FreezeMode,
    pub selection_metric: SelectionMetric,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub k_folds: usize,
    pub stratified: bool,
    pub model: ModelPreset,
    /// Per-field overrides of the preset, in `ARCH_KEYS` order.
    pub arch: [Option<usize>; 7],
    /// Defaults to `round(image_size · 256 / 224)`.
    pub resize_shorter: Option<usize>,
    pub flip_prob: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let plan = TrainPlan::default();
        Self {
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            checkpoint_in: None,
            checkpoint_out: None,
            num_classes: 2,
            positive_class: None,
            class_names: Vec::new(),
            seed: plan.seed,
            epochs: plan.epochs,
            batch_size: plan.batch_size,
            freeze_mode: plan.freeze_mode,
            selection_metric: plan.selection_metric,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            k_folds: 5,
            stratified: false,
            model: ModelPreset::VitBase,
            arch: [None; 7],
            resize_shorter: None,
            flip_prob: AugmentConfig::default().flip_prob,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                i + 1
            )));
        };
        let key = key.trim().to_string();
        if let Some((first, _, _)) = out.iter().find(|(_, k, _)| *k == key) {
            return Err(CliError::Config(format!(
                "line {}: `{key}` already set on line {first}",
                i + 1
            )));
        }
        out.push((i + 1, key, value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if let Some(i) = ARCH_KEYS.iter().position(|k| *k == key) {
            self.arch[i] = if value.is_empty() {
                None
            } else {
                Some(parse_value(key, value)?)
            };
            return Ok(());
        }
        match key {
            "dataset_root" => self.dataset_root = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint_in" => self.checkpoint_in = optional_path(value),
            "checkpoint_out" => self.checkpoint_out = optional_path(value),
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "positive_class" => {
                self.positive_class = (!value.is_empty()).then(|| value.to_string())
            }
            "class_names" => {
                self.class_names = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "seed" => self.seed = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "freeze_mode" => self.freeze_mode = parse_value(key, value)?,
            "selection_metric" => {
                if value != "val_accuracy" {
                    return Err(CliError::Config(format!(
                        "selection_metric `{value}` not supported (expected val_accuracy)"
                    )));
                }
                self.selection_metric = SelectionMetric::ValAccuracy;
            }
            "lr" => self.lr = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "k_folds" => self.k_folds = parse_value(key, value)?,
            "stratified" => self.stratified = parse_value(key, value)?,
            "model" => {
                self.model = value
                    .parse()
                    .map_err(|e| CliError::Config(format!("model `{value}`: {e}")))?
            }
            "resize_shorter" => {
                self.resize_shorter = if value.is_empty() {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "flip_prob" => self.flip_prob = parse_value(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_lines(text)? {
            cfg.set(&key, &value)
                .map_err(|e| CliError::Config(format!("line {line}: {}", e.message())))?;
        }
        Ok(cfg)
    }

    /// File (if any), then `key=value` overrides, then the seed flag.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_text(&text).map_err(|e| {
                    CliError::Config(format!("{}: {}", p.display(), e.message()))
                })?
            }
            None => Self::default(),
        };
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                CliError::Config(format!("--set expects key=value, got `{item}`"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: vitforge_core::Error| CliError::Config(e.to_string());
        self.vit_config().validate().map_err(core)?;
        self.train_plan().validate().map_err(core)?;
        self.augment(self.vit_config().image_size)
            .validate()
            .map_err(core)?;
        if self.vit_config().channels != 3 {
            return Err(CliError::Config(
                "channels must be 3 (images are decoded as RGB)".into(),
            ));
        }
        if self.k_folds < 2 {
            return Err(CliError::Config("k_folds must be at least 2".into()));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(CliError::Config(format!(
                "class_names lists {} names but num_classes = {}",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    fn preset(&self) -> ViTConfig {
        match self.model {
            ModelPreset::VitBase => ViTConfig::vit_base(self.num_classes),
            ModelPreset::Tiny => ViTConfig::tiny(self.num_classes),
        }
    }

    fn arch_fields(c: &mut ViTConfig) -> [&mut usize; 7] {
        [
            &mut c.image_size,
            &mut c.channels,
            &mut c.patch_size,
            &mut c.hidden_dim,
            &mut c.mlp_dim,
            &mut c.num_heads,
            &mut c.num_layers,
        ]
    }

    /// Preset plus explicit overrides.
    pub fn vit_config(&self) -> ViTConfig {
        let mut c = self.preset();
        for (field, value) in Self::arch_fields(&mut c).into_iter().zip(self.arch) {
            if let Some(v) = value {
                *field = v;
            }
        }
        c
    }

    /// Checks explicit architecture overrides against a loaded checkpoint's
    /// architecture; the preset is ignored.
    pub fn check_against(&self, loaded: &ViTConfig) -> Result<(), CliError> {
        let mut c = *loaded;
        for ((key, field), value) in ARCH_KEYS.iter().zip(Self::arch_fields(&mut c)).zip(self.arch) {
            if let Some(v) = value.filter(|v| v != field) {
                return Err(CliError::Config(format!(
                    "{key} = {v} conflicts with the checkpoint ({field})"
                )));
            }
        }
        Ok(())
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
            freeze_mode: self.freeze_mode,
            selection_metric: self.selection_metric,
            seed: self.seed,
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
        }
    }

    pub fn augment(&self, image_size: usize) -> AugmentConfig {
        let base = AugmentConfig::for_image_size(image_size);
        AugmentConfig {
            resize_shorter: self.resize_shorter.unwrap_or(base.resize_shorter),
            flip_prob: self.flip_prob,
            ..base
        }
    }

    pub fn checkpoint_out(&self) -> PathBuf {
        self.checkpoint_out
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.vitc"))
    }

    /// Every key with its current value, parseable by `from_text`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("dataset_root", self.dataset_root.display().to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("checkpoint_in", path(&self.checkpoint_in));
        kv("checkpoint_out", path(&self.checkpoint_out));
        kv("num_classes", self.num_classes.to_string());
        kv("positive_class", self.positive_class.clone().unwrap_or_default());
        kv("class_names", self.class_names.join(","));
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("freeze_mode", self.freeze_mode.to_string());
        kv("selection_metric", "val_accuracy".to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("k_folds", self.k_folds.to_string());
        kv("stratified", self.stratified.to_string());
        kv("model", self.model.to_string());
        for (k, v) in ARCH_KEYS.iter().zip(self.arch) {
            kv(k, v.map(|v| v.to_string()).unwrap_or_default());
        }
        kv("resize_shorter", self.resize_shorter.map(|v| v.to_string()).unwrap_or_default());
        kv("flip_prob", self.flip_prob.to_string());
        s
    }
}
