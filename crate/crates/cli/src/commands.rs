//! The five commands. Each takes a resolved `RunConfig` and writes results
//! under `output_dir`; human-readable lines go to `out`/`err`.
//!
//! Randomness derives from `seed` only: `init` seeds a fresh model, `head`
//! a replacement head, `split` the fold assignment, and training uses
//! `shuffle`/`augment`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use vitforge_core::checkpoint::{replace_head, Checkpoint};
use vitforge_core::data::{
    decode_image, kfold_split, kfold_split_stratified, load_dataset, preprocess_eval,
    DatasetIndex, FoldSplit, LabeledSet,
};
use vitforge_core::metrics::{aggregate_folds, argmax, evaluate_logits, MetricsRow};
use vitforge_core::train::{predict_logits, prepare_eval, train};
use vitforge_core::vit::{count_parameters, layout};
use vitforge_core::{derive_seed, ModelParams, Rng, ViTConfig};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{format_table, write_history_csv, write_json, write_metrics_csv, JsonReport};

pub const EVAL_LABEL: &str = "all";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";

struct Data {
    index: DatasetIndex,
    set: LabeledSet,
    positive: usize,
}

fn load_data(cfg: &RunConfig) -> Result<Data, CliError> {
    let index = load_dataset(&cfg.dataset_root).map_err(CliError::Dataset)?;
    if index.num_classes() != cfg.num_classes {
        return Err(CliError::Config(format!(
            "dataset {} has {} classes ({}) but num_classes = {}",
            cfg.dataset_root.display(),
            index.num_classes(),
            index.classes.join(", "),
            cfg.num_classes
        )));
    }
    let positive = match &cfg.positive_class {
        None => 0,
        Some(name) => index.class_index(name).ok_or_else(|| {
            CliError::Config(format!(
                "positive_class `{name}` is not one of: {}",
                index.classes.join(", ")
            ))
        })?,
    };
    let set = index.load_images().map_err(CliError::Dataset)?;
    Ok(Data {
        index,
        set,
        positive,
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(CliError::Checkpoint)
}

/// Starting weights: `checkpoint_in` (head replaced if its class count
/// differs) or a seeded random init.
fn initial_model(cfg: &RunConfig) -> Result<(ViTConfig, ModelParams), CliError> {
    match &cfg.checkpoint_in {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            cfg.check_against(&ckpt.config)?;
            if ckpt.config.num_classes != cfg.num_classes {
                let mut rng = Rng::new(derive_seed(cfg.seed, "head", 0));
                ckpt = replace_head(&ckpt, cfg.num_classes, &mut rng).map_err(CliError::Run)?;
            }
            Ok((ckpt.config, ckpt.params))
        }
        None => {
            let config = cfg.vit_config();
            let mut rng = Rng::new(derive_seed(cfg.seed, "init", 0));
            let params = ModelParams::init(&config, &mut rng).map_err(CliError::Run)?;
            Ok((config, params))
        }
    }
}

/// Checkpoint for evaluation-only commands; `checkpoint_in` is required.
fn trained_model(cfg: &RunConfig, command: &str) -> Result<Checkpoint, CliError> {
    let path = cfg
        .checkpoint_in
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{command} needs checkpoint_in")))?;
    let ckpt = load_checkpoint(path)?;
    cfg.check_against(&ckpt.config)?;
    if ckpt.config.num_classes != cfg.num_classes {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes but num_classes = {}",
            ckpt.config.num_classes, cfg.num_classes
        )));
    }
    Ok(ckpt)
}

fn split(cfg: &RunConfig, labels: &[usize]) -> Result<FoldSplit, CliError> {
    if cfg.k_folds > labels.len() {
        return Err(CliError::Config(format!(
            "k_folds = {} exceeds the {} samples in the dataset",
            cfg.k_folds,
            labels.len()
        )));
    }
    let seed = derive_seed(cfg.seed, "split", 0);
    let s = if cfg.stratified {
        kfold_split_stratified(labels, cfg.k_folds, seed)
    } else {
        kfold_split(labels.len(), cfg.k_folds, seed)
    };
    s.map_err(|e| CliError::Config(e.to_string()))
}

fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::output(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(RUN_CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(|e| CliError::output(&path, e))
}

fn evaluate(
    label: String,
    params: &ModelParams,
    config: &ViTConfig,
    cfg: &RunConfig,
    set: &LabeledSet,
    positive: usize,
) -> Result<MetricsRow, CliError> {
    let images = prepare_eval(set, &cfg.augment(config.image_size)).map_err(CliError::Dataset)?;
    let logits = predict_logits(params, config, &images).map_err(CliError::Run)?;
    evaluate_logits(label, &logits, &set.labels, positive).map_err(CliError::Run)
}

fn json_report<'a>(
    command: &'a str,
    cfg: &RunConfig,
    data: &'a Data,
    rows: Vec<&'a MetricsRow>,
) -> JsonReport<'a> {
    JsonReport {
        command,
        seed: cfg.seed,
        num_classes: cfg.num_classes,
        classes: &data.index.classes,
        positive_class: (cfg.num_classes == 2).then(|| data.index.classes[data.positive].as_str()),
        rows,
    }
}

fn io(e: std::io::Error) -> CliError {
    CliError::output("<stdout>", e)
}

/// k-fold cross-validation; writes metrics.csv, metrics.json and one
/// history file per fold.
pub fn crossval(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let folds = split(cfg, &data.set.labels)?;
    let (config, init) = initial_model(cfg)?;
    let aug = cfg.augment(config.image_size);
    let plan = cfg.train_plan();
    prepare_output(cfg)?;

    let mut rows = Vec::with_capacity(folds.k());
    for f in 0..folds.k() {
        let train_set = data.set.subset(&folds.train_indices(f));
        let val_set = data.set.subset(&folds.fold(f));
        let outcome =
            train(&train_set, &val_set, &init, &config, &plan, &aug).map_err(CliError::Run)?;
        let history = cfg.output_dir.join(format!("history_fold{}.csv", f + 1));
        write_history_csv(&history, &outcome.history)?;
        let row = evaluate(
            format!("fold{}", f + 1),
            &outcome.params,
            &config,
            cfg,
            &val_set,
            data.positive,
        )?;
        writeln!(
            err,
            "fold {}/{}: best epoch {} of {}, accuracy {:.4}",
            f + 1,
            folds.k(),
            outcome.best_epoch,
            plan.epochs,
            row.accuracy
        )
        .map_err(io)?;
        rows.push(row);
    }
    let report = aggregate_folds(rows).map_err(CliError::Run)?;
    write_metrics_csv(&cfg.output_dir.join("metrics.csv"), report.rows())?;
    let json = json_report("crossval", cfg, &data, report.rows().collect());
    write_json(&cfg.output_dir.join("metrics.json"), &json)?;
    write!(out, "{}", format_table(report.rows())).map_err(io)
}

/// Trains on one 80/20-style split (fold 1 of `k_folds` held out) and saves
/// the best checkpoint and history.csv.
pub fn train_cmd(cfg: &RunConfig, out: &mut dyn Write, _err: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let folds = split(cfg, &data.set.labels)?;
    let (config, init) = initial_model(cfg)?;
    let aug = cfg.augment(config.image_size);
    prepare_output(cfg)?;

    let train_set = data.set.subset(&folds.train_indices(0));
    let val_set = data.set.subset(&folds.fold(0));
    let outcome = train(&train_set, &val_set, &init, &config, &cfg.train_plan(), &aug)
        .map_err(CliError::Run)?;
    write_history_csv(&cfg.output_dir.join("history.csv"), &outcome.history)?;
    let path = cfg.checkpoint_out();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::output(parent, e))?;
    }
    let ckpt = Checkpoint {
        config,
        params: outcome.params,
        optimizer: Some(outcome.optimizer),
    };
    ckpt.save(&path).map_err(CliError::Checkpoint)?;
    writeln!(
        out,
        "best epoch {} (val accuracy {:.4}), saved {}",
        outcome.best_epoch,
        outcome.best_val_accuracy,
        path.display()
    )
    .map_err(io)
}

/// Evaluates `checkpoint_in` on the whole dataset (one row labelled `all`).
pub fn eval(cfg: &RunConfig, out: &mut dyn Write, _err: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = trained_model(cfg, "eval")?;
    let data = load_data(cfg)?;
    prepare_output(cfg)?;
    let row = evaluate(
        EVAL_LABEL.into(),
        &ckpt.params,
        &ckpt.config,
        cfg,
        &data.set,
        data.positive,
    )?;
    write_metrics_csv(&cfg.output_dir.join("metrics.csv"), [&row])?;
    write_json(
        &cfg.output_dir.join("metrics.json"),
        &json_report("eval", cfg, &data, vec![&row]),
    )?;
    write!(out, "{}", format_table([&row])).map_err(io)
}

/// `class_names`, else the dataset's class directories, else `class<i>`.
fn class_names(cfg: &RunConfig) -> Vec<String> {
    if !cfg.class_names.is_empty() {
        return cfg.class_names.clone();
    }
    match load_dataset(&cfg.dataset_root) {
        Ok(index) if index.num_classes() == cfg.num_classes => index.classes,
        _ => (0..cfg.num_classes).map(|i| format!("class{i}")).collect(),
    }
}

/// One line per readable image: `path<TAB>class<TAB>name=prob ...`.
/// Unreadable images produce a warning on `err` and are counted; only a
/// run where every image fails is an error.
pub fn predict(
    cfg: &RunConfig,
    images: &[PathBuf],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<usize, CliError> {
    if images.is_empty() {
        return Err(CliError::Config("predict needs at least one image path".into()));
    }
    let ckpt = trained_model(cfg, "predict")?;
    let names = class_names(cfg);
    let aug = cfg.augment(ckpt.config.image_size);
    let mut skipped = 0;
    for path in images {
        let prepared = decode_image(path).and_then(|img| preprocess_eval(&img, &aug));
        let image = match prepared {
            Ok(t) => t,
            Err(e) => {
                writeln!(err, "warning: skipping {}: {e}", path.display()).map_err(io)?;
                skipped += 1;
                continue;
            }
        };
        let logits = predict_logits(&ckpt.params, &ckpt.config, &[image]).map_err(CliError::Run)?;
        let probs = softmax(logits.data());
        let best = argmax(&probs);
        let listed: Vec<String> = names
            .iter()
            .zip(&probs)
            .map(|(n, p)| format!("{n}={p:.6}"))
            .collect();
        writeln!(out, "{}\t{}\t{}", path.display(), names[best], listed.join(" ")).map_err(io)?;
    }
    if skipped > 0 {
        writeln!(err, "warning: skipped {skipped} of {} images", images.len()).map_err(io)?;
    }
    if skipped == images.len() {
        return Err(CliError::Dataset(vitforge_core::Error::Dataset(
            "no image could be read".into(),
        )));
    }
    Ok(skipped)
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Loads a checkpoint, checks its parameter count against the architecture
/// and that re-encoding reproduces the file byte for byte.
pub fn convert_check(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(|source| {
        CliError::Checkpoint(vitforge_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    let ckpt = Checkpoint::decode(&bytes).map_err(CliError::Checkpoint)?;
    let c = ckpt.config;
    let expected: usize = layout(&c).iter().map(|s| s.numel()).sum();
    let total = count_parameters(&ckpt.params, false);
    if total != expected {
        return Err(CliError::Check(format!(
            "{total} parameters, architecture requires {expected}"
        )));
    }
    let head = c.hidden_dim * c.num_classes + c.num_classes;
    if ckpt.encode() != bytes {
        return Err(CliError::Check("re-serialized bytes differ from the file".into()));
    }
    let lines = [
        format!("file: {}", path.display()),
        format!(
            "config: image {} channels {} patch {} hidden {} mlp {} heads {} layers {} classes {}",
            c.image_size, c.channels, c.patch_size, c.hidden_dim, c.mlp_dim, c.num_heads, c.num_layers, c.num_classes
        ),
        format!("tensors: {}", ckpt.params.len()),
        format!("parameters: {total} (backbone {}, head {head})", total - head),
        format!(
            "optimizer state: {}",
            if ckpt.optimizer.is_some() { "present" } else { "absent" }
        ),
        "re-serialization: byte-identical".to_string(),
        "ok".to_string(),
    ];
    for l in lines {
        writeln!(out, "{l}").map_err(io)?;
    }
    Ok(())
}
