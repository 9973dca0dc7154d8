#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vitforge_core::checkpoint::Checkpoint;
use vitforge_core::data::{encode_pnm, load_dataset, AugmentConfig};
use vitforge_core::train::{prepare_eval, set_freeze, train_step, AdamWConfig, AdamWState, FreezeMode};
use vitforge_core::Rng;
use vitforge_core::vit::layer_param;
use vitforge_core::{ModelParams, Tensor, ViTConfig};

/// 32 solid 32×32 images under `bright/` and `dark/`, 16 each.
pub fn write_toy_dataset(root: &Path) {
    for (class, base) in [("bright", 0.85), ("dark", 0.15)] {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..16 {
            let v = ((base + 0.004 * i as f64) * 255.0).round() as u8;
            let bytes = encode_pnm(32, 32, 3, &vec![v; 32 * 32 * 3]);
            std::fs::write(dir.join(format!("{i:02}.ppm")), bytes).unwrap();
        }
    }
}

/// Overrides for a fast tiny full fine-tune.
pub fn tiny_args(data: &Path, out: &Path) -> Vec<String> {
    [
        "model=tiny".to_string(),
        format!("dataset_root={}", data.display()),
        format!("output_dir={}", out.display()),
        "freeze_mode=full".into(),
        "lr=0.001".into(),
    ]
    .into_iter()
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

pub fn vitforge(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitforge"))
        .args(args)
        .output()
        .expect("spawn vitforge")
}

pub fn args(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

/// A tiny model that classifies solid images by brightness without
/// training: the patch embedding puts the mean normalized intensity in
/// feature 0, layer 0 attention copies it into the class token, everything
/// else is zero, and the head reads the sign of feature 0.
pub fn oracle_checkpoint(path: &Path) -> PathBuf {
    let config = ViTConfig::tiny(2);
    let d = config.hidden_dim;
    let mut params = ModelParams::<f32>::zeros(&config).unwrap();
    for (name, p) in params.iter_mut() {
        if name.ends_with(".scale") {
            p.tensor = Tensor::full(p.tensor.shape(), 1.0);
        }
    }
    let pd = config.patch_dim();
    params.insert(
        "embed.patch.weight",
        Tensor::from_fn(&[pd, d], |i| if i % d == 0 { 1.0 / pd as f32 } else { 0.0 }),
    );
    let identity = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    params.insert(layer_param(0, "attn.w_v"), identity.clone());
    params.insert(layer_param(0, "attn.w_o"), identity);
    params.insert(
        "head.weight",
        Tensor::from_fn(&[d, 2], |i| match i {
            0 => 1.0,
            1 => -1.0,
            _ => 0.0,
        }),
    );
    let ckpt = Checkpoint {
        config,
        params,
        optimizer: None,
    };
    ckpt.save(path).unwrap();
    path.to_path_buf()
}

pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Full fine-tune of a tiny model on the whole toy dataset for 200 steps.
pub fn overfit_checkpoint(data: &Path, path: &Path) -> PathBuf {
    let config = ViTConfig::tiny(2);
    let set = load_dataset(data).unwrap().load_images().unwrap();
    let images: Vec<Tensor<f32>> = prepare_eval(&set, &AugmentConfig::for_image_size(32)).unwrap();
    let mut params = ModelParams::<f32>::init(&config, &mut Rng::new(1)).unwrap();
    set_freeze(&mut params, FreezeMode::Full);
    let mut state = AdamWState::new(AdamWConfig {
        lr: 1e-3,
        ..Default::default()
    });
    for step in 0..200 {
        let idx: Vec<usize> = (0..8).map(|j| (step * 8 + j * 5) % set.len()).collect();
        let batch: Vec<Tensor<f32>> = idx.iter().map(|&i| images[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        train_step(&mut params, &mut state, &config, &batch, &labels).unwrap();
    }
    Checkpoint {
        config,
        params,
        optimizer: Some(state),
    }
    .save(path)
    .unwrap();
    path.to_path_buf()
}
