use std::time::{Duration, Instant};

use vitforge_core::checkpoint::{replace_head, Checkpoint};
use vitforge_core::data::{AugmentConfig, LabeledSet};
use vitforge_core::train::{
    accuracy, batch_gradients, prepare_eval, set_freeze, train, train_step, AdamWConfig,
    AdamWState, FreezeMode, TrainPlan,
};
use vitforge_core::vit::{class_representation, forward, is_head};
use vitforge_core::{ModelParams, Rng, Tensor, ViTConfig};

fn toy_config() -> ViTConfig {
    ViTConfig::tiny(2)
}

/// 32 solid images: even indices dark (class 0), odd bright (class 1).
fn toy_set() -> LabeledSet {
    let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let base = if l == 0 { 0.15 } else { 0.85 };
            Tensor::full(&[3, 32, 32], base + 0.002 * i as f32)
        })
        .collect();
    LabeledSet { images, labels }
}

fn full_plan(epochs: usize) -> TrainPlan {
    TrainPlan {
        epochs,
        freeze_mode: FreezeMode::Full,
        seed: 7,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn overfits_separable_toy_set_within_200_steps() {
    let config = toy_config();
    let set = toy_set();
    let aug = AugmentConfig::for_image_size(32);
    let eval_images: Vec<Tensor<f32>> = prepare_eval(&set, &aug).unwrap();
    let mut params = ModelParams::<f32>::init(&config, &mut Rng::new(1)).unwrap();
    set_freeze(&mut params, FreezeMode::Full);
    let mut state = AdamWState::new(full_plan(1).optimizer);
    let mut rng = Rng::new(2);

    let start = Instant::now();
    let mut steps = 0;
    let mut reached = None;
    while steps < 200 {
        let order = vitforge_core::data::make_batches(&(0..32).collect::<Vec<_>>(), 8, &mut rng).unwrap();
        for batch in order {
            let images: Vec<Tensor<f32>> = batch.iter().map(|&i| eval_images[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            train_step(&mut params, &mut state, &config, &images, &labels).unwrap();
            steps += 1;
        }
        if accuracy(&params, &config, &eval_images, &set.labels).unwrap() == 1.0 {
            reached = Some(steps);
            break;
        }
    }
    let elapsed = start.elapsed();
    assert!(reached.is_some(), "train accuracy below 100% after {steps} steps");
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
}

#[test]
fn loss_decreases_within_50_steps() {
    let config = toy_config();
    let set = toy_set();
    let images: Vec<Tensor<f32>> = prepare_eval(&set, &AugmentConfig::for_image_size(32)).unwrap();
    let mut params = ModelParams::<f32>::init(&config, &mut Rng::new(3)).unwrap();
    set_freeze(&mut params, FreezeMode::Full);
    let (initial, _) = batch_gradients(&params, &config, &images, &set.labels).unwrap();
    let mut state = AdamWState::new(full_plan(1).optimizer);
    for step in 0..50 {
        let idx: Vec<usize> = (0..8).map(|j| (step * 8 + j) % 32).collect();
        let batch: Vec<Tensor<f32>> = idx.iter().map(|&i| images[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        train_step(&mut params, &mut state, &config, &batch, &labels).unwrap();
    }
    let (after, _) = batch_gradients(&params, &config, &images, &set.labels).unwrap();
    assert!(after < initial, "loss {initial} -> {after}");
}

#[test]
fn training_is_replayable_and_checkpoints_round_trip() {
    let config = toy_config();
    let set = toy_set();
    let (train_set, val_set) = (set.subset(&(0..24).collect::<Vec<_>>()), set.subset(&(24..32).collect::<Vec<_>>()));
    let init = ModelParams::<f32>::init(&config, &mut Rng::new(4)).unwrap();
    let aug = AugmentConfig::for_image_size(32);
    let a = train(&train_set, &val_set, &init, &config, &full_plan(3), &aug).unwrap();
    let b = train(&train_set, &val_set, &init, &config, &full_plan(3), &aug).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 3);

    let ckpt = |o: &vitforge_core::train::TrainOutcome<f32>| Checkpoint {
        config,
        params: o.params.clone(),
        optimizer: Some(o.optimizer.clone()),
    };
    let (ca, cb) = (ckpt(&a), ckpt(&b));
    assert_eq!(ca.encode(), cb.encode());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vitc");
    ca.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let batch = Tensor::stack(&prepare_eval::<f32>(&val_set, &aug).unwrap()).unwrap();
    let before = forward(&batch, &ca.params, &config).unwrap();
    let after = forward(&batch, &loaded.params, &config).unwrap();
    assert_eq!(before.data(), after.data());

    let best = a.history.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(a.best_val_accuracy, best);
    let first_best = a.history.iter().find(|r| r.val_accuracy == best).unwrap().epoch;
    assert_eq!(a.best_epoch, first_best);
}

#[test]
fn head_replacement_keeps_class_representation() {
    let config = toy_config();
    let params = ModelParams::<f32>::init(&config, &mut Rng::new(5)).unwrap();
    let ckpt = Checkpoint {
        config,
        params,
        optimizer: None,
    };
    let swapped = replace_head(&ckpt, 4, &mut Rng::new(6)).unwrap();
    let image = Tensor::from_fn(&[3, 32, 32], |i| ((i % 17) as f32) / 17.0);
    let r0 = class_representation(&image, &ckpt.params, &config).unwrap();
    let r1 = class_representation(&image, &swapped.params, &swapped.config).unwrap();
    assert_eq!(r0, r1);
    for (name, p) in ckpt.params.iter().filter(|(n, _)| !is_head(n)) {
        assert_eq!(swapped.params.tensor(name).unwrap(), &p.tensor);
    }
}
