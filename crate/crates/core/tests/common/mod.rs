#![allow(dead_code)]

use robustforge::data::{make_synthetic, Dataset, Split};
use robustforge::defense::{train, DefenseSpec, TrainConfig};
use robustforge::model::{Architecture, ModelParams, ModelSpec};

pub const CLASSES: usize = 4;

pub fn synthetic_train() -> Dataset {
    make_synthetic(11, 800, CLASSES, Split::Train).unwrap()
}

pub fn synthetic_test() -> Dataset {
    make_synthetic(12, 400, CLASSES, Split::Test).unwrap()
}

pub fn mlp_spec(seed: u64) -> ModelSpec {
    ModelSpec::new(Architecture::MlpToy, seed, [8, 8, 1], CLASSES)
}

pub fn train_mlp(defense: &DefenseSpec, epochs: usize, seed: u64) -> ModelParams<f32> {
    let config = TrainConfig::sgd(epochs, 32, seed);
    train::<f32>(&mlp_spec(seed), &synthetic_train(), &config, defense, None, |_| {})
        .unwrap()
        .0
}
