#![allow(dead_code)]

use cofusion::data::{Label, Language};
use cofusion::encoders::FeatureSequence;
use cofusion::fusion::{FusionConfig, ImageInput, ImageInputSpec, ModelInput, Strategy, TextInput, TextInputSpec};
use cofusion::pipeline::Example;
use cofusion::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TEXT_DIM: usize = 5;
pub const IMAGE_DIM: usize = 6;

pub fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> FeatureSequence {
    let data = (0..len * dim).map(|_| rng.sample(StandardNormal)).collect();
    FeatureSequence::new(Tensor::matrix(len, dim, data)).unwrap()
}

pub fn random_example(rng: &mut ChaCha8Rng, id: usize, lt: usize, lv: usize) -> Example {
    Example {
        id: format!("ex{id}"),
        label: Label::ALL[rng.random_range(0..3)],
        language: Language::ALL[rng.random_range(0..3)],
        input: ModelInput {
            text: TextInput::Features(random_seq(rng, lt, TEXT_DIM)),
            image: ImageInput::Features(random_seq(rng, lv, IMAGE_DIM)),
        },
    }
}

pub fn small_config(strategy: Strategy) -> FusionConfig {
    FusionConfig {
        strategy,
        dim: 8,
        heads: 2,
        mlp_hidden: 8,
        text_input: TextInputSpec::Features { dim: TEXT_DIM },
        image_input: ImageInputSpec::Features { dim: IMAGE_DIM },
        ..Default::default()
    }
}

pub fn all_strategies() -> Vec<Strategy> {
    Strategy::FUSION.iter().chain(&Strategy::UNIMODAL).copied().collect()
}
