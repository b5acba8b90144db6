//! Desk-scale corpus, held-out splits and training recipe.

use crate::data::{generate_scene, Scene, SceneConfig, VideoConfig};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::nn::AdamConfig;
use crate::training::TrainConfig;

pub const CLASSES: [&str; 7] = ["red circle", "red ellipse", "red ring", "blue square", "green square", "yellow triangle", "blob"];
/// Small dots used for dense scenes.
pub const DOT_CLASS: &str = "white circle";
/// Colour/shape combinations never seen in training.
pub const NOVEL_CLASSES: [&str; 5] = ["green circle", "blue triangle", "red square", "yellow ring", "blue blob"];
/// Same-colour pairs whose shapes differ.
pub const CONFUSABLE_PAIRS: [(&str, &str); 4] =
    [("red circle", "red ellipse"), ("red ellipse", "red circle"), ("red circle", "red ring"), ("red ring", "red circle")];
/// Object sides in pixels for shape scenes.
pub const SIZE_RANGE: [f64; 2] = [5.0, 14.0];

/// Every fifth training scene is a dot scene, alternating dense small dots
/// and sparse large ones.
pub const DOT_EVERY: u64 = 5;

pub fn base_config() -> SceneConfig {
    SceneConfig {
        classes: CLASSES.map(String::from).to_vec(),
        classes_per_scene: [1, 3],
        size_range: SIZE_RANGE,
        ..Default::default()
    }
}

pub fn dots_config() -> SceneConfig {
    SceneConfig {
        classes: vec![DOT_CLASS.into()],
        classes_per_scene: [1, 1],
        count_range: [8, 28],
        size_range: [3.0, 7.0],
        ..Default::default()
    }
}

pub fn large_dots_config() -> SceneConfig {
    SceneConfig { count_range: [2, 8], size_range: [8.0, 16.0], ..dots_config() }
}

pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = CLASSES.map(String::from).to_vec();
    v.push(DOT_CLASS.into());
    v
}

/// Scenes with seeds `start..start + n`.
pub fn corpus(start: u64, n: usize) -> Result<Vec<Scene>> {
    let (base, dots, large) = (base_config(), dots_config(), large_dots_config());
    (0..n as u64)
        .map(|i| {
            let cfg = match (i % DOT_EVERY == DOT_EVERY - 1, (i / DOT_EVERY) % 2) {
                (false, _) => &base,
                (true, 0) => &dots,
                (true, _) => &large,
            };
            generate_scene(start + i, cfg)
        })
        .collect()
}

/// Scenes holding both classes of a confusable pair, with the pair
/// `(positive, negative)`.
pub fn confusable_split(start: u64, n: usize) -> Result<Vec<(Scene, &'static str, &'static str)>> {
    CONFUSABLE_PAIRS
        .iter()
        .cycle()
        .take(n)
        .enumerate()
        .map(|(i, &(p, q))| {
            let cfg = SceneConfig {
                classes: vec![p.into(), q.into()],
                classes_per_scene: [2, 2],
                count_range: [2, 6],
                size_range: SIZE_RANGE,
                ..Default::default()
            };
            Ok((generate_scene(start + i as u64, &cfg)?, p, q))
        })
        .collect()
}

/// Scenes of unseen classes; count the first class of each.
pub fn novel_split(start: u64, n: usize) -> Result<Vec<Scene>> {
    let cfg = SceneConfig {
        classes: NOVEL_CLASSES.map(String::from).to_vec(),
        classes_per_scene: [1, 2],
        count_range: [2, 8],
        size_range: SIZE_RANGE,
        ..Default::default()
    };
    (0..n as u64).map(|i| generate_scene(start + i, &cfg)).collect()
}

pub fn video_config() -> VideoConfig {
    VideoConfig::default()
}

pub fn model_config(seed: u64) -> ModelConfig {
    ModelConfig { d_model: 32, heads: 4, ffn_mult: 2, enhancer_blocks: 2, decoder_blocks: 2, num_queries: 32, init_seed: seed, ..Default::default() }
}

pub fn train_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: model_config(seed),
        optimizer: AdamConfig { lr: 1e-3, warmup_steps: 20, ..Default::default() },
        epochs,
        seed,
        vocabulary: vocabulary(),
        val_every: epochs,
        ..Default::default()
    }
}
