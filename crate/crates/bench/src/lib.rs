//! Shared fixtures for the benchmarks.

use alnp3::model::{Model, ModelConfig, SceneData};
use alnp3::world::{generate_scene, make_dataset, Corpus, Split, WorldConfig};

pub fn model(n_agents: usize) -> Model {
    Model::new(ModelConfig {
        n_agents,
        ..ModelConfig::default()
    })
    .expect("default model config is valid")
}

pub fn scene_data(model: &Model, seed: u64) -> SceneData {
    let scene = generate_scene(seed, model.cfg.n_agents, &model.cfg.world).expect("scene");
    SceneData::new(&scene, model).expect("scene data")
}

pub fn corpus(scenes: u64, n_agents: usize) -> Corpus {
    make_dataset(0..scenes, n_agents, Split::Train, &WorldConfig::default()).expect("corpus")
}
