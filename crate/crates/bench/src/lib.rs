//! Shared fixtures for the criterion benchmarks under `benches/`.

use tpe_core::model::ModelConfig;
use tpe_core::tasks::{generate, TaskKind};
use tpe_core::train::{prepare, Prepared};
use tpe_core::{AttentionMode, Model, ParamStore, Vocab};

/// A freshly initialised model in `mode` and one prepared Locating-Values example of `size x size`.
pub fn fixture(mode: AttentionMode, size: usize, d_model: usize, layers: usize) -> (Model, ParamStore<f32>, Prepared) {
    let config = ModelConfig { d_model, heads: 4, layers, ffn_hidden: 4 * d_model, mode, ..ModelConfig::default() };
    let (model, store) = Model::init::<f32>(config, 0).expect("valid config");
    let ex = generate(TaskKind::LocatingValues, size, size, 7).expect("feasible table");
    let prepared = prepare(&[ex], &Vocab::build(), &model.config).expect("tokenizes").remove(0);
    (model, store, prepared)
}
