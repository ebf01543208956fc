use serde::Serialize;

use super::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub router_total: usize,
    pub router_fraction: f64,
}

/// Closed-form parameter count. Each layer's router holds `2 * (4d * d) + J * 4d` weights.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let (v, d, f, n) = (config.vocab_size, config.d_model, config.ffn_hidden, config.layers);
    let hd = config.head_dim();
    let router_per_layer = if config.mode.uses_router() && config.orders > 0 {
        2 * (4 * hd * hd) + config.orders * 4 * hd
    } else {
        0
    };
    let per_layer = 4 * d * d + 2 * d + 3 * d * f + router_per_layer;
    let head = if config.tie_embeddings { 0 } else { d * v };
    let total = v * d + n * per_layer + d + head;
    let router_total = n * router_per_layer;
    ParamCount { total, router_total, router_fraction: router_total as f64 / total as f64 }
}

/// Multiply-accumulate counts of one forward pass over `m` tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopEstimate {
    /// Single-order transformer of the same dimensions.
    pub vanilla: u64,
    /// `J` orders, plus the router when the configured mode has one.
    pub tpe2d: u64,
    pub overhead_ratio: f64,
}

/// Analytic MAC counts: projections `4MD^2`, scores and weighted values `2M^2 D` per order,
/// gated FFN `3MDF`, router `H M (8d^2 + 4dJ)`, LM head `MDV`.
pub fn flops_estimate(config: &ModelConfig, m: usize) -> FlopEstimate {
    let (v, d, f, n) = (config.vocab_size as u64, config.d_model as u64, config.ffn_hidden as u64, config.layers as u64);
    let (h, hd, j) = (config.heads as u64, config.head_dim() as u64, config.orders as u64);
    let m = m as u64;
    let projections = 4 * m * d * d;
    let per_order = 2 * m * m * d;
    let ffn = 3 * m * d * f;
    let head = m * d * v;
    let router = if config.mode.uses_router() { h * m * (8 * hd * hd + 4 * hd * j) } else { 0 };
    let vanilla = n * (projections + per_order + ffn) + head;
    let tpe2d = n * (projections + j * per_order + router + ffn) + head;
    FlopEstimate { vanilla, tpe2d, overhead_ratio: tpe2d as f64 / vanilla as f64 }
}
