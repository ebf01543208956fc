//! Routed mixture of per-order causal rotary attentions, and the single-order,
//! constrained and router-free baselines.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, TpeError};
use crate::numerics::{entropy_of, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::positions::{sort_permutation, PositionMatrix, RopeConfig};
use crate::table::{Segment, TokenStream, Vocab};

/// Which attention variant a model runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Router-weighted mixture over all permutation orders.
    Tpe2d,
    /// Row-wise traversal only.
    RowOnly,
    /// Column-wise traversal only.
    ColOnly,
    /// Row-wise traversal; table tokens see only their own row and column.
    Constrained,
    /// Unweighted sum over all orders (router removed).
    Tpe2dNoRouter,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 5] = [
        AttentionMode::Tpe2d,
        AttentionMode::RowOnly,
        AttentionMode::ColOnly,
        AttentionMode::Constrained,
        AttentionMode::Tpe2dNoRouter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Tpe2d => "tpe2d",
            AttentionMode::RowOnly => "row_only",
            AttentionMode::ColOnly => "col_only",
            AttentionMode::Constrained => "constrained",
            AttentionMode::Tpe2dNoRouter => "tpe2d_no_router",
        }
    }

    pub fn uses_router(self) -> bool {
        self == AttentionMode::Tpe2d
    }

    /// Position-matrix columns this mode attends under, given `orders` available columns.
    pub fn order_columns(self, orders: usize) -> Vec<usize> {
        match self {
            AttentionMode::Tpe2d | AttentionMode::Tpe2dNoRouter => (0..orders).collect(),
            AttentionMode::RowOnly | AttentionMode::Constrained => vec![0],
            AttentionMode::ColOnly => vec![1],
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = TpeError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        AttentionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| TpeError::Config(format!("unknown attention mode {s:?}")))
    }
}

/// Router MLP weights, stored input-major: `up`, `gate` are `d x 4d`, `down` is `4d x J`.
#[derive(Clone, Debug)]
pub struct RouterParams {
    pub up: ParamId,
    pub gate: ParamId,
    pub down: ParamId,
}

/// Per-layer projections (`D x D`, input-major) and the optional router.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub router: Option<RouterParams>,
    pub heads: usize,
    pub head_dim: usize,
    pub orders: usize,
}

pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

impl AttentionParams {
    /// Registers the layer's parameters under `prefix`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        orders: usize,
        with_router: bool,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(TpeError::Config(format!("model dim {d_model} not divisible by {heads} heads")));
        }
        let head_dim = d_model / heads;
        let std = 1.0 / (d_model as f64).sqrt();
        let mut proj = |name: &str, s: f64| store.add(&format!("{prefix}.{name}"), normal_tensor(&[d_model, d_model], s, rng));
        let wq = proj("wq", std)?;
        let wk = proj("wk", std)?;
        let wv = proj("wv", std)?;
        let wo = proj("wo", out_std)?;
        let router = if with_router && orders > 0 {
            let hidden = 4 * head_dim;
            let s_in = 1.0 / (head_dim as f64).sqrt();
            let s_out = 1.0 / (hidden as f64).sqrt();
            Some(RouterParams {
                up: store.add(&format!("{prefix}.router.up"), normal_tensor(&[head_dim, hidden], s_in, rng))?,
                gate: store.add(&format!("{prefix}.router.gate"), normal_tensor(&[head_dim, hidden], s_in, rng))?,
                down: store.add(&format!("{prefix}.router.down"), normal_tensor(&[hidden, orders], s_out, rng))?,
            })
        } else {
            None
        };
        Ok(AttentionParams { wq, wk, wv, wo, router, heads, head_dim, orders })
    }
}

/// Re-ranking plan for one permutation order: the sort, its inverse, the sorted
/// positions and the attention mask in ranked order.
#[derive(Clone, Debug)]
pub struct OrderPlan {
    pub perm: Vec<usize>,
    pub inverse: Vec<usize>,
    pub sorted_positions: Vec<usize>,
    /// `M x M`, row = query rank, column = key rank.
    pub mask: Vec<bool>,
}

impl OrderPlan {
    /// Causal mask in ranked order, optionally intersected with a stream-order mask.
    pub fn new(p: &PositionMatrix, order: usize, extra: Option<&[bool]>) -> Result<Self> {
        let (perm, inverse) = sort_permutation(p, order)?;
        let m = perm.len();
        if let Some(e) = extra {
            if e.len() != m * m {
                return Err(shape_err("order_plan", format!("mask of {} for {m} tokens", e.len())));
            }
        }
        let sorted_positions = perm.iter().map(|&i| p.get(i, order)).collect();
        let mut mask = vec![false; m * m];
        for qi in 0..m {
            for ki in 0..=qi {
                mask[qi * m + ki] = extra.is_none_or(|e| e[perm[qi] * m + perm[ki]]);
            }
        }
        Ok(OrderPlan { perm, inverse, sorted_positions, mask })
    }
}

/// Causal rotary attention under one order, via re-ranking.
///
/// `q`, `k`, `v` are `[H, M, d]` in stream order; the result is in stream order.
pub fn attend_order<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    plan: &OrderPlan,
    rope: &RopeConfig,
    scale_scores: bool,
) -> Result<Var> {
    let theta = rope.thetas();
    let qp = g.permute_rows(q, &plan.perm)?;
    let kp = g.permute_rows(k, &plan.perm)?;
    let vp = g.permute_rows(v, &plan.perm)?;
    let qr = g.rope(qp, &plan.sorted_positions, &theta)?;
    let kr = g.rope(kp, &plan.sorted_positions, &theta)?;
    let mut scores = g.batch_matmul(qr, kr, true)?;
    if scale_scores {
        scores = g.scale(scores, T::from_f64(1.0 / (rope.head_dim as f64).sqrt()))?;
    }
    let weights = g.softmax(scores, Some(&plan.mask))?;
    let out = g.batch_matmul(weights, vp, false)?;
    g.permute_rows(out, &plan.inverse)
}

/// Table tokens may attend to text and to cells sharing their row or column;
/// text tokens may attend to everything. Row-major `M x M`, stream order.
pub fn constrained_mask(stream: &TokenStream) -> Vec<bool> {
    let m = stream.len();
    let mut mask = vec![true; m * m];
    for (qi, qs) in stream.segments.iter().enumerate() {
        let Segment::Cell { row: r, col: c } = *qs else { continue };
        for (ki, ks) in stream.segments.iter().enumerate() {
            if let Segment::Cell { row, col } = *ks {
                mask[qi * m + ki] = row == r || col == c;
            }
        }
    }
    mask
}

/// Shared per-forward context for every attention layer.
pub struct AttentionContext<'a> {
    pub plans: &'a [OrderPlan],
    pub rope: RopeConfig,
    pub scale_scores: bool,
    /// Replaces the learned router with fixed per-order weights.
    pub forced_router: Option<&'a [f64]>,
}

impl<'a> AttentionContext<'a> {
    /// Builds one plan per order column used by `mode`.
    pub fn plans_for(stream: &TokenStream, p: &PositionMatrix, mode: AttentionMode) -> Result<Vec<OrderPlan>> {
        if p.len() != stream.len() {
            return Err(shape_err("attention", format!("{} positions for {} tokens", p.len(), stream.len())));
        }
        let extra = (mode == AttentionMode::Constrained).then(|| constrained_mask(stream));
        mode.order_columns(p.orders())
            .into_iter()
            .map(|j| {
                if j >= p.orders() {
                    return Err(TpeError::Config(format!("{mode} needs position column {j}")));
                }
                OrderPlan::new(p, j, extra.as_deref())
            })
            .collect()
    }
}

/// Output of one attention layer.
pub struct AttentionOutput {
    /// `[M, D]` after the output projection.
    pub out: Var,
    /// `[H, M, J]` routing weights (TPE2D only).
    pub router: Option<Var>,
    /// `[H, M]` routing entropies (TPE2D only).
    pub entropy: Option<Var>,
}

/// Router distribution and entropy for every head slice of `h` (`[M, D]`).
pub fn router_weights<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &RouterParams,
    h: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let m = g.value(h).shape()[0];
    let split = g.split_heads(h, heads)?;
    let d = g.value(split).shape()[2];
    let flat = g.reshape(split, &[heads * m, d])?;
    let up = g.param(store, params.up)?;
    let gate = g.param(store, params.gate)?;
    let down = g.param(store, params.down)?;
    let u = g.matmul(flat, up)?;
    let u = g.silu(u)?;
    let gt = g.matmul(flat, gate)?;
    let act = g.mul(u, gt)?;
    let logits = g.matmul(act, down)?;
    let j = g.value(logits).shape()[1];
    let r = g.softmax(logits, None)?;
    let r = g.reshape(r, &[heads, m, j])?;
    let e = g.entropy(r)?;
    Ok((r, e))
}

/// One attention layer over normalized input `h` (`[M, D]`).
pub fn tpe_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    h: Var,
    ctx: &AttentionContext<'_>,
    mode: AttentionMode,
) -> Result<AttentionOutput> {
    let shape = g.value(h).shape().to_vec();
    if shape.len() != 2 || shape[1] != params.heads * params.head_dim {
        return Err(shape_err("tpe_attention", format!("input {shape:?}")));
    }
    if mode.uses_router() && params.router.is_none() && ctx.forced_router.is_none() {
        return Err(TpeError::Config("TPE2D attention requires router parameters".into()));
    }
    let m = shape[0];
    let heads = params.heads;
    let project = |g: &mut Graph<T>, w: ParamId| -> Result<Var> {
        let wv = g.param(store, w)?;
        let y = g.matmul(h, wv)?;
        g.split_heads(y, heads)
    };
    let q = project(g, params.wq)?;
    let k = project(g, params.wk)?;
    let v = project(g, params.wv)?;
    let per_order = ctx
        .plans
        .iter()
        .map(|plan| attend_order(g, q, k, v, plan, &ctx.rope, ctx.scale_scores))
        .collect::<Result<Vec<_>>>()?;

    let (mixed, router, entropy) = match mode {
        AttentionMode::Tpe2d => {
            let j = per_order.len();
            let (r, e) = match (ctx.forced_router, &params.router) {
                (Some(w), _) => {
                    if w.len() != j && w.len() != heads * m * j {
                        return Err(shape_err("forced_router", format!("{} weights for {j} orders", w.len())));
                    }
                    let t = Tensor::from_fn(&[heads, m, j], |i| T::from_f64(w[i % w.len()]));
                    let ent = Tensor::from_fn(&[heads, m], |i| entropy_of(&t.data()[i * j..(i + 1) * j]));
                    (g.input(t)?, g.input(ent)?)
                }
                (None, Some(rp)) => router_weights(g, store, rp, h, heads)?,
                (None, None) => unreachable!("checked above"),
            };
            let mut acc: Option<Var> = None;
            for (idx, &o) in per_order.iter().enumerate() {
                let w = g.select_last(r, idx)?;
                let term = g.scale_rows(o, w)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            (acc.expect("at least one order"), Some(r), Some(e))
        }
        _ => {
            let mut acc = per_order[0];
            for &o in &per_order[1..] {
                acc = g.add(acc, o)?;
            }
            (acc, None, None)
        }
    };
    let merged = g.merge_heads(mixed)?;
    let wo = g.param(store, params.wo)?;
    let out = g.matmul(merged, wo)?;
    Ok(AttentionOutput { out, router, entropy })
}

/// Router distributions of every layer: `[H, M, J]` per layer.
#[derive(Clone, Debug)]
pub struct RouterWeights {
    pub layers: Vec<Tensor<f64>>,
}

impl RouterWeights {
    /// Largest deviation from 1 of any routing distribution's total mass.
    pub fn max_simplex_error(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|t| t.data().chunks(t.last_dim()).map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    pub fn entropies(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|t| t.data().chunks(t.last_dim()).map(entropy_of).collect()).collect()
    }
}

/// One line of the router-weight dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterDumpRow {
    pub layer: usize,
    pub head: usize,
    pub token_index: usize,
    pub token_string: String,
    pub r_row: f64,
    pub r_col: f64,
    pub entropy: f64,
}

/// Flattens router weights into dump rows (layer-major, then head, then token).
pub fn router_dump_rows(weights: &RouterWeights, stream: &TokenStream, vocab: &Vocab) -> Result<Vec<RouterDumpRow>> {
    let mut rows = Vec::new();
    for (layer, t) in weights.layers.iter().enumerate() {
        let s = t.shape();
        if s.len() != 3 || s[1] != stream.len() || s[2] < 2 {
            return Err(shape_err("router_dump", format!("layer {layer} weights {s:?}")));
        }
        let (heads, m, j) = (s[0], s[1], s[2]);
        for head in 0..heads {
            for tok in 0..m {
                let r = &t.data()[(head * m + tok) * j..(head * m + tok + 1) * j];
                rows.push(RouterDumpRow {
                    layer,
                    head,
                    token_index: tok,
                    token_string: vocab.decode(stream.ids[tok])?.to_string(),
                    r_row: r[0],
                    r_col: r[1],
                    entropy: entropy_of(r),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_router_csv<W: Write>(out: W, rows: &[RouterDumpRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| TpeError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in AttentionMode::ALL {
            assert_eq!(m.as_str().parse::<AttentionMode>().unwrap(), m);
        }
        assert_eq!("TPE2D-no-router".parse::<AttentionMode>().unwrap(), AttentionMode::Tpe2dNoRouter);
        assert!("diagonal".parse::<AttentionMode>().is_err());
    }

    #[test]
    fn constrained_mask_rules() {
        let cell = |row, col| Segment::Cell { row, col };
        let all_text = TokenStream { ids: vec![0; 3], segments: vec![Segment::Text; 3], answer_start: 3, rows: 0, cols: 0 };
        assert!(constrained_mask(&all_text).iter().all(|&b| b));

        let s = TokenStream {
            ids: vec![0; 5],
            segments: vec![Segment::Text, cell(0, 0), cell(0, 1), cell(1, 0), cell(1, 1)],
            answer_start: 5,
            rows: 2,
            cols: 2,
        };
        let m = constrained_mask(&s);
        let allow = |q: usize, k: usize| m[q * 5 + k];
        assert!(allow(1, 2) && allow(1, 3) && !allow(1, 4));
        assert!(allow(4, 2) && allow(4, 3) && !allow(4, 1));
        for q in 1..5 {
            assert!(allow(q, 0), "cells read the question");
        }
        assert!((0..5).all(|k| allow(0, k)));
    }

    #[test]
    fn order_plan_mask_matches_position_rule() {
        let p = PositionMatrix::from_rows(&[vec![0], vec![2], vec![1]]).unwrap();
        let plan = OrderPlan::new(&p, 0, None).unwrap();
        let attends = |stream_q: usize, stream_k: usize| {
            plan.mask[plan.inverse[stream_q] * 3 + plan.inverse[stream_k]]
        };
        assert!(attends(1, 0) && attends(1, 1) && attends(1, 2));
        assert!(attends(2, 0) && attends(2, 2) && !attends(2, 1));
    }
}
