//! Tiny pre-norm decoder stack around the routed attention layer, the
//! training objective, greedy decoding and cost accounting.

mod accounting;
mod checkpoint;

pub use accounting::{count_params, flops_estimate, FlopEstimate, ParamCount};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    normal_tensor, tpe_attention, AttentionContext, AttentionMode, AttentionParams, RouterWeights,
};
use crate::error::{Result, TpeError};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::positions::{extend_positions, PositionMatrix, RopeConfig};
use crate::table::{TokenStream, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Architecture and objective settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub rope_base: f64,
    /// Number of permutation orders `J`.
    pub orders: usize,
    pub mode: AttentionMode,
    /// Weight of the router-entropy term.
    pub lambda: f64,
    pub precision: Precision,
    pub max_seq_len: usize,
    /// Divide attention logits by `sqrt(d)`; `false` gives the unscaled form.
    pub scale_scores: bool,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: Vocab::build().len(),
            d_model: 128,
            heads: 4,
            layers: 4,
            ffn_hidden: 512,
            rope_base: 10000.0,
            orders: 2,
            mode: AttentionMode::Tpe2d,
            lambda: 1.0,
            precision: Precision::F32,
            max_seq_len: 1024,
            scale_scores: true,
            tie_embeddings: false,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TpeError::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not a multiple of heads {}", self.d_model, self.heads));
        }
        if self.ffn_hidden == 0 || self.layers == 0 || self.vocab_size == 0 {
            return bad("ffn_hidden, layers and vocab_size must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.orders == 0 || self.orders > 2 {
            return bad(format!("{} permutation orders; row-wise and column-wise are available", self.orders));
        }
        if self.mode == AttentionMode::ColOnly && self.orders < 2 {
            return bad("col_only needs the column-wise order".into());
        }
        RopeConfig::new(self.rope_base, self.head_dim())?;
        Ok(())
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig { base: self.rope_base, head_dim: self.head_dim() }
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub attn_norm: ParamId,
    pub ffn_norm: ParamId,
    pub ffn_up: ParamId,
    pub ffn_gate: ParamId,
    pub ffn_down: ParamId,
}

/// Parameter layout of a model; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_norm: ParamId,
    /// `None` when the head is tied to the embedding.
    pub lm_head: Option<ParamId>,
}

/// Extra switches for a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Fixed router weights (one per order) replacing the learned router.
    pub forced_router: Option<Vec<f64>>,
}

pub struct ForwardOutput {
    /// `[M, V]`.
    pub logits: Var,
    /// Per layer `[H, M, J]` (TPE2D only).
    pub router: Vec<Var>,
    /// Per layer `[H, M]` (TPE2D only).
    pub entropies: Vec<Var>,
}

pub struct LossOutput {
    pub total: Var,
    pub nll: Var,
    pub ent: Var,
}

impl Model {
    /// Registers freshly initialised parameters in a new store.
    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (v, d, f) = (config.vocab_size, config.d_model, config.ffn_hidden);
        let out_std = 1.0 / (d as f64).sqrt() / (2.0 * config.layers as f64).sqrt();
        let embed = store.add("embed", normal_tensor(&[v, d], 1.0, &mut rng))?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            let attn = AttentionParams::register(
                &mut store,
                &format!("{p}.attn"),
                d,
                config.heads,
                config.orders,
                config.mode.uses_router(),
                out_std,
                &mut rng,
            )?;
            let attn_norm = store.add(&format!("{p}.attn_norm"), Tensor::ones(&[d]))?;
            let ffn_norm = store.add(&format!("{p}.ffn_norm"), Tensor::ones(&[d]))?;
            let in_std = 1.0 / (d as f64).sqrt();
            let ffn_up = store.add(&format!("{p}.ffn.up"), normal_tensor(&[d, f], in_std, &mut rng))?;
            let ffn_gate = store.add(&format!("{p}.ffn.gate"), normal_tensor(&[d, f], in_std, &mut rng))?;
            let ffn_down = store.add(
                &format!("{p}.ffn.down"),
                normal_tensor(&[f, d], 1.0 / (f as f64).sqrt() / (2.0 * config.layers as f64).sqrt(), &mut rng),
            )?;
            layers.push(LayerParams { attn, attn_norm, ffn_norm, ffn_up, ffn_gate, ffn_down });
        }
        let final_norm = store.add("final_norm", Tensor::ones(&[d]))?;
        let lm_head = if config.tie_embeddings {
            None
        } else {
            Some(store.add("lm_head", normal_tensor(&[d, v], 1.0 / (d as f64).sqrt(), &mut rng))?)
        };
        Ok((Model { config, embed, layers, final_norm, lm_head }, store))
    }

    /// Rebuilds the parameter layout for `config` and checks it against `store`.
    pub fn bind<T: Scalar>(config: ModelConfig, store: &ParamStore<T>) -> Result<Model> {
        let (model, fresh) = Model::init::<T>(config, 0)?;
        for id in fresh.ids() {
            let name = fresh.name(id);
            match store.id(name) {
                Some(other) if other == id && store.value(other).shape() == fresh.value(id).shape() => {}
                _ => return Err(TpeError::Checkpoint(format!("parameter {name} missing or mismatched"))),
            }
        }
        if store.len() != fresh.len() {
            return Err(TpeError::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(model)
    }

    /// Logits for every position of `stream`, plus router weights and entropies per layer.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stream: &TokenStream,
        p: &PositionMatrix,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if stream.len() > cfg.max_seq_len {
            return Err(TpeError::SequenceTooLong { len: stream.len(), max: cfg.max_seq_len });
        }
        let plans = AttentionContext::plans_for(stream, p, cfg.mode)?;
        let ctx = AttentionContext {
            plans: &plans,
            rope: cfg.rope(),
            scale_scores: cfg.scale_scores,
            forced_router: opts.forced_router.as_deref(),
        };
        let embed = g.param(store, self.embed)?;
        let mut x = g.embedding(embed, &stream.ids)?;
        let mut router = Vec::new();
        let mut entropies = Vec::new();
        for layer in &self.layers {
            let gain = g.param(store, layer.attn_norm)?;
            let h = g.rms_norm(x, gain, cfg.norm_eps)?;
            let a = tpe_attention(g, store, &layer.attn, h, &ctx, cfg.mode)?;
            x = g.add(x, a.out)?;
            router.extend(a.router);
            entropies.extend(a.entropy);

            let gain = g.param(store, layer.ffn_norm)?;
            let h = g.rms_norm(x, gain, cfg.norm_eps)?;
            let up = g.param(store, layer.ffn_up)?;
            let gate = g.param(store, layer.ffn_gate)?;
            let down = g.param(store, layer.ffn_down)?;
            let u = g.matmul(h, up)?;
            let u = g.silu(u)?;
            let gt = g.matmul(h, gate)?;
            let act = g.mul(u, gt)?;
            let f = g.matmul(act, down)?;
            x = g.add(x, f)?;
        }
        let gain = g.param(store, self.final_norm)?;
        let h = g.rms_norm(x, gain, cfg.norm_eps)?;
        let logits = match self.lm_head {
            Some(w) => {
                let w = g.param(store, w)?;
                g.matmul(h, w)?
            }
            None => g.matmul_t(h, embed, false, true)?,
        };
        Ok(ForwardOutput { logits, router, entropies })
    }

    /// `L = L_nll + lambda * L_ent`: answer-token negative log-likelihood plus the
    /// mean router entropy over layers, heads and all positions.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, out: &ForwardOutput, stream: &TokenStream, lambda: f64) -> Result<LossOutput> {
        let m = stream.len();
        if stream.answer_start >= m {
            return Err(TpeError::EmptyLossMask);
        }
        let mut targets = vec![0; m];
        let mut mask = vec![false; m];
        for i in 0..m - 1 {
            targets[i] = stream.ids[i + 1];
            mask[i] = i + 1 >= stream.answer_start;
        }
        let nll = g.cross_entropy(out.logits, &targets, &mask)?;
        let ent = if out.entropies.is_empty() {
            g.input(Tensor::scalar(T::zero()))?
        } else {
            let mut acc: Option<Var> = None;
            for &e in &out.entropies {
                let mean = g.mean(e)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, mean)?,
                    None => mean,
                });
            }
            let s = acc.expect("non-empty");
            g.scale(s, T::from_f64(1.0 / out.entropies.len() as f64))?
        };
        let weighted = g.scale(ent, T::from_f64(lambda))?;
        let total = g.add(nll, weighted)?;
        Ok(LossOutput { total, nll, ent })
    }

    /// Router weights of every layer as plain tensors.
    pub fn router_weights<T: Scalar>(&self, g: &Graph<T>, out: &ForwardOutput) -> RouterWeights {
        RouterWeights { layers: out.router.iter().map(|&r| g.value(r).cast()).collect() }
    }

    /// Greedy decoding with full recomputation; ties go to the lowest token id.
    pub fn greedy_decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prompt: &TokenStream,
        p: &PositionMatrix,
        max_new: usize,
        vocab: &Vocab,
    ) -> Result<Vec<usize>> {
        let mut stream = prompt.clone();
        stream.answer_start = stream.len();
        let mut pos = p.clone();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            let mut g = Graph::new();
            let out = self.forward(&mut g, store, &stream, &pos, &ForwardOptions::default())?;
            let logits = g.value(out.logits);
            let v = logits.last_dim();
            let last = &logits.data()[logits.numel() - v..];
            let next = argmax_lowest(last);
            generated.push(next);
            if next == vocab.eos() {
                break;
            }
            stream.push_text(next);
            pos = extend_positions(&pos, 1);
        }
        Ok(generated)
    }
}

/// Index of the maximum, preferring the lowest index on ties.
pub fn argmax_lowest<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
