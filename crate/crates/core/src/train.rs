//! Training loop, evaluation, gradient verification and router inspection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{router_dump_rows, AttentionMode, RouterDumpRow};
use crate::error::{Result, TpeError};
use crate::model::{load_checkpoint, save_checkpoint, ForwardOptions, Model, ModelConfig};
use crate::numerics::{
    analytic_gradients, compare_with_finite_differences, AdamConfig, CheckOptions, GradCheckReport, Graph, ParamStore,
    Scalar,
};
use crate::positions::{assign_positions, standard_orders, PositionMatrix};
use crate::table::{Segment, TokenStream, Vocab};
use crate::tasks::{Example, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Optimizer steps between validation passes; 0 evaluates once per epoch.
    pub eval_interval: usize,
    /// Validation subset size; `None` uses the whole split.
    pub eval_examples: Option<usize>,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Best-by-validation checkpoint; `<path>.last` holds the resumable state.
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            epochs: 3,
            warmup_frac: 0.03,
            weight_decay: 0.0,
            seed: 0,
            eval_interval: 0,
            eval_examples: None,
            max_steps: None,
            checkpoint: None,
            metrics: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TpeError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(TpeError::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TpeError::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size) as u64
    }

    /// Steps in the full schedule, ignoring `max_steps`.
    pub fn schedule_steps(&self, n_train: usize) -> u64 {
        self.steps_per_epoch(n_train) * self.epochs as u64
    }

    /// Steps actually run.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        let full = self.schedule_steps(n_train);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Linear warmup over `warmup_frac` of all steps, then constant.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let warm = (self.warmup_frac * total as f64).ceil() as u64;
        if warm == 0 || step >= warm {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / warm as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub nll: f64,
    pub ent: f64,
    pub eval_acc: Option<f64>,
    pub wall_secs: f64,
}

/// Appends records to a metrics CSV, writing the header for a new file.
pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let fresh = !path.exists();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
    for r in records {
        w.serialize(r).map_err(|e| TpeError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| TpeError::Io(std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        out.push(rec.map_err(|e| TpeError::Parse { path: path.display().to_string(), line: i + 2, msg: e.to_string() })?);
    }
    Ok(out)
}

/// A tokenised example with its position matrix.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub stream: TokenStream,
    pub positions: PositionMatrix,
}

pub fn prepare(examples: &[Example], vocab: &Vocab, config: &ModelConfig) -> Result<Vec<Prepared>> {
    let orders = standard_orders(config.orders)?;
    examples
        .iter()
        .map(|e| {
            let stream = e.to_stream(vocab)?;
            let positions = assign_positions(&stream, &orders)?;
            Ok(Prepared { stream, positions })
        })
        .collect()
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model,
    /// Parameters at the best validation accuracy (the final ones if never evaluated).
    pub best: ParamStore<T>,
    pub last: ParamStore<T>,
    pub best_acc: Option<f64>,
    pub metrics: Vec<MetricsRecord>,
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn last_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".last");
    PathBuf::from(s)
}

/// One optimizer step's worth of gradients, averaged over the batch. Returns mean (L, L_nll, L_ent).
pub fn accumulate_batch<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    batch: &[&Prepared],
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    store.zero_grad();
    let scale = T::from_f64(1.0 / batch.len() as f64);
    let (mut l, mut nll, mut ent) = (0.0, 0.0, 0.0);
    for ex in batch {
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &ex.stream, &ex.positions, &ForwardOptions::default())?;
        let loss = model.loss(&mut g, &out, &ex.stream, lambda)?;
        let scaled = g.scale(loss.total, scale)?;
        g.backward(scaled, store)?;
        l += g.value(loss.total).item().as_f64();
        nll += g.value(loss.nll).item().as_f64();
        ent += g.value(loss.ent).item().as_f64();
    }
    let n = batch.len() as f64;
    Ok((l / n, nll / n, ent / n))
}

/// Deterministic training. Resumes from `<checkpoint>.last` when it exists.
pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    vocab: &Vocab,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(TpeError::Config("training set is empty".into()));
    }
    let train_data = prepare(train_set, vocab, model_cfg)?;
    let val_n = cfg.eval_examples.map_or(val_set.len(), |k| k.min(val_set.len()));
    let val = &val_set[..val_n];

    let resume = cfg.checkpoint.as_ref().map(|p| last_path(p)).filter(|p| p.exists());
    let (model, mut store, mut best_acc) = match &resume {
        Some(p) => {
            let ck = load_checkpoint::<T>(p)?;
            if ck.model.config != *model_cfg {
                return Err(TpeError::Config("checkpoint config differs from the run config".into()));
            }
            let best = ck.metadata.get("best_acc").and_then(|v| v.as_f64());
            (ck.model, ck.store, best)
        }
        None => {
            let (m, s) = Model::init::<T>(model_cfg.clone(), cfg.seed)?;
            (m, s, None)
        }
    };
    let mut best = match (&cfg.checkpoint, best_acc) {
        (Some(p), Some(_)) if p.exists() => load_checkpoint::<T>(p)?.store,
        _ => store.clone(),
    };

    let per_epoch = cfg.steps_per_epoch(train_data.len());
    let total = cfg.total_steps(train_data.len());
    let schedule = cfg.schedule_steps(train_data.len());
    let eval_every = if cfg.eval_interval == 0 { per_epoch } else { cfg.eval_interval as u64 };
    let mut adam = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;

    while store.step() < total {
        let step = store.step();
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(train_data.len(), cfg.seed, epoch);
            order_epoch = epoch;
        }
        let off = ((step % per_epoch) as usize) * cfg.batch_size;
        let batch: Vec<&Prepared> =
            order[off..(off + cfg.batch_size).min(order.len())].iter().map(|&i| &train_data[i]).collect();
        let (l, nll, ent) = match accumulate_batch(&model, &mut store, &batch, model_cfg.lambda) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) | Err(TpeError::NonFinite { .. }) => return Err(TpeError::Diverged { step: step + 1 }),
            Err(e) => return Err(e),
        };
        adam.lr = cfg.lr_at(step, schedule);
        store.adam_step(&adam).map_err(|_| TpeError::Diverged { step: step + 1 })?;
        let done = store.step();
        let eval_now = !val.is_empty() && (done % eval_every == 0 || done == total);
        let eval_acc = if eval_now { Some(quick_accuracy(&model, &store, val, vocab)?) } else { None };
        let rec = MetricsRecord { step: done, loss: l, nll, ent, eval_acc, wall_secs: start.elapsed().as_secs_f64() };
        if let Some(p) = &cfg.metrics {
            append_metrics(p, std::slice::from_ref(&rec))?;
        }
        metrics.push(rec);
        if let Some(acc) = eval_acc {
            if best_acc.is_none_or(|b| acc > b) {
                best_acc = Some(acc);
                best = store.clone();
                if let Some(p) = &cfg.checkpoint {
                    save_checkpoint(p, &model, &store, run_metadata(cfg, best_acc, done))?;
                }
            }
            if let Some(p) = &cfg.checkpoint {
                save_checkpoint(&last_path(p), &model, &store, run_metadata(cfg, best_acc, done))?;
            }
        }
    }
    if best_acc.is_none() {
        best = store.clone();
        if let Some(p) = &cfg.checkpoint {
            save_checkpoint(p, &model, &store, run_metadata(cfg, None, store.step()))?;
        }
    }
    Ok(TrainOutcome { model, best, last: store, best_acc, metrics })
}

fn run_metadata(cfg: &TrainConfig, best_acc: Option<f64>, step: u64) -> serde_json::Value {
    serde_json::json!({ "train": cfg, "best_acc": best_acc, "saved_at_step": step })
}

/// Upper bound on generated answer tokens.
pub const MAX_ANSWER_TOKENS: usize = 48;

/// Greedy-decodes the answer for one example and detokenises it.
pub fn predict<T: Scalar>(model: &Model, store: &ParamStore<T>, ex: &Prepared, vocab: &Vocab) -> Result<String> {
    let prompt = ex.stream.prompt();
    let p = ex.positions.prefix(prompt.len());
    let mut ids = model.greedy_decode(store, &prompt, &p, MAX_ANSWER_TOKENS, vocab)?;
    if ids.last() == Some(&vocab.eos()) {
        ids.pop();
    }
    vocab.detokenize_compact(&ids)
}

/// Whether every answer token, EOS included, is the argmax under teacher forcing.
/// For exact-match scoring this equals greedy-decoding correctness, because the
/// decoded tokens receive the same positions as the gold continuation.
pub fn teacher_forced_exact<T: Scalar>(model: &Model, store: &ParamStore<T>, ex: &Prepared) -> Result<bool> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &ex.stream, &ex.positions, &ForwardOptions::default())?;
    let logits = g.value(out.logits);
    let v = logits.last_dim();
    let s = &ex.stream;
    Ok((s.answer_start..s.len()).all(|t| {
        let row = &logits.data()[(t - 1) * v..t * v];
        crate::model::argmax_lowest(row) == s.ids[t]
    }))
}

/// Validation accuracy used during training: exact teacher-forced check for
/// Locating-Values, greedy decoding otherwise.
pub fn quick_accuracy<T: Scalar>(model: &Model, store: &ParamStore<T>, examples: &[Example], vocab: &Vocab) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let prepared = prepare(examples, vocab, &model.config)?;
    let mut correct = 0usize;
    for (e, p) in examples.iter().zip(&prepared) {
        let ok = match e.task {
            TaskKind::LocatingValues => teacher_forced_exact(model, store, p)?,
            TaskKind::CountingStars => e.score(&predict(model, store, p, vocab)?),
        };
        correct += ok as usize;
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub question: String,
    pub gold: String,
    pub predicted: String,
    pub correct: bool,
}

pub struct EvalReport {
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

/// Greedy-decodes and scores every example.
pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, examples: &[Example], vocab: &Vocab) -> Result<EvalReport> {
    let prepared = prepare(examples, vocab, &model.config)?;
    let mut predictions = Vec::with_capacity(examples.len());
    for (i, (e, p)) in examples.iter().zip(&prepared).enumerate() {
        let predicted = predict(model, store, p, vocab)?;
        let correct = e.score(&predicted);
        predictions.push(Prediction { index: i, question: e.question.clone(), gold: e.answer.clone(), predicted, correct });
    }
    let hits = predictions.iter().filter(|p| p.correct).count();
    let accuracy = if examples.is_empty() { 0.0 } else { hits as f64 / examples.len() as f64 };
    Ok(EvalReport { accuracy, predictions })
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Router weights of every layer, head and token for one example.
pub fn router_dump<T: Scalar>(model: &Model, store: &ParamStore<T>, ex: &Prepared, vocab: &Vocab) -> Result<Vec<RouterDumpRow>> {
    if model.config.mode != AttentionMode::Tpe2d || model.config.orders != 2 {
        return Err(TpeError::Config(format!("router dump needs a two-order tpe2d model, got {}", model.config.mode)));
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &ex.stream, &ex.positions, &ForwardOptions::default())?;
    router_dump_rows(&model.router_weights(&g, &out), &ex.stream, vocab)
}

/// Tiny model and stream for finite-difference checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_elements: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            d_model: 32,
            heads: 2,
            layers: 2,
            ffn_hidden: 64,
            vocab_size: 40,
            rows: 3,
            cols: 4,
            seed: 0,
            step: 2e-4,
            tolerance: 1e-4,
            max_elements: None,
        }
    }
}

/// A random table stream: prefix text, cells of one or two tokens each, suffix, answer.
pub fn random_stream(rows: usize, cols: usize, vocab_size: usize, rng: &mut impl Rng) -> TokenStream {
    let mut s = TokenStream { ids: Vec::new(), segments: Vec::new(), answer_start: 0, rows, cols };
    let text = |s: &mut TokenStream, n: usize, rng: &mut dyn rand::RngCore| {
        for _ in 0..n {
            s.ids.push(rng.gen_range(0..vocab_size));
            s.segments.push(Segment::Text);
        }
    };
    text(&mut s, rng.gen_range(1..4), rng);
    for row in 0..rows {
        for col in 0..cols {
            for _ in 0..rng.gen_range(1..3) {
                s.ids.push(rng.gen_range(0..vocab_size));
                s.segments.push(Segment::Cell { row, col });
            }
        }
    }
    text(&mut s, rng.gen_range(0..3), rng);
    s.answer_start = s.ids.len();
    text(&mut s, rng.gen_range(1..3), rng);
    s
}

/// Finite-difference check of every parameter for one mode and lambda.
/// `corrupt` perturbs one analytic gradient element to exercise the failure path.
pub fn gradcheck_mode(cfg: &GradcheckConfig, mode: AttentionMode, lambda: f64, corrupt: bool) -> Result<GradCheckReport> {
    let model_cfg = ModelConfig {
        vocab_size: cfg.vocab_size,
        d_model: cfg.d_model,
        heads: cfg.heads,
        layers: cfg.layers,
        ffn_hidden: cfg.ffn_hidden,
        mode,
        lambda,
        ..ModelConfig::default()
    };
    let (model, mut store) = Model::init::<f64>(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stream = random_stream(cfg.rows, cfg.cols, cfg.vocab_size, &mut rng);
    let p = assign_positions(&stream, &standard_orders(2)?)?;
    let mut loss_fn = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let out = model.forward(g, s, &stream, &p, &ForwardOptions::default())?;
        Ok(model.loss(g, &out, &stream, lambda)?.total)
    };
    let mut analytic = analytic_gradients(&mut store, &mut loss_fn)?;
    if corrupt {
        let t = &mut analytic[0];
        t.data_mut()[0] += 1e-2 + 0.5 * t.data()[0].abs();
    }
    let opts = CheckOptions { step: cfg.step, tolerance: cfg.tolerance, max_elements: cfg.max_elements };
    compare_with_finite_differences(&mut store, &analytic, &opts, loss_fn)
}
