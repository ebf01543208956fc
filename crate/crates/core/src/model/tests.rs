use super::*;
use crate::positions::{assign_positions, standard_orders};
use crate::table::{tokenize_example, Segment, Table};

fn tiny(mode: AttentionMode) -> ModelConfig {
    ModelConfig { d_model: 16, heads: 2, layers: 2, ffn_hidden: 32, mode, ..ModelConfig::default() }
}

fn sample_stream() -> (TokenStream, PositionMatrix) {
    let v = Vocab::build();
    let t = Table::new(vec![vec!["12".into(), "★".into()], vec!["7".into(), "305".into()]]).unwrap();
    let s = tokenize_example("What is the value 1 columns to the left of and 1 rows below ★ ?", &t, "Answer:", "7", &v)
        .unwrap();
    let p = assign_positions(&s, &standard_orders(2).unwrap()).unwrap();
    (s, p)
}

fn text_stream(n: usize) -> (TokenStream, PositionMatrix) {
    let s = TokenStream {
        ids: (0..n).map(|i| (i * 7) % 40).collect(),
        segments: vec![Segment::Text; n],
        answer_start: n - 2,
        rows: 0,
        cols: 0,
    };
    let p = assign_positions(&s, &standard_orders(2).unwrap()).unwrap();
    (s, p)
}

fn logits<T: Scalar>(model: &Model, store: &ParamStore<T>, s: &TokenStream, p: &PositionMatrix, opts: &ForwardOptions) -> Tensor<T> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, s, p, opts).unwrap();
    g.value(out.logits).clone()
}

/// Copies every parameter of `dst` from the same-named parameter of `src`.
fn copy_shared(src: &ParamStore<f64>, dst: &mut ParamStore<f64>) {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let sid = src.id(dst.name(id)).unwrap();
        *dst.value_mut(id) = src.value(sid).clone();
    }
}

#[test]
fn forward_shapes_and_determinism() {
    let (s, p) = sample_stream();
    let (model, store) = Model::init::<f64>(tiny(AttentionMode::Tpe2d), 3).unwrap();
    let a = logits(&model, &store, &s, &p, &ForwardOptions::default());
    assert_eq!(a.shape(), &[s.len(), model.config.vocab_size]);
    let b = logits(&model, &store, &s, &p, &ForwardOptions::default());
    assert_eq!(a, b);
    let (_, again) = Model::init::<f64>(tiny(AttentionMode::Tpe2d), 3).unwrap();
    assert_eq!(a, logits(&model, &again, &s, &p, &ForwardOptions::default()));
}

#[test]
fn text_only_stream_matches_single_order_under_forced_router() {
    let (s, p) = text_stream(9);
    let (tpe, tpe_store) = Model::init::<f64>(tiny(AttentionMode::Tpe2d), 5).unwrap();
    let (row, mut row_store) = Model::init::<f64>(tiny(AttentionMode::RowOnly), 1).unwrap();
    copy_shared(&tpe_store, &mut row_store);
    let heads = tpe.config.heads;
    let mut forced = Vec::new();
    for _ in 0..heads * s.len() {
        forced.extend([1.0, 0.0]);
    }
    let a = logits(&tpe, &tpe_store, &s, &p, &ForwardOptions { forced_router: Some(forced) });
    let b = logits(&row, &row_store, &s, &p, &ForwardOptions::default());
    assert!(a.max_abs_diff(&b) < 1e-10);
    // identical orders make the learned mixture irrelevant as well
    let c = logits(&tpe, &tpe_store, &s, &p, &ForwardOptions::default());
    assert!(c.max_abs_diff(&b) < 1e-10);
}

#[test]
fn loss_is_affine_in_lambda() {
    let (s, p) = sample_stream();
    let (model, store) = Model::init::<f64>(tiny(AttentionMode::Tpe2d), 2).unwrap();
    let eval = |lambda: f64| {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &s, &p, &ForwardOptions::default()).unwrap();
        let l = model.loss(&mut g, &out, &s, lambda).unwrap();
        (g.value(l.total).item(), g.value(l.nll).item(), g.value(l.ent).item())
    };
    let (t0, n0, e0) = eval(0.0);
    assert_eq!(t0, n0);
    assert!(e0 > 0.0 && e0 <= std::f64::consts::LN_2 + 1e-12);
    for lambda in [0.5, 1.0, 3.0] {
        let (t, _, _) = eval(lambda);
        assert!((t - (n0 + lambda * e0)).abs() < 1e-10);
    }
}

#[test]
fn one_hot_router_has_zero_entropy() {
    let (s, p) = sample_stream();
    let (model, store) = Model::init::<f64>(tiny(AttentionMode::Tpe2d), 2).unwrap();
    let forced: Vec<f64> = (0..model.config.heads * s.len()).flat_map(|i| if i % 3 == 0 { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &s, &p, &ForwardOptions { forced_router: Some(forced) }).unwrap();
    let l = model.loss(&mut g, &out, &s, 1.0).unwrap();
    assert_eq!(g.value(l.ent).item(), 0.0);
}

#[test]
fn uniform_two_way_router_has_entropy_ln2() {
    let (s, p) = sample_stream();
    let (model, store) = Model::init::<f64>(tiny(AttentionMode::Tpe2d), 2).unwrap();
    let forced = vec![0.5; model.config.heads * s.len() * 2];
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &s, &p, &ForwardOptions { forced_router: Some(forced) }).unwrap();
    let l = model.loss(&mut g, &out, &s, 1.0).unwrap();
    assert!((g.value(l.ent).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn modes_without_router_have_zero_entropy() {
    let (s, p) = sample_stream();
    for mode in [AttentionMode::RowOnly, AttentionMode::ColOnly, AttentionMode::Constrained, AttentionMode::Tpe2dNoRouter] {
        let (model, store) = Model::init::<f64>(tiny(mode), 2).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &s, &p, &ForwardOptions::default()).unwrap();
        let l = model.loss(&mut g, &out, &s, 1.0).unwrap();
        assert_eq!(g.value(l.ent).item(), 0.0);
        assert_eq!(g.value(l.total).item(), g.value(l.nll).item());
    }
}

#[test]
fn sequence_limit_is_enforced() {
    let (s, p) = sample_stream();
    let cfg = ModelConfig { max_seq_len: s.len() - 1, ..tiny(AttentionMode::Tpe2d) };
    let (model, store) = Model::init::<f64>(cfg, 0).unwrap();
    let mut g = Graph::new();
    assert!(matches!(
        model.forward(&mut g, &store, &s, &p, &ForwardOptions::default()),
        Err(TpeError::SequenceTooLong { .. })
    ));
}

#[test]
fn decoding() {
    let v = Vocab::build();
    let (s, p) = sample_stream();
    let prompt = s.prompt();
    let pp = p.prefix(prompt.len());
    let (model, store) = Model::init::<f32>(tiny(AttentionMode::Tpe2d), 4).unwrap();
    assert!(model.greedy_decode(&store, &prompt, &pp, 0, &v).unwrap().is_empty());
    let a = model.greedy_decode(&store, &prompt, &pp, 5, &v).unwrap();
    assert_eq!(a, model.greedy_decode(&store, &prompt, &pp, 5, &v).unwrap());
    assert!(!a.is_empty() && a.len() <= 5);
    assert_eq!(argmax_lowest(&[0.1f64, 0.3, 0.3, -1.0]), 1);
}

#[test]
fn router_parameter_formula() {
    let one_layer = |d: usize, j: usize| {
        let cfg = ModelConfig { d_model: d, heads: 1, layers: 1, orders: j, ffn_hidden: 8, ..ModelConfig::default() };
        count_params(&cfg).router_total
    };
    assert_eq!(one_layer(32, 2), 8448);
    assert_eq!(one_layer(16, 2), 2 * 4 * 256 + 2 * 64);
    assert_eq!(one_layer(64, 3), 2 * 4 * 4096 + 3 * 256);
    let none = ModelConfig { mode: AttentionMode::RowOnly, ..ModelConfig::default() };
    assert_eq!(count_params(&none).router_total, 0);
}

#[test]
fn parameter_count_matches_enumeration() {
    for mode in AttentionMode::ALL {
        for tie in [false, true] {
            let cfg = ModelConfig { tie_embeddings: tie, ..tiny(mode) };
            let (_, store) = Model::init::<f32>(cfg.clone(), 0).unwrap();
            let c = count_params(&cfg);
            assert_eq!(c.total, store.numel(), "{mode} tie={tie}");
            let routed: usize =
                store.ids().filter(|&id| store.name(id).contains(".router.")).map(|id| store.value(id).numel()).sum();
            assert_eq!(c.router_total, routed);
        }
    }
}

#[test]
fn flop_estimates() {
    let single = ModelConfig { orders: 1, mode: AttentionMode::Tpe2dNoRouter, ..ModelConfig::default() };
    assert_eq!(flops_estimate(&single, 100).overhead_ratio, 1.0);
    let mut last = 0.0;
    for j in 1..=4 {
        let r = flops_estimate(&ModelConfig { orders: j, ..ModelConfig::default() }, 100).overhead_ratio;
        assert!(r > last);
        last = r;
    }
}

#[test]
fn flop_estimate_matches_instrumented_count() {
    let (s, p) = sample_stream();
    for mode in AttentionMode::ALL {
        let cfg = tiny(mode);
        let (model, store) = Model::init::<f32>(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        model.forward(&mut g, &store, &s, &p, &ForwardOptions::default()).unwrap();
        let est = flops_estimate(&cfg, s.len());
        let expect = if mode.uses_router() || mode == AttentionMode::Tpe2dNoRouter { est.tpe2d } else { est.vanilla };
        assert_eq!(g.mac_count(), expect, "{mode}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let (s, p) = sample_stream();
    let (model, mut store) = Model::init::<f32>(tiny(AttentionMode::Tpe2d), 8).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &s, &p, &ForwardOptions::default()).unwrap();
    let l = model.loss(&mut g, &out, &s, 1.0).unwrap();
    g.backward(l.total, &mut store).unwrap();
    store.adam_step(&crate::numerics::AdamConfig::default()).unwrap();
    save_checkpoint(&path, &model, &store, serde_json::json!({"note": "x"})).unwrap();
    let ck = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(ck.model.config, model.config);
    assert_eq!(ck.store.step(), 1);
    assert_eq!(ck.metadata["note"], "x");
    for id in store.ids() {
        let other = ck.store.id(store.name(id)).unwrap();
        assert_eq!(store.value(id).data(), ck.store.value(other).data());
        assert_eq!(store.moments(id), ck.store.moments(other));
    }
    assert_eq!(
        logits(&model, &store, &s, &p, &ForwardOptions::default()),
        logits(&ck.model, &ck.store, &s, &p, &ForwardOptions::default())
    );
    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}
