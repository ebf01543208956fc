use tpe_core::model::ModelConfig;
use tpe_core::tasks::{generate_split, TaskKind};
use tpe_core::train::{predict, prepare, read_metrics, teacher_forced_exact, train, TrainConfig};
use tpe_core::{AttentionMode, Vocab};

fn tiny(mode: AttentionMode, lambda: f64) -> ModelConfig {
    ModelConfig { d_model: 16, heads: 2, layers: 1, ffn_hidden: 32, mode, lambda, precision: tpe_core::model::Precision::F64, ..ModelConfig::default() }
}

#[test]
fn overfits_a_handful_of_examples() {
    let vocab = Vocab::build();
    let data = generate_split(TaskKind::LocatingValues, 2, 2, 4, 3, "train").unwrap();
    let cfg = TrainConfig { batch_size: 4, lr: 1e-2, epochs: 500, warmup_frac: 0.0, ..TrainConfig::default() };
    let out = train::<f64>(&tiny(AttentionMode::Tpe2d, 0.0), &cfg, &data, &[], &vocab).unwrap();
    let first = out.metrics.iter().position(|r| r.nll < 0.01).expect("loss reaches 0.01");
    assert!(first < 500);
    let prepared = prepare(&data, &vocab, &out.model.config).unwrap();
    for (ex, p) in data.iter().zip(&prepared) {
        assert!(ex.score(&predict(&out.model, &out.last, p, &vocab).unwrap()));
    }
}

#[test]
fn teacher_forced_exact_matches_greedy() {
    let vocab = Vocab::build();
    let data = generate_split(TaskKind::LocatingValues, 3, 3, 12, 5, "train").unwrap();
    let cfg = TrainConfig { batch_size: 4, lr: 5e-3, epochs: 60, ..TrainConfig::default() };
    let out = train::<f64>(&tiny(AttentionMode::Tpe2d, 0.1), &cfg, &data, &[], &vocab).unwrap();
    let prepared = prepare(&data, &vocab, &out.model.config).unwrap();
    let mut agree_correct = 0;
    for (ex, p) in data.iter().zip(&prepared) {
        let greedy = ex.score(&predict(&out.model, &out.last, p, &vocab).unwrap());
        assert_eq!(teacher_forced_exact(&out.model, &out.last, p).unwrap(), greedy);
        agree_correct += usize::from(greedy);
    }
    assert!(agree_correct > 0, "the check should cover some correct answers");
}

#[test]
fn entropy_weight_lowers_router_entropy() {
    let vocab = Vocab::build();
    let data = generate_split(TaskKind::LocatingValues, 2, 2, 8, 1, "train").unwrap();
    let cfg = TrainConfig { batch_size: 4, lr: 1e-2, epochs: 40, warmup_frac: 0.0, ..TrainConfig::default() };
    let ent = |lambda| {
        let out = train::<f64>(&tiny(AttentionMode::Tpe2d, lambda), &cfg, &data, &[], &vocab).unwrap();
        out.metrics.last().unwrap().ent
    };
    assert!(ent(1.0) < ent(0.0));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let vocab = Vocab::build();
    let train_set = generate_split(TaskKind::LocatingValues, 2, 2, 8, 1, "train").unwrap();
    let val_set = generate_split(TaskKind::LocatingValues, 2, 2, 4, 1, "val").unwrap();
    let model = tiny(AttentionMode::Tpe2d, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let base = TrainConfig { batch_size: 4, epochs: 4, eval_interval: 2, ..TrainConfig::default() };

    let full_cfg = TrainConfig { checkpoint: Some(dir.path().join("full.ckpt")), ..base.clone() };
    let full = train::<f64>(&model, &full_cfg, &train_set, &val_set, &vocab).unwrap();

    let metrics = dir.path().join("part.csv");
    let part_cfg =
        TrainConfig { checkpoint: Some(dir.path().join("part.ckpt")), metrics: Some(metrics.clone()), ..base.clone() };
    let capped = TrainConfig { max_steps: Some(3), ..part_cfg.clone() };
    let first = train::<f64>(&model, &capped, &train_set, &val_set, &vocab).unwrap();
    assert_eq!(first.last.step(), 3);
    let resumed = train::<f64>(&model, &part_cfg, &train_set, &val_set, &vocab).unwrap();
    assert_eq!(resumed.last.step(), full.last.step());
    for id in full.last.ids() {
        assert_eq!(full.last.value(id), resumed.last.value(id), "{}", full.last.name(id));
    }
    assert_eq!(resumed.metrics.first().unwrap().step, 4);
    let logged = read_metrics(&metrics).unwrap();
    assert_eq!(logged.last().unwrap().step, full.last.step());
}
