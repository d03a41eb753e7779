use std::path::Path;

use menet_core::checkpoint;
use menet_core::data::{gen_dataset, split, SplitRatio, SPLIT_FILE};
use menet_core::model::{init, MeNetConfig, MeNetParams, Variant};
use menet_core::tensor::Tensor;
use menet_core::train::{
    ablate, evaluate, train, EvalReport, MetricSummary, OptimizerState, TrainConfig, CHECKPOINT_FILE,
    RUN_FILE,
};
use menet_core::Error;

fn tiny_dataset(dir: &Path) {
    let ids = gen_dataset(dir, 10, 16, 5).unwrap();
    split(&ids, SplitRatio::default(), 5).unwrap().save(dir.join(SPLIT_FILE)).unwrap();
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 3,
        model: MeNetConfig {
            levels: 2,
            base_channels: 2,
            height: 16,
            width: 16,
            ..MeNetConfig::default()
        },
        max_slices_per_case: Some(2),
        ..TrainConfig::default()
    }
}

#[test]
fn config_defaults_and_json() {
    let paper = TrainConfig::default();
    assert_eq!((paper.epochs, paper.batch_size), (200, 40));
    assert_eq!((paper.learning_rate, paper.weight_decay), (0.00015, 0.00001));
    let desk = TrainConfig::desk();
    assert_eq!((desk.epochs, desk.batch_size, desk.model.height, desk.model.width), (30, 8, 64, 64));
    let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "model": {"levels": 2}}"#).unwrap();
    assert_eq!((cfg.epochs, cfg.batch_size, cfg.model.levels), (3, 40, 2));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn adamw_matches_scalar_oracle() {
    let cfg = MeNetConfig { levels: 2, base_channels: 1, height: 4, width: 4, variant: Variant::Baseline, ..MeNetConfig::default() };
    let mut params: MeNetParams<f32> = init(&cfg, 0).unwrap();
    let mut opt = OptimizerState::new(&params);
    let (lr, wd) = (0.01, 0.1);
    let p0: Vec<f32> = params.store.tensors().flat_map(|t| t.data().to_vec()).collect();
    let grads_at = |step: usize| -> Vec<Tensor<f32>> {
        params_shapes(&cfg)
            .iter()
            .enumerate()
            .map(|(i, s)| Tensor::from_fn(s.clone(), |k| ((i * 31 + k * 7 + step * 3) % 11) as f32 * 0.1 - 0.5))
            .collect()
    };
    for step in 0..3 {
        opt.update(&mut params, &grads_at(step), lr, wd).unwrap();
    }
    // Independent f64 recurrence per scalar.
    let flat_grads: Vec<Vec<f32>> = (0..3).map(|s| grads_at(s).iter().flat_map(|t| t.data().to_vec()).collect()).collect();
    let got: Vec<f32> = params.store.tensors().flat_map(|t| t.data().to_vec()).collect();
    for (k, &start) in p0.iter().enumerate() {
        let (mut p, mut m, mut v) = (start as f64, 0.0f64, 0.0f64);
        for (t, g) in flat_grads.iter().enumerate() {
            let g = g[k] as f64;
            let t = t as i32 + 1;
            p -= lr * wd * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
        assert!((got[k] as f64 - p).abs() < 1e-5, "{k}: {} vs {p}", got[k]);
    }
    assert_eq!(opt.step, 3);
}

fn params_shapes(cfg: &MeNetConfig) -> Vec<Vec<usize>> {
    init::<f32>(cfg, 0).unwrap().store.tensors().map(|t| t.shape().to_vec()).collect()
}

#[test]
fn null_update_leaves_parameters() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, weight_decay: 0.0, ..tiny_config() };
    let out = dir.path().join("run");
    train(&cfg, dir.path(), Some(&out)).unwrap();
    let trained = checkpoint::load(out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(trained, init(&cfg.model, cfg.seed).unwrap());
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let cfg = tiny_config();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = train(&cfg, dir.path(), Some(&a)).unwrap();
    let rb = train(&cfg, dir.path(), Some(&b)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.epochs.len(), cfg.epochs);
    for f in [CHECKPOINT_FILE, RUN_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(ra.epochs.iter().all(|e| e.train_loss.is_finite()));

    // in-memory evaluation equals evaluation of the reloaded checkpoint
    let params = checkpoint::load(a.join(CHECKPOINT_FILE)).unwrap();
    let again = evaluate(Some(&params), dir.path(), "test", cfg.threshold).unwrap();
    assert_eq!(again, ra.test);
}

#[test]
fn training_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(train(&tiny_config(), dir.path(), None), Err(Error::Data(_))));
    tiny_dataset(dir.path());
    let big = TrainConfig { batch_size: 10_000, ..tiny_config() };
    assert!(matches!(train(&big, dir.path(), None), Err(Error::Config(_))));
    let mut wrong = tiny_config();
    wrong.model.height = 32;
    assert!(matches!(train(&wrong, dir.path(), None), Err(Error::Config(_))));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let r = evaluate(None, dir.path(), "test", 0.5).unwrap();
    assert!(!r.cases.is_empty());
    for c in &r.cases {
        assert_eq!((c.report.dsc, c.report.hd, c.report.ravd), (1.0, Some(0.0), Some(0.0)));
    }
    assert_eq!(r.dsc.mean, Some(1.0));
    assert_eq!(r.hd.mean, Some(0.0));
}

#[test]
fn means_are_plain_case_averages() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let params = init::<f32>(&tiny_config().model, 1).unwrap();
    let r = evaluate(Some(&params), dir.path(), "train", 0.5).unwrap();
    let dscs: Vec<f64> = r.cases.iter().map(|c| c.report.dsc).collect();
    let mut sum = 0.0;
    for d in &dscs {
        sum += d;
    }
    assert_eq!(r.dsc.mean, Some(sum / dscs.len() as f64));
    assert_eq!(r.dsc.defined, dscs.len());
}

#[test]
fn undefined_metrics_are_reported_and_excluded() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let mut params = init::<f32>(&tiny_config().model, 1).unwrap();
    // zero head → probability 0.5 everywhere → empty prediction
    params.store.get_mut("head.w").unwrap().data_mut().fill(0.0);
    let r = evaluate(Some(&params), dir.path(), "val", 0.5).unwrap();
    let n = r.cases.len();
    assert!(r.cases.iter().all(|c| c.report.hd.is_none() && c.report.assd.is_none()));
    assert_eq!((r.hd.mean, r.hd.defined, r.hd.undefined), (None, 0, n));
    assert_eq!(r.ravd.mean, Some(100.0));
    assert!(r.table().contains("undefined"));

    let mixed = MetricSummary::from_values(&[Some(1.0), None, Some(3.0)]);
    assert_eq!((mixed.mean, mixed.defined, mixed.undefined), (Some(2.0), 2, 1));
    assert!(mixed.cell().contains("1 undefined"));
    let json = serde_json::to_string(&EvalReport::from_cases("val", r.cases.clone())).unwrap();
    assert!(json.contains("\"hd\":null"));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let params = init::<f32>(&tiny_config().model, 8).unwrap();
    let bytes = checkpoint::to_bytes(&params).unwrap();
    assert_eq!(&bytes[..4], b"MNCK");
    assert_eq!(checkpoint::from_bytes(&bytes).unwrap(), params);

    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::UnknownVersion(2))));
    assert!(matches!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));

    let other = init::<f32>(&MeNetConfig { variant: Variant::Baseline, ..tiny_config().model }, 8).unwrap();
    let mut spliced = checkpoint::to_bytes(&params).unwrap();
    let other_bytes = checkpoint::to_bytes(&other).unwrap();
    let header = 12 + u32::from_le_bytes(other_bytes[8..12].try_into().unwrap()) as usize;
    spliced.truncate(12 + u32::from_le_bytes(spliced[8..12].try_into().unwrap()) as usize);
    spliced.extend_from_slice(&other_bytes[header..]);
    assert!(matches!(checkpoint::from_bytes(&spliced), Err(Error::Data(_))));
}

#[test]
fn ablation_table_shape_and_independence() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let cfg = TrainConfig { epochs: 1, ..tiny_config() };
    let out = dir.path().join("abl");
    let a = ablate(&cfg, dir.path(), &[1], &[Variant::Menet, Variant::Baseline], Some(&out)).unwrap();
    assert_eq!(a.summary.len(), 2);
    assert_eq!(a.summary[0].model, "menet");
    assert_eq!(a.summary[1].model, "baseline");
    let csv = a.csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,seed,dsc,ravd,hd,assd"));
    assert!(lines.all(|l| l.split(',').count() == 6));
    assert!(out.join("ablation.csv").is_file() && out.join("ablation.json").is_file());
    let table = a.table();
    assert_eq!(table.lines().filter(|l| l.starts_with("menet") || l.starts_with("baseline")).count(), 2);

    let b = ablate(&cfg, dir.path(), &[1], &[Variant::Baseline, Variant::Menet], None).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.delta, b.delta);
    assert_eq!(a.delta[0], Some(a.summary[0].dsc.unwrap() - a.summary[1].dsc.unwrap()));
}
