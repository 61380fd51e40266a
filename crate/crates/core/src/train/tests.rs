use super::*;
use crate::data::{synthesize_case, SyntheticSpec};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 2,
        steps_per_epoch: Some(2),
        seed: 11,
        patch: PatchSpec { patch_shape: [8; 3], oversample_ratio: 0.5 },
        net: APAUNetConfig { levels: 2, base_channels: 4, ..APAUNetConfig::default() },
        ..TrainConfig::default()
    }
}

fn tiny_cases(n: usize) -> Vec<VolumeRecord> {
    let spec = SyntheticSpec {
        volume_shape: [12, 12, 12],
        organ_radius: [3.5, 4.5],
        tumour_count: [1, 1],
        tumour_radius: [1.0, 1.5],
        max_tumour_fraction: 0.02,
        ..SyntheticSpec::default()
    };
    (0..n).map(|i| synthesize_case(&spec, i as u64, &format!("case_{i:03}")).unwrap()).collect()
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig { epochs: 200, warmup_epochs: 10, lr0: 0.1, ..TrainConfig::default() };
    assert_eq!(cosine_lr(0.0, &cfg), 0.0);
    assert!((cosine_lr(5.0, &cfg) - 0.05).abs() < 1e-15);
    assert_eq!(cosine_lr(10.0, &cfg), 0.1);
    assert!((cosine_lr(105.0, &cfg) - 0.05).abs() < 1e-12);
    assert!(cosine_lr(200.0, &cfg).abs() < 1e-15);
    assert!(cosine_lr(199.999_999, &cfg) < 1e-12);
    let below = cosine_lr(10.0 - 1e-9, &cfg);
    assert!((below - 0.1).abs() < 1e-9);
    let mut prev = f64::INFINITY;
    for i in 0..=1900 {
        let lr = cosine_lr(10.0 + i as f64 * 0.1, &cfg);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn sgd_matches_hand_update() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let mut sgd = Sgd::new(&store, 0.9, 0.1);
    let g = Tensor::new(&[2], vec![0.5, 0.25]).unwrap();
    sgd.step(&mut store, vec![(id, g.clone())], 0.1);
    // b = g; w = w − 0.1·b − 0.1·0.1·w
    let w1 = [1.0 - 0.05 - 0.01, -2.0 - 0.025 + 0.02];
    assert_eq!(store.value(id).data(), &w1);
    sgd.step(&mut store, vec![(id, g)], 0.1);
    let b2 = [0.9 * 0.5 + 0.5, 0.9 * 0.25 + 0.25];
    let w2 = [w1[0] - 0.1 * b2[0] - 0.01 * w1[0], w1[1] - 0.1 * b2[1] - 0.01 * w1[1]];
    for (a, b) in store.value(id).data().iter().zip(w2) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig { warmup_epochs: 200, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    let bad = TrainConfig { lr0: 0.0, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    assert_eq!(TrainConfig::default().steps_for(8), 4);
    assert_eq!(TrainConfig::default().steps_for(7), 4);
}

#[test]
fn loss_log_is_reproducible() {
    let cases = tiny_cases(3);
    let run = || {
        let mut t = Trainer::new(&tiny_config(), &cases).unwrap();
        t.run(None, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 3);
    let bits = |l: &[EpochLog]| l.iter().map(|e| (e.loss.to_bits(), e.lr.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert!(a.iter().all(|e| e.loss.is_finite()));
    for e in &a {
        assert_eq!(e.axis_weights.len(), 3);
        for r in &e.axis_weights {
            assert!((r.sagittal + r.axial + r.coronal - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn resume_matches_uninterrupted() {
    let cases = tiny_cases(3);
    let cfg = tiny_config();
    let mut full = Trainer::new(&cfg, &cases).unwrap();
    let straight = full.run(None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(&TrainConfig { checkpoint_every: 1, ..cfg.clone() }, &cases).unwrap();
    first.run_epoch().unwrap();
    first.save(dir.path()).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(dir.path(), &cases).unwrap();
    assert_eq!(resumed.epoch(), 1);
    let rest = resumed.run(None, |_| {}).unwrap();
    assert_eq!(rest.len(), 2);
    for (a, b) in straight[1..].iter().zip(&rest) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "epoch {}", a.epoch);
    }
    for (p, q) in full.store.iter().zip(resumed.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn run_writes_log_and_checkpoint() {
    let cases = tiny_cases(2);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&tiny_config(), &cases).unwrap();
    t.run(Some(dir.path()), |_| {}).unwrap();
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<EpochLog> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().map(|l| l.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    let (_, store, _) = load_checkpoint::<f32>(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    for (p, q) in store.iter().zip(t.store.iter()) {
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn non_finite_loss_aborts() {
    let mut cases = tiny_cases(2);
    for c in &mut cases {
        c.image.fill(f32::NAN);
    }
    let mut t = Trainer::new(&tiny_config(), &cases).unwrap();
    match t.run_epoch() {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected non-finite loss, got {:?}", other.map(|l| l.loss)),
    }
}

#[test]
fn partial_net_config_keeps_desk_defaults() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"net": {"levels": 4}}"#).unwrap();
    assert_eq!(cfg.net, APAUNetConfig { levels: 4, ..APAUNetConfig::desk() });
    let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(cfg, TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"net": 3}"#).is_err());
}
