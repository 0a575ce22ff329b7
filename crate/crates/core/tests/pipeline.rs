//! Library-level pipeline: generate, split, train, checkpoint, evaluate.

use std::path::Path;

use shapednet::architecture::{build_network, NetworkConfig, ShapedNetModel};
use shapednet::data::{
    generate_synthetic_dataset, load_manifest, save_manifest, stratified_split, Dataset, Split, SyntheticSpec,
};
use shapednet::evalstats::{evaluate_model, Group};
use shapednet::training::{train, Checkpoint, TrainConfig, TrainLog, TrainOutcome};
use tempfile::TempDir;

fn small_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        ..NetworkConfig::toy()
    }
}

fn prepare(dir: &Path) -> Dataset {
    let spec = SyntheticSpec {
        count: 30,
        image_size: 32,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let mut records = generate_synthetic_dataset(&spec, dir).unwrap();
    stratified_split(&mut records, (0.6, 0.2, 0.2), 11).unwrap();
    let manifest = dir.join("manifest.csv");
    save_manifest(&manifest, &records).unwrap();
    let loaded = load_manifest(&manifest).unwrap();
    assert_eq!(loaded.len(), records.len());
    for (a, b) in loaded.iter().zip(&records) {
        assert_eq!(a.image_path, b.image_path);
        assert_eq!(a.split, b.split);
        assert_eq!(a.sex, b.sex);
        assert_eq!(a.bfp, b.bfp);
    }
    Dataset::load(&loaded, dir, 32).unwrap()
}

fn run(set: &Dataset) -> (ShapedNetModel, TrainOutcome) {
    let mut model = build_network(small_config(), 5).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        lr_init: 1e-3,
        seed: 5,
        hflip: true,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let out = train(
        &mut model,
        &set.subset(Split::Train),
        &set.subset(Split::Val),
        &cfg,
        &mut |r| {
            seen += 1;
            assert_eq!(r.epoch, seen);
        },
    )
    .unwrap();
    assert_eq!(seen, 3);
    (model, out)
}

#[test]
fn train_checkpoint_evaluate() {
    let dir = TempDir::new().unwrap();
    let set = prepare(dir.path());
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| set.subset(s).len());
    assert_eq!(counts, [18, 6, 6]);

    let (final_model, out) = run(&set);
    let log = &out.log;
    assert_eq!(log.epochs.len(), 3);
    let val: Vec<f64> = log.epochs.iter().map(|e| e.val.total).collect();
    let min = val.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(val[log.best_epoch - 1], min);
    assert!(log.epochs.iter().all(|e| e.train.total.is_finite()));
    assert_eq!(
        TrainLog::from_jsonl(&log.to_jsonl()).unwrap().best_epoch,
        log.best_epoch
    );

    let path = dir.path().join("best.ckpt");
    out.best.save(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap();
    assert_eq!(reloaded.to_bytes(), out.best.to_bytes());
    let best = reloaded.to_model().unwrap();
    assert_eq!(best.config, small_config());

    let (x, _) = set.batch(&[0, 1], &[]);
    let a = best.forward(&x).unwrap();
    let b = out.best.to_model().unwrap().forward(&x).unwrap();
    assert_eq!(a, b);

    let test = set.subset(Split::Test);
    let report = evaluate_model(&[("best".into(), &best), ("final".into(), &final_model)], &test, 0.05).unwrap();
    let neutral: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.split == Split::Test && r.group == Group::GenderNeutral)
        .collect();
    assert_eq!(neutral.len(), 2);
    for row in neutral {
        assert_eq!(row.n, 6);
        let mape = row.mape.as_ref().unwrap();
        assert!(mape.mean.is_finite() && mape.mean >= 0.0);
        let hit = row.iou_hit_rate.unwrap();
        assert!((0.0..=1.0).contains(&hit));
    }
    assert_eq!(report.tukey.len(), 1);
    assert!((0.0..=1.0).contains(&report.tukey[0].p));
}

#[test]
fn identical_runs_give_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let set = prepare(dir.path());
    let (m1, o1) = run(&set);
    let (m2, o2) = run(&set);
    assert_eq!(o1.best.to_bytes(), o2.best.to_bytes());
    assert_eq!(o1.log.to_jsonl(), o2.log.to_jsonl());
    assert_eq!(
        Checkpoint::from_model(&m1).to_bytes(),
        Checkpoint::from_model(&m2).to_bytes()
    );
}
