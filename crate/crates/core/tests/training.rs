use segcotrain_core::data::{generate_synthetic, synth_volume, MANIFEST_NAME};
use segcotrain_core::trainer::run;
use segcotrain_core::{Dataset, Dims, NetworkConfig, RunOptions, SplitManifest, SplitTag, SynthSpec, TrainConfig};

fn spec() -> SynthSpec {
    SynthSpec {
        dims: Dims::cube(16),
        seed: 9,
        ..SynthSpec::default()
    }
}

fn moving_average(xs: &[f64], end: usize, window: usize) -> f64 {
    xs[end - window..end].iter().sum::<f64>() / window as f64
}

#[test]
fn supervised_loss_trends_down_over_200_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&spec(), &dir.path().join("data")).unwrap();
    let data = Dataset::load(&manifest, 5).unwrap();
    let cfg = TrainConfig {
        network: NetworkConfig::new(5, 4),
        total_iters: 200,
        checkpoint_every: 0,
        seed: 1,
        ..TrainConfig::default()
    };
    let summary = run(&cfg, &data, &RunOptions { out_dir: dir.path().join("run"), resume: None }).unwrap();
    let sup: Vec<f64> = summary.records.iter().map(|r| r.breakdown.sup).collect();
    assert_eq!(sup.len(), 200);
    let (early, late) = (moving_average(&sup, 20, 20), moving_average(&sup, 200, 20));
    assert!(late < early, "moving average of sup went from {early} to {late}");
    for r in &summary.records {
        let b = &r.breakdown;
        assert!(b.cps > 0.0 && b.con > 0.0 && b.dis > 0.0, "all modules should contribute: {b:?}");
    }
    let report = summary.final_report.unwrap();
    assert_eq!(report.per_class_dice.len(), 4);
    assert!(report.per_class_dice.iter().all(|d| (0.0..=1.0).contains(d)));
}

#[test]
fn generated_files_reload_to_the_in_memory_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let s = SynthSpec { train_volumes: 4, val_volumes: 2, labeled_fraction: 0.5, ..spec() };
    generate_synthetic(&s, dir.path()).unwrap();
    let manifest = SplitManifest::read(&dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.count(SplitTag::Labeled), 2);
    let data = Dataset::load(&manifest, s.num_classes).unwrap();
    for (i, pair) in data.val.iter().enumerate() {
        assert_eq!(*pair, synth_volume(&s, SplitTag::Val, i).unwrap());
    }
    let mut train: Vec<_> = (0..4).map(|i| synth_volume(&s, SplitTag::Unlabeled, i).unwrap()).collect();
    for (x, y) in &data.labeled {
        let pos = train.iter().position(|(tx, ty)| tx == x && ty == y).expect("labeled volume comes from the train split");
        train.remove(pos);
    }
    let rest: Vec<_> = train.into_iter().map(|(x, _)| x).collect();
    assert_eq!(rest.len(), data.unlabeled.len());
    assert!(data.unlabeled.iter().all(|x| rest.contains(x)));
}
