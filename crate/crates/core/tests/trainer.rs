use domrl::task::{TaskFamily, TaskSpec};
use domrl::trainer::{ablation_suite, train, Arm, MetricsRecord, TrainingConfig};
use domrl::verify::{identity_reduction_check, micro_task};

fn small() -> TrainingConfig {
    TrainingConfig {
        lr: 0.01,
        group_size: 4,
        embed_dim: 4,
        hidden_dim: 8,
        epochs: Some(1),
        repeat: 5,
        log_interval: 5,
        ..TrainingConfig::default()
    }
}

fn smoke() -> (TrainingConfig, TaskSpec) {
    let cfg = TrainingConfig {
        lr: 0.01,
        beta: 0.5,
        batch_size: 6,
        epochs: Some(1),
        repeat: 50,
        dc: false,
        dr: false,
        log_interval: 20,
        ..TrainingConfig::default()
    };
    let spec = TaskSpec {
        family: TaskFamily::Rotation,
        grid_size: 3,
        num_classes: 3,
        shots: 8,
        test_size: 60,
        ..TaskSpec::default()
    };
    (cfg, spec)
}

fn stream(cfg: &TrainingConfig, spec: &TaskSpec) -> Vec<String> {
    let mut lines = Vec::new();
    train(cfg, spec, |r: &MetricsRecord| {
        lines.push(serde_json::to_string(r).unwrap());
        Ok(())
    })
    .unwrap();
    lines
}

#[test]
fn same_seed_gives_identical_metric_streams() {
    let (cfg, spec) = smoke();
    let a = stream(&cfg, &spec);
    assert_eq!(a.len(), 10);
    assert_eq!(a, stream(&cfg, &spec));
    let other = TrainingConfig { seed: 1, ..cfg };
    assert_ne!(a, stream(&other, &spec));
}

#[test]
fn identity_transform_tracks_the_baseline() {
    let cfg = TrainingConfig {
        epochs: None,
        repeat: 50,
        ..small()
    };
    let report = identity_reduction_check(&cfg, &micro_task(), 40).unwrap();
    assert!(report.holds(), "{report:?}");
}

#[test]
fn smoke_run_learns_the_format() {
    let (cfg, spec) = smoke();
    let out = train(&cfg, &spec, |_| Ok(())).unwrap();
    assert_eq!(out.summary.steps, 200);
    assert!(out.summary.final_mean_reward >= 1.5, "{:?}", out.summary);
    assert!(out.records.iter().all(|r| r.step % 20 == 0));
}

#[test]
fn all_ten_arms_are_distinct() {
    let arms = Arm::all();
    assert_eq!(arms.len(), 10);
    let mut names: Vec<String> = arms.iter().map(|a| a.to_string()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 10);
    for a in arms {
        assert_eq!(a.to_string().parse::<Arm>().unwrap(), a);
    }
}

#[test]
fn seed_order_does_not_change_the_table() {
    let spec = micro_task();
    let arms = [Arm::Dc, Arm::Baseline];
    let a = ablation_suite(&small(), &spec, &arms, &[0, 1], 1).unwrap();
    let b = ablation_suite(&small(), &spec, &[Arm::Baseline, Arm::Dc], &[1, 0], 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows[0].arm, "baseline");
    assert_eq!(
        a.rows[0].runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![0, 1]
    );
}
