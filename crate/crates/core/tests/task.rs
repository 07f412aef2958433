use std::collections::HashMap;

use domrl::domain::DomainTransform;
use domrl::policy::{sample_group, Grid, PolicyParameters};
use domrl::task::{
    evaluate, generate_dataset, orbit_canonical, reward, Dataset, RewardConfig, TaskFamily,
    TaskSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(family: TaskFamily) -> TaskSpec {
    TaskSpec {
        family,
        grid_size: 4,
        num_classes: 4,
        shots: 3,
        test_size: 40,
        ..TaskSpec::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let s = spec(TaskFamily::Rotation);
    assert_eq!(generate_dataset(&s).unwrap(), generate_dataset(&s).unwrap());
    let other = TaskSpec { seed: 1, ..s };
    assert_ne!(
        generate_dataset(&s).unwrap(),
        generate_dataset(&other).unwrap()
    );
}

#[test]
fn transformed_labels_follow_their_canonical_source() {
    for family in [TaskFamily::Rotation, TaskFamily::Mirror] {
        let ds = generate_dataset(&spec(family)).unwrap();
        let group = family.group();
        for (canon, moved) in ds.test_canonical.iter().zip(&ds.test_transformed) {
            assert_eq!(canon.label, moved.label);
            let images: Vec<Grid> = group
                .iter()
                .map(|t| t.apply_to_grid(&canon.context.observation).unwrap())
                .collect();
            assert!(images[1..].contains(&moved.context.observation));
            assert_eq!(
                orbit_canonical(&canon.context.observation, family),
                orbit_canonical(&moved.context.observation, family)
            );
        }
    }
}

#[test]
fn splits_share_no_orbit() {
    let s = spec(TaskFamily::Rotation);
    let ds = generate_dataset(&s).unwrap();
    let mut seen = HashMap::new();
    for ep in ds.train.iter().chain(&ds.test_canonical) {
        let key = orbit_canonical(&ep.context.observation, s.family);
        assert!(seen.insert(key, ep.split).is_none());
    }
}

#[test]
fn reward_cases() {
    let v = spec(TaskFamily::Rotation).vocab();
    let cfg = RewardConfig::default();
    assert_eq!(reward(&v.answer(2), 2, v, &cfg), 2.0);
    assert_eq!(reward(&v.answer(1), 2, v, &cfg), 1.0);
    assert_eq!(reward(&[v.open(), 2, v.end()], 2, v, &cfg), 0.0);
}

fn orbit_distance(a: &Grid, b: &Grid, family: TaskFamily) -> usize {
    family
        .group()
        .iter()
        .map(|t| {
            let moved = t.apply_to_grid(b).unwrap();
            a.cells()
                .iter()
                .zip(moved.cells())
                .filter(|(x, y)| x != y)
                .count()
        })
        .min()
        .unwrap()
}

#[test]
fn nearest_motif_oracle_solves_both_test_splits() {
    let s = TaskSpec::default();
    let ds = generate_dataset(&s).unwrap();
    for split in [&ds.test_canonical, &ds.test_transformed] {
        let correct = split
            .iter()
            .filter(|ep| {
                let best = (0..s.num_classes)
                    .min_by_key(|&c| {
                        orbit_distance(&ds.prototypes[c], &ep.context.observation, s.family)
                    })
                    .unwrap();
                best == ep.label
            })
            .count();
        assert!(correct as f64 / split.len() as f64 >= 0.95);
    }
}

#[test]
fn zero_policy_never_answers_greedily() {
    let s = spec(TaskFamily::Rotation);
    let ds = generate_dataset(&s).unwrap();
    let cfg = domrl::policy::PolicyConfig {
        grid_size: s.grid_size,
        obs_values: s.obs_values,
        num_classes: s.num_classes,
        embed_dim: 2,
        hidden_dim: 2,
        max_len: 6,
    };
    let p = PolicyParameters::zeros(cfg).unwrap();
    assert_eq!(evaluate(&p, &ds.test_canonical).unwrap(), 0.0);
    assert!(evaluate(&p, &[]).is_err());
}

#[test]
fn uniform_policy_accuracy_is_below_chance() {
    let s = TaskSpec {
        grid_size: 5,
        num_classes: 6,
        shots: 1,
        test_size: 2000,
        ..TaskSpec::default()
    };
    let ds = generate_dataset(&s).unwrap();
    let cfg = domrl::policy::PolicyConfig {
        grid_size: 5,
        obs_values: 2,
        num_classes: 6,
        embed_dim: 4,
        hidden_dim: 4,
        max_len: 6,
    };
    let p = PolicyParameters::zeros(cfg).unwrap();
    let v = s.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hits = 0usize;
    for ep in &ds.test_canonical {
        let o = &sample_group(&p, &ep.context, 2, 6, &mut rng).unwrap()[0];
        if v.parse_answer(&o.tokens) == Some(ep.label) {
            hits += 1;
        }
    }
    let n = ds.test_canonical.len() as f64;
    let chance = 1.0 / 6.0;
    let bound = chance + 3.0 * (chance * (1.0 - chance) / n).sqrt();
    assert!((hits as f64 / n) < bound);
}

fn check_dump_round_trip(ds: &Dataset) {
    let mut bytes = Vec::new();
    ds.dump(&mut bytes).unwrap();
    let back = Dataset::load(bytes.as_slice()).unwrap();
    assert_eq!(&back, ds);
}

#[test]
fn dataset_files_round_trip() {
    check_dump_round_trip(&generate_dataset(&spec(TaskFamily::Mirror)).unwrap());
}

#[test]
fn rotation_group_is_closed() {
    let g = Grid::new(3, vec![1, 0, 0, 0, 0, 0, 0, 0, 2]).unwrap();
    let group = TaskFamily::Rotation.group();
    for a in group {
        for b in group {
            let ab = b.apply_to_grid(&a.apply_to_grid(&g).unwrap()).unwrap();
            assert!(group.iter().any(|t| t.apply_to_grid(&g).unwrap() == ab));
        }
    }
    assert_eq!(group[0], DomainTransform::Identity);
}
