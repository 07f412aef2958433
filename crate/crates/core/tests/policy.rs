use domrl::ad::Graph;
use domrl::divergence::{sequence_divergence, DivergenceKind};
use domrl::optim::{Adam, AdamConfig};
use domrl::policy::{
    sample_group, snapshot, teacher_forced_distributions, Context, Grid, PolicyConfig,
    PolicyParameters, SnapshotRole, Vocab,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(num_classes: usize) -> PolicyConfig {
    PolicyConfig {
        grid_size: 3,
        obs_values: 2,
        num_classes,
        embed_dim: 4,
        hidden_dim: 6,
        max_len: 4,
    }
}

fn context(num_classes: usize) -> Context {
    Context {
        observation: Grid::new(3, vec![0, 1, 1, 0, 0, 1, 1, 1, 0]).unwrap(),
        question: vec![Vocab::new(num_classes).query()],
    }
}

#[test]
fn zero_parameters_give_uniform_rows() {
    let p = PolicyParameters::zeros(config(0)).unwrap();
    let d = teacher_forced_distributions(&p, &context(0), &[0, 1, 2]).unwrap();
    assert_eq!(d.len(), 3);
    for t in 0..3 {
        assert_eq!(d.row(t), &[0.25; 4]);
    }
}

#[test]
fn fresh_initialization_is_uniform() {
    let p = PolicyParameters::init(config(3), 17).unwrap();
    let d = teacher_forced_distributions(&p, &context(3), &[3, 0, 4]).unwrap();
    for t in 0..d.len() {
        assert!(d.row(t).iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-15));
    }
}

#[test]
fn initialization_is_deterministic_in_seed() {
    assert_eq!(
        PolicyParameters::init(config(3), 4).unwrap(),
        PolicyParameters::init(config(3), 4).unwrap()
    );
    assert_ne!(
        PolicyParameters::init(config(3), 4).unwrap(),
        PolicyParameters::init(config(3), 5).unwrap()
    );
}

#[test]
fn sampling_is_deterministic_under_a_fixed_seed() {
    let p = PolicyParameters::random(config(3), 2).unwrap();
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        sample_group(&p, &context(3), 8, 4, &mut rng).unwrap()
    };
    let a = draw();
    assert_eq!(a.len(), 8);
    assert_eq!(a, draw());
    let end = p.vocab().end();
    for s in &a {
        assert!(s.tokens.len() == 4 || *s.tokens.last().unwrap() == end);
    }
}

#[test]
fn first_token_frequencies_match_the_model() {
    let p = PolicyParameters::random(config(3), 6).unwrap();
    let ctx = context(3);
    let probs = teacher_forced_distributions(&p, &ctx, &[0])
        .unwrap()
        .row(0)
        .to_vec();
    let draws = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = vec![0usize; probs.len()];
    for _ in 0..draws / 10 {
        for s in sample_group(&p, &ctx, 10, 1, &mut rng).unwrap() {
            counts[s.tokens[0]] += 1;
        }
    }
    for (c, q) in counts.iter().zip(&probs) {
        let n = draws as f64;
        let sigma = (n * q * (1.0 - q)).sqrt();
        assert!(
            (*c as f64 - n * q).abs() <= 3.0 * sigma,
            "count {c} vs expected {}",
            n * q
        );
    }
}

#[test]
fn teacher_forcing_is_bitwise_deterministic_and_matches_the_graph() {
    let p = PolicyParameters::random(config(3), 8).unwrap();
    let out = [3, 1, 4, 5];
    let a = teacher_forced_distributions(&p, &context(3), &out).unwrap();
    assert_eq!(
        a,
        teacher_forced_distributions(&p, &context(3), &out).unwrap()
    );

    let g = Graph::new();
    let bound = p.bind(&g);
    let h = bound.encode(&context(3)).unwrap();
    let node = bound.sequence_distributions(h, &out).unwrap();
    let direct: f64 = out
        .iter()
        .enumerate()
        .map(|(t, &tok)| g.value(node).get(t, tok).ln())
        .sum();
    assert!((a.log_prob(&out) - direct).abs() < 1e-12);
    let by_rows: f64 = (0..out.len()).map(|t| a.row(t)[out[t]].ln()).sum();
    assert_eq!(a.log_prob(&out), by_rows);
}

#[test]
fn snapshots_survive_optimizer_steps() {
    let mut p = PolicyParameters::random(config(3), 8).unwrap();
    let snap = snapshot(&p, SnapshotRole::Old).unwrap();
    let out = [3, 0, 4, 5];
    let before = teacher_forced_distributions(&p, &context(3), &out).unwrap();
    let fixed = teacher_forced_distributions(&snap, &context(3), &out).unwrap();
    assert_eq!(before, fixed);
    assert_eq!(
        sequence_divergence(DivergenceKind::Kl, &before, &fixed).unwrap(),
        0.0
    );

    let grads: Vec<_> = p.tensors().iter().map(|t| t.clone()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        },
        p.tensors(),
    );
    adam.step(p.tensors_mut(), &grads).unwrap();

    let after = teacher_forced_distributions(&p, &context(3), &out).unwrap();
    assert_ne!(after, before);
    assert_eq!(
        teacher_forced_distributions(&snap, &context(3), &out).unwrap(),
        fixed
    );
}

#[test]
fn snapshot_files_round_trip() {
    let p = PolicyParameters::random(config(3), 8).unwrap();
    let snap = snapshot(&p, SnapshotRole::Final).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snapshot.json");
    snap.save(&path).unwrap();
    let back = domrl::policy::PolicySnapshot::load(&path).unwrap();
    assert_eq!(back.params(), &p);
    assert_eq!(back.role(), SnapshotRole::Final);
}
