//! Executable invariant suite on micro instances.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ad::{finite_difference_check, softmax_rows, Graph, Var};
use crate::array::Array;
use crate::divergence::{js, kl, DivergenceKind};
use crate::domain::{
    apply_transform, domain_aware_objective, reweight_advantages, DomainSettings, DomainTransform,
};
use crate::error::{contract, Result};
use crate::grpo::{normalize_advantages, ObjectiveSettings, RatioMode, SampleGroup};
use crate::optim::{Adam, AdamConfig};
use crate::policy::{
    sample_group, snapshot, teacher_forced_distributions, BoundPolicy, Context, Grid, PolicyConfig,
    PolicyParameters, SnapshotRole, Vocab,
};
use crate::task::{generate_dataset, orbit_canonical, reward, RewardConfig, TaskFamily, TaskSpec};
use crate::trainer::{Trainer, TrainingConfig};

/// Deliberate defects the suite must detect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Shaping computes `(1 + D)·A` instead of `(1 - D)·A`.
    ShapingSign,
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mutation::ShapingSign => f.write_str("shaping-sign"),
        }
    }
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shaping-sign" => Ok(Mutation::ShapingSign),
            other => Err(format!("unknown mutation `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    /// Witness values on failure, a short summary on success.
    pub detail: String,
    pub elapsed_ms: f64,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} {:>8.1} ms  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed_ms,
            self.detail
        )
    }
}

type Check = fn(Option<Mutation>) -> Result<String, String>;

const PROPERTIES: &[(&str, Check)] = &[
    ("softmax-normalization", softmax_normalization),
    ("op-gradients", op_gradients),
    ("shared-subexpression-accumulation", shared_subexpressions),
    ("divergence-properties", divergence_properties),
    ("advantage-normalization", advantage_normalization),
    ("shaping-algebra", shaping_algebra),
    ("objective-gradient", objective_gradient),
    ("ablation-additivity", ablation_additivity),
    ("identity-reduction", identity_reduction),
    ("sampling-log-prob-consistency", sampling_consistency),
    ("snapshot-immutability", snapshot_immutability),
    ("reward-decomposition", reward_decomposition),
    ("label-invariance", label_invariance),
];

pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|(n, _)| *n).collect()
}

/// Runs every property, in a fixed order.
pub fn run_suite(mutation: Option<Mutation>) -> Vec<PropertyResult> {
    PROPERTIES
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let outcome = check(mutation);
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            PropertyResult {
                name,
                passed,
                detail,
                elapsed_ms,
            }
        })
        .collect()
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn random_distribution<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let logits: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    softmax_rows(&Array::new(vec![1, dim], logits).expect("row")).into_data()
}

fn softmax_normalization(_: Option<Mutation>) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..500 {
        let dim = rng.random_range(2..=16);
        let scale = [0.1, 1.0, 10.0, 50.0][trial % 4];
        let p = random_distribution(&mut rng, dim, scale);
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || p.iter().any(|v| !(*v > 0.0)) {
            return Err(format!("row {p:?} sums to {sum}"));
        }
    }
    Ok("500 rows".into())
}

/// Weighted scalar readout so that no op's gradient is trivially zero.
fn readout(g: &Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(Array::new(shape, w)?);
    g.sum(g.mul(v, w)?)
}

/// Each op on its own, followed by the weighted readout.
pub fn op_gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    type OpFn = fn(&Graph, &[Var]) -> Result<Var>;
    let a = Array::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.5, 0.2, -0.4]])?;
    let b = Array::from_rows(&[vec![-0.2, 0.9, 0.4], vec![1.3, -0.6, 0.8]])?;
    let m = Array::from_rows(&[vec![0.4, -1.2], vec![0.7, 0.1], vec![-0.3, 0.6]])?;
    let pos = Array::from_rows(&[vec![0.6, 1.4, 0.9], vec![2.0, 0.3, 1.2]])?;
    let row = Array::from_rows(&[vec![0.25, -0.5, 0.75]])?;
    let side = Array::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]])?;
    let cases: Vec<(&'static str, Vec<Array>, OpFn)> = vec![
        ("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])),
        ("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![a.clone()], |g, v| g.scale(v[0], -2.5)),
        ("matmul", vec![a.clone(), m.clone()], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("log", vec![pos.clone()], |g, v| g.log(v[0])),
        ("exp", vec![a.clone()], |g, v| g.exp(v[0])),
        ("tanh", vec![a.clone()], |g, v| g.tanh(v[0])),
        ("softmax", vec![a.clone()], |g, v| g.softmax_rows(v[0])),
        ("gather", vec![m.clone()], |g, v| {
            g.gather_rows(v[0], &[2, 0, 2])
        }),
        ("pick", vec![a.clone()], |g, v| g.pick(v[0], &[2, 0])),
        ("sum", vec![a.clone()], |g, v| g.sum(v[0])),
        ("mean", vec![a.clone()], |g, v| g.mean(v[0])),
        ("mean-rows", vec![a.clone()], |g, v| g.mean_rows(v[0])),
        ("add-row", vec![a.clone(), row.clone()], |g, v| {
            g.add_row(v[0], v[1])
        }),
        ("concat", vec![a.clone(), side], |g, v| {
            g.concat_cols(v[0], v[1])
        }),
    ];
    let mut out = Vec::new();
    for (i, (name, params, op)) in cases.into_iter().enumerate() {
        let e = finite_difference_check(
            |g, vars| {
                let y = op(g, vars)?;
                readout(g, y, i as u64)
            },
            &params,
            1e-5,
        )?;
        out.push((name, e));
    }
    Ok(out)
}

fn op_gradients(_: Option<Mutation>) -> Result<String, String> {
    let errors = op_gradient_errors().map_err(err)?;
    let worst = errors
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if worst.1 > 1e-4 {
        return Err(format!("op {} relative error {:.3e}", worst.0, worst.1));
    }
    Ok(format!("{} ops, max error {:.2e}", errors.len(), worst.1))
}

fn shared_subexpressions(_: Option<Mutation>) -> Result<String, String> {
    let x = Array::from_rows(&[vec![0.3, -0.8], vec![1.2, 0.4]]).map_err(err)?;
    let grad = |shared: bool| -> Result<Array> {
        let g = Graph::new();
        let v = g.param(x.clone());
        let y1 = g.tanh(g.exp(v)?)?;
        let y2 = if shared { y1 } else { g.tanh(g.exp(v)?)? };
        let root = g.sum(g.add(g.mul(y1, y2)?, y2)?)?;
        Ok(g.backward(root)?.wrt(v).clone())
    };
    let a = grad(true).map_err(err)?;
    let b = grad(false).map_err(err)?;
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    if diff > 1e-12 {
        return Err(format!("shared {:?} vs unshared {:?}", a.data(), b.data()));
    }
    Ok(format!("max difference {diff:.1e}"))
}

/// Divergence properties over `trials` random pairs of dimension 2 to 16.
pub fn check_divergences(trials: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let dim = rng.random_range(2..=16);
        let scale = rng.random_range(0.1..4.0);
        let p = random_distribution(&mut rng, dim, scale);
        let q = random_distribution(&mut rng, dim, scale);
        let pq = kl(&p, &q).map_err(err)?;
        let pp = kl(&p, &p).map_err(err)?;
        if pq < -1e-12 || pp.abs() > 1e-12 || (p != q && pq <= 1e-12) {
            return Err(format!(
                "kl(p,q) = {pq}, kl(p,p) = {pp} for p = {p:?}, q = {q:?}"
            ));
        }
        let a = js(&p, &q).map_err(err)?;
        let b = js(&q, &p).map_err(err)?;
        if (a - b).abs() > 1e-12 || !(0.0..=1.0).contains(&a) {
            return Err(format!(
                "js(p,q) = {a}, js(q,p) = {b} for p = {p:?}, q = {q:?}"
            ));
        }
        let same = js(&p, &p).map_err(err)?;
        if same.abs() > 1e-12 {
            return Err(format!("js(p,p) = {same}"));
        }
    }
    let eps = 1e-12;
    let near = js(&[1.0 - eps, eps], &[eps, 1.0 - eps]).map_err(err)?;
    if !(near > 0.999999 && near <= 1.0) {
        return Err(format!("near-disjoint js = {near}"));
    }
    Ok(format!("{trials} pairs, near-disjoint js = {near:.9}"))
}

fn divergence_properties(_: Option<Mutation>) -> Result<String, String> {
    check_divergences(1000, 21)
}

fn moments(a: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Moments, constant groups and exact shift/scale invariance.
///
/// Rewards lie on a quarter grid as verifiable rewards do. The invariance
/// trials use power-of-two group sizes, integer shifts and power-of-two
/// scales, where every intermediate is exactly representable.
pub fn check_advantages(trials: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quarter = |rng: &mut ChaCha8Rng| f64::from(rng.random_range(0..=8u8)) * 0.25;
    let mut checked = 0;
    while checked < trials {
        let g = rng.random_range(2..=16);
        let r: Vec<f64> = (0..g).map(|_| quarter(&mut rng)).collect();
        if r.iter().all(|v| *v == r[0]) {
            continue;
        }
        checked += 1;
        let a = normalize_advantages(&r, 1e-8).map_err(err)?;
        let (mean, std) = moments(&a);
        if mean.abs() > 1e-9 || (std - 1.0).abs() > 1e-6 {
            return Err(format!("rewards {r:?} give mean {mean:e}, std {std}"));
        }
    }
    for g in 2..=16 {
        let c = quarter(&mut rng);
        let a = normalize_advantages(&vec![c; g], 1e-8).map_err(err)?;
        if a.iter().any(|v| *v != 0.0) {
            return Err(format!("constant group {c} x {g} gives {a:?}"));
        }
    }
    for _ in 0..trials {
        let g = [2, 4, 8, 16][rng.random_range(0..4)];
        let r: Vec<f64> = (0..g).map(|_| quarter(&mut rng)).collect();
        if r.iter().all(|v| *v == r[0]) {
            continue;
        }
        let shift = f64::from(rng.random_range(-8..=8i8));
        let scale = [0.25, 0.5, 2.0, 4.0][rng.random_range(0..4)];
        let base = normalize_advantages(&r, 0.0).map_err(err)?;
        let shifted: Vec<f64> = r.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = r.iter().map(|v| v * scale).collect();
        let a = normalize_advantages(&shifted, 0.0).map_err(err)?;
        let b = normalize_advantages(&scaled, 0.0).map_err(err)?;
        if a != base || b != base {
            return Err(format!(
                "rewards {r:?}: base {base:?}, shift {shift} gives {a:?}, scale {scale} gives {b:?}"
            ));
        }
    }
    Ok(format!("{trials} groups"))
}

fn advantage_normalization(_: Option<Mutation>) -> Result<String, String> {
    check_advantages(1000, 31)
}

fn shaper(mutation: Option<Mutation>) -> fn(&[f64], &[f64]) -> Result<Vec<f64>> {
    match mutation {
        Some(Mutation::ShapingSign) => {
            |a, d| Ok(a.iter().zip(d).map(|(a, d)| (1.0 + d) * a).collect())
        }
        None => reweight_advantages,
    }
}

/// Shaping bounds, sign preservation, endpoints and argmax preservation.
pub fn check_shaping(
    trials: usize,
    seed: u64,
    shape: fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.5).expect("positive std");
    for _ in 0..trials {
        let g = rng.random_range(2..=16);
        let a: Vec<f64> = (0..g).map(|_| normal.sample(&mut rng)).collect();
        let d: Vec<f64> = (0..g)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let ad = shape(&a, &d).map_err(err)?;
        for i in 0..g {
            if ad[i].abs() > a[i].abs() {
                return Err(format!(
                    "|A^d| > |A| at A = {}, D = {}: A^d = {}",
                    a[i], d[i], ad[i]
                ));
            }
            if d[i] < 1.0 && a[i] != 0.0 && ad[i].signum() != a[i].signum() {
                return Err(format!(
                    "sign flipped at A = {}, D = {}: A^d = {}",
                    a[i], d[i], ad[i]
                ));
            }
        }
        let zero = shape(&a, &vec![0.0; g]).map_err(err)?;
        let one = shape(&a, &vec![1.0; g]).map_err(err)?;
        if zero != a || one.iter().any(|v| *v != 0.0) {
            return Err(format!(
                "endpoints: D = 0 gives {zero:?}, D = 1 gives {one:?} for A = {a:?}"
            ));
        }
        let common = rng.random_range(0.0..1.0);
        let eq = shape(&a, &vec![common; g]).map_err(err)?;
        let arg = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        if a[arg(&a)] > 0.0 && arg(&eq) != arg(&a) {
            return Err(format!(
                "argmax moved under equal D = {common} for A = {a:?}"
            ));
        }
    }
    Ok(format!("{trials} pairs"))
}

fn shaping_algebra(mutation: Option<Mutation>) -> Result<String, String> {
    check_shaping(1000, 41, shaper(mutation))
}

/// Micro policy: 3x3 binary grid, width 2 embeddings, hidden width 4.
pub fn micro_config(num_classes: usize) -> PolicyConfig {
    PolicyConfig {
        grid_size: 3,
        obs_values: 2,
        num_classes,
        embed_dim: 2,
        hidden_dim: 4,
        max_len: 3,
    }
}

fn micro_context(vocab: Vocab) -> Result<Context> {
    Ok(Context {
        observation: Grid::from_rows(&[vec![1, 0, 0], vec![1, 1, 0], vec![0, 0, 1]])?,
        question: vec![vocab.query()],
    })
}

/// Outputs of length at most 3 exercising every position.
fn micro_outputs(vocab: Vocab) -> Vec<Vec<usize>> {
    vec![
        vec![vocab.open(), 0, vocab.close()],
        vec![vocab.open(), vocab.end()],
        vec![vocab.close(), vocab.open(), vocab.end()],
        vec![vocab.end()],
    ]
}

/// Relative finite-difference error of the full combined objective
/// (`-total` of one group) over all parameters of a micro policy.
pub fn objective_gradient_error(
    num_classes: usize,
    domain: DomainSettings,
    ratio_mode: RatioMode,
) -> Result<f64> {
    let cfg = micro_config(num_classes);
    let live = PolicyParameters::random(cfg.clone(), 1)?;
    let old = PolicyParameters::random(cfg.clone(), 2)?;
    let reference = PolicyParameters::random(cfg.clone(), 3)?;
    let vocab = cfg.vocab();
    let context = micro_context(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let transformed = apply_transform(DomainTransform::Rotate(1), &context, &mut rng)?;
    let group = SampleGroup::new(
        context,
        micro_outputs(vocab),
        vec![2.0, 0.0, 1.0, 0.5],
        1e-8,
    )?;
    let settings = ObjectiveSettings {
        beta: 0.3,
        ratio_mode,
        clip: None,
    };
    finite_difference_check(
        |g, vars| {
            let bound = BoundPolicy::from_vars(g, cfg.clone(), vars)?;
            // D_i is a constant weight: it is evaluated at the unperturbed point.
            let obj = domain_aware_objective(
                &bound,
                &live,
                &old,
                &reference,
                &group,
                &transformed,
                &settings,
                &domain,
            )?;
            g.scale(obj.objective.total, -1.0)
        },
        live.tensors(),
        1e-5,
    )
}

fn objective_gradient(_: Option<Mutation>) -> Result<String, String> {
    use DivergenceKind::{Js, Kl};
    let micro = micro_config(0);
    let params = PolicyParameters::zeros(micro)
        .map_err(err)?
        .num_parameters();
    let mut worst = 0.0f64;
    let mut count = 0;
    for num_classes in [0, 2] {
        for (dc, dr) in [(false, false), (true, false), (false, true), (true, true)] {
            for (dc_kind, dr_kind) in [(Kl, Kl), (Kl, Js), (Js, Kl), (Js, Js)] {
                let domain = DomainSettings {
                    dc,
                    dr,
                    dc_kind,
                    dr_kind,
                    ..DomainSettings::default()
                };
                let e = objective_gradient_error(num_classes, domain, RatioMode::Sequence)
                    .map_err(err)?;
                if e > 1e-4 {
                    return Err(format!(
                        "V = {}, dc = {dc}, dr = {dr}, kinds {dc_kind}/{dr_kind}: relative error {e:.3e}",
                        num_classes + 4
                    ));
                }
                worst = worst.max(e);
                count += 1;
            }
        }
    }
    Ok(format!(
        "{count} configurations, {params} parameters at V = 4, max error {worst:.2e}"
    ))
}

fn group_total(domain: DomainSettings) -> Result<(f64, f64)> {
    let cfg = micro_config(2);
    let live = PolicyParameters::random(cfg.clone(), 5)?;
    let old = PolicyParameters::random(cfg.clone(), 6)?;
    let reference = PolicyParameters::random(cfg.clone(), 7)?;
    let vocab = cfg.vocab();
    let context = micro_context(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let transformed = apply_transform(DomainTransform::ReflectHorizontal, &context, &mut rng)?;
    let group = SampleGroup::new(
        context,
        micro_outputs(vocab),
        vec![1.0, 0.0, 2.0, 0.0],
        1e-8,
    )?;
    let g = Graph::new();
    let bound = live.bind(&g);
    let obj = domain_aware_objective(
        &bound,
        &live,
        &old,
        &reference,
        &group,
        &transformed,
        &ObjectiveSettings::default(),
        &domain,
    )?;
    Ok((obj.objective.breakdown.total, obj.domain_loss))
}

fn ablation_additivity(_: Option<Mutation>) -> Result<String, String> {
    let off = DomainSettings {
        dc: false,
        dr: false,
        ..DomainSettings::default()
    };
    let on = DomainSettings { dc: true, ..off };
    let (base, _) = group_total(off).map_err(err)?;
    let (with_dc, l_dom) = group_total(on).map_err(err)?;
    let diff = (with_dc - base) + l_dom;
    if diff.abs() > 1e-12 || !(l_dom > 0.0) {
        return Err(format!(
            "total(dc) - total(base) = {}, L_dom = {l_dom}",
            with_dc - base
        ));
    }
    Ok(format!("L_dom = {l_dom:.6}, residual {diff:.1e}"))
}

/// Micro task used for trajectory checks.
pub fn micro_task() -> TaskSpec {
    TaskSpec {
        family: TaskFamily::Rotation,
        grid_size: 3,
        num_classes: 3,
        shots: 2,
        obs_values: 2,
        test_size: 20,
        noise: 0.05,
        seed: 3,
    }
}

/// Report of an identity-transform run against the plain baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub steps: usize,
    /// First step at which parameters differ, if any.
    pub first_divergent_step: Option<usize>,
    pub max_domain_loss: f64,
    pub max_divergence: f64,
    /// Whether the parameters left their initial values.
    pub moved: bool,
}

impl IdentityReport {
    pub fn holds(&self) -> bool {
        self.first_divergent_step.is_none()
            && self.max_domain_loss == 0.0
            && self.max_divergence == 0.0
            && self.moved
    }
}

/// Steps an identity-transform DC+DR trainer and a DC/DR-off trainer in
/// lockstep, comparing parameters bitwise after every step.
pub fn identity_reduction_check(
    cfg: &TrainingConfig,
    spec: &TaskSpec,
    steps: usize,
) -> Result<IdentityReport> {
    let domain_cfg = TrainingConfig {
        dc: true,
        dr: true,
        transform: Some(DomainTransform::Identity),
        ..cfg.clone()
    };
    let base_cfg = TrainingConfig {
        dc: false,
        dr: false,
        ..cfg.clone()
    };
    let mut a = Trainer::new(&domain_cfg, spec)?;
    let mut b = Trainer::new(&base_cfg, spec)?;
    if a.total_steps() < steps {
        return Err(contract(format!(
            "schedule has only {} steps",
            a.total_steps()
        )));
    }
    let mut report = IdentityReport {
        steps,
        first_divergent_step: None,
        max_domain_loss: 0.0,
        max_divergence: 0.0,
        moved: false,
    };
    let initial = a.params().clone();
    for step in 1..=steps {
        let sa = a.step()?;
        b.step()?;
        report.max_domain_loss = report.max_domain_loss.max(sa.domain_loss.abs());
        report.max_divergence = report.max_divergence.max(sa.mean_divergence.abs());
        if report.first_divergent_step.is_none() && a.params() != b.params() {
            report.first_divergent_step = Some(step);
        }
    }
    report.moved = a.params() != &initial;
    Ok(report)
}

fn identity_reduction(_: Option<Mutation>) -> Result<String, String> {
    let cfg = TrainingConfig {
        lr: 0.01,
        group_size: 4,
        embed_dim: 4,
        hidden_dim: 8,
        ..TrainingConfig::default()
    };
    let report = identity_reduction_check(&cfg, &micro_task(), 30).map_err(err)?;
    if !report.holds() {
        return Err(format!("{report:?}"));
    }
    Ok(format!("{} steps bitwise equal", report.steps))
}

fn sampling_consistency(_: Option<Mutation>) -> Result<String, String> {
    let cfg = PolicyConfig {
        max_len: 6,
        ..micro_config(3)
    };
    let params = PolicyParameters::random(cfg.clone(), 9).map_err(err)?;
    let context = micro_context(cfg.vocab()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let samples = sample_group(&params, &context, 64, 6, &mut rng).map_err(err)?;
    let mut worst = 0.0f64;
    for s in &samples {
        let tf = teacher_forced_distributions(&params, &context, &s.tokens).map_err(err)?;
        let d = (tf.log_prob(&s.tokens) - s.log_prob).abs();
        if d > 1e-9 {
            return Err(format!(
                "tokens {:?}: sampled {} vs scored {}",
                s.tokens,
                s.log_prob,
                tf.log_prob(&s.tokens)
            ));
        }
        worst = worst.max(d);
    }
    Ok(format!("64 samples, max difference {worst:.1e}"))
}

fn snapshot_immutability(_: Option<Mutation>) -> Result<String, String> {
    let cfg = micro_config(2);
    let mut params = PolicyParameters::random(cfg.clone(), 12).map_err(err)?;
    let snap = snapshot(&params, SnapshotRole::Reference).map_err(err)?;
    let context = micro_context(cfg.vocab()).map_err(err)?;
    let output = micro_outputs(cfg.vocab())[0].clone();
    let before = teacher_forced_distributions(&snap, &context, &output).map_err(err)?;
    let live = teacher_forced_distributions(&params, &context, &output).map_err(err)?;
    let kl0 =
        crate::divergence::sequence_divergence(DivergenceKind::Kl, &live, &before).map_err(err)?;
    if before != live || kl0 != 0.0 {
        return Err(format!("fresh snapshot differs, KL = {kl0}"));
    }
    let grads: Vec<Array> = params
        .tensors()
        .iter()
        .map(|t| Array::filled(t.shape(), 1.0))
        .collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        },
        params.tensors(),
    );
    adam.step(params.tensors_mut(), &grads).map_err(err)?;
    let after = teacher_forced_distributions(&snap, &context, &output).map_err(err)?;
    let moved = teacher_forced_distributions(&params, &context, &output).map_err(err)?;
    if after != before || moved == before {
        return Err("snapshot changed or live policy did not move".into());
    }
    Ok("snapshot unchanged after an update".into())
}

fn reward_decomposition(_: Option<Mutation>) -> Result<String, String> {
    let vocab = Vocab::new(3);
    let v = vocab.size();
    let cfg = RewardConfig {
        accuracy_weight: 0.75,
        format_weight: 1.25,
    };
    let mut count = 0;
    let mut seqs: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..4 {
        let next: Vec<Vec<usize>> = seqs
            .iter()
            .flat_map(|s| {
                (0..v).map(move |t| {
                    let mut n = s.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
        seqs.extend(next.into_iter().filter(|s| s.len() <= 4));
        seqs.sort();
        seqs.dedup();
    }
    for s in seqs.iter().filter(|s| !s.is_empty()) {
        for gold in 0..3 {
            let fmt = s.len() == 4
                && s[0] == vocab.open()
                && s[1] < 3
                && s[2] == vocab.close()
                && s[3] == vocab.end();
            let acc = fmt && s[1] == gold;
            let expected = cfg.accuracy_weight * f64::from(u8::from(acc))
                + cfg.format_weight * f64::from(u8::from(fmt));
            let got = reward(s, gold, vocab, &cfg);
            if got != expected {
                return Err(format!(
                    "output {s:?}, gold {gold}: reward {got}, expected {expected}"
                ));
            }
            count += 1;
        }
    }
    Ok(format!("{count} (output, label) pairs"))
}

fn label_invariance(_: Option<Mutation>) -> Result<String, String> {
    let mut checked = 0;
    for family in [TaskFamily::Rotation, TaskFamily::Mirror] {
        let spec = TaskSpec {
            family,
            grid_size: 4,
            num_classes: 4,
            shots: 2,
            test_size: 30,
            ..TaskSpec::default()
        };
        let data = generate_dataset(&spec).map_err(err)?;
        let label_of = |grid: &Grid| -> Option<usize> {
            let c = orbit_canonical(grid, family);
            data.train
                .iter()
                .chain(&data.test_canonical)
                .find(|e| orbit_canonical(&e.context.observation, family) == c)
                .map(|e| e.label)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for ep in data.episodes() {
            for t in family.group() {
                let img = apply_transform(t, &ep.context, &mut rng).map_err(err)?;
                if label_of(&img.observation) != Some(ep.label) {
                    return Err(format!(
                        "{family} episode with label {} changes label under {t}",
                        ep.label
                    ));
                }
                checked += 1;
            }
        }
        for (c, t) in data.test_canonical.iter().zip(&data.test_transformed) {
            let same_orbit = orbit_canonical(&c.context.observation, family)
                == orbit_canonical(&t.context.observation, family);
            if !same_orbit || c.label != t.label {
                return Err(format!(
                    "{family} transformed test episode is not an image of its source"
                ));
            }
        }
    }
    Ok(format!("{checked} (episode, transform) pairs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_suite(None) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn shaping_mutation_is_caught() {
        let results = run_suite(Some(Mutation::ShapingSign));
        let failed: Vec<_> = results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect();
        assert_eq!(failed, vec!["shaping-algebra"]);
    }
}
