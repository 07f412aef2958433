//! The optimization loop and the ablation harness.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{Graph, Var};
use crate::array::Array;
use crate::divergence::DivergenceKind;
use crate::domain::{
    apply_transform, domain_aware_objective, output_consistency_reward, DomainSettings,
    DomainTransform,
};
use crate::error::{Error, Result};
use crate::grpo::{ObjectiveBreakdown, ObjectiveSettings, RatioMode, SampleGroup};
use crate::optim::{Adam, AdamConfig};
use crate::policy::{
    sample_group, snapshot, Context, PolicyConfig, PolicyParameters, PolicySnapshot, SnapshotRole,
};
use crate::task::{evaluate, generate_dataset, reward, Dataset, RewardConfig, TaskSpec};

/// Every hyperparameter and ablation switch of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub group_size: usize,
    pub beta: f64,
    pub lr: f64,
    /// Contexts per optimizer step.
    pub batch_size: usize,
    /// `None` picks 2 epochs for 1- and 2-shot tasks and 4 otherwise.
    pub epochs: Option<usize>,
    /// Passes over the training contexts within one epoch.
    pub repeat: usize,
    pub dc: bool,
    pub dr: bool,
    pub dc_divergence: DivergenceKind,
    pub dr_divergence: DivergenceKind,
    pub ratio_mode: RatioMode,
    pub clip: Option<f64>,
    /// Add the output-consistency bonus to rewards.
    pub oc_arm: bool,
    /// Train on randomly transformed inputs without any constraint.
    pub augmentation_arm: bool,
    /// `None` uses the task family's random transform.
    pub transform: Option<DomainTransform>,
    pub domain_weight: f64,
    pub stop_grad_support: bool,
    pub advantage_epsilon: f64,
    /// Adam updates per sampled batch.
    pub inner_updates: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub reward: RewardConfig,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.04,
            lr: 5e-5,
            batch_size: 4,
            epochs: None,
            repeat: 50,
            dc: true,
            dr: true,
            dc_divergence: DivergenceKind::Kl,
            dr_divergence: DivergenceKind::Js,
            ratio_mode: RatioMode::Sequence,
            clip: None,
            oc_arm: false,
            augmentation_arm: false,
            transform: None,
            domain_weight: 1.0,
            stop_grad_support: false,
            advantage_epsilon: 1e-8,
            inner_updates: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            embed_dim: 16,
            hidden_dim: 64,
            max_len: 6,
            reward: RewardConfig::default(),
            log_interval: 10,
            seed: 0,
        }
    }
}

fn bad(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        detail: detail.into(),
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(bad(key, format!("must be positive, got {v}")))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(bad(key, format!("must be non-negative, got {v}")))
            }
        };
        let at_least = |key: &str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err(bad(key, format!("must be at least {min}, got {v}")))
            }
        };
        at_least("group_size", self.group_size, 2)?;
        non_negative("beta", self.beta)?;
        positive("lr", self.lr)?;
        at_least("batch_size", self.batch_size, 1)?;
        if let Some(e) = self.epochs {
            at_least("epochs", e, 1)?;
        }
        at_least("repeat", self.repeat, 1)?;
        if let Some(c) = self.clip {
            if !(c > 0.0 && c < 1.0) {
                return Err(bad("clip", format!("must lie in (0, 1), got {c}")));
            }
        }
        non_negative("domain_weight", self.domain_weight)?;
        non_negative("advantage_epsilon", self.advantage_epsilon)?;
        at_least("inner_updates", self.inner_updates, 1)?;
        for (key, v) in [
            ("adam.beta1", self.adam_beta1),
            ("adam.beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        positive("adam.eps", self.adam_eps)?;
        at_least("model.embed_dim", self.embed_dim, 1)?;
        at_least("model.hidden_dim", self.hidden_dim, 1)?;
        at_least("model.max_len", self.max_len, 1)?;
        non_negative("reward.accuracy_weight", self.reward.accuracy_weight)?;
        non_negative("reward.format_weight", self.reward.format_weight)?;
        at_least("log_interval", self.log_interval, 1)?;
        Ok(())
    }

    pub fn resolved_epochs(&self, spec: &TaskSpec) -> usize {
        self.epochs.unwrap_or(if spec.shots <= 2 { 2 } else { 4 })
    }

    pub fn resolved_transform(&self, spec: &TaskSpec) -> DomainTransform {
        self.transform
            .unwrap_or_else(|| spec.family.default_transform())
    }

    pub fn policy_config(&self, spec: &TaskSpec) -> PolicyConfig {
        PolicyConfig {
            grid_size: spec.grid_size,
            obs_values: spec.obs_values,
            num_classes: spec.num_classes,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
        }
    }

    pub fn objective_settings(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            beta: self.beta,
            ratio_mode: self.ratio_mode,
            clip: self.clip,
        }
    }

    pub fn domain_settings(&self) -> DomainSettings {
        DomainSettings {
            dc: self.dc,
            dr: self.dr,
            dc_kind: self.dc_divergence,
            dr_kind: self.dr_divergence,
            domain_weight: self.domain_weight,
            stop_grad_support: self.stop_grad_support,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Batch-mean signals of one optimizer step, taken at sampling time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub mean_divergence: f64,
    pub domain_loss: f64,
    pub ref_kl: f64,
    pub breakdown: ObjectiveBreakdown,
}

impl StepStats {
    fn accumulate(&mut self, other: &StepStats) {
        self.mean_reward += other.mean_reward;
        self.mean_abs_advantage += other.mean_abs_advantage;
        self.mean_divergence += other.mean_divergence;
        self.domain_loss += other.domain_loss;
        self.ref_kl += other.ref_kl;
        self.breakdown.policy_term += other.breakdown.policy_term;
        self.breakdown.ref_kl_term += other.breakdown.ref_kl_term;
        self.breakdown.domain_loss_term += other.breakdown.domain_loss_term;
        self.breakdown.total += other.breakdown.total;
        self.breakdown.beta = other.breakdown.beta;
    }

    fn scaled(mut self, factor: f64) -> Self {
        self.mean_reward *= factor;
        self.mean_abs_advantage *= factor;
        self.mean_divergence *= factor;
        self.domain_loss *= factor;
        self.ref_kl *= factor;
        self.breakdown.policy_term *= factor;
        self.breakdown.ref_kl_term *= factor;
        self.breakdown.domain_loss_term *= factor;
        self.breakdown.total *= factor;
        self
    }
}

/// One logged line of the metrics stream. Step statistics are averaged over
/// the steps since the previous record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub mean_divergence: f64,
    pub domain_loss: f64,
    pub ref_kl: f64,
    pub policy_term: f64,
    pub ref_kl_term: f64,
    pub domain_loss_term: f64,
    pub total: f64,
    pub beta: f64,
    pub canonical_accuracy: f64,
    pub transformed_accuracy: f64,
    /// Milliseconds since the start of training. Not serialized.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

/// Final numbers of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub epochs: usize,
    pub final_mean_reward: f64,
    pub canonical_accuracy: f64,
    pub transformed_accuracy: f64,
}

pub struct TrainOutcome {
    pub policy: PolicySnapshot,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

// Stream ids for the run seed, one generator per consumer.
const STREAM_SAMPLING: u64 = 1;
const STREAM_TRANSFORM: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Step-wise trainer. `train` drives it to completion; tests can step it
/// directly to inspect parameter trajectories.
pub struct Trainer {
    cfg: TrainingConfig,
    dataset: Dataset,
    params: PolicyParameters,
    reference: PolicySnapshot,
    adam: Adam,
    transform: DomainTransform,
    sample_rng: ChaCha8Rng,
    transform_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    epochs: usize,
    steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainingConfig, spec: &TaskSpec) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let dataset = generate_dataset(spec)?;
        Self::with_dataset(cfg, dataset)
    }

    pub fn with_dataset(cfg: &TrainingConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let spec = &dataset.spec;
        let params = PolicyParameters::init(cfg.policy_config(spec), cfg.seed)?;
        let reference = snapshot(&params, SnapshotRole::Reference)?;
        let adam = Adam::new(cfg.adam(), params.tensors());
        let per_epoch = dataset.train.len() * cfg.repeat;
        Ok(Self {
            transform: cfg.resolved_transform(spec),
            epochs: cfg.resolved_epochs(spec),
            steps_per_epoch: per_epoch.div_ceil(cfg.batch_size),
            cfg: cfg.clone(),
            params,
            reference,
            adam,
            sample_rng: stream(cfg.seed, STREAM_SAMPLING),
            transform_rng: stream(cfg.seed, STREAM_TRANSFORM),
            shuffle_rng: stream(cfg.seed, STREAM_SHUFFLE),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            dataset,
        })
    }

    pub fn params(&self) -> &PolicyParameters {
        &self.params
    }

    pub fn reference(&self) -> &PolicySnapshot {
        &self.reference
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.epochs
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Epoch of the next step, counted from 1.
    pub fn epoch(&self) -> usize {
        (self.step / self.steps_per_epoch).min(self.epochs.saturating_sub(1)) + 1
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.step % self.steps_per_epoch == 0 {
            let n = self.dataset.train.len();
            self.order.clear();
            for _ in 0..self.cfg.repeat {
                let mut pass: Vec<usize> = (0..n).collect();
                pass.shuffle(&mut self.shuffle_rng);
                self.order.extend(pass);
            }
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    fn halted(&self, detail: impl fmt::Display) -> Error {
        Error::Halted {
            step: self.step + 1,
            detail: detail.to_string(),
        }
    }

    /// Samples one batch from the current policy and applies the configured
    /// number of Adam updates to it.
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.next_batch();
        let old = snapshot(&self.params, SnapshotRole::Old)?;
        let vocab = self.params.vocab();
        let family = self.dataset.spec.family;

        let mut groups = Vec::with_capacity(batch.len());
        let mut transformed = Vec::with_capacity(batch.len());
        for &idx in &batch {
            let episode = &self.dataset.train[idx];
            let mut context = episode.context.clone();
            if self.cfg.augmentation_arm {
                let t = family.group()[self.transform_rng.random_range(0..4)];
                context = apply_transform(t, &context, &mut self.transform_rng)?;
            }
            let samples = sample_group(
                &old,
                &context,
                self.cfg.group_size,
                self.cfg.max_len,
                &mut self.sample_rng,
            )?;
            let outputs: Vec<Vec<usize>> = samples.into_iter().map(|s| s.tokens).collect();
            let mut rewards: Vec<f64> = outputs
                .iter()
                .map(|o| reward(o, episode.label, vocab, &self.cfg.reward))
                .collect();
            if self.cfg.oc_arm {
                let bonus = output_consistency_reward(
                    &old,
                    self.transform,
                    &context,
                    &outputs,
                    &mut self.transform_rng,
                )?;
                for (r, b) in rewards.iter_mut().zip(bonus) {
                    *r += b;
                }
            }
            let support_context: Context = if self.cfg.dc || self.cfg.dr {
                apply_transform(self.transform, &context, &mut self.transform_rng)?
            } else {
                context.clone()
            };
            groups.push(SampleGroup::new(
                context,
                outputs,
                rewards,
                self.cfg.advantage_epsilon,
            )?);
            transformed.push(support_context);
        }

        let mut stats = None;
        for _ in 0..self.cfg.inner_updates {
            let s = self.update(&old, &mut groups, &transformed)?;
            stats.get_or_insert(s);
        }
        self.step += 1;
        Ok(stats.expect("at least one inner update"))
    }

    fn update(
        &mut self,
        old: &PolicyParameters,
        groups: &mut [SampleGroup],
        transformed: &[Context],
    ) -> Result<StepStats> {
        let settings = self.cfg.objective_settings();
        let domain = self.cfg.domain_settings();
        let g = Graph::new();
        let live = self.params.bind(&g);
        let mut total: Option<Var> = None;
        let mut stats = StepStats::default();
        for (group, support) in groups.iter_mut().zip(transformed) {
            let obj = domain_aware_objective(
                &live,
                &self.params,
                old,
                &self.reference,
                group,
                support,
                &settings,
                &domain,
            )
            .map_err(|e| if e.is_numeric() { self.halted(e) } else { e })?;
            let n = group.len() as f64;
            stats.accumulate(&StepStats {
                mean_reward: group.rewards.iter().sum::<f64>() / n,
                mean_abs_advantage: group.advantages.iter().map(|a| a.abs()).sum::<f64>() / n,
                mean_divergence: obj.divergences.iter().sum::<f64>() / n,
                domain_loss: obj.domain_loss,
                ref_kl: obj.objective.breakdown.ref_kl_term,
                breakdown: obj.objective.breakdown,
            });
            group.domain_divergences = obj.divergences;
            group.shaped_advantages = obj.shaped_advantages;
            total = Some(match total {
                Some(acc) => g.add(acc, obj.objective.total)?,
                None => obj.objective.total,
            });
        }
        let b = groups.len() as f64;
        let stats = stats.scaled(1.0 / b);
        let total = total.expect("non-empty batch");
        let loss = g.scale(total, -1.0 / b)?;
        if !g.scalar(loss).is_finite() {
            return Err(self.halted(format!(
                "loss {} (policy {}, ref kl {}, domain {})",
                g.scalar(loss),
                stats.breakdown.policy_term,
                stats.breakdown.ref_kl_term,
                stats.breakdown.domain_loss_term
            )));
        }
        let grads = g
            .backward(loss)
            .map_err(|e| if e.is_numeric() { self.halted(e) } else { e })?;
        let grads: Vec<Array> = live.vars().iter().map(|v| grads.wrt(*v).clone()).collect();
        drop(live);
        self.adam.step(self.params.tensors_mut(), &grads)?;
        if !self.params.is_finite() {
            return Err(self.halted("parameters became non-finite after the optimizer step"));
        }
        Ok(stats)
    }

    /// Greedy accuracy on the canonical and transformed test splits.
    pub fn test_accuracy(&self) -> Result<(f64, f64)> {
        Ok((
            evaluate(&self.params, &self.dataset.test_canonical)?,
            evaluate(&self.params, &self.dataset.test_transformed)?,
        ))
    }
}

/// Runs a full training schedule, passing each metrics record to `sink` as
/// soon as it is produced.
pub fn train<F>(cfg: &TrainingConfig, spec: &TaskSpec, sink: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    run_trainer(Trainer::new(cfg, spec)?, sink)
}

/// As [`train`], over an already generated dataset.
pub fn run_trainer<F>(mut trainer: Trainer, mut sink: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    let start = Instant::now();
    let total_steps = trainer.total_steps();
    let interval = trainer.cfg.log_interval;
    let mut records = Vec::new();
    let mut window = StepStats::default();
    let mut window_len = 0usize;
    while !trainer.is_done() {
        let epoch = trainer.epoch();
        let stats = trainer.step()?;
        window.accumulate(&stats);
        window_len += 1;
        let step = trainer.steps_taken();
        if step % interval == 0 || step == total_steps {
            let mean = window.scaled(1.0 / window_len as f64);
            let (canonical, transformed) = trainer.test_accuracy()?;
            let record = MetricsRecord {
                step,
                epoch,
                mean_reward: mean.mean_reward,
                mean_abs_advantage: mean.mean_abs_advantage,
                mean_divergence: mean.mean_divergence,
                domain_loss: mean.domain_loss,
                ref_kl: mean.ref_kl,
                policy_term: mean.breakdown.policy_term,
                ref_kl_term: mean.breakdown.ref_kl_term,
                domain_loss_term: mean.breakdown.domain_loss_term,
                total: mean.breakdown.total,
                beta: mean.breakdown.beta,
                canonical_accuracy: canonical,
                transformed_accuracy: transformed,
                wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            sink(&record)?;
            records.push(record);
            window = StepStats::default();
            window_len = 0;
        }
    }
    let last = records.last().cloned();
    let (canonical_accuracy, transformed_accuracy) = match &last {
        Some(r) => (r.canonical_accuracy, r.transformed_accuracy),
        None => trainer.test_accuracy()?,
    };
    let summary = RunSummary {
        seed: trainer.cfg.seed,
        steps: trainer.steps_taken(),
        epochs: trainer.epochs,
        final_mean_reward: last.map(|r| r.mean_reward).unwrap_or(0.0),
        canonical_accuracy,
        transformed_accuracy,
    };
    Ok(TrainOutcome {
        policy: snapshot(&trainer.params, SnapshotRole::Final)?,
        records,
        summary,
    })
}

/// One arm of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    Baseline,
    Dc,
    Dr,
    DcDr,
    Oc,
    Augment,
    /// Domain constraint and shaping with the given (DC, DR) divergences.
    Grid(DivergenceKind, DivergenceKind),
}

impl Arm {
    /// The full ten-arm grid.
    pub fn all() -> Vec<Arm> {
        use DivergenceKind::{Js, Kl};
        vec![
            Arm::Baseline,
            Arm::Dc,
            Arm::Dr,
            Arm::DcDr,
            Arm::Oc,
            Arm::Augment,
            Arm::Grid(Kl, Kl),
            Arm::Grid(Kl, Js),
            Arm::Grid(Js, Kl),
            Arm::Grid(Js, Js),
        ]
    }

    /// Overrides the ablation switches of `base`.
    pub fn configure(self, base: &TrainingConfig) -> TrainingConfig {
        let mut cfg = base.clone();
        cfg.dc = false;
        cfg.dr = false;
        cfg.oc_arm = false;
        cfg.augmentation_arm = false;
        match self {
            Arm::Baseline => {}
            Arm::Dc => cfg.dc = true,
            Arm::Dr => cfg.dr = true,
            Arm::DcDr => {
                cfg.dc = true;
                cfg.dr = true;
            }
            Arm::Oc => cfg.oc_arm = true,
            Arm::Augment => cfg.augmentation_arm = true,
            Arm::Grid(dc_kind, dr_kind) => {
                cfg.dc = true;
                cfg.dr = true;
                cfg.dc_divergence = dc_kind;
                cfg.dr_divergence = dr_kind;
            }
        }
        cfg
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Baseline => f.write_str("baseline"),
            Arm::Dc => f.write_str("dc"),
            Arm::Dr => f.write_str("dr"),
            Arm::DcDr => f.write_str("dc-dr"),
            Arm::Oc => f.write_str("oc"),
            Arm::Augment => f.write_str("augment"),
            Arm::Grid(a, b) => write!(f, "grid-{a}-{b}"),
        }
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Arm::all()
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| format!("unknown arm `{s}`"))
    }
}

impl Serialize for Arm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        name.parse().map_err(serde::de::Error::custom)
    }
}

/// Sample mean, sample standard deviation and standard error of the mean.
pub fn mean_std_sem(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    (mean, std, std / (n as f64).sqrt())
}

/// Standard error of the difference of two arm means.
pub fn pooled_standard_error(a: &ArmResult, b: &ArmResult) -> f64 {
    (a.sem.powi(2) + b.sem.powi(2)).sqrt()
}

/// Aggregated transformed-test accuracy of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    /// Per-seed summaries of the successful runs, ordered by seed.
    pub runs: Vec<RunSummary>,
    /// `(seed, error)` of failed runs.
    pub failures: Vec<(u64, String)>,
    pub mean: f64,
    pub std: f64,
    pub sem: f64,
    pub canonical_mean: f64,
}

impl ArmResult {
    fn aggregate(arm: Arm, mut runs: Vec<RunSummary>, mut failures: Vec<(u64, String)>) -> Self {
        runs.sort_by_key(|r| r.seed);
        failures.sort();
        let acc: Vec<f64> = runs.iter().map(|r| r.transformed_accuracy).collect();
        let canon: Vec<f64> = runs.iter().map(|r| r.canonical_accuracy).collect();
        let (mean, std, sem) = mean_std_sem(&acc);
        Self {
            arm: arm.to_string(),
            runs,
            failures,
            mean,
            std,
            sem,
            canonical_mean: mean_std_sem(&canon).0,
        }
    }
}

/// Results of every arm, sorted by arm name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<ArmResult>,
}

impl AblationTable {
    pub fn get(&self, arm: Arm) -> Option<&ArmResult> {
        let name = arm.to_string();
        self.rows.iter().find(|r| r.arm == name)
    }

    /// Comma-separated table, one row per arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "arm,n,failed,transformed_mean,transformed_std,transformed_sem,canonical_mean\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.arm,
                r.runs.len(),
                r.failures.len(),
                r.mean,
                r.std,
                r.sem,
                r.canonical_mean
            ));
        }
        out
    }
}

/// Runs every (arm, seed) pair with the default runner.
///
/// Each seed sets both the training seed and the dataset seed, so arms are
/// compared on the same data and initializations.
pub fn ablation_suite(
    base: &TrainingConfig,
    spec: &TaskSpec,
    arms: &[Arm],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationTable> {
    ablation_suite_with(base, spec, arms, seeds, jobs, |_, cfg, spec| {
        train(cfg, spec, |_| Ok(())).map(|o| o.summary)
    })
}

/// As [`ablation_suite`], with a caller-supplied runner for each job.
pub fn ablation_suite_with<F>(
    base: &TrainingConfig,
    spec: &TaskSpec,
    arms: &[Arm],
    seeds: &[u64],
    jobs: usize,
    run: F,
) -> Result<AblationTable>
where
    F: Fn(Arm, &TrainingConfig, &TaskSpec) -> Result<RunSummary> + Sync,
{
    if arms.is_empty() || seeds.is_empty() {
        return Err(bad("ablation", "need at least one arm and one seed"));
    }
    base.validate()?;
    spec.validate()?;
    let jobs_list: Vec<(Arm, u64)> = arms
        .iter()
        .flat_map(|a| seeds.iter().map(move |s| (*a, *s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| bad("jobs", e.to_string()))?;
    let results: Vec<(Arm, u64, Result<RunSummary>)> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(arm, seed)| {
                let mut cfg = arm.configure(base);
                cfg.seed = seed;
                let mut spec = spec.clone();
                spec.seed = seed;
                (arm, seed, run(arm, &cfg, &spec))
            })
            .collect()
    });
    let mut arms_sorted: Vec<Arm> = arms.to_vec();
    arms_sorted.sort_by_key(|a| a.to_string());
    arms_sorted.dedup();
    let rows = arms_sorted
        .into_iter()
        .map(|arm| {
            let mut runs = Vec::new();
            let mut failures = Vec::new();
            for (a, seed, r) in &results {
                if *a != arm {
                    continue;
                }
                match r {
                    Ok(s) => runs.push(s.clone()),
                    Err(e) => failures.push((*seed, e.to_string())),
                }
            }
            ArmResult::aggregate(arm, runs, failures)
        })
        .collect();
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_round_trip() {
        for arm in Arm::all() {
            assert_eq!(arm.to_string().parse::<Arm>().unwrap(), arm);
        }
        assert_eq!(Arm::all().len(), 10);
    }

    #[test]
    fn default_epochs_follow_shots() {
        let cfg = TrainingConfig::default();
        for (shots, epochs) in [(1, 2), (2, 2), (4, 4), (8, 4)] {
            let spec = TaskSpec {
                shots,
                ..TaskSpec::default()
            };
            assert_eq!(cfg.resolved_epochs(&spec), epochs);
        }
    }

    #[test]
    fn invalid_values_name_their_key() {
        let cfg = TrainingConfig {
            group_size: 1,
            ..TrainingConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "group_size"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn statistics_of_known_values() {
        let (m, s, e) = mean_std_sem(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((e - s / 2.0).abs() < 1e-15);
    }
}
