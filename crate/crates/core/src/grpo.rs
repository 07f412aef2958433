//! Group-relative advantages and the GRPO objective with a KL-to-reference
//! penalty.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ad::{Graph, Var};
use crate::array::Array;
use crate::divergence::{sequence_divergence_graph, DivergenceKind};
use crate::error::{contract, Error, Result};
use crate::policy::{teacher_forced_distributions, BoundPolicy, Context, PolicyParameters};

pub const DEFAULT_ADVANTAGE_EPSILON: f64 = 1e-8;

/// `A_i = (r_i - mean) / (std + epsilon)` with the population standard
/// deviation. A constant group maps to exact zeros.
pub fn normalize_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(contract(format!(
            "advantage normalization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(contract(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + epsilon;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// How the importance ratio against the sampling policy is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// `exp(Σ_t Δlogp_t)`, one ratio per sequence.
    Sequence,
    /// `mean_t exp(Δlogp_t)`.
    Token,
}

impl fmt::Display for RatioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatioMode::Sequence => "sequence",
            RatioMode::Token => "token",
        })
    }
}

impl FromStr for RatioMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequence" => Ok(RatioMode::Sequence),
            "token" => Ok(RatioMode::Token),
            other => Err(format!(
                "unknown ratio mode `{other}` (expected sequence or token)"
            )),
        }
    }
}

/// One context with its sampled outputs and the per-sample signals derived
/// from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGroup {
    pub context: Context,
    pub outputs: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub domain_divergences: Vec<f64>,
    pub shaped_advantages: Vec<f64>,
}

impl SampleGroup {
    /// Builds a group and normalizes its rewards.
    pub fn new(
        context: Context,
        outputs: Vec<Vec<usize>>,
        rewards: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        if outputs.len() != rewards.len() {
            return Err(contract(format!(
                "{} outputs but {} rewards",
                outputs.len(),
                rewards.len()
            )));
        }
        let advantages = normalize_advantages(&rewards, epsilon)?;
        let g = outputs.len();
        Ok(Self {
            context,
            outputs,
            rewards,
            shaped_advantages: advantages.clone(),
            advantages,
            domain_divergences: vec![0.0; g],
        })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Scalar values of the objective's components. The objective is maximized;
/// the training loss is `-total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub policy_term: f64,
    pub ref_kl_term: f64,
    pub domain_loss_term: f64,
    pub total: f64,
    pub beta: f64,
}

impl ObjectiveBreakdown {
    /// `total - (policy - beta * kl - domain)`; zero up to rounding.
    pub fn consistency_residual(&self) -> f64 {
        self.total - (self.policy_term - self.beta * self.ref_kl_term - self.domain_loss_term)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSettings {
    pub beta: f64,
    pub ratio_mode: RatioMode,
    /// PPO-style ratio bound; `None` is the unclipped objective.
    pub clip: Option<f64>,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            beta: 0.04,
            ratio_mode: RatioMode::Sequence,
            clip: None,
        }
    }
}

/// Graph nodes of one evaluated group objective.
pub struct GroupObjective {
    pub total: Var,
    pub policy_term: Var,
    pub ref_kl_term: Var,
    /// `[T_i, V]` live distributions per sample, shared with the domain terms.
    pub live_dists: Vec<Var>,
    pub breakdown: ObjectiveBreakdown,
}

/// Live teacher-forced distributions for every output, sharing one encoding.
pub fn live_distributions(
    live: &BoundPolicy<'_>,
    context: &Context,
    outputs: &[Vec<usize>],
) -> Result<Vec<Var>> {
    let hidden = live.encode(context)?;
    outputs
        .iter()
        .map(|o| live.sequence_distributions(hidden, o))
        .collect()
}

/// Policy term and reference-KL term over precomputed live distributions.
pub(crate) fn policy_and_ref_terms(
    g: &Graph,
    live_dists: &[Var],
    old: &PolicyParameters,
    reference: &PolicyParameters,
    context: &Context,
    outputs: &[Vec<usize>],
    advantages: &[f64],
    settings: &ObjectiveSettings,
) -> Result<(Var, Var)> {
    let n = outputs.len();
    if n == 0 || advantages.len() != n || live_dists.len() != n {
        return Err(contract(format!(
            "group of {n} outputs with {} advantages and {} distributions",
            advantages.len(),
            live_dists.len()
        )));
    }
    if !(settings.beta >= 0.0) {
        return Err(contract(format!(
            "beta must be non-negative, got {}",
            settings.beta
        )));
    }
    let inv_g = 1.0 / n as f64;
    let mut policy: Option<Var> = None;
    let mut ref_kl: Option<Var> = None;
    for (i, ((dist, output), &adv)) in live_dists.iter().zip(outputs).zip(advantages).enumerate() {
        let old_lp = teacher_forced_distributions(old, context, output)?.token_log_probs(output);
        let ref_dist = teacher_forced_distributions(reference, context, output)?;

        let log_live = g.log(*dist)?;
        let token_lp = g.pick(log_live, output)?;
        let ratio_err = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteRatio { sample: i },
            other => other,
        };
        let ratio = match settings.ratio_mode {
            RatioMode::Sequence => {
                let lp = g.sum(token_lp)?;
                let old_sum = g.constant(Array::scalar(old_lp.iter().sum()));
                g.exp(g.sub(lp, old_sum)?).map_err(ratio_err)?
            }
            RatioMode::Token => {
                let old_tok = g.constant(Array::vector(old_lp));
                let per_token = g.exp(g.sub(token_lp, old_tok)?).map_err(ratio_err)?;
                g.mean(per_token)?
            }
        };
        let term = match settings.clip {
            Some(eps) => {
                let r = g.scalar(ratio);
                let clipped = r.clamp(1.0 - eps, 1.0 + eps);
                if clipped * adv < r * adv {
                    g.constant(Array::scalar(clipped * adv * inv_g))
                } else {
                    g.scale(ratio, adv * inv_g)?
                }
            }
            None => g.scale(ratio, adv * inv_g)?,
        };
        policy = Some(match policy {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });

        let ref_probs = g.constant(ref_dist.as_array().clone());
        let kl = sequence_divergence_graph(g, DivergenceKind::Kl, *dist, ref_probs)?;
        let kl = g.scale(kl, inv_g)?;
        ref_kl = Some(match ref_kl {
            Some(acc) => g.add(acc, kl)?,
            None => kl,
        });
    }
    Ok((policy.expect("non-empty"), ref_kl.expect("non-empty")))
}

/// `(1/G) Σ_i ratio_i A_i - β · mean_i KL(π_θ ‖ π_ref)` for one group.
///
/// `advantages` are treated as constants, as are the old-policy
/// log-probabilities in the ratio.
pub fn grpo_objective(
    live: &BoundPolicy<'_>,
    old: &PolicyParameters,
    reference: &PolicyParameters,
    group: &SampleGroup,
    advantages: &[f64],
    settings: &ObjectiveSettings,
) -> Result<GroupObjective> {
    let g = live.graph();
    let live_dists = live_distributions(live, &group.context, &group.outputs)?;
    let (policy_term, ref_kl_term) = policy_and_ref_terms(
        g,
        &live_dists,
        old,
        reference,
        &group.context,
        &group.outputs,
        advantages,
        settings,
    )?;
    let total = g.sub(policy_term, g.scale(ref_kl_term, settings.beta)?)?;
    let breakdown = ObjectiveBreakdown {
        policy_term: g.scalar(policy_term),
        ref_kl_term: g.scalar(ref_kl_term),
        domain_loss_term: 0.0,
        total: g.scalar(total),
        beta: settings.beta,
    };
    Ok(GroupObjective {
        total,
        policy_term,
        ref_kl_term,
        live_dists,
        breakdown,
    })
}
