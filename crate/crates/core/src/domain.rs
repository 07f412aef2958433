//! Domain priors expressed as input transformations, and the two mechanisms
//! that inject them into GRPO:
//!
//! * a domain-constraint loss `KL(π_θ^D ‖ π_θ)` between the policy on the
//!   transformed context (the domain-support distribution) and the policy on
//!   the original context, differentiated through both branches;
//! * advantage shaping `A_i^d = (1 - D_i) · A_i`, where `D_i` is the
//!   per-sample JS divergence between the same two distributions along the
//!   sampled output `o_i`. `D_i` is a gradient-constant weight.
//!
//! Both are evaluated by teacher forcing the sampled outputs through the
//! transformed context, so `D_i` differs across samples of one group.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::Var;
use crate::divergence::{sequence_divergence, sequence_divergence_graph, DivergenceKind};
use crate::error::{contract, Result};
use crate::grpo::{grpo_objective, GroupObjective, ObjectiveSettings, SampleGroup};
use crate::policy::{
    teacher_forced_distributions, BoundPolicy, CategoricalSequenceDistribution, Context, Grid,
    PolicyParameters,
};

/// Transformation of the observation grid. The `Random*` kinds draw a
/// concrete transform each time they are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTransform {
    Identity,
    /// Clockwise quarter turns, 1 to 3.
    Rotate(u8),
    RandomRotation,
    /// Mirror left-right.
    ReflectHorizontal,
    /// Mirror top-bottom.
    ReflectVertical,
    RandomReflection,
}

impl fmt::Display for DomainTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTransform::Identity => f.write_str("identity"),
            DomainTransform::Rotate(q) => write!(f, "rotate{}", 90 * u32::from(*q)),
            DomainTransform::RandomRotation => f.write_str("rotate-random"),
            DomainTransform::ReflectHorizontal => f.write_str("reflect-h"),
            DomainTransform::ReflectVertical => f.write_str("reflect-v"),
            DomainTransform::RandomReflection => f.write_str("reflect-random"),
        }
    }
}

impl FromStr for DomainTransform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "identity" => DomainTransform::Identity,
            "rotate90" => DomainTransform::Rotate(1),
            "rotate180" => DomainTransform::Rotate(2),
            "rotate270" => DomainTransform::Rotate(3),
            "rotate-random" => DomainTransform::RandomRotation,
            "reflect-h" => DomainTransform::ReflectHorizontal,
            "reflect-v" => DomainTransform::ReflectVertical,
            "reflect-random" => DomainTransform::RandomReflection,
            other => return Err(format!(
                "unknown transform `{other}` (expected identity, rotate90, rotate180, rotate270, \
                     rotate-random, reflect-h, reflect-v or reflect-random)"
            )),
        })
    }
}

impl DomainTransform {
    pub fn is_random(self) -> bool {
        matches!(
            self,
            DomainTransform::RandomRotation | DomainTransform::RandomReflection
        )
    }

    /// Draws a concrete transform for the random kinds; others are returned as is.
    /// Random rotations draw from the three non-trivial quarter turns.
    pub fn resolve<R: Rng + ?Sized>(self, rng: &mut R) -> Self {
        match self {
            DomainTransform::RandomRotation => DomainTransform::Rotate(rng.random_range(1..=3)),
            DomainTransform::RandomReflection => {
                if rng.random_bool(0.5) {
                    DomainTransform::ReflectHorizontal
                } else {
                    DomainTransform::ReflectVertical
                }
            }
            other => other,
        }
    }

    /// Applies a concrete transform to a grid by index permutation.
    pub fn apply_to_grid(self, grid: &Grid) -> Result<Grid> {
        let k = grid.size();
        let mut cells = vec![0u8; k * k];
        match self {
            DomainTransform::Identity => return Ok(grid.clone()),
            DomainTransform::Rotate(q) => {
                if !(1..=3).contains(&q) {
                    return Err(contract(format!(
                        "rotation must be 1 to 3 quarter turns, got {q}"
                    )));
                }
                let mut current = grid.clone();
                for _ in 0..q {
                    // (r, c) -> (c, k - 1 - r)
                    for r in 0..k {
                        for c in 0..k {
                            cells[c * k + (k - 1 - r)] = current.get(r, c);
                        }
                    }
                    current = Grid::new(k, cells.clone())?;
                }
                return Ok(current);
            }
            DomainTransform::ReflectHorizontal => {
                for r in 0..k {
                    for c in 0..k {
                        cells[r * k + (k - 1 - c)] = grid.get(r, c);
                    }
                }
            }
            DomainTransform::ReflectVertical => {
                for r in 0..k {
                    for c in 0..k {
                        cells[(k - 1 - r) * k + c] = grid.get(r, c);
                    }
                }
            }
            DomainTransform::RandomRotation | DomainTransform::RandomReflection => {
                return Err(contract(
                    "random transforms must be resolved before application",
                ));
            }
        }
        Grid::new(k, cells)
    }
}

/// Transforms the observation of `context`; the question is untouched.
pub fn apply_transform<R: Rng + ?Sized>(
    t: DomainTransform,
    context: &Context,
    rng: &mut R,
) -> Result<Context> {
    Ok(Context {
        observation: t.resolve(rng).apply_to_grid(&context.observation)?,
        question: context.question.clone(),
    })
}

/// Domain-support distributions for one group.
#[derive(Clone, Debug)]
pub struct DomainSupportDistributions {
    /// The concrete transform that was applied.
    pub transform: DomainTransform,
    pub context: Context,
    pub dists: Vec<CategoricalSequenceDistribution>,
}

/// Teacher-forces every output through the transformed context. One
/// transform is drawn for the whole group.
pub fn domain_support<R: Rng + ?Sized>(
    params: &PolicyParameters,
    t: DomainTransform,
    context: &Context,
    outputs: &[Vec<usize>],
    rng: &mut R,
) -> Result<DomainSupportDistributions> {
    let transform = t.resolve(rng);
    let transformed = Context {
        observation: transform.apply_to_grid(&context.observation)?,
        question: context.question.clone(),
    };
    let dists = outputs
        .iter()
        .map(|o| teacher_forced_distributions(params, &transformed, o))
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainSupportDistributions {
        transform,
        context: transformed,
        dists,
    })
}

fn check_matched(
    live: &[CategoricalSequenceDistribution],
    support: &[CategoricalSequenceDistribution],
) -> Result<()> {
    if live.len() != support.len() {
        return Err(contract(format!(
            "{} live distributions vs {} support distributions",
            live.len(),
            support.len()
        )));
    }
    if live.is_empty() {
        return Err(contract("no samples"));
    }
    Ok(())
}

/// Mean over samples of `D(support_i ‖ live_i)`.
pub fn domain_loss(
    live: &[CategoricalSequenceDistribution],
    support: &[CategoricalSequenceDistribution],
    kind: DivergenceKind,
) -> Result<f64> {
    check_matched(live, support)?;
    let mut total = 0.0;
    for (l, s) in live.iter().zip(support) {
        total += sequence_divergence(kind, s, l)?;
    }
    Ok(total / live.len() as f64)
}

/// Per-sample `D_i = D(support_i ‖ live_i)`, clamped to `[0, 1]`.
pub fn domain_divergences(
    live: &[CategoricalSequenceDistribution],
    support: &[CategoricalSequenceDistribution],
    kind: DivergenceKind,
) -> Result<Vec<f64>> {
    check_matched(live, support)?;
    live.iter()
        .zip(support)
        .map(|(l, s)| sequence_divergence(kind, s, l).map(|d| d.clamp(0.0, 1.0)))
        .collect()
}

/// `A_i^d = (1 - D_i) · A_i`.
pub fn reweight_advantages(advantages: &[f64], divergences: &[f64]) -> Result<Vec<f64>> {
    if advantages.len() != divergences.len() {
        return Err(contract(format!(
            "{} advantages vs {} divergences",
            advantages.len(),
            divergences.len()
        )));
    }
    if let Some(d) = divergences.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(contract(format!("divergence {d} outside [0, 1]")));
    }
    Ok(advantages
        .iter()
        .zip(divergences)
        .map(|(a, d)| (1.0 - d) * a)
        .collect())
}

/// Switches for the domain-aware terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSettings {
    /// Domain-constraint loss.
    pub dc: bool,
    /// Divergence-weighted advantage shaping.
    pub dr: bool,
    pub dc_kind: DivergenceKind,
    pub dr_kind: DivergenceKind,
    /// Multiplier on the domain loss; 1.0 is the unweighted objective.
    pub domain_weight: f64,
    /// Treat the transformed branch of the domain loss as constant.
    pub stop_grad_support: bool,
}

impl Default for DomainSettings {
    fn default() -> Self {
        Self {
            dc: true,
            dr: true,
            dc_kind: DivergenceKind::Kl,
            dr_kind: DivergenceKind::Js,
            domain_weight: 1.0,
            stop_grad_support: false,
        }
    }
}

/// Domain-aware objective of one group plus the per-sample signals behind it.
pub struct DomainObjective {
    pub objective: GroupObjective,
    /// Unweighted domain loss (0 when DC is off).
    pub domain_loss: f64,
    /// `D_i` per sample (zeros when neither DC nor DR is on).
    pub divergences: Vec<f64>,
    /// Advantages fed to the policy term.
    pub shaped_advantages: Vec<f64>,
}

/// Combined objective: `policy(A^d or A) - β·KL_ref - w·L_dom`.
///
/// `transformed` is the group context after the domain transform. When it
/// equals the original context, the support branch is the live branch
/// itself; the domain loss and every `D_i` are then identically zero and
/// the result coincides with plain GRPO.
pub fn domain_aware_objective(
    live: &BoundPolicy<'_>,
    live_params: &PolicyParameters,
    old: &PolicyParameters,
    reference: &PolicyParameters,
    group: &SampleGroup,
    transformed: &Context,
    settings: &ObjectiveSettings,
    domain: &DomainSettings,
) -> Result<DomainObjective> {
    let g = live.graph();
    let n = group.len();
    let active = domain.dc || domain.dr;
    let identical = transformed.observation == group.context.observation
        && transformed.question == group.context.question;

    let divergences = if active && !identical {
        let live_vals = group
            .outputs
            .iter()
            .map(|o| teacher_forced_distributions(live_params, &group.context, o))
            .collect::<Result<Vec<_>>>()?;
        let support_vals = group
            .outputs
            .iter()
            .map(|o| teacher_forced_distributions(live_params, transformed, o))
            .collect::<Result<Vec<_>>>()?;
        domain_divergences(&live_vals, &support_vals, domain.dr_kind)?
    } else {
        vec![0.0; n]
    };

    let shaped_advantages = if domain.dr {
        reweight_advantages(&group.advantages, &divergences)?
    } else {
        group.advantages.clone()
    };

    let mut objective = grpo_objective(live, old, reference, group, &shaped_advantages, settings)?;

    let mut domain_loss = 0.0;
    if domain.dc && !identical {
        let support: Vec<Var> = if domain.stop_grad_support {
            group
                .outputs
                .iter()
                .map(|o| {
                    teacher_forced_distributions(live_params, transformed, o)
                        .map(|d| g.constant(d.as_array().clone()))
                })
                .collect::<Result<_>>()?
        } else {
            let hidden = live.encode(transformed)?;
            group
                .outputs
                .iter()
                .map(|o| live.sequence_distributions(hidden, o))
                .collect::<Result<_>>()?
        };
        let mut acc: Option<Var> = None;
        for (s, l) in support.iter().zip(&objective.live_dists) {
            let d = sequence_divergence_graph(g, domain.dc_kind, *s, *l)?;
            acc = Some(match acc {
                Some(a) => g.add(a, d)?,
                None => d,
            });
        }
        let l_dom = g.scale(acc.expect("non-empty group"), 1.0 / n as f64)?;
        domain_loss = g.scalar(l_dom);
        let weighted = g.scale(l_dom, domain.domain_weight)?;
        objective.total = g.sub(objective.total, weighted)?;
        objective.breakdown.domain_loss_term = g.scalar(weighted);
        objective.breakdown.total = g.scalar(objective.total);
    }

    Ok(DomainObjective {
        objective,
        domain_loss,
        divergences,
        shaped_advantages,
    })
}

/// Bonus 1.0 per output whose answer label agrees with the greedy answer
/// under the transformed context, 0.0 otherwise (including malformed
/// outputs and a malformed greedy answer).
pub fn output_consistency_reward<R: Rng + ?Sized>(
    params: &PolicyParameters,
    t: DomainTransform,
    context: &Context,
    outputs: &[Vec<usize>],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let transformed = apply_transform(t, context, rng)?;
    let vocab = params.vocab();
    let greedy = vocab.parse_answer(&params.greedy_decode(&transformed)?);
    Ok(outputs
        .iter()
        .map(|o| match (greedy, vocab.parse_answer(o)) {
            (Some(a), Some(b)) if a == b => 1.0,
            _ => 0.0,
        })
        .collect())
}

/// Convenience for tests and diagnostics: exact value form of `L_dom` and
/// `D_i` for a group under a concrete transform.
pub fn domain_terms(
    params: &PolicyParameters,
    context: &Context,
    transformed: &Context,
    outputs: &[Vec<usize>],
    dc_kind: DivergenceKind,
    dr_kind: DivergenceKind,
) -> Result<(f64, Vec<f64>)> {
    let live = outputs
        .iter()
        .map(|o| teacher_forced_distributions(params, context, o))
        .collect::<Result<Vec<_>>>()?;
    let support = outputs
        .iter()
        .map(|o| teacher_forced_distributions(params, transformed, o))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        domain_loss(&live, &support, dc_kind)?,
        domain_divergences(&live, &support, dr_kind)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: &[&[u8]]) -> Grid {
        Grid::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rotate_quarter_turn_matches_index_oracle() {
        let g = grid(&[&[1, 2], &[3, 4]]);
        assert_eq!(
            DomainTransform::Rotate(1).apply_to_grid(&g).unwrap(),
            grid(&[&[3, 1], &[4, 2]])
        );
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let g = grid(&[&[1, 2, 3], &[4, 5, 6], &[7, 8, 9]]);
        let mut cur = g.clone();
        for _ in 0..4 {
            cur = DomainTransform::Rotate(1).apply_to_grid(&cur).unwrap();
        }
        assert_eq!(cur, g);
        let r3 = DomainTransform::Rotate(3).apply_to_grid(&g).unwrap();
        let r1 = DomainTransform::Rotate(1).apply_to_grid(&r3).unwrap();
        assert_eq!(r1, g);
    }

    #[test]
    fn reflections() {
        let g = grid(&[&[1, 2], &[3, 4]]);
        assert_eq!(
            DomainTransform::ReflectHorizontal
                .apply_to_grid(&g)
                .unwrap(),
            grid(&[&[2, 1], &[4, 3]])
        );
        assert_eq!(
            DomainTransform::ReflectVertical.apply_to_grid(&g).unwrap(),
            grid(&[&[3, 4], &[1, 2]])
        );
    }

    #[test]
    fn identity_and_question_are_preserved() {
        let ctx = Context {
            observation: grid(&[&[1, 0], &[0, 0]]),
            question: vec![5, 6],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            apply_transform(DomainTransform::Identity, &ctx, &mut rng).unwrap(),
            ctx
        );
        let rotated = apply_transform(DomainTransform::RandomRotation, &ctx, &mut rng).unwrap();
        assert_eq!(rotated.question, ctx.question);
        assert_ne!(rotated.observation, ctx.observation);
    }

    #[test]
    fn non_square_rows_are_rejected() {
        assert!(Grid::from_rows(&[vec![1, 2, 3], vec![4, 5, 6]]).is_err());
    }

    #[test]
    fn reweight_examples() {
        assert_eq!(
            reweight_advantages(&[1.0, -1.0], &[0.25, 0.5]).unwrap(),
            vec![0.75, -0.5]
        );
        assert_eq!(
            reweight_advantages(&[1.5, -2.0], &[0.0, 0.0]).unwrap(),
            vec![1.5, -2.0]
        );
        let z = reweight_advantages(&[1.5, -2.0], &[1.0, 1.0]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(reweight_advantages(&[1.0], &[1.2]).is_err());
        assert!(reweight_advantages(&[1.0], &[-0.1]).is_err());
        assert!(reweight_advantages(&[1.0, 2.0], &[0.1]).is_err());
    }

    #[test]
    fn transform_names_round_trip() {
        for t in [
            DomainTransform::Identity,
            DomainTransform::Rotate(1),
            DomainTransform::Rotate(2),
            DomainTransform::Rotate(3),
            DomainTransform::RandomRotation,
            DomainTransform::ReflectHorizontal,
            DomainTransform::ReflectVertical,
            DomainTransform::RandomReflection,
        ] {
            assert_eq!(t.to_string().parse::<DomainTransform>().unwrap(), t);
        }
    }
}
