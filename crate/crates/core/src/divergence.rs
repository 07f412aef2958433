//! Exact categorical divergences.
//!
//! KL is measured in nats. JS is measured in bits and bounded by 1.
//! Inputs are softmax outputs and therefore strictly positive; zero entries
//! are rejected instead of being given a `0 · log 0` convention.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ad::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::policy::CategoricalSequenceDistribution;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Js,
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Js => "js",
        })
    }
}

impl FromStr for DivergenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(DivergenceKind::Kl),
            "js" => Ok(DivergenceKind::Js),
            other => Err(format!("unknown divergence `{other}` (expected kl or js)")),
        }
    }
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(contract(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(contract("empty distribution"));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if let Some(bad) = d.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(contract(format!("{name} has non-positive entry {bad}")));
        }
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(contract(format!("{name} sums to {total}, not 1")));
        }
    }
    Ok(())
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum()
}

/// KL(p ‖ q) in nats.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q))
}

/// Jensen-Shannon divergence in bits, clamped to `[0, 1]` against rounding.
pub fn js(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let value = (0.5 * kl_unchecked(p, &m) + 0.5 * kl_unchecked(q, &m)) / LN_2;
    Ok(value.clamp(0.0, 1.0))
}

pub fn divergence(kind: DivergenceKind, p: &[f64], q: &[f64]) -> Result<f64> {
    match kind {
        DivergenceKind::Kl => kl(p, q),
        DivergenceKind::Js => js(p, q),
    }
}

/// Mean over positions of the per-position divergence `D(a_t, b_t)`.
pub fn sequence_divergence(
    kind: DivergenceKind,
    a: &CategoricalSequenceDistribution,
    b: &CategoricalSequenceDistribution,
) -> Result<f64> {
    if a.len() != b.len() || a.vocab_size() != b.vocab_size() {
        return Err(contract(format!(
            "sequence shapes differ: {}x{} vs {}x{}",
            a.len(),
            a.vocab_size(),
            b.len(),
            b.vocab_size()
        )));
    }
    if a.is_empty() {
        return Err(contract("empty sequence distribution"));
    }
    let mut total = 0.0;
    for t in 0..a.len() {
        total += divergence(kind, a.row(t), b.row(t))?;
    }
    Ok(total / a.len() as f64)
}

/// Differentiable [`sequence_divergence`] over `[T, V]` probability nodes.
///
/// Gradient flows into both arguments.
pub fn sequence_divergence_graph(g: &Graph, kind: DivergenceKind, a: Var, b: Var) -> Result<Var> {
    let shape_a = g.value(a).shape().to_vec();
    let shape_b = g.value(b).shape().to_vec();
    if shape_a != shape_b || shape_a.len() != 2 {
        return Err(Error::Shape {
            op: "sequence_divergence",
            detail: format!("{shape_a:?} vs {shape_b:?}"),
        });
    }
    let positions = shape_a[0] as f64;
    let log_a = g.log(a)?;
    let log_b = g.log(b)?;
    let summed = match kind {
        DivergenceKind::Kl => {
            let diff = g.sub(log_a, log_b)?;
            g.sum(g.mul(a, diff)?)?
        }
        DivergenceKind::Js => {
            let mix = g.scale(g.add(a, b)?, 0.5)?;
            let log_m = g.log(mix)?;
            let left = g.sum(g.mul(a, g.sub(log_a, log_m)?)?)?;
            let right = g.sum(g.mul(b, g.sub(log_b, log_m)?)?)?;
            g.scale(g.add(left, right)?, 0.5 / LN_2)?
        }
    };
    g.scale(summed, 1.0 / positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Array;

    #[test]
    fn kl_of_identical_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_value() {
        // 0.5 ln 2 + 0.5 ln(2/3)
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let v = kl(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn js_is_symmetric_and_zero_on_identical() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        assert_eq!(js(&p, &q).unwrap(), js(&q, &p).unwrap());
        assert_eq!(js(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn js_near_disjoint_approaches_one() {
        let eps = 1e-12;
        let v = js(&[1.0 - eps, eps], &[eps, 1.0 - eps]).unwrap();
        assert!(v > 0.999999 && v <= 1.0, "{v}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(kl(&[0.5, 0.5], &[1.0]).is_err());
        assert!(kl(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js(&[1.0, 0.0], &[0.5, 0.5]).is_err());
    }

    fn seq(rows: &[&[f64]]) -> CategoricalSequenceDistribution {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        CategoricalSequenceDistribution::new(Array::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn sequence_mean_of_rows() {
        let a = seq(&[&[0.5, 0.5], &[0.9, 0.1]]);
        let b = seq(&[&[0.25, 0.75], &[0.4, 0.6]]);
        let d1 = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let d2 = 0.9 * (0.9f64 / 0.4).ln() + 0.1 * (0.1f64 / 0.6).ln();
        let v = sequence_divergence(DivergenceKind::Kl, &a, &b).unwrap();
        assert!((v - (d1 + d2) / 2.0).abs() < 1e-15);

        let single_a = seq(&[&[0.5, 0.5]]);
        let single_b = seq(&[&[0.25, 0.75]]);
        assert_eq!(
            sequence_divergence(DivergenceKind::Js, &single_a, &single_b).unwrap(),
            js(&[0.5, 0.5], &[0.25, 0.75]).unwrap()
        );
        assert_eq!(
            sequence_divergence(DivergenceKind::Kl, &a, &a).unwrap(),
            0.0
        );
        assert!(sequence_divergence(DivergenceKind::Kl, &a, &single_b).is_err());
    }

    #[test]
    fn graph_form_matches_values() {
        let a = seq(&[&[0.5, 0.5], &[0.9, 0.1]]);
        let b = seq(&[&[0.25, 0.75], &[0.4, 0.6]]);
        for kind in [DivergenceKind::Kl, DivergenceKind::Js] {
            let g = Graph::new();
            let va = g.constant(a.as_array().clone());
            let vb = g.constant(b.as_array().clone());
            let d = sequence_divergence_graph(&g, kind, va, vb).unwrap();
            let expected = sequence_divergence(kind, &a, &b).unwrap();
            assert!((g.scalar(d) - expected).abs() < 1e-14, "{kind}");
        }
    }
}
