//! Grid search for key-token thresholds on a small validation set.
//!
//! Each grid point is scored exactly: mean expected round length (higher is
//! faster) and mean total variation between adaptive and strict output
//! distributions (lower is more faithful). The winner maximizes round length
//! subject to the divergence budget.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enumerate::{enumerate_output_distribution, expected_round_length, sequence_tv};
use crate::error::{invalid_param, DsdError, Result};
use crate::token_model::{Context, TokenModel};
use crate::verifier::{KeyCriteria, VerifyParams, DEFAULT_TOP_M};

pub const DEFAULT_BUDGET: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationItem {
    #[serde(default)]
    pub prompt: Context,
    pub draft: TokenModel,
    pub target: TokenModel,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidationSet {
    pub items: Vec<ValidationItem>,
}

/// Candidate thresholds; every combination is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdGrid {
    #[serde(with = "extended_vec")]
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda3: Vec<f64>,
    #[serde(default = "default_top_m")]
    pub top_m: usize,
}

fn default_top_m() -> usize {
    DEFAULT_TOP_M
}

mod extended_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(transparent)]
    struct Ext(#[serde(with = "crate::verifier::extended_f64")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| Ext(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Ext>::deserialize(d)?
            .into_iter()
            .map(|e| e.0)
            .collect())
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            lambda1: vec![1.2, 1.5, 2.0, 3.0],
            lambda2: vec![0.05, 0.1, 0.2, 0.4],
            lambda3: vec![0.1, 0.3, 0.5, 0.8],
            top_m: DEFAULT_TOP_M,
        }
    }
}

impl ThresholdGrid {
    /// All points, in lexicographic `(lambda1, lambda2, lambda3)` order.
    pub fn points(&self) -> Vec<KeyCriteria> {
        let mut l1 = self.lambda1.clone();
        let mut l2 = self.lambda2.clone();
        let mut l3 = self.lambda3.clone();
        for v in [&mut l1, &mut l2, &mut l3] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        let mut out = Vec::with_capacity(l1.len() * l2.len() * l3.len());
        for &a in &l1 {
            for &b in &l2 {
                for &c in &l3 {
                    out.push(KeyCriteria {
                        lambda1: a,
                        lambda2: b,
                        lambda3: c,
                        top_m: self.top_m,
                    });
                }
            }
        }
        out
    }

    /// The point marking the most tokens key: smallest ratio and gap
    /// thresholds, largest overlap threshold.
    pub fn strictest(&self) -> Option<KeyCriteria> {
        let min = |v: &[f64]| v.iter().copied().min_by(f64::total_cmp);
        let max = |v: &[f64]| v.iter().copied().max_by(f64::total_cmp);
        Some(KeyCriteria {
            lambda1: min(&self.lambda1)?,
            lambda2: min(&self.lambda2)?,
            lambda3: max(&self.lambda3)?,
            top_m: self.top_m,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1.is_empty() || self.lambda2.is_empty() || self.lambda3.is_empty() {
            return Err(invalid_param(
                "grid",
                "every threshold list must be nonempty",
            ));
        }
        for c in self.points() {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub criteria: KeyCriteria,
    pub avg_accepted_length: f64,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub criteria: KeyCriteria,
    pub avg_accepted_length: f64,
    pub divergence: f64,
    pub grid_log: Vec<GridPoint>,
}

/// Scores one set of criteria over the validation set.
pub fn evaluate_point(
    v: &ValidationSet,
    gamma: usize,
    tau: f64,
    criteria: &KeyCriteria,
) -> Result<GridPoint> {
    let adaptive = VerifyParams {
        gamma,
        tau,
        criteria: *criteria,
    };
    let strict = VerifyParams {
        tau: 0.0,
        ..adaptive
    };
    let mut len = 0.0;
    let mut div = 0.0;
    for item in &v.items {
        len += expected_round_length(&item.draft, &item.target, &item.prompt, &adaptive)?;
        let a = enumerate_output_distribution(
            &item.draft,
            &item.target,
            &item.prompt,
            item.horizon,
            &adaptive,
        )?;
        let s = enumerate_output_distribution(
            &item.draft,
            &item.target,
            &item.prompt,
            item.horizon,
            &strict,
        )?;
        div += sequence_tv(&a, &s);
    }
    let n = v.items.len() as f64;
    Ok(GridPoint {
        criteria: *criteria,
        avg_accepted_length: len / n,
        divergence: div / n,
    })
}

fn lex_cmp(a: &KeyCriteria, b: &KeyCriteria) -> Ordering {
    a.lambda1
        .total_cmp(&b.lambda1)
        .then(a.lambda2.total_cmp(&b.lambda2))
        .then(a.lambda3.total_cmp(&b.lambda3))
}

/// Longest accepted length within `budget`; ties to smaller divergence, then
/// lexicographically smaller thresholds.
pub fn calibrate_thresholds(
    v: &ValidationSet,
    gamma: usize,
    tau: f64,
    budget: f64,
    grid: &ThresholdGrid,
) -> Result<CalibrationResult> {
    if !(budget > 0.0 && budget < 1.0) {
        return Err(invalid_param("budget", format!("{budget} not in (0, 1)")));
    }
    if v.items.is_empty() {
        return Err(invalid_param("validation", "at least one item is required"));
    }
    grid.validate()?;
    VerifyParams::strict(gamma).validate()?;

    let grid_log = grid
        .points()
        .par_iter()
        .map(|c| evaluate_point(v, gamma, tau, c))
        .collect::<Result<Vec<_>>>()?;

    let best = grid_log
        .iter()
        .filter(|p| p.divergence <= budget)
        .max_by(|a, b| {
            a.avg_accepted_length
                .total_cmp(&b.avg_accepted_length)
                .then(b.divergence.total_cmp(&a.divergence))
                .then(lex_cmp(&b.criteria, &a.criteria))
        })
        .copied();

    match best {
        Some(p) => Ok(CalibrationResult {
            criteria: p.criteria,
            avg_accepted_length: p.avg_accepted_length,
            divergence: p.divergence,
            grid_log,
        }),
        None => {
            let strictest = grid.strictest().expect("grid validated nonempty");
            let s = evaluate_point(v, gamma, tau, &strictest)?;
            Err(DsdError::InfeasibleBudget {
                budget,
                strictest,
                strictest_divergence: s.divergence,
                strictest_accepted_length: s.avg_accepted_length,
            })
        }
    }
}
