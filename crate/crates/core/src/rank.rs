//! Weighted quality/energy ranking and top-k selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meter::EnergyReport;
use crate::metrics::MetricScores;
use crate::tensors::Lineage;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("weight w must lie in [0, 1], got {0}")]
    Weight(f64),
    #[error("k must be at least 1")]
    K,
    #[error("{name} must lie in [0, 1], got {value}")]
    Range { name: &'static str, value: f64 },
    #[error("baseline energy must be positive, got {0} J")]
    Baseline(f64),
    #[error("no candidates to rank")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingWeights {
    pub w: f64,
    pub k: usize,
}

impl Default for RankingWeights {
    fn default() -> Self {
        Self { w: 0.7, k: 2 }
    }
}

impl RankingWeights {
    pub fn new(w: f64, k: usize) -> Result<Self, RankError> {
        let weights = Self { w, k };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<(), RankError> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(RankError::Weight(self.w));
        }
        if self.k == 0 {
            return Err(RankError::K);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    pub lineage: Lineage,
    pub scores: MetricScores,
    /// Energy of the evaluation span.
    pub energy: EnergyReport,
    pub rho: f64,
    pub phi: f64,
    #[serde(rename = "R")]
    pub r: f64,
}

/// Mean of the six quality metrics.
pub fn performance_score(scores: &MetricScores) -> f64 {
    scores.quality().iter().sum::<f64>() / 6.0
}

/// `clamp(1 - E / E_base, 0, 1)` on total joules.
pub fn efficiency_score(candidate: &EnergyReport, base: &EnergyReport) -> Result<f64, RankError> {
    let e_base = base.total_joules;
    if !(e_base > 0.0 && e_base.is_finite()) {
        return Err(RankError::Baseline(e_base));
    }
    Ok((1.0 - candidate.total_joules / e_base).clamp(0.0, 1.0))
}

fn check_unit(name: &'static str, value: f64) -> Result<(), RankError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(RankError::Range { name, value })
    }
}

/// `R = w * phi + (1 - w) * rho`
pub fn rank_score(phi: f64, rho: f64, w: f64) -> Result<f64, RankError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(RankError::Weight(w));
    }
    check_unit("phi", phi)?;
    check_unit("rho", rho)?;
    Ok(w * phi + (1.0 - w) * rho)
}

/// Descending R, then lower total joules, then id.
pub fn rank_order(a: &CandidateRecord, b: &CandidateRecord) -> Ordering {
    b.r.total_cmp(&a.r)
        .then_with(|| a.energy.total_joules.total_cmp(&b.energy.total_joules))
        .then_with(|| a.id.cmp(&b.id))
}

pub fn sort_ranked(records: &mut [CandidateRecord]) {
    records.sort_by(rank_order);
}

/// The best `min(k, n)` records in rank order.
pub fn select_top_k(records: &[CandidateRecord], weights: &RankingWeights) -> Result<Vec<CandidateRecord>, RankError> {
    weights.validate()?;
    if records.is_empty() {
        return Err(RankError::Empty);
    }
    let mut sorted = records.to_vec();
    sort_ranked(&mut sorted);
    sorted.truncate(weights.k);
    Ok(sorted)
}
