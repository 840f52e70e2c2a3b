//! Candidate trajectories sampled from per-timestep location beliefs.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::GridSpec;
use crate::nn::BeliefVector;

/// Null mass at or above this makes a timestep unusable.
pub const ALL_NULL_MASS: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypothesisConfig {
    /// Draws per timestep.
    pub f: usize,
    /// Timesteps per trajectory window.
    pub n: usize,
    pub max_hypotheses: usize,
    pub seed: u64,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self { f: 4, n: 3, max_hypotheses: 256, seed: 0 }
    }
}

impl HypothesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f == 0 {
            return Err(Error::config("hypothesis.f", "must be at least 1"));
        }
        if self.n < 3 {
            return Err(Error::config("hypothesis.n", "must be at least 3"));
        }
        if self.max_hypotheses == 0 {
            return Err(Error::config("hypothesis.max_hypotheses", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationUpdate {
    pub t_index: usize,
    pub t_ms: i64,
    pub x: f64,
    pub y: f64,
    /// Confidence in `[0, 1)`.
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHypothesis {
    pub id: usize,
    pub updates: Vec<LocationUpdate>,
    /// Mean of the confidences before interpolation.
    pub mean_confidence: f64,
    /// Class visited at each original timestep.
    pub classes: Vec<usize>,
}

/// Per timestep, the distinct non-null classes drawn `f` times from the belief.
/// Sets are sorted ascending.
pub fn sample_candidates(beliefs: &[BeliefVector], null_class: usize, cfg: &HypothesisConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    beliefs
        .iter()
        .enumerate()
        .map(|(t, b)| {
            if b.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidInput(format!("belief at timestep {t} is not a distribution")));
            }
            if b.probs.get(null_class).is_some_and(|&p| p >= ALL_NULL_MASS) {
                return Err(Error::AllNullBelief { t });
            }
            let dist = WeightedIndex::new(&b.probs)
                .map_err(|e| Error::InvalidInput(format!("belief at timestep {t}: {e}")))?;
            let drawn: BTreeSet<usize> = (0..cfg.f).map(|_| dist.sample(&mut rng)).filter(|&k| k != null_class).collect();
            Ok(drawn.into_iter().collect())
        })
        .collect()
}

/// Cross-product of the candidate sets, uniformly subsampled to at most
/// `max_hypotheses` distinct combinations. `times_ms[t]` stamps timestep `t`.
pub fn enumerate_hypotheses(
    candidates: &[Vec<usize>],
    beliefs: &[BeliefVector],
    times_ms: &[i64],
    grid: &GridSpec,
    cfg: &HypothesisConfig,
) -> Result<Vec<TrajectoryHypothesis>> {
    cfg.validate()?;
    if candidates.len() != beliefs.len() || candidates.len() != times_ms.len() {
        return Err(Error::LengthMismatch { expected: candidates.len(), actual: beliefs.len().min(times_ms.len()) });
    }
    if let Some(t) = candidates.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCandidates { t });
    }
    let radices: Vec<u128> = candidates.iter().map(|s| s.len() as u128).collect();
    let total = radices.iter().try_fold(1u128, |acc, &r| acc.checked_mul(r)).unwrap_or(u128::MAX);
    log::debug!(
        "{} timesteps, f = {}: cross-product {} (n*f would be {}), cap {}",
        candidates.len(),
        cfg.f,
        total,
        candidates.len() * cfg.f,
        cfg.max_hypotheses
    );

    let picks: Vec<u128> = if total <= cfg.max_hypotheses as u128 {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut chosen = BTreeSet::new();
        while chosen.len() < cfg.max_hypotheses {
            chosen.insert(rng.random_range(0..total));
        }
        chosen.into_iter().collect()
    };

    picks
        .into_iter()
        .enumerate()
        .map(|(id, code)| {
            // mixed radix, last timestep fastest
            let mut rest = code;
            let mut digits = vec![0usize; radices.len()];
            for (d, &r) in digits.iter_mut().zip(&radices).rev() {
                *d = (rest % r) as usize;
                rest /= r;
            }
            let classes: Vec<usize> = digits.iter().zip(candidates).map(|(&d, set)| set[d]).collect();
            let updates = classes
                .iter()
                .enumerate()
                .map(|(t, &k)| {
                    let cell = grid
                        .cell_of_class(k)
                        .ok_or_else(|| Error::InvalidInput(format!("class {k} is not a grid cell")))?;
                    let (x, y) = grid.cell_center(cell);
                    Ok(LocationUpdate { t_index: t, t_ms: times_ms[t], x, y, c: beliefs[t].probs[k] })
                })
                .collect::<Result<Vec<_>>>()?;
            let mean_confidence = updates.iter().map(|u| u.c).sum::<f64>() / updates.len() as f64;
            Ok(TrajectoryHypothesis { id, updates, mean_confidence, classes })
        })
        .collect()
}

/// Inserts the midpoint between each consecutive pair: `n` updates become `2n - 1`.
pub fn upsample(h: &TrajectoryHypothesis) -> Result<TrajectoryHypothesis> {
    if h.updates.len() < 2 {
        return Err(Error::InvalidInput("cannot interpolate a single-point trajectory".into()));
    }
    let mut updates = Vec::with_capacity(2 * h.updates.len() - 1);
    for pair in h.updates.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        updates.push(a);
        updates.push(LocationUpdate {
            t_index: 0,
            t_ms: a.t_ms + (b.t_ms - a.t_ms) / 2,
            x: 0.5 * (a.x + b.x),
            y: 0.5 * (a.y + b.y),
            c: 0.5 * (a.c + b.c),
        });
    }
    updates.push(*h.updates.last().unwrap());
    for (i, u) in updates.iter_mut().enumerate() {
        u.t_index = i;
    }
    Ok(TrajectoryHypothesis { updates, ..h.clone() })
}

/// Sample, enumerate and up-sample in one go.
pub fn generate(
    beliefs: &[BeliefVector],
    times_ms: &[i64],
    grid: &GridSpec,
    cfg: &HypothesisConfig,
) -> Result<Vec<TrajectoryHypothesis>> {
    let candidates = sample_candidates(beliefs, grid.null_class(), cfg)?;
    enumerate_hypotheses(&candidates, beliefs, times_ms, grid, cfg)?.iter().map(upsample).collect()
}
