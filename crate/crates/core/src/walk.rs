//! Dual-foot particle filter that tracks trajectory hypotheses, rejects the
//! ones no walking person could produce, and picks the most likely survivor.

use std::f64::consts::{PI, TAU};

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{Cell, GridSpec};
use crate::hypothesis::{LocationUpdate, TrajectoryHypothesis};

/// Filter tick in milliseconds (5 Hz).
pub const TICK_MS: i64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitBounds {
    pub stride_min: f64,
    pub stride_max: f64,
    pub period_min: f64,
    pub period_max: f64,
}

impl Default for GaitBounds {
    fn default() -> Self {
        Self { stride_min: 0.3, stride_max: 1.2, period_min: 0.35, period_max: 1.5 }
    }
}

impl GaitBounds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.stride_min && self.stride_min <= self.stride_max) {
            return Err(Error::config("gait.stride", "need 0 < stride_min <= stride_max"));
        }
        if !(0.0 < self.period_min && self.period_min <= self.period_max) {
            return Err(Error::config("gait.period", "need 0 < period_min <= period_max"));
        }
        Ok(())
    }

    pub fn clamp_stride(&self, s: f64) -> f64 {
        s.clamp(self.stride_min, self.stride_max)
    }

    pub fn clamp_period(&self, t: f64) -> f64 {
        t.clamp(self.period_min, self.period_max)
    }
}

/// Both feet, heading, walk phase, stride and gait-cycle period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub l_x: f64,
    pub l_y: f64,
    pub r_x: f64,
    pub r_y: f64,
    pub theta: f64,
    pub gamma: f64,
    pub stride: f64,
    pub step_period: f64,
}

impl PedestrianState {
    /// Feet straddling `(x, y)` along the heading in the configuration the
    /// reference pattern expects for phase `gamma`.
    pub fn centered(x: f64, y: f64, theta: f64, gamma: f64, stride: f64, step_period: f64) -> Self {
        let half = -0.5 * stride * gamma.cos();
        let (s, c) = theta.sin_cos();
        Self {
            l_x: x - half * c,
            l_y: y - half * s,
            r_x: x + half * c,
            r_y: y + half * s,
            theta,
            gamma,
            stride,
            step_period,
        }
    }

    pub fn midpoint(&self) -> (f64, f64) {
        (0.5 * (self.l_x + self.r_x), 0.5 * (self.l_y + self.r_y))
    }

    /// Right-minus-left offset projected on the heading.
    pub fn foot_offset(&self) -> f64 {
        (self.r_x - self.l_x) * self.theta.cos() + (self.r_y - self.l_y) * self.theta.sin()
    }

    /// Expected foot offset for the current phase.
    pub fn reference_offset(&self) -> f64 {
        -self.stride * self.gamma.cos()
    }

    #[cfg(test)]
    fn foot_separation(&self) -> f64 {
        (self.r_x - self.l_x).hypot(self.r_y - self.l_y)
    }

    /// Puts the swing foot of half-cycle `half` (0: right, 1: left) where
    /// phase `gamma` wants it relative to the stance foot.
    fn place_swing(&mut self, half: u8, gamma: f64) {
        let r0 = -self.stride * gamma.cos();
        let (s, c) = self.theta.sin_cos();
        if half == 0 {
            self.r_x = self.l_x + r0 * c;
            self.r_y = self.l_y + r0 * s;
        } else {
            self.l_x = self.r_x - r0 * c;
            self.l_y = self.r_y - r0 * s;
        }
    }

    /// Noise-free gait kinematics over `dt` seconds. The phase advances by
    /// `2 pi dt / T`; during `[0, pi)` the right foot swings, during
    /// `[pi, 2 pi)` the left one, and the stance foot never moves. Returns the
    /// number of footfalls (half-cycle boundaries crossed).
    pub fn advance(&mut self, dt: f64) -> usize {
        let mut g = self.gamma.rem_euclid(TAU);
        let end = g + TAU * dt / self.step_period;
        let mut footfalls = 0;
        loop {
            let half = (g / PI).floor();
            let boundary = (half + 1.0) * PI;
            let parity = (half as i64).rem_euclid(2) as u8;
            if end < boundary {
                self.place_swing(parity, end);
                break;
            }
            self.place_swing(parity, boundary);
            footfalls += 1;
            g = boundary;
        }
        self.gamma = end.rem_euclid(TAU);
        footfalls
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: PedestrianState,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Bandwidth of the walk-pattern kernel, metres.
    pub h: f64,
    pub resample_neff_frac: f64,
    /// A weight sum whose mean likelihood falls below this fraction of the
    /// attainable peak counts as collapsed and forces a resampling.
    pub collapse_ratio: f64,
    /// More forced resamplings than this within `reject_window` updates rejects.
    pub reject_resample_count: usize,
    pub reject_window: usize,
    pub weight_underflow_eps: f64,
    /// Confidences are clamped to this so that `1 - c` stays positive.
    pub max_confidence: f64,
    /// Per-tick process noise.
    pub sigma_theta: f64,
    pub sigma_stride: f64,
    pub sigma_period: f64,
    pub init_stride_mean: f64,
    pub init_stride_sd: f64,
    pub init_period_mean: f64,
    pub init_period_sd: f64,
    pub bounds: GaitBounds,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 500,
            h: 0.1,
            resample_neff_frac: 0.5,
            collapse_ratio: 1e-6,
            reject_resample_count: 3,
            reject_window: 5,
            weight_underflow_eps: 1e-30,
            max_confidence: 0.99,
            sigma_theta: 0.2,
            sigma_stride: 0.02,
            sigma_period: 0.02,
            init_stride_mean: 0.5,
            init_stride_sd: 0.1,
            init_period_mean: 1.0,
            init_period_sd: 0.1,
            bounds: GaitBounds::default(),
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.n_particles == 0 {
            return Err(Error::config("filter.n_particles", "must be positive"));
        }
        let positive = [
            ("filter.h", self.h),
            ("filter.resample_neff_frac", self.resample_neff_frac),
            ("filter.weight_underflow_eps", self.weight_underflow_eps),
            ("filter.collapse_ratio", self.collapse_ratio),
            ("filter.max_confidence", self.max_confidence),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.max_confidence >= 1.0 {
            return Err(Error::config("filter.max_confidence", "must be below 1"));
        }
        if self.reject_window == 0 {
            return Err(Error::config("filter.reject_window", "must be positive"));
        }
        let sigmas = [
            ("filter.sigma_theta", self.sigma_theta),
            ("filter.sigma_stride", self.sigma_stride),
            ("filter.sigma_period", self.sigma_period),
            ("filter.init_stride_sd", self.init_stride_sd),
            ("filter.init_period_sd", self.init_period_sd),
        ];
        for (field, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be >= 0"));
            }
        }
        Ok(())
    }

    fn sigma_of(&self, c: f64) -> f64 {
        1.0 - c.clamp(0.0, self.max_confidence)
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

/// Gaussian restricted to `[lo, hi]` by rejection, falling back to clamping.
pub(crate) fn truncated_gaussian(rng: &mut impl Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    for _ in 0..64 {
        let v = mean + gaussian(rng, sd);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
    mean.clamp(lo, hi)
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// `J` particles around the first update, weights `1/J`.
pub fn init_particles(z: &LocationUpdate, cfg: &FilterConfig, rng: &mut impl Rng) -> Vec<Particle> {
    let sd = cfg.sigma_of(z.c);
    let b = &cfg.bounds;
    let w = 1.0 / cfg.n_particles as f64;
    (0..cfg.n_particles)
        .map(|_| {
            let x = z.x + gaussian(rng, sd);
            let y = z.y + gaussian(rng, sd);
            let theta = wrap_angle(rng.random_range(0.0..TAU));
            let gamma = rng.random_range(0.0..TAU);
            let stride = truncated_gaussian(rng, cfg.init_stride_mean, cfg.init_stride_sd, b.stride_min, b.stride_max);
            let period = truncated_gaussian(rng, cfg.init_period_mean, cfg.init_period_sd, b.period_min, b.period_max);
            Particle { state: PedestrianState::centered(x, y, theta, gamma, stride, period), weight: w }
        })
        .collect()
}

/// Perturbs heading, stride and period, then moves the feet for `dt` seconds.
pub fn predict(particles: &mut [Particle], dt: f64, cfg: &FilterConfig, rng: &mut impl Rng) {
    let b = &cfg.bounds;
    for p in particles {
        let s = &mut p.state;
        s.theta = wrap_angle(s.theta + gaussian(rng, cfg.sigma_theta));
        s.stride = b.clamp_stride(s.stride + gaussian(rng, cfg.sigma_stride));
        s.step_period = b.clamp_period(s.step_period + gaussian(rng, cfg.sigma_period));
        s.advance(dt);
    }
}

/// Unnormalized measurement likelihood `p_L * p_R * p_B` of one state.
pub fn likelihood(state: &PedestrianState, z: &LocationUpdate, cfg: &FilterConfig) -> f64 {
    let s = cfg.sigma_of(z.c);
    let foot = |fx: f64, fy: f64| {
        let d2 = (fx - z.x).powi(2) + (fy - z.y).powi(2);
        (-d2 / (2.0 * s * s)).exp() / ((TAU).sqrt() * s)
    };
    let p_l = foot(state.l_x, state.l_y);
    let p_r = foot(state.r_x, state.r_y);
    let dev = state.foot_offset() - state.reference_offset();
    let p_b = (-dev * dev / (2.0 * cfg.h * cfg.h)).exp() / ((TAU).sqrt() * cfg.h);
    p_l * p_r * p_b
}

/// Likelihood of a particle sitting exactly on the update with its feet
/// matching the walk pattern.
fn peak_likelihood(z: &LocationUpdate, cfg: &FilterConfig) -> f64 {
    let s = cfg.sigma_of(z.c);
    1.0 / (TAU * s * s) / ((TAU).sqrt() * cfg.h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    /// Sum of the unnormalized weights.
    pub weight_sum: f64,
    pub n_eff: f64,
    pub underflow: bool,
    /// Mean likelihood far below its peak: the cloud cannot reach the update.
    pub collapsed: bool,
}

/// Reweights by the measurement likelihood and normalizes.
///
/// The unnormalized weight of particle `j` is `J * w_j * p_L * p_R * p_B`,
/// which is just the likelihood when the previous weights are uniform.
/// On underflow the weights are left untouched.
pub fn update(particles: &mut [Particle], z: &LocationUpdate, cfg: &FilterConfig) -> UpdateDiagnostics {
    let j = particles.len() as f64;
    let raw: Vec<f64> = particles.iter().map(|p| j * p.weight * likelihood(&p.state, z, cfg)).collect();
    let sum: f64 = raw.iter().sum();
    if !(sum >= cfg.weight_underflow_eps) || !sum.is_finite() {
        let n_eff = effective_size(particles);
        return UpdateDiagnostics { weight_sum: sum, n_eff, underflow: true, collapsed: true };
    }
    for (p, w) in particles.iter_mut().zip(raw) {
        p.weight = w / sum;
    }
    let collapsed = sum / j < cfg.collapse_ratio * peak_likelihood(z, cfg);
    UpdateDiagnostics { weight_sum: sum, n_eff: effective_size(particles), underflow: false, collapsed }
}

pub fn effective_size(particles: &[Particle]) -> f64 {
    1.0 / particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
}

/// Systematic resampling when `N_eff` falls below the configured fraction of
/// `J`. Returns whether it resampled.
pub fn resample(particles: &mut Vec<Particle>, cfg: &FilterConfig, rng: &mut impl Rng) -> bool {
    let n = particles.len();
    if effective_size(particles) >= cfg.resample_neff_frac * n as f64 {
        return false;
    }
    *particles = systematic(particles, rng.random_range(0.0..1.0));
    true
}

/// Low-variance resampling with offset `u0` in `[0, 1)`.
pub fn systematic(particles: &[Particle], u0: f64) -> Vec<Particle> {
    let n = particles.len();
    let w = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = particles[0].weight;
    let mut i = 0;
    for k in 0..n {
        let u = (u0 + k as f64) / n as f64;
        while u >= cum && i + 1 < n {
            i += 1;
            cum += particles[i].weight;
        }
        out.push(Particle { state: particles[i].state, weight: w });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub tau_ms: i64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub stride: f64,
}

/// Weighted mean of feet midpoints and stride, circular mean heading.
pub fn estimate(particles: &[Particle], tau_ms: i64) -> Estimate {
    let (mut x, mut y, mut sin, mut cos, mut stride) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in particles {
        let (mx, my) = p.state.midpoint();
        x += p.weight * mx;
        y += p.weight * my;
        sin += p.weight * p.state.theta.sin();
        cos += p.weight * p.state.theta.cos();
        stride += p.weight * p.state.stride;
    }
    Estimate { tau_ms, x, y, theta: sin.atan2(cos), stride }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    WeightUnderflow,
    FrequentResampling,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::WeightUnderflow => "weight_underflow",
            RejectReason::FrequentResampling => "frequent_resampling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TrackOutcome {
    Converged { estimates: Vec<Estimate> },
    Rejected { reason: RejectReason, update_index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub id: usize,
    pub mean_confidence: f64,
    pub outcome: TrackOutcome,
    pub resamples: usize,
}

impl TrackResult {
    pub fn is_rejected(&self) -> bool {
        matches!(self.outcome, TrackOutcome::Rejected { .. })
    }
}

/// Runs one filter over a hypothesis at 5 Hz, applying each update at the
/// first tick at or after its timestamp.
pub fn track_hypothesis(h: &TrajectoryHypothesis, cfg: &FilterConfig) -> Result<TrackResult> {
    cfg.validate()?;
    if h.updates.len() < 2 {
        return Err(Error::InvalidInput(format!("hypothesis {} has fewer than 2 updates", h.id)));
    }
    if h.updates.windows(2).any(|w| w[1].t_ms < w[0].t_ms) {
        return Err(Error::InvalidInput(format!("hypothesis {} updates are not time ordered", h.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((h.id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let first = &h.updates[0];
    let mut particles = init_particles(first, cfg, &mut rng);
    let mut tau = first.t_ms;
    let end = h.updates.last().unwrap().t_ms;
    let mut estimates = vec![estimate(&particles, tau)];
    let mut next = 1;
    // whether each applied update collapsed and forced a resampling
    let mut history: Vec<bool> = Vec::new();
    let mut resamples = 0;
    let dt = TICK_MS as f64 / 1000.0;

    let reject = |reason, update_index, resamples| {
        Ok(TrackResult {
            id: h.id,
            mean_confidence: h.mean_confidence,
            outcome: TrackOutcome::Rejected { reason, update_index },
            resamples,
        })
    };

    while tau < end {
        tau += TICK_MS;
        predict(&mut particles, dt, cfg, &mut rng);
        while next < h.updates.len() && h.updates[next].t_ms <= tau {
            let diag = update(&mut particles, &h.updates[next], cfg);
            if diag.underflow {
                return reject(RejectReason::WeightUnderflow, next, resamples);
            }
            if diag.collapsed {
                particles = systematic(&particles, rng.random_range(0.0..1.0));
                resamples += 1;
            } else if resample(&mut particles, cfg, &mut rng) {
                resamples += 1;
            }
            history.push(diag.collapsed);
            let window = &history[history.len().saturating_sub(cfg.reject_window)..];
            if window.iter().filter(|&&r| r).count() > cfg.reject_resample_count {
                return reject(RejectReason::FrequentResampling, next, resamples);
            }
            next += 1;
        }
        estimates.push(estimate(&particles, tau));
    }
    Ok(TrackResult {
        id: h.id,
        mean_confidence: h.mean_confidence,
        outcome: TrackOutcome::Converged { estimates },
        resamples,
    })
}

/// Tracks every hypothesis; results are in hypothesis order.
pub fn track_all(hypotheses: &[TrajectoryHypothesis], cfg: &FilterConfig) -> Result<Vec<TrackResult>> {
    hypotheses.iter().map(|h| track_hypothesis(h, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedTrajectory {
    pub hypothesis_id: usize,
    pub mean_confidence: f64,
    pub estimates: Vec<Estimate>,
    pub snapped_cells: Vec<Cell>,
}

/// The surviving hypothesis with the highest mean confidence (lowest id on
/// ties), with each estimate snapped to its nearest cell.
pub fn select_trajectory(results: &[TrackResult], grid: &GridSpec) -> Result<SelectedTrajectory> {
    let mut best: Option<(&TrackResult, &Vec<Estimate>)> = None;
    for r in results {
        if let TrackOutcome::Converged { estimates } = &r.outcome {
            let better = match best {
                None => true,
                Some((b, _)) => r.mean_confidence > b.mean_confidence || (r.mean_confidence == b.mean_confidence && r.id < b.id),
            };
            if better {
                best = Some((r, estimates));
            }
        }
    }
    let (r, estimates) = best.ok_or(Error::AllRejected)?;
    Ok(SelectedTrajectory {
        hypothesis_id: r.id,
        mean_confidence: r.mean_confidence,
        snapped_cells: estimates.iter().map(|e| grid.snap(e.x, e.y)).collect(),
        estimates: estimates.clone(),
    })
}

#[cfg(test)]
mod tests;
