//! Synthetic walks and CSI fields standing in for a recorded dataset.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csi::{ChannelLayout, CsiObservation};
use crate::error::{Error, Result};
use crate::fingerprint::GridSpec;
use crate::hypothesis::{LocationUpdate, TrajectoryHypothesis};
use crate::walk::{gaussian, truncated_gaussian, wrap_angle, GaitBounds, PedestrianState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkSimConfig {
    pub speed_mean: f64,
    pub speed_sd: f64,
    /// Hard cap on walking speed, m/s.
    pub speed_max: f64,
    pub period_mean: f64,
    pub period_sd: f64,
    /// Heading change per step, radians.
    pub turn_sd: f64,
    pub turn_max: f64,
    pub duration_s: f64,
    pub tick_ms: i64,
    pub start: (f64, f64),
    /// Initial heading; random when absent.
    pub start_heading: Option<f64>,
    /// `(min_x, min_y, max_x, max_y)` the walker steers to stay inside.
    pub area: Option<(f64, f64, f64, f64)>,
    pub margin: f64,
    pub update_interval_ms: i64,
    pub update_noise_sd: f64,
    pub update_confidence: f64,
    pub bounds: GaitBounds,
    pub seed: u64,
}

impl Default for WalkSimConfig {
    fn default() -> Self {
        Self {
            speed_mean: 1.0,
            speed_sd: 0.2,
            speed_max: 3.0,
            period_mean: 1.0,
            period_sd: 0.05,
            turn_sd: 0.3,
            turn_max: 0.6,
            duration_s: 10.0,
            tick_ms: 200,
            start: (0.0, 0.0),
            start_heading: None,
            area: None,
            margin: 0.75,
            update_interval_ms: 1000,
            update_noise_sd: 0.1,
            update_confidence: 0.9,
            bounds: GaitBounds::default(),
            seed: 0,
        }
    }
}

impl WalkSimConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let sds = [
            ("walk.speed_sd", self.speed_sd),
            ("walk.period_sd", self.period_sd),
            ("walk.turn_sd", self.turn_sd),
            ("walk.turn_max", self.turn_max),
            ("walk.update_noise_sd", self.update_noise_sd),
            ("walk.margin", self.margin),
        ];
        for (field, v) in sds {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be >= 0"));
            }
        }
        if !(self.speed_mean > 0.0 && self.speed_mean <= self.speed_max && self.speed_max <= 3.0) {
            return Err(Error::config("walk.speed_mean", "need 0 < speed_mean <= speed_max <= 3 m/s"));
        }
        if !(self.duration_s >= 1.0) {
            return Err(Error::config("walk.duration_s", "must be at least 1 s"));
        }
        if self.tick_ms <= 0 || self.update_interval_ms <= 0 {
            return Err(Error::config("walk.tick_ms", "tick and update interval must be positive"));
        }
        if !(0.0..1.0).contains(&self.update_confidence) {
            return Err(Error::config("walk.update_confidence", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTick {
    pub t_ms: i64,
    pub state: PedestrianState,
}

impl GroundTruthTick {
    pub fn position(&self) -> (f64, f64) {
        self.state.midpoint()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedWalk {
    pub ticks: Vec<GroundTruthTick>,
    /// Noisy position fixes for filter testing.
    pub updates: Vec<LocationUpdate>,
    /// Speed drawn for every step.
    pub step_speeds: Vec<f64>,
}

impl SimulatedWalk {
    /// Exact midpoints every `interval_ms` as a single hypothesis.
    pub fn ground_truth_hypothesis(&self, interval_ms: i64, c: f64) -> TrajectoryHypothesis {
        let t0 = self.ticks[0].t_ms;
        let updates: Vec<LocationUpdate> = self
            .ticks
            .iter()
            .filter(|t| (t.t_ms - t0) % interval_ms == 0)
            .enumerate()
            .map(|(i, t)| {
                let (x, y) = t.position();
                LocationUpdate { t_index: i, t_ms: t.t_ms, x, y, c }
            })
            .collect();
        TrajectoryHypothesis { id: 0, classes: Vec::new(), updates, mean_confidence: c }
    }

    pub fn noisy_hypothesis(&self) -> TrajectoryHypothesis {
        let mean = self.updates.iter().map(|u| u.c).sum::<f64>() / self.updates.len() as f64;
        TrajectoryHypothesis { id: 0, classes: Vec::new(), updates: self.updates.clone(), mean_confidence: mean }
    }
}

struct StepParams {
    speed: f64,
    stride: f64,
    period: f64,
}

fn draw_step(cfg: &WalkSimConfig, rng: &mut impl Rng) -> StepParams {
    let lo = (cfg.speed_mean - 3.0 * cfg.speed_sd).max(0.05);
    let hi = (cfg.speed_mean + 3.0 * cfg.speed_sd).min(cfg.speed_max);
    let speed = truncated_gaussian(rng, cfg.speed_mean, cfg.speed_sd, lo, hi);
    let period = truncated_gaussian(
        rng,
        cfg.period_mean,
        cfg.period_sd,
        cfg.bounds.period_min.max(cfg.period_mean - 3.0 * cfg.period_sd),
        cfg.bounds.period_max.min(cfg.period_mean + 3.0 * cfg.period_sd),
    );
    // body advances one stride per half cycle
    let stride = cfg.bounds.clamp_stride(speed * period / 2.0);
    StepParams { speed, stride, period }
}

fn steer(cfg: &WalkSimConfig, state: &PedestrianState, rng: &mut impl Rng) -> f64 {
    let random_turn = gaussian(rng, cfg.turn_sd).clamp(-cfg.turn_max, cfg.turn_max);
    let Some((x0, y0, x1, y1)) = cfg.area else {
        return random_turn;
    };
    let (x, y) = state.midpoint();
    let look = 2.0 * state.stride + cfg.margin;
    let (ax, ay) = (x + look * state.theta.cos(), y + look * state.theta.sin());
    let inside = |px: f64, py: f64| {
        px >= x0 + cfg.margin && px <= x1 - cfg.margin && py >= y0 + cfg.margin && py <= y1 - cfg.margin
    };
    if inside(ax, ay) {
        return random_turn;
    }
    let to_center = (0.5 * (y0 + y1) - y).atan2(0.5 * (x0 + x1) - x);
    wrap_angle(to_center - state.theta).clamp(-cfg.turn_max, cfg.turn_max)
}

/// Gait simulation with the same kinematics the filter predicts with.
pub fn simulate_walk(cfg: &WalkSimConfig) -> Result<SimulatedWalk> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = draw_step(cfg, &mut rng);
    let theta = cfg.start_heading.unwrap_or_else(|| rng.random_range(-PI..PI));
    let gamma = rng.random_range(0.0..TAU);
    let mut state = PedestrianState::centered(cfg.start.0, cfg.start.1, theta, gamma, first.stride, first.period);
    let mut step_speeds = vec![first.speed];
    let n_ticks = (cfg.duration_s * 1000.0).round() as i64 / cfg.tick_ms;
    let dt = cfg.tick_ms as f64 / 1000.0;
    let mut ticks = Vec::with_capacity(n_ticks as usize);
    for k in 0..n_ticks {
        if k > 0 && state.advance(dt) > 0 {
            let step = draw_step(cfg, &mut rng);
            step_speeds.push(step.speed);
            state.stride = step.stride;
            state.step_period = step.period;
            state.theta = wrap_angle(state.theta + steer(cfg, &state, &mut rng));
        }
        ticks.push(GroundTruthTick { t_ms: k * cfg.tick_ms, state });
    }
    let updates = ticks
        .iter()
        .filter(|t| t.t_ms % cfg.update_interval_ms == 0)
        .enumerate()
        .map(|(i, t)| {
            let (x, y) = t.position();
            LocationUpdate {
                t_index: i,
                t_ms: t.t_ms,
                x: x + gaussian(&mut rng, cfg.update_noise_sd),
                y: y + gaussian(&mut rng, cfg.update_noise_sd),
                c: cfg.update_confidence,
            }
        })
        .collect();
    Ok(SimulatedWalk { ticks, updates, step_speeds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsiFieldConfig {
    pub layout: ChannelLayout,
    pub grid: GridSpec,
    /// RBF length-scale, metres.
    pub length_scale: f64,
    /// Bumps per squared length-scale.
    pub bump_density: f64,
    /// Approximate per-channel standard deviation of the field, radians.
    pub amplitude: f64,
    /// Gaussian measurement noise, radians.
    pub noise_sd: f64,
    /// Reference observations cycle through `sway_spots` standing spots evenly
    /// spaced on a circle of this radius around the cell center, at a random
    /// rotation per cell. With no spots they are uniform in the disc.
    pub sway_radius: f64,
    pub sway_spots: usize,
    /// Per-observation timing slope across subcarrier indices is drawn from
    /// `[-max, max]`; sanitization removes it.
    pub timing_slope_max: f64,
    /// Adds a uniformly random phase offset per antenna pair.
    pub random_offset: bool,
    pub burst_probability: f64,
    pub burst_sd: f64,
    /// Scale of the second field added per day.
    pub drift_per_day: f64,
    /// Observations per cell in the reference dataset.
    pub m: usize,
    pub interval_ms: i64,
    pub seed: u64,
}

impl Default for CsiFieldConfig {
    fn default() -> Self {
        Self {
            layout: ChannelLayout { n_tx: 3, n_rx: 3, n_subcarriers: 4 },
            grid: GridSpec::default(),
            length_scale: 1.0,
            bump_density: 2.0,
            amplitude: 0.4,
            noise_sd: 0.002,
            sway_radius: 0.3,
            sway_spots: 3,
            timing_slope_max: 0.3,
            random_offset: true,
            burst_probability: 0.02,
            burst_sd: 1.0,
            drift_per_day: 0.0,
            m: 40,
            interval_ms: 200,
            seed: 0,
        }
    }
}

impl CsiFieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.layout.channels() == 0 {
            return Err(Error::config("field.layout", "need at least one channel"));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::config("field.length_scale", "must be positive"));
        }
        if !(self.bump_density > 0.0) {
            return Err(Error::config("field.bump_density", "must be positive"));
        }
        let nonneg = [
            ("field.amplitude", self.amplitude),
            ("field.noise_sd", self.noise_sd),
            ("field.sway_radius", self.sway_radius),
            ("field.timing_slope_max", self.timing_slope_max),
            ("field.burst_sd", self.burst_sd),
            ("field.drift_per_day", self.drift_per_day),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.burst_probability) {
            return Err(Error::config("field.burst_probability", "must be in [0, 1]"));
        }
        if self.m == 0 || self.interval_ms <= 0 {
            return Err(Error::config("field.m", "m and interval_ms must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bump {
    x: f64,
    y: f64,
    a: f64,
}

/// Smooth random phase field, one RBF mixture per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiField {
    cfg: CsiFieldConfig,
    base: Vec<Vec<Bump>>,
    drift: Vec<Vec<Bump>>,
    subcarriers: Vec<i32>,
}

fn draw_bumps(cfg: &CsiFieldConfig, rng: &mut impl Rng) -> Vec<Vec<Bump>> {
    let ell = cfg.length_scale;
    let (x0, y0, x1, y1) = cfg.grid.bounding_box();
    let pad = 4.0 * ell;
    let (bx0, by0, bx1, by1) = (x0 - pad, y0 - pad, x1 + pad, y1 + pad);
    let area = (bx1 - bx0) * (by1 - by0);
    let count = ((cfg.bump_density * area / (ell * ell)).round() as usize).max(1);
    // point variance of the mixture is density * pi * ell^2 * E[a^2]
    let scale = cfg.amplitude / (cfg.bump_density / (ell * ell) * PI * ell * ell).sqrt();
    (0..cfg.layout.channels())
        .map(|_| {
            (0..count)
                .map(|_| Bump {
                    x: rng.random_range(bx0..bx1),
                    y: rng.random_range(by0..by1),
                    a: scale * gaussian(rng, 1.0),
                })
                .collect()
        })
        .collect()
}

impl CsiField {
    pub fn generate(cfg: &CsiFieldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = draw_bumps(cfg, &mut rng);
        let drift = draw_bumps(cfg, &mut rng);
        Ok(Self { cfg: cfg.clone(), base, drift, subcarriers: cfg.layout.default_subcarrier_indices() })
    }

    pub fn config(&self) -> &CsiFieldConfig {
        &self.cfg
    }

    /// Noise-free per-channel phase at `(x, y)` on day `day`.
    pub fn value(&self, x: f64, y: f64, day: f64) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.cfg.length_scale * self.cfg.length_scale);
        let eval = |bumps: &[Bump]| bumps.iter().map(|b| b.a * (-((x - b.x).powi(2) + (y - b.y).powi(2)) * inv).exp()).sum::<f64>();
        let drift = self.cfg.drift_per_day * day;
        self.base
            .iter()
            .zip(&self.drift)
            .map(|(b, d)| if drift == 0.0 { eval(b) } else { eval(b) + drift * eval(d) })
            .collect()
    }

    /// One raw observation: field plus noise, timing slope and per-pair
    /// offset, wrapped to `(-pi, pi]`. Occasionally a burst corrupts it.
    pub fn observe(&self, x: f64, y: f64, day: f64, rng: &mut impl Rng) -> Vec<f64> {
        let cfg = &self.cfg;
        let mut phases = self.value(x, y, day);
        let slope = if cfg.timing_slope_max > 0.0 { rng.random_range(-cfg.timing_slope_max..=cfg.timing_slope_max) } else { 0.0 };
        let burst = cfg.burst_probability > 0.0 && rng.random_bool(cfg.burst_probability);
        let n_sub = cfg.layout.n_subcarriers;
        for chunk in phases.chunks_mut(n_sub) {
            let offset = if cfg.random_offset { rng.random_range(-PI..PI) } else { 0.0 };
            for (p, &k) in chunk.iter_mut().zip(&self.subcarriers) {
                let mut noise = gaussian(rng, cfg.noise_sd);
                if burst {
                    noise += gaussian(rng, cfg.burst_sd);
                }
                *p = wrap_angle(*p + slope * f64::from(k) + offset + noise);
            }
        }
        phases
    }

    /// `m` located observations per cell, cell by cell, `interval_ms` apart.
    pub fn reference_dataset(&self, day: f64, t0_ms: i64) -> Vec<CsiObservation> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ce11);
        let mut t = t0_ms;
        let mut out = Vec::with_capacity(cfg.grid.n_cells() * cfg.m);
        for class in 0..cfg.grid.n_cells() {
            let center = cfg.grid.cell_center(cfg.grid.cell_of_class(class).unwrap());
            let rotation = rng.random_range(0.0..TAU);
            for i in 0..cfg.m {
                let (r, a) = if cfg.sway_spots == 0 {
                    (cfg.sway_radius * rng.random_range(0.0f64..1.0).sqrt(), rng.random_range(0.0..TAU))
                } else {
                    (cfg.sway_radius, rotation + TAU * (i % cfg.sway_spots) as f64 / cfg.sway_spots as f64)
                };
                let (x, y) = (center.0 + r * a.cos(), center.1 + r * a.sin());
                let phases = self.observe(x, y, day, &mut rng);
                out.push(CsiObservation::new(t, Some((x, y)), phases));
                t += cfg.interval_ms;
            }
        }
        out
    }
}

pub fn generate_csi_field(cfg: &CsiFieldConfig) -> Result<CsiField> {
    CsiField::generate(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub t_ms: i64,
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

/// One unlabeled observation per tick at the walker's midpoint, plus the
/// hidden ground truth used only for scoring.
pub fn walk_to_observations(
    walk: &SimulatedWalk,
    field: &CsiField,
    day: f64,
    seed: u64,
) -> (Vec<CsiObservation>, Vec<GroundTruthLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = &field.cfg.grid;
    walk.ticks
        .iter()
        .map(|tick| {
            let (x, y) = tick.position();
            let obs = CsiObservation::new(tick.t_ms, None, field.observe(x, y, day, &mut rng));
            (obs, GroundTruthLabel { t_ms: tick.t_ms, x, y, class: grid.class_at(x, y) })
        })
        .unzip()
}

#[cfg(test)]
mod tests;
