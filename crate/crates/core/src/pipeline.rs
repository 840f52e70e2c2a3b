//! Stages glued together: reference data to training sequences, and a test
//! walk to beliefs, hypotheses and a selected trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csi::{denoise, sanitize_observation, ChannelLayout, CsiObservation, DenoiseConfig, Rejection, SanitizeConfig};
use crate::error::{Error, Result};
use crate::fingerprint::{
    extract_proposals, query_proposal, warp_window, Cell, GridSpec, MapSequence, ProposalConfig,
    QueryConfig, Tensor3, TestObservation, WarpMethod,
};
use crate::hypothesis::{generate, HypothesisConfig, TrajectoryHypothesis};
use crate::nn::{BeliefVector, Model, SequenceSample};
use crate::sim::CsiField;
use crate::walk::{select_trajectory, track_all, FilterConfig, SelectedTrajectory, TrackResult};

/// Sanitizes raw phase vectors in place of their raw values.
pub fn sanitize_all(
    observations: &[CsiObservation],
    layout: &ChannelLayout,
    cfg: &SanitizeConfig,
) -> Result<Vec<CsiObservation>> {
    let indices = layout.default_subcarrier_indices();
    observations
        .iter()
        .map(|o| {
            o.validate(layout)?;
            let phases = sanitize_observation(&o.phases, layout, &indices, cfg)?;
            Ok(CsiObservation::new(o.t_ms, o.location, phases))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct DenoiseSummary {
    pub retained: Vec<CsiObservation>,
    /// Rejections per cell, in class order.
    pub rejected: Vec<(usize, Rejection)>,
}

/// Denoises each reference cell's observations separately. Output keeps the
/// input order.
pub fn denoise_by_cell(observations: &[CsiObservation], grid: &GridSpec, cfg: &DenoiseConfig) -> Result<DenoiseSummary> {
    let mut per_cell: Vec<Vec<usize>> = vec![Vec::new(); grid.n_cells()];
    for (i, o) in observations.iter().enumerate() {
        let (x, y) = o
            .location
            .ok_or_else(|| Error::InvalidInput(format!("observation at t={} has no location", o.t_ms)))?;
        let cell = grid.nearest_cell(x, y).ok_or(Error::OffGrid { x, y })?;
        per_cell[grid.class_of(cell)].push(i);
    }
    let mut keep = vec![false; observations.len()];
    let mut rejected = Vec::new();
    for (class, idx) in per_cell.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let set: Vec<CsiObservation> = idx.iter().map(|&i| observations[i].clone()).collect();
        let outcome = denoise(&set, cfg)?;
        let dropped: Vec<usize> = outcome.rejected.iter().map(|r| r.index).collect();
        for (j, &i) in idx.iter().enumerate() {
            keep[i] = !dropped.contains(&j);
        }
        rejected.extend(outcome.rejected.into_iter().map(|mut r| {
            r.index = idx[r.index];
            (class, r)
        }));
    }
    let retained = observations.iter().zip(&keep).filter(|(_, &k)| k).map(|(o, _)| o.clone()).collect();
    Ok(DenoiseSummary { retained, rejected })
}

/// Largest `m` every cell can supply.
pub fn common_depth(observations: &[CsiObservation], grid: &GridSpec) -> usize {
    let mut counts = vec![0usize; grid.n_cells()];
    for o in observations {
        if let Some(cell) = o.location.and_then(|(x, y)| grid.nearest_cell(x, y)) {
            counts[grid.class_of(cell)] += 1;
        }
    }
    counts.into_iter().min().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Step between the first maps of consecutive training sequences.
    pub sequence_stride: usize,
    /// Sequences from spots outside the grid, as a multiple of the mean
    /// number of sequences per location class.
    pub null_share: f64,
    /// Null spots lie this far beyond the grid edge, metres.
    pub null_distance: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { sequence_stride: 1, null_share: 1.0, null_distance: (1.0, 3.0) }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_stride == 0 {
            return Err(Error::config("dataset.sequence_stride", "must be positive"));
        }
        if !(self.null_share >= 0.0 && self.null_share.is_finite()) {
            return Err(Error::config("dataset.null_share", "must be >= 0"));
        }
        let (lo, hi) = self.null_distance;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("dataset.null_distance", "need 0 <= min <= max"));
        }
        Ok(())
    }
}

/// Consecutive-map sequences of every proposal, labelled with the proposal's
/// class at every step.
pub fn proposal_sequences(
    maps: &MapSequence,
    proposals: &ProposalConfig,
    sequence_length: usize,
    stride: usize,
) -> Result<Vec<SequenceSample>> {
    if maps.len() < sequence_length {
        return Err(Error::InvalidInput(format!(
            "{} maps cannot form sequences of {sequence_length}",
            maps.len()
        )));
    }
    let per_map = maps.maps.iter().map(|m| extract_proposals(m, proposals)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for start in (0..=maps.len() - sequence_length).step_by(stride.max(1)) {
        for p in 0..per_map[start].len() {
            let label = per_map[start][p].label.expect("reference proposals are labelled");
            out.push(SequenceSample {
                inputs: (start..start + sequence_length).map(|i| per_map[i][p].data.clone()).collect(),
                labels: vec![label; sequence_length],
            });
        }
    }
    Ok(out)
}

/// Raw fingerprint sequences (one `1 x 1 x C` input per step) for the
/// temporal-only baseline.
pub fn fingerprint_sequences(maps: &MapSequence, sequence_length: usize, stride: usize) -> Result<Vec<SequenceSample>> {
    let single = ProposalConfig { sizes: vec![1], warp_to: (1, 1), ..ProposalConfig::default() };
    proposal_sequences(maps, &single, sequence_length, stride)
}

/// Raw observations at `count` spots outside the grid, `per_spot`
/// consecutive ones at each, `interval_ms` apart. Locations are recorded so
/// that they can be recognized as off-grid.
#[allow(clippy::too_many_arguments)]
pub fn null_observations(
    field: &CsiField,
    day: f64,
    count: usize,
    per_spot: usize,
    distance: (f64, f64),
    t0_ms: i64,
    interval_ms: i64,
    seed: u64,
) -> Vec<CsiObservation> {
    let (x0, y0, x1, y1) = field.config().grid.bounding_box();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = t0_ms;
    let mut out = Vec::with_capacity(count * per_spot);
    for _ in 0..count {
        // a point on the grid edge pushed outward
        let d = rng.random_range(distance.0..=distance.1);
        let s = rng.random_range(0.0..1.0);
        let (x, y) = match rng.random_range(0..4) {
            0 => (x0 - d, y0 + s * (y1 - y0)),
            1 => (x1 + d, y0 + s * (y1 - y0)),
            2 => (x0 + s * (x1 - x0), y0 - d),
            _ => (x0 + s * (x1 - x0), y1 + d),
        };
        for _ in 0..per_spot {
            out.push(CsiObservation::new(t, Some((x, y)), field.observe(x, y, day, &mut rng)));
            t += interval_ms;
        }
    }
    out
}

/// Null-class sequences from sanitized off-grid observations, taken in
/// consecutive groups of `sequence_length`. Each input is one observation
/// warped to `warp_to`; a trailing partial group is dropped.
pub fn null_sequences(
    observations: &[CsiObservation],
    grid: &GridSpec,
    sequence_length: usize,
    warp_to: (usize, usize),
) -> Vec<SequenceSample> {
    let null = grid.null_class();
    observations
        .chunks_exact(sequence_length)
        .map(|group| SequenceSample {
            inputs: group.iter().map(|o| warp_window(&[&o.phases], 1, warp_to, WarpMethod::Nearest)).collect(),
            labels: vec![null; sequence_length],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    /// Spacing of belief timesteps, ms.
    pub belief_interval_ms: i64,
    /// Second pass: query larger windows around the first pass's estimates.
    pub refine: bool,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self { belief_interval_ms: 2000, refine: true }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.belief_interval_ms <= 0 {
            return Err(Error::config("localize.belief_interval_ms", "must be positive"));
        }
        Ok(())
    }
}

/// Which input representation a model expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Proposals warped to the model's spatial shape.
    Proposal,
    /// The raw `C`-vector of the current observation.
    Fingerprint,
}

impl InputKind {
    pub fn of(model: &Model) -> Self {
        let (u, v, _) = model.config().input_shape;
        if model.config().conv_layers.is_empty() && u == 1 && v == 1 {
            InputKind::Fingerprint
        } else {
            InputKind::Proposal
        }
    }
}

#[derive(Debug, Clone)]
pub struct PassOutput {
    pub belief_times: Vec<i64>,
    pub beliefs: Vec<BeliefVector>,
    /// Native size of the proposal feeding each belief.
    pub native_sizes: Vec<usize>,
    pub hypotheses: Vec<TrajectoryHypothesis>,
    pub tracks: Vec<TrackResult>,
    pub selected: Option<SelectedTrajectory>,
    /// Why no trajectory could be selected.
    pub failure: Option<String>,
}

impl PassOutput {
    /// Most probable location class at each belief timestep, ignoring null.
    pub fn argmax_classes(&self, null_class: usize) -> Vec<usize> {
        self.beliefs
            .iter()
            .map(|b| {
                let mut best = usize::MAX;
                for (k, &p) in b.probs.iter().enumerate() {
                    if k != null_class && (best == usize::MAX || p > b.probs[best]) {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Selected trajectory's position at each belief time; `None` without a
    /// selection.
    pub fn trajectory_at_beliefs(&self) -> Option<Vec<(f64, f64)>> {
        let sel = self.selected.as_ref()?;
        self.belief_times
            .iter()
            .map(|&t| {
                sel.estimates
                    .iter()
                    .min_by_key(|e| (e.tau_ms - t).abs())
                    .map(|e| (e.x, e.y))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Localization {
    pub passes: Vec<PassOutput>,
}

impl Localization {
    pub fn last(&self) -> &PassOutput {
        self.passes.last().expect("at least one pass")
    }

    pub fn first(&self) -> &PassOutput {
        &self.passes[0]
    }
}

/// Tick indices at which beliefs are read out: the first full sequence,
/// then every `belief_interval_ms`.
pub fn belief_ticks(observations: &[CsiObservation], sequence_length: usize, interval_ms: i64) -> Vec<usize> {
    let Some(first) = sequence_length.checked_sub(1).filter(|&f| f < observations.len()) else {
        return Vec::new();
    };
    let mut ticks = vec![first];
    let mut next_t = observations[first].t_ms + interval_ms;
    for (k, o) in observations.iter().enumerate().skip(first + 1) {
        if o.t_ms >= next_t {
            ticks.push(k);
            next_t += interval_ms;
        }
    }
    ticks
}

/// One model input per observation from that observation alone.
pub fn single_inputs(model: &Model, observations: &[CsiObservation], proposals: &ProposalConfig) -> Vec<Tensor3> {
    let (u, v, _) = model.config().input_shape;
    let kind = InputKind::of(model);
    observations
        .iter()
        .map(|o| match kind {
            InputKind::Fingerprint => Tensor3::from_pixel(&o.phases),
            InputKind::Proposal => warp_window(&[&o.phases], 1, (u, v), proposals.warp),
        })
        .collect()
}

/// Whether a second, windowed pass can add anything for `model`.
pub fn can_refine(model: &Model, cfg: &StageConfigs) -> bool {
    cfg.localize.refine && InputKind::of(model) == InputKind::Proposal && cfg.proposals.max_size() > 1
}

/// Windowed inputs: each observation is placed at the cell of the nearest
/// trajectory estimate and the largest window available from past
/// observations is queried. Returns the inputs and their native sizes.
pub fn refined_inputs(
    observations: &[CsiObservation],
    trajectory: &SelectedTrajectory,
    grid: &GridSpec,
    proposals: &ProposalConfig,
    query: &QueryConfig,
) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    let at = |t: i64| {
        trajectory
            .estimates
            .iter()
            .min_by_key(|e| (e.tau_ms - t).abs())
            .filter(|e| (e.tau_ms - t).abs() <= query.window_ms)
            .map(|e| (e.x, e.y))
    };
    let tests: Vec<TestObservation<'_>> =
        observations.iter().map(|o| TestObservation { obs: o, estimate: at(o.t_ms) }).collect();
    let mut inputs = Vec::with_capacity(observations.len());
    let mut sizes = Vec::with_capacity(observations.len());
    for (k, o) in observations.iter().enumerate() {
        // only the past is available when the observation arrives
        let cell: Option<Cell> = tests[k].estimate.and_then(|(x, y)| grid.nearest_cell(x, y));
        let p = query_proposal(&tests[..=k], o.t_ms, cell, grid, proposals, query)?;
        sizes.push(p.native_size);
        inputs.push(p.data);
    }
    Ok((inputs, sizes))
}

/// Beliefs at each tick: the last output of the model run over the
/// `sequence_length` inputs ending there.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefStream {
    pub times: Vec<i64>,
    pub beliefs: Vec<BeliefVector>,
    pub native_sizes: Vec<usize>,
}

pub fn predict_beliefs(
    model: &Model,
    inputs: &[Tensor3],
    native_sizes: &[usize],
    observations: &[CsiObservation],
    ticks: &[usize],
) -> Result<BeliefStream> {
    for n in [inputs.len(), native_sizes.len()] {
        if n != observations.len() {
            return Err(Error::LengthMismatch { expected: observations.len(), actual: n });
        }
    }
    let t_len = model.config().sequence_length;
    let mut beliefs = Vec::with_capacity(ticks.len());
    for (j, &k) in ticks.iter().enumerate() {
        if k + 1 < t_len || k >= inputs.len() {
            return Err(Error::InvalidInput(format!("tick {k} has no full sequence")));
        }
        let mut out = model.forward(&inputs[k + 1 - t_len..=k])?;
        let mut last = out.pop().expect("non-empty sequence");
        last.t = j;
        beliefs.push(last);
    }
    Ok(BeliefStream {
        times: ticks.iter().map(|&k| observations[k].t_ms).collect(),
        beliefs,
        native_sizes: ticks.iter().map(|&k| native_sizes[k]).collect(),
    })
}

/// Hypotheses, tracking and selection over a belief stream. Failing to
/// produce hypotheses or a survivor is recorded, not raised.
pub fn select_from_beliefs(stream: BeliefStream, grid: &GridSpec, hypothesis: &HypothesisConfig, filter: &FilterConfig) -> Result<PassOutput> {
    let mut pass = PassOutput {
        belief_times: stream.times,
        beliefs: stream.beliefs,
        native_sizes: stream.native_sizes,
        hypotheses: Vec::new(),
        tracks: Vec::new(),
        selected: None,
        failure: None,
    };
    let hypotheses = match generate(&pass.beliefs, &pass.belief_times, grid, hypothesis) {
        Ok(h) => h,
        Err(e) => {
            pass.failure = Some(e.to_string());
            return Ok(pass);
        }
    };
    let tracks = track_all(&hypotheses, filter)?;
    match select_trajectory(&tracks, grid) {
        Ok(sel) => pass.selected = Some(sel),
        Err(e) => pass.failure = Some(e.to_string()),
    }
    pass.hypotheses = hypotheses;
    pass.tracks = tracks;
    Ok(pass)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfigs {
    pub proposals: ProposalConfig,
    pub query: QueryConfig,
    pub localize: LocalizeConfig,
    pub hypothesis: HypothesisConfig,
    pub filter: FilterConfig,
}

/// Localizes one stream of sanitized test observations taken every tick.
/// The first pass feeds 1x1 proposals; with `refine` and larger window sizes
/// a second pass assigns observations to cells using the first pass's
/// trajectory and queries the largest available windows.
pub fn localize(model: &Model, observations: &[CsiObservation], grid: &GridSpec, cfg: &StageConfigs) -> Result<Localization> {
    cfg.localize.validate()?;
    let ticks = belief_ticks(observations, model.config().sequence_length, cfg.localize.belief_interval_ms);
    if ticks.len() < cfg.hypothesis.n {
        return Err(Error::InvalidInput(format!(
            "{} observations give {} belief timesteps, need {}",
            observations.len(),
            ticks.len(),
            cfg.hypothesis.n
        )));
    }
    let single = single_inputs(model, observations, &cfg.proposals);
    let ones = vec![1; observations.len()];
    let stream = predict_beliefs(model, &single, &ones, observations, &ticks)?;
    let mut passes = vec![select_from_beliefs(stream, grid, &cfg.hypothesis, &cfg.filter)?];

    if let (true, Some(sel)) = (can_refine(model, cfg), passes[0].selected.clone()) {
        let (inputs, sizes) = refined_inputs(observations, &sel, grid, &cfg.proposals, &cfg.query)?;
        let stream = predict_beliefs(model, &inputs, &sizes, observations, &ticks)?;
        passes.push(select_from_beliefs(stream, grid, &cfg.hypothesis, &cfg.filter)?);
    }
    Ok(Localization { passes })
}
