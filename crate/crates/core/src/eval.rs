//! Scoring localizations against ground truth, and the synthetic experiment
//! that trains a model and localizes simulated walks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, PipelineConfig};
use crate::csi::CsiObservation;
use crate::error::{Error, Result};
use crate::fingerprint::{build_map_sequence, GridSpec, MapSequence, ProposalConfig};
use crate::nn::{train, Model, SequenceSample, TrainReport};
use crate::pipeline::{
    common_depth, denoise_by_cell, fingerprint_sequences, localize, null_observations, null_sequences, proposal_sequences,
    sanitize_all, DenoiseSummary, Localization,
};
use crate::sim::{simulate_walk, walk_to_observations, CsiField, CsiFieldConfig, GroundTruthLabel, GroundTruthTick, WalkSimConfig};
use crate::walk::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub mean: f64,
    pub rmse: f64,
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self { count: 0, mean: f64::NAN, rmse: f64::NAN };
        }
        let n = errors.len() as f64;
        Self {
            count: errors.len(),
            mean: errors.iter().sum::<f64>() / n,
            rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        }
    }
}

/// Empirical CDF as `(error, fraction <= error)` at every sample.
pub fn cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.iter().enumerate().map(|(i, &e)| (e, (i + 1) as f64 / n)).collect()
}

/// Errors of one localized walk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WalkErrors {
    /// Distance from the argmax cell's center to the true position at each
    /// belief timestep.
    pub before: Vec<f64>,
    /// Distance from the selected trajectory's snapped cell center.
    pub after: Vec<f64>,
    pub heading: Vec<f64>,
    pub stride: Vec<f64>,
    /// No trajectory survived, so `after` repeats `before`.
    pub fell_back: bool,
}

fn truth_at(truth: &[GroundTruthLabel], t_ms: i64) -> Result<(f64, f64)> {
    truth
        .iter()
        .min_by_key(|g| (g.t_ms - t_ms).abs())
        .map(|g| (g.x, g.y))
        .ok_or_else(|| Error::InvalidInput("empty ground truth".into()))
}

/// Scores the final pass of a localization. Heading and stride are scored
/// only when gait ground truth is given, and only from the second location
/// update on (the first fix says nothing about heading).
pub fn score(loc: &Localization, truth: &[GroundTruthLabel], gait: Option<&[GroundTruthTick]>, grid: &GridSpec) -> Result<WalkErrors> {
    let pass = loc.last();
    let centre = |class: usize| grid.cell_of_class(class).map(|c| grid.cell_center(c));
    let before_cells: Vec<(f64, f64)> = pass
        .argmax_classes(grid.null_class())
        .into_iter()
        .map(|k| centre(k).ok_or_else(|| Error::InvalidInput("belief has no location class".into())))
        .collect::<Result<_>>()?;
    let after_cells = match pass.trajectory_at_beliefs() {
        Some(points) => Some(points.into_iter().map(|(x, y)| grid.cell_center(grid.snap(x, y))).collect::<Vec<_>>()),
        None => None,
    };
    let mut out = WalkErrors { fell_back: after_cells.is_none(), ..WalkErrors::default() };
    for (i, &t) in pass.belief_times.iter().enumerate() {
        let (x, y) = truth_at(truth, t)?;
        let dist = |(px, py): (f64, f64)| (px - x).hypot(py - y);
        out.before.push(dist(before_cells[i]));
        out.after.push(dist(after_cells.as_ref().map_or(before_cells[i], |a| a[i])));
    }
    if let (Some(gait), Some(sel)) = (gait, &pass.selected) {
        let second_update = pass
            .hypotheses
            .iter()
            .find(|h| h.id == sel.hypothesis_id)
            .and_then(|h| h.updates.get(1))
            .map_or(i64::MAX, |u| u.t_ms);
        for e in sel.estimates.iter().filter(|e| e.tau_ms >= second_update) {
            let Some(tick) = gait.iter().find(|g| g.t_ms == e.tau_ms) else { continue };
            out.heading.push(wrap_angle(e.theta - tick.state.theta).abs());
            out.stride.push((e.stride - tick.state.stride).abs());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub walks: usize,
    /// Walks where no hypothesis survived tracking.
    pub fallbacks: usize,
    pub before: ErrorSummary,
    pub after: ErrorSummary,
    pub heading_rmse: f64,
    pub stride_rmse: f64,
}

impl EvalReport {
    pub fn from_walks(walks: &[WalkErrors]) -> Self {
        let cat = |f: fn(&WalkErrors) -> &Vec<f64>| walks.iter().flat_map(|w| f(w).iter().copied()).collect::<Vec<f64>>();
        Self {
            walks: walks.len(),
            fallbacks: walks.iter().filter(|w| w.fell_back).count(),
            before: ErrorSummary::of(&cat(|w| &w.before)),
            after: ErrorSummary::of(&cat(|w| &w.after)),
            heading_rmse: ErrorSummary::of(&cat(|w| &w.heading)).rmse,
            stride_rmse: ErrorSummary::of(&cat(|w| &w.stride)).rmse,
        }
    }

    /// Relative reduction of the mean error by tracking.
    pub fn improvement(&self) -> f64 {
        (self.before.mean - self.after.mean) / self.before.mean
    }
}

/// Sanitized, denoised reference maps from the survey on day 0.
pub fn reference_maps(field: &CsiField, cfg: &PipelineConfig) -> Result<(MapSequence, DenoiseSummary)> {
    let grid = field.config().grid;
    let raw = field.reference_dataset(0.0, 0);
    let clean = sanitize_all(&raw, &field.config().layout, &cfg.sanitize)?;
    let summary = denoise_by_cell(&clean, &grid, &cfg.denoise)?;
    let m = common_depth(&summary.retained, &grid);
    let maps = build_map_sequence(&summary.retained, &grid, m)?;
    Ok((maps, summary))
}

/// Location sequences for the configured model kind.
pub fn location_sequences(maps: &MapSequence, cfg: &PipelineConfig) -> Result<Vec<SequenceSample>> {
    let t = cfg.model.sequence_length;
    match cfg.model.kind {
        ModelKind::CnnLstm => proposal_sequences(maps, &cfg.proposals, t, cfg.dataset.sequence_stride),
        ModelKind::LstmOnly => fingerprint_sequences(maps, t, cfg.dataset.sequence_stride),
    }
}

/// Number of null sequences to pair with `n_location` location sequences.
pub fn null_count(n_location: usize, cfg: &PipelineConfig) -> usize {
    (cfg.dataset.null_share * n_location as f64 / cfg.field.grid.n_cells() as f64).round() as usize
}

/// Raw survey observations outside the grid for the null class.
pub fn survey_null_observations(field: &CsiField, cfg: &PipelineConfig, spots: usize) -> Vec<CsiObservation> {
    let cells = field.config().grid.n_cells() as i64;
    let t0 = cells * field.config().m as i64 * field.config().interval_ms;
    null_observations(
        field,
        0.0,
        spots,
        cfg.model.sequence_length,
        cfg.dataset.null_distance,
        t0,
        field.config().interval_ms,
        cfg.seed ^ 0x0_4011,
    )
}

/// Trains with the configured budget.
pub fn fit(samples: &[SequenceSample], cfg: &PipelineConfig) -> Result<(Model, TrainReport)> {
    let mut params = cfg.train.clone();
    if let Some(updates) = cfg.experiment.train_updates {
        let held_out = (samples.len() as f64 * params.validation_fraction).floor() as usize;
        let per_epoch = (samples.len() - held_out).div_ceil(params.batch_size).max(1);
        params.epochs = updates.div_ceil(per_epoch);
    }
    let mut model = Model::init(cfg.model_config(), params.seed)?;
    let report = train(&mut model, samples, &params)?;
    Ok((model, report))
}

/// Survey, sequence building and training in one go.
pub fn train_model(field: &CsiField, cfg: &PipelineConfig) -> Result<(Model, TrainReport)> {
    cfg.dataset.validate()?;
    let (maps, _) = reference_maps(field, cfg)?;
    let mut samples = location_sequences(&maps, cfg)?;
    let raw_null = survey_null_observations(field, cfg, null_count(samples.len(), cfg));
    let null = sanitize_all(&raw_null, &field.config().layout, &cfg.sanitize)?;
    samples.extend(null_sequences(&null, &field.config().grid, cfg.model.sequence_length, cfg.input_warp()));
    fit(&samples, cfg)
}

/// One simulated test walk: raw observations, position labels and gait
/// ground truth.
pub struct TestWalk {
    pub raw: Vec<CsiObservation>,
    pub truth: Vec<GroundTruthLabel>,
    pub gait: Vec<GroundTruthTick>,
}

/// Walk `index` of the test set: a random start inside the grid, steering
/// to stay in it, observed on the test day.
pub fn test_walk(field: &CsiField, cfg: &PipelineConfig, index: usize) -> Result<TestWalk> {
    let grid = field.config().grid;
    let bbox = grid.bounding_box();
    let seed = cfg.walk.seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = cfg.walk.margin.min(0.25 * (bbox.2 - bbox.0).min(bbox.3 - bbox.1));
    let start = (
        rng.random_range(bbox.0 + margin..=bbox.2 - margin),
        rng.random_range(bbox.1 + margin..=bbox.3 - margin),
    );
    let walk_cfg = WalkSimConfig { start, area: Some(bbox), seed, ..cfg.walk.clone() };
    let walk = simulate_walk(&walk_cfg)?;
    let (raw, truth) = walk_to_observations(&walk, field, cfg.experiment.test_day, seed ^ 0x7e57);
    Ok(TestWalk { raw, truth, gait: walk.ticks })
}

/// The field test walks observe: the survey field, with the test noise.
pub fn test_field(field: &CsiField, cfg: &PipelineConfig) -> Result<CsiField> {
    match cfg.experiment.test_noise_sd {
        Some(noise_sd) => CsiField::generate(&CsiFieldConfig { noise_sd, ..field.config().clone() }),
        None => Ok(field.clone()),
    }
}

/// Localizes the configured number of test walks with `model` and scores
/// them.
pub fn evaluate_model(model: &Model, field: &CsiField, cfg: &PipelineConfig) -> Result<(EvalReport, Vec<WalkErrors>)> {
    let grid = field.config().grid;
    let stages = cfg.stages();
    let field = &test_field(field, cfg)?;
    let walks = (0..cfg.experiment.walks)
        .map(|i| {
            let w = test_walk(field, cfg, i)?;
            let observations = sanitize_all(&w.raw, &field.config().layout, &cfg.sanitize)?;
            let loc = localize(model, &observations, &grid, &stages)?;
            score(&loc, &w.truth, Some(&w.gait), &grid)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_walks(&walks), walks))
}

/// Proposal sizes up to `max_size`.
pub fn proposals_up_to(max_size: usize, base: &ProposalConfig) -> ProposalConfig {
    ProposalConfig { sizes: (1..=max_size).collect(), ..base.clone() }
}

/// One row of the parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell_size_m: f64,
    /// Largest proposal side, cells.
    pub window: usize,
    pub speed_mps: f64,
    pub before_mean_m: f64,
    pub after_mean_m: f64,
    pub before_rmse_m: f64,
    pub after_rmse_m: f64,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub cell_sizes_m: Vec<f64>,
    pub windows: Vec<usize>,
    pub speeds_mps: Vec<f64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self { cell_sizes_m: vec![1.0, 2.0], windows: vec![1, 2, 3], speeds_mps: vec![1.0, 3.0] }
    }
}

/// `cfg` with the grid re-cut into cells of `cell_size_m` over the same area.
pub fn with_cell_size(cfg: &PipelineConfig, cell_size_m: f64) -> Result<PipelineConfig> {
    let g = cfg.field.grid;
    let cells = |n: usize| ((n as f64 * g.cell_size_m / cell_size_m).round() as usize).max(1);
    let grid = GridSpec::new(cells(g.width), cells(g.height), cell_size_m, g.origin)?;
    let mut out = cfg.clone();
    out.field.grid = grid;
    Ok(out)
}

/// `cfg` with test walks at `speed_mps`. The step period shrinks at high
/// speed so the stride stays within the gait bounds.
pub fn with_speed(cfg: &PipelineConfig, speed_mps: f64) -> PipelineConfig {
    let mut out = cfg.clone();
    out.walk.speed_mean = speed_mps;
    out.walk.speed_max = out.walk.speed_max.max(speed_mps);
    let stride_cap = 0.8 * cfg.walk.bounds.stride_max;
    out.walk.period_mean = cfg.walk.period_mean.min(2.0 * stride_cap / speed_mps);
    out
}

/// Trains one CNN-LSTM per cell size and window and evaluates it at every
/// speed. Rows come out in axis order.
pub fn sweep(cfg: &PipelineConfig, axes: &SweepAxes) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &cell in &axes.cell_sizes_m {
        let cell_cfg = with_cell_size(cfg, cell)?;
        let field = CsiField::generate(&cell_cfg.field)?;
        for &window in &axes.windows {
            let mut run = cell_cfg.clone();
            run.model.kind = ModelKind::CnnLstm;
            run.proposals = proposals_up_to(window, &cfg.proposals);
            run.validate()?;
            let (model, _) = train_model(&field, &run)?;
            for &speed in &axes.speeds_mps {
                let run = with_speed(&run, speed);
                run.walk.validate()?;
                let (report, _) = evaluate_model(&model, &field, &run)?;
                log::info!("cell {cell} m, window {window}, {speed} m/s: {:.3} -> {:.3}", report.before.mean, report.after.mean);
                rows.push(SweepRow {
                    cell_size_m: cell,
                    window,
                    speed_mps: speed,
                    before_mean_m: report.before.mean,
                    after_mean_m: report.after.mean,
                    before_rmse_m: report.before.rmse,
                    after_rmse_m: report.after.rmse,
                    fallbacks: report.fallbacks,
                });
            }
        }
    }
    Ok(rows)
}
