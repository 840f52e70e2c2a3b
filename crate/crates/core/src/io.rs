//! File formats that let the stages run one at a time.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::csi::{sanitize_observation, ChannelLayout, CsiObservation, Rejection, SanitizeConfig};
use crate::error::{Error, Result};
use crate::eval::{ErrorSummary, EvalReport, SweepRow};
use crate::fingerprint::{FingerprintMap, GridSpec, MapSequence};
use crate::hypothesis::{LocationUpdate, TrajectoryHypothesis};
use crate::nn::{BeliefVector, Model};
use crate::sim::{GroundTruthLabel, GroundTruthTick};
use crate::walk::{Estimate, PedestrianState, SelectedTrajectory, TrackOutcome, TrackResult};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so readers never see half a file.
fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: line_no, message: e.to_string() })
}

/// Non-empty lines with 1-based line numbers.
fn json_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn to_json_line<T: Serialize>(value: &T, out: &mut String) -> Result<()> {
    out.push_str(&serde_json::to_string(value)?);
    out.push('\n');
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationHeader {
    layout: ChannelLayout,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    raw: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationRecord {
    t_ms: i64,
    x: Option<f64>,
    y: Option<f64>,
    phases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFile {
    pub layout: ChannelLayout,
    /// Phases are as measured and still need sanitizing.
    pub raw: bool,
    pub observations: Vec<CsiObservation>,
}

impl ObservationFile {
    /// Sanitizes raw phases per antenna pair; already sanitized files pass
    /// through unchanged.
    pub fn into_sanitized(self, cfg: &SanitizeConfig) -> Result<Vec<CsiObservation>> {
        if !self.raw {
            return Ok(self.observations);
        }
        let indices = self.layout.default_subcarrier_indices();
        self.observations
            .into_iter()
            .map(|o| Ok(CsiObservation::new(o.t_ms, o.location, sanitize_observation(&o.phases, &self.layout, &indices, cfg)?)))
            .collect()
    }
}

pub fn write_observations(path: &Path, layout: ChannelLayout, raw: bool, observations: &[CsiObservation]) -> Result<()> {
    let mut out = String::new();
    to_json_line(&ObservationHeader { layout, raw }, &mut out)?;
    for o in observations {
        let (x, y) = o.location.map_or((None, None), |(x, y)| (Some(x), Some(y)));
        to_json_line(&ObservationRecord { t_ms: o.t_ms, x, y, phases: o.phases.clone() }, &mut out)?;
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_observations(path: &Path) -> Result<ObservationFile> {
    let lines = json_lines(path)?;
    let Some((first_no, first)) = lines.first() else {
        return Err(Error::Parse { path: path.to_path_buf(), line: 1, message: "missing layout header".into() });
    };
    let header: ObservationHeader = parse_line(path, *first_no, first)?;
    let mut observations = Vec::with_capacity(lines.len() - 1);
    for (no, line) in &lines[1..] {
        let r: ObservationRecord = parse_line(path, *no, line)?;
        let location = match (r.x, r.y) {
            (Some(x), Some(y)) => Some((x, y)),
            (None, None) => None,
            _ => return Err(Error::Parse { path: path.to_path_buf(), line: *no, message: "x and y must both be set or both null".into() }),
        };
        let o = CsiObservation::new(r.t_ms, location, r.phases);
        o.validate(&header.layout).map_err(|e| Error::Parse { path: path.to_path_buf(), line: *no, message: e.to_string() })?;
        observations.push(o);
    }
    Ok(ObservationFile { layout: header.layout, raw: header.raw, observations })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapMeta {
    grid: GridSpec,
    channels: usize,
    m: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapRecord {
    index: usize,
    times: Vec<i64>,
    pixels: Vec<Vec<f64>>,
}

pub const MAP_META: &str = "meta.json";
pub const MAP_LINES: &str = "maps.jsonl";

pub fn write_maps(dir: &Path, maps: &MapSequence) -> Result<()> {
    maps.validate()?;
    let first = maps.maps.first().ok_or_else(|| Error::InvalidInput("no maps to write".into()))?;
    let meta = MapMeta { grid: first.grid, channels: first.channels(), m: maps.len() };
    write_bytes(&dir.join(MAP_META), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    let mut out = String::new();
    for map in &maps.maps {
        to_json_line(&MapRecord { index: map.index, times: map.times.clone(), pixels: map.pixels.clone() }, &mut out)?;
    }
    write_bytes(&dir.join(MAP_LINES), out.as_bytes())
}

pub fn read_maps(dir: &Path) -> Result<MapSequence> {
    let meta_path = dir.join(MAP_META);
    let meta: MapMeta = parse_line(&meta_path, 1, &read_text(&meta_path)?)?;
    let lines_path = dir.join(MAP_LINES);
    let maps = json_lines(&lines_path)?
        .into_iter()
        .map(|(no, line)| {
            let r: MapRecord = parse_line(&lines_path, no, &line)?;
            Ok(FingerprintMap { index: r.index, grid: meta.grid, pixels: r.pixels, times: r.times })
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = MapSequence { maps };
    if seq.len() != meta.m || seq.maps.first().is_some_and(|m| m.channels() != meta.channels) {
        return Err(Error::ShapeMismatch(format!("{} disagrees with {}", lines_path.display(), meta_path.display())));
    }
    seq.validate()?;
    Ok(seq)
}

pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    write_bytes(path, model.to_json()?.as_bytes())
}

pub fn read_model(path: &Path) -> Result<Model> {
    Model::from_json(&read_text(path)?)
}

/// One belief vector with its timestamp and the size of the window behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefRecord {
    pub t: usize,
    pub t_ms: i64,
    pub native_size: usize,
    pub probs: Vec<f64>,
}

impl BeliefRecord {
    pub fn belief(&self) -> BeliefVector {
        BeliefVector { t: self.t, probs: self.probs.clone() }
    }
}

pub fn write_beliefs(path: &Path, beliefs: &[BeliefRecord]) -> Result<()> {
    let mut out = String::new();
    for b in beliefs {
        to_json_line(b, &mut out)?;
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_beliefs(path: &Path) -> Result<Vec<BeliefRecord>> {
    json_lines(path)?.into_iter().map(|(no, line)| parse_line(path, no, &line)).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}

fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), line: 0, message: format!("{other:?}") },
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                Error::Parse { path: path.to_path_buf(), line, message: e.to_string() }
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct HypothesisRow {
    b: usize,
    seq: usize,
    t_ms: i64,
    x: f64,
    y: f64,
    c: f64,
}

pub fn write_hypotheses(path: &Path, hypotheses: &[TrajectoryHypothesis]) -> Result<()> {
    write_csv(
        path,
        hypotheses.iter().flat_map(|h| {
            h.updates.iter().map(|u| HypothesisRow { b: h.id, seq: u.t_index, t_ms: u.t_ms, x: u.x, y: u.y, c: u.c })
        }),
    )
}

/// Reads hypotheses written by [`write_hypotheses`]. Updates at even
/// positions are the sampled ones; the others are interpolated.
pub fn read_hypotheses(path: &Path, grid: &GridSpec) -> Result<Vec<TrajectoryHypothesis>> {
    let rows: Vec<HypothesisRow> = read_csv(path)?;
    let mut out: Vec<TrajectoryHypothesis> = Vec::new();
    for r in rows {
        if out.last().is_none_or(|h| h.id != r.b) {
            out.push(TrajectoryHypothesis { id: r.b, updates: Vec::new(), mean_confidence: 0.0, classes: Vec::new() });
        }
        let h = out.last_mut().unwrap();
        if r.seq != h.updates.len() {
            return Err(Error::Parse { path: path.to_path_buf(), line: 0, message: format!("hypothesis {} is not in sequence order", r.b) });
        }
        h.updates.push(LocationUpdate { t_index: r.seq, t_ms: r.t_ms, x: r.x, y: r.y, c: r.c });
    }
    for h in &mut out {
        let sampled: Vec<&LocationUpdate> = h.updates.iter().step_by(2).collect();
        h.mean_confidence = sampled.iter().map(|u| u.c).sum::<f64>() / sampled.len() as f64;
        h.classes = sampled.iter().map(|u| grid.class_at(u.x, u.y)).collect();
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    b: usize,
    tau_ms: i64,
    x: f64,
    y: f64,
    theta: f64,
    stride: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RejectionRow {
    b: usize,
    reason: String,
    update_index: usize,
}

/// Estimates of every surviving hypothesis, and the rejection log.
pub fn write_tracks(trajectories: &Path, rejections: &Path, results: &[TrackResult]) -> Result<()> {
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for r in results {
        match &r.outcome {
            TrackOutcome::Converged { estimates } => rows.extend(estimates.iter().map(|e| TrajectoryRow {
                b: r.id,
                tau_ms: e.tau_ms,
                x: e.x,
                y: e.y,
                theta: e.theta,
                stride: e.stride,
            })),
            TrackOutcome::Rejected { reason, update_index } => {
                rejected.push(RejectionRow { b: r.id, reason: reason.as_str().into(), update_index: *update_index })
            }
        }
    }
    write_csv_with_header(trajectories, &["b", "tau_ms", "x", "y", "theta", "stride"], rows)?;
    write_csv_with_header(rejections, &["b", "reason", "update_index"], rejected)
}

#[derive(Debug, Serialize, Deserialize)]
struct SelectedRow {
    b: usize,
    mean_confidence: f64,
    tau_ms: i64,
    x: f64,
    y: f64,
    theta: f64,
    stride: f64,
    col: usize,
    row: usize,
}

/// The selected trajectory with every estimate's snapped cell. Nothing
/// selected gives a header-only file.
pub fn write_selected(path: &Path, selected: Option<&SelectedTrajectory>) -> Result<()> {
    let rows = selected.into_iter().flat_map(|s| {
        s.estimates.iter().zip(&s.snapped_cells).map(|(e, &(col, row))| SelectedRow {
            b: s.hypothesis_id,
            mean_confidence: s.mean_confidence,
            tau_ms: e.tau_ms,
            x: e.x,
            y: e.y,
            theta: e.theta,
            stride: e.stride,
            col,
            row,
        })
    });
    write_csv_with_header(path, &["b", "mean_confidence", "tau_ms", "x", "y", "theta", "stride", "col", "row"], rows)
}

pub fn read_selected(path: &Path) -> Result<Option<SelectedTrajectory>> {
    let rows: Vec<SelectedRow> = read_csv(path)?;
    let Some(first) = rows.first() else { return Ok(None) };
    Ok(Some(SelectedTrajectory {
        hypothesis_id: first.b,
        mean_confidence: first.mean_confidence,
        estimates: rows
            .iter()
            .map(|r| Estimate { tau_ms: r.tau_ms, x: r.x, y: r.y, theta: r.theta, stride: r.stride })
            .collect(),
        snapped_cells: rows.iter().map(|r| (r.col, r.row)).collect(),
    }))
}

pub fn write_truth(path: &Path, truth: &[GroundTruthLabel]) -> Result<()> {
    write_csv(path, truth)
}

pub fn read_truth(path: &Path) -> Result<Vec<GroundTruthLabel>> {
    read_csv(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct GaitRow {
    t_ms: i64,
    l_x: f64,
    l_y: f64,
    r_x: f64,
    r_y: f64,
    theta: f64,
    gamma: f64,
    stride: f64,
    step_period: f64,
}

pub fn write_gait(path: &Path, ticks: &[GroundTruthTick]) -> Result<()> {
    write_csv(
        path,
        ticks.iter().map(|t| {
            let s = t.state;
            GaitRow { t_ms: t.t_ms, l_x: s.l_x, l_y: s.l_y, r_x: s.r_x, r_y: s.r_y, theta: s.theta, gamma: s.gamma, stride: s.stride, step_period: s.step_period }
        }),
    )
}

pub fn read_gait(path: &Path) -> Result<Vec<GroundTruthTick>> {
    let rows: Vec<GaitRow> = read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| GroundTruthTick {
            t_ms: r.t_ms,
            state: PedestrianState {
                l_x: r.l_x,
                l_y: r.l_y,
                r_x: r.r_x,
                r_y: r.r_y,
                theta: r.theta,
                gamma: r.gamma,
                stride: r.stride,
                step_period: r.step_period,
            },
        })
        .collect())
}

pub fn write_rejected_observations(path: &Path, rejected: &[(usize, Rejection)]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        class: usize,
        index: usize,
        t_ms: i64,
        channel: usize,
        deviation: f64,
        bound: f64,
    }
    write_csv_with_header(
        path,
        &["class", "index", "t_ms", "channel", "deviation", "bound"],
        rejected.iter().map(|(class, r)| Row {
            class: *class,
            index: r.index,
            t_ms: r.t_ms,
            channel: r.channel,
            deviation: r.deviation,
            bound: r.bound,
        }),
    )
}

#[derive(Debug, Serialize)]
struct ReportRow {
    walks: usize,
    fallbacks: usize,
    samples: usize,
    before_mean_m: f64,
    before_rmse_m: f64,
    after_mean_m: f64,
    after_rmse_m: f64,
    improvement: f64,
    heading_rmse_rad: f64,
    stride_rmse_m: f64,
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        let ErrorSummary { count, mean: before_mean_m, rmse: before_rmse_m } = r.before;
        Self {
            walks: r.walks,
            fallbacks: r.fallbacks,
            samples: count,
            before_mean_m,
            before_rmse_m,
            after_mean_m: r.after.mean,
            after_rmse_m: r.after.rmse,
            improvement: r.improvement(),
            heading_rmse_rad: r.heading_rmse,
            stride_rmse_m: r.stride_rmse,
        }
    }
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_csv(path, [ReportRow::from(report)])
}

/// Both CDFs in one file: `stage, error_m, fraction`.
pub fn write_cdf(path: &Path, before: &[(f64, f64)], after: &[(f64, f64)]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        stage: &'static str,
        error_m: f64,
        fraction: f64,
    }
    let rows = before
        .iter()
        .map(|&(error_m, fraction)| Row { stage: "before", error_m, fraction })
        .chain(after.iter().map(|&(error_m, fraction)| Row { stage: "after", error_m, fraction }));
    write_csv(path, rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path)
}

/// Conventional names inside a simulated data directory.
pub struct DataLayout {
    pub dir: PathBuf,
}

impl DataLayout {
    pub fn reference(&self) -> PathBuf {
        self.dir.join("reference.jsonl")
    }

    pub fn null(&self) -> PathBuf {
        self.dir.join("null.jsonl")
    }

    pub fn walk(&self, i: usize) -> PathBuf {
        self.dir.join(format!("walk_{i:03}.jsonl"))
    }

    pub fn truth(&self, i: usize) -> PathBuf {
        self.dir.join(format!("walk_{i:03}_truth.csv"))
    }

    pub fn gait(&self, i: usize) -> PathBuf {
        self.dir.join(format!("walk_{i:03}_gait.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ChannelLayout {
        ChannelLayout::new(1, 2, 3).unwrap()
    }

    #[test]
    fn observations_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        let obs = vec![
            CsiObservation::new(0, Some((0.1, 1.0 / 3.0)), vec![0.1, -2.5, 1e-17, std::f64::consts::PI, 0.0, -0.0]),
            CsiObservation::new(200, None, vec![1.0; 6]),
        ];
        write_observations(&path, layout(), true, &obs).unwrap();
        let back = read_observations(&path).unwrap();
        assert!(back.raw);
        assert_eq!(back.layout, layout());
        assert_eq!(back.observations, obs);
    }

    #[test]
    fn malformed_observation_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"layout\":{\"n_tx\":1,\"n_rx\":2,\"n_subcarriers\":3}}\n{\"t_ms\":0,\"x\":null,\"y\":null,\"phases\":[1,2]}\n").unwrap();
        match read_observations(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = read_observations(Path::new("/nonexistent/obs.jsonl")).unwrap_err();
        assert_eq!(err.kind(), "io");
    }

    #[test]
    fn hypotheses_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let grid = GridSpec::new(3, 3, 1.0, (0.0, 0.0)).unwrap();
        let u = |i, t, x, y, c| LocationUpdate { t_index: i, t_ms: t, x, y, c };
        let h = TrajectoryHypothesis {
            id: 4,
            updates: vec![u(0, 0, 0.5, 0.5, 0.7), u(1, 1000, 1.0, 0.5, 0.55), u(2, 2000, 1.5, 0.5, 0.4)],
            mean_confidence: (0.7 + 0.4) / 2.0,
            classes: vec![grid.class_at(0.5, 0.5), grid.class_at(1.5, 0.5)],
        };
        write_hypotheses(&path, std::slice::from_ref(&h)).unwrap();
        assert_eq!(read_hypotheses(&path, &grid).unwrap(), vec![h]);
    }
}
