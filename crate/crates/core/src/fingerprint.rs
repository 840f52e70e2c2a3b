//! Time-ordered fingerprint maps and sliding-window proposals.
//!
//! A [`FingerprintMap`] is a `W x H` image whose pixel `(col, row)` holds the
//! `C`-channel fingerprint observed at that reference cell. Map `i` of a
//! [`MapSequence`] takes the `i`-th observation (in time order) of every cell,
//! so pixel histories are strictly increasing in time.
//!
//! Proposals are square windows of the map, `s x s` cells with stride 1,
//! warped spatially to a common `U x V x C` tensor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::csi::CsiObservation;
use crate::error::{Error, Result};

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub cell_size_m: f64,
    /// Center of cell (0, 0), meters.
    pub origin: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { width: 6, height: 6, cell_size_m: 1.0, origin: (0.0, 0.0) }
    }
}

impl GridSpec {
    pub fn new(width: usize, height: usize, cell_size_m: f64, origin: (f64, f64)) -> Result<Self> {
        let grid = Self { width, height, cell_size_m, origin };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("grid", "width and height must be positive"));
        }
        if !(self.cell_size_m > 0.0 && self.cell_size_m.is_finite()) {
            return Err(Error::config("grid.cell_size_m", "must be > 0"));
        }
        Ok(())
    }

    /// Number of location classes `L = W * H`.
    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    /// Class index reserved for "no location".
    pub fn null_class(&self) -> usize {
        self.n_cells()
    }

    pub fn class_of(&self, (col, row): Cell) -> usize {
        row * self.width + col
    }

    pub fn cell_of_class(&self, class: usize) -> Option<Cell> {
        (class < self.n_cells()).then(|| (class % self.width, class / self.width))
    }

    pub fn cell_center(&self, (col, row): Cell) -> (f64, f64) {
        (
            self.origin.0 + col as f64 * self.cell_size_m,
            self.origin.1 + row as f64 * self.cell_size_m,
        )
    }

    fn fractional_index(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin.0) / self.cell_size_m, (y - self.origin.1) / self.cell_size_m)
    }

    /// Cell whose center is nearest to `(x, y)`, or `None` when that nearest
    /// center would lie outside the grid.
    pub fn nearest_cell(&self, x: f64, y: f64) -> Option<Cell> {
        let (fx, fy) = self.fractional_index(x, y);
        let (c, r) = (fx.round(), fy.round());
        let inside = c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height;
        inside.then_some((c as usize, r as usize))
    }

    /// Nearest cell, clamped onto the grid.
    pub fn snap(&self, x: f64, y: f64) -> Cell {
        let (fx, fy) = self.fractional_index(x, y);
        let clamp = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
        (clamp(fx, self.width), clamp(fy, self.height))
    }

    /// Axis-aligned extent covered by the cells: `(min_x, min_y, max_x, max_y)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let half = self.cell_size_m / 2.0;
        let (x1, y1) = self.cell_center((self.width - 1, self.height - 1));
        (self.origin.0 - half, self.origin.1 - half, x1 + half, y1 + half)
    }

    pub fn class_at(&self, x: f64, y: f64) -> usize {
        self.nearest_cell(x, y).map_or(self.null_class(), |cell| self.class_of(cell))
    }
}

/// Dense `rows x cols x channels` tensor, channel fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self { rows, cols, channels, data: vec![0.0; rows * cols * channels] }
    }

    pub fn from_pixel(pixel: &[f64]) -> Self {
        Self { rows: 1, cols: 1, channels: pixel.len(), data: pixel.to_vec() }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.cols + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintMap {
    pub index: usize,
    pub grid: GridSpec,
    /// Row-major, one `C`-vector per cell in class order.
    pub pixels: Vec<Vec<f64>>,
    /// Source observation time of each pixel.
    pub times: Vec<i64>,
}

impl FingerprintMap {
    pub fn channels(&self) -> usize {
        self.pixels.first().map_or(0, Vec::len)
    }

    pub fn pixel(&self, cell: Cell) -> &[f64] {
        &self.pixels[self.grid.class_of(cell)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.grid.n_cells() || self.times.len() != self.grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "map {} has {} pixels for {} cells",
                self.index,
                self.pixels.len(),
                self.grid.n_cells()
            )));
        }
        let c = self.channels();
        if c == 0 || self.pixels.iter().any(|p| p.len() != c) {
            return Err(Error::ShapeMismatch(format!("map {} has ragged pixels", self.index)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapSequence {
    pub maps: Vec<FingerprintMap>,
}

impl MapSequence {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Checks completeness and the per-cell time ordering across maps.
    pub fn validate(&self) -> Result<()> {
        for map in &self.maps {
            map.validate()?;
        }
        for pair in self.maps.windows(2) {
            if pair[0].grid != pair[1].grid || pair[0].channels() != pair[1].channels() {
                return Err(Error::ShapeMismatch("maps disagree on grid or channels".into()));
            }
            if let Some(k) = (0..pair[0].times.len()).find(|&k| pair[0].times[k] >= pair[1].times[k]) {
                let cell = pair[0].grid.cell_of_class(k).unwrap_or_default();
                return Err(Error::InvalidInput(format!(
                    "cell {cell:?} is not time-ordered between maps {} and {}",
                    pair[0].index, pair[1].index
                )));
            }
        }
        Ok(())
    }

    /// Inverse of [`build_map_sequence`]: every pixel as `(cell, t_ms, phases)`.
    pub fn flatten(&self) -> Vec<(Cell, i64, Vec<f64>)> {
        let mut out = Vec::new();
        for map in &self.maps {
            for (k, (pixel, &t)) in map.pixels.iter().zip(&map.times).enumerate() {
                let cell = map.grid.cell_of_class(k).expect("class in range");
                out.push((cell, t, pixel.clone()));
            }
        }
        out
    }
}

/// Groups located observations by nearest reference cell, orders each cell's
/// history by time (ties keep input order), and stacks the first `m` of every
/// cell into `m` maps.
pub fn build_map_sequence(observations: &[CsiObservation], grid: &GridSpec, m: usize) -> Result<MapSequence> {
    grid.validate()?;
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    let mut per_cell: Vec<Vec<&CsiObservation>> = vec![Vec::new(); grid.n_cells()];
    let mut channels = None;
    for obs in observations {
        let (x, y) = obs
            .location
            .ok_or_else(|| Error::InvalidInput(format!("observation at t={} has no location", obs.t_ms)))?;
        let cell = grid.nearest_cell(x, y).ok_or(Error::OffGrid { x, y })?;
        match channels {
            None => channels = Some(obs.phases.len()),
            Some(c) if c != obs.phases.len() => {
                return Err(Error::LengthMismatch { expected: c, actual: obs.phases.len() })
            }
            _ => {}
        }
        per_cell[grid.class_of(cell)].push(obs);
    }

    for (k, history) in per_cell.iter_mut().enumerate() {
        let cell = grid.cell_of_class(k).expect("class in range");
        if history.len() < m {
            return Err(Error::InsufficientObservations { col: cell.0, row: cell.1, found: history.len(), needed: m });
        }
        history.sort_by_key(|o| o.t_ms);
        if history[..m].windows(2).any(|w| w[0].t_ms == w[1].t_ms) {
            log::warn!("cell {cell:?} has duplicate timestamps; keeping input order");
        }
    }

    let maps = (0..m)
        .map(|i| FingerprintMap {
            index: i,
            grid: *grid,
            pixels: per_cell.iter().map(|h| h[i].phases.clone()).collect(),
            times: per_cell.iter().map(|h| h[i].t_ms).collect(),
        })
        .collect();
    Ok(MapSequence { maps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMethod {
    #[default]
    Nearest,
    Bilinear,
}

/// Which of the four central cells labels an even-sized window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvenLabel {
    #[default]
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl EvenLabel {
    pub const ALL: [EvenLabel; 4] = [EvenLabel::TopLeft, EvenLabel::TopRight, EvenLabel::BottomLeft, EvenLabel::BottomRight];

    fn offset(self) -> (usize, usize) {
        match self {
            EvenLabel::TopLeft => (0, 0),
            EvenLabel::TopRight => (1, 0),
            EvenLabel::BottomLeft => (0, 1),
            EvenLabel::BottomRight => (1, 1),
        }
    }
}

/// Offset of the labelled cell from the window's anchor (top-left) cell.
pub fn label_offset(size: usize, rule: EvenLabel) -> (usize, usize) {
    if size % 2 == 1 {
        (size / 2, size / 2)
    } else {
        let (dc, dr) = rule.offset();
        (size / 2 - 1 + dc, size / 2 - 1 + dr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub sizes: Vec<usize>,
    pub warp_to: (usize, usize),
    pub warp: WarpMethod,
    pub even_label: EvenLabel,
    /// Emit one proposal per labelling of every even-sized window.
    pub all_even_labels: bool,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { sizes: vec![1, 2, 3], warp_to: (3, 3), warp: WarpMethod::Nearest, even_label: EvenLabel::TopLeft, all_even_labels: false }
    }
}

impl ProposalConfig {
    pub fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub anchor: Cell,
    pub native_size: usize,
    pub data: Tensor3,
    /// Location class; `None` for unlabelled query proposals.
    pub label: Option<usize>,
}

/// Spatially resizes an `s x s` window (given as row-major pixel slices) to
/// `rows x cols`; channels are untouched.
pub fn warp_window(pixels: &[&[f64]], size: usize, (rows, cols): (usize, usize), method: WarpMethod) -> Tensor3 {
    let channels = pixels[0].len();
    let mut out = Tensor3::zeros(rows, cols, channels);
    match method {
        WarpMethod::Nearest => {
            for u in 0..rows {
                let src_r = u * size / rows;
                for v in 0..cols {
                    let src_c = v * size / cols;
                    out.pixel_mut(u, v).copy_from_slice(pixels[src_r * size + src_c]);
                }
            }
        }
        WarpMethod::Bilinear => {
            let coord = |i: usize, n: usize| if n > 1 { i as f64 * (size - 1) as f64 / (n - 1) as f64 } else { 0.0 };
            for u in 0..rows {
                let fr = coord(u, rows);
                let (r0, wr) = (fr.floor() as usize, fr - fr.floor());
                let r1 = (r0 + 1).min(size - 1);
                for v in 0..cols {
                    let fc = coord(v, cols);
                    let (c0, wc) = (fc.floor() as usize, fc - fc.floor());
                    let c1 = (c0 + 1).min(size - 1);
                    let dst = out.pixel_mut(u, v);
                    for (ch, d) in dst.iter_mut().enumerate() {
                        let top = pixels[r0 * size + c0][ch] * (1.0 - wc) + pixels[r0 * size + c1][ch] * wc;
                        let bottom = pixels[r1 * size + c0][ch] * (1.0 - wc) + pixels[r1 * size + c1][ch] * wc;
                        *d = top * (1.0 - wr) + bottom * wr;
                    }
                }
            }
        }
    }
    out
}

/// Every stride-1 window of each requested size, warped to `cfg.warp_to`.
/// Ordered by size, then anchor row, then anchor column.
pub fn extract_proposals(map: &FingerprintMap, cfg: &ProposalConfig) -> Result<Vec<Proposal>> {
    let grid = &map.grid;
    let limit = grid.width.min(grid.height);
    let mut out = Vec::new();
    for &s in &cfg.sizes {
        if s == 0 || s > limit {
            return Err(Error::WindowTooLarge { size: s, limit });
        }
        if s > cfg.warp_to.0 || s > cfg.warp_to.1 {
            return Err(Error::InvalidInput(format!("warp target {:?} smaller than window {s}", cfg.warp_to)));
        }
        let rules: &[EvenLabel] = if s % 2 == 0 && cfg.all_even_labels { &EvenLabel::ALL } else { std::slice::from_ref(&cfg.even_label) };
        for row in 0..=grid.height - s {
            for col in 0..=grid.width - s {
                let window: Vec<&[f64]> = (0..s)
                    .flat_map(|dr| (0..s).map(move |dc| (col + dc, row + dr)))
                    .map(|cell| map.pixel(cell))
                    .collect();
                let data = warp_window(&window, s, cfg.warp_to, cfg.warp);
                for &rule in rules {
                    let (dc, dr) = label_offset(s, rule);
                    out.push(Proposal {
                        anchor: (col, row),
                        native_size: s,
                        data: data.clone(),
                        label: Some(grid.class_of((col + dc, row + dr))),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// A test observation with the position the tracker last assigned to it.
#[derive(Debug, Clone, Copy)]
pub struct TestObservation<'a> {
    pub obs: &'a CsiObservation,
    pub estimate: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    /// Observations farther than this from the query time are ignored.
    pub window_ms: i64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { window_ms: 10_000 }
    }
}

/// Builds the largest window around `estimated_cell` whose every cell holds a
/// nearby-in-time test observation. The query observation is the one closest
/// to `t_ms`; it always fills the labelled cell. Without an estimated cell
/// the result is a 1x1 proposal.
pub fn query_proposal(
    observations: &[TestObservation<'_>],
    t_ms: i64,
    estimated_cell: Option<Cell>,
    grid: &GridSpec,
    proposals: &ProposalConfig,
    query: &QueryConfig,
) -> Result<Proposal> {
    let recent: Vec<&TestObservation<'_>> = observations
        .iter()
        .filter(|o| (o.obs.t_ms - t_ms).abs() <= query.window_ms)
        .collect();
    let current = recent
        .iter()
        .min_by_key(|o| (o.obs.t_ms - t_ms).abs())
        .ok_or(Error::NoRecentObservations)?;

    let one_by_one = || Proposal {
        anchor: estimated_cell.unwrap_or((0, 0)),
        native_size: 1,
        data: warp_window(&[&current.obs.phases], 1, proposals.warp_to, proposals.warp),
        label: None,
    };
    let Some(center) = estimated_cell else {
        return Ok(one_by_one());
    };

    // most recent-in-time observation per estimated cell
    let mut by_cell: BTreeMap<Cell, &TestObservation<'_>> = BTreeMap::new();
    for o in &recent {
        let Some(cell) = o.estimate.and_then(|(x, y)| grid.nearest_cell(x, y)) else { continue };
        let closer = by_cell
            .get(&cell)
            .is_none_or(|prev| (o.obs.t_ms - t_ms).abs() < (prev.obs.t_ms - t_ms).abs());
        if closer {
            by_cell.insert(cell, o);
        }
    }

    let mut sizes: Vec<usize> = proposals.sizes.iter().copied().filter(|&s| s > 1).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    for s in sizes {
        let (dc, dr) = label_offset(s, proposals.even_label);
        let (Some(col), Some(row)) = (center.0.checked_sub(dc), center.1.checked_sub(dr)) else { continue };
        if col + s > grid.width || row + s > grid.height {
            continue;
        }
        let window: Option<Vec<&[f64]>> = (0..s)
            .flat_map(|r| (0..s).map(move |c| (col + c, row + r)))
            .map(|cell| {
                if cell == center {
                    Some(current.obs.phases.as_slice())
                } else {
                    by_cell.get(&cell).map(|o| o.obs.phases.as_slice())
                }
            })
            .collect();
        if let Some(window) = window {
            return Ok(Proposal {
                anchor: (col, row),
                native_size: s,
                data: warp_window(&window, s, proposals.warp_to, proposals.warp),
                label: None,
            });
        }
    }
    Ok(one_by_one())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn located(t: i64, x: f64, y: f64, v: f64) -> CsiObservation {
        CsiObservation::new(t, Some((x, y)), vec![v, -v])
    }

    fn constant_map(grid: GridSpec, c: usize) -> FingerprintMap {
        FingerprintMap {
            index: 0,
            grid,
            pixels: (0..grid.n_cells()).map(|k| vec![k as f64; c]).collect(),
            times: vec![0; grid.n_cells()],
        }
    }

    #[test]
    fn grid_geometry() {
        let grid = GridSpec::default();
        assert_eq!(grid.n_cells(), 36);
        assert_eq!(grid.null_class(), 36);
        assert_eq!(grid.class_of((2, 3)), 20);
        assert_eq!(grid.cell_of_class(20), Some((2, 3)));
        assert_eq!(grid.nearest_cell(1.4, 0.2), Some((1, 0)));
        assert_eq!(grid.nearest_cell(-0.6, 0.0), None);
        assert_eq!(grid.snap(-3.0, 9.0), (0, 5));
        assert_eq!(grid.bounding_box(), (-0.5, -0.5, 5.5, 5.5));
        assert!(GridSpec::new(2, 2, 0.0, (0.0, 0.0)).is_err());
    }

    #[test]
    fn small_grid_sequence() {
        let grid = GridSpec::new(2, 2, 1.0, (0.0, 0.0)).unwrap();
        let mut obs = Vec::new();
        for i in 0..3 {
            for k in 0..4 {
                let (c, r) = grid.cell_of_class(k).unwrap();
                obs.push(located(100 * (3 - i as i64) + k as i64, c as f64, r as f64, (10 * k + i) as f64));
            }
        }
        let seq = build_map_sequence(&obs, &grid, 3).unwrap();
        assert_eq!(seq.len(), 3);
        seq.validate().unwrap();
        for k in 0..4 {
            let ts: Vec<i64> = seq.maps.iter().map(|m| m.times[k]).collect();
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn empty_cell_is_named() {
        let grid = GridSpec::default();
        let obs: Vec<_> = (0..36)
            .filter(|&k| k != 14)
            .map(|k| {
                let (c, r) = grid.cell_of_class(k).unwrap();
                located(k as i64, c as f64, r as f64, 0.0)
            })
            .collect();
        match build_map_sequence(&obs, &grid, 1) {
            Err(Error::InsufficientObservations { col: 2, row: 2, found: 0, needed: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn paper_scale_sequence() {
        let grid = GridSpec::default();
        let mut obs = Vec::with_capacity(14_400);
        for k in 0..36 {
            let (c, r) = grid.cell_of_class(k).unwrap();
            for i in 0..400 {
                obs.push(CsiObservation::new(i * 200, Some((c as f64, r as f64)), vec![0.0; 4]));
            }
        }
        assert_eq!(obs.len(), 14_400);
        assert_eq!(build_map_sequence(&obs, &grid, 400).unwrap().len(), 400);
    }

    #[test]
    fn off_grid_and_unlocated_rejected() {
        let grid = GridSpec::default();
        assert!(matches!(build_map_sequence(&[located(0, 9.0, 0.0, 0.0)], &grid, 1), Err(Error::OffGrid { .. })));
        let unlocated = CsiObservation::new(0, None, vec![0.0]);
        assert!(build_map_sequence(&[unlocated], &grid, 1).is_err());
    }

    #[test]
    fn six_by_six_proposal_count() {
        let map = constant_map(GridSpec::default(), 2);
        let props = extract_proposals(&map, &ProposalConfig::default()).unwrap();
        assert_eq!(props.len(), 36 + 25 + 16);
    }

    #[test]
    fn single_pixel_warps_to_constant() {
        let map = constant_map(GridSpec::default(), 3);
        let cfg = ProposalConfig { sizes: vec![1], ..Default::default() };
        let props = extract_proposals(&map, &cfg).unwrap();
        let p = &props[7];
        assert_eq!(p.data.shape(), (3, 3, 3));
        assert!(p.data.data.iter().all(|&v| v == 7.0));
        assert_eq!(p.label, Some(7));
    }

    #[test]
    fn three_by_three_is_identity_warp() {
        let map = constant_map(GridSpec::default(), 2);
        let cfg = ProposalConfig { sizes: vec![3], ..Default::default() };
        let props = extract_proposals(&map, &cfg).unwrap();
        let p = props.iter().find(|p| p.anchor == (2, 1)).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(p.data.pixel(r, c), map.pixel((2 + c, 1 + r)));
            }
        }
        assert_eq!(p.label, Some(map.grid.class_of((3, 2))));
    }

    #[test]
    fn even_labels() {
        let map = constant_map(GridSpec::default(), 1);
        let cfg = ProposalConfig { sizes: vec![2], ..Default::default() };
        let props = extract_proposals(&map, &cfg).unwrap();
        assert_eq!(props[0].label, Some(0));
        let all = ProposalConfig { sizes: vec![2], all_even_labels: true, ..Default::default() };
        let props = extract_proposals(&map, &all).unwrap();
        assert_eq!(props.len(), 100);
        let labels: Vec<_> = props[..4].iter().map(|p| p.label.unwrap()).collect();
        assert_eq!(labels, vec![0, 1, 6, 7]);
    }

    #[test]
    fn oversized_window_rejected() {
        let map = constant_map(GridSpec::new(3, 2, 1.0, (0.0, 0.0)).unwrap(), 1);
        let cfg = ProposalConfig { sizes: vec![3], ..Default::default() };
        assert!(matches!(extract_proposals(&map, &cfg), Err(Error::WindowTooLarge { size: 3, limit: 2 })));
    }

    #[test]
    fn bilinear_two_by_two() {
        let a = [0.0];
        let b = [2.0];
        let c = [4.0];
        let d = [6.0];
        let t = warp_window(&[&a, &b, &c, &d], 2, (3, 3), WarpMethod::Bilinear);
        assert_eq!(t.pixel(0, 0), &[0.0]);
        assert_eq!(t.pixel(0, 1), &[1.0]);
        assert_eq!(t.pixel(1, 1), &[3.0]);
        assert_eq!(t.pixel(2, 2), &[6.0]);
    }

    fn test_obs(cells: &[(Cell, i64)], grid: &GridSpec) -> Vec<CsiObservation> {
        cells.iter().map(|&(cell, t)| CsiObservation::new(t, None, vec![grid.class_of(cell) as f64])).collect()
    }

    #[test]
    fn query_without_estimate_is_one_by_one() {
        let grid = GridSpec::default();
        let obs = test_obs(&[((0, 0), 0)], &grid);
        let pool = [TestObservation { obs: &obs[0], estimate: None }];
        let p = query_proposal(&pool, 0, None, &grid, &ProposalConfig::default(), &QueryConfig::default()).unwrap();
        assert_eq!(p.native_size, 1);
        assert_eq!(p.data.shape(), (3, 3, 1));
    }

    #[test]
    fn query_grows_with_coverage() {
        let grid = GridSpec::default();
        let center = (2, 2);
        let mut cells: Vec<(Cell, i64)> = Vec::new();
        for dr in 0..3 {
            for dc in 0..3 {
                cells.push(((1 + dc, 1 + dr), 100 * (dr * 3 + dc) as i64));
            }
        }
        let obs = test_obs(&cells, &grid);
        let all: Vec<_> = obs
            .iter()
            .zip(&cells)
            .map(|(o, &(cell, _))| TestObservation { obs: o, estimate: Some(grid.cell_center(cell)) })
            .collect();
        let t_center = 400;
        let cfg = ProposalConfig::default();
        let q = QueryConfig::default();
        let p = query_proposal(&all, t_center, Some(center), &grid, &cfg, &q).unwrap();
        assert_eq!((p.native_size, p.anchor), (3, (1, 1)));
        assert_eq!(p.data.pixel(1, 1), &[grid.class_of(center) as f64]);

        // keep only the 2x2 block whose top-left is the center
        let block = [(2, 2), (3, 2), (2, 3), (3, 3)];
        let partial: Vec<_> = all
            .iter()
            .zip(&cells)
            .filter(|(_, (cell, _))| block.contains(cell) || *cell == (1, 1))
            .map(|(o, _)| *o)
            .collect();
        let p = query_proposal(&partial, t_center, Some(center), &grid, &cfg, &q).unwrap();
        assert_eq!((p.native_size, p.anchor), (2, (2, 2)));

        // outside the time window nothing is usable
        assert!(matches!(
            query_proposal(&all, 1_000_000, Some(center), &grid, &cfg, &q),
            Err(Error::NoRecentObservations)
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn proposal_count_closed_form(w in 1usize..=8, h in 1usize..=8, s in 1usize..=8) {
                prop_assume!(s <= w.min(h));
                let map = constant_map(GridSpec::new(w, h, 1.0, (0.0, 0.0)).unwrap(), 1);
                let cfg = ProposalConfig { sizes: vec![s], warp_to: (8, 8), ..Default::default() };
                let n = extract_proposals(&map, &cfg).unwrap().len();
                prop_assert_eq!(n, (w - s + 1) * (h - s + 1));
            }

            #[test]
            fn nearest_warp_introduces_no_values(s in 1usize..=4, extra in 0usize..3, vals in proptest::collection::vec(-5.0f64..5.0, 16)) {
                let u = s + extra;
                let pixels: Vec<Vec<f64>> = (0..s * s).map(|i| vec![vals[i], vals[i] * 2.0]).collect();
                let refs: Vec<&[f64]> = pixels.iter().map(Vec::as_slice).collect();
                let t = warp_window(&refs, s, (u, u), WarpMethod::Nearest);
                for r in 0..u {
                    for c in 0..u {
                        prop_assert!(pixels.iter().any(|p| p.as_slice() == t.pixel(r, c)));
                    }
                }
                // every source cell appears at least once
                for p in &pixels {
                    prop_assert!((0..u).any(|r| (0..u).any(|c| t.pixel(r, c) == p.as_slice())));
                }
            }

            #[test]
            fn build_then_flatten_is_lossless(w in 1usize..4, h in 1usize..4, m in 1usize..4, seed in 0u64..1000) {
                let grid = GridSpec::new(w, h, 1.0, (0.0, 0.0)).unwrap();
                let mut obs = Vec::new();
                for k in 0..grid.n_cells() {
                    let (c, r) = grid.cell_of_class(k).unwrap();
                    for i in 0..m {
                        let t = ((seed as i64 * 31 + k as i64 * 17 + i as i64 * 7) % 97) * 10 + i as i64;
                        obs.push(located(t, c as f64 + 0.1, r as f64 - 0.2, t as f64));
                    }
                }
                let seq = build_map_sequence(&obs, &grid, m).unwrap();
                let mut got: Vec<_> = seq.flatten().into_iter().map(|(cell, t, p)| (cell, t, p[0].to_bits())).collect();
                let mut want: Vec<_> = obs.iter().map(|o| {
                    let (x, y) = o.location.unwrap();
                    (grid.nearest_cell(x, y).unwrap(), o.t_ms, o.phases[0].to_bits())
                }).collect();
                got.sort();
                want.sort();
                prop_assert_eq!(got, want);
            }
        }
    }
}
