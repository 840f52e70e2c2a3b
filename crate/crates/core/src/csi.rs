//! Raw and sanitized CSI data, the per-antenna-pair phase sanitizer, and the
//! per-channel sigma-bound denoiser.
//!
//! Channel ordering is fixed across the crate: transmit antenna major, then
//! receive antenna, then subcarrier index ascending. A 3x3 MIMO link with 30
//! reported subcarriers therefore yields 270 channels.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subcarrier indices reported by the Intel 5300 for a 20 MHz channel.
pub const INTEL_5300_SUBCARRIERS: [i32; 30] = [
    -28, -26, -24, -22, -20, -18, -16, -14, -12, -10, -8, -6, -4, -2, -1, 1, 3, 5, 7, 9, 11, 13,
    15, 17, 19, 21, 23, 25, 27, 28,
];

/// One complex channel reading split into magnitude and angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsiSample {
    amplitude: f64,
    phase: f64,
}

impl CsiSample {
    pub fn new(amplitude: f64, phase: f64) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(Error::InvalidInput(format!("amplitude {amplitude} must be finite and >= 0")));
        }
        if !phase.is_finite() {
            return Err(Error::InvalidInput("phase must be finite".into()));
        }
        Ok(Self { amplitude, phase })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_subcarriers: usize,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self { n_tx: 3, n_rx: 3, n_subcarriers: 30 }
    }
}

impl ChannelLayout {
    pub fn new(n_tx: usize, n_rx: usize, n_subcarriers: usize) -> Result<Self> {
        if n_tx == 0 || n_rx == 0 || n_subcarriers == 0 {
            return Err(Error::InvalidInput("layout dimensions must be positive".into()));
        }
        Ok(Self { n_tx, n_rx, n_subcarriers })
    }

    /// Total channel count `n_tx * n_rx * n_subcarriers`.
    pub fn channels(&self) -> usize {
        self.n_tx * self.n_rx * self.n_subcarriers
    }

    pub fn antenna_pairs(&self) -> usize {
        self.n_tx * self.n_rx
    }

    pub fn channel_index(&self, tx: usize, rx: usize, subcarrier: usize) -> usize {
        (tx * self.n_rx + rx) * self.n_subcarriers + subcarrier
    }

    /// Subcarrier indices used for the linear phase fit. The Intel 5300
    /// grouping is used for 30 subcarriers, `1..=n` otherwise.
    pub fn default_subcarrier_indices(&self) -> Vec<i32> {
        if self.n_subcarriers == INTEL_5300_SUBCARRIERS.len() {
            INTEL_5300_SUBCARRIERS.to_vec()
        } else {
            (1..=self.n_subcarriers as i32).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiObservation {
    pub t_ms: i64,
    pub location: Option<(f64, f64)>,
    pub phases: Vec<f64>,
}

impl CsiObservation {
    pub fn new(t_ms: i64, location: Option<(f64, f64)>, phases: Vec<f64>) -> Self {
        Self { t_ms, location, phases }
    }

    pub fn validate(&self, layout: &ChannelLayout) -> Result<()> {
        if self.phases.len() != layout.channels() {
            return Err(Error::LengthMismatch { expected: layout.channels(), actual: self.phases.len() });
        }
        if let Some(index) = self.phases.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }
}

/// Standard 1-D unwrap: whenever the step between consecutive samples exceeds
/// pi in magnitude, shift the remainder of the sequence by 2*pi.
pub fn unwrap_phase(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    let mut prev = None;
    for &p in phases {
        if let Some(q) = prev {
            let diff = p - q;
            if diff > PI {
                offset -= 2.0 * PI;
            } else if diff < -PI {
                offset += 2.0 * PI;
            }
        }
        prev = Some(p);
        out.push(p + offset);
    }
    out
}

/// Removes the unknown timing and phase offsets from one antenna pair's
/// phases: unwrap, then subtract `a*k + b` where `a` is the endpoint slope
/// over subcarrier index and `b` the mean of the slope-corrected phases.
pub fn sanitize_phase(raw_phases: &[f64], subcarrier_indices: &[i32]) -> Result<Vec<f64>> {
    if raw_phases.len() != subcarrier_indices.len() {
        return Err(Error::LengthMismatch { expected: subcarrier_indices.len(), actual: raw_phases.len() });
    }
    if raw_phases.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 subcarriers".into()));
    }
    if let Some(index) = raw_phases.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if subcarrier_indices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("subcarrier indices must be strictly increasing".into()));
    }

    let unwrapped = unwrap_phase(raw_phases);
    let n = unwrapped.len();
    let k_first = f64::from(subcarrier_indices[0]);
    let k_last = f64::from(subcarrier_indices[n - 1]);
    let slope = (unwrapped[n - 1] - unwrapped[0]) / (k_last - k_first);

    let mut out: Vec<f64> = unwrapped
        .iter()
        .zip(subcarrier_indices)
        .map(|(u, &k)| u - slope * f64::from(k))
        .collect();
    let offset = out.iter().sum::<f64>() / n as f64;
    out.iter_mut().for_each(|v| *v -= offset);
    Ok(out)
}

/// Per-observation min-max scaling to [0, 1]. A constant vector maps to zeros.
pub fn normalize_min_max(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanitizeConfig {
    pub normalize: bool,
}

impl Default for SanitizeConfig {
    fn default() -> Self {
        Self { normalize: true }
    }
}

/// Applies [`sanitize_phase`] to every antenna pair of a raw `C`-vector, then
/// optionally min-max normalizes the whole vector.
pub fn sanitize_observation(
    raw: &[f64],
    layout: &ChannelLayout,
    subcarrier_indices: &[i32],
    cfg: &SanitizeConfig,
) -> Result<Vec<f64>> {
    if raw.len() != layout.channels() {
        return Err(Error::LengthMismatch { expected: layout.channels(), actual: raw.len() });
    }
    let mut out = Vec::with_capacity(raw.len());
    for pair in raw.chunks(layout.n_subcarriers) {
        out.extend(sanitize_phase(pair, subcarrier_indices)?);
    }
    if cfg.normalize {
        normalize_min_max(&mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub sigma_bound: f64,
    pub min_retained: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { sigma_bound: 2.0, min_retained: 0.5 }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_bound > 0.0) {
            return Err(Error::config("denoise.sigma_bound", "must be > 0"));
        }
        if !(self.min_retained > 0.0 && self.min_retained <= 1.0) {
            return Err(Error::config("denoise.min_retained", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Why one observation was dropped: the first channel found outside the bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub index: usize,
    pub t_ms: i64,
    pub channel: usize,
    pub deviation: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct DenoiseOutcome {
    pub retained: Vec<CsiObservation>,
    pub rejected: Vec<Rejection>,
}

impl DenoiseOutcome {
    pub fn retained_fraction(&self) -> f64 {
        let total = self.retained.len() + self.rejected.len();
        self.retained.len() as f64 / total as f64
    }
}

/// Per-channel mean and population standard deviation across a set of
/// equal-length vectors.
pub fn channel_stats(observations: &[CsiObservation]) -> (Vec<f64>, Vec<f64>) {
    let c = observations[0].phases.len();
    let n = observations.len() as f64;
    let mut mean = vec![0.0; c];
    for obs in observations {
        for (m, p) in mean.iter_mut().zip(&obs.phases) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for obs in observations {
        for ((v, p), m) in var.iter_mut().zip(&obs.phases).zip(&mean) {
            *v += (p - m) * (p - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    (mean, std)
}

/// Drops every observation with any channel further than `sigma_bound`
/// standard deviations from that channel's mean. Constant channels never
/// reject, and neither do deviations at rounding level.
pub fn denoise(observations: &[CsiObservation], cfg: &DenoiseConfig) -> Result<DenoiseOutcome> {
    cfg.validate()?;
    if observations.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "denoise needs at least 3 observations, got {}",
            observations.len()
        )));
    }
    let c = observations[0].phases.len();
    for obs in observations {
        if obs.phases.len() != c {
            return Err(Error::LengthMismatch { expected: c, actual: obs.phases.len() });
        }
        if let Some(index) = obs.phases.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
    }

    let (mean, std) = channel_stats(observations);
    // rounding dust on a channel pinned by normalization must not count
    let tolerance = |m: f64| 1e-12 * m.abs().max(1.0);
    let mut retained = Vec::with_capacity(observations.len());
    let mut rejected = Vec::new();
    for (index, obs) in observations.iter().enumerate() {
        let outlier = obs.phases.iter().enumerate().find_map(|(ch, &p)| {
            let deviation = (p - mean[ch]).abs();
            let bound = cfg.sigma_bound * std[ch];
            (deviation > bound + tolerance(mean[ch])).then_some((ch, deviation, bound))
        });
        match outlier {
            Some((channel, deviation, bound)) => rejected.push(Rejection { index, t_ms: obs.t_ms, channel, deviation, bound }),
            None => retained.push(obs.clone()),
        }
    }

    let outcome = DenoiseOutcome { retained, rejected };
    if outcome.retained_fraction() < cfg.min_retained {
        let (x, y) = observations[0].location.unwrap_or((f64::NAN, f64::NAN));
        return Err(Error::UnusableLocation {
            x,
            y,
            retained: outcome.retained.len(),
            total: observations.len(),
        });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Independent straight-line reference: unwrap through the wrapped
    /// difference, slope from endpoints, subtract slope and mean.
    fn oracle(raw: &[f64], k: &[i32]) -> Vec<f64> {
        let mut u = vec![raw[0]];
        for i in 1..raw.len() {
            let d = raw[i] - raw[i - 1];
            let wrapped = d - 2.0 * PI * (d / (2.0 * PI)).round();
            u.push(u[i - 1] + wrapped);
        }
        let n = raw.len();
        let a = (u[n - 1] - u[0]) / f64::from(k[n - 1] - k[0]);
        let detrended: Vec<f64> = (0..n).map(|i| u[i] - a * f64::from(k[i])).collect();
        let mut b = 0.0;
        for v in &detrended {
            b += v;
        }
        b /= n as f64;
        detrended.iter().map(|v| v - b).collect()
    }

    fn one_to_thirty() -> Vec<i32> {
        (1..=30).collect()
    }

    #[test]
    fn affine_phase_vanishes() {
        let k = one_to_thirty();
        let phases: Vec<f64> = k.iter().map(|&k| 0.3 * f64::from(k) + 1.1).collect();
        let out = sanitize_phase(&phases, &k).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-9), "{out:?}");
    }

    #[test]
    fn constant_phase_vanishes() {
        let k = one_to_thirty();
        let out = sanitize_phase(&[2.5; 30], &k).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn random_phase_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = INTEL_5300_SUBCARRIERS;
        for _ in 0..50 {
            let raw: Vec<f64> = (0..30).map(|_| rng.random_range(-PI..PI)).collect();
            let got = sanitize_phase(&raw, &k).unwrap();
            let want = oracle(&raw, &k);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn sanitize_rejects_bad_input() {
        assert!(matches!(sanitize_phase(&[1.0, 2.0], &[1]), Err(Error::LengthMismatch { .. })));
        assert!(sanitize_phase(&[1.0], &[1]).is_err());
        assert!(matches!(sanitize_phase(&[1.0, f64::NAN], &[1, 2]), Err(Error::NonFinite { index: 1 })));
        assert!(sanitize_phase(&[1.0, 2.0], &[2, 2]).is_err());
    }

    #[test]
    fn unwrap_removes_jumps() {
        let wrapped = [3.0, -3.0, -2.5];
        let u = unwrap_phase(&wrapped);
        assert!((u[1] - (-3.0 + 2.0 * PI)).abs() < 1e-15);
        assert!((u[2] - (-2.5 + 2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn layout_channel_count_and_order() {
        let layout = ChannelLayout::default();
        assert_eq!(layout.channels(), 270);
        assert_eq!(layout.channel_index(0, 0, 0), 0);
        assert_eq!(layout.channel_index(0, 1, 0), 30);
        assert_eq!(layout.channel_index(1, 0, 0), 90);
        assert_eq!(layout.channel_index(2, 2, 29), 269);
        assert_eq!(layout.default_subcarrier_indices(), INTEL_5300_SUBCARRIERS.to_vec());
    }

    #[test]
    fn sanitize_observation_per_pair_then_normalize() {
        let layout = ChannelLayout::new(1, 2, 4).unwrap();
        let k = layout.default_subcarrier_indices();
        let raw = vec![0.1, 0.5, 0.2, 0.9, 1.0, 1.0, 1.0, 1.0];
        let out = sanitize_observation(&raw, &layout, &k, &SanitizeConfig { normalize: false }).unwrap();
        assert_eq!(out[..4], sanitize_phase(&raw[..4], &k).unwrap()[..]);
        assert!(out[4..].iter().all(|v| v.abs() < 1e-12));
        let norm = sanitize_observation(&raw, &layout, &k, &SanitizeConfig::default()).unwrap();
        let lo = norm.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = norm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn sample_invariants() {
        assert!(CsiSample::new(-1.0, 0.0).is_err());
        assert!(CsiSample::new(1.0, f64::INFINITY).is_err());
        assert_eq!(CsiSample::new(2.0, 0.5).unwrap().phase(), 0.5);
    }

    fn obs(phases: Vec<f64>) -> CsiObservation {
        CsiObservation::new(0, Some((1.0, 2.0)), phases)
    }

    #[test]
    fn identical_observations_all_retained() {
        let set: Vec<_> = (0..400).map(|_| obs(vec![0.25, -0.5, 1.0])).collect();
        let out = denoise(&set, &DenoiseConfig::default()).unwrap();
        assert_eq!(out.retained.len(), 400);
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn displaced_observation_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 8;
        let mut set: Vec<_> = (0..100)
            .map(|_| obs((0..c).map(|_| StandardNormal.sample(&mut rng)).collect()))
            .collect();
        // displace channel 3 of one extra observation by 5 sigma of the clean set
        let (mean0, std0) = channel_stats(&set);
        let mut outlier = mean0.clone();
        outlier[3] += 5.0 * std0[3];
        set.push(obs(outlier));

        // oracle: recompute the bound on the full set directly
        let n = set.len() as f64;
        let mu: f64 = set.iter().map(|o| o.phases[3]).sum::<f64>() / n;
        let sd = (set.iter().map(|o| (o.phases[3] - mu).powi(2)).sum::<f64>() / n).sqrt();
        assert!((set[100].phases[3] - mu).abs() > 2.0 * sd);

        let out = denoise(&set, &DenoiseConfig::default()).unwrap();
        let hit = out.rejected.iter().find(|r| r.index == 100).expect("outlier kept");
        assert_eq!(hit.channel, 3);
    }

    #[test]
    fn gaussian_retention_near_two_sigma_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let set: Vec<_> = (0..10_000).map(|_| obs(vec![StandardNormal.sample(&mut rng)])).collect();
        let out = denoise(&set, &DenoiseConfig::default()).unwrap();
        let frac = out.retained_fraction();
        assert!((0.93..=0.975).contains(&frac), "{frac}");
    }

    #[test]
    fn denoise_errors() {
        let two: Vec<_> = (0..2).map(|_| obs(vec![0.0])).collect();
        assert!(denoise(&two, &DenoiseConfig::default()).is_err());
        // half the set far away on alternating channels -> below min_retained
        let mut set: Vec<_> = (0..10).map(|_| obs(vec![0.0, 0.0])).collect();
        let cfg = DenoiseConfig { sigma_bound: 0.5, min_retained: 0.9 };
        set[0].phases[0] = 1.0;
        set[1].phases[1] = 1.0;
        match denoise(&set, &cfg) {
            Err(Error::UnusableLocation { x, y, .. }) => assert_eq!((x, y), (1.0, 2.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mean_observation_never_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set: Vec<_> = (0..30)
            .map(|_| obs((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let (mean, _) = channel_stats(&set);
        set.push(obs(mean));
        let out = denoise(&set, &DenoiseConfig { sigma_bound: 2.0, min_retained: 0.1 }).unwrap();
        assert!(out.rejected.iter().all(|r| r.index != 30));
        let all = denoise(&set, &DenoiseConfig { sigma_bound: 1e9, min_retained: 1.0 }).unwrap();
        assert_eq!(all.retained.len(), set.len());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn wrap(p: f64) -> f64 {
            let w = (p + PI).rem_euclid(2.0 * PI) - PI;
            if w == -PI { PI } else { w }
        }

        // smooth phases: adjacent steps stay below pi even across the widest subcarrier gap
        fn smooth_phase() -> impl Strategy<Value = Vec<f64>> {
            (-1.0f64..1.0, -PI..PI, proptest::collection::vec(-0.3f64..0.3, 30))
                .prop_map(|(a, b, ripple)| {
                    (0..30).map(|i| wrap(a * f64::from(INTEL_5300_SUBCARRIERS[i]) + b + ripple[i])).collect()
                })
        }

        proptest! {
            #[test]
            fn idempotent(raw in smooth_phase()) {
                let k = INTEL_5300_SUBCARRIERS;
                let once = sanitize_phase(&raw, &k).unwrap();
                let twice = sanitize_phase(&once, &k).unwrap();
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }

            #[test]
            fn affine_invariant(raw in smooth_phase(), a in -0.05f64..0.05, b in -3.0f64..3.0) {
                let k = INTEL_5300_SUBCARRIERS;
                let base = sanitize_phase(&raw, &k).unwrap();
                let unwrapped = unwrap_phase(&raw);
                let shifted: Vec<f64> = unwrapped.iter().zip(&k)
                    .map(|(u, &k)| u + a * f64::from(k) + b).collect();
                let out = sanitize_phase(&shifted, &k).unwrap();
                for (x, y) in base.iter().zip(&out) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
