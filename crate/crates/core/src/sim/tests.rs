use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::csi::{denoise, sanitize_observation, DenoiseConfig, SanitizeConfig};

fn steady() -> WalkSimConfig {
    WalkSimConfig {
        speed_sd: 0.0,
        period_sd: 0.0,
        turn_sd: 0.0,
        start_heading: Some(0.0),
        update_noise_sd: 0.0,
        ..WalkSimConfig::default()
    }
}

fn quiet_field(seed: u64) -> CsiFieldConfig {
    CsiFieldConfig {
        noise_sd: 0.0,
        timing_slope_max: 0.0,
        random_offset: false,
        burst_probability: 0.0,
        seed,
        ..CsiFieldConfig::default()
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn straight_walk_covers_ten_metres() {
    let walk = simulate_walk(&WalkSimConfig { duration_s: 10.0, ..steady() }).unwrap();
    let start = walk.ticks[0].position();
    let stride = walk.ticks[0].state.stride;
    assert_eq!(stride, 0.5);
    // the tick at t = 10 s is one past the last emitted one
    let end = walk.ticks.last().unwrap();
    let mut last = end.state;
    last.advance(0.2);
    let (x, y) = last.midpoint();
    assert!(((x - start.0) - 10.0).abs() <= stride, "{}", x - start.0);
    assert!((y - start.1).abs() < 1e-9);
}

#[test]
fn walks_are_seeded() {
    let cfg = WalkSimConfig { seed: 11, area: Some((-1.0, -1.0, 6.0, 6.0)), ..WalkSimConfig::default() };
    assert_eq!(simulate_walk(&cfg).unwrap(), simulate_walk(&cfg).unwrap());
    let other = simulate_walk(&WalkSimConfig { seed: 12, ..cfg.clone() }).unwrap();
    assert_ne!(simulate_walk(&cfg).unwrap(), other);
}

#[test]
fn mean_step_speed_matches_config() {
    let cfg = WalkSimConfig { duration_s: 6000.0, ..WalkSimConfig::default() };
    let walk = simulate_walk(&cfg).unwrap();
    let n = walk.step_speeds.len();
    assert!(n >= 10_000, "{n}");
    let mean = walk.step_speeds.iter().sum::<f64>() / n as f64;
    assert!((mean - cfg.speed_mean).abs() < 3.0 * cfg.speed_sd / (n as f64).sqrt(), "{mean}");
    assert!(walk.step_speeds.iter().all(|&v| v <= cfg.speed_max));
}

#[test]
fn walks_stay_in_their_area() {
    for seed in 0..10 {
        let area = (-0.5, -0.5, 5.5, 5.5);
        let cfg = WalkSimConfig { seed, start: (2.5, 2.5), area: Some(area), duration_s: 60.0, ..WalkSimConfig::default() };
        for t in simulate_walk(&cfg).unwrap().ticks {
            let (x, y) = t.position();
            assert!(x > area.0 && x < area.2 && y > area.1 && y < area.3, "seed {seed}: ({x}, {y})");
        }
    }
}

#[test]
fn update_stream_follows_interval_and_noise() {
    let walk = simulate_walk(&WalkSimConfig { update_noise_sd: 0.0, ..WalkSimConfig::default() }).unwrap();
    assert_eq!(walk.updates.len(), 10);
    for u in &walk.updates {
        let t = walk.ticks.iter().find(|t| t.t_ms == u.t_ms).unwrap();
        assert_eq!((u.x, u.y), t.position());
        assert_eq!(u.c, 0.9);
    }
}

#[test]
fn noiseless_repeats_are_identical() {
    let field = CsiField::generate(&quiet_field(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = field.observe(1.3, 2.2, 0.0, &mut rng);
    let b = field.observe(1.3, 2.2, 0.0, &mut rng);
    assert_eq!(a, b);
    let wrapped: Vec<f64> = field.value(1.3, 2.2, 0.0).into_iter().map(wrap_angle).collect();
    assert_eq!(a, wrapped);
}

#[test]
fn distant_points_are_decorrelated() {
    let cfg = CsiFieldConfig::default();
    let gap = 5.0 * cfg.length_scale;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for seed in 0..40 {
        let field = CsiField::generate(&CsiFieldConfig { seed, ..cfg.clone() }).unwrap();
        a.extend(field.value(0.0, 2.5, 0.0));
        b.extend(field.value(gap, 2.5, 0.0));
    }
    let r = pearson(&a, &b);
    assert!(r.abs() < 0.2, "{r}");
    // nearby points stay strongly correlated
    let field = CsiField::generate(&cfg).unwrap();
    let near = pearson(&field.value(2.0, 2.0, 0.0), &field.value(2.1, 2.0, 0.0));
    assert!(near > 0.9, "{near}");
}

#[test]
fn point_spread_matches_amplitude() {
    let cfg = CsiFieldConfig::default();
    let mut values = Vec::new();
    for seed in 0..30 {
        let field = CsiField::generate(&CsiFieldConfig { seed, ..cfg.clone() }).unwrap();
        for (x, y) in [(0.0, 0.0), (2.5, 2.5), (5.0, 1.0)] {
            values.extend(field.value(x, y, 0.0));
        }
    }
    let n = values.len() as f64;
    let sd = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    assert!((sd / cfg.amplitude - 1.0).abs() < 0.15, "{sd}");
}

#[test]
fn zero_drift_keeps_days_identical() {
    let field = CsiField::generate(&CsiFieldConfig::default()).unwrap();
    assert_eq!(field.value(1.0, 4.0, 0.0), field.value(1.0, 4.0, 44.0));
    let drifting = CsiField::generate(&CsiFieldConfig { drift_per_day: 0.01, ..CsiFieldConfig::default() }).unwrap();
    assert_ne!(drifting.value(1.0, 4.0, 0.0), drifting.value(1.0, 4.0, 44.0));
    assert_eq!(drifting.value(1.0, 4.0, 0.0), field.value(1.0, 4.0, 0.0));
}

#[test]
fn eight_second_walk_gives_forty_observations() {
    let walk = simulate_walk(&WalkSimConfig { duration_s: 8.0, ..WalkSimConfig::default() }).unwrap();
    let field = CsiField::generate(&CsiFieldConfig::default()).unwrap();
    let (obs, truth) = walk_to_observations(&walk, &field, 0.0, 1);
    assert_eq!(obs.len(), 40);
    assert_eq!(truth.len(), 40);
    assert!(obs.windows(2).all(|w| w[1].t_ms - w[0].t_ms == 200));
    assert!(obs.iter().all(|o| o.location.is_none() && o.phases.len() == 36));
}

#[test]
fn leaving_the_grid_switches_to_null() {
    let walk = simulate_walk(&WalkSimConfig { start: (2.5, 2.5), duration_s: 10.0, ..steady() }).unwrap();
    let field = CsiField::generate(&CsiFieldConfig::default()).unwrap();
    let (_, truth) = walk_to_observations(&walk, &field, 0.0, 0);
    let grid = GridSpec::default();
    let (x0, y0, x1, y1) = grid.bounding_box();
    let mut saw_null = false;
    for label in &truth {
        let inside = label.x >= x0 && label.x < x1 && label.y >= y0 && label.y < y1;
        assert_eq!(label.class == grid.null_class(), !inside, "{label:?}");
        saw_null |= !inside;
    }
    assert!(saw_null);
    assert_ne!(truth[0].class, grid.null_class());
}

#[test]
fn cell_centres_are_recovered_from_noiseless_observations() {
    let cfg = quiet_field(5);
    let field = CsiField::generate(&cfg).unwrap();
    let grid = cfg.grid;
    let prints: Vec<Vec<f64>> = (0..grid.n_cells())
        .map(|k| {
            let (x, y) = grid.cell_center(grid.cell_of_class(k).unwrap());
            field.value(x, y, 0.0).into_iter().map(wrap_angle).collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..grid.n_cells() {
        let (x, y) = grid.cell_center(grid.cell_of_class(k).unwrap());
        assert_eq!(grid.class_at(x, y), k);
        let obs = field.observe(x, y, 0.0, &mut rng);
        let dist = |p: &[f64]| p.iter().zip(&obs).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let nearest = (0..prints.len()).min_by(|&i, &j| dist(&prints[i]).total_cmp(&dist(&prints[j]))).unwrap();
        assert_eq!(nearest, k);
        assert_eq!(dist(&prints[k]), 0.0);
    }
}

#[test]
fn field_statistics_do_not_depend_on_the_origin() {
    let stats = |origin: (f64, f64)| {
        let grid = GridSpec { origin, ..GridSpec::default() };
        let mut values = Vec::new();
        for seed in 0..30 {
            let field = CsiField::generate(&CsiFieldConfig { grid, seed, ..CsiFieldConfig::default() }).unwrap();
            for k in 0..grid.n_cells() {
                let (x, y) = grid.cell_center(grid.cell_of_class(k).unwrap());
                values.extend(field.value(x, y, 0.0));
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, sd)
    };
    let (m0, s0) = stats((0.0, 0.0));
    let (m1, s1) = stats((37.5, -12.25));
    assert!((m0 - m1).abs() < 0.1, "{m0} {m1}");
    assert!((s0 / s1 - 1.0).abs() < 0.1, "{s0} {s1}");
}

#[test]
fn reference_cells_survive_denoising() {
    for seed in 0..5 {
        let cfg = CsiFieldConfig { seed, ..CsiFieldConfig::default() };
        let data = CsiField::generate(&cfg).unwrap().reference_dataset(0.0, 0);
        assert_eq!(data.len(), cfg.grid.n_cells() * cfg.m);
        assert!(data.windows(2).all(|w| w[1].t_ms - w[0].t_ms == cfg.interval_ms));
        let indices = cfg.layout.default_subcarrier_indices();
        let mut kept = 0;
        for cell in data.chunks(cfg.m) {
            let clean: Vec<CsiObservation> = cell
                .iter()
                .map(|o| {
                    let phases = sanitize_observation(&o.phases, &cfg.layout, &indices, &SanitizeConfig::default()).unwrap();
                    CsiObservation::new(o.t_ms, o.location, phases)
                })
                .collect();
            // every cell must stay usable
            kept += denoise(&clean, &DenoiseConfig::default()).unwrap().retained.len();
        }
        let fraction = kept as f64 / data.len() as f64;
        assert!(fraction >= 0.9, "seed {seed}: {fraction}");
    }
}

#[test]
fn disc_sway_stays_in_the_disc() {
    let cfg = CsiFieldConfig { sway_spots: 0, ..CsiFieldConfig::default() };
    let data = CsiField::generate(&cfg).unwrap().reference_dataset(0.0, 0);
    for (k, cell) in data.chunks(cfg.m).enumerate() {
        let (cx, cy) = cfg.grid.cell_center(cfg.grid.cell_of_class(k).unwrap());
        assert!(cell.iter().all(|o| {
            let (x, y) = o.location.unwrap();
            (x - cx).hypot(y - cy) <= cfg.sway_radius
        }));
    }
}

#[test]
fn reference_positions_lie_on_the_sway_circle() {
    let cfg = CsiFieldConfig::default();
    let data = CsiField::generate(&cfg).unwrap().reference_dataset(0.0, 0);
    for (k, cell) in data.chunks(cfg.m).enumerate() {
        let (cx, cy) = cfg.grid.cell_center(cfg.grid.cell_of_class(k).unwrap());
        for o in cell {
            let (x, y) = o.location.unwrap();
            assert!(((x - cx).hypot(y - cy) - cfg.sway_radius).abs() < 1e-12);
            assert_eq!(cfg.grid.class_at(x, y), k);
        }
    }
    assert!(data.iter().flat_map(|o| &o.phases).all(|p| p.abs() <= PI));
}
