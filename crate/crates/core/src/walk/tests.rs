use std::f64::consts::{FRAC_PI_2, PI, TAU};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::sim::{simulate_walk, WalkSimConfig};

fn z(x: f64, y: f64, c: f64) -> LocationUpdate {
    LocationUpdate { t_index: 0, t_ms: 0, x, y, c }
}

fn quiet() -> FilterConfig {
    FilterConfig { sigma_theta: 0.0, sigma_stride: 0.0, sigma_period: 0.0, ..FilterConfig::default() }
}

fn state(gamma: f64) -> PedestrianState {
    PedestrianState::centered(1.0, 2.0, 0.3, gamma, 0.6, 1.0)
}

#[test]
fn init_weights_are_uniform_and_centered() {
    let cfg = FilterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = init_particles(&z(0.0, 0.0, 0.8), &cfg, &mut rng);
    assert_eq!(ps.len(), 500);
    assert!(ps.iter().all(|p| p.weight == 1.0 / 500.0));
    let sd = 0.2;
    let bound = 3.0 * sd / (500f64).sqrt();
    let mx = ps.iter().map(|p| p.state.midpoint().0).sum::<f64>() / 500.0;
    let my = ps.iter().map(|p| p.state.midpoint().1).sum::<f64>() / 500.0;
    assert!(mx.abs() < bound && my.abs() < bound, "{mx} {my}");
    for p in &ps {
        let s = &p.state;
        assert!((0.3..=1.2).contains(&s.stride) && (0.35..=1.5).contains(&s.step_period));
        assert!(s.foot_separation() <= 1.5 * s.stride);
        assert!((s.foot_offset() - s.reference_offset()).abs() < 1e-12);
    }

    let one = init_particles(&z(3.0, 4.0, 0.5), &FilterConfig { n_particles: 1, ..cfg }, &mut rng);
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].weight, 1.0);
}

#[test]
fn full_cycle_returns_phase() {
    let mut s = state(0.7);
    for _ in 0..5 {
        s.advance(0.2);
    }
    assert!((s.gamma - 0.7).abs() < 1e-12);
}

#[test]
fn half_cycle_moves_swing_foot_twice_the_reference_amplitude() {
    // the reference offset swings from -S to +S, so the swing foot covers 2S
    let mut s = state(0.0);
    let (rx, ry) = (s.r_x, s.r_y);
    let (lx, ly) = (s.l_x, s.l_y);
    s.advance(0.5);
    let along = (s.r_x - rx) * s.theta.cos() + (s.r_y - ry) * s.theta.sin();
    let across = -(s.r_x - rx) * s.theta.sin() + (s.r_y - ry) * s.theta.cos();
    assert!((along - 2.0 * s.stride).abs() < 1e-9);
    assert!(across.abs() < 1e-9);
    assert_eq!((s.l_x, s.l_y), (lx, ly));

    // a whole cycle advances the body by two strides
    let mut s = state(0.0);
    let (x0, y0) = s.midpoint();
    s.advance(1.0);
    let (x1, y1) = s.midpoint();
    assert!(((x1 - x0).hypot(y1 - y0) - 2.0 * s.stride).abs() < 1e-9);
}

#[test]
fn stance_foot_is_bit_exact_within_a_half_cycle() {
    let mut s = state(0.05);
    let left = (s.l_x, s.l_y);
    for _ in 0..9 {
        s.advance(0.05);
        assert_eq!((s.l_x, s.l_y), left);
    }
    let mut s = state(PI + 0.05);
    let right = (s.r_x, s.r_y);
    for _ in 0..9 {
        s.advance(0.05);
        assert_eq!((s.r_x, s.r_y), right);
    }
}

#[test]
fn walk_pattern_holds_through_long_walks() {
    let mut s = state(1.0);
    for i in 0..200 {
        s.theta += 0.05 * (i as f64).sin();
        s.advance(0.2);
        assert!((s.foot_offset() - s.reference_offset()).abs() < 1e-9);
        assert!(s.foot_separation() <= 1.5 * s.stride);
    }
}

#[test]
fn predict_is_seeded() {
    let cfg = FilterConfig::default();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = init_particles(&z(0.0, 0.0, 0.7), &cfg, &mut rng);
        for _ in 0..10 {
            predict(&mut ps, 0.2, &cfg, &mut rng);
        }
        ps
    };
    assert_eq!(run(), run());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = init_particles(&z(0.0, 0.0, 0.7), &quiet(), &mut rng);
    let mut expect: Vec<PedestrianState> = ps.iter().map(|p| p.state).collect();
    predict(&mut ps, 0.2, &quiet(), &mut rng);
    for (e, p) in expect.iter_mut().zip(&ps) {
        e.advance(0.2);
        assert_eq!(*e, p.state);
    }
}

#[test]
fn peak_likelihood() {
    // feet together needs cos(gamma) = 0
    let s = PedestrianState { l_x: 2.0, l_y: 1.0, r_x: 2.0, r_y: 1.0, theta: 0.4, gamma: FRAC_PI_2, stride: 0.6, step_period: 1.0 };
    let cfg = FilterConfig { n_particles: 1, ..FilterConfig::default() };
    let mut ps = vec![Particle { state: s, weight: 1.0 }];
    let diag = update(&mut ps, &z(2.0, 1.0, 0.75), &cfg);
    let g = |sd: f64| 1.0 / ((2.0 * PI).sqrt() * sd);
    let expect = g(0.25) * g(0.25) * g(0.1);
    assert!((diag.weight_sum - expect).abs() < 1e-12 * expect);
    assert_eq!(ps[0].weight, 1.0);
}

#[test]
fn identical_particles_share_weight() {
    let p = Particle { state: state(0.4), weight: 0.5 };
    let mut ps = vec![p, p];
    update(&mut ps, &z(1.2, 2.1, 0.6), &FilterConfig::default());
    assert_eq!(ps[0].weight, 0.5);
    assert_eq!(ps[1].weight, 0.5);
}

fn random_state(rng: &mut ChaCha8Rng) -> PedestrianState {
    PedestrianState {
        l_x: rng.random_range(-2.0..2.0),
        l_y: rng.random_range(-2.0..2.0),
        r_x: rng.random_range(-2.0..2.0),
        r_y: rng.random_range(-2.0..2.0),
        theta: rng.random_range(-PI..PI),
        gamma: rng.random_range(0.0..TAU),
        stride: rng.random_range(0.3..1.2),
        step_period: rng.random_range(0.35..1.5),
    }
}

/// The measurement model written out term by term.
fn oracle_likelihood(s: &PedestrianState, x: f64, y: f64, c: f64, h: f64) -> f64 {
    let sd = 1.0 - c.min(0.99);
    let norm = 1.0 / ((2.0 * PI).sqrt() * sd);
    let p_l = norm * (-((s.l_x - x).powi(2) + (s.l_y - y).powi(2)) / (2.0 * sd * sd)).exp();
    let p_r = norm * (-((s.r_x - x).powi(2) + (s.r_y - y).powi(2)) / (2.0 * sd * sd)).exp();
    let d0 = (s.r_x - s.l_x) * s.theta.cos() + (s.r_y - s.l_y) * s.theta.sin();
    let r0 = -s.stride * s.gamma.cos();
    let p_b = 1.0 / ((2.0 * PI).sqrt() * h) * (-(d0 - r0).powi(2) / (2.0 * h * h)).exp();
    p_l * p_r * p_b
}

#[test]
fn update_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = FilterConfig::default();
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let mut ps: Vec<Particle> = (0..n).map(|_| Particle { state: random_state(&mut rng), weight: rng.random_range(0.1..1.0) }).collect();
        let total: f64 = ps.iter().map(|p| p.weight).sum();
        ps.iter_mut().for_each(|p| p.weight /= total);
        let (x, y, c) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..0.995));
        let raw: Vec<f64> = ps.iter().map(|p| n as f64 * p.weight * oracle_likelihood(&p.state, x, y, c, cfg.h)).collect();
        let sum: f64 = raw.iter().sum();
        let diag = update(&mut ps, &z(x, y, c), &cfg);
        if sum < cfg.weight_underflow_eps {
            assert!(diag.underflow);
            continue;
        }
        assert!((diag.weight_sum - sum).abs() <= 1e-12 * sum);
        for (p, r) in ps.iter().zip(&raw) {
            assert!((p.weight - r / sum).abs() < 1e-12);
        }
        assert!((ps.iter().map(|p| p.weight).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn underflow_is_signalled() {
    let mut ps = vec![Particle { state: state(0.0), weight: 1.0 }];
    let diag = update(&mut ps, &z(50.0, 50.0, 0.9), &FilterConfig::default());
    assert!(diag.underflow);
    assert_eq!(ps[0].weight, 1.0);
}

#[test]
fn uniform_weights_do_not_resample() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = init_particles(&z(0.0, 0.0, 0.5), &FilterConfig::default(), &mut rng);
    let before = ps.clone();
    assert!(!resample(&mut ps, &FilterConfig::default(), &mut rng));
    assert_eq!(ps, before);
}

#[test]
fn dominant_particle_takes_over() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps: Vec<Particle> = (0..10).map(|i| Particle { state: state(i as f64 * 0.1), weight: 0.0 }).collect();
    ps[6].weight = 1.0;
    let winner = ps[6].state;
    assert!(resample(&mut ps, &FilterConfig::default(), &mut rng));
    assert!(ps.iter().all(|p| p.state == winner && p.weight == 0.1));
}

#[test]
fn systematic_offspring_counts_are_floor_or_ceil() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let raw: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let ps: Vec<Particle> =
            raw.iter().enumerate().map(|(i, w)| Particle { state: state(i as f64 * 0.3), weight: w / total }).collect();
        for k in 0..20 {
            let u0 = (k as f64 + rng.random_range(0.0..1.0)) / 20.0;
            let out = systematic(&ps, u0);
            for p in &ps {
                let count = out.iter().filter(|o| o.state == p.state).count() as f64;
                let expect = 10.0 * p.weight;
                assert!(count == expect.floor() || count == expect.ceil(), "{count} vs {expect}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_stay_a_distribution(seed in 0u64..100_000, c in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps: Vec<Particle> = (0..20).map(|_| Particle { state: random_state(&mut rng), weight: 0.05 }).collect();
        let diag = update(&mut ps, &z(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), c), &FilterConfig::default());
        let sum: f64 = ps.iter().map(|p| p.weight).sum();
        prop_assert!(ps.iter().all(|p| p.weight >= 0.0));
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(diag.underflow || diag.n_eff <= 20.0 + 1e-9);
    }

    #[test]
    fn scaling_weights_changes_nothing(seed in 0u64..100_000, k in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps: Vec<Particle> = (0..20).map(|_| Particle { state: random_state(&mut rng), weight: 0.05 }).collect();
        let zz = z(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.4);
        let cfg = FilterConfig::default();
        let mut a = ps.clone();
        let mut b: Vec<Particle> = ps.iter().map(|p| Particle { weight: p.weight * k, ..*p }).collect();
        let da = update(&mut a, &zz, &cfg);
        let db = update(&mut b, &zz, &cfg);
        prop_assume!(!da.underflow && !db.underflow);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p.weight - q.weight).abs() < 1e-12);
        }
        prop_assert!((da.n_eff - db.n_eff).abs() < 1e-9 * da.n_eff);
        let mut ra = ChaCha8Rng::seed_from_u64(1);
        let mut rb = ChaCha8Rng::seed_from_u64(1);
        prop_assert_eq!(resample(&mut a, &cfg, &mut ra), resample(&mut b, &cfg, &mut rb));
    }
}

fn straight_line(c: f64) -> TrajectoryHypothesis {
    let updates = (0..9).map(|i| LocationUpdate { t_index: i, t_ms: 1000 * i as i64, x: i as f64, y: 0.5, c }).collect();
    TrajectoryHypothesis { id: 0, updates, mean_confidence: c, classes: Vec::new() }
}

fn final_estimate(r: &TrackResult) -> Estimate {
    match &r.outcome {
        TrackOutcome::Converged { estimates } => *estimates.last().unwrap(),
        other => panic!("expected convergence, got {other:?}"),
    }
}

#[test]
fn straight_walk_converges() {
    let r = track_hypothesis(&straight_line(0.9), &FilterConfig::default()).unwrap();
    let e = final_estimate(&r);
    assert!((e.y - 0.5).abs() < 0.5 && (e.x - 8.0).abs() < 0.5, "{e:?}");
    assert!(e.theta.abs() < 0.5);
    match &r.outcome {
        TrackOutcome::Converged { estimates } => {
            assert_eq!(estimates.len(), 41);
            assert!(estimates.windows(2).all(|w| w[1].tau_ms - w[0].tau_ms == TICK_MS));
        }
        _ => unreachable!(),
    }
}

fn with_jump(mut h: TrajectoryHypothesis, at: usize, dx: f64) -> TrajectoryHypothesis {
    for u in &mut h.updates[at..] {
        u.x += dx;
    }
    h
}

#[test]
fn distant_update_collapses_without_underflow() {
    let mut ps = vec![Particle { state: state(FRAC_PI_2), weight: 1.0 }];
    let (x, y) = ps[0].state.midpoint();
    let near = update(&mut ps.clone(), &z(x + 1.0, y, 0.5), &FilterConfig::default());
    assert!(!near.collapsed && !near.underflow);
    let far = update(&mut ps, &z(x + 2.5, y, 0.5), &FilterConfig::default());
    assert!(far.collapsed && !far.underflow);
}

#[test]
fn persistent_lag_is_rejected_for_frequent_resampling() {
    // the cloud walks at about 1 m/s and falls a little further behind each second
    let updates = (0..9).map(|i| LocationUpdate { t_index: i, t_ms: 1000 * i as i64, x: 2.0 * i as f64, y: 0.0, c: 0.5 });
    let h = TrajectoryHypothesis { id: 0, updates: updates.collect(), mean_confidence: 0.5, classes: Vec::new() };
    let r = track_hypothesis(&h, &FilterConfig { collapse_ratio: 0.05, ..FilterConfig::default() }).unwrap();
    assert!(
        matches!(r.outcome, TrackOutcome::Rejected { reason: RejectReason::FrequentResampling, .. }),
        "{:?}",
        r.outcome
    );
}

#[test]
fn five_metre_jump_is_rejected() {
    let r = track_hypothesis(&with_jump(straight_line(0.9), 4, 5.0), &FilterConfig::default()).unwrap();
    assert!(r.is_rejected(), "{:?}", r.outcome);
}

#[test]
fn rejection_is_monotone() {
    let cfg = FilterConfig::default();
    let bad = with_jump(straight_line(0.9), 4, 5.0);
    assert!(track_hypothesis(&bad, &cfg).unwrap().is_rejected());
    for (at, dx) in [(2, -4.0), (6, 6.0), (8, 3.5)] {
        assert!(track_hypothesis(&with_jump(bad.clone(), at, dx), &cfg).unwrap().is_rejected());
    }
}

#[test]
fn ground_truth_walks_are_accepted() {
    for seed in 0..5 {
        let walk = simulate_walk(&WalkSimConfig { seed, ..WalkSimConfig::default() }).unwrap();
        let h = walk.ground_truth_hypothesis(1000, 0.9);
        let r = track_hypothesis(&h, &FilterConfig { seed, ..FilterConfig::default() }).unwrap();
        assert!(!r.is_rejected(), "seed {seed}: {:?}", r.outcome);
    }
}

fn result(id: usize, c: f64, rejected: bool) -> TrackResult {
    let outcome = if rejected {
        TrackOutcome::Rejected { reason: RejectReason::WeightUnderflow, update_index: 1 }
    } else {
        TrackOutcome::Converged { estimates: vec![Estimate { tau_ms: 0, x: 1.4, y: 0.2, theta: 0.0, stride: 0.5 }] }
    };
    TrackResult { id, mean_confidence: c, outcome, resamples: 0 }
}

#[test]
fn selection() {
    let grid = GridSpec::default();
    let one = select_trajectory(&[result(0, 0.3, true), result(1, 0.2, false)], &grid).unwrap();
    assert_eq!(one.hypothesis_id, 1);
    assert_eq!(one.snapped_cells, vec![(1, 0)]);
    let two = select_trajectory(&[result(0, 0.6, false), result(1, 0.8, false)], &grid).unwrap();
    assert_eq!(two.hypothesis_id, 1);
    let tie = select_trajectory(&[result(3, 0.7, false), result(2, 0.7, false)], &grid).unwrap();
    assert_eq!(tie.hypothesis_id, 2);
    assert!(matches!(select_trajectory(&[result(0, 0.9, true)], &grid), Err(Error::AllRejected)));
}

// Filter steps without rejection: an update whose likelihood underflows
// leaves the weights as they were.
fn position_rmse(j: usize, seed: u64) -> f64 {
    let walk = simulate_walk(&WalkSimConfig { seed, ..WalkSimConfig::default() }).unwrap();
    let h = walk.ground_truth_hypothesis(1000, 0.99);
    let cfg = FilterConfig { n_particles: j, ..FilterConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = init_particles(&h.updates[0], &cfg, &mut rng);
    let (mut sq, mut n, mut next) = (0.0, 0.0, 1);
    for tick in walk.ticks.iter().skip(1) {
        predict(&mut ps, TICK_MS as f64 / 1000.0, &cfg, &mut rng);
        if next < h.updates.len() && h.updates[next].t_ms <= tick.t_ms {
            update(&mut ps, &h.updates[next], &cfg);
            resample(&mut ps, &cfg, &mut rng);
            next += 1;
        }
        let e = estimate(&ps, tick.t_ms);
        let (x, y) = tick.position();
        sq += (e.x - x).powi(2) + (e.y - y).powi(2);
        n += 1.0;
    }
    (sq / n).sqrt()
}

#[test]
fn more_particles_track_no_worse() {
    let rmse = |j| (0..4).map(|s| position_rmse(j, s)).sum::<f64>() / 4.0;
    let (a, b, c) = (rmse(50), rmse(200), rmse(800));
    assert!(a >= b && b >= c, "{a} {b} {c}");
}
