//! Simulator checks against analytic and independently computed references.

mod common;

use plume::seed::{self, Stream};
use plume::sim::{
    generate_wind_field, rasterize_sources, sample_scenario, solve_advection_diffusion, EmissionScenario, GridSpec, PointSource,
    ScenarioConfig, SolverConfig, WindConfig, WindField,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn solve(sc: EmissionScenario) -> EmissionScenario {
    solve_advection_diffusion(sc, &SolverConfig::default()).unwrap()
}

#[test]
fn exponential_integral_reference_values() {
    // tabulated values
    assert!((common::exp_integral_e1(1.0) - 0.219_383_934_395_520_3).abs() < 1e-13);
    assert!((common::exp_integral_e1(0.1) - 1.822_923_958_419_390_7).abs() < 1e-12);
    assert!((common::exp_integral_e1(5.0) - 0.001_148_295_591_275_325_9).abs() < 1e-15);
}

#[test]
fn heat_kernel_response() {
    let r = common::heat_kernel_case();
    assert!(r.outer_mass < 1e-3, "plume reached the boundary region: {}", r.outer_mass);
    assert!(r.rel_l2 < 0.05, "relative L2 error {}", r.rel_l2);
}

#[test]
fn centroid_drifts_with_the_wind() {
    let grid = GridSpec {
        nx: 64,
        ny: 64,
        nt: 21,
        lx: 64.0,
        ly: 64.0,
        t_end: 4.0,
    };
    let u = 6.0;
    let (x0, y0) = (12.0 * grid.dx(), 32.0 * grid.dy());
    let wind = WindField::uniform(&grid, &vec![[u, 0.0]; grid.nt]);
    let sc = solve(EmissionScenario::new(grid, vec![PointSource::new(x0, y0, 1.0)], wind, 0.5));
    let moments: Vec<(f64, f64)> = (0..grid.nt)
        .map(|k| {
            let mut m = 0.0;
            let mut mx = 0.0;
            for i in 0..grid.nx {
                for j in 0..grid.ny {
                    let v = sc.phi[[k, i, j]];
                    m += v;
                    mx += v * (i as f64 * grid.dx() - x0);
                }
            }
            (m, mx)
        })
        .collect();
    // every emitted parcel moves at U, so the first moment accelerates at
    // U times the emission rate: d²(∫xφ)/dt² = U · dM/dt
    let dt = grid.dt_out();
    for k in 2..15 {
        let d2mx = (moments[k + 1].1 - 2.0 * moments[k].1 + moments[k - 1].1) / (dt * dt);
        let dm = (moments[k + 1].0 - moments[k - 1].0) / (2.0 * dt);
        let est = d2mx / dm;
        assert!((est - u).abs() < 0.05 * u, "frame {k}: drift {est}");
    }
}

#[test]
fn mass_budget_while_interior() {
    let grid = GridSpec {
        nx: 48,
        ny: 48,
        nt: 11,
        lx: 48.0,
        ly: 48.0,
        t_end: 2.0,
    };
    let sources = vec![PointSource::new(20.3, 22.9, 1.3), PointSource::new(27.1, 25.4, 0.6)];
    let total: f64 = sources.iter().map(|s| s.strength).sum();
    let wind = WindField::uniform(&grid, &vec![[1.5, -1.0]; grid.nt]);
    let sc = solve(EmissionScenario::new(grid, sources, wind, 1.0));
    let area = grid.dx() * grid.dy();
    let mass: Vec<f64> = (0..grid.nt).map(|k| sc.phi.index_axis(ndarray::Axis(0), k).sum() * area).collect();
    for k in 1..grid.nt {
        let rate = (mass[k] - mass[k - 1]) / grid.dt_out();
        assert!((rate - total).abs() < 0.02 * total, "frame {k}: rate {rate}");
    }
}

#[test]
fn superposition_of_sources() {
    let grid = GridSpec {
        nx: 32,
        ny: 32,
        nt: 8,
        lx: 32.0,
        ly: 32.0,
        t_end: 1.0,
    };
    let wind = generate_wind_field(&grid, &WindConfig::default(), 11).unwrap();
    let s1 = PointSource::new(9.4, 13.2, 1.7);
    let s2 = PointSource::new(21.8, 18.05, 0.8);
    let a = solve(EmissionScenario::new(grid, vec![s1], wind.clone(), 2.0));
    let b = solve(EmissionScenario::new(grid, vec![s2], wind.clone(), 2.0));
    let ab = solve(EmissionScenario::new(grid, vec![s1, s2], wind, 2.0));
    let err = (&a.phi + &b.phi - &ab.phi).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-8, "{err}");
}

#[test]
fn generated_scenarios_are_positive_and_reproducible() {
    let grid = GridSpec {
        nx: 32,
        ny: 32,
        nt: 10,
        lx: 32.0,
        ly: 32.0,
        t_end: 1.0,
    };
    let cfg = ScenarioConfig {
        detection_cells: Some(4),
        ..ScenarioConfig::default()
    };
    for s in 0..10 {
        let make = || solve(sample_scenario(&grid, &cfg, &WindConfig::default(), s).unwrap());
        let (a, b) = (make(), make());
        assert_eq!(a, b);
        let min = a.phi.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(min >= -1e-10, "seed {s}: min {min}");
        assert!(a.phi.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn source_count_is_uniform() {
    let grid = GridSpec {
        nx: 16,
        ny: 16,
        nt: 2,
        lx: 16.0,
        ly: 16.0,
        t_end: 1.0,
    };
    let cfg = ScenarioConfig {
        detection_cells: None,
        ..ScenarioConfig::default()
    };
    let n = 10_000;
    let mut counts = [0usize; 4];
    for s in 0..n {
        let sc = sample_scenario(&grid, &cfg, &WindConfig::default(), seed::derive(5, Stream::Scenario, &[s])).unwrap();
        counts[sc.sources.len() - 1] += 1;
    }
    let expected = n as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9% quantile of chi-square with 3 degrees of freedom
    assert!(chi2 < 16.27, "chi-square {chi2} for {counts:?}");
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() <= 0.02);
    }
}

#[test]
fn five_source_range_is_realised() {
    let grid = GridSpec::default();
    let cfg = ScenarioConfig {
        source_count: [1, 5],
        ..ScenarioConfig::default()
    };
    let mut seen = [false; 5];
    for s in 0..200 {
        let sc = sample_scenario(&grid, &cfg, &WindConfig::default(), s).unwrap();
        seen[sc.sources.len() - 1] = true;
    }
    assert!(seen.iter().all(|&v| v));
}

#[test]
fn rasterised_mass_matches_strengths() {
    let grid = GridSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.gen_range(1..6);
        let sources: Vec<PointSource> = (0..n)
            .map(|_| PointSource::new(rng.gen_range(0.0..grid.lx), rng.gen_range(0.0..grid.ly), rng.gen_range(0.1..3.0)))
            .collect();
        let f = rasterize_sources(&sources, &grid).unwrap();
        let mass = f.sum() * grid.dx() * grid.dy();
        let total: f64 = sources.iter().map(|s| s.strength).sum();
        assert!((mass - total).abs() < 1e-12, "{mass} vs {total}");
    }
}

/// Reference OU process sampled exactly at spacing `dt`, stationary start.
fn reference_ou(n: usize, dt: f64, tau: f64, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = (-dt / tau).exp();
    let mut x = std * rng.sample::<f64, _>(StandardNormal);
    let mut out = vec![x];
    for _ in 1..n {
        x = a * x + std * (1.0 - a * a).sqrt() * rng.sample::<f64, _>(StandardNormal);
        out.push(x);
    }
    out
}

fn ensemble_autocorrelation(series: &[Vec<f64>], t0: usize, lag: usize) -> f64 {
    let n = series.len() as f64;
    let mean = |k: usize| series.iter().map(|s| s[k]).sum::<f64>() / n;
    let (m0, m1) = (mean(t0), mean(t0 + lag));
    let cov = series.iter().map(|s| (s[t0] - m0) * (s[t0 + lag] - m1)).sum::<f64>() / n;
    let v0 = series.iter().map(|s| (s[t0] - m0).powi(2)).sum::<f64>() / n;
    let v1 = series.iter().map(|s| (s[t0 + lag] - m1).powi(2)).sum::<f64>() / n;
    cov / (v0 * v1).sqrt()
}

#[test]
fn wind_autocorrelation_matches_ou_reference() {
    let grid = GridSpec::default();
    let cfg = WindConfig {
        mean_speed: 1.0,
        fluctuation_std: 0.5,
        relaxation_time: 0.25,
        direction: Some(0.0),
        ..WindConfig::default()
    };
    let lag = (0.25 * (grid.nt - 1) as f64).round() as usize;
    let t0 = 5;
    let ours: Vec<Vec<f64>> = (0..200u64)
        .map(|s| {
            let w = generate_wind_field(&grid, &cfg, 7 + s).unwrap();
            (0..grid.nt).map(|k| w.u[[k, 0, 0, 0]]).collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reference: Vec<Vec<f64>> = (0..2000)
        .map(|_| reference_ou(grid.nt, grid.dt_out(), cfg.relaxation_time, cfg.fluctuation_std, &mut rng))
        .collect();
    let rho = ensemble_autocorrelation(&ours, t0, lag);
    let rho_ref = ensemble_autocorrelation(&reference, t0, lag);
    assert!((0.2..=0.6).contains(&rho), "autocorrelation {rho}");
    assert!((rho - rho_ref).abs() < 0.15, "ours {rho}, reference {rho_ref}");
}
