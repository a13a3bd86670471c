use ndarray::s;
use serde::{Deserialize, Serialize};

use super::{rasterize_sources, EmissionScenario, GridSpec, WindField};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Upper bound on the combined advective + diffusive Courant number.
    pub cfl: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { cfl: 0.8 }
    }
}

/// Number of explicit substeps needed between output frames `k` and `k+1`.
///
/// Both the per-axis monotonicity bound
/// `dt·(|u|/dx + |v|/dy + 2K/dx² + 2K/dy²)` and the isotropic bound
/// `dt·(|u|max/h + 4K/h²)` with `h = min(dx, dy)` are kept below `cfl`.
pub fn stable_substeps(grid: &GridSpec, wind: &WindField, k: usize, diffusivity: f64, cfl: f64) -> usize {
    let (dx, dy) = (grid.dx(), grid.dy());
    let h = dx.min(dy);
    let mut axis_rate: f64 = 0.0;
    let mut speed: f64 = 0.0;
    for frame in [k, (k + 1).min(grid.nt - 1)] {
        for v in wind.u.slice(s![frame, .., .., ..]).lanes(ndarray::Axis(2)) {
            axis_rate = axis_rate.max(v[0].abs() / dx + v[1].abs() / dy);
            speed = speed.max(v[0].hypot(v[1]));
        }
    }
    let rate = (axis_rate + 2.0 * diffusivity * (1.0 / (dx * dx) + 1.0 / (dy * dy)))
        .max(speed / h + 4.0 * diffusivity / (h * h));
    if rate == 0.0 {
        return 1;
    }
    (grid.dt_out() * rate / cfl).ceil().max(1.0) as usize
}

/// Integrates `∂φ/∂t + u·∇φ − K∇²φ = Σ q_i` from `φ(0) = 0` with first-order
/// upwind advection, central diffusion and forward Euler, storing `φ` at every
/// output frame. Boundaries are zero-gradient (ghost node = boundary node).
pub fn solve_advection_diffusion(mut scenario: EmissionScenario, cfg: &SolverConfig) -> Result<EmissionScenario> {
    let grid = scenario.grid;
    grid.validate()?;
    let k_diff = scenario.diffusivity;
    if !(k_diff.is_finite() && k_diff >= 0.0) {
        return Err(Error::Config(format!("diffusivity must be >= 0, got {k_diff}")));
    }
    if !(cfg.cfl > 0.0 && cfg.cfl <= 1.0) {
        return Err(Error::Config(format!("cfl must lie in (0, 1], got {}", cfg.cfl)));
    }
    let expect = (grid.nt, grid.nx, grid.ny, 2);
    if scenario.wind.u.dim() != expect {
        return Err(Error::Shape(format!(
            "wind field has shape {:?}, expected {expect:?}",
            scenario.wind.u.dim()
        )));
    }
    if scenario.wind.u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wind field".into()));
    }

    let forcing = rasterize_sources(&scenario.sources, &grid)?;
    let forcing: Vec<f64> = forcing.iter().copied().collect();
    let (nx, ny) = (grid.nx, grid.ny);
    let n = nx * ny;
    let (dx, dy) = (grid.dx(), grid.dy());
    let (kx, ky) = (k_diff / (dx * dx), k_diff / (dy * dy));

    let mut phi = vec![0.0f64; n];
    let mut next = vec![0.0f64; n];
    let mut ux = vec![0.0f64; n];
    let mut uy = vec![0.0f64; n];
    let mut step = 0usize;

    scenario.phi.fill(0.0);
    for k in 0..grid.nt - 1 {
        let substeps = stable_substeps(&grid, &scenario.wind, k, k_diff, cfg.cfl);
        let dt = grid.dt_out() / substeps as f64;
        let w0 = scenario.wind.u.slice(s![k, .., .., ..]);
        let w1 = scenario.wind.u.slice(s![k + 1, .., .., ..]);
        for sub in 0..substeps {
            let alpha = sub as f64 / substeps as f64;
            for ((idx, a), b) in w0.lanes(ndarray::Axis(2)).into_iter().enumerate().zip(w1.lanes(ndarray::Axis(2))) {
                ux[idx] = (1.0 - alpha) * a[0] + alpha * b[0];
                uy[idx] = (1.0 - alpha) * a[1] + alpha * b[1];
            }

            let mut max_abs: f64 = 0.0;
            let mut finite = true;
            for i in 0..nx {
                let im = if i == 0 { 0 } else { i - 1 };
                let ip = if i + 1 == nx { i } else { i + 1 };
                for j in 0..ny {
                    let jm = if j == 0 { 0 } else { j - 1 };
                    let jp = if j + 1 == ny { j } else { j + 1 };
                    let c = i * ny + j;
                    let p = phi[c];
                    let (pxm, pxp) = (phi[im * ny + j], phi[ip * ny + j]);
                    let (pym, pyp) = (phi[i * ny + jm], phi[i * ny + jp]);
                    let u = ux[c];
                    let v = uy[c];
                    let adv_x = if u >= 0.0 { u * (p - pxm) / dx } else { u * (pxp - p) / dx };
                    let adv_y = if v >= 0.0 { v * (p - pym) / dy } else { v * (pyp - p) / dy };
                    let lap = kx * (pxp - 2.0 * p + pxm) + ky * (pyp - 2.0 * p + pym);
                    let val = p + dt * (lap - adv_x - adv_y + forcing[c]);
                    finite &= val.is_finite();
                    max_abs = max_abs.max(val.abs());
                    next[c] = val;
                }
            }
            step += 1;
            if !finite {
                return Err(Error::SolverDiverged { step, max_abs });
            }
            std::mem::swap(&mut phi, &mut next);
        }
        let mut frame = scenario.phi.slice_mut(s![k + 1, .., ..]);
        for (dst, &src) in frame.iter_mut().zip(phi.iter()) {
            *dst = src;
        }
    }
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::PointSource;

    fn small_grid() -> GridSpec {
        GridSpec {
            nx: 24,
            ny: 24,
            nt: 6,
            lx: 24.0,
            ly: 24.0,
            t_end: 1.0,
        }
    }

    #[test]
    fn no_sources_stay_zero() {
        let g = small_grid();
        let series = vec![[3.0, -1.0]; g.nt];
        let sc = EmissionScenario::new(g, vec![], WindField::uniform(&g, &series), 1.0);
        let out = solve_advection_diffusion(sc, &SolverConfig::default()).unwrap();
        assert!(out.phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_frame_is_initial_condition() {
        let g = small_grid();
        let sc = EmissionScenario::new(g, vec![PointSource::new(12.0, 12.0, 1.0)], WindField::zeros(&g), 1.0);
        let out = solve_advection_diffusion(sc, &SolverConfig::default()).unwrap();
        assert!(out.phi.slice(s![0, .., ..]).iter().all(|&v| v == 0.0));
        assert!(out.phi.slice(s![1, .., ..]).sum() > 0.0);
    }

    #[test]
    fn substeps_respect_bounds() {
        let g = small_grid();
        let series = vec![[10.0, 5.0]; g.nt];
        let w = WindField::uniform(&g, &series);
        let n = stable_substeps(&g, &w, 0, 2.0, 0.8);
        let dt = g.dt_out() / n as f64;
        let h = g.dx().min(g.dy());
        assert!(dt * (10.0f64.hypot(5.0) / h + 8.0 / (h * h)) <= 0.8 + 1e-12);
        assert!(dt * (15.0 / h + 8.0 / (h * h)) <= 0.8 + 1e-12);
    }

    #[test]
    fn rejects_non_finite_wind() {
        let g = small_grid();
        let mut w = WindField::zeros(&g);
        w.u[[2, 3, 3, 0]] = f64::NAN;
        let sc = EmissionScenario::new(g, vec![], w, 1.0);
        assert!(matches!(
            solve_advection_diffusion(sc, &SolverConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let g = GridSpec {
            t_end: 1e3,
            ..small_grid()
        };
        let sc = EmissionScenario::new(g, vec![PointSource::new(12.0, 12.0, f64::MAX)], WindField::zeros(&g), 1.0);
        match solve_advection_diffusion(sc, &SolverConfig::default()) {
            Err(Error::SolverDiverged { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
