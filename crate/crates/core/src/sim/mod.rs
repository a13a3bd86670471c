//! Digital twin: stochastic wind, random emission scenarios and the
//! advection-diffusion solver that fills their concentration fields.

mod scenario;
mod solver;
mod wind;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use scenario::{rasterize_sources, sample_scenario, ScenarioConfig};
pub use solver::{solve_advection_diffusion, stable_substeps, SolverConfig};
pub use wind::{generate_wind_field, WindConfig};

/// Regular space-time grid. Nodes sit at `x = i·dx`, `y = j·dy`, output
/// frames at `t = k·t_end/(nt−1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub lx: f64,
    pub ly: f64,
    pub t_end: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            nt: 40,
            lx: 64.0,
            ly: 64.0,
            t_end: 1.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 {
            return Err(Error::Config(format!(
                "grid must be at least 8x8, got {}x{}",
                self.nx, self.ny
            )));
        }
        if self.nt < 2 {
            return Err(Error::Config(format!("nt must be >= 2, got {}", self.nt)));
        }
        for (name, v) in [("lx", self.lx), ("ly", self.ly), ("t_end", self.t_end)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.lx / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / (self.ny - 1) as f64
    }

    /// Spacing between stored output frames.
    pub fn dt_out(&self) -> f64 {
        self.t_end / (self.nt - 1) as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt_out()
    }

    pub fn nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.lx).contains(&x) && (0.0..=self.ly).contains(&y)
    }

    /// Width of one detection cell in grid nodes when the plane is split into
    /// `s × s` cells. Errors unless `s` divides both extents.
    pub fn cell_width(&self, s: usize) -> Result<(usize, usize)> {
        if s == 0 || self.nx % s != 0 || self.ny % s != 0 {
            return Err(Error::Config(format!(
                "detection grid {s} does not divide the {}x{} grid",
                self.nx, self.ny
            )));
        }
        Ok((self.nx / s, self.ny / s))
    }

    /// Cell containing a continuous location together with the offset of the
    /// location from the cell's top-left corner, in cell widths.
    pub fn locate_cell(&self, s: usize, x: f64, y: f64) -> Result<((usize, usize), (f64, f64))> {
        let (wx, wy) = self.cell_width(s)?;
        let (gx, gy) = (x / self.dx(), y / self.dy());
        let cx = ((gx / wx as f64).floor().max(0.0) as usize).min(s - 1);
        let cy = ((gy / wy as f64).floor().max(0.0) as usize).min(s - 1);
        let rx = (gx - (cx * wx) as f64) / wx as f64;
        let ry = (gy - (cy * wy) as f64) / wy as f64;
        Ok(((cx, cy), (rx, ry)))
    }
}

/// Point emission source `q = c·δ(x − x_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "c")]
    pub strength: f64,
}

impl PointSource {
    pub fn new(x: f64, y: f64, strength: f64) -> Self {
        Self { x, y, strength }
    }
}

/// Velocity field sampled at the output frames, shape `(nt, nx, ny, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindField {
    pub u: Array4<f64>,
}

impl WindField {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            u: Array4::zeros((grid.nt, grid.nx, grid.ny, 2)),
        }
    }

    /// Spatially uniform field from one velocity vector per frame.
    pub fn uniform(grid: &GridSpec, series: &[[f64; 2]]) -> Self {
        let mut u = Array4::zeros((grid.nt, grid.nx, grid.ny, 2));
        for (k, v) in series.iter().enumerate().take(grid.nt) {
            u.slice_mut(ndarray::s![k, .., .., 0]).fill(v[0]);
            u.slice_mut(ndarray::s![k, .., .., 1]).fill(v[1]);
        }
        Self { u }
    }

    pub fn max_speed(&self) -> f64 {
        self.u
            .lanes(ndarray::Axis(3))
            .into_iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }
}

/// One emission scenario of the digital twin. `phi` has shape `(nt, nx, ny)`
/// and is all zeros until the solver has run.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionScenario {
    pub grid: GridSpec,
    pub sources: Vec<PointSource>,
    pub wind: WindField,
    pub diffusivity: f64,
    pub phi: Array3<f64>,
}

impl EmissionScenario {
    pub fn new(grid: GridSpec, sources: Vec<PointSource>, wind: WindField, diffusivity: f64) -> Self {
        let phi = Array3::zeros((grid.nt, grid.nx, grid.ny));
        Self {
            grid,
            sources,
            wind,
            diffusivity,
            phi,
        }
    }
}
