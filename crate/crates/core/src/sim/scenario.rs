use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{generate_wind_field, EmissionScenario, GridSpec, PointSource, WindConfig};
use crate::seed::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Inclusive range for the number of sources.
    pub source_count: [usize; 2],
    /// Inclusive range for emission strengths.
    pub strength: [f64; 2],
    /// Turbulent diffusivity K.
    pub diffusivity: f64,
    /// Sources keep this many grid cells away from every boundary.
    pub margin_cells: f64,
    /// When set, locations are resampled until no two sources share a cell of
    /// the `s × s` detection grid.
    pub detection_cells: Option<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            source_count: [1, 4],
            strength: [0.5, 2.0],
            diffusivity: 4.0,
            margin_cells: 2.0,
            detection_cells: Some(8),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.source_count;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("empty source count range [{lo}, {hi}]")));
        }
        let [a, b] = self.strength;
        if !(a.is_finite() && b.is_finite() && a > 0.0 && a <= b) {
            return Err(Error::Config(format!("empty strength range [{a}, {b}]")));
        }
        if !(self.diffusivity.is_finite() && self.diffusivity >= 0.0) {
            return Err(Error::Config("diffusivity must be >= 0".into()));
        }
        if !(self.margin_cells.is_finite() && self.margin_cells >= 0.0) {
            return Err(Error::Config("margin must be >= 0".into()));
        }
        if let Some(s) = self.detection_cells {
            if hi > s * s {
                return Err(Error::Config(format!(
                    "{hi} sources cannot occupy distinct cells of a {s}x{s} grid"
                )));
            }
        }
        Ok(())
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Draws sources and wind for one scenario; `phi` is left at zero.
pub fn sample_scenario(
    grid: &GridSpec,
    cfg: &ScenarioConfig,
    wind: &WindConfig,
    seed: u64,
) -> Result<EmissionScenario> {
    grid.validate()?;
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let count = rng.gen_range(cfg.source_count[0]..=cfg.source_count[1]);

    let (mx, my) = (cfg.margin_cells * grid.dx(), cfg.margin_cells * grid.dy());
    if 2.0 * mx >= grid.lx || 2.0 * my >= grid.ly {
        return Err(Error::Config("source margin leaves no interior".into()));
    }

    let mut sources = Vec::with_capacity(count);
    let mut occupied = Vec::with_capacity(count);
    let mut attempts = 0;
    while sources.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Config(
                "could not place sources in distinct detection cells".into(),
            ));
        }
        let x = rng.gen_range(mx..=grid.lx - mx);
        let y = rng.gen_range(my..=grid.ly - my);
        if let Some(s) = cfg.detection_cells {
            let (cell, _) = grid.locate_cell(s, x, y)?;
            if occupied.contains(&cell) {
                continue;
            }
            occupied.push(cell);
        }
        let c = rng.gen_range(cfg.strength[0]..=cfg.strength[1]);
        sources.push(PointSource::new(x, y, c));
    }

    let wind = generate_wind_field(grid, wind, seed::derive(seed, Stream::Wind, &[]))?;
    Ok(EmissionScenario::new(*grid, sources, wind, cfg.diffusivity))
}

/// Discretises the point sources as bilinear deposits on the four surrounding
/// nodes, scaled by `1/(dx·dy)` so that `dx·dy·Σ forcing = Σ c`.
pub fn rasterize_sources(sources: &[PointSource], grid: &GridSpec) -> Result<Array2<f64>> {
    let (dx, dy) = (grid.dx(), grid.dy());
    let mut q = Array2::zeros((grid.nx, grid.ny));
    for s in sources {
        if !(s.x.is_finite() && s.y.is_finite() && grid.contains(s.x, s.y)) {
            return Err(Error::SourceOutsideDomain { x: s.x, y: s.y });
        }
        let (gx, gy) = (s.x / dx, s.y / dy);
        let i0 = (gx.floor() as usize).min(grid.nx - 2);
        let j0 = (gy.floor() as usize).min(grid.ny - 2);
        let (fx, fy) = (gx - i0 as f64, gy - j0 as f64);
        let scale = s.strength / (dx * dy);
        q[[i0, j0]] += (1.0 - fx) * (1.0 - fy) * scale;
        q[[i0 + 1, j0]] += fx * (1.0 - fy) * scale;
        q[[i0, j0 + 1]] += (1.0 - fx) * fy * scale;
        q[[i0 + 1, j0 + 1]] += fx * fy * scale;
    }
    Ok(q)
}
