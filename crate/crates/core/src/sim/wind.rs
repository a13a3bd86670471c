use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GridSpec, WindField};
use crate::{seed, Error, Result};

/// Spatially uniform wind whose velocity vector follows an Ornstein-Uhlenbeck
/// process around a mean vector, clipped to `[speed_min, speed_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindConfig {
    /// Magnitude of the mean wind vector.
    pub mean_speed: f64,
    /// Stationary standard deviation of each velocity component.
    pub fluctuation_std: f64,
    /// OU relaxation time, in simulation time units.
    pub relaxation_time: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Mean direction in radians from +x; drawn uniformly when absent.
    pub direction: Option<f64>,
}

impl Default for WindConfig {
    fn default() -> Self {
        Self {
            mean_speed: 16.0,
            fluctuation_std: 6.0,
            relaxation_time: 0.25,
            speed_min: 0.0,
            speed_max: 40.0,
            direction: None,
        }
    }
}

impl WindConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.mean_speed,
            self.fluctuation_std,
            self.relaxation_time,
            self.speed_min,
            self.speed_max,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.direction.map_or(true, f64::is_finite);
        if !finite {
            return Err(Error::Config("wind configuration must be finite".into()));
        }
        if self.speed_min < 0.0 || self.speed_max < self.speed_min {
            return Err(Error::Config(format!(
                "wind speed bounds [{}, {}] are invalid",
                self.speed_min, self.speed_max
            )));
        }
        if self.mean_speed < 0.0 || self.fluctuation_std < 0.0 || self.relaxation_time <= 0.0 {
            return Err(Error::Config(
                "wind mean speed and fluctuation must be >= 0, relaxation time > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Draws the velocity vector at each output frame.
pub(crate) fn wind_series(grid: &GridSpec, cfg: &WindConfig, seed: u64) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let theta = match cfg.direction {
        Some(d) => d,
        None => rng.gen_range(0.0..std::f64::consts::TAU),
    };
    let mean = [cfg.mean_speed * theta.cos(), cfg.mean_speed * theta.sin()];
    let a = (-grid.dt_out() / cfg.relaxation_time).exp();
    let kick = cfg.fluctuation_std * (1.0 - a * a).sqrt();

    let mut dev = [
        cfg.fluctuation_std * rng.sample::<f64, _>(StandardNormal),
        cfg.fluctuation_std * rng.sample::<f64, _>(StandardNormal),
    ];
    let mut out = Vec::with_capacity(grid.nt);
    for k in 0..grid.nt {
        if k > 0 {
            for d in dev.iter_mut() {
                *d = a * *d + kick * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let v = [mean[0] + dev[0], mean[1] + dev[1]];
        out.push(clip_speed(v, mean, cfg.speed_min, cfg.speed_max));
    }
    Ok(out)
}

fn clip_speed(v: [f64; 2], mean: [f64; 2], lo: f64, hi: f64) -> [f64; 2] {
    let speed = v[0].hypot(v[1]);
    if speed > hi {
        let s = if speed > 0.0 { hi / speed } else { 0.0 };
        [v[0] * s, v[1] * s]
    } else if speed < lo {
        let (dir, norm) = if speed > 0.0 {
            (v, speed)
        } else if mean[0].hypot(mean[1]) > 0.0 {
            (mean, mean[0].hypot(mean[1]))
        } else {
            ([1.0, 0.0], 1.0)
        };
        [dir[0] * lo / norm, dir[1] * lo / norm]
    } else {
        v
    }
}

/// Stochastic wind for one scenario; deterministic in `(grid, cfg, seed)`.
pub fn generate_wind_field(grid: &GridSpec, cfg: &WindConfig, seed: u64) -> Result<WindField> {
    grid.validate()?;
    let series = wind_series(grid, cfg, seed)?;
    Ok(WindField::uniform(grid, &series))
}
