//! Sensor networks, point observations and the gridded model input.

use std::collections::HashSet;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::sim::{EmissionScenario, GridSpec, WindField};
use crate::{Error, Result};

/// Sensors on distinct grid nodes, stored as `[ix, iy]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[usize; 2]>", into = "Vec<[usize; 2]>")]
pub struct SensorNetwork {
    locations: Vec<[usize; 2]>,
}

impl SensorNetwork {
    pub fn new(locations: Vec<[usize; 2]>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Config("a sensor network needs at least one sensor".into()));
        }
        let mut seen = HashSet::with_capacity(locations.len());
        for loc in &locations {
            if !seen.insert(*loc) {
                return Err(Error::Config(format!("duplicate sensor location {loc:?}")));
            }
        }
        Ok(Self { locations })
    }

    /// Checks every sensor sits on a node of `grid`.
    pub fn validate_for(&self, grid: &GridSpec) -> Result<()> {
        match self.locations.iter().find(|[i, j]| *i >= grid.nx || *j >= grid.ny) {
            Some(loc) => Err(Error::Config(format!(
                "sensor {loc:?} lies outside the {}x{} grid",
                grid.nx, grid.ny
            ))),
            None => Ok(()),
        }
    }

    pub fn locations(&self) -> &[[usize; 2]] {
        &self.locations
    }

    pub fn count(&self) -> usize {
        self.locations.len()
    }
}

impl TryFrom<Vec<[usize; 2]>> for SensorNetwork {
    type Error = Error;

    fn try_from(v: Vec<[usize; 2]>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SensorNetwork> for Vec<[usize; 2]> {
    fn from(n: SensorNetwork) -> Self {
        n.locations
    }
}

/// Sensor time series `Φ` of shape `(N_o, N_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub phi_obs: Array2<f64>,
    pub network: SensorNetwork,
}

/// Network input: `features` is `(3, nt, nx, ny)` holding the scattered
/// observations and the two wind components; `mask0` is `M0` repeated in time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub features: Array4<f32>,
    pub mask0: Array3<f32>,
}

/// Uniform sensor count in `count_range`, nodes drawn without replacement.
pub fn sample_sensor_network(grid: &GridSpec, count_range: [usize; 2], seed: u64) -> Result<SensorNetwork> {
    let [lo, hi] = count_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("invalid sensor count range [{lo}, {hi}]")));
    }
    if hi > grid.nodes() {
        return Err(Error::Config(format!(
            "{hi} sensors exceed the {} grid nodes",
            grid.nodes()
        )));
    }
    let mut rng = seed::rng(seed);
    let count = rng.gen_range(lo..=hi);
    let locations = sample(&mut rng, grid.nodes(), count)
        .into_iter()
        .map(|flat| [flat / grid.ny, flat % grid.ny])
        .collect();
    SensorNetwork::new(locations)
}

/// Exact point samples of `phi` at each sensor node for every frame.
pub fn extract_observations(scenario: &EmissionScenario, network: &SensorNetwork) -> Result<ObservationSet> {
    network.validate_for(&scenario.grid)?;
    let nt = scenario.grid.nt;
    let mut phi_obs = Array2::zeros((network.count(), nt));
    for (row, &[i, j]) in phi_obs.axis_iter_mut(Axis(0)).zip(network.locations()) {
        let series = scenario.phi.slice(ndarray::s![.., i, j]);
        row.into_iter().zip(series).for_each(|(d, &s)| *d = s);
    }
    Ok(ObservationSet {
        phi_obs,
        network: network.clone(),
    })
}

/// Adds independent `N(0, sigma²)` noise to every reading.
pub fn add_sensor_noise(obs: &mut ObservationSet, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = seed::rng(seed);
    obs.phi_obs
        .iter_mut()
        .for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
}

/// `M0`: one at sensor nodes, zero elsewhere.
pub fn init_mask(network: &SensorNetwork, grid: &GridSpec) -> Result<Array2<f32>> {
    network.validate_for(grid)?;
    let mut m = Array2::zeros((grid.nx, grid.ny));
    for &[i, j] in network.locations() {
        m[[i, j]] = 1.0;
    }
    Ok(m)
}

pub fn build_input(obs: &ObservationSet, wind: &WindField, grid: &GridSpec) -> Result<ModelInput> {
    let (nt, nx, ny) = (grid.nt, grid.nx, grid.ny);
    if obs.phi_obs.dim() != (obs.network.count(), nt) {
        return Err(Error::Shape(format!(
            "observations have shape {:?}, expected ({}, {nt})",
            obs.phi_obs.dim(),
            obs.network.count()
        )));
    }
    if wind.u.dim() != (nt, nx, ny, 2) {
        return Err(Error::Shape(format!(
            "wind has shape {:?}, expected ({nt}, {nx}, {ny}, 2)",
            wind.u.dim()
        )));
    }
    let mask = init_mask(&obs.network, grid)?;
    let mut features = Array4::zeros((3, nt, nx, ny));
    for (series, &[i, j]) in obs.phi_obs.axis_iter(Axis(0)).zip(obs.network.locations()) {
        for (t, &v) in series.iter().enumerate() {
            features[[0, t, i, j]] = v as f32;
        }
    }
    for t in 0..nt {
        for i in 0..nx {
            for j in 0..ny {
                features[[1, t, i, j]] = wind.u[[t, i, j, 0]] as f32;
                features[[2, t, i, j]] = wind.u[[t, i, j, 1]] as f32;
            }
        }
    }
    let mask0 = mask.insert_axis(Axis(0)).broadcast((nt, nx, ny)).expect("broadcast").to_owned();
    Ok(ModelInput { features, mask0 })
}

/// Reads channel 0 back at the sensor nodes; inverse of the scatter in [`build_input`].
pub fn gather_observations(input: &ModelInput, network: &SensorNetwork) -> Array2<f32> {
    let nt = input.features.dim().1;
    Array2::from_shape_fn((network.count(), nt), |(s, t)| {
        let [i, j] = network.locations()[s];
        input.features[[0, t, i, j]]
    })
}
