//! On-disk scenario datasets.
//!
//! Layout: `manifest.json` at the root and one directory per scenario
//! (`scenario_00000/`, …, plus `ood_00000/`, … for held-out source counts)
//! holding `phi.f32` (`nt·nx·ny`, time-major), `wind.f32` (`nt·nx·ny·2`) and
//! `sources.json`. Arrays are little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::IoContext;
use crate::seed::{self, Stream};
use crate::sim::{sample_scenario, solve_advection_diffusion, EmissionScenario, GridSpec, PointSource, ScenarioConfig, WindField};
use crate::{Error, Result};

pub const DTYPE: &str = "float32-little-endian";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub grid: GridSpec,
    pub scenarios: usize,
    pub ood_scenarios: usize,
    pub diffusivity: f64,
    pub dtype: String,
    pub config_hash: String,
    pub root_seed: u64,
    pub complete: bool,
}

/// Which family a scenario belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    /// Regular scenarios, later divided into train and test.
    Main,
    /// Scenarios with an out-of-distribution source count.
    Ood,
}

fn scenario_dir_name(split: Split, index: usize) -> String {
    match split {
        Split::Main => format!("scenario_{index:05}"),
        Split::Ood => format!("ood_{index:05}"),
    }
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).at(path)
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).at(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Dataset(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Writes one solved scenario into `dir` (which must exist).
pub fn write_scenario(dir: &Path, scenario: &EmissionScenario) -> Result<()> {
    write_f32(&dir.join("phi.f32"), scenario.phi.iter().copied())?;
    write_f32(&dir.join("wind.f32"), scenario.wind.u.iter().copied())?;
    let path = dir.join("sources.json");
    fs::write(&path, serde_json::to_vec_pretty(&scenario.sources)?).at(&path)
}

pub fn read_scenario(dir: &Path, grid: &GridSpec, diffusivity: f64) -> Result<EmissionScenario> {
    let (nt, nx, ny) = (grid.nt, grid.nx, grid.ny);
    let phi = read_f32(&dir.join("phi.f32"), nt * nx * ny)?;
    let wind = read_f32(&dir.join("wind.f32"), nt * nx * ny * 2)?;
    let path = dir.join("sources.json");
    let sources: Vec<PointSource> = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
    let mut scenario = EmissionScenario::new(
        *grid,
        sources,
        WindField {
            u: Array4::from_shape_vec((nt, nx, ny, 2), wind).expect("length checked"),
        },
        diffusivity,
    );
    scenario.phi = Array3::from_shape_vec((nt, nx, ny), phi).expect("length checked");
    Ok(scenario)
}

/// Simulates one scenario of the dataset described by `cfg`.
pub fn simulate(cfg: &ExperimentConfig, split: Split, index: usize) -> Result<EmissionScenario> {
    let (seed, scenario_cfg) = match split {
        Split::Main => (seed::derive(cfg.seed, Stream::Scenario, &[index as u64]), cfg.scenario.clone()),
        Split::Ood => {
            let n = cfg.dataset.ood_source_count;
            let sc = ScenarioConfig {
                source_count: [n, n],
                ..cfg.scenario.clone()
            };
            (seed::derive(cfg.seed, Stream::OutOfDistribution, &[index as u64]), sc)
        }
    };
    let scenario = sample_scenario(&cfg.grid, &scenario_cfg, &cfg.wind, seed)?;
    solve_advection_diffusion(scenario, &cfg.solver)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let tmp = dir.join(".manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?).at(&tmp)?;
    fs::rename(&tmp, &path).at(&path)
}

/// Summary of a generation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationStats {
    pub written: usize,
    pub skipped: usize,
}

/// Generates (or completes) the dataset in `dir`. Scenarios already present
/// are kept; each scenario is written to a temporary directory and renamed
/// into place, and a failed scenario is cleaned up and retried once.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<GenerationStats> {
    cfg.validate()?;
    fs::create_dir_all(dir).at(dir)?;
    let hash = cfg.dataset_hash();
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let existing: Manifest = serde_json::from_slice(&fs::read(&manifest_path).at(&manifest_path)?)?;
        if existing.config_hash != hash {
            return Err(Error::HashMismatch(format!(
                "{} was generated with config {}, current config is {}",
                dir.display(),
                existing.config_hash,
                hash
            )));
        }
    }
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        grid: cfg.grid,
        scenarios: cfg.dataset.scenarios,
        ood_scenarios: cfg.dataset.ood_scenarios,
        diffusivity: cfg.scenario.diffusivity,
        dtype: DTYPE.into(),
        config_hash: hash,
        root_seed: cfg.seed,
        complete: false,
    };
    write_manifest(dir, &manifest)?;

    let jobs: Vec<(Split, usize)> = (0..cfg.dataset.scenarios)
        .map(|i| (Split::Main, i))
        .chain((0..cfg.dataset.ood_scenarios).map(|i| (Split::Ood, i)))
        .collect();
    let outcomes: Vec<Result<bool>> = jobs
        .par_iter()
        .map(|&(split, i)| {
            let target = dir.join(scenario_dir_name(split, i));
            if target.join("sources.json").exists() {
                return Ok(false);
            }
            match generate_one(cfg, dir, split, i) {
                Ok(()) => Ok(true),
                Err(first) => {
                    log::warn!("scenario {i} ({split:?}) failed: {first}; retrying once");
                    generate_one(cfg, dir, split, i).map(|()| true)
                }
            }
        })
        .collect();
    let mut stats = GenerationStats { written: 0, skipped: 0 };
    for outcome in outcomes {
        if outcome? {
            stats.written += 1;
        } else {
            stats.skipped += 1;
        }
    }
    manifest.complete = true;
    write_manifest(dir, &manifest)?;
    Ok(stats)
}

fn generate_one(cfg: &ExperimentConfig, dir: &Path, split: Split, index: usize) -> Result<()> {
    let name = scenario_dir_name(split, index);
    let tmp = dir.join(format!(".tmp_{name}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    let result = (|| {
        let scenario = simulate(cfg, split, index)?;
        fs::create_dir_all(&tmp).at(&tmp)?;
        write_scenario(&tmp, &scenario)?;
        let target = dir.join(&name);
        if target.exists() {
            fs::remove_dir_all(&target).at(&target)?;
        }
        fs::rename(&tmp, &target).at(&target)
    })();
    if result.is_err() && tmp.exists() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

/// A generated dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
        if manifest.dtype != DTYPE || manifest.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset format {} v{}",
                manifest.dtype, manifest.format_version
            )));
        }
        if !manifest.complete {
            return Err(Error::Dataset(format!("{} is incomplete; rerun generate", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Opens the dataset and checks it was generated from `cfg`.
    pub fn open_for(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let ds = Self::open(root)?;
        if ds.manifest.config_hash != cfg.dataset_hash() {
            return Err(Error::HashMismatch(format!(
                "dataset {} has config hash {}, expected {}",
                root.display(),
                ds.manifest.config_hash,
                cfg.dataset_hash()
            )));
        }
        Ok(ds)
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Main => self.manifest.scenarios,
            Split::Ood => self.manifest.ood_scenarios,
        }
    }

    pub fn load(&self, split: Split, index: usize) -> Result<EmissionScenario> {
        if index >= self.len(split) {
            return Err(Error::UnknownScenario(index));
        }
        read_scenario(
            &self.root.join(scenario_dir_name(split, index)),
            &self.manifest.grid,
            self.manifest.diffusivity,
        )
    }
}
