//! End-to-end commands: generate, train, evaluate, sweeps and plots.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{self, Dataset, GenerationStats, Split};
use crate::error::IoContext;
use crate::evaluation::{decode_detections, spearman, MetricsAccumulator, MetricsReport};
use crate::loss::build_target_grid;
use crate::model::{DetectionGrid, FieldPrediction, MultiTaskModel};
use crate::seed::{self, Stream};
use crate::sim::EmissionScenario;
use crate::train::{observe, Checkpoint, DataSplit, Trainer, CHECKPOINT_FILE};
use crate::{plot, Error, Result};

/// Writes `value` as pretty JSON.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).at(path)
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Main => 0,
        Split::Ood => 1,
    }
}

/// Seed of the fixed evaluation network for one scenario and sensor count.
pub fn eval_network_seed(cfg: &ExperimentConfig, split: Split, index: usize, sensors: usize) -> u64 {
    seed::derive(
        cfg.seed,
        Stream::EvalSensors,
        &[cfg.eval.sensor_seed, split_tag(split), index as u64, sensors as u64],
    )
}

/// Everything produced for one evaluated scenario.
pub struct ScenarioPrediction {
    pub scenario: EmissionScenario,
    pub network: Vec<[usize; 2]>,
    pub field: FieldPrediction,
    pub detection: DetectionGrid,
}

pub fn predict_scenario(
    model: &MultiTaskModel<f32>,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    split: Split,
    index: usize,
    sensors: usize,
) -> Result<ScenarioPrediction> {
    let scenario = dataset.load(split, index)?;
    let net_seed = eval_network_seed(cfg, split, index, sensors);
    let (input, network) = observe(&scenario, [sensors, sensors], net_seed, None)?;
    let network = network.locations().to_vec();
    let (field, detection) = model.predict(&input)?;
    Ok(ScenarioPrediction {
        scenario,
        network,
        field,
        detection,
    })
}

/// Metrics over the given scenarios, each observed by its fixed network of `sensors` sensors.
pub fn evaluate(
    model: &MultiTaskModel<f32>,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    scenarios: &[(Split, usize)],
    sensors: usize,
) -> Result<MetricsReport> {
    let s = model.config.detection_cells;
    let results: Vec<Result<(usize, ScenarioPrediction)>> = scenarios
        .par_iter()
        .map(|&(split, i)| predict_scenario(model, dataset, cfg, split, i, sensors).map(|p| (i, p)))
        .collect();
    let mut acc = MetricsAccumulator::new();
    for r in results {
        let (i, p) = r?;
        let target = build_target_grid(&p.scenario, s)?;
        acc.add(i, sensors, &p.field, &p.detection, &p.scenario.phi, &target, cfg.eval.threshold, cfg.eval.pi_level)?;
    }
    Ok(acc.finish(cfg.eval.threshold))
}

fn test_scenarios(cfg: &ExperimentConfig, dataset: &Dataset) -> Vec<(Split, usize)> {
    let split = DataSplit::for_config(cfg, dataset.len(Split::Main));
    let mut test: Vec<(Split, usize)> = split.test.into_iter().map(|i| (Split::Main, i)).collect();
    if let Some(cap) = cfg.sweep.max_scenarios {
        test.truncate(cap);
    }
    test
}

/// Rank correlation of one metric along a sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub rho: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub values: Vec<usize>,
    /// One report per axis value; `None` when no scenario fell into the bin.
    pub reports: Vec<Option<MetricsReport>>,
    pub training_scenarios: usize,
    pub rmse_trend: Option<Trend>,
    pub precision_trend: Option<Trend>,
    pub source_mag_trend: Option<Trend>,
}

impl SweepResult {
    fn new(axis: &str, values: Vec<usize>, reports: Vec<Option<MetricsReport>>, training_scenarios: usize) -> Self {
        let trend = |metric: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<Trend> {
            let pts: Vec<(f64, f64)> = values
                .iter()
                .zip(&reports)
                .filter_map(|(&v, r)| r.as_ref().and_then(metric).map(|m| (v as f64, m)))
                .collect();
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            spearman(&x, &y).ok().map(|(rho, p_value)| Trend { rho, p_value })
        };
        let rmse_trend = trend(&|r| Some(r.recon_rmse));
        let precision_trend = trend(&|r| Some(r.precision));
        let source_mag_trend = trend(&|r| r.source_mag_mse);
        Self {
            axis: axis.into(),
            values,
            reports,
            training_scenarios,
            rmse_trend,
            precision_trend,
            source_mag_trend,
        }
    }

    pub fn report_at(&self, value: usize) -> Option<&MetricsReport> {
        let i = self.values.iter().position(|&v| v == value)?;
        self.reports[i].as_ref()
    }
}

pub fn sweep_sensors(model: &MultiTaskModel<f32>, dataset: &Dataset, cfg: &ExperimentConfig) -> Result<SweepResult> {
    let nodes = cfg.grid.nodes();
    if let Some(&bad) = cfg.sweep.sensor_counts.iter().find(|&&c| c > nodes) {
        return Err(Error::Config(format!("sensor count {bad} exceeds the {nodes} grid nodes")));
    }
    let test = test_scenarios(cfg, dataset);
    let mut reports = Vec::new();
    for &count in &cfg.sweep.sensor_counts {
        log::info!("sensor sweep: {count} sensors");
        reports.push(Some(evaluate(model, dataset, cfg, &test, count)?));
    }
    let n_train = DataSplit::for_config(cfg, dataset.len(Split::Main)).train.len();
    Ok(SweepResult::new("sensors", cfg.sweep.sensor_counts.clone(), reports, n_train))
}

/// Test scenarios binned by source count; counts equal to the held-out
/// source count are taken from the out-of-distribution scenarios.
pub fn source_bins(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<(usize, Vec<(Split, usize)>)>> {
    let split = DataSplit::for_config(cfg, dataset.len(Split::Main));
    let mut bins: Vec<(usize, Vec<(Split, usize)>)> = cfg.sweep.source_counts.iter().map(|&c| (c, Vec::new())).collect();
    let ood: Vec<(Split, usize)> = (0..dataset.len(Split::Ood)).map(|i| (Split::Ood, i)).collect();
    let candidates = split.test.iter().map(|&i| (Split::Main, i)).chain(ood);
    for (sp, i) in candidates {
        let n = dataset.load(sp, i)?.sources.len();
        let from_ood = sp == Split::Ood;
        let held_out = n == cfg.dataset.ood_source_count && cfg.dataset.ood_scenarios > 0;
        if from_ood != held_out {
            continue;
        }
        if let Some((_, bin)) = bins.iter_mut().find(|(c, _)| *c == n) {
            if cfg.sweep.max_scenarios.is_none_or(|cap| bin.len() < cap) {
                bin.push((sp, i));
            }
        }
    }
    Ok(bins)
}

pub fn sweep_sources(model: &MultiTaskModel<f32>, dataset: &Dataset, cfg: &ExperimentConfig) -> Result<SweepResult> {
    let bins = source_bins(cfg, dataset)?;
    let mut reports = Vec::new();
    for (count, scenarios) in &bins {
        log::info!("source sweep: {count} sources, {} scenarios", scenarios.len());
        reports.push(if scenarios.is_empty() {
            None
        } else {
            Some(evaluate(model, dataset, cfg, scenarios, cfg.observation.eval_sensors)?)
        });
    }
    let n_train = DataSplit::for_config(cfg, dataset.len(Split::Main)).train.len();
    Ok(SweepResult::new("sources", cfg.sweep.source_counts.clone(), reports, n_train))
}

/// Writes `config.resolved.json` into `out`.
pub fn write_resolved_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        config_hash: String,
        dataset_hash: String,
        model_hash: String,
        config: &'a ExperimentConfig,
    }
    write_json(
        &out.join("config.resolved.json"),
        &Resolved {
            config_hash: cfg.hash(),
            dataset_hash: cfg.dataset_hash(),
            model_hash: cfg.model_hash(),
            config: cfg,
        },
    )
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerationStats> {
    write_resolved_config(cfg, out)?;
    dataset::generate(cfg, &cfg.dataset_path(out))
}

/// Trains, resuming from `resume` or from an existing checkpoint in `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<Checkpoint> {
    write_resolved_config(cfg, out)?;
    let ds = Dataset::open_for(&cfg.dataset_path(out), cfg)?;
    let existing = out.join(CHECKPOINT_FILE);
    let resume: Option<PathBuf> = resume.map(Path::to_path_buf).or_else(|| existing.exists().then_some(existing));
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg, &ds, Checkpoint::load(&path)?)?,
        None => Trainer::new(cfg, &ds)?,
    };
    trainer.run(Some(out))?;
    Ok(trainer.checkpoint())
}

fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MultiTaskModel<f32>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_config(cfg)?;
    ckpt.model(cfg)
}

pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<MetricsReport> {
    write_resolved_config(cfg, out)?;
    let model = load_model(cfg, checkpoint)?;
    let ds = Dataset::open_for(&cfg.dataset_path(out), cfg)?;
    let split = DataSplit::for_config(cfg, ds.len(Split::Main));
    let test: Vec<(Split, usize)> = split.test.iter().map(|&i| (Split::Main, i)).collect();
    let report = evaluate(&model, &ds, cfg, &test, cfg.observation.eval_sensors)?;
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

pub fn cmd_sweep_sensors(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<SweepResult> {
    write_resolved_config(cfg, out)?;
    let model = load_model(cfg, checkpoint)?;
    let ds = Dataset::open_for(&cfg.dataset_path(out), cfg)?;
    let result = sweep_sensors(&model, &ds, cfg)?;
    write_json(&out.join("sweep_sensors.json"), &result)?;
    Ok(result)
}

pub fn cmd_sweep_sources(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<SweepResult> {
    write_resolved_config(cfg, out)?;
    let model = load_model(cfg, checkpoint)?;
    let ds = Dataset::open_for(&cfg.dataset_path(out), cfg)?;
    let result = sweep_sources(&model, &ds, cfg)?;
    write_json(&out.join("sweep_sources.json"), &result)?;
    Ok(result)
}

/// Renders the figures for one test scenario. `compare` is a second
/// checkpoint (typically the other loss variant) for the error comparison.
pub fn cmd_plot(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, scenario: usize, compare: Option<&Path>) -> Result<Vec<PathBuf>> {
    write_resolved_config(cfg, out)?;
    let ds = Dataset::open_for(&cfg.dataset_path(out), cfg)?;
    if scenario >= ds.len(Split::Main) {
        return Err(Error::UnknownScenario(scenario));
    }
    let model = load_model(cfg, checkpoint)?;
    let sensors = cfg.observation.eval_sensors;
    let p = predict_scenario(&model, &ds, cfg, Split::Main, scenario, sensors)?;
    let dir = out.join("plots");
    fs::create_dir_all(&dir).at(&dir)?;
    let frame = cfg.plot.frame.unwrap_or(cfg.grid.nt - 1).min(cfg.grid.nt - 1);
    let mut written = Vec::new();

    let path = dir.join(format!("scenario_{scenario:05}_field.png"));
    plot::field_panels(&p.scenario.phi, &p.field.phi_mu, frame, &p.network, &path)?;
    written.push(path);

    let dets = decode_detections(&p.detection, &cfg.grid, cfg.eval.threshold)?;
    let path = dir.join(format!("scenario_{scenario:05}_sources.png"));
    plot::source_map(&p.scenario, frame, &dets, &path)?;
    written.push(path);

    let z = crate::evaluation::z_for_level(cfg.eval.pi_level)?;
    for &row in &cfg.plot.slice_rows {
        if row >= cfg.grid.ny {
            log::warn!("slice row {row} is outside the grid; skipped");
            continue;
        }
        let path = dir.join(format!("scenario_{scenario:05}_slice_y{row}.png"));
        plot::slice_plot(&p.scenario.phi, &p.field, frame, row, z, &path)?;
        written.push(path);
    }

    if let Some(other) = compare {
        let other_cfg = {
            let mut c = cfg.clone();
            c.loss.nll = !cfg.loss.nll;
            c
        };
        let ckpt = Checkpoint::load(other)?;
        let other_model = if ckpt.config_hash == other_cfg.model_hash() {
            ckpt.model(&other_cfg)?
        } else {
            ckpt.check_config(cfg)?;
            ckpt.model(cfg)?
        };
        let q = predict_scenario(&other_model, &ds, cfg, Split::Main, scenario, sensors)?;
        let path = dir.join(format!("scenario_{scenario:05}_abs_error.png"));
        plot::error_comparison(&p.scenario.phi, &p.field.phi_mu, &q.field.phi_mu, frame, &path)?;
        written.push(path);
    }
    Ok(written)
}
