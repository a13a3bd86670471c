//! Mini-batch training with per-epoch sensor resampling and resumable checkpoints.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Split};
use crate::error::IoContext;
use crate::loss::{build_target_grid, objective, InverseLossTerms, LossBreakdown};
use crate::model::{ModelConfig, MultiTaskModel, Normalizer};
use crate::nn::{Adam, AdamState};
use crate::observation::{add_sensor_noise, build_input, extract_observations, sample_sensor_network, ModelInput, SensorNetwork};
use crate::seed::{self, Stream};
use crate::sim::EmissionScenario;
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Deterministic train/test partition of the regular scenarios.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, train_fraction: f64, root_seed: u64) -> DataSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive(root_seed, Stream::Split, &[])));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut test = idx.split_off(n_train);
    idx.sort_unstable();
    test.sort_unstable();
    DataSplit { train: idx, test }
}

impl DataSplit {
    pub fn for_config(cfg: &ExperimentConfig, n: usize) -> Self {
        let mut split = split_indices(n, cfg.training.train_fraction, cfg.seed);
        if let Some(cap) = cfg.training.max_train_scenarios {
            split.train.truncate(cap);
        }
        split
    }
}

/// Model input for a scenario observed by `network_seed`'s random network.
pub fn observe(
    scenario: &EmissionScenario,
    sensors: [usize; 2],
    network_seed: u64,
    noise: Option<(f64, u64)>,
) -> Result<(ModelInput, SensorNetwork)> {
    let net = sample_sensor_network(&scenario.grid, sensors, network_seed)?;
    let mut obs = extract_observations(scenario, &net)?;
    if let Some((std, seed)) = noise {
        if std > 0.0 {
            add_sensor_noise(&mut obs, std, seed);
        }
    }
    Ok((build_input(&obs, &scenario.wind, &scenario.grid)?, obs.network))
}

/// Root-mean-square scales of concentration and wind over the given scenarios.
pub fn fit_normalizer(dataset: &Dataset, indices: &[usize]) -> Result<Normalizer> {
    let (mut phi_sq, mut phi_n, mut wind_sq, mut wind_n) = (0.0, 0usize, 0.0, 0usize);
    for &i in indices {
        let sc = dataset.load(Split::Main, i)?;
        phi_sq += sc.phi.iter().map(|v| v * v).sum::<f64>();
        phi_n += sc.phi.len();
        wind_sq += sc.wind.u.iter().map(|v| v * v).sum::<f64>();
        wind_n += sc.wind.u.len();
    }
    let rms = |sq: f64, n: usize| {
        let r = (sq / n.max(1) as f64).sqrt();
        if r > 0.0 && r.is_finite() {
            r
        } else {
            1.0
        }
    };
    Ok(Normalizer {
        phi_scale: rms(phi_sq, phi_n),
        wind_scale: rms(wind_sq, wind_n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub inverse: InverseLossTerms,
    pub seconds: f64,
    /// Mean and largest batch-gradient L2 norm before clipping.
    #[serde(default)]
    pub grad_norm_mean: f64,
    #[serde(default)]
    pub grad_norm_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Hash of the configuration sections that determine training.
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Resolved model configuration (including any added depth).
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    pub params: Vec<f32>,
    pub optimizer: AdamState,
    /// Shuffling generator, positioned at the start of the next epoch.
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochStats>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path).at(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn check_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        if self.config_hash != cfg.model_hash() {
            return Err(Error::HashMismatch(format!(
                "checkpoint was trained with config {}, current config is {}",
                self.config_hash,
                cfg.model_hash()
            )));
        }
        Ok(())
    }

    /// Rebuilds the model stored in the checkpoint.
    pub fn model(&self, cfg: &ExperimentConfig) -> Result<MultiTaskModel<f32>> {
        let mut model = MultiTaskModel::with_exact_depth(self.model.clone(), &cfg.grid, self.normalizer, 0)?;
        model.load_flat(&self.params)?;
        Ok(model)
    }
}

/// Trains (or resumes) a model; the checkpoint is rewritten after every epoch.
pub struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    dataset: &'a Dataset,
    split: DataSplit,
    model: MultiTaskModel<f32>,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochStats>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, dataset: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let split = DataSplit::for_config(cfg, dataset.len(Split::Main));
        let normalizer = fit_normalizer(dataset, &split.train)?;
        let model = MultiTaskModel::new(cfg.model.clone(), &cfg.grid, normalizer, seed::derive(cfg.seed, Stream::Init, &[]))?;
        let adam = Adam::new(cfg.training.adam.clone(), model.num_params());
        Ok(Self {
            cfg,
            dataset,
            split,
            model,
            adam,
            rng: seed::rng(seed::derive(cfg.seed, Stream::Shuffle, &[])),
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn resume(cfg: &'a ExperimentConfig, dataset: &'a Dataset, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ckpt.check_config(cfg)?;
        let model = ckpt.model(cfg)?;
        let mut adam = Adam::new(cfg.training.adam.clone(), model.num_params());
        if ckpt.optimizer.m.len() != model.num_params() {
            return Err(Error::Shape("optimizer state does not match the model".into()));
        }
        adam.state = ckpt.optimizer;
        Ok(Self {
            cfg,
            dataset,
            split: DataSplit::for_config(cfg, dataset.len(Split::Main)),
            model,
            adam,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
            history: ckpt.history,
        })
    }

    pub fn model(&self) -> &MultiTaskModel<f32> {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn split(&self) -> &DataSplit {
        &self.split
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.model_hash(),
            epoch: self.epoch,
            model: self.model.config.clone(),
            normalizer: self.model.normalizer,
            params: self.model.flatten(),
            optimizer: self.adam.state.clone(),
            rng: self.rng.clone(),
            history: self.history.clone(),
        }
    }

    /// Runs one epoch. On a non-finite loss the model is left untouched for
    /// the rest of the batch and an error is returned.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        let epoch = self.epoch;
        let mut order = self.split.train.clone();
        order.shuffle(&mut self.rng);
        let root = self.cfg.seed;
        let obs_cfg = &self.cfg.observation;
        let loss_cfg = &self.cfg.loss;
        let s = self.model.config.detection_cells;
        let inv_phi = 1.0 / self.model.normalizer.phi_scale;

        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        let (mut norm_sum, mut norm_max, mut batches) = (0.0f64, 0.0f64, 0usize);
        let mut params = self.model.flatten();
        for batch in order.chunks(self.cfg.training.batch_size) {
            let mut grad = self.model.zeros_like();
            for &idx in batch {
                let scenario = self.dataset.load(Split::Main, idx)?;
                let key = [epoch as u64, idx as u64];
                let (input, _) = observe(
                    &scenario,
                    obs_cfg.sensors,
                    seed::derive(root, Stream::TrainSensors, &key),
                    Some((obs_cfg.noise_std, seed::derive(root, Stream::Noise, &key))),
                )?;
                let target = build_target_grid(&scenario, s)?;
                let phi: Vec<f32> = scenario.phi.iter().map(|&v| (v * inv_phi) as f32).collect();
                let tape = self.model.forward(&input)?;
                let (loss, g) = objective(&tape, &phi, &target, loss_cfg);
                if !loss.total.is_finite() {
                    return Err(Error::TrainingHalted(format!(
                        "non-finite loss at epoch {epoch}, scenario {idx}"
                    )));
                }
                self.model.backward(&tape, &g, &mut grad);
                accumulate(&mut sum, &loss);
                count += 1;
            }
            let scale = 1.0 / batch.len() as f32;
            let mut flat = grad.flatten();
            flat.iter_mut().for_each(|g| *g *= scale);
            if flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingHalted(format!("non-finite gradient at epoch {epoch}")));
            }
            let norm = flat.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            batches += 1;
            if let Some(clip) = self.cfg.training.grad_clip {
                if norm > clip {
                    let k = (clip / norm) as f32;
                    flat.iter_mut().for_each(|g| *g *= k);
                }
            }
            self.adam.step(&mut params, &flat);
            self.model.load_flat(&params)?;
        }
        let n = count.max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: sum.total / n,
            recon: sum.recon / n,
            inverse: InverseLossTerms {
                location: sum.inverse.location / n,
                objectness: sum.inverse.objectness / n,
                no_object: sum.inverse.no_object / n,
                strength: sum.inverse.strength / n,
            },
            seconds: start.elapsed().as_secs_f64(),
            grad_norm_mean: norm_sum / batches.max(1) as f64,
            grad_norm_max: norm_max,
        };
        self.epoch += 1;
        self.history.push(stats);
        Ok(stats)
    }

    /// Trains until the configured number of epochs, saving a checkpoint in
    /// `out` after each one. A halted run leaves the last good checkpoint.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).at(dir)?;
        }
        while self.epoch < self.cfg.training.epochs {
            let stats = self.run_epoch()?;
            log::info!(
                "epoch {} loss {:.5} recon {:.5} inverse {:.5} grad norm {:.3} (max {:.3}) ({:.1}s)",
                stats.epoch + 1,
                stats.loss,
                stats.recon,
                stats.inverse.total(),
                stats.grad_norm_mean,
                stats.grad_norm_max,
                stats.seconds
            );
            if let Some(dir) = out {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        Ok(())
    }
}

fn accumulate(sum: &mut LossBreakdown, l: &LossBreakdown) {
    sum.total += l.total;
    sum.recon += l.recon;
    sum.inverse.location += l.inverse.location;
    sum.inverse.objectness += l.inverse.objectness;
    sum.inverse.no_object += l.inverse.no_object;
    sum.inverse.strength += l.inverse.strength;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_indices(4000, 0.8, 3);
        assert_eq!((a.train.len(), a.test.len()), (3200, 800));
        assert_eq!(a, split_indices(4000, 0.8, 3));
        assert_ne!(a, split_indices(4000, 0.8, 4));
        let mut all: Vec<usize> = a.train.iter().chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..4000).collect::<Vec<_>>());
    }
}
