//! Training targets and the reconstruction and source-detection losses.
//!
//! The `*_grad` functions work on flat normalised buffers and return
//! gradients with respect to the network outputs; the array-level functions
//! are what evaluation and tests use.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::model::{DetectionGrid, FieldPrediction, OutputGrads, Tape};
use crate::nn::{sigmoid, softplus, Real};
use crate::sim::EmissionScenario;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Gaussian negative log-likelihood; plain MSE when false.
    pub nll: bool,
    pub lambda_src: f64,
    pub lambda_nosrc: f64,
    /// Multiplier on the inverse loss in the total objective.
    pub inverse_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            nll: true,
            lambda_src: 5.0,
            lambda_nosrc: 0.5,
            inverse_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_src", self.lambda_src),
            ("lambda_nosrc", self.lambda_nosrc),
            ("inverse_weight", self.inverse_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-cell `[has_source, x_rel, y_rel, c, count]`, shape `(S, S, 5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    pub cells: Array3<f64>,
}

impl TargetGrid {
    pub fn size(&self) -> usize {
        self.cells.dim().0
    }

    pub fn has_source(&self, i: usize, j: usize) -> bool {
        self.cells[[i, j, 0]] > 0.5
    }

    pub fn occupied(&self) -> usize {
        self.cells.outer_iter().flat_map(|row| row.outer_iter().map(|c| c[0]).collect::<Vec<_>>()).filter(|&v| v > 0.5).count()
    }
}

/// Assigns each source to the detection cell containing it. When a cell holds
/// more than one source the first keeps the offset and strengths are summed.
pub fn build_target_grid(scenario: &EmissionScenario, s: usize) -> Result<TargetGrid> {
    let grid = &scenario.grid;
    grid.cell_width(s)?;
    let mut cells = Array3::zeros((s, s, 5));
    for src in &scenario.sources {
        let ((i, j), (rx, ry)) = grid.locate_cell(s, src.x, src.y)?;
        if cells[[i, j, 4]] == 0.0 {
            cells[[i, j, 0]] = 1.0;
            cells[[i, j, 1]] = rx;
            cells[[i, j, 2]] = ry;
        }
        cells[[i, j, 3]] += src.strength;
        cells[[i, j, 4]] += 1.0;
    }
    Ok(TargetGrid { cells })
}

fn check_field(pred: &FieldPrediction, phi_true: &Array3<f64>) -> Result<()> {
    if pred.phi_mu.dim() != phi_true.dim() || pred.sigma2.dim() != phi_true.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.phi_mu.dim(),
            phi_true.dim()
        )));
    }
    Ok(())
}

/// `½ · mean(log σ² + (φ − μ)² / σ²)`.
pub fn gaussian_nll_loss(pred: &FieldPrediction, phi_true: &Array3<f64>) -> Result<f64> {
    check_field(pred, phi_true)?;
    if let Some(bad) = pred.sigma2.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::NonFinite(format!("predicted variance must be positive, found {bad}")));
    }
    let n = phi_true.len() as f64;
    let sum: f64 = ndarray::Zip::from(&pred.phi_mu)
        .and(&pred.sigma2)
        .and(phi_true)
        .fold(0.0, |acc, &mu, &s2, &y| acc + s2.ln() + (y - mu).powi(2) / s2);
    Ok(0.5 * sum / n)
}

pub fn mse_recon_loss(pred: &FieldPrediction, phi_true: &Array3<f64>) -> Result<f64> {
    check_field(pred, phi_true)?;
    let n = phi_true.len() as f64;
    Ok(pred.phi_mu.iter().zip(phi_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// The four weighted terms of the detection loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InverseLossTerms {
    pub location: f64,
    pub objectness: f64,
    pub no_object: f64,
    pub strength: f64,
}

impl InverseLossTerms {
    pub fn total(&self) -> f64 {
        self.location + self.objectness + self.no_object + self.strength
    }
}

pub fn inverse_loss(pred: &DetectionGrid, target: &TargetGrid, lambda_src: f64, lambda_nosrc: f64) -> Result<InverseLossTerms> {
    let flat: Vec<f64> = pred.cells.iter().copied().collect();
    if pred.size() != target.size() || pred.cells.dim().2 != 4 {
        return Err(Error::Shape(format!("detection grid {:?} vs target {:?}", pred.cells.dim(), target.cells.dim())));
    }
    Ok(inverse_loss_grad(&flat, target, lambda_src, lambda_nosrc).0)
}

pub fn total_loss(recon: f64, inverse: f64, inverse_weight: f64) -> f64 {
    recon + inverse_weight * inverse
}

/// Gaussian NLL on flat buffers with gradients `(dL/dμ, dL/dσ²)`.
pub fn nll_grad<T: Real>(mu: &[T], sigma2: &[T], target: &[T]) -> (f64, Vec<T>, Vec<T>) {
    let n = T::of(target.len() as f64);
    let half = T::of(0.5);
    let mut loss = 0.0;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut ds = Vec::with_capacity(mu.len());
    for ((&m, &s), &y) in mu.iter().zip(sigma2).zip(target) {
        let r = y - m;
        loss += (s.ln() + r * r / s).to_f64().unwrap_or(f64::NAN);
        dmu.push(-r / s / n);
        ds.push(half * (T::one() / s - r * r / (s * s)) / n);
    }
    (0.5 * loss / target.len() as f64, dmu, ds)
}

/// Mean squared error on flat buffers with gradient `dL/dμ`.
pub fn mse_grad<T: Real>(mu: &[T], target: &[T]) -> (f64, Vec<T>) {
    let n = T::of(target.len() as f64);
    let two = T::of(2.0);
    let mut loss = 0.0;
    let dmu = mu
        .iter()
        .zip(target)
        .map(|(&m, &y)| {
            let r = m - y;
            loss += (r * r).to_f64().unwrap_or(f64::NAN);
            two * r / n
        })
        .collect();
    (loss / target.len() as f64, dmu)
}

/// Detection loss over raw `(S, S, 4)` outputs with its gradient.
pub fn inverse_loss_grad<T: Real>(det: &[T], target: &TargetGrid, lambda_src: f64, lambda_nosrc: f64) -> (InverseLossTerms, Vec<T>) {
    let s = target.size();
    assert_eq!(det.len(), s * s * 4, "detection buffer length");
    let mut terms = InverseLossTerms::default();
    let mut grad = vec![T::zero(); det.len()];
    for i in 0..s {
        for j in 0..s {
            let base = (i * s + j) * 4;
            let raw: Vec<f64> = det[base..base + 4].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let p = sigmoid(raw[0]);
            let dp = p * (1.0 - p);
            let g = &mut grad[base..base + 4];
            if target.has_source(i, j) {
                let (tx, ty, tc) = (target.cells[[i, j, 1]], target.cells[[i, j, 2]], target.cells[[i, j, 3]]);
                let (ex, ey) = (raw[1] - tx, raw[2] - ty);
                terms.location += lambda_src * (ex * ex + ey * ey);
                g[1] = T::of(2.0 * lambda_src * ex);
                g[2] = T::of(2.0 * lambda_src * ey);
                terms.objectness += lambda_src * (p - 1.0).powi(2);
                g[0] = T::of(2.0 * lambda_src * (p - 1.0) * dp);
                let ec = softplus(raw[3]) - tc;
                terms.strength += lambda_src * ec * ec;
                g[3] = T::of(2.0 * lambda_src * ec * sigmoid(raw[3]));
            } else {
                terms.no_object += lambda_nosrc * p * p;
                g[0] = T::of(2.0 * lambda_nosrc * p * dp);
            }
        }
    }
    (terms, grad)
}

/// Loss values of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub inverse: InverseLossTerms,
    pub total: f64,
}

/// Evaluates the training objective on a forward tape. `phi_norm` is the
/// target field divided by the model's concentration scale.
pub fn objective<T: Real>(tape: &Tape<T>, phi_norm: &[T], target: &TargetGrid, cfg: &LossConfig) -> (LossBreakdown, OutputGrads<T>) {
    let (recon, dmu, dsigma2) = if cfg.nll {
        nll_grad(&tape.mu, &tape.sigma2, phi_norm)
    } else {
        let (l, dmu) = mse_grad(&tape.mu, phi_norm);
        (l, dmu, vec![T::zero(); phi_norm.len()])
    };
    let (inverse, mut ddet) = inverse_loss_grad(&tape.detection, target, cfg.lambda_src, cfg.lambda_nosrc);
    let w = T::of(cfg.inverse_weight);
    ddet.iter_mut().for_each(|g| *g *= w);
    let total = total_loss(recon, inverse.total(), cfg.inverse_weight);
    (
        LossBreakdown { recon, inverse, total },
        OutputGrads {
            mu: dmu,
            sigma2: dsigma2,
            detection: ddet,
        },
    )
}
