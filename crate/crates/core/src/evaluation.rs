//! Detection decoding, field and source metrics, and prediction-interval coverage.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::loss::TargetGrid;
use crate::model::{DetectionGrid, FieldPrediction};
use crate::sim::GridSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cell: (usize, usize),
    pub x: f64,
    pub y: f64,
    pub strength: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDetectionResult {
    pub detections: Vec<Detection>,
    pub threshold: f64,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold must be in [0, 1], got {threshold}")));
    }
    Ok(())
}

/// Offsets are clamped to the cell so every detection lies inside it.
fn decoded_offset(grid: &DetectionGrid, i: usize, j: usize) -> (f64, f64) {
    (grid.cells[[i, j, 1]].clamp(0.0, 1.0), grid.cells[[i, j, 2]].clamp(0.0, 1.0))
}

/// Reports every cell with `σ(p̂) ≥ threshold` at its absolute position.
pub fn decode_detections(pred: &DetectionGrid, grid: &GridSpec, threshold: f64) -> Result<SourceDetectionResult> {
    check_threshold(threshold)?;
    let s = pred.size();
    let (wx, wy) = grid.cell_width(s)?;
    let (cw, ch) = (wx as f64 * grid.dx(), wy as f64 * grid.dy());
    let mut detections = Vec::new();
    for i in 0..s {
        for j in 0..s {
            let confidence = pred.probability(i, j);
            if confidence >= threshold {
                let (rx, ry) = decoded_offset(pred, i, j);
                detections.push(Detection {
                    cell: (i, j),
                    x: (i as f64 + rx) * cw,
                    y: (j as f64 + ry) * ch,
                    strength: pred.strength(i, j),
                    confidence,
                });
            }
        }
    }
    Ok(SourceDetectionResult { detections, threshold })
}

pub fn reconstruction_rmse(phi_mu: &Array3<f64>, phi_true: &Array3<f64>) -> Result<f64> {
    if phi_mu.dim() != phi_true.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", phi_mu.dim(), phi_true.dim())));
    }
    let n = phi_true.len() as f64;
    Ok((phi_mu.iter().zip(phi_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt())
}

/// Cell-level confusion counts and matched-cell error sums for one grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Sum over matched cells of the per-component mean squared offset error.
    pub loc_sq: f64,
    pub mag_sq: f64,
}

impl CellScores {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn rel_loc_mse(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.loc_sq / self.tp as f64)
    }

    pub fn source_mag_mse(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.mag_sq / self.tp as f64)
    }

    pub fn merge(&mut self, other: &CellScores) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.loc_sq += other.loc_sq;
        self.mag_sq += other.mag_sq;
    }
}

pub fn score_cells(pred: &DetectionGrid, target: &TargetGrid, threshold: f64) -> Result<CellScores> {
    check_threshold(threshold)?;
    let s = pred.size();
    if s != target.size() {
        return Err(Error::Shape(format!("detection grid S={s} vs target S={}", target.size())));
    }
    let mut sc = CellScores::default();
    for i in 0..s {
        for j in 0..s {
            let hit = pred.probability(i, j) >= threshold;
            match (hit, target.has_source(i, j)) {
                (true, true) => {
                    sc.tp += 1;
                    let (rx, ry) = decoded_offset(pred, i, j);
                    let (ex, ey) = (rx - target.cells[[i, j, 1]], ry - target.cells[[i, j, 2]]);
                    sc.loc_sq += 0.5 * (ex * ex + ey * ey);
                    sc.mag_sq += (pred.strength(i, j) - target.cells[[i, j, 3]]).powi(2);
                }
                (true, false) => sc.fp += 1,
                (false, true) => sc.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(sc)
}

pub fn precision_recall(pred: &DetectionGrid, target: &TargetGrid, threshold: f64) -> Result<(f64, f64)> {
    let sc = score_cells(pred, target, threshold)?;
    Ok((sc.precision(), sc.recall()))
}

/// Mean over matched cells and both components of the squared offset error,
/// in cell widths. `None` when no cell is matched.
pub fn rel_loc_mse(pred: &DetectionGrid, target: &TargetGrid, threshold: f64) -> Result<Option<f64>> {
    Ok(score_cells(pred, target, threshold)?.rel_loc_mse())
}

pub fn source_mag_mse(pred: &DetectionGrid, target: &TargetGrid, threshold: f64) -> Result<Option<f64>> {
    Ok(score_cells(pred, target, threshold)?.source_mag_mse())
}

/// Two-sided standard-normal quantile for a central interval of mass `level`.
pub fn z_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("interval level must be in (0, 1), got {level}")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + 0.5 * level))
}

/// Number of points with `|φ − μ| ≤ z·σ`, and the number of points.
pub fn pi_hits(pred: &FieldPrediction, phi_true: &Array3<f64>, level: f64) -> Result<(usize, usize)> {
    let z = z_for_level(level)?;
    if pred.phi_mu.dim() != phi_true.dim() || pred.sigma2.dim() != phi_true.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.phi_mu.dim(), phi_true.dim())));
    }
    let hits = ndarray::Zip::from(&pred.phi_mu)
        .and(&pred.sigma2)
        .and(phi_true)
        .fold(0usize, |acc, &mu, &s2, &y| acc + usize::from((y - mu).abs() <= z * s2.sqrt()));
    Ok((hits, phi_true.len()))
}

pub fn pi_coverage(pred: &FieldPrediction, phi_true: &Array3<f64>, level: f64) -> Result<f64> {
    let (hits, n) = pi_hits(pred, phi_true, level)?;
    Ok(hits as f64 / n as f64)
}

/// Per-scenario summary kept in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: usize,
    pub sources: usize,
    pub sensors: usize,
    pub rmse: f64,
    pub cells: CellScores,
    pub pi_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenarios: usize,
    pub recon_rmse: f64,
    pub precision: f64,
    pub recall: f64,
    /// Cell-width units; `None` when nothing was matched.
    pub rel_loc_mse: Option<f64>,
    /// Same error in units of the domain side length.
    pub rel_loc_mse_domain: Option<f64>,
    pub source_mag_mse: Option<f64>,
    pub pi_coverage_95: f64,
    pub threshold: f64,
    pub per_scenario: Vec<ScenarioMetrics>,
}

/// Pools per-scenario results into test-set metrics.
#[derive(Debug, Default)]
pub struct MetricsAccumulator {
    sq_sum: f64,
    points: usize,
    cells: CellScores,
    covered: usize,
    grid_cells: usize,
    per_scenario: Vec<ScenarioMetrics>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn add(
        &mut self,
        scenario: usize,
        sensors: usize,
        pred: &FieldPrediction,
        det: &DetectionGrid,
        phi_true: &Array3<f64>,
        target: &TargetGrid,
        threshold: f64,
        level: f64,
    ) -> Result<()> {
        let rmse = reconstruction_rmse(&pred.phi_mu, phi_true)?;
        let cells = score_cells(det, target, threshold)?;
        let (hits, n) = pi_hits(pred, phi_true, level)?;
        self.sq_sum += rmse * rmse * n as f64;
        self.points += n;
        self.cells.merge(&cells);
        self.covered += hits;
        self.grid_cells = det.size();
        let sources = target.cells.iter().skip(4).step_by(5).sum::<f64>().round() as usize;
        self.per_scenario.push(ScenarioMetrics {
            scenario,
            sources,
            sensors,
            rmse,
            cells,
            pi_coverage: hits as f64 / n as f64,
        });
        Ok(())
    }

    pub fn finish(self, threshold: f64) -> MetricsReport {
        let rel = self.cells.rel_loc_mse();
        let scale = if self.grid_cells > 0 { 1.0 / (self.grid_cells as f64).powi(2) } else { 0.0 };
        MetricsReport {
            scenarios: self.per_scenario.len(),
            recon_rmse: if self.points > 0 { (self.sq_sum / self.points as f64).sqrt() } else { f64::NAN },
            precision: self.cells.precision(),
            recall: self.cells.recall(),
            rel_loc_mse: rel,
            rel_loc_mse_domain: rel.map(|v| v * scale),
            source_mag_mse: self.cells.source_mag_mse(),
            pi_coverage_95: if self.points > 0 { self.covered as f64 / self.points as f64 } else { f64::NAN },
            threshold,
            per_scenario: self.per_scenario,
        }
    }
}

/// Spearman rank correlation with a two-sided p-value from the t approximation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Shape("spearman needs two equal-length series of at least 3 points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let rho = cov / (vx * vy).sqrt();
    if rho.abs() >= 1.0 {
        return Ok((rho.signum(), 0.0));
    }
    let df = n - 2.0;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Ok((rho, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

/// Ranks starting at 1 with ties given their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn grid_with(p: f64) -> DetectionGrid {
        DetectionGrid {
            cells: Array3::from_elem((8, 8, 4), p),
        }
    }

    #[test]
    fn decode_edge_cases() {
        let grid = GridSpec::default();
        assert!(decode_detections(&grid_with(-10.0), &grid, 0.5).unwrap().detections.is_empty());
        assert_eq!(decode_detections(&grid_with(-10.0), &grid, 0.0).unwrap().detections.len(), 64);
        assert!(decode_detections(&grid_with(0.0), &grid, 1.5).is_err());

        let mut g = grid_with(-10.0);
        g.cells[[3, 5, 0]] = (0.9f64 / 0.1).ln();
        g.cells[[3, 5, 1]] = 0.0;
        g.cells[[3, 5, 2]] = 0.0;
        let d = decode_detections(&g, &grid, 0.5).unwrap().detections;
        assert_eq!(d.len(), 1);
        assert!((d[0].confidence - 0.9).abs() < 1e-12);
        assert!((d[0].x - 24.0 * grid.dx()).abs() < 1e-12 && (d[0].y - 40.0 * grid.dy()).abs() < 1e-12);
    }

    #[test]
    fn rmse_constant_offset() {
        let a = Array3::from_elem((2, 2, 2), 1.0);
        let b = Array3::from_elem((2, 2, 2), 1.3);
        assert!((reconstruction_rmse(&a, &b).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn z_value() {
        assert!((z_for_level(0.95).unwrap() - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn single_x_error_gives_component_mean() {
        let mut target = TargetGrid {
            cells: Array3::zeros((2, 2, 5)),
        };
        target.cells[[1, 0, 0]] = 1.0;
        target.cells[[1, 0, 1]] = 0.3;
        target.cells[[1, 0, 2]] = 0.6;
        target.cells[[1, 0, 3]] = 1.0;
        let mut pred = DetectionGrid {
            cells: Array3::from_elem((2, 2, 4), -5.0),
        };
        pred.cells[[1, 0, 0]] = 5.0;
        pred.cells[[1, 0, 1]] = 0.4;
        pred.cells[[1, 0, 2]] = 0.6;
        pred.cells[[1, 0, 3]] = crate::nn::softplus_inv(1.0);
        assert!((rel_loc_mse(&pred, &target, 0.5).unwrap().unwrap() - 0.005).abs() < 1e-12);
        assert!(source_mag_mse(&pred, &target, 0.5).unwrap().unwrap() < 1e-20);
        assert_eq!(precision_recall(&pred, &target, 0.5).unwrap(), (1.0, 1.0));
        assert_eq!(precision_recall(&pred, &target, 0.0).unwrap(), (0.25, 1.0));
    }

    #[test]
    fn spearman_perfect_and_tied() {
        let (r, p) = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!((r, p), (1.0, 0.0));
        let (r, _) = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 4.0, 4.0, 2.0, 1.0]).unwrap();
        assert!(r < -0.9);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }
}
