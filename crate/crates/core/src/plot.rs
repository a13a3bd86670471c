//! PNG figures: field panels with sensor crosses, source maps, fixed-row
//! slices with a shaded prediction interval, and absolute-error comparisons.
//!
//! Maps are drawn with x to the right and y upward.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array3, ArrayView2};

use crate::evaluation::SourceDetectionResult;
use crate::model::FieldPrediction;
use crate::sim::EmissionScenario;
use crate::Result;

const PIXELS_PER_NODE: u32 = 6;
const GAP: u32 = 12;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const RED: Rgb<u8> = Rgb([230, 40, 40]);

/// Viridis anchors at t = 0, 0.25, 0.5, 0.75, 1.
const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub fn colormap(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let c = |k: usize| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn range_of<'a>(views: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in views {
        for &x in v.iter().filter(|x| x.is_finite()) {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    if !lo.is_finite() || hi <= lo {
        (lo.min(0.0).max(-1e300), lo.max(0.0) + 1.0)
    } else {
        (lo, hi)
    }
}

/// Draws a heatmap of `field` (`nx × ny`) into `img` with its left edge at `x0`.
fn draw_map(img: &mut RgbImage, x0: u32, field: ArrayView2<f64>, (lo, hi): (f64, f64)) {
    let (nx, ny) = field.dim();
    let p = PIXELS_PER_NODE;
    for i in 0..nx {
        for j in 0..ny {
            let c = colormap((field[[i, j]] - lo) / (hi - lo));
            let (px, py) = (x0 + i as u32 * p, (ny - 1 - j) as u32 * p);
            for a in 0..p {
                for b in 0..p {
                    img.put_pixel(px + a, py + b, c);
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Pixel centre of node `(i, j)` in a map whose left edge is `x0`.
fn node_center(x0: u32, i: f64, j: f64, ny: usize) -> (i64, i64) {
    let p = PIXELS_PER_NODE as f64;
    ((x0 as f64 + (i + 0.5) * p) as i64, (((ny - 1) as f64 - j + 0.5) * p) as i64)
}

fn cross(img: &mut RgbImage, (cx, cy): (i64, i64), arm: i64, c: Rgb<u8>) {
    for d in -arm..=arm {
        put(img, cx + d, cy + d, c);
        put(img, cx + d, cy - d, c);
    }
}

fn ring(img: &mut RgbImage, (cx, cy): (i64, i64), r: i64, c: Rgb<u8>) {
    for dx in -r..=r {
        for dy in -r..=r {
            let d2 = dx * dx + dy * dy;
            if d2 <= r * r && d2 >= (r - 1) * (r - 1) {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn map_canvas(nx: usize, ny: usize, panels: u32) -> RgbImage {
    let w = nx as u32 * PIXELS_PER_NODE;
    RgbImage::from_pixel(panels * w + (panels - 1) * GAP, ny as u32 * PIXELS_PER_NODE, WHITE)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| crate::Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    img.save(path)?;
    Ok(())
}

/// Ground truth and predicted mean at one frame, shared colour scale, with
/// white crosses at the sensors.
pub fn field_panels(truth: &Array3<f64>, mean: &Array3<f64>, frame: usize, sensors: &[[usize; 2]], path: &Path) -> Result<()> {
    let (_, nx, ny) = truth.dim();
    let (a, b) = (truth.index_axis(ndarray::Axis(0), frame), mean.index_axis(ndarray::Axis(0), frame));
    let range = range_of([a, b]);
    let mut img = map_canvas(nx, ny, 2);
    let x1 = nx as u32 * PIXELS_PER_NODE + GAP;
    draw_map(&mut img, 0, a, range);
    draw_map(&mut img, x1, b, range);
    for &[i, j] in sensors {
        for x0 in [0, x1] {
            cross(&mut img, node_center(x0, i as f64, j as f64, ny), 2, WHITE);
        }
    }
    save(&img, path)
}

/// Concentration at one frame with true sources as white rings and
/// detections as red crosses.
pub fn source_map(scenario: &EmissionScenario, frame: usize, detections: &SourceDetectionResult, path: &Path) -> Result<()> {
    let g = &scenario.grid;
    let f = scenario.phi.index_axis(ndarray::Axis(0), frame);
    let mut img = map_canvas(g.nx, g.ny, 1);
    draw_map(&mut img, 0, f, range_of([f]));
    let arm = PIXELS_PER_NODE as i64;
    for s in &scenario.sources {
        ring(&mut img, node_center(0, s.x / g.dx(), s.y / g.dy(), g.ny), arm, WHITE);
    }
    for d in &detections.detections {
        cross(&mut img, node_center(0, d.x / g.dx(), d.y / g.dy(), g.ny), arm, RED);
    }
    save(&img, path)
}

/// Truth (black) and predicted mean (blue) along x at grid row `row`, with
/// the band `μ ± z·σ` shaded.
pub fn slice_plot(truth: &Array3<f64>, pred: &FieldPrediction, frame: usize, row: usize, z: f64, path: &Path) -> Result<()> {
    let (w, h, margin) = (640u32, 360u32, 20u32);
    let (_, nx, _) = truth.dim();
    let t: Vec<f64> = (0..nx).map(|i| truth[[frame, i, row]]).collect();
    let mu: Vec<f64> = (0..nx).map(|i| pred.phi_mu[[frame, i, row]]).collect();
    let half: Vec<f64> = (0..nx).map(|i| z * pred.sigma2[[frame, i, row]].sqrt()).collect();
    let lo = (0..nx).map(|i| t[i].min(mu[i] - half[i])).fold(f64::INFINITY, f64::min);
    let hi = (0..nx).map(|i| t[i].max(mu[i] + half[i])).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let px = |i: f64| margin as f64 + i / (nx - 1).max(1) as f64 * (w - 2 * margin) as f64;
    let py = |v: f64| (h - margin) as f64 - (v - lo) / (hi - lo) * (h - 2 * margin) as f64;

    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let band = Rgb([170, 200, 240]);
    for x in margin..(w - margin) {
        let s = (x - margin) as f64 / (w - 2 * margin) as f64 * (nx - 1) as f64;
        let i = (s.floor() as usize).min(nx.saturating_sub(2));
        let f = s - i as f64;
        let lerp = |v: &[f64]| v[i] + f * (v[(i + 1).min(nx - 1)] - v[i]);
        let (m, hw) = (lerp(&mu), lerp(&half));
        let (top, bottom) = (py(m + hw).round() as i64, py(m - hw).round() as i64);
        for y in top..=bottom {
            put(&mut img, x as i64, y, band);
        }
    }
    for x in margin..=(w - margin) {
        put(&mut img, x as i64, (h - margin) as i64, BLACK);
    }
    for y in margin..=(h - margin) {
        put(&mut img, margin as i64, y as i64, BLACK);
    }
    let blue = Rgb([30, 60, 200]);
    for (series, colour) in [(&mu, blue), (&t, BLACK)] {
        for i in 1..nx {
            line(&mut img, (px((i - 1) as f64), py(series[i - 1])), (px(i as f64), py(series[i])), colour);
        }
    }
    save(&img, path)
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let f = k as f64 / steps as f64;
        let (x, y) = ((x0 + f * (x1 - x0)).round() as i64, (y0 + f * (y1 - y0)).round() as i64);
        for d in 0..2 {
            put(img, x, y + d, c);
        }
    }
}

/// Side-by-side `|truth − a|` and `|truth − b|` on a shared scale.
pub fn error_comparison(truth: &Array3<f64>, a: &Array3<f64>, b: &Array3<f64>, frame: usize, path: &Path) -> Result<()> {
    let (_, nx, ny) = truth.dim();
    let t = truth.index_axis(ndarray::Axis(0), frame);
    let ea = (&a.index_axis(ndarray::Axis(0), frame) - &t).mapv(f64::abs);
    let eb = (&b.index_axis(ndarray::Axis(0), frame) - &t).mapv(f64::abs);
    let (_, hi) = range_of([ea.view(), eb.view()]);
    let mut img = map_canvas(nx, ny, 2);
    draw_map(&mut img, 0, ea.view(), (0.0, hi));
    draw_map(&mut img, nx as u32 * PIXELS_PER_NODE + GAP, eb.view(), (0.0, hi));
    save(&img, path)
}
