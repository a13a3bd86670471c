//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array3;
use plume::loss::{objective, LossConfig, TargetGrid};
use plume::model::{random_input, ModelConfig, MultiTaskModel, Normalizer};
use plume::observation::ModelInput;
use plume::sim::GridSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_grid() -> GridSpec {
    GridSpec {
        nx: 8,
        ny: 8,
        nt: 4,
        lx: 8.0,
        ly: 8.0,
        t_end: 1.0,
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder_channels: vec![3, 4],
        kernel: 3,
        kernel_t: 3,
        mask_kernel: 3,
        sigma_init: 0.9,
        field_hidden: 4,
        source_hidden: 5,
        detection_cells: 2,
        coverage_sensors: 6,
        ..ModelConfig::default()
    }
}

pub struct Problem {
    pub input: ModelInput,
    pub phi: Vec<f64>,
    pub target: TargetGrid,
}

/// Random input, positive target field and a two-source target grid.
pub fn tiny_problem(seed: u64) -> Problem {
    let grid = tiny_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_input(&grid, 6, &mut rng).unwrap();
    let phi = (0..grid.nt * grid.nx * grid.ny).map(|_| rng.gen_range(0.0..1.5)).collect();
    let mut cells = Array3::zeros((2, 2, 5));
    for (i, j) in [(0, 1), (1, 0)] {
        cells[[i, j, 0]] = 1.0;
        cells[[i, j, 1]] = rng.gen_range(0.0..1.0);
        cells[[i, j, 2]] = rng.gen_range(0.0..1.0);
        cells[[i, j, 3]] = rng.gen_range(0.5..2.0);
        cells[[i, j, 4]] = 1.0;
    }
    Problem {
        input,
        phi,
        target: TargetGrid { cells },
    }
}

/// Tiny model with every parameter jittered so that no activation sits
/// exactly on a kink (zero biases over empty regions otherwise do).
pub fn tiny_model(cfg: ModelConfig, seed: u64) -> MultiTaskModel<f64> {
    let mut model = MultiTaskModel::with_exact_depth(cfg, &tiny_grid(), Normalizer::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let flat: Vec<f64> = model.flatten().into_iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
    model.load_flat(&flat).unwrap();
    model
}

pub fn loss_value(model: &MultiTaskModel<f64>, p: &Problem, cfg: &LossConfig) -> f64 {
    let tape = model.forward(&p.input).unwrap();
    objective(&tape, &p.phi, &p.target, cfg).0.total
}

pub fn analytic_grad(model: &MultiTaskModel<f64>, p: &Problem, cfg: &LossConfig) -> Vec<f64> {
    let tape = model.forward(&p.input).unwrap();
    let (_, g) = objective(&tape, &p.phi, &p.target, cfg);
    let mut grad = model.zeros_like();
    model.backward(&tape, &g, &mut grad);
    grad.flatten()
}

/// Offset of parameter group `g` (in `params()` order) in the flat vector.
pub fn group_offset(model: &MultiTaskModel<f64>, g: usize) -> (usize, usize) {
    let params = model.params();
    let off = params[..g].iter().map(|p| p.len()).sum();
    (off, params[g].len())
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between backprop and central
/// differences over the given flat indices.
pub fn fd_rel_error(model: &MultiTaskModel<f64>, p: &Problem, cfg: &LossConfig, idx: &[usize], h: f64) -> (f64, f64) {
    let analytic = analytic_grad(model, p, cfg);
    let base = model.flatten();
    let mut m = model.clone();
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for &i in idx {
        let mut v = base.clone();
        v[i] = base[i] + h;
        m.load_flat(&v).unwrap();
        let up = loss_value(&m, p, cfg);
        v[i] = base[i] - h;
        m.load_flat(&v).unwrap();
        let down = loss_value(&m, p, cfg);
        let numeric = (up - down) / (2.0 * h);
        diff += (numeric - analytic[i]).powi(2);
        na += analytic[i].powi(2);
        nn += numeric.powi(2);
    }
    let scale = na.sqrt().max(nn.sqrt());
    (if scale > 0.0 { diff.sqrt() / scale } else { 0.0 }, scale)
}

/// Up to `n` evenly spread flat indices from group `g`.
pub fn slice_indices(model: &MultiTaskModel<f64>, g: usize, n: usize) -> Vec<usize> {
    let (off, len) = group_offset(model, g);
    let step = (len / n).max(1);
    (0..len).step_by(step).take(n).map(|i| off + i).collect()
}

/// Exponential integral `E1(x)` for `x > 0`: power series below 1,
/// modified-Lentz continued fraction above.
pub fn exp_integral_e1(x: f64) -> f64 {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    if x <= 1.0 {
        let (mut sum, mut term) = (0.0, 1.0);
        for k in 1..200 {
            term *= -x / k as f64;
            let add = -term / k as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        -EULER_GAMMA - x.ln() + sum
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let a = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let delta = c * d;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

/// Time-integrated 2-D heat kernel of a unit source switched on at t = 0.
pub fn heat_kernel_integral(r2: f64, k: f64, t: f64) -> f64 {
    exp_integral_e1(r2 / (4.0 * k * t)) / (4.0 * std::f64::consts::PI * k)
}

pub struct HeatKernelResult {
    pub rel_l2: f64,
    pub seconds: f64,
    /// Fraction of the final mass that has left the inner half of the domain.
    pub outer_mass: f64,
}

/// Unit source at the centre node of a 64 × 64 grid, zero wind, K = 0.05.
/// The numerical field at the final frame is compared against the analytic
/// response averaged over each node's control cell. The source node itself is
/// left out: the analytic response is log-singular there.
pub fn heat_kernel_case() -> HeatKernelResult {
    heat_kernel_excluding(250.0, 0.5)
}

/// As [`heat_kernel_case`], skipping nodes closer than `exclude` cells to the source.
pub fn heat_kernel_excluding(t_end: f64, exclude: f64) -> HeatKernelResult {
    use plume::sim::{solve_advection_diffusion, EmissionScenario, PointSource, SolverConfig, WindField};
    let k = 0.05;
    let grid = GridSpec {
        nx: 64,
        ny: 64,
        nt: 5,
        lx: 63.0,
        ly: 63.0,
        t_end,
    };
    let (x0, y0) = (32.0 * grid.dx(), 32.0 * grid.dy());
    let start = std::time::Instant::now();
    let sc = EmissionScenario::new(grid, vec![PointSource::new(x0, y0, 1.0)], WindField::zeros(&grid), k);
    let sc = solve_advection_diffusion(sc, &SolverConfig::default()).unwrap();
    let seconds = start.elapsed().as_secs_f64();

    let last = grid.nt - 1;
    let sub = 8;
    let (mut num, mut den, mut outer, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let mut avg = 0.0;
            for a in 0..sub {
                for b in 0..sub {
                    let x = i as f64 * grid.dx() + ((a as f64 + 0.5) / sub as f64 - 0.5) * grid.dx();
                    let y = j as f64 * grid.dy() + ((b as f64 + 0.5) / sub as f64 - 0.5) * grid.dy();
                    avg += heat_kernel_integral((x - x0).powi(2) + (y - y0).powi(2), k, grid.t_end);
                }
            }
            avg /= (sub * sub) as f64;
            let v = sc.phi[[last, i, j]];
            total += v;
            if i.abs_diff(32) > 16 || j.abs_diff(32) > 16 {
                outer += v;
            }
            if ((i as f64 - 32.0).powi(2) + (j as f64 - 32.0).powi(2)).sqrt() < exclude {
                continue;
            }
            num += (v - avg).powi(2);
            den += avg * avg;
        }
    }
    HeatKernelResult {
        rel_l2: (num / den).sqrt(),
        seconds,
        outer_mass: outer / total,
    }
}

/// Straightforward zero-padded 3-D convolution (cross-correlation) with bias,
/// `x` of shape `(c_in, t, nx, ny)` and weights `(c_out, c_in, kt, kx, ky)`.
pub fn naive_conv3d(x: &ndarray::Array4<f64>, w: &[f64], bias: &[f64], c_out: usize, k: (usize, usize, usize)) -> ndarray::Array4<f64> {
    let (c_in, t, nx, ny) = x.dim();
    let (kt, kx, ky) = k;
    let mut out = ndarray::Array4::zeros((c_out, t, nx, ny));
    for o in 0..c_out {
        for tt in 0..t {
            for i in 0..nx {
                for j in 0..ny {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for a in 0..kt {
                            for b in 0..kx {
                                for d in 0..ky {
                                    let (st, si, sj) = (tt + a, i + b, j + d);
                                    if st < kt / 2 || si < kx / 2 || sj < ky / 2 {
                                        continue;
                                    }
                                    let (st, si, sj) = (st - kt / 2, si - kx / 2, sj - ky / 2);
                                    if st >= t || si >= nx || sj >= ny {
                                        continue;
                                    }
                                    acc += w[(((o * c_in + c) * kt + a) * kx + b) * ky + d] * x[[c, st, si, sj]];
                                }
                            }
                        }
                    }
                    out[[o, tt, i, j]] = acc;
                }
            }
        }
    }
    out
}

/// Largest deviation between a full-mask DM-conv stack and a plain
/// convolution stack over `trials` random inputs and weights.
pub fn full_mask_equivalence(trials: usize) -> f64 {
    use plume::dmconv::{dm_layer, MaskState, MaskedConvLayer};
    use plume::nn::{leaky_relu, Kernel};
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (t, nx, ny) = (rng.gen_range(1..5), rng.gen_range(3..9), rng.gen_range(3..9));
        let channels = [3, 4, 5, 2];
        let mut x = ndarray::Array4::from_shape_fn((3, t, nx, ny), |_| rng.gen_range(-1.0..1.0));
        let mut plain = x.clone();
        let mut m = MaskState::new(ndarray::Array3::ones((t, nx, ny))).unwrap();
        for w in channels.windows(2) {
            let mut layer = MaskedConvLayer::<f64>::new(w[0], w[1], Kernel::new(3, 3, 3), 5, 1.0, &mut rng).unwrap();
            layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
            let (y, m_next) = dm_layer(&x, &m, &layer).unwrap();
            x = y.mapv(|v| leaky_relu(v, 0.1));
            m = m_next;
            plain = naive_conv3d(&plain, &layer.weights, &layer.bias, w[1], (3, 3, 3)).mapv(|v| leaky_relu(v, 0.1));
        }
        worst = worst.max((&x - &plain).iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    worst
}

pub struct MaskStackReport {
    pub networks: usize,
    pub bounds_violations: usize,
    pub shrink_violations: usize,
    pub uncovered: usize,
}

/// Propagates `networks` random masks of `sensors` sensors through `depth`
/// diffusion steps with the default model's mask kernel and width.
pub fn mask_stack(grid: &GridSpec, networks: usize, sensors: usize, depth: usize, seed: u64) -> MaskStackReport {
    use plume::dmconv::{diffuse_mask, MaskState, MaskedConvLayer};
    use plume::nn::Kernel;
    use plume::observation::{init_mask, sample_sensor_network};
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = MaskedConvLayer::<f64>::new(1, 1, Kernel::new(1, 3, 3), cfg.mask_kernel, cfg.sigma_init, &mut rng).unwrap();
    let mut report = MaskStackReport {
        networks,
        bounds_violations: 0,
        shrink_violations: 0,
        uncovered: 0,
    };
    for n in 0..networks {
        let net = sample_sensor_network(grid, [sensors, sensors], seed.wrapping_add(n as u64)).unwrap();
        let m0 = init_mask(&net, grid).unwrap().mapv(f64::from).insert_axis(ndarray::Axis(0));
        let mut m = MaskState::new(m0).unwrap();
        for _ in 0..depth {
            let next = diffuse_mask(&m, &layer);
            if next.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                report.bounds_violations += 1;
            }
            if next.values().iter().zip(m.values()).any(|(a, b)| a < b) {
                report.shrink_violations += 1;
            }
            m = next;
        }
        if m.support_size() < grid.nx * grid.ny {
            report.uncovered += 1;
        }
    }
    report
}

/// Random raw detection grid and target grid with `S = s`.
pub fn random_grids(s: usize, rng: &mut ChaCha8Rng) -> (plume::model::DetectionGrid, TargetGrid) {
    let pred = plume::model::DetectionGrid {
        cells: Array3::from_shape_fn((s, s, 4), |(_, _, k)| match k {
            0 => rng.gen_range(-3.0..3.0),
            1 | 2 => rng.gen_range(-0.2..1.2),
            _ => rng.gen_range(-2.0..2.0),
        }),
    };
    let mut cells = Array3::zeros((s, s, 5));
    for i in 0..s {
        for j in 0..s {
            if rng.gen_bool(0.4) {
                cells[[i, j, 0]] = 1.0;
                cells[[i, j, 1]] = rng.gen_range(0.0..1.0);
                cells[[i, j, 2]] = rng.gen_range(0.0..1.0);
                cells[[i, j, 3]] = rng.gen_range(0.5..2.0);
                cells[[i, j, 4]] = 1.0;
            }
        }
    }
    (pred, TargetGrid { cells })
}

/// Maximum discrepancy between the library metrics and direct per-cell
/// loops over `trials` random `S = 2` grids and `4 × 4` fields.
pub fn metric_oracle_discrepancy(trials: usize) -> f64 {
    use plume::evaluation::{precision_recall, reconstruction_rmse, rel_loc_mse, source_mag_mse};
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let sp = |v: f64| (1.0 + v.exp()).ln();
    for _ in 0..trials {
        let (pred, target) = random_grids(2, &mut rng);
        let thr = rng.gen_range(0.2..0.8);
        let (mut tp, mut fp, mut fn_, mut loc, mut mag) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                let hit = sig(pred.cells[[i, j, 0]]) >= thr;
                let truth = target.cells[[i, j, 0]] == 1.0;
                if hit && truth {
                    tp += 1.0;
                    let rx = pred.cells[[i, j, 1]].clamp(0.0, 1.0);
                    let ry = pred.cells[[i, j, 2]].clamp(0.0, 1.0);
                    loc += ((rx - target.cells[[i, j, 1]]).powi(2) + (ry - target.cells[[i, j, 2]]).powi(2)) / 2.0;
                    mag += (sp(pred.cells[[i, j, 3]]) - target.cells[[i, j, 3]]).powi(2);
                } else if hit {
                    fp += 1.0;
                } else if truth {
                    fn_ += 1.0;
                }
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else if fn_ == 0.0 { 1.0 } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 1.0 };
        let (p, r) = precision_recall(&pred, &target, thr).unwrap();
        worst = worst.max((p - precision).abs()).max((r - recall).abs());
        match rel_loc_mse(&pred, &target, thr).unwrap() {
            Some(v) => worst = worst.max((v - loc / tp).abs()),
            None => assert_eq!(tp, 0.0),
        }
        match source_mag_mse(&pred, &target, thr).unwrap() {
            Some(v) => worst = worst.max((v - mag / tp).abs()),
            None => assert_eq!(tp, 0.0),
        }
        let a = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-2.0..2.0));
        let b = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-2.0..2.0));
        let mut sq = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            sq += (x - y) * (x - y);
        }
        worst = worst.max((reconstruction_rmse(&a, &b).unwrap() - (sq / 48.0f64).sqrt()).abs());
    }
    worst
}

/// Empirical coverage of the 95% interval on `n` draws from the predicted Gaussian.
pub fn gaussian_coverage(n: usize, seed: u64) -> f64 {
    use plume::evaluation::pi_coverage;
    use plume::model::FieldPrediction;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = (n / 1000, 10, 100);
    let mu = Array3::from_shape_fn(shape, |_| rng.gen_range(-5.0..5.0));
    let sigma2 = Array3::from_shape_fn(shape, |_| rng.gen_range(0.01..4.0));
    let truth = ndarray::Zip::from(&mu)
        .and(&sigma2)
        .map_collect(|&m, &s: &f64| m + s.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal));
    pi_coverage(&FieldPrediction { phi_mu: mu, sigma2 }, &truth, 0.95).unwrap()
}
