//! Shared DM-conv encoder with a Gaussian field decoder and a grid source decoder.
//!
//! Forward passes return a [`Tape`] holding everything the backward pass
//! needs; gradients are accumulated into a zero-initialised model of the same
//! shape (see [`MultiTaskModel::zeros_like`]).

use std::collections::VecDeque;

use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dmconv::{
    diffuse_mask_backward, diffuse_mask_forward, masked_conv_backward, masked_conv_forward, MaskedConvCache,
    MaskedConvLayer,
};
use crate::nn::{conv3d_backward, conv3d_forward, he_init, leaky_relu, leaky_relu_grad, sigmoid, softplus, Dims, Kernel, Real};
use crate::observation::{sample_sensor_network, ModelInput, SensorNetwork};
use crate::seed;
use crate::sim::GridSpec;
use crate::{Error, Result};

/// Floor added to the predicted variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of each encoder layer; its length is the minimum depth.
    pub encoder_channels: Vec<usize>,
    /// Spatial extent of the feature kernels.
    pub kernel: usize,
    /// Temporal extent of the feature kernels.
    pub kernel_t: usize,
    /// Spatial extent of the Gaussian mask-diffusion kernel.
    pub mask_kernel: usize,
    pub sigma_init: f64,
    /// One diffusion width for all layers instead of one per layer.
    pub shared_sigma: bool,
    pub field_hidden: usize,
    pub source_hidden: usize,
    /// S: the plane is split into S × S detection cells.
    pub detection_cells: usize,
    /// Per-pixel variance; otherwise a single learned variance.
    pub heteroscedastic: bool,
    pub leaky_slope: f64,
    /// Depth is raised until the final mask covers the grid for networks of this size.
    pub coverage_sensors: usize,
    pub coverage_probes: usize,
    pub max_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![32, 32, 32, 32, 64, 64, 64, 64],
            kernel: 3,
            kernel_t: 3,
            mask_kernel: 9,
            sigma_init: 1.0,
            shared_sigma: false,
            field_hidden: 32,
            source_hidden: 64,
            detection_cells: 8,
            heteroscedastic: true,
            leaky_slope: 0.1,
            coverage_sensors: 30,
            coverage_probes: 200,
            max_depth: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder needs at least one layer with > 0 channels".into()));
        }
        for (name, k) in [("kernel", self.kernel), ("kernel_t", self.kernel_t), ("mask_kernel", self.mask_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.mask_kernel < 3 {
            return Err(Error::Config("mask_kernel must be at least 3 for the mask to grow".into()));
        }
        if self.field_hidden == 0 || self.source_hidden == 0 {
            return Err(Error::Config("decoder widths must be > 0".into()));
        }
        grid.cell_width(self.detection_cells)?;
        if !(self.sigma_init > crate::dmconv::SIGMA_FLOOR) {
            return Err(Error::Config("sigma_init must exceed the sigma floor".into()));
        }
        Ok(())
    }

    /// Encoder depth that lets the final mask cover the grid for every probed
    /// network of `coverage_sensors` sensors.
    pub fn covering_depth(&self, grid: &GridSpec, probe_seed: u64) -> Result<usize> {
        let reach = self.mask_kernel / 2;
        let sensors = self.coverage_sensors.clamp(1, grid.nodes());
        let mut worst = 0;
        for probe in 0..self.coverage_probes {
            let net = sample_sensor_network(grid, [sensors, sensors], seed::derive(probe_seed, seed::Stream::Init, &[probe as u64]))?;
            worst = worst.max(max_chebyshev_gap(&net, grid));
        }
        let needed = worst.div_ceil(reach).max(self.encoder_channels.len());
        if needed > self.max_depth {
            return Err(Error::Config(format!(
                "covering the grid needs {needed} layers, above max_depth {}",
                self.max_depth
            )));
        }
        Ok(needed)
    }
}

/// Largest Chebyshev distance from any node to its nearest sensor.
pub fn max_chebyshev_gap(net: &SensorNetwork, grid: &GridSpec) -> usize {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut dist = vec![usize::MAX; nx * ny];
    let mut queue = VecDeque::new();
    for &[i, j] in net.locations() {
        dist[i * ny + j] = 0;
        queue.push_back((i, j));
    }
    while let Some((i, j)) = queue.pop_front() {
        let d = dist[i * ny + j];
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let (a, b) = (i as isize + di, j as isize + dj);
                if a < 0 || b < 0 || a >= nx as isize || b >= ny as isize {
                    continue;
                }
                let idx = a as usize * ny + b as usize;
                if dist[idx] == usize::MAX {
                    dist[idx] = d + 1;
                    queue.push_back((a as usize, b as usize));
                }
            }
        }
    }
    dist.into_iter().max().unwrap_or(0)
}

/// Fixed input/output scaling, fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub phi_scale: f64,
    pub wind_scale: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            phi_scale: 1.0,
            wind_scale: 1.0,
        }
    }
}

/// Latent representation `z`, shape `(C_z, nt, nx, ny)`.
#[derive(Debug, Clone)]
pub struct Latent<T> {
    pub dims: Dims,
    pub values: Vec<T>,
}

/// Predictive mean and variance in physical units, each `(nt, nx, ny)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPrediction {
    pub phi_mu: Array3<f64>,
    pub sigma2: Array3<f64>,
}

/// Raw per-cell `[p̂, x̂, ŷ, ĉ]`, shape `(S, S, 4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub cells: Array3<f64>,
}

impl DetectionGrid {
    pub fn size(&self) -> usize {
        self.cells.dim().0
    }

    pub fn probability(&self, i: usize, j: usize) -> f64 {
        sigmoid(self.cells[[i, j, 0]])
    }

    pub fn strength(&self, i: usize, j: usize) -> f64 {
        softplus(self.cells[[i, j, 3]])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldDecoder<T: Real> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    /// Raw homoscedastic variance, used when per-pixel variance is disabled.
    pub var_raw: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDecoder<T: Real> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel<T: Real> {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub encoder: Vec<MaskedConvLayer<T>>,
    pub field: FieldDecoder<T>,
    pub source: SourceDecoder<T>,
    /// Cell width in nodes along x and y.
    pub cell: (usize, usize),
}

struct LayerTape<T> {
    x: Vec<T>,
    m: Vec<T>,
    conv: MaskedConvCache<T>,
    y: Vec<T>,
    m_pre: Vec<T>,
}

/// Everything a forward pass recorded for [`MultiTaskModel::backward`].
pub struct Tape<T> {
    dims: Dims,
    layers: Vec<LayerTape<T>>,
    final_mask: Vec<T>,
    z: Vec<T>,
    z_dims: Dims,
    field_h: Vec<T>,
    /// Normalised predictive mean, `(nt, nx, ny)` flattened.
    pub mu: Vec<T>,
    /// Raw variance logits, one per point (or one in total when homoscedastic).
    pub var_raw: Vec<T>,
    /// Normalised predictive variance.
    pub sigma2: Vec<T>,
    pooled: Vec<T>,
    patches: Vec<T>,
    source_h: Vec<T>,
    /// Raw detection outputs laid out `(S, S, 4)`.
    pub detection: Vec<T>,
}

impl<T: Real> Tape<T> {
    pub fn final_mask(&self) -> &[T] {
        &self.final_mask
    }

    pub fn latent(&self) -> Latent<T> {
        Latent {
            dims: self.z_dims,
            values: self.z.clone(),
        }
    }
}

/// Gradients of the losses with respect to the normalised network outputs.
pub struct OutputGrads<T> {
    pub mu: Vec<T>,
    pub sigma2: Vec<T>,
    pub detection: Vec<T>,
}

impl<T: Real> MultiTaskModel<T> {
    /// Builds a model for `grid`, raising the encoder depth if needed for mask coverage.
    pub fn new(config: ModelConfig, grid: &GridSpec, normalizer: Normalizer, init_seed: u64) -> Result<Self> {
        config.validate(grid)?;
        let depth = config.covering_depth(grid, init_seed)?;
        let mut config = config;
        while config.encoder_channels.len() < depth {
            let last = *config.encoder_channels.last().expect("non-empty");
            config.encoder_channels.push(last);
        }
        Self::with_exact_depth(config, grid, normalizer, init_seed)
    }

    /// Builds a model with exactly `config.encoder_channels.len()` layers.
    pub fn with_exact_depth(config: ModelConfig, grid: &GridSpec, normalizer: Normalizer, init_seed: u64) -> Result<Self> {
        config.validate(grid)?;
        let mut rng = seed::rng(seed::derive(init_seed, seed::Stream::Init, &[u64::MAX]));
        let k = Kernel::new(config.kernel_t, config.kernel, config.kernel);
        let mut encoder = Vec::with_capacity(config.encoder_channels.len());
        let mut c_in = 3;
        for &c_out in &config.encoder_channels {
            encoder.push(MaskedConvLayer::new(c_in, c_out, k, config.mask_kernel, config.sigma_init, &mut rng)?);
            c_in = c_out;
        }
        let cz = c_in;
        let (fh, sh) = (config.field_hidden, config.source_hidden);
        let field = FieldDecoder {
            w1: he_init(&mut rng, cz * k.taps(), fh * cz * k.taps()),
            b1: vec![T::zero(); fh],
            w2: scaled(he_init(&mut rng, fh, 2 * fh), 0.1),
            b2: vec![T::zero(); 2],
            var_raw: T::zero(),
        };
        let cell = grid.cell_width(config.detection_cells)?;
        let patch = cz * cell.0 * cell.1;
        let source = SourceDecoder {
            w1: he_init(&mut rng, patch, sh * patch),
            b1: vec![T::zero(); sh],
            w2: scaled(he_init(&mut rng, sh, 4 * sh), 0.1),
            b2: vec![T::zero(); 4],
        };
        Ok(Self {
            config,
            normalizer,
            encoder,
            field,
            source,
            cell,
        })
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn latent_channels(&self) -> usize {
        self.encoder.last().map_or(3, |l| l.c_out)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<T>| vec![T::zero(); v.len()];
        Self {
            config: self.config.clone(),
            normalizer: self.normalizer,
            encoder: self.encoder.iter().map(MaskedConvLayer::zeros_like).collect(),
            field: FieldDecoder {
                w1: z(&self.field.w1),
                b1: z(&self.field.b1),
                w2: z(&self.field.w2),
                b2: z(&self.field.b2),
                var_raw: T::zero(),
            },
            source: SourceDecoder {
                w1: z(&self.source.w1),
                b1: z(&self.source.b1),
                w2: z(&self.source.w2),
                b2: z(&self.source.b2),
            },
            cell: self.cell,
        }
    }

    /// Every trainable parameter slice in a fixed order.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.encoder {
            out.push(&l.weights);
            out.push(&l.bias);
            out.push(std::slice::from_ref(&l.sigma_raw));
        }
        out.extend([&self.field.w1[..], &self.field.b1, &self.field.w2, &self.field.b2]);
        out.push(std::slice::from_ref(&self.field.var_raw));
        out.extend([&self.source.w1[..], &self.source.b1, &self.source.w2, &self.source.b2]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
            out.push(std::slice::from_mut(&mut l.sigma_raw));
        }
        out.push(&mut self.field.w1);
        out.push(&mut self.field.b1);
        out.push(&mut self.field.w2);
        out.push(&mut self.field.b2);
        out.push(std::slice::from_mut(&mut self.field.var_raw));
        out.push(&mut self.source.w1);
        out.push(&mut self.source.b1);
        out.push(&mut self.source.w2);
        out.push(&mut self.source.b2);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.params().concat()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> MultiTaskModel<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.to_f64().expect("finite"))).collect::<Vec<U>>();
        let one = |v: T| U::of(v.to_f64().expect("finite"));
        MultiTaskModel {
            config: self.config.clone(),
            normalizer: self.normalizer,
            encoder: self
                .encoder
                .iter()
                .map(|l| MaskedConvLayer {
                    c_in: l.c_in,
                    c_out: l.c_out,
                    kernel: l.kernel,
                    mask_kernel: l.mask_kernel,
                    weights: c(&l.weights),
                    bias: c(&l.bias),
                    sigma_raw: one(l.sigma_raw),
                })
                .collect(),
            field: FieldDecoder {
                w1: c(&self.field.w1),
                b1: c(&self.field.b1),
                w2: c(&self.field.w2),
                b2: c(&self.field.b2),
                var_raw: one(self.field.var_raw),
            },
            source: SourceDecoder {
                w1: c(&self.source.w1),
                b1: c(&self.source.b1),
                w2: c(&self.source.w2),
                b2: c(&self.source.b2),
            },
            cell: self.cell,
        }
    }

    fn slope(&self) -> T {
        T::of(self.config.leaky_slope)
    }

    fn feature_kernel(&self) -> Kernel {
        Kernel::new(self.config.kernel_t, self.config.kernel, self.config.kernel)
    }

    /// Index of the layer whose `σ` drives layer `l`'s mask diffusion.
    fn sigma_owner(&self, l: usize) -> usize {
        if self.config.shared_sigma {
            0
        } else {
            l
        }
    }

    /// Normalised input features and mask as flat buffers.
    pub fn prepare_input(&self, input: &ModelInput) -> Result<(Dims, Vec<T>, Vec<T>)> {
        let (c, t, nx, ny) = input.features.dim();
        if c != 3 || input.mask0.dim() != (t, nx, ny) {
            return Err(Error::Shape(format!(
                "input features {:?} / mask {:?} are inconsistent",
                input.features.dim(),
                input.mask0.dim()
            )));
        }
        if nx % self.cell.0 != 0 || ny % self.cell.1 != 0 || nx / self.cell.0 != self.config.detection_cells {
            return Err(Error::Shape(format!("input plane {nx}x{ny} does not match the model's detection grid")));
        }
        let p = t * nx * ny;
        let scales = [self.normalizer.phi_scale, self.normalizer.wind_scale, self.normalizer.wind_scale];
        let mut x = Vec::with_capacity(3 * p);
        for (ch, scale) in scales.iter().enumerate() {
            let inv = 1.0 / scale;
            x.extend(input.features.index_axis(ndarray::Axis(0), ch).iter().map(|&v| T::of(v as f64 * inv)));
        }
        let m = input.mask0.iter().map(|&v| T::of(v as f64)).collect();
        Ok((Dims::new(3, t, nx, ny), x, m))
    }

    /// Full forward pass on prepared buffers.
    pub fn forward_flat(&self, dims: Dims, x: Vec<T>, m: Vec<T>) -> Result<Tape<T>> {
        let slope = self.slope();
        let mut layers = Vec::with_capacity(self.encoder.len());
        let (mut x, mut m, mut d) = (x, m, dims);
        for (l, layer) in self.encoder.iter().enumerate() {
            let (mut y, conv) = masked_conv_forward(&x, &d, &m, layer);
            y.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
            let mut diffuse_by = layer.clone();
            diffuse_by.sigma_raw = self.encoder[self.sigma_owner(l)].sigma_raw;
            let (m_next, m_pre) = diffuse_mask_forward(&m, d.t, d.x, d.y, &diffuse_by);
            layers.push(LayerTape {
                x: std::mem::take(&mut x),
                m: std::mem::replace(&mut m, m_next),
                conv,
                y: y.clone(),
                m_pre,
            });
            x = y;
            d = d.with_channels(layer.c_out);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder activations".into()));
        }
        let z = x;
        let z_dims = d;
        let final_mask = m;

        let (field_h, mu, var_raw, sigma2) = self.field_forward(&z, &z_dims);
        let (pooled, patches, source_h, detection) = self.source_forward(&z, &z_dims);
        Ok(Tape {
            dims,
            layers,
            final_mask,
            z,
            z_dims,
            field_h,
            mu,
            var_raw,
            sigma2,
            pooled,
            patches,
            source_h,
            detection,
        })
    }

    pub fn forward(&self, input: &ModelInput) -> Result<Tape<T>> {
        let (d, x, m) = self.prepare_input(input)?;
        self.forward_flat(d, x, m)
    }

    fn field_forward(&self, z: &[T], d: &Dims) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let fh = self.config.field_hidden;
        let p = d.points();
        let mut h = vec![T::zero(); fh * p];
        conv3d_forward(z, d, &self.field.w1, fh, &self.feature_kernel(), Some(&self.field.b1), &mut h);
        let slope = self.slope();
        h.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
        let mut out = vec![T::zero(); 2 * p];
        conv3d_forward(&h, &d.with_channels(fh), &self.field.w2, 2, &Kernel::new(1, 1, 1), Some(&self.field.b2), &mut out);
        let var_raw = if self.config.heteroscedastic {
            out.split_off(p)
        } else {
            out.truncate(p);
            vec![self.field.var_raw]
        };
        let floor = T::of(VARIANCE_FLOOR);
        let sigma2 = if self.config.heteroscedastic {
            var_raw.iter().map(|&a| softplus(a) + floor).collect()
        } else {
            vec![softplus(var_raw[0]) + floor; p]
        };
        (h, out, var_raw, sigma2)
    }

    fn source_forward(&self, z: &[T], d: &Dims) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let s = self.config.detection_cells;
        let (wx, wy) = self.cell;
        let inv_t = T::one() / T::of(d.t as f64);
        let plane = d.plane();
        let mut pooled = vec![T::zero(); d.c * plane];
        for c in 0..d.c {
            let dst = &mut pooled[c * plane..(c + 1) * plane];
            for t in 0..d.t {
                let src = &z[(c * d.t + t) * plane..(c * d.t + t + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
            dst.iter_mut().for_each(|v| *v *= inv_t);
        }
        let rows = d.c * wx * wy;
        let cells = s * s;
        let mut patches = vec![T::zero(); rows * cells];
        for_each_patch_entry(d.c, s, (wx, wy), d.y, |row, cell, src| patches[row * cells + cell] = pooled[src]);

        let sh = self.config.source_hidden;
        let mut h = vec![T::zero(); sh * cells];
        T::gemm(sh, rows, cells, T::one(), &self.source.w1, rows as isize, 1, &patches, cells as isize, 1, T::zero(), &mut h, cells as isize, 1);
        let slope = self.slope();
        for (o, row) in h.chunks_mut(cells).enumerate() {
            row.iter_mut().for_each(|v| *v = leaky_relu(*v + self.source.b1[o], slope));
        }
        let mut out = vec![T::zero(); 4 * cells];
        T::gemm(4, sh, cells, T::one(), &self.source.w2, sh as isize, 1, &h, cells as isize, 1, T::zero(), &mut out, cells as isize, 1);
        let mut detection = vec![T::zero(); cells * 4];
        for k in 0..4 {
            for cell in 0..cells {
                detection[cell * 4 + k] = out[k * cells + cell] + self.source.b2[k];
            }
        }
        (pooled, patches, h, detection)
    }

    /// Backpropagates output gradients, accumulating into `grad`.
    pub fn backward(&self, tape: &Tape<T>, g: &OutputGrads<T>, grad: &mut Self) {
        let zd = tape.z_dims;
        let mut dz = vec![T::zero(); tape.z.len()];
        self.field_backward(tape, g, grad, &mut dz);
        self.source_backward(tape, &g.detection, grad, &mut dz);
        self.encoder_backward(tape, dz, &zd, grad);
    }

    fn field_backward(&self, tape: &Tape<T>, g: &OutputGrads<T>, grad: &mut Self, dz: &mut [T]) {
        let d = tape.z_dims;
        let p = d.points();
        let fh = self.config.field_hidden;
        let mut dout = vec![T::zero(); 2 * p];
        dout[..p].copy_from_slice(&g.mu);
        if self.config.heteroscedastic {
            for q in 0..p {
                dout[p + q] = g.sigma2[q] * sigmoid(tape.var_raw[q]);
            }
        } else {
            let total: T = g.sigma2.iter().copied().sum();
            grad.field.var_raw += total * sigmoid(tape.var_raw[0]);
        }
        for (k, chan) in dout.chunks(p).enumerate() {
            grad.field.b2[k] += chan.iter().copied().sum();
        }
        let hd = d.with_channels(fh);
        let mut dh = vec![T::zero(); fh * p];
        conv3d_backward(&tape.field_h, &hd, &self.field.w2, 2, &Kernel::new(1, 1, 1), &dout, &mut grad.field.w2, Some(&mut dh));
        let slope = self.slope();
        dh.iter_mut().zip(&tape.field_h).for_each(|(g, &y)| *g *= leaky_relu_grad(y, slope));
        for (k, chan) in dh.chunks(p).enumerate() {
            grad.field.b1[k] += chan.iter().copied().sum();
        }
        conv3d_backward(&tape.z, &d, &self.field.w1, fh, &self.feature_kernel(), &dh, &mut grad.field.w1, Some(dz));
    }

    fn source_backward(&self, tape: &Tape<T>, ddet: &[T], grad: &mut Self, dz: &mut [T]) {
        let d = tape.z_dims;
        let s = self.config.detection_cells;
        let cells = s * s;
        let (wx, wy) = self.cell;
        let rows = d.c * wx * wy;
        let sh = self.config.source_hidden;
        let mut dout = vec![T::zero(); 4 * cells];
        for cell in 0..cells {
            for k in 0..4 {
                dout[k * cells + cell] = ddet[cell * 4 + k];
                grad.source.b2[k] += ddet[cell * 4 + k];
            }
        }
        // dW2 += dOut · hᵀ ; dh = W2ᵀ · dOut
        T::gemm(4, cells, sh, T::one(), &dout, cells as isize, 1, &tape.source_h, 1, cells as isize, T::one(), &mut grad.source.w2, sh as isize, 1);
        let mut dh = vec![T::zero(); sh * cells];
        T::gemm(sh, 4, cells, T::one(), &self.source.w2, 1, sh as isize, &dout, cells as isize, 1, T::zero(), &mut dh, cells as isize, 1);
        let slope = self.slope();
        dh.iter_mut().zip(&tape.source_h).for_each(|(g, &y)| *g *= leaky_relu_grad(y, slope));
        for (o, row) in dh.chunks(cells).enumerate() {
            grad.source.b1[o] += row.iter().copied().sum();
        }
        T::gemm(sh, cells, rows, T::one(), &dh, cells as isize, 1, &tape.patches, 1, cells as isize, T::one(), &mut grad.source.w1, rows as isize, 1);
        let mut dpatch = vec![T::zero(); rows * cells];
        T::gemm(rows, sh, cells, T::one(), &self.source.w1, 1, rows as isize, &dh, cells as isize, 1, T::zero(), &mut dpatch, cells as isize, 1);
        let plane = d.plane();
        let mut dpooled = vec![T::zero(); d.c * plane];
        for_each_patch_entry(d.c, s, (wx, wy), d.y, |row, cell, dst| dpooled[dst] += dpatch[row * cells + cell]);
        let inv_t = T::one() / T::of(d.t as f64);
        for c in 0..d.c {
            let src = &dpooled[c * plane..(c + 1) * plane];
            for t in 0..d.t {
                let dst = &mut dz[(c * d.t + t) * plane..(c * d.t + t + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b * inv_t);
            }
        }
        debug_assert_eq!(tape.pooled.len(), dpooled.len());
    }

    fn encoder_backward(&self, tape: &Tape<T>, dz: Vec<T>, zd: &Dims, grad: &mut Self) {
        let slope = self.slope();
        let mut dy = dz;
        let mut dm_next = vec![T::zero(); tape.final_mask.len()];
        let mut d = *zd;
        let base = tape.dims;
        for l in (0..self.encoder.len()).rev() {
            let layer = &self.encoder[l];
            let lt = &tape.layers[l];
            // mask diffusion m_l -> m_{l+1}
            let owner = self.sigma_owner(l);
            let mut diffuse_by = layer.clone();
            diffuse_by.sigma_raw = self.encoder[owner].sigma_raw;
            let (dm_from_diffusion, dsig) = diffuse_mask_backward(&lt.m, &lt.m_pre, d.t, d.x, d.y, &diffuse_by, &dm_next);
            grad.encoder[owner].sigma_raw += dsig;

            dy.iter_mut().zip(&lt.y).for_each(|(g, &y)| *g *= leaky_relu_grad(y, slope));
            let in_dims = base.with_channels(layer.c_in);
            let (dx, mut dm) = masked_conv_backward(&lt.x, &in_dims, &lt.m, layer, &lt.conv, &dy, &mut grad.encoder[l]);
            dm.iter_mut().zip(&dm_from_diffusion).for_each(|(a, &b)| *a += b);
            dy = dx;
            dm_next = dm;
            d = in_dims;
        }
    }

    /// Shared encoder only.
    pub fn encode(&self, input: &ModelInput) -> Result<Latent<T>> {
        let (d, mut x, mut m) = self.prepare_input(input)?;
        let slope = self.slope();
        let mut d = d;
        for (l, layer) in self.encoder.iter().enumerate() {
            let (mut y, _) = masked_conv_forward(&x, &d, &m, layer);
            y.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
            let mut diffuse_by = layer.clone();
            diffuse_by.sigma_raw = self.encoder[self.sigma_owner(l)].sigma_raw;
            m = diffuse_mask_forward(&m, d.t, d.x, d.y, &diffuse_by).0;
            x = y;
            d = d.with_channels(layer.c_out);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder activations".into()));
        }
        Ok(Latent { dims: d, values: x })
    }

    /// Field decoder `f1`: predictive mean and variance in physical units.
    pub fn decode_field(&self, z: &Latent<T>) -> Result<FieldPrediction> {
        self.check_latent(z)?;
        let (_, mu, _, sigma2) = self.field_forward(&z.values, &z.dims);
        Ok(self.field_prediction(&z.dims, &mu, &sigma2))
    }

    /// Source decoder `f2`: raw `(S, S, 4)` detection grid.
    pub fn decode_sources(&self, z: &Latent<T>) -> Result<DetectionGrid> {
        self.check_latent(z)?;
        let (_, _, _, det) = self.source_forward(&z.values, &z.dims);
        Ok(self.detection_grid(&det))
    }

    fn check_latent(&self, z: &Latent<T>) -> Result<()> {
        if z.dims.c != self.latent_channels() || z.values.len() != z.dims.len() {
            return Err(Error::Shape(format!("latent {:?} does not match the decoders", z.dims)));
        }
        if z.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent representation".into()));
        }
        Ok(())
    }

    pub fn field_prediction(&self, d: &Dims, mu: &[T], sigma2: &[T]) -> FieldPrediction {
        let s = self.normalizer.phi_scale;
        let shape = (d.t, d.x, d.y);
        FieldPrediction {
            phi_mu: Array3::from_shape_vec(shape, mu.iter().map(|v| v.to_f64().unwrap_or(f64::NAN) * s).collect()).expect("shape"),
            sigma2: Array3::from_shape_vec(shape, sigma2.iter().map(|v| v.to_f64().unwrap_or(f64::NAN) * s * s).collect())
                .expect("shape"),
        }
    }

    pub fn detection_grid(&self, det: &[T]) -> DetectionGrid {
        let s = self.config.detection_cells;
        DetectionGrid {
            cells: Array3::from_shape_vec((s, s, 4), det.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()).expect("shape"),
        }
    }

    /// Convenience: both predictions for one input.
    pub fn predict(&self, input: &ModelInput) -> Result<(FieldPrediction, DetectionGrid)> {
        let z = self.encode(input)?;
        Ok((self.decode_field(&z)?, self.decode_sources(&z)?))
    }
}

fn scaled<T: Real>(mut v: Vec<T>, s: f64) -> Vec<T> {
    let s = T::of(s);
    v.iter_mut().for_each(|x| *x *= s);
    v
}

/// Calls `f(row, cell, flat_index)` for every entry of the patch matrix,
/// where rows enumerate `(channel, dx, dy)` within a cell and `flat_index`
/// addresses the pooled `(c, x, y)` buffer.
fn for_each_patch_entry(c: usize, s: usize, (wx, wy): (usize, usize), ny: usize, mut f: impl FnMut(usize, usize, usize)) {
    let nx = s * wx;
    for ch in 0..c {
        for a in 0..wx {
            for b in 0..wy {
                let row = (ch * wx + a) * wy + b;
                for sx in 0..s {
                    for sy in 0..s {
                        let src = (ch * nx + sx * wx + a) * ny + sy * wy + b;
                        f(row, sx * s + sy, src);
                    }
                }
            }
        }
    }
}

/// Random network with the given number of sensors, for tests and probes.
pub fn random_input<R: Rng>(grid: &GridSpec, sensors: usize, rng: &mut R) -> Result<ModelInput> {
    let net = sample_sensor_network(grid, [sensors, sensors], rng.gen())?;
    let mask = crate::observation::init_mask(&net, grid)?;
    let mut features = Array4::zeros((3, grid.nt, grid.nx, grid.ny));
    for t in 0..grid.nt {
        for &[i, j] in net.locations() {
            features[[0, t, i, j]] = rng.gen_range(0.0..2.0);
        }
        let (u, v) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        features.slice_mut(ndarray::s![1, t, .., ..]).fill(u);
        features.slice_mut(ndarray::s![2, t, .., ..]).fill(v);
    }
    let mask0 = mask.insert_axis(ndarray::Axis(0)).broadcast((grid.nt, grid.nx, grid.ny)).expect("broadcast").to_owned();
    Ok(ModelInput { features, mask0 })
}
