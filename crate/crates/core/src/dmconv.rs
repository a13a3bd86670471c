//! Diffusive masked convolution.
//!
//! A layer convolves only the observed part of its input, renormalising each
//! window by `sum(1)/sum(M)` and emitting exactly zero where the window holds
//! no observations:
//!
//! ```text
//! x' = Wᵀ(X ⊙ M)·sum(1)/sum(M) + b   if sum(M) > 0
//! x' = 0                             otherwise
//! ```
//!
//! After the convolution the mask is spread by an unnormalised spatial
//! Gaussian `G(i, j) = exp(−[(i−c)² + (j−c)²]/(2σ²))`, `c = (k−1)/2`, applied
//! to every time slice independently, and clipped at one. `σ` is the layer's
//! only mask parameter and is learned.
//!
//! `sum(1)` counts the in-bounds taps of the window, so with `M ≡ 1` the layer
//! reduces to an ordinary zero-padded convolution.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use crate::nn::{box_sum, conv3d_backward, conv3d_forward, he_init, sigmoid, softplus, softplus_inv, Dims, Kernel, Real};
use crate::{Error, Result};

/// Lower bound added to the softplus reparameterisation of `σ`.
pub const SIGMA_FLOOR: f64 = 0.1;

/// `σ = softplus(raw) + 0.1`.
pub fn sigma_from_raw<T: Real>(raw: T) -> T {
    softplus(raw) + T::of(SIGMA_FLOOR)
}

pub fn raw_for_sigma(sigma: f64) -> f64 {
    assert!(sigma > SIGMA_FLOOR, "sigma must exceed {SIGMA_FLOOR}");
    softplus_inv(sigma - SIGMA_FLOOR)
}

/// The `k × k` spatial Gaussian with unit centre.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Array2<f64>> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("diffusion kernel size must be odd, got {k}")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(Array2::from_shape_vec((k, k), gaussian_taps(k, sigma)).expect("k*k taps"))
}

fn gaussian_taps<T: Real>(k: usize, sigma: T) -> Vec<T> {
    let c = T::of((k as f64 - 1.0) / 2.0);
    let denom = T::of(2.0) * sigma * sigma;
    let mut g = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (T::of(i as f64) - c, T::of(j as f64) - c);
            g.push((-(di * di + dj * dj) / denom).exp());
        }
    }
    g
}

fn squared_radii<T: Real>(k: usize) -> Vec<T> {
    let c = (k as f64 - 1.0) / 2.0;
    (0..k * k)
        .map(|idx| {
            let (i, j) = ((idx / k) as f64 - c, (idx % k) as f64 - c);
            T::of(i * i + j * j)
        })
        .collect()
}

/// Same-padded 2D cross-correlation of every `(x, y)` slice with one `k × k` kernel.
fn correlate_slices<T: Real>(m: &[T], t: usize, nx: usize, ny: usize, g: &[T], k: usize) -> Vec<T> {
    let h = (k / 2) as isize;
    let mut out = vec![T::zero(); m.len()];
    for s in 0..t {
        let base = s * nx * ny;
        for a in 0..k as isize {
            let oi = a - h;
            let (i_lo, i_hi) = ((-oi).max(0) as usize, (nx as isize - oi).clamp(0, nx as isize) as usize);
            for b in 0..k as isize {
                let oj = b - h;
                let (j_lo, j_hi) = ((-oj).max(0) as usize, (ny as isize - oj).clamp(0, ny as isize) as usize);
                let w = g[(a * k as isize + b) as usize];
                for i in i_lo..i_hi {
                    let src = base + ((i as isize + oi) as usize) * ny;
                    let dst = base + i * ny;
                    for j in j_lo..j_hi {
                        out[dst + j] += w * m[(src as isize + j as isize + oj) as usize];
                    }
                }
            }
        }
    }
    out
}

/// `∂/∂G(a, b)` of `<dpre, correlate(m, G)>`.
fn correlate_kernel_grad<T: Real>(m: &[T], dpre: &[T], t: usize, nx: usize, ny: usize, k: usize) -> Vec<T> {
    let h = (k / 2) as isize;
    let mut dg = vec![T::zero(); k * k];
    for s in 0..t {
        let base = s * nx * ny;
        for a in 0..k as isize {
            let oi = a - h;
            let (i_lo, i_hi) = ((-oi).max(0) as usize, (nx as isize - oi).clamp(0, nx as isize) as usize);
            for b in 0..k as isize {
                let oj = b - h;
                let (j_lo, j_hi) = ((-oj).max(0) as usize, (ny as isize - oj).clamp(0, ny as isize) as usize);
                let mut acc = T::zero();
                for i in i_lo..i_hi {
                    let src = base + ((i as isize + oi) as usize) * ny;
                    let dst = base + i * ny;
                    for j in j_lo..j_hi {
                        acc += dpre[dst + j] * m[(src as isize + j as isize + oj) as usize];
                    }
                }
                dg[(a * k as isize + b) as usize] += acc;
            }
        }
    }
    dg
}

/// A masked convolution with its mask-diffusion parameter.
///
/// `weights` has shape `(c_out, c_in, kernel.t, kernel.x, kernel.y)`. The
/// diffusion kernel is `mask_kernel × mask_kernel` in space and one frame in time.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConvLayer<T: Real> {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: Kernel,
    pub mask_kernel: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub sigma_raw: T,
}

impl<T: Real> MaskedConvLayer<T> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, kernel: Kernel, mask_kernel: usize, sigma: f64, rng: &mut R) -> Result<Self> {
        if mask_kernel % 2 == 0 {
            return Err(Error::Config(format!("mask kernel must be odd, got {mask_kernel}")));
        }
        if !(sigma > SIGMA_FLOOR) {
            return Err(Error::Config(format!("initial sigma must exceed {SIGMA_FLOOR}")));
        }
        let fan_in = c_in * kernel.taps();
        Ok(Self {
            c_in,
            c_out,
            kernel,
            mask_kernel,
            weights: he_init(rng, fan_in, c_out * fan_in),
            bias: vec![T::zero(); c_out],
            sigma_raw: T::of(raw_for_sigma(sigma)),
        })
    }

    /// Same shape, every parameter zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
            sigma_raw: T::zero(),
            ..self.clone()
        }
    }

    pub fn sigma(&self) -> T {
        sigma_from_raw(self.sigma_raw)
    }

    pub fn diffusion_kernel(&self) -> Vec<T> {
        gaussian_taps(self.mask_kernel, self.sigma())
    }
}

/// Intermediate values of one masked convolution kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MaskedConvCache<T> {
    xm: Vec<T>,
    raw: Vec<T>,
    msum: Vec<T>,
    nvalid: Vec<T>,
}

/// Masked convolution on flat buffers: `x` is `(c_in, t, nx, ny)`, `m` is `(t, nx, ny)`.
pub fn masked_conv_forward<T: Real>(x: &[T], d: &Dims, m: &[T], layer: &MaskedConvLayer<T>) -> (Vec<T>, MaskedConvCache<T>) {
    assert_eq!(d.c, layer.c_in, "input channels");
    assert_eq!(m.len(), d.points(), "mask shape");
    let p = d.points();
    let mut xm = x.to_vec();
    for chan in xm.chunks_mut(p) {
        chan.iter_mut().zip(m).for_each(|(v, &w)| *v *= w);
    }
    let mut raw = vec![T::zero(); layer.c_out * p];
    conv3d_forward(&xm, d, &layer.weights, layer.c_out, &layer.kernel, None, &mut raw);
    let msum = box_sum(m, d.t, d.x, d.y, &layer.kernel);
    let nvalid = box_sum(&vec![T::one(); p], d.t, d.x, d.y, &layer.kernel);

    let floor = T::support_floor();
    let mut out = vec![T::zero(); raw.len()];
    for (co, (o, r)) in out.chunks_mut(p).zip(raw.chunks(p)).enumerate() {
        let b = layer.bias[co];
        for q in 0..p {
            if msum[q] > floor {
                o[q] = r[q] / msum[q] * nvalid[q] + b;
            }
        }
    }
    (out, MaskedConvCache { xm, raw, msum, nvalid })
}

/// Gradients of a masked convolution. Accumulates weight and bias gradients
/// into `grad`, returns `(dX, dM)`.
pub fn masked_conv_backward<T: Real>(
    x: &[T],
    d: &Dims,
    m: &[T],
    layer: &MaskedConvLayer<T>,
    cache: &MaskedConvCache<T>,
    dout: &[T],
    grad: &mut MaskedConvLayer<T>,
) -> (Vec<T>, Vec<T>) {
    let p = d.points();
    let floor = T::support_floor();
    let mut draw = vec![T::zero(); dout.len()];
    let mut dmsum = vec![T::zero(); p];
    for co in 0..layer.c_out {
        let (go, r) = (&dout[co * p..(co + 1) * p], &cache.raw[co * p..(co + 1) * p]);
        let dr = &mut draw[co * p..(co + 1) * p];
        let mut db = T::zero();
        for q in 0..p {
            let s = cache.msum[q];
            if s > floor {
                let scale = cache.nvalid[q] / s;
                dr[q] = go[q] * scale;
                db += go[q];
                dmsum[q] -= go[q] * (r[q] / s) * scale;
            }
        }
        grad.bias[co] += db;
    }
    let mut dxm = vec![T::zero(); x.len()];
    conv3d_backward(&cache.xm, d, &layer.weights, layer.c_out, &layer.kernel, &draw, &mut grad.weights, Some(&mut dxm));

    let mut dm = box_sum(&dmsum, d.t, d.x, d.y, &layer.kernel);
    let mut dx = dxm;
    for (gx, xc) in dx.chunks_mut(p).zip(x.chunks(p)) {
        for q in 0..p {
            dm[q] += gx[q] * xc[q];
            gx[q] *= m[q];
        }
    }
    (dx, dm)
}

/// Mask diffusion on a flat `(t, nx, ny)` buffer. Returns the clipped mask
/// and the pre-clip values.
pub fn diffuse_mask_forward<T: Real>(m: &[T], t: usize, nx: usize, ny: usize, layer: &MaskedConvLayer<T>) -> (Vec<T>, Vec<T>) {
    let pre = correlate_slices(m, t, nx, ny, &layer.diffusion_kernel(), layer.mask_kernel);
    let out = pre.iter().map(|&v| v.min(T::one())).collect();
    (out, pre)
}

/// Gradients of [`diffuse_mask_forward`]: returns `(dM, dσ_raw)`.
pub fn diffuse_mask_backward<T: Real>(
    m: &[T],
    pre: &[T],
    t: usize,
    nx: usize,
    ny: usize,
    layer: &MaskedConvLayer<T>,
    dout: &[T],
) -> (Vec<T>, T) {
    let k = layer.mask_kernel;
    let dpre: Vec<T> = dout
        .iter()
        .zip(pre)
        .map(|(&g, &v)| if v < T::one() { g } else { T::zero() })
        .collect();
    let g = layer.diffusion_kernel();
    // the Gaussian is point-symmetric, so the adjoint correlation uses the same taps
    let dm = correlate_slices(&dpre, t, nx, ny, &g, k);
    let dg = correlate_kernel_grad(m, &dpre, t, nx, ny, k);
    let sigma = layer.sigma();
    let r2 = squared_radii::<T>(k);
    let dsigma: T = dg
        .iter()
        .zip(&g)
        .zip(&r2)
        .map(|((&d, &w), &r)| d * w * r / (sigma * sigma * sigma))
        .sum();
    (dm, dsigma * sigmoid(layer.sigma_raw))
}

/// Mask values in `[0, 1]`, shape `(t, nx, ny)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState<T: Real> {
    values: Array3<T>,
}

impl<T: Real> MaskState<T> {
    pub fn new(values: Array3<T>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Config("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<T> {
        &self.values
    }

    pub fn into_values(self) -> Array3<T> {
        self.values
    }

    /// Number of strictly positive entries.
    pub fn support_size(&self) -> usize {
        self.values.iter().filter(|&&v| v > T::zero()).count()
    }
}

fn flat<T: Clone>(a: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, impl ndarray::Dimension>) -> Vec<T> {
    a.iter().cloned().collect()
}

fn dims_of<T>(x: &Array4<T>) -> Dims {
    let (c, t, nx, ny) = x.dim();
    Dims::new(c, t, nx, ny)
}

fn check_shapes<T: Real>(x: &Array4<T>, m: &Array3<T>, layer: &MaskedConvLayer<T>) -> Result<Dims> {
    let d = dims_of(x);
    if m.dim() != (d.t, d.x, d.y) {
        return Err(Error::Shape(format!("mask {:?} does not match features {:?}", m.dim(), x.dim())));
    }
    if d.c != layer.c_in {
        return Err(Error::Shape(format!("layer expects {} channels, got {}", layer.c_in, d.c)));
    }
    Ok(d)
}

/// Masked convolution of `x` (`(c_in, t, nx, ny)`) under mask `m` (`(t, nx, ny)`).
pub fn masked_conv<T: Real>(x: &Array4<T>, m: &Array3<T>, layer: &MaskedConvLayer<T>) -> Result<Array4<T>> {
    let d = check_shapes(x, m, layer)?;
    let (out, _) = masked_conv_forward(&flat(x), &d, &flat(m), layer);
    Ok(Array4::from_shape_vec((layer.c_out, d.t, d.x, d.y), out).expect("output shape"))
}

/// `M' = min(G_σ ⋆ M, 1)` slice by slice.
pub fn diffuse_mask<T: Real>(m: &MaskState<T>, layer: &MaskedConvLayer<T>) -> MaskState<T> {
    let (t, nx, ny) = m.values.dim();
    let (out, _) = diffuse_mask_forward(&flat(&m.values), t, nx, ny, layer);
    MaskState {
        values: Array3::from_shape_vec((t, nx, ny), out).expect("mask shape"),
    }
}

/// One diffusive masked convolution layer: features from [`masked_conv`],
/// mask from [`diffuse_mask`].
pub fn dm_layer<T: Real>(x: &Array4<T>, m: &MaskState<T>, layer: &MaskedConvLayer<T>) -> Result<(Array4<T>, MaskState<T>)> {
    let out = masked_conv(x, &m.values, layer)?;
    Ok((out, diffuse_mask(m, layer)))
}
