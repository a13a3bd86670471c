use super::Real;

/// Shape of a `(channels, t, x, y)` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub t: usize,
    pub x: usize,
    pub y: usize,
}

impl Dims {
    pub fn new(c: usize, t: usize, x: usize, y: usize) -> Self {
        Self { c, t, x, y }
    }

    pub fn plane(&self) -> usize {
        self.x * self.y
    }

    /// Points per channel.
    pub fn points(&self) -> usize {
        self.t * self.x * self.y
    }

    pub fn len(&self) -> usize {
        self.c * self.points()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

/// Odd kernel extents; convolutions use same padding `k/2` on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Kernel {
    pub t: usize,
    pub x: usize,
    pub y: usize,
}

impl Kernel {
    pub fn new(t: usize, x: usize, y: usize) -> Self {
        assert!(t % 2 == 1 && x % 2 == 1 && y % 2 == 1, "kernel extents must be odd");
        Self { t, x, y }
    }

    pub fn taps(&self) -> usize {
        self.t * self.x * self.y
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1
    }
}

const CHUNK_ELEMS: usize = 1 << 22;

fn frames_per_chunk(rows: usize, d: &Dims) -> usize {
    (CHUNK_ELEMS / (rows * d.plane()).max(1)).clamp(1, d.t)
}

/// Visits every `(row, frame, x)` line of the im2col matrix for frames
/// `t0..t1`, passing the destination column offset and, when in bounds, the
/// source offset plus the valid `y` range of the line.
fn for_each_line(
    d: &Dims,
    k: &Kernel,
    t0: usize,
    t1: usize,
    mut f: impl FnMut(usize, usize, Option<(usize, usize, usize, isize)>),
) {
    let cols = (t1 - t0) * d.plane();
    let (ht, hx, hy) = ((k.t / 2) as isize, (k.x / 2) as isize, (k.y / 2) as isize);
    let mut row = 0;
    for ci in 0..d.c {
        for a in 0..k.t as isize {
            for b in 0..k.x as isize {
                for c in 0..k.y as isize {
                    let (ot, ox, oy) = (a - ht, b - hx, c - hy);
                    let y_lo = (-oy).max(0) as usize;
                    let y_hi = (d.y as isize - oy).min(d.y as isize).max(0) as usize;
                    for tt in t0..t1 {
                        let st = tt as isize + ot;
                        for xx in 0..d.x {
                            let sx = xx as isize + ox;
                            let dst = row * cols + ((tt - t0) * d.x + xx) * d.y;
                            if st < 0 || st >= d.t as isize || sx < 0 || sx >= d.x as isize || y_lo >= y_hi {
                                f(dst, d.y, None);
                            } else {
                                let src = ((ci * d.t + st as usize) * d.x + sx as usize) * d.y;
                                f(dst, d.y, Some((src, y_lo, y_hi, oy)));
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], d: &Dims, k: &Kernel, t0: usize, t1: usize, cols: &mut [T]) {
    for_each_line(d, k, t0, t1, |dst, ny, src| {
        let line = &mut cols[dst..dst + ny];
        match src {
            None => line.fill(T::zero()),
            Some((s, lo, hi, oy)) => {
                line[..lo].fill(T::zero());
                let from = (s as isize + lo as isize + oy) as usize;
                line[lo..hi].copy_from_slice(&x[from..from + (hi - lo)]);
                line[hi..].fill(T::zero());
            }
        }
    });
}

fn col2im<T: Real>(cols: &[T], d: &Dims, k: &Kernel, t0: usize, t1: usize, dx: &mut [T]) {
    for_each_line(d, k, t0, t1, |dst, _, src| {
        if let Some((s, lo, hi, oy)) = src {
            let from = (s as isize + lo as isize + oy) as usize;
            for (o, &g) in dx[from..from + (hi - lo)].iter_mut().zip(&cols[dst + lo..dst + hi]) {
                *o += g;
            }
        }
    });
}

/// Same-padded 3D cross-correlation.
///
/// `w` has shape `(c_out, d.c, k.t, k.x, k.y)`; `out` has shape
/// `(c_out, d.t, d.x, d.y)` and is overwritten. `bias`, when given, is added
/// per output channel.
pub fn conv3d_forward<T: Real>(x: &[T], d: &Dims, w: &[T], c_out: usize, k: &Kernel, bias: Option<&[T]>, out: &mut [T]) {
    let rows = d.c * k.taps();
    assert_eq!(x.len(), d.len());
    assert_eq!(w.len(), c_out * rows);
    assert_eq!(out.len(), c_out * d.points());
    let n = d.points() as isize;
    if k.is_pointwise() {
        T::gemm(c_out, rows, d.points(), T::one(), w, rows as isize, 1, x, n, 1, T::zero(), out, n, 1);
    } else {
        let step = frames_per_chunk(rows, d);
        let mut cols = vec![T::zero(); rows * step * d.plane()];
        let mut t0 = 0;
        while t0 < d.t {
            let t1 = (t0 + step).min(d.t);
            let pc = (t1 - t0) * d.plane();
            im2col(x, d, k, t0, t1, &mut cols[..rows * pc]);
            let off = t0 * d.plane();
            T::gemm(
                c_out,
                rows,
                pc,
                T::one(),
                w,
                rows as isize,
                1,
                &cols[..rows * pc],
                pc as isize,
                1,
                T::zero(),
                &mut out[off..],
                n,
                1,
            );
            t0 = t1;
        }
    }
    if let Some(b) = bias {
        for (chan, &bv) in out.chunks_mut(d.points()).zip(b) {
            chan.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Backward pass of [`conv3d_forward`] (without bias). Accumulates into `dw`
/// and, when given, into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &[T],
    d: &Dims,
    w: &[T],
    c_out: usize,
    k: &Kernel,
    dout: &[T],
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let rows = d.c * k.taps();
    assert_eq!(dout.len(), c_out * d.points());
    assert_eq!(dw.len(), c_out * rows);
    let n = d.points() as isize;
    if k.is_pointwise() {
        // dW += dOut · Xᵀ ; dX += Wᵀ · dOut
        T::gemm(c_out, d.points(), rows, T::one(), dout, n, 1, x, 1, n, T::one(), dw, rows as isize, 1);
        if let Some(dx) = dx {
            T::gemm(rows, c_out, d.points(), T::one(), w, 1, rows as isize, dout, n, 1, T::one(), dx, n, 1);
        }
        return;
    }
    let step = frames_per_chunk(rows, d);
    let mut cols = vec![T::zero(); rows * step * d.plane()];
    let mut t0 = 0;
    while t0 < d.t {
        let t1 = (t0 + step).min(d.t);
        let pc = (t1 - t0) * d.plane();
        let off = t0 * d.plane();
        im2col(x, d, k, t0, t1, &mut cols[..rows * pc]);
        T::gemm(
            c_out,
            pc,
            rows,
            T::one(),
            &dout[off..],
            n,
            1,
            &cols[..rows * pc],
            1,
            pc as isize,
            T::one(),
            dw,
            rows as isize,
            1,
        );
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(
                rows,
                c_out,
                pc,
                T::one(),
                w,
                1,
                rows as isize,
                &dout[off..],
                n,
                1,
                T::zero(),
                &mut cols[..rows * pc],
                pc as isize,
                1,
            );
            col2im(&cols[..rows * pc], d, k, t0, t1, dx);
        }
        t0 = t1;
    }
}

/// Sum of a single-channel `(t, x, y)` field over each same-padded window of
/// extent `k`, counting in-bounds entries only. The operator is self-adjoint,
/// so it also serves as its own backward pass.
pub fn box_sum<T: Real>(m: &[T], t: usize, nx: usize, ny: usize, k: &Kernel) -> Vec<T> {
    assert_eq!(m.len(), t * nx * ny);
    // separable: y, then x, then t
    let run = |src: &[T], len: usize, stride: usize, outer: usize, inner: usize, h: usize| -> Vec<T> {
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * stride + i;
                for p in 0..len {
                    let lo = p.saturating_sub(h);
                    let hi = (p + h).min(len - 1);
                    let mut acc = T::zero();
                    for q in lo..=hi {
                        acc += src[base + q * stride];
                    }
                    out[base + p * stride] = acc;
                }
            }
        }
        out
    };
    let a = run(m, ny, 1, t * nx, 1, k.y / 2);
    let b = run(&a, nx, ny, t, ny, k.x / 2);
    run(&b, t, nx * ny, 1, nx * ny, k.t / 2)
}
