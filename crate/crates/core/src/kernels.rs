//! Hand-written CPU kernels registered as candle custom ops: the selective-scan
//! recurrence, the perpendicular tap sampler of the offset snake convolution,
//! im2col unfolding for convolutions, depthwise convolution and per-channel
//! affine ops.
//!
//! The scan and the sampler compute in f64 regardless of the storage dtype
//! and write results back in the input dtype.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::Result;

fn to_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("kernel input must be contiguous".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| f64::from(x)).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        other => {
            return Err(candle_core::Error::UnsupportedDTypeForOp(
                other.dtype(),
                "octaseg kernel",
            ))
        }
    })
}

fn from_f64(values: Vec<f64>, dtype: DType) -> CpuStorage {
    match dtype {
        DType::F32 => CpuStorage::F32(values.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(values),
    }
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn like(values: Vec<f64>, reference: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(values, reference.shape(), reference.device())?.to_dtype(reference.dtype())
}

/// Dimensions of one selective-scan call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Floating types the scan kernels run in.
pub trait ScanFloat: candle_core::WithDType {
    fn exp(self) -> Self;
}

impl ScanFloat for f32 {
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl ScanFloat for f64 {
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// Sequential reference recurrence.
///
/// Layouts: `x`, `dt`: `[batch, len, channels]`; `a`: `[channels, state]`;
/// `b`, `c`: `[batch, len, state]`. Returns `y` without the skip term:
/// `h_t = exp(dt_t a) * h_{t-1} + dt_t b_t x_t`, `y_t = <c_t, h_t>`.
pub fn scan_forward<T: ScanFloat>(
    dims: ScanDims,
    x: &[T],
    dt: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
) -> Vec<T> {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = dims;
    let mut y = vec![T::zero(); batch * len * channels];
    let mut h = vec![T::zero(); state];
    for bi in 0..batch {
        for d in 0..channels {
            h.iter_mut().for_each(|v| *v = T::zero());
            let arow = &a[d * state..(d + 1) * state];
            for t in 0..len {
                let xi = (bi * len + t) * channels + d;
                let bc = (bi * len + t) * state;
                let delta = dt[xi];
                let u = delta * x[xi];
                let bt = &b[bc..bc + state];
                let ct = &c[bc..bc + state];
                let mut acc = T::zero();
                for n in 0..state {
                    h[n] = (delta * arow[n]).exp() * h[n] + u * bt[n];
                    acc += ct[n] * h[n];
                }
                y[xi] = acc;
            }
        }
    }
    y
}

/// Gradients of [`scan_forward`] with respect to all five inputs.
pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub dt: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

pub fn scan_backward<T: ScanFloat>(
    dims: ScanDims,
    x: &[T],
    dt: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = dims;
    let zero = T::zero();
    let mut g = ScanGrads {
        x: vec![zero; x.len()],
        dt: vec![zero; dt.len()],
        a: vec![zero; a.len()],
        b: vec![zero; b.len()],
        c: vec![zero; c.len()],
    };
    // Per (batch, channel) sequence: h_t and exp(dt_t a) at [t * state + n].
    let mut hs = vec![zero; (len + 1) * state];
    let mut decays = vec![zero; len * state];
    let mut carry = vec![zero; state];
    let mut ga = vec![zero; state];
    for bi in 0..batch {
        for d in 0..channels {
            let arow = &a[d * state..(d + 1) * state];
            // hs row 0 is h_{-1} = 0; row t + 1 is h_t.
            for t in 0..len {
                let xi = (bi * len + t) * channels + d;
                let bc = (bi * len + t) * state;
                let delta = dt[xi];
                let u = delta * x[xi];
                let brow = &b[bc..bc + state];
                let dec = &mut decays[t * state..(t + 1) * state];
                let (prev, cur) = hs[t * state..(t + 2) * state].split_at_mut(state);
                for n in 0..state {
                    let decay = (delta * arow[n]).exp();
                    dec[n] = decay;
                    cur[n] = decay * prev[n] + u * brow[n];
                }
            }
            carry.iter_mut().for_each(|v| *v = zero);
            ga.iter_mut().for_each(|v| *v = zero);
            for t in (0..len).rev() {
                let xi = (bi * len + t) * channels + d;
                let bc = (bi * len + t) * state;
                let delta = dt[xi];
                let xv = x[xi];
                let gyt = gy[xi];
                let prev = &hs[t * state..(t + 1) * state];
                let cur = &hs[(t + 1) * state..(t + 2) * state];
                let dec = &decays[t * state..(t + 1) * state];
                let brow = &b[bc..bc + state];
                let crow = &c[bc..bc + state];
                let gc = &mut g.c[bc..bc + state];
                let gb = &mut g.b[bc..bc + state];
                let carry = &mut carry[..state];
                let ga = &mut ga[..state];
                let mut gdt = zero;
                let mut gx = zero;
                for n in 0..state {
                    let gh = crow[n] * gyt + carry[n];
                    gc[n] += gyt * cur[n];
                    let gdecay = gh * prev[n] * dec[n];
                    gdt += gdecay * arow[n] + gh * brow[n] * xv;
                    ga[n] += gdecay * delta;
                    gx += gh * delta * brow[n];
                    gb[n] += gh * delta * xv;
                    carry[n] = gh * dec[n];
                }
                g.x[xi] += gx;
                g.dt[xi] += gdt;
            }
            for n in 0..state {
                g.a[d * state + n] += ga[n];
            }
        }
    }
    g
}

/// Same recurrence evaluated as a work-efficient (Blelloch) parallel prefix
/// over the affine maps `h -> decay * h + input`. Depth is logarithmic in the
/// sequence length; the loop body of each level is independent across
/// positions.
pub fn scan_forward_associative(
    dims: ScanDims,
    x: &[f64],
    dt: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
) -> Vec<f64> {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = dims;
    let size = len.next_power_of_two();
    let mut y = vec![0.0; batch * len * channels];
    let mut decay = vec![1.0; size];
    let mut input = vec![0.0; size];
    for bi in 0..batch {
        for d in 0..channels {
            for n in 0..state {
                let adn = a[d * state + n];
                for t in 0..size {
                    if t < len {
                        let xi = (bi * len + t) * channels + d;
                        let delta = dt[xi];
                        decay[t] = (delta * adn).exp();
                        input[t] = delta * b[(bi * len + t) * state + n] * x[xi];
                    } else {
                        decay[t] = 1.0;
                        input[t] = 0.0;
                    }
                }
                inclusive_affine_scan(&mut decay, &mut input);
                for t in 0..len {
                    let xi = (bi * len + t) * channels + d;
                    y[xi] += c[(bi * len + t) * state + n] * input[t];
                }
            }
        }
    }
    y
}

/// In-place inclusive scan of affine maps `(m, u)` composed left to right:
/// `(m1, u1) then (m2, u2) = (m1 m2, m2 u1 + u2)`. Length must be a power of two.
fn inclusive_affine_scan(m: &mut [f64], u: &mut [f64]) {
    let n = m.len();
    debug_assert!(n.is_power_of_two());
    let orig_m = m.to_vec();
    let orig_u = u.to_vec();
    // Up-sweep.
    let mut step = 1;
    while step < n {
        let mut i = 2 * step - 1;
        while i < n {
            let j = i - step;
            u[i] = m[i] * u[j] + u[i];
            m[i] *= m[j];
            i += 2 * step;
        }
        step *= 2;
    }
    // Down-sweep to an exclusive scan.
    m[n - 1] = 1.0;
    u[n - 1] = 0.0;
    let mut step = n / 2;
    while step >= 1 {
        let mut i = 2 * step - 1;
        while i < n {
            let j = i - step;
            let (lm, lu) = (m[j], u[j]);
            m[j] = m[i];
            u[j] = u[i];
            // Compose the prefix ending before the left half with the left half.
            u[i] = lm * u[i] + lu;
            m[i] *= lm;
            i += 2 * step;
        }
        step /= 2;
    }
    // Exclusive -> inclusive.
    for t in 0..n {
        u[t] = orig_m[t] * u[t] + orig_u[t];
        m[t] *= orig_m[t];
    }
}

/// Custom op: `(stack[x, dt], a, stack[b, c]) -> y`.
struct SelectiveScanOp {
    dims: ScanDims,
}

impl SelectiveScanOp {
    fn forward<T: ScanFloat>(&self, xd: &[T], a: &[T], bc: &[T]) -> Vec<T> {
        let (nx, nb) = (xd.len() / 2, bc.len() / 2);
        scan_forward(self.dims, &xd[..nx], &xd[nx..], a, &bc[..nb], &bc[nb..])
    }

    fn backward<T: ScanFloat>(
        &self,
        xd: &[T],
        a: &[T],
        bc: &[T],
        gy: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (nx, nb) = (xd.len() / 2, bc.len() / 2);
        let g = scan_backward(self.dims, &xd[..nx], &xd[nx..], a, &bc[..nb], &bc[nb..], gy);
        let mut gxd = g.x;
        gxd.extend(g.dt);
        let mut gbc = g.b;
        gbc.extend(g.c);
        (gxd, g.a, gbc)
    }
}

impl CustomOp3 for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective-scan"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = Shape::from((self.dims.batch, self.dims.len, self.dims.channels));
        let y = match (s1, s2, s3) {
            (CpuStorage::F32(xd), CpuStorage::F32(a), CpuStorage::F32(bc)) => CpuStorage::F32(
                self.forward(storage_slice(xd, l1)?, storage_slice(a, l2)?, storage_slice(bc, l3)?),
            ),
            (CpuStorage::F64(xd), CpuStorage::F64(a), CpuStorage::F64(bc)) => CpuStorage::F64(
                self.forward(storage_slice(xd, l1)?, storage_slice(a, l2)?, storage_slice(bc, l3)?),
            ),
            _ => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    s1.dtype(),
                    "selective-scan",
                ))
            }
        };
        Ok((y, shape))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        arg3: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn flat<T: candle_core::WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
            t.contiguous()?.flatten_all()?.to_vec1::<T>()
        }
        fn wrap<T: candle_core::WithDType>(
            (gxd, ga, gbc): (Vec<T>, Vec<T>, Vec<T>),
            args: [&Tensor; 3],
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
            Ok((
                Some(Tensor::from_vec(gxd, args[0].shape(), args[0].device())?),
                Some(Tensor::from_vec(ga, args[1].shape(), args[1].device())?),
                Some(Tensor::from_vec(gbc, args[2].shape(), args[2].device())?),
            ))
        }
        let args = [arg1, arg2, arg3];
        match arg1.dtype() {
            DType::F32 => wrap(
                self.backward::<f32>(&flat(arg1)?, &flat(arg2)?, &flat(arg3)?, &flat(grad_res)?),
                args,
            ),
            _ => wrap(
                self.backward::<f64>(&flat(arg1)?, &flat(arg2)?, &flat(arg3)?, &flat(grad_res)?),
                args,
            ),
        }
    }
}

/// Differentiable selective scan without the skip term.
///
/// `x`, `dt`: `[batch, len, channels]`; `a`: `[channels, state]`;
/// `b`, `c`: `[batch, len, state]`.
pub fn selective_scan_op(
    x: &Tensor,
    dt: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
) -> Result<Tensor> {
    let (batch, len, channels) = x.dims3()?;
    let state = a.dim(1)?;
    let dims = ScanDims {
        batch,
        len,
        channels,
        state,
    };
    let xd = Tensor::stack(&[x, dt], 0)?.contiguous()?;
    let bc = Tensor::stack(&[b, c], 0)?.contiguous()?;
    let a = a.contiguous()?;
    Ok(xd.apply_op3(&a, &bc, SelectiveScanOp { dims })?)
}

/// Kernel axis of a directional convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// 1 x k kernel: taps run along the width; offsets move them vertically.
    Horizontal,
    /// k x 1 kernel: taps run along the height; offsets move them horizontally.
    Vertical,
}

#[derive(Debug, Clone, Copy)]
struct SampleDims {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    taps: usize,
}

/// Linear interpolation weights along the offset axis. Returns
/// `(floor index, fractional part)`.
fn split_coord(pos: f64) -> (i64, f64) {
    let f = pos.floor();
    (f as i64, pos - f)
}

struct PerpendicularSampleOp {
    dims: SampleDims,
    orientation: Orientation,
}

impl PerpendicularSampleOp {
    /// Calls `visit(out_index, src_index_lo, src_index_hi, frac, offset_index)`
    /// for every output element; source indices are `None` outside the image.
    fn for_each(
        &self,
        mut visit: impl FnMut(usize, Option<usize>, Option<usize>, f64, usize),
        offsets: &[f64],
    ) {
        let SampleDims {
            batch,
            channels,
            height,
            width,
            taps,
        } = self.dims;
        let half = (taps / 2) as i64;
        let plane = height * width;
        for b in 0..batch {
            for k in 0..taps {
                for i in 0..height {
                    for j in 0..width {
                        let oi = ((b * taps + k) * height + i) * width + j;
                        let shift = k as i64 - half;
                        let (lo, hi, frac) = match self.orientation {
                            Orientation::Horizontal => {
                                let col = j as i64 + shift;
                                let (r0, t) = split_coord(i as f64 + offsets[oi]);
                                let at = |r: i64| {
                                    (r >= 0 && r < height as i64 && col >= 0 && col < width as i64)
                                        .then(|| r as usize * width + col as usize)
                                };
                                (at(r0), at(r0 + 1), t)
                            }
                            Orientation::Vertical => {
                                let row = i as i64 + shift;
                                let (c0, t) = split_coord(j as f64 + offsets[oi]);
                                let at = |c: i64| {
                                    (c >= 0 && c < width as i64 && row >= 0 && row < height as i64)
                                        .then(|| row as usize * width + c as usize)
                                };
                                (at(c0), at(c0 + 1), t)
                            }
                        };
                        for ch in 0..channels {
                            let src = (b * channels + ch) * plane;
                            let out = (((b * channels + ch) * taps + k) * height + i) * width + j;
                            visit(out, lo.map(|p| src + p), hi.map(|p| src + p), frac, oi);
                        }
                    }
                }
            }
        }
    }
}

impl CustomOp2 for PerpendicularSampleOp {
    fn name(&self) -> &'static str {
        "perpendicular-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = to_f64(s1, l1)?;
        let off = to_f64(s2, l2)?;
        let d = self.dims;
        let mut out = vec![0.0; d.batch * d.channels * d.taps * d.height * d.width];
        self.for_each(
            |o, lo, hi, t, _| {
                let vlo = lo.map_or(0.0, |p| x[p]);
                let vhi = hi.map_or(0.0, |p| x[p]);
                out[o] = (1.0 - t) * vlo + t * vhi;
            },
            &off,
        );
        let shape = Shape::from(vec![d.batch, d.channels, d.taps, d.height, d.width]);
        Ok((from_f64(out, s1.dtype()), shape))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let x = tensor_f64(arg1)?;
        let off = tensor_f64(arg2)?;
        let g = tensor_f64(grad_res)?;
        let mut gx = vec![0.0; x.len()];
        let mut goff = vec![0.0; off.len()];
        self.for_each(
            |o, lo, hi, t, oi| {
                let vlo = lo.map_or(0.0, |p| x[p]);
                let vhi = hi.map_or(0.0, |p| x[p]);
                if let Some(p) = lo {
                    gx[p] += (1.0 - t) * g[o];
                }
                if let Some(p) = hi {
                    gx[p] += t * g[o];
                }
                goff[oi] += g[o] * (vhi - vlo);
            },
            &off,
        );
        Ok((Some(like(gx, arg1)?), Some(like(goff, arg2)?)))
    }
}

/// Samples `taps` positions along the kernel axis around every pixel, each
/// displaced perpendicular to that axis by `offsets[b, k, i, j]` with linear
/// interpolation and zero padding.
///
/// `x`: `[B, C, H, W]`, `offsets`: `[B, taps, H, W]` -> `[B, C, taps, H, W]`.
pub fn perpendicular_sample(
    x: &Tensor,
    offsets: &Tensor,
    orientation: Orientation,
) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let taps = offsets.dim(1)?;
    let op = PerpendicularSampleOp {
        dims: SampleDims {
            batch,
            channels,
            height,
            width,
            taps,
        },
        orientation,
    };
    Ok(x.contiguous()?.apply_op2(&offsets.contiguous()?, op)?)
}

/// Geometry shared by the convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    /// (top, bottom, left, right)
    pub pad: (usize, usize, usize, usize),
}

impl ConvGeometry {
    pub fn pointwise() -> Self {
        Self {
            kernel: (1, 1),
            stride: 1,
            dilation: 1,
            pad: (0, 0, 0, 0),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (t, b, l, r) = self.pad;
        let eh = self.dilation * (kh - 1) + 1;
        let ew = self.dilation * (kw - 1) + 1;
        (
            (h + t + b - eh) / self.stride + 1,
            (w + l + r - ew) / self.stride + 1,
        )
    }

    /// Output indices `o` along one axis for which `o * stride + offset`
    /// falls inside `[0, len)`.
    #[inline]
    fn valid(&self, out_len: usize, len: usize, offset: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
        let hi = ((len as isize - offset + s - 1) / s).clamp(0, out_len as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    /// Calls `f(out_start, src_start, count)` for every output row touched
    /// by tap `(ky, kx)`; consecutive outputs read sources `stride` apart.
    #[inline]
    fn tap_rows(&self, h: usize, w: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.output_size(h, w);
        let oy = (ky * self.dilation) as isize - self.pad.0 as isize;
        let ox = (kx * self.dilation) as isize - self.pad.2 as isize;
        let (ilo, ihi) = self.valid(ho, h, oy);
        let (jlo, jhi) = self.valid(wo, w, ox);
        if jlo >= jhi {
            return;
        }
        for oi in ilo..ihi {
            let i = (oi * self.stride) as isize + oy;
            let j = (jlo * self.stride) as isize + ox;
            f(oi * wo + jlo, i as usize * w + j as usize, jhi - jlo);
        }
    }
}

fn storage_slice<'a, T: candle_core::WithDType>(
    s: &'a [T],
    layout: &Layout,
) -> candle_core::Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("kernel input must be contiguous".into()))?;
    Ok(&s[start..end])
}

fn im2col<T: candle_core::WithDType>(
    x: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: ConvGeometry,
) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let (ho, wo) = g.output_size(h, w);
    let l = ho * wo;
    let rows = c * kh * kw;
    let mut out = vec![T::zero(); b * rows * l];
    for bi in 0..b {
        for ch in 0..c {
            let src = &x[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ch * kh + ky) * kw + kx;
                    let dst = &mut out[(bi * rows + row) * l..(bi * rows + row + 1) * l];
                    g.tap_rows(h, w, ky, kx, |o, p, n| {
                        if g.stride == 1 {
                            dst[o..o + n].copy_from_slice(&src[p..p + n]);
                        } else {
                            for k in 0..n {
                                dst[o + k] = src[p + k * g.stride];
                            }
                        }
                    });
                }
            }
        }
    }
    out
}

fn col2im<T: candle_core::WithDType>(
    cols: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: ConvGeometry,
) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let (ho, wo) = g.output_size(h, w);
    let l = ho * wo;
    let rows = c * kh * kw;
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ch in 0..c {
            let dst = &mut out[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ch * kh + ky) * kw + kx;
                    let src = &cols[(bi * rows + row) * l..(bi * rows + row + 1) * l];
                    g.tap_rows(h, w, ky, kx, |o, p, n| {
                        for k in 0..n {
                            dst[p + k * g.stride] += src[o + k];
                        }
                    });
                }
            }
        }
    }
    out
}

struct Im2ColOp {
    dims: (usize, usize, usize, usize),
    geometry: ConvGeometry,
}

impl Im2ColOp {
    fn out_shape(&self) -> Shape {
        let (b, c, h, w) = self.dims;
        let (kh, kw) = self.geometry.kernel;
        let (ho, wo) = self.geometry.output_size(h, w);
        Shape::from((b, c * kh * kw, ho * wo))
    }
}

impl candle_core::CustomOp1 for Im2ColOp {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(storage_slice(v, l)?, self.dims, self.geometry)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(storage_slice(v, l)?, self.dims, self.geometry)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col"))
            }
        };
        Ok((out, self.out_shape()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.contiguous()?;
        let values = match arg.dtype() {
            DType::F32 => {
                let v = g.flatten_all()?.to_vec1::<f32>()?;
                Tensor::from_vec(col2im(&v, self.dims, self.geometry), arg.shape(), arg.device())?
            }
            _ => {
                let v = g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Tensor::from_vec(col2im(&v, self.dims, self.geometry), arg.shape(), arg.device())?
                    .to_dtype(arg.dtype())?
            }
        };
        Ok(Some(values))
    }
}

/// Unfolds convolution patches: `[B, C, H, W]` -> `[B, C*kh*kw, Ho*Wo]`.
/// Rows are ordered `(channel, ky, kx)`, matching a flattened weight.
pub fn unfold_patches(x: &Tensor, geometry: ConvGeometry) -> Result<Tensor> {
    let dims = x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Im2ColOp { dims, geometry })?)
}

fn depthwise_fwd<T: candle_core::WithDType>(
    x: &[T],
    wt: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: ConvGeometry,
) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let (ho, wo) = g.output_size(h, w);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for bi in 0..b {
        for ch in 0..c {
            let src = &x[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            let dst = &mut out[(bi * c + ch) * ho * wo..(bi * c + ch + 1) * ho * wo];
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = wt[(ch * kh + ky) * kw + kx];
                    g.tap_rows(h, w, ky, kx, |o, p, n| {
                        for q in 0..n {
                            dst[o + q] += k * src[p + q * g.stride];
                        }
                    });
                }
            }
        }
    }
    out
}

fn depthwise_bwd<T: candle_core::WithDType>(
    x: &[T],
    wt: &[T],
    gy: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let (kh, kw) = g.kernel;
    let (ho, wo) = g.output_size(h, w);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * h * w;
            let gbase = (bi * c + ch) * ho * wo;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wi = (ch * kh + ky) * kw + kx;
                    let k = wt[wi];
                    let mut acc = T::zero();
                    g.tap_rows(h, w, ky, kx, |o, p, n| {
                        for q in 0..n {
                            let go = gy[gbase + o + q];
                            let src = base + p + q * g.stride;
                            gx[src] += k * go;
                            acc += x[src] * go;
                        }
                    });
                    gw[wi] += acc;
                }
            }
        }
    }
    (gx, gw)
}

struct DepthwiseConvOp {
    dims: (usize, usize, usize, usize),
    geometry: ConvGeometry,
}

impl CustomOp2 for DepthwiseConvOp {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let (ho, wo) = self.geometry.output_size(h, w);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => CpuStorage::F32(depthwise_fwd(
                storage_slice(x, l1)?,
                storage_slice(k, l2)?,
                self.dims,
                self.geometry,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(k)) => CpuStorage::F64(depthwise_fwd(
                storage_slice(x, l1)?,
                storage_slice(k, l2)?,
                self.dims,
                self.geometry,
            )),
            _ => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    s1.dtype(),
                    "depthwise-conv",
                ))
            }
        };
        Ok((out, Shape::from((b, c, ho, wo))))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let flat = |t: &Tensor| t.contiguous()?.flatten_all();
        let (gx, gw) = match arg1.dtype() {
            DType::F32 => {
                let (gx, gw) = depthwise_bwd(
                    &flat(arg1)?.to_vec1::<f32>()?,
                    &flat(arg2)?.to_vec1::<f32>()?,
                    &flat(grad_res)?.to_vec1::<f32>()?,
                    self.dims,
                    self.geometry,
                );
                (
                    Tensor::from_vec(gx, arg1.shape(), arg1.device())?,
                    Tensor::from_vec(gw, arg2.shape(), arg2.device())?,
                )
            }
            _ => {
                let (gx, gw) = depthwise_bwd(
                    &flat(arg1)?.to_vec1::<f64>()?,
                    &flat(arg2)?.to_vec1::<f64>()?,
                    &flat(grad_res)?.to_vec1::<f64>()?,
                    self.dims,
                    self.geometry,
                );
                (
                    Tensor::from_vec(gx, arg1.shape(), arg1.device())?,
                    Tensor::from_vec(gw, arg2.shape(), arg2.device())?,
                )
            }
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Depthwise convolution without bias. `weight`: `[C, 1, kh, kw]`.
pub fn depthwise_conv(x: &Tensor, weight: &Tensor, geometry: ConvGeometry) -> Result<Tensor> {
    let dims = x.dims4()?;
    Ok(x
        .contiguous()?
        .apply_op2(&weight.contiguous()?, DepthwiseConvOp { dims, geometry })?)
}

#[derive(Clone, Copy)]
enum ChannelOpKind {
    Add,
    Mul,
}

/// Per-channel `x + v[c]` or `x * v[c]` on `[B, C, ...]`.
struct ChannelOp {
    kind: ChannelOpKind,
    batch: usize,
    channels: usize,
    inner: usize,
}

impl ChannelOp {
    fn apply<T: candle_core::WithDType>(&self, x: &[T], v: &[T]) -> Vec<T> {
        let mut out = x.to_vec();
        for (k, chunk) in out.chunks_mut(self.inner).enumerate() {
            let val = v[k % self.channels];
            match self.kind {
                ChannelOpKind::Add => chunk.iter_mut().for_each(|o| *o += val),
                ChannelOpKind::Mul => chunk.iter_mut().for_each(|o| *o *= val),
            }
        }
        out
    }

    fn grads<T: candle_core::WithDType>(&self, x: &[T], v: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
        let mut gv = vec![T::zero(); self.channels];
        let gx = match self.kind {
            ChannelOpKind::Add => {
                for (k, chunk) in g.chunks(self.inner).enumerate() {
                    let mut acc = T::zero();
                    chunk.iter().for_each(|&q| acc += q);
                    gv[k % self.channels] += acc;
                }
                g.to_vec()
            }
            ChannelOpKind::Mul => {
                let mut gx = g.to_vec();
                for (k, (gc, xc)) in gx.chunks_mut(self.inner).zip(x.chunks(self.inner)).enumerate() {
                    let val = v[k % self.channels];
                    let mut acc = T::zero();
                    for (q, &xv) in gc.iter_mut().zip(xc) {
                        acc += *q * xv;
                        *q *= val;
                    }
                    gv[k % self.channels] += acc;
                }
                gx
            }
        };
        (gx, gv)
    }
}

impl CustomOp2 for ChannelOp {
    fn name(&self) -> &'static str {
        "channel-op"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(v)) => {
                CpuStorage::F32(self.apply(storage_slice(x, l1)?, storage_slice(v, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(v)) => {
                CpuStorage::F64(self.apply(storage_slice(x, l1)?, storage_slice(v, l2)?))
            }
            _ => return Err(candle_core::Error::UnsupportedDTypeForOp(s1.dtype(), "channel-op")),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: candle_core::WithDType>(
            op: &ChannelOp,
            x: &Tensor,
            v: &Tensor,
            g: &Tensor,
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
            let flat = |t: &Tensor| t.contiguous()?.flatten_all()?.to_vec1::<T>();
            let (gx, gv) = op.grads(&flat(x)?, &flat(v)?, &flat(g)?);
            Ok((
                Some(Tensor::from_vec(gx, x.shape(), x.device())?),
                Some(Tensor::from_vec(gv, v.shape(), v.device())?),
            ))
        }
        match arg1.dtype() {
            DType::F32 => run::<f32>(self, arg1, arg2, grad_res),
            _ => run::<f64>(self, arg1, arg2, grad_res),
        }
    }
}

fn channel_op(x: &Tensor, v: &Tensor, kind: ChannelOpKind) -> Result<Tensor> {
    let dims = x.dims();
    let (batch, channels) = (dims[0], dims[1]);
    let inner = dims[2..].iter().product();
    if v.elem_count() != channels {
        return Err(candle_core::Error::ShapeMismatchBinaryOp {
            lhs: x.shape().clone(),
            rhs: v.shape().clone(),
            op: "channel-op",
        }
        .into());
    }
    let op = ChannelOp {
        kind,
        batch,
        channels,
        inner,
    };
    let _ = op.batch;
    Ok(x.contiguous()?.apply_op2(&v.contiguous()?.flatten_all()?, op)?)
}

/// `x + bias[c]` for `x: [B, C, ...]` and `bias` with `C` elements.
pub fn channel_add(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    channel_op(x, bias, ChannelOpKind::Add)
}

/// `x * scale[c]` for `x: [B, C, ...]` and `scale` with `C` elements.
pub fn channel_mul(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    channel_op(x, scale, ChannelOpKind::Mul)
}
