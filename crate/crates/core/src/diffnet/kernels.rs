//! Raw numeric kernels behind the graph ops. Every kernel works on
//! `(N, C, D, H, W)` row-major buffers with `W` fastest.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{Real, Shape5, Tensor};
use crate::error::{arg_err, Result};

/// Cubic kernel geometry shared by all three spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kernel, stride, pad }
    }

    /// Same-size geometry for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        ConvGeom { kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn out_len(&self, input: usize) -> Option<usize> {
        if self.stride == 0 || self.kernel == 0 || input + 2 * self.pad < self.kernel {
            return None;
        }
        Some((input + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> Result<[usize; 3]> {
        let f = |i| {
            self.out_len(i)
                .ok_or_else(|| arg_err!("kernel {:?} does not fit input extent {}", self, i))
        };
        Ok([f(s[0])?, f(s[1])?, f(s[2])?])
    }

    /// Output positions `lo..hi` whose tap `k` reads inside `0..input`.
    #[inline]
    fn valid(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.pad;
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if input + p < k + 1 {
            return (0, 0);
        }
        let hi = ((input - 1 + p - k) / s + 1).min(output);
        if lo >= hi {
            (0, 0)
        } else {
            (lo, hi)
        }
    }
}

struct Taps {
    z: (usize, usize),
    y: (usize, usize),
    x: (usize, usize),
}

fn taps(g: &ConvGeom, kz: usize, ky: usize, kx: usize, inp: [usize; 3], out: [usize; 3]) -> Option<Taps> {
    let z = g.valid(kz, inp[0], out[0]);
    let y = g.valid(ky, inp[1], out[1]);
    let x = g.valid(kx, inp[2], out[2]);
    if z.0 == z.1 || y.0 == y.1 || x.0 == x.1 {
        None
    } else {
        Some(Taps { z, y, x })
    }
}

fn check_conv(x: Shape5, w: Shape5, g: &ConvGeom) -> Result<Shape5> {
    let [cout, cin, kd, kh, kw] = w.0;
    if cin != x.c() {
        return Err(arg_err!("conv expects {} input channels, got {}", cin, x.c()));
    }
    if kd != g.kernel || kh != g.kernel || kw != g.kernel {
        return Err(arg_err!("weight kernel {:?} disagrees with geometry {:?}", w.0, g));
    }
    let [d, h, ww] = g.out_spatial(x.spatial())?;
    Ok(Shape5::new(x.n(), cout, d, h, ww))
}

/// Unfolds one sample (`cin` planes) into a `(cin·k³) × P_out` column matrix.
fn im2col<T: Real>(x: &[T], cin: usize, g: &ConvGeom, inp: [usize; 3], outp: [usize; 3], cols: &mut [T]) {
    let k = g.kernel;
    let s = g.stride;
    let (ih, iw) = (inp[1], inp[2]);
    let (oh, ow) = (outp[1], outp[2]);
    let iplane = inp[0] * ih * iw;
    let oplane = outp[0] * oh * ow;
    for ci in 0..cin {
        let xin = &x[ci * iplane..(ci + 1) * iplane];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &mut cols[r * oplane..(r + 1) * oplane];
                    row.fill(T::zero());
                    let Some(t) = taps(g, kz, ky, kx, inp, outp) else { continue };
                    let len = t.x.1 - t.x.0;
                    let ix0 = t.x.0 * s + kx - g.pad;
                    for oz in t.z.0..t.z.1 {
                        let iz = oz * s + kz - g.pad;
                        for oy in t.y.0..t.y.1 {
                            let iy = oy * s + ky - g.pad;
                            let ob = (oz * oh + oy) * ow + t.x.0;
                            let ib = (iz * ih + iy) * iw + ix0;
                            let dst = &mut row[ob..ob + len];
                            if s == 1 {
                                dst.copy_from_slice(&xin[ib..ib + len]);
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d = xin[ib + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the input planes.
fn col2im<T: Real>(cols: &[T], cin: usize, g: &ConvGeom, inp: [usize; 3], outp: [usize; 3], x: &mut [T]) {
    let k = g.kernel;
    let s = g.stride;
    let (ih, iw) = (inp[1], inp[2]);
    let (oh, ow) = (outp[1], outp[2]);
    let iplane = inp[0] * ih * iw;
    let oplane = outp[0] * oh * ow;
    for ci in 0..cin {
        let xin = &mut x[ci * iplane..(ci + 1) * iplane];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &cols[r * oplane..(r + 1) * oplane];
                    let Some(t) = taps(g, kz, ky, kx, inp, outp) else { continue };
                    let len = t.x.1 - t.x.0;
                    let ix0 = t.x.0 * s + kx - g.pad;
                    for oz in t.z.0..t.z.1 {
                        let iz = oz * s + kz - g.pad;
                        for oy in t.y.0..t.y.1 {
                            let iy = oy * s + ky - g.pad;
                            let ob = (oz * oh + oy) * ow + t.x.0;
                            let ib = (iz * ih + iy) * iw + ix0;
                            let src = &row[ob..ob + len];
                            if s == 1 {
                                for (d, &v) in xin[ib..ib + len].iter_mut().zip(src) {
                                    *d += v;
                                }
                            } else {
                                for (j, &v) in src.iter().enumerate() {
                                    xin[ib + j * s] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

/// Direct stride-1, pad-1, 3×3×3 correlation of one sample, accumulating into
/// `out`. `wat(co, ci)` yields the 27 taps for a channel pair. Used where the
/// channel counts are too small for the column-matrix path to pay off.
fn same3_direct<T: Real>(
    x: &[T],
    cin: usize,
    cout: usize,
    sp: [usize; 3],
    wat: impl Fn(usize, usize) -> [T; 27],
    out: &mut [T],
) {
    let [d, h, w] = sp;
    let plane = d * h * w;
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let xin = &x[ci * plane..(ci + 1) * plane];
            let wk = wat(co, ci);
            for z in 0..d {
                for kz in 0..3 {
                    let iz = z as isize + kz as isize - 1;
                    if iz < 0 || iz >= d as isize {
                        continue;
                    }
                    for y in 0..h {
                        let orow = &mut o[(z * h + y) * w..(z * h + y + 1) * w];
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let ib = (iz as usize * h + iy as usize) * w;
                            let irow = &xin[ib..ib + w];
                            let t = (kz * 3 + ky) * 3;
                            let (w0, w1, w2) = (wk[t], wk[t + 1], wk[t + 2]);
                            if w == 1 {
                                orow[0] += w1 * irow[0];
                                continue;
                            }
                            orow[0] += w1 * irow[0] + w2 * irow[1];
                            orow[w - 1] += w0 * irow[w - 2] + w1 * irow[w - 1];
                            let inner = &mut orow[1..w - 1];
                            let (l, c, r) = (&irow[..w - 2], &irow[1..w - 1], &irow[2..]);
                            for (((o, &a), &b), &cc) in inner.iter_mut().zip(l).zip(c).zip(r) {
                                *o += w0 * a + w1 * b + w2 * cc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient of [`same3_direct`] for one sample, accumulated into `gw`
/// laid out as `(cout, cin, 27)`.
fn same3_direct_grad_w<T: Real>(gout: &[T], x: &[T], cin: usize, cout: usize, sp: [usize; 3], gw: &mut [f64]) {
    let [d, h, w] = sp;
    let plane = d * h * w;
    for co in 0..cout {
        let go = &gout[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let xin = &x[ci * plane..(ci + 1) * plane];
            let acc = &mut gw[(co * cin + ci) * 27..(co * cin + ci + 1) * 27];
            for kz in 0..3 {
                for ky in 0..3 {
                    let mut a = [T::zero(); 3];
                    for z in 0..d {
                        let iz = z as isize + kz as isize - 1;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let grow = &go[(z * h + y) * w..(z * h + y + 1) * w];
                            let ib = (iz as usize * h + iy as usize) * w;
                            let irow = &xin[ib..ib + w];
                            if w == 1 {
                                a[1] += grow[0] * irow[0];
                                continue;
                            }
                            a[0] += dot(&grow[1..], &irow[..w - 1]);
                            a[1] += dot(grow, irow);
                            a[2] += dot(&grow[..w - 1], &irow[1..]);
                        }
                    }
                    let t = (kz * 3 + ky) * 3;
                    for j in 0..3 {
                        acc[t + j] += a[j].f64();
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorises.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn use_direct(g: &ConvGeom, cin: usize, cout: usize) -> bool {
    g.kernel == 3 && g.stride == 1 && g.pad == 1 && cin.min(cout) <= 4
}

/// 3D cross-correlation with optional per-channel bias.
pub fn conv3d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, g: ConvGeom) -> Result<Tensor<T>> {
    let os = check_conv(x.shape(), w.shape(), &g)?;
    let is = x.shape();
    let (cin, cout) = (is.c(), os.c());
    let kk = cin * g.kernel * g.kernel * g.kernel;
    let (ip, op) = (is.plane(), os.plane());
    let mut out = vec![T::zero(); os.numel()];
    let mut cols = if is_pointwise(&g) || use_direct(&g, cin, cout) { Vec::new() } else { vec![T::zero(); kk * op] };
    for n in 0..is.n() {
        let xs = &x.data()[n * cin * ip..(n + 1) * cin * ip];
        let o = &mut out[n * cout * op..(n + 1) * cout * op];
        if let Some(b) = bias {
            for (co, plane) in o.chunks_mut(op).enumerate() {
                plane.fill(b[co]);
            }
        }
        if use_direct(&g, cin, cout) {
            let wd = w.data();
            let wat = |co: usize, ci: usize| -> [T; 27] {
                let b = (co * cin + ci) * 27;
                core::array::from_fn(|t| wd[b + t])
            };
            same3_direct(xs, cin, cout, is.spatial(), wat, o);
            continue;
        }
        let src: &[T] = if is_pointwise(&g) {
            xs
        } else {
            im2col(xs, cin, &g, is.spatial(), os.spatial(), &mut cols);
            &cols
        };
        T::gemm(cout, kk, op, T::one(), w.data(), [kk as isize, 1], src, [op as isize, 1], T::one(), o, op as isize);
    }
    Tensor::new(os, out)
}

/// Gradient of [`conv3d`] with respect to its input.
pub fn conv3d_grad_input<T: Real>(gout: &Tensor<T>, w: &Tensor<T>, in_shape: Shape5, g: ConvGeom) -> Tensor<T> {
    let os = gout.shape();
    let (cin, cout) = (in_shape.c(), os.c());
    let kk = cin * g.kernel * g.kernel * g.kernel;
    let (ip, op) = (in_shape.plane(), os.plane());
    let mut gin = vec![T::zero(); in_shape.numel()];
    let direct = use_direct(&g, cin, cout);
    let mut cols = if direct || is_pointwise(&g) { Vec::new() } else { vec![T::zero(); kk * op] };
    for n in 0..in_shape.n() {
        let go = &gout.data()[n * cout * op..(n + 1) * cout * op];
        let gi = &mut gin[n * cin * ip..(n + 1) * cin * ip];
        if direct {
            // Adjoint of a same-size correlation: correlate with the flipped,
            // channel-transposed kernel.
            let wd = w.data();
            let wat = |ci: usize, co: usize| -> [T; 27] {
                let b = (co * cin + ci) * 27;
                core::array::from_fn(|t| wd[b + 26 - t])
            };
            same3_direct(go, cout, cin, in_shape.spatial(), wat, gi);
        } else if is_pointwise(&g) {
            T::gemm(kk, cout, op, T::one(), w.data(), [1, kk as isize], go, [op as isize, 1], T::zero(), gi, op as isize);
        } else {
            T::gemm(kk, cout, op, T::one(), w.data(), [1, kk as isize], go, [op as isize, 1], T::zero(), &mut cols, op as isize);
            col2im(&cols, cin, &g, in_shape.spatial(), os.spatial(), gi);
        }
    }
    Tensor::new(in_shape, gin).expect("shape by construction")
}

/// Gradients of [`conv3d`] with respect to weight and bias.
pub fn conv3d_grad_params<T: Real>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: Shape5,
    g: ConvGeom,
) -> (Tensor<T>, Vec<T>) {
    let os = gout.shape();
    let is = x.shape();
    let (cin, cout) = (is.c(), os.c());
    let kk = cin * g.kernel * g.kernel * g.kernel;
    let (ip, op) = (is.plane(), os.plane());
    let mut gw = vec![T::zero(); w_shape.numel()];
    let mut gb = vec![0.0f64; cout];
    let direct = use_direct(&g, cin, cout);
    let mut gw_direct = if direct { vec![0.0f64; w_shape.numel()] } else { Vec::new() };
    let mut cols = if direct || is_pointwise(&g) { Vec::new() } else { vec![T::zero(); kk * op] };
    for n in 0..is.n() {
        let go = &gout.data()[n * cout * op..(n + 1) * cout * op];
        for (co, plane) in go.chunks(op).enumerate() {
            gb[co] += plane.iter().map(|v| v.f64()).sum::<f64>();
        }
        let xs = &x.data()[n * cin * ip..(n + 1) * cin * ip];
        if direct {
            same3_direct_grad_w(go, xs, cin, cout, is.spatial(), &mut gw_direct);
            continue;
        }
        let src: &[T] = if is_pointwise(&g) {
            xs
        } else {
            im2col(xs, cin, &g, is.spatial(), os.spatial(), &mut cols);
            &cols
        };
        T::gemm(cout, op, kk, T::one(), go, [op as isize, 1], src, [1, op as isize], T::one(), &mut gw, kk as isize);
    }
    if direct {
        gw = gw_direct.into_iter().map(T::of).collect();
    }
    let gw = Tensor::new(w_shape, gw).expect("shape by construction");
    (gw, gb.into_iter().map(T::of).collect())
}

/// Per-channel statistics saved by a training-mode batch norm.
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased batch variance, used for running-statistic updates.
    pub var_unbiased: Vec<f64>,
}

/// Batch-statistics normalisation followed by the per-channel affine map.
pub fn batch_norm_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> (Tensor<T>, BatchNormSaved<T>) {
    let s = x.shape();
    let (n, c, p) = (s.n(), s.c(), s.plane());
    let m = (n * p) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let xd = x.data();
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            acc += xd[(b * c + ch) * p..(b * c + ch + 1) * p].iter().map(|v| v.f64()).sum::<f64>();
        }
        mean[ch] = acc / m;
        let mut sq = 0.0;
        for b in 0..n {
            sq += xd[(b * c + ch) * p..(b * c + ch + 1) * p]
                .iter()
                .map(|v| {
                    let d = v.f64() - mean[ch];
                    d * d
                })
                .sum::<f64>();
        }
        var[ch] = sq / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut out = vec![T::zero(); s.numel()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            let (mu, is) = (mean[ch], inv_std[ch]);
            for i in r {
                let h = T::of((xd[i].f64() - mu) * is);
                xhat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let var_unbiased = var
        .iter()
        .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
        .collect();
    (
        Tensor::new(s, out).expect("shape by construction"),
        BatchNormSaved { xhat, inv_std, mean, var_unbiased },
    )
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode batch norm.
pub fn batch_norm_train_backward<T: Real>(
    gout: &[T],
    shape: Shape5,
    gamma: &[T],
    saved: &BatchNormSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, p) = (shape.n(), shape.c(), shape.plane());
    let m = (n * p) as f64;
    let mut dx = vec![T::zero(); shape.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            for i in (b * c + ch) * p..(b * c + ch + 1) * p {
                let dy = gout[i].f64();
                sum_dy += dy;
                sum_dy_xhat += dy * saved.xhat[i].f64();
            }
        }
        dgamma[ch] = T::of(sum_dy_xhat);
        dbeta[ch] = T::of(sum_dy);
        let k = gamma[ch].f64() * saved.inv_std[ch] / m;
        for b in 0..n {
            for i in (b * c + ch) * p..(b * c + ch + 1) * p {
                let v = k * (m * gout[i].f64() - sum_dy - saved.xhat[i].f64() * sum_dy_xhat);
                dx[i] = T::of(v);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `scale * x + shift` per channel (eval-mode batch norm after folding statistics).
pub fn channel_affine<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let s = x.shape();
    let (c, p) = (s.c(), s.plane());
    let mut out = x.data().to_vec();
    for (blk, chunk) in out.chunks_mut(p).enumerate() {
        let ch = blk % c;
        for v in chunk {
            *v = scale[ch] * *v + shift[ch];
        }
    }
    Tensor::new(s, out).expect("shape by construction")
}

pub fn leaky_relu<T: Real>(x: &[T], slope: T) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { slope * v }).collect()
}

pub fn leaky_relu_backward<T: Real>(x: &[T], gout: &[T], slope: T) -> Vec<T> {
    x.iter()
        .zip(gout)
        .map(|(&v, &g)| if v > T::zero() { g } else { slope * g })
        .collect()
}

/// Nearest-neighbour 2× upsampling on every spatial axis.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let [d, h, w] = s.spatial();
    let os = Shape5::new(s.n(), s.c(), 2 * d, 2 * h, 2 * w);
    let (ip, op) = (s.plane(), os.plane());
    let mut out = vec![T::zero(); os.numel()];
    for (pi, plane) in x.data().chunks(ip).enumerate() {
        let o = &mut out[pi * op..(pi + 1) * op];
        for z in 0..2 * d {
            for y in 0..2 * h {
                let src = &plane[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                let dst = &mut o[(z * 2 * h + y) * 2 * w..(z * 2 * h + y + 1) * 2 * w];
                for (xx, v) in dst.iter_mut().enumerate() {
                    *v = src[xx / 2];
                }
            }
        }
    }
    Tensor::new(os, out).expect("shape by construction")
}

pub fn upsample2_backward<T: Real>(gout: &Tensor<T>, in_shape: Shape5) -> Vec<T> {
    let [d, h, w] = in_shape.spatial();
    let (ip, op) = (in_shape.plane(), gout.shape().plane());
    let mut gin = vec![T::zero(); in_shape.numel()];
    for (pi, plane) in gout.data().chunks(op).enumerate() {
        let gi = &mut gin[pi * ip..(pi + 1) * ip];
        for z in 0..2 * d {
            for y in 0..2 * h {
                let row = &plane[(z * 2 * h + y) * 2 * w..(z * 2 * h + y + 1) * 2 * w];
                let dst = &mut gi[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                for (xx, &g) in row.iter().enumerate() {
                    dst[xx / 2] += g;
                }
            }
        }
    }
    gin
}

/// Max pooling; out-of-range taps are ignored. Returns values and the
/// within-plane argmax of each output (first maximum wins ties).
pub fn max_pool<T: Real>(x: &Tensor<T>, g: ConvGeom) -> Result<(Tensor<T>, Vec<u32>)> {
    if g.pad >= g.kernel {
        return Err(arg_err!("max filter padding {} must be below kernel {}", g.pad, g.kernel));
    }
    let s = x.shape();
    let [d, h, w] = s.spatial();
    let [od, oh, ow] = g.out_spatial(s.spatial())?;
    let os = Shape5::new(s.n(), s.c(), od, oh, ow);
    let (ip, op) = (s.plane(), os.plane());
    let mut out = vec![T::zero(); os.numel()];
    let mut arg = vec![0u32; os.numel()];
    let span = |o: usize, len: usize| {
        let start = (o * g.stride) as isize - g.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + g.kernel as isize) as usize).min(len);
        lo..hi
    };
    for (pi, plane) in x.data().chunks(ip).enumerate() {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut bi = 0usize;
                    for z in span(oz, d) {
                        for y in span(oy, h) {
                            for xx in span(ox, w) {
                                let i = (z * h + y) * w + xx;
                                if plane[i] > best {
                                    best = plane[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    let oi = pi * op + (oz * oh + oy) * ow + ox;
                    out[oi] = best;
                    arg[oi] = bi as u32;
                }
            }
        }
    }
    Ok((Tensor::new(os, out).expect("shape by construction"), arg))
}

pub fn max_pool_backward<T: Real>(gout: &Tensor<T>, arg: &[u32], in_shape: Shape5) -> Vec<T> {
    let (ip, op) = (in_shape.plane(), gout.shape().plane());
    let mut gin = vec![T::zero(); in_shape.numel()];
    for (oi, &g) in gout.data().iter().enumerate() {
        let pi = oi / op;
        gin[pi * ip + arg[oi] as usize] += g;
    }
    gin
}

/// Scaled dot-product attention over all spatial positions of each sample.
///
/// `q`, `k` share a channel count; output has `v`'s shape. Also returns the
/// row-stochastic attention matrices, `N × P × P`.
pub fn attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs != ks || qs.n() != vs.n() || qs.spatial() != vs.spatial() {
        return Err(arg_err!("attention shape mismatch {:?} {:?} {:?}", qs.0, ks.0, vs.0));
    }
    let (n, cq, cv, p) = (qs.n(), qs.c(), vs.c(), qs.plane());
    let scale = 1.0 / libm::sqrt(cq as f64);
    let mut probs = vec![T::zero(); n * p * p];
    let mut out = vec![T::zero(); vs.numel()];
    let mut logits = vec![0.0f64; p];
    for b in 0..n {
        let qd = &q.data()[b * cq * p..(b + 1) * cq * p];
        let kd = &k.data()[b * cq * p..(b + 1) * cq * p];
        let vd = &v.data()[b * cv * p..(b + 1) * cv * p];
        let pb = &mut probs[b * p * p..(b + 1) * p * p];
        for i in 0..p {
            logits.fill(0.0);
            for c in 0..cq {
                let qi = qd[c * p + i].f64();
                for (l, kv) in logits.iter_mut().zip(&kd[c * p..(c + 1) * p]) {
                    *l += qi * kv.f64();
                }
            }
            let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = libm::exp(*l * scale - mx);
                z += *l;
            }
            for (dst, l) in pb[i * p..(i + 1) * p].iter_mut().zip(&logits) {
                *dst = T::of(l / z);
            }
        }
        let ob = &mut out[b * cv * p..(b + 1) * cv * p];
        for c in 0..cv {
            let vrow = &vd[c * p..(c + 1) * p];
            for i in 0..p {
                let arow = &pb[i * p..(i + 1) * p];
                let mut acc = T::zero();
                for (&a, &vv) in arow.iter().zip(vrow) {
                    acc += a * vv;
                }
                ob[c * p + i] = acc;
            }
        }
    }
    Ok((Tensor::new(vs, out).expect("shape by construction"), probs))
}

/// Returns `(dq, dk, dv)` for [`attention`].
pub fn attention_backward<T: Real>(
    gout: &[T],
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (qs, vs) = (q.shape(), v.shape());
    let (n, cq, cv, p) = (qs.n(), qs.c(), vs.c(), qs.plane());
    let scale = T::of(1.0 / libm::sqrt(cq as f64));
    let mut dq = vec![T::zero(); qs.numel()];
    let mut dk = vec![T::zero(); qs.numel()];
    let mut dv = vec![T::zero(); vs.numel()];
    let mut ds = vec![T::zero(); p * p];
    for b in 0..n {
        let qd = &q.data()[b * cq * p..(b + 1) * cq * p];
        let kd = &k.data()[b * cq * p..(b + 1) * cq * p];
        let vd = &v.data()[b * cv * p..(b + 1) * cv * p];
        let go = &gout[b * cv * p..(b + 1) * cv * p];
        let pb = &probs[b * p * p..(b + 1) * p * p];
        let dvb = &mut dv[b * cv * p..(b + 1) * cv * p];
        // dV[c, j] = sum_i dO[c, i] A[i, j]
        for c in 0..cv {
            let dvr = &mut dvb[c * p..(c + 1) * p];
            for i in 0..p {
                let g = go[c * p + i];
                for (d, &a) in dvr.iter_mut().zip(&pb[i * p..(i + 1) * p]) {
                    *d += g * a;
                }
            }
        }
        // dA[i, j] = sum_c dO[c, i] V[c, j]; dS = A * (dA - rowsum(dA * A))
        for i in 0..p {
            let row = &mut ds[i * p..(i + 1) * p];
            row.fill(T::zero());
            for c in 0..cv {
                let g = go[c * p + i];
                for (d, &vv) in row.iter_mut().zip(&vd[c * p..(c + 1) * p]) {
                    *d += g * vv;
                }
            }
            let arow = &pb[i * p..(i + 1) * p];
            let dot: f64 = row.iter().zip(arow).map(|(d, a)| d.f64() * a.f64()).sum();
            let dot = T::of(dot);
            for (d, &a) in row.iter_mut().zip(arow) {
                *d = a * (*d - dot) * scale;
            }
        }
        let dqb = &mut dq[b * cq * p..(b + 1) * cq * p];
        let dkb = &mut dk[b * cq * p..(b + 1) * cq * p];
        for c in 0..cq {
            let krow = &kd[c * p..(c + 1) * p];
            let qrow = &qd[c * p..(c + 1) * p];
            for i in 0..p {
                let srow = &ds[i * p..(i + 1) * p];
                let mut acc = T::zero();
                for (&s, &kv) in srow.iter().zip(krow) {
                    acc += s * kv;
                }
                dqb[c * p + i] = acc;
                let qi = qrow[i];
                for (d, &s) in dkb[c * p..(c + 1) * p].iter_mut().zip(srow) {
                    *d += s * qi;
                }
            }
        }
    }
    (dq, dk, dv)
}
