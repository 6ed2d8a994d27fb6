//! Forward and adjoint kernels on `(N, C, D, H, W)` tensors.
//!
//! Convolution is cross-correlation with zero "same" padding and stride 1,
//! lowered to im2col + GEMM per batch sample.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
}

impl ConvGeom {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Self> {
        let [n, cin, d, h, wd] = x.dims5()?;
        let [cout, wcin, kd, kh, kw] = w.dims5()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel extents must be odd, got {kd}x{kh}x{kw}"
            )));
        }
        Ok(Self {
            n,
            cin,
            cout,
            dims: [d, h, wd],
            kernel: [kd, kh, kw],
        })
    }

    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }
}

/// Unfolds one sample into `[cin * taps, voxels]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let [d, h, w] = g.dims;
    let [kd, kh, kw] = g.kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let m = g.voxels();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * m..(c + 1) * m];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * m..(row + 1) * m];
                    let (dz, dy, dx) = (a as isize - pd, b as isize - ph, e as isize - pw);
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + dz;
                        for y in 0..h {
                            let sy = y as isize + dy;
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0
                                || sz >= d as isize
                                || sy < 0
                                || sy >= h as isize
                                || x_lo >= x_hi
                            {
                                out.fill(T::zero());
                                continue;
                            }
                            let base = (sz as usize * h + sy as usize) * w;
                            out[..x_lo].fill(T::zero());
                            out[x_hi..].fill(T::zero());
                            let src_lo = (x_lo as isize + dx) as usize;
                            out[x_lo..x_hi].copy_from_slice(
                                &plane[base + src_lo..base + src_lo + (x_hi - x_lo)],
                            );
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Folds `[cin * taps, voxels]` back onto one sample, accumulating.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let [d, h, w] = g.dims;
    let [kd, kh, kw] = g.kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let m = g.voxels();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut gx[c * m..(c + 1) * m];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * m..(row + 1) * m];
                    let (dz, dy, dx) = (a as isize - pd, b as isize - ph, e as isize - pw);
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + dz;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let base = (sz as usize * h + sy as usize) * w;
                            let src_lo = (x_lo as isize + dx) as usize;
                            let from = &src[(z * h + y) * w + x_lo..(z * h + y) * w + x_hi];
                            let to = &mut plane[base + src_lo..base + src_lo + (x_hi - x_lo)];
                            for (t, &f) in to.iter_mut().zip(from) {
                                *t += f;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y = w ⋆ x + b` with `x: [N, Cin, D, H, W]`, `w: [Cout, Cin, kd, kh, kw]`, `b: [Cout]`.
pub fn conv3d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w)?;
    if let Some(b) = b {
        if b.numel() != g.cout {
            return Err(Error::shape(format!(
                "bias has {} entries for {} output channels",
                b.numel(),
                g.cout
            )));
        }
    }
    let m = g.voxels();
    let rows = g.cin * g.taps();
    let mut out = vec![T::zero(); g.n * g.cout * m];
    out.par_chunks_mut(g.cout * m)
        .zip(x.data().par_chunks(g.cin * m))
        .for_each(|(y, xs)| {
            let owned;
            let cols: &[T] = if g.pointwise() {
                xs
            } else {
                let mut c = vec![T::zero(); rows * m];
                im2col(&g, xs, &mut c);
                owned = c;
                &owned
            };
            T::gemm(false, false, g.cout, rows, m, w.data(), cols, T::zero(), y);
            if let Some(b) = b {
                for (o, chunk) in y.chunks_mut(m).enumerate() {
                    let bo = b.data()[o];
                    chunk.iter_mut().for_each(|v| *v += bo);
                }
            }
        });
    Tensor::from_vec(&[g.n, g.cout, g.dims[0], g.dims[1], g.dims[2]], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Adjoint of [`conv3d`]. The input gradient is only formed when `need_x`.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, w)?;
    let m = g.voxels();
    let rows = g.cin * g.taps();
    let expect = [g.n, g.cout, g.dims[0], g.dims[1], g.dims[2]];
    if gy.shape() != expect {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match {expect:?}",
            gy.shape()
        )));
    }
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = x
        .data()
        .par_chunks(g.cin * m)
        .zip(gy.data().par_chunks(g.cout * m))
        .map(|(xs, gys)| {
            let owned;
            let cols: &[T] = if g.pointwise() {
                xs
            } else {
                let mut c = vec![T::zero(); rows * m];
                im2col(&g, xs, &mut c);
                owned = c;
                &owned
            };
            let mut gw = vec![T::zero(); g.cout * rows];
            T::gemm(false, true, g.cout, m, rows, gys, cols, T::zero(), &mut gw);
            let gx = need_x.then(|| {
                let mut gcols = vec![T::zero(); rows * m];
                T::gemm(
                    true,
                    false,
                    rows,
                    g.cout,
                    m,
                    w.data(),
                    gys,
                    T::zero(),
                    &mut gcols,
                );
                if g.pointwise() {
                    gcols
                } else {
                    let mut gx = vec![T::zero(); g.cin * m];
                    col2im(&g, &gcols, &mut gx);
                    gx
                }
            });
            (gw, gx)
        })
        .collect();

    let mut gw = vec![T::zero(); g.cout * rows];
    let mut gx = need_x.then(|| Vec::with_capacity(g.n * g.cin * m));
    for (w_n, x_n) in per_sample {
        for (a, b) in gw.iter_mut().zip(w_n) {
            *a += b;
        }
        if let (Some(acc), Some(x_n)) = (gx.as_mut(), x_n) {
            acc.extend(x_n);
        }
    }
    let mut gb = vec![T::zero(); g.cout];
    for (o, acc) in gb.iter_mut().enumerate() {
        let mut s = 0.0f64;
        for n in 0..g.n {
            let start = (n * g.cout + o) * m;
            s += gy.data()[start..start + m]
                .iter()
                .map(|v| v.widen())
                .sum::<f64>();
        }
        *acc = T::cast(s);
    }
    Ok(ConvGrads {
        x: gx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        w: Tensor::from_vec(w.shape(), gw)?,
        b: Tensor::from_vec(&[g.cout], gb)?,
    })
}

/// Normalized activations and inverse standard deviations saved for the adjoint.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

/// Per-`(n, c)` normalization over `(D, H, W)` followed by a per-channel affine map.
pub fn instance_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let [n, c, d, h, w] = x.dims5()?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(format!(
            "affine parameters must have {c} entries"
        )));
    }
    let m = d * h * w;
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(n * c);
    for (s, chunk) in x.data().chunks(m).enumerate() {
        let ch = s % c;
        let mean = chunk.iter().map(|v| v.widen()).sum::<f64>() / m as f64;
        let var = chunk
            .iter()
            .map(|v| {
                let t = v.widen() - mean;
                t * t
            })
            .sum::<f64>()
            / m as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let (ga, be) = (gamma.data()[ch].widen(), beta.data()[ch].widen());
        for (i, v) in chunk.iter().enumerate() {
            let xh = (v.widen() - mean) * is;
            xhat[s * m + i] = T::cast(xh);
            y[s * m + i] = T::cast(ga * xh + be);
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        NormCache {
            xhat: Tensor::from_vec(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<T: Real>(
    gy: &Tensor<T>,
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [_, c, d, h, w] = gy.dims5()?;
    gy.check_same_shape(&cache.xhat)?;
    let m = d * h * w;
    let mut gx = vec![T::zero(); gy.numel()];
    let mut ggamma = vec![0.0f64; c];
    let mut gbeta = vec![0.0f64; c];
    for (s, (g, xh)) in gy
        .data()
        .chunks(m)
        .zip(cache.xhat.data().chunks(m))
        .enumerate()
    {
        let ch = s % c;
        let sum_g: f64 = g.iter().map(|v| v.widen()).sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a.widen() * b.widen()).sum();
        ggamma[ch] += sum_gx;
        gbeta[ch] += sum_g;
        let k = gamma.data()[ch].widen() * cache.inv_std[s];
        let (mg, mgx) = (sum_g / m as f64, sum_gx / m as f64);
        for i in 0..m {
            gx[s * m + i] = T::cast(k * (g[i].widen() - mg - xh[i].widen() * mgx));
        }
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::cast).collect::<Vec<_>>();
    Ok((
        Tensor::from_vec(gy.shape(), gx)?,
        Tensor::from_vec(&[c], to_t(ggamma))?,
        Tensor::from_vec(&[c], to_t(gbeta))?,
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU expressed through its output `y`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(gy, |yv, g| if yv > T::zero() { g } else { T::zero() })
}

/// Non-overlapping max pooling; returns the output and, per output element,
/// the linear input index of the selected maximum (first maximum on ties).
pub fn max_pool<T: Real>(x: &Tensor<T>, window: [usize; 3]) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, d, h, w] = x.dims5()?;
    let [wd, wh, ww] = window;
    if wd == 0 || wh == 0 || ww == 0 || d % wd != 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::shape(format!(
            "pool window {window:?} does not divide spatial dims {:?}",
            [d, h, w]
        )));
    }
    let (od, oh, ow) = (d / wd, h / wh, w / ww);
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    let xs = x.data();
    for s in 0..n * c {
        let base = s * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best_i = usize::MAX;
                    let mut best = T::zero();
                    for a in 0..wd {
                        for b in 0..wh {
                            for e in 0..ww {
                                let i = base + ((z * wd + a) * h + y * wh + b) * w + xo * ww + e;
                                if best_i == usize::MAX || xs[i] > best {
                                    best = xs[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, od, oh, ow], out)?, arg))
}

pub fn max_pool_backward<T: Real>(
    gy: &Tensor<T>,
    argmax: &[usize],
    in_shape: &[usize],
) -> Result<Tensor<T>> {
    if gy.numel() != argmax.len() {
        return Err(Error::shape("pool gradient does not match saved indices"));
    }
    let mut gx = Tensor::zeros(in_shape);
    for (&i, &g) in argmax.iter().zip(gy.data()) {
        gx.data_mut()[i] += g;
    }
    Ok(gx)
}

pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: [usize; 3]) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    let [fd, fh, fw] = factor;
    if fd == 0 || fh == 0 || fw == 0 {
        return Err(Error::shape("upsampling factors must be positive"));
    }
    let (od, oh, ow) = (d * fd, h * fh, w * fw);
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    for plane in x.data().chunks(d * h * w) {
        for z in 0..od {
            for y in 0..oh {
                let row = &plane[((z / fd) * h + y / fh) * w..((z / fd) * h + y / fh + 1) * w];
                for xo in 0..ow {
                    out.push(row[xo / fw]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, od, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Real>(gy: &Tensor<T>, factor: [usize; 3]) -> Result<Tensor<T>> {
    let [n, c, od, oh, ow] = gy.dims5()?;
    let [fd, fh, fw] = factor;
    if od % fd != 0 || oh % fh != 0 || ow % fw != 0 {
        return Err(Error::shape(
            "gradient extent is not a multiple of the factor",
        ));
    }
    let (d, h, w) = (od / fd, oh / fh, ow / fw);
    let mut gx = vec![T::zero(); n * c * d * h * w];
    for (s, plane) in gy.data().chunks(od * oh * ow).enumerate() {
        let dst = &mut gx[s * d * h * w..(s + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    dst[((z / fd) * h + y / fh) * w + xo / fw] += plane[(z * oh + y) * ow + xo];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, d, h, w], gx)
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, d, h, w] = a.dims5()?;
    let [nb, cb, db, hb, wb] = b.dims5()?;
    if (n, d, h, w) != (nb, db, hb, wb) {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = d * h * w;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * ca * m..(s + 1) * ca * m]);
        out.extend_from_slice(&b.data()[s * cb * m..(s + 1) * cb * m]);
    }
    Tensor::from_vec(&[n, ca + cb, d, h, w], out)
}

/// Splits a channel-concatenated gradient back into its `a` and `b` parts.
pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = g.dims5()?;
    if ca == 0 || ca >= c {
        return Err(Error::shape(format!("cannot split {c} channels at {ca}")));
    }
    let m = d * h * w;
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * m);
    let mut b = Vec::with_capacity(n * cb * m);
    for s in 0..n {
        let block = &g.data()[s * c * m..(s + 1) * c * m];
        a.extend_from_slice(&block[..ca * m]);
        b.extend_from_slice(&block[ca * m..]);
    }
    Ok((
        Tensor::from_vec(&[n, ca, d, h, w], a)?,
        Tensor::from_vec(&[n, cb, d, h, w], b)?,
    ))
}

/// Softmax across channels at every voxel.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    let m = d * h * w;
    let mut out = vec![T::zero(); x.numel()];
    let xs = x.data();
    let mut buf = vec![0.0f64; c];
    for s in 0..n {
        let base = s * c * m;
        for i in 0..m {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                mx = mx.max(xs[base + k * m + i].widen());
            }
            let mut z = 0.0;
            for k in 0..c {
                buf[k] = (xs[base + k * m + i].widen() - mx).exp();
                z += buf[k];
            }
            for k in 0..c {
                out[base + k * m + i] = T::cast(buf[k] / z);
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Adjoint of [`softmax_channels`] given its output `y`.
pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = y.dims5()?;
    y.check_same_shape(gy)?;
    let m = d * h * w;
    let mut gx = vec![T::zero(); y.numel()];
    let (ys, gs) = (y.data(), gy.data());
    for s in 0..n {
        let base = s * c * m;
        for i in 0..m {
            let dot: f64 = (0..c)
                .map(|k| ys[base + k * m + i].widen() * gs[base + k * m + i].widen())
                .sum();
            for k in 0..c {
                let j = base + k * m + i;
                gx[j] = T::cast(ys[j].widen() * (gs[j].widen() - dot));
            }
        }
    }
    Tensor::from_vec(y.shape(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t5(shape: [usize; 5], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&shape, data).unwrap()
    }

    fn one_hot(dims: [usize; 3], at: [usize; 3]) -> Tensor<f64> {
        let mut x = Tensor::zeros(&[1, 1, dims[0], dims[1], dims[2]]);
        x.data_mut()[(at[0] * dims[1] + at[1]) * dims[2] + at[2]] = 1.0;
        x
    }

    #[test]
    fn pointwise_identity_kernel() {
        let x = t5([1, 1, 2, 2, 2], (0..8).map(f64::from).collect());
        let w = t5([1, 1, 1, 1, 1], vec![1.0]);
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert_eq!(conv3d(&x, &w, Some(&b)).unwrap(), x);
    }

    #[test]
    fn in_plane_kernel_makes_plateau() {
        let x = one_hot([3, 5, 5], [1, 2, 2]);
        let w = t5([1, 1, 1, 3, 3], vec![1.0; 9]);
        let y = conv3d(&x, &w, None).unwrap();
        for z in 0..3 {
            for r in 0..5 {
                for c in 0..5 {
                    let v = y.data()[(z * 5 + r) * 5 + c];
                    let inside = z == 1 && (1..=3).contains(&r) && (1..=3).contains(&c);
                    assert_eq!(v, if inside { 1.0 } else { 0.0 }, "({z},{r},{c})");
                }
            }
        }
    }

    #[test]
    fn stencil_locality() {
        let x = one_hot([5, 5, 5], [2, 2, 2]);
        let across = conv3d(&x, &t5([1, 1, 3, 1, 1], vec![1.0, 2.0, 3.0]), None).unwrap();
        let within = conv3d(&x, &t5([1, 1, 1, 3, 3], vec![1.0; 9]), None).unwrap();
        for z in 0..5 {
            for r in 0..5 {
                for c in 0..5 {
                    let i = (z * 5 + r) * 5 + c;
                    if (r, c) != (2, 2) {
                        assert_eq!(across.data()[i], 0.0);
                    }
                    if z != 2 {
                        assert_eq!(within.data()[i], 0.0);
                    }
                }
            }
        }
        // cross-correlation: output at z=1 sees input at z=2 through tap index 2
        assert_eq!(across.data()[(5 + 2) * 5 + 2], 3.0);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1, 1]);
        let w = Tensor::<f64>::zeros(&[1, 3, 1, 1, 1]);
        assert!(conv3d(&x, &w, None).is_err());
    }

    #[test]
    fn instance_norm_two_point() {
        let x = t5([1, 1, 1, 1, 2], vec![1.0, 3.0]);
        let one = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let zero = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let (y, _) = instance_norm(&x, &one, &zero, 1e-5).unwrap();
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + k).abs() < 1e-15);
        assert!((y.data()[1] - k).abs() < 1e-15);
        let (c, _) = instance_norm(&t5([1, 1, 1, 2, 2], vec![4.0; 4]), &one, &zero, 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(&[2], vec![-2.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let y = softmax_channels(&t5([1, 4, 1, 1, 1], vec![0.3; 4])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = t5([1, 3, 1, 1, 2], vec![0.1, -2.0, 1.5, 0.2, -0.7, 4.0]);
        let a = softmax_channels(&x).unwrap();
        let b = softmax_channels(&x.map(|v| v + 100.0)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let x = t5([1, 1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]);
        let (y, arg) = max_pool(&x, [1, 2, 2]).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![0]);
        assert!(max_pool(&t5([1, 1, 1, 3, 2], vec![0.0; 6]), [1, 2, 2]).is_err());
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let x = t5([1, 1, 1, 1, 2], vec![1.0, 2.0]);
        let u = upsample_nearest(&x, [1, 2, 2]).unwrap();
        assert_eq!(u.shape(), &[1, 1, 1, 2, 4]);
        assert_eq!(u.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let c = concat_channels(&x, &x.map(|v| -v)).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, -1.0, -2.0]);
        let (a, b) = split_channels(&c, 1).unwrap();
        assert_eq!((a, b.data().to_vec()), (x, vec![-1.0, -2.0]));
        assert!(concat_channels(
            &t5([1, 1, 1, 1, 1], vec![0.0]),
            &t5([1, 1, 1, 1, 2], vec![0.0; 2])
        )
        .is_err());
    }
}
