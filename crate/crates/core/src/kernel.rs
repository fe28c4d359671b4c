//! 2-D convolution kernels and circular (periodic) convolution routines.
//!
//! Everything here uses true convolution, y(p) = sum_q k(q) x(p-q), with
//! periodic wrap-around, so the FFT pointwise-product identity holds exactly
//! and every Gaussian/DoG filter is self-adjoint.

use crate::error::{FeraError, Result};
use crate::field::Field;
use crate::real::Real;

/// A square odd-sized convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D<T: Real = f32> {
    size: usize,
    taps: Vec<T>,
    tap_sum: f64,
}

impl<T: Real> Kernel2D<T> {
    pub fn new(size: usize, taps: Vec<T>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(FeraError::Domain(format!("kernel size {size} is even")));
        }
        if taps.len() != size * size {
            return Err(FeraError::Shape(format!(
                "kernel taps length {} != {size}x{size}",
                taps.len()
            )));
        }
        let tap_sum: f64 = taps.iter().map(|t| t.as_f64()).sum();
        if !tap_sum.is_finite() {
            return Err(FeraError::Numeric("kernel tap sum is non-finite".into()));
        }
        Ok(Self {
            size,
            taps,
            tap_sum,
        })
    }

    /// Single center tap of 1; convolution with it is the identity map.
    pub fn identity() -> Self {
        Self {
            size: 1,
            taps: vec![T::one()],
            tap_sum: 1.0,
        }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }
    #[inline]
    pub fn taps(&self) -> &[T] {
        &self.taps
    }
    #[inline]
    pub fn tap_sum(&self) -> f64 {
        self.tap_sum
    }
}

/// Normalized 1-D Gaussian taps evaluated on the integer grid, in f64.
pub fn gaussian_taps_1d(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(FeraError::Domain(format!("sigma {sigma} must be > 0")));
    }
    if size.is_multiple_of(2) || size < 1 {
        return Err(FeraError::Domain(format!(
            "gaussian size {size} must be odd and >= 1"
        )));
    }
    let c = (size / 2) as isize;
    let mut taps: Vec<f64> = (0..size as isize)
        .map(|i| {
            let d = (i - c) as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    Ok(taps)
}

/// Normalized 2-D Gaussian kernel: taps proportional to
/// exp(-(dx^2+dy^2)/(2 sigma^2)), truncated to `size` and renormalized to
/// sum 1. `size` must be odd, >= 3 and >= ceil(6 sigma), odd-rounded.
pub fn gaussian_kernel<T: Real>(sigma: f64, size: usize) -> Result<Kernel2D<T>> {
    if sigma <= 0.0 {
        return Err(FeraError::Domain(format!("sigma {sigma} must be > 0")));
    }
    if size < 3 {
        return Err(FeraError::Domain(format!(
            "gaussian kernel size {size} must be >= 3"
        )));
    }
    let t1 = gaussian_taps_1d(sigma, size)?;
    let mut taps = Vec::with_capacity(size * size);
    for a in &t1 {
        for b in &t1 {
            taps.push(T::of_f64(a * b));
        }
    }
    Kernel2D::new(size, taps)
}

/// Smallest odd size >= 6 sigma + 1 (and >= 3), clamped to fit a
/// min(height, width) field.
pub fn gaussian_size_for(sigma: f64, height: usize, width: usize) -> usize {
    let wanted = (6.0 * sigma + 1.0).ceil() as usize;
    let mut size = wanted.max(3);
    if size.is_multiple_of(2) {
        size += 1;
    }
    let limit = height.min(width);
    if size > limit {
        size = if limit.is_multiple_of(2) { limit - 1 } else { limit };
    }
    size
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *d + a * *s;
    }
}

/// dst[c] += a * src[(c - dx) mod w], for all c; dx may be any integer.
#[inline]
fn axpy_shifted<T: Real>(dst: &mut [T], src: &[T], a: T, dx: isize) {
    let w = dst.len();
    let dx = dx.rem_euclid(w as isize) as usize;
    if dx == 0 {
        axpy(dst, src, a);
    } else {
        axpy(&mut dst[dx..], &src[..w - dx], a);
        axpy(&mut dst[..dx], &src[w - dx..], a);
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // four independent accumulators so the reduction vectorizes
    let mut acc = [T::zero(); 4];
    let (ac, ar) = a.split_at(a.len() - a.len() % 4);
    let (bc, br) = b.split_at(ac.len());
    for (xs, ys) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        acc[0] = acc[0] + xs[0] * ys[0];
        acc[1] = acc[1] + xs[1] * ys[1];
        acc[2] = acc[2] + xs[2] * ys[2];
        acc[3] = acc[3] + xs[3] * ys[3];
    }
    let mut tail = T::zero();
    for (x, y) in ar.iter().zip(br.iter()) {
        tail = tail + *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Circular convolution of one plane with a square kernel, accumulated
/// into `out` (caller zeroes it first when needed).
fn conv_plane_accum<T: Real>(
    out: &mut [T],
    x: &[T],
    h: usize,
    w: usize,
    taps: &[T],
    k: usize,
    flip: bool,
) {
    let c = (k / 2) as isize;
    for i in 0..k {
        for j in 0..k {
            let tap = if flip {
                taps[(k - 1 - i) * k + (k - 1 - j)]
            } else {
                taps[i * k + j]
            };
            if tap == T::zero() {
                continue;
            }
            let dy = i as isize - c;
            let dx = j as isize - c;
            for r in 0..h {
                let sr = (r as isize - dy).rem_euclid(h as isize) as usize;
                axpy_shifted(&mut out[r * w..(r + 1) * w], &x[sr * w..(sr + 1) * w], tap, dx);
            }
        }
    }
}

/// Depth-wise circular convolution: every channel convolved independently
/// with the same kernel. Output has the input's shape.
pub fn conv_depthwise<T: Real>(x: &Field<T>, k: &Kernel2D<T>) -> Result<Field<T>> {
    let (ch, h, w) = x.shape();
    if k.size() > h.min(w) {
        return Err(FeraError::Shape(format!(
            "kernel size {} exceeds field min dimension {}",
            k.size(),
            h.min(w)
        )));
    }
    let mut out = Field::zeros(ch, h, w);
    for c in 0..ch {
        conv_plane_accum(out.channel_mut(c), x.channel(c), h, w, k.taps(), k.size(), false);
    }
    Ok(out)
}

/// Copy all channel planes into a buffer with `c` wrapped border pixels on
/// every side, so convolution inner loops stay contiguous.
fn pad_planes<T: Real>(x: &[T], ch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * c, w + 2 * c);
    let mut out = vec![T::zero(); ch * ph * pw];
    for cidx in 0..ch {
        let src_plane = &x[cidx * h * w..(cidx + 1) * h * w];
        let dst_plane = &mut out[cidx * ph * pw..(cidx + 1) * ph * pw];
        for r in 0..ph {
            let sr = (r as isize - c as isize).rem_euclid(h as isize) as usize;
            let src = &src_plane[sr * w..(sr + 1) * w];
            let dst = &mut dst_plane[r * pw..(r + 1) * pw];
            dst[c..c + w].copy_from_slice(src);
            for j in 0..c {
                dst[j] = src[w - c + j];
                dst[c + w + j] = src[j];
            }
        }
    }
    out
}

/// Full cross-channel circular convolution:
/// y[co] = sum_ci x[ci] (*) weight[co][ci], weights laid out
/// [cout, cin, k, k] row-major.
pub fn conv2d<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
) -> Vec<T> {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(weight.len(), cout * cin * k * k);
    let hw = h * w;
    let c = k / 2;
    let (ph, pw) = (h + 2 * c, w + 2 * c);
    let padded = pad_planes(x, cin, h, w, c);
    let mut y = vec![T::zero(); cout * hw];
    for co in 0..cout {
        let out = &mut y[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let xp = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            for i in 0..k {
                for j in 0..k {
                    let tap = weight[((co * cin + ci) * k + i) * k + j];
                    if tap == T::zero() {
                        continue;
                    }
                    // y(r, :) += tap * xpad(r + k-1-i)[k-1-j ..][..w]
                    let (ro, co_) = (k - 1 - i, k - 1 - j);
                    for r in 0..h {
                        let src = &xp[(r + ro) * pw + co_..(r + ro) * pw + co_ + w];
                        axpy(&mut out[r * w..(r + 1) * w], src, tap);
                    }
                }
            }
        }
    }
    y
}

/// Gradient of `conv2d` with respect to its input: convolution of the
/// output gradient with the spatially flipped, channel-transposed weights.
pub fn conv2d_input_grad<T: Real>(
    dy: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
) -> Vec<T> {
    let hw = h * w;
    let c = k / 2;
    let (ph, pw) = (h + 2 * c, w + 2 * c);
    let padded = pad_planes(dy, cout, h, w, c);
    let mut dx = vec![T::zero(); cin * hw];
    for ci in 0..cin {
        let out = &mut dx[ci * hw..(ci + 1) * hw];
        for co in 0..cout {
            let gp = &padded[co * ph * pw..(co + 1) * ph * pw];
            for i in 0..k {
                for j in 0..k {
                    let tap = weight[((co * cin + ci) * k + i) * k + j];
                    if tap == T::zero() {
                        continue;
                    }
                    // flipped kernel: dx(r, :) += tap * dypad(r + i)[j ..][..w]
                    for r in 0..h {
                        let src = &gp[(r + i) * pw + j..(r + i) * pw + j + w];
                        axpy(&mut out[r * w..(r + 1) * w], src, tap);
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of `conv2d` with respect to its weights.
pub fn conv2d_weight_grad<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    dy: &[T],
    cout: usize,
    k: usize,
) -> Vec<T> {
    let hw = h * w;
    let c = k / 2;
    let (ph, pw) = (h + 2 * c, w + 2 * c);
    let padded = pad_planes(x, cin, h, w, c);
    let mut dw = vec![T::zero(); cout * cin * k * k];
    for co in 0..cout {
        let dyp = &dy[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let xp = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            let base = (co * cin + ci) * k * k;
            for i in 0..k {
                for j in 0..k {
                    let (ro, co_) = (k - 1 - i, k - 1 - j);
                    let mut acc = T::zero();
                    for r in 0..h {
                        let src = &xp[(r + ro) * pw + co_..(r + ro) * pw + co_ + w];
                        acc = acc + dot(&dyp[r * w..(r + 1) * w], src);
                    }
                    dw[base + i * k + j] = acc;
                }
            }
        }
    }
    dw
}

/// Separable circular Gaussian blur of every channel with the given 1-D
/// taps. Identical (up to rounding) to depth-wise convolution with the
/// outer-product 2-D kernel, and self-adjoint, so it is its own gradient map.
pub fn gauss_blur<T: Real>(x: &Field<T>, taps_1d: &[T]) -> Field<T> {
    let (ch, h, w) = x.shape();
    let k = taps_1d.len();
    let c = (k / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    let mut out = Field::zeros(ch, h, w);
    for cidx in 0..ch {
        let xp = x.channel(cidx);
        // horizontal pass
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for (i, &tap) in taps_1d.iter().enumerate() {
            let dx = i as isize - c;
            for r in 0..h {
                axpy_shifted(&mut tmp[r * w..(r + 1) * w], &xp[r * w..(r + 1) * w], tap, dx);
            }
        }
        // vertical pass
        let op = out.channel_mut(cidx);
        for (i, &tap) in taps_1d.iter().enumerate() {
            let dy = i as isize - c;
            for r in 0..h {
                let sr = (r as isize - dy).rem_euclid(h as isize) as usize;
                axpy(&mut op[r * w..(r + 1) * w], &tmp[sr * w..(sr + 1) * w], tap);
            }
        }
    }
    out
}
