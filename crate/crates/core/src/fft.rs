//! 2-D FFT used as the verification oracle for convolution and band
//! energies. Always runs in double precision; restricted to power-of-two
//! spatial dimensions.

use crate::error::{FeraError, Result};
use crate::field::Field;
use crate::kernel::Kernel2D;
use crate::real::Real;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(FeraError::UnsupportedShape(format!(
            "fft2 requires power-of-two dims, got {h}x{w}"
        )));
    }
    Ok(())
}

fn fft2_plane(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let dir = if inverse {
        rustfft::FftDirection::Inverse
    } else {
        rustfft::FftDirection::Forward
    };
    let row_fft = planner.plan_fft(w, dir);
    for r in 0..h {
        row_fft.process(&mut plane[r * w..(r + 1) * w]);
    }
    let col_fft = planner.plan_fft(h, dir);
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = plane[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            plane[r * w + c] = col[r];
        }
    }
}

/// Forward unnormalized DFT of every channel.
pub fn fft2<T: Real>(x: &Field<T>) -> Result<Vec<Vec<Complex64>>> {
    let (ch, h, w) = x.shape();
    check_pow2(h, w)?;
    let mut out = Vec::with_capacity(ch);
    for c in 0..ch {
        let mut plane: Vec<Complex64> = x
            .channel(c)
            .iter()
            .map(|v| Complex64::new(v.as_f64(), 0.0))
            .collect();
        fft2_plane(&mut plane, h, w, false);
        out.push(plane);
    }
    Ok(out)
}

/// Inverse DFT (normalized by 1/(h*w)) of per-channel spectra back to a
/// real field; imaginary residue is discarded.
pub fn ifft2(spectra: &[Vec<Complex64>], h: usize, w: usize) -> Result<Field<f64>> {
    check_pow2(h, w)?;
    let ch = spectra.len();
    let mut data = Vec::with_capacity(ch * h * w);
    let norm = 1.0 / (h * w) as f64;
    for plane in spectra {
        if plane.len() != h * w {
            return Err(FeraError::Shape(format!(
                "spectrum plane length {} != {h}x{w}",
                plane.len()
            )));
        }
        let mut p = plane.clone();
        fft2_plane(&mut p, h, w, true);
        data.extend(p.iter().map(|z| z.re * norm));
    }
    Field::from_vec(ch, h, w, data)
}

/// DFT of a kernel embedded in an h x w plane with its center at the origin
/// (wrapped), i.e. the transfer function of circular convolution with it.
pub fn kernel_spectrum<T: Real>(k: &Kernel2D<T>, h: usize, w: usize) -> Result<Vec<Complex64>> {
    check_pow2(h, w)?;
    if k.size() > h.min(w) {
        return Err(FeraError::Shape(format!(
            "kernel size {} exceeds field min dimension {}",
            k.size(),
            h.min(w)
        )));
    }
    let s = k.size();
    let c = (s / 2) as isize;
    let mut plane = vec![Complex64::default(); h * w];
    for i in 0..s {
        for j in 0..s {
            let r = (i as isize - c).rem_euclid(h as isize) as usize;
            let q = (j as isize - c).rem_euclid(w as isize) as usize;
            plane[r * w + q] += Complex64::new(k.taps()[i * s + j].as_f64(), 0.0);
        }
    }
    fft2_plane(&mut plane, h, w, false);
    Ok(plane)
}

/// Circular convolution evaluated in the Fourier domain; the oracle that
/// spatial convolution is checked against.
pub fn conv_depthwise_fft<T: Real>(x: &Field<T>, k: &Kernel2D<T>) -> Result<Field<f64>> {
    let (_, h, w) = x.shape();
    let kf = kernel_spectrum(k, h, w)?;
    let mut spectra = fft2(x)?;
    for plane in &mut spectra {
        for (z, t) in plane.iter_mut().zip(kf.iter()) {
            *z *= *t;
        }
    }
    ifft2(&spectra, h, w)
}

/// Signed frequency coordinate of DFT index `idx` along an axis of length
/// `n`, in cycles per pixel, in [-0.5, 0.5).
#[inline]
pub fn freq_coord(idx: usize, n: usize) -> f64 {
    if idx <= n / 2 {
        idx as f64 / n as f64
    } else {
        (idx as f64 - n as f64) / n as f64
    }
}

/// Frequency-domain energy of one spectrum plane under the unnormalized
/// DFT convention: ||x||^2 = sum |X|^2 / (h*w).
pub fn spectral_energy(plane: &[Complex64]) -> f64 {
    plane.iter().map(|z| z.norm_sqr()).sum::<f64>() / plane.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{conv_depthwise, gaussian_kernel};
    use crate::rng::keyed_rng;

    #[test]
    fn dc_field_has_single_bin() {
        let x = Field::<f64>::constant(1, 8, 8, 2.5);
        let s = fft2(&x).unwrap();
        assert!((s[0][0].re - 2.5 * 64.0).abs() < 1e-9);
        assert!(s[0][0].im.abs() < 1e-9);
        for z in &s[0][1..] {
            assert!(z.norm() < 1e-9);
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut x = Field::<f64>::zeros(1, 8, 8);
        x.data_mut()[0] = 1.0;
        let s = fft2(&x).unwrap();
        for z in &s[0] {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_identity() {
        let mut rng = keyed_rng(7, "fft-parseval", &[]);
        let x = Field::<f64>::standard_normal(1, 16, 16, &mut rng);
        let s = fft2(&x).unwrap();
        let spatial = x.energy();
        let spectral = spectral_energy(&s[0]);
        assert!((spatial - spectral).abs() / spatial < 1e-9);
    }

    #[test]
    fn round_trip() {
        let mut rng = keyed_rng(9, "fft-rt", &[]);
        let x = Field::<f64>::standard_normal(2, 16, 8, &mut rng);
        let s = fft2(&x).unwrap();
        let y = ifft2(&s, 16, 8).unwrap();
        let scale = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(x.max_abs_diff(&y) / scale < 1e-9);
    }

    #[test]
    fn non_pow2_rejected() {
        let x = Field::<f64>::zeros(1, 12, 16);
        assert!(matches!(
            fft2(&x),
            Err(FeraError::UnsupportedShape(_))
        ));
    }

    #[test]
    fn spatial_conv_matches_fft_product_f64() {
        let mut rng = keyed_rng(21, "fft-conv", &[]);
        for (h, w, sigma, size) in [(8usize, 8usize, 1.0, 7usize), (16, 16, 0.6, 5), (16, 8, 1.4, 7)]
        {
            let x = Field::<f64>::standard_normal(2, h, w, &mut rng);
            let k = gaussian_kernel::<f64>(sigma, size).unwrap();
            let spatial = conv_depthwise(&x, &k).unwrap();
            let oracle = conv_depthwise_fft(&x, &k).unwrap();
            assert!(spatial.max_abs_diff(&oracle) < 1e-12);
        }
    }

    #[test]
    fn spatial_conv_matches_fft_product_f32() {
        let mut rng = keyed_rng(22, "fft-conv32", &[]);
        let x = Field::<f32>::standard_normal(1, 8, 8, &mut rng);
        let k = gaussian_kernel::<f32>(1.0, 7).unwrap();
        let spatial = conv_depthwise(&x, &k).unwrap().cast::<f64>();
        let oracle = conv_depthwise_fft(&x, &k).unwrap();
        assert!(spatial.max_abs_diff(&oracle) < 1e-6);
    }
}
