//! Frequency-energy analysis: DoG filter banks, band decomposition,
//! bandwise energies and their normalized indicator vector, radial
//! amplitude spectra, and per-frequency / per-band SNR measurement.

use crate::diffusion::NoiseSchedule;
use crate::error::{FeraError, Result};
use crate::fft;
use crate::field::Field;
use crate::kernel::{gauss_blur, gaussian_kernel, gaussian_size_for, gaussian_taps_1d};
use crate::real::Real;
use crate::rng::keyed_rng;
use rayon::prelude::*;

/// Minimum total energy below which a field counts as degenerate.
pub const ENERGY_EPS: f64 = 1e-12;

/// Geometric progression of Gaussian scales defining an n-band DoG split.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    n_bands: usize,
    sigmas: Vec<f64>,
    kappa: f64,
    kappa_clamped: bool,
}

/// Base scale rule: kappa = min(H, W) / 128, clamped below at 0.3 so the
/// discrete kernels stay usable at small resolutions.
pub const KAPPA_MIN: f64 = 0.3;

/// Build the dyadic bank sigma_k = kappa * 2^k (k = 0 .. n_bands-2).
pub fn build_filter_bank(n_bands: usize, height: usize, width: usize) -> Result<FilterBank> {
    if n_bands < 2 {
        return Err(FeraError::Domain(format!(
            "filter bank needs at least 2 bands, got {n_bands}"
        )));
    }
    if height < 8 || width < 8 {
        return Err(FeraError::Domain(format!(
            "filter bank needs dims >= 8, got {height}x{width}"
        )));
    }
    let raw = height.min(width) as f64 / 128.0;
    let kappa_clamped = raw < KAPPA_MIN;
    let kappa = raw.max(KAPPA_MIN);
    if kappa_clamped {
        log::warn!("filter bank base scale {raw:.4} clamped to {KAPPA_MIN}");
    }
    let sigmas = (0..n_bands - 1)
        .map(|k| kappa * f64::powi(2.0, k as i32))
        .collect();
    Ok(FilterBank {
        n_bands,
        sigmas,
        kappa,
        kappa_clamped,
    })
}

impl FilterBank {
    #[inline]
    pub fn n_bands(&self) -> usize {
        self.n_bands
    }
    #[inline]
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
    #[inline]
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    #[inline]
    pub fn kappa_clamped(&self) -> bool {
        self.kappa_clamped
    }

    /// 1-D Gaussian taps for every scale, sized for an h x w field.
    pub fn taps_for<T: Real>(&self, height: usize, width: usize) -> Result<Vec<Vec<T>>> {
        if height.min(width) < 8 {
            return Err(FeraError::Shape(format!(
                "field {height}x{width} too small for this bank"
            )));
        }
        self.sigmas
            .iter()
            .map(|&s| {
                let size = gaussian_size_for(s, height, width);
                Ok(gaussian_taps_1d(s, size)?
                    .into_iter()
                    .map(T::of_f64)
                    .collect())
            })
            .collect()
    }
}

/// The n filtered components of a field plus their squared-L2 energies.
#[derive(Debug, Clone)]
pub struct BandDecomposition<T: Real = f32> {
    pub bands: Vec<Field<T>>,
    pub energies: Vec<f64>,
}

/// Split a field into n bands: low = G_s1 * x, middle k = (G_sk - G_sk-1) * x,
/// top = x - G_sn-1 * x. The bands sum back to the input by construction.
pub fn decompose<T: Real>(x: &Field<T>, bank: &FilterBank) -> Result<BandDecomposition<T>> {
    x.check_finite("decompose input")?;
    let (_, h, w) = x.shape();
    let taps = bank.taps_for::<T>(h, w)?;
    let blurred: Vec<Field<T>> = taps.iter().map(|t| gauss_blur(x, t)).collect();
    let n = bank.n_bands();
    let mut bands = Vec::with_capacity(n);
    bands.push(blurred[0].clone());
    for k in 1..n - 1 {
        bands.push(blurred[k].sub(&blurred[k - 1])?);
    }
    bands.push(x.sub(&blurred[n - 2])?);
    let energies = bands.iter().map(Field::energy).collect();
    Ok(BandDecomposition { bands, energies })
}

/// Normalized bandwise energy vector on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct FeiVector {
    e: Vec<f64>,
}

impl FeiVector {
    pub fn new(e: Vec<f64>) -> Self {
        Self { e }
    }
    pub fn uniform(n: usize) -> Self {
        Self {
            e: vec![1.0 / n as f64; n],
        }
    }
    #[inline]
    pub fn components(&self) -> &[f64] {
        &self.e
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.e.len()
    }
    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }
    /// Non-negative components summing to 1 within 1e-6.
    pub fn is_simplex(&self) -> bool {
        self.e.iter().all(|&v| v >= 0.0) && (self.e.iter().sum::<f64>() - 1.0).abs() < 1e-6
    }
}

/// Frequency-Energy Indicator: band energies normalized to sum 1.
pub fn fei<T: Real>(d: &BandDecomposition<T>) -> Result<FeiVector> {
    let total: f64 = d.energies.iter().sum();
    if total <= ENERGY_EPS {
        return Err(FeraError::DegenerateInput(format!(
            "total band energy {total:.3e} below {ENERGY_EPS:.0e}"
        )));
    }
    Ok(FeiVector::new(d.energies.iter().map(|e| e / total).collect()))
}

/// Convenience: decompose then normalize.
pub fn fei_of<T: Real>(x: &Field<T>, bank: &FilterBank) -> Result<FeiVector> {
    fei(&decompose(x, bank)?)
}

/// Expected FEI of a unit-variance white-noise field: the bank's
/// per-band pass energies, computed from the discrete transfer functions.
pub fn white_noise_fei(bank: &FilterBank, height: usize, width: usize) -> Result<FeiVector> {
    let responses = band_transfer_functions(bank, height, width)?;
    let pass: Vec<f64> = responses
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .collect();
    let total: f64 = pass.iter().sum();
    Ok(FeiVector::new(pass.iter().map(|p| p / total).collect()))
}

/// Real-valued transfer function of each band on the h x w DFT grid
/// (Gaussian transfer functions are real and even; bands are differences).
pub fn band_transfer_functions(
    bank: &FilterBank,
    height: usize,
    width: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = bank.n_bands();
    let mut gs: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
    for &s in bank.sigmas() {
        let size = gaussian_size_for(s, height, width);
        let k = gaussian_kernel::<f64>(s, size)?;
        let spec = fft::kernel_spectrum(&k, height, width)?;
        gs.push(spec.iter().map(|z| z.re).collect());
    }
    let cells = height * width;
    let mut out = Vec::with_capacity(n);
    out.push(gs[0].clone());
    for k in 1..n - 1 {
        out.push((0..cells).map(|i| gs[k][i] - gs[k - 1][i]).collect());
    }
    out.push((0..cells).map(|i| 1.0 - gs[n - 2][i]).collect());
    Ok(out)
}

/// Radially binned mean amplitude spectrum.
#[derive(Debug, Clone)]
pub struct RadialSpectrum {
    pub bin_centers: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Maximum radial frequency on the DFT grid (the Nyquist corner).
pub const RHO_MAX: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn radial_bin(rho: f64, n_bins: usize) -> Option<usize> {
    if rho <= 0.0 {
        return None;
    }
    let delta = RHO_MAX / n_bins as f64;
    Some(((rho / delta).ceil() as usize - 1).min(n_bins - 1))
}

/// Channel-averaged mean |X(f)| over linear-width annuli; DC excluded.
pub fn radial_spectrum<T: Real>(x: &Field<T>, n_bins: usize) -> Result<RadialSpectrum> {
    if n_bins < 4 {
        return Err(FeraError::Domain(format!("n_bins {n_bins} must be >= 4")));
    }
    let (ch, h, w) = x.shape();
    let spectra = fft::fft2(x)?;
    let mut sums = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in 0..h {
        let fy = fft::freq_coord(r, h);
        for c in 0..w {
            let fx = fft::freq_coord(c, w);
            let rho = (fx * fx + fy * fy).sqrt();
            if let Some(b) = radial_bin(rho, n_bins) {
                let mut amp = 0.0;
                for plane in &spectra {
                    amp += plane[r * w + c].norm();
                }
                sums[b] += amp / ch as f64;
                counts[b] += 1;
            }
        }
    }
    let delta = RHO_MAX / n_bins as f64;
    let bin_centers = (0..n_bins).map(|j| (j as f64 + 0.5) * delta).collect();
    let amplitudes = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(RadialSpectrum {
        bin_centers,
        amplitudes,
        counts,
    })
}

/// Mid-frequency window used for log-log slope fits.
pub const MID_RHO_LO: f64 = 0.06;
pub const MID_RHO_HI: f64 = 0.25;
/// Annuli with fewer populated DFT cells than this are excluded from fits.
pub const MIN_BIN_CELLS: usize = 4;

/// Indices of bins inside the mid-frequency window with enough cells.
pub fn mid_bins(centers: &[f64], counts: &[usize]) -> Vec<usize> {
    centers
        .iter()
        .zip(counts)
        .enumerate()
        .filter(|(_, (c, &n))| **c >= MID_RHO_LO && **c <= MID_RHO_HI && n >= MIN_BIN_CELLS)
        .map(|(i, _)| i)
        .collect()
}

/// Least-squares slope of ln(y) against ln(x); non-positive y are skipped.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(&x, &y)| x > 0.0 && y > 0.0)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in &pts {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Per-radial-bin SNR estimate at one timestep.
#[derive(Debug, Clone)]
pub struct SnrSpectrum {
    pub bin_centers: Vec<f64>,
    pub snr: Vec<f64>,
    pub counts: Vec<usize>,
}

fn binned_power<T: Real>(x: &Field<T>, n_bins: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let (ch, h, w) = x.shape();
    let spectra = fft::fft2(x)?;
    let mut sums = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in 0..h {
        let fy = fft::freq_coord(r, h);
        for c in 0..w {
            let fx = fft::freq_coord(c, w);
            let rho = (fx * fx + fy * fy).sqrt();
            if let Some(b) = radial_bin(rho, n_bins) {
                let mut p = 0.0;
                for plane in &spectra {
                    p += plane[r * w + c].norm_sqr();
                }
                sums[b] += p / ch as f64;
                counts[b] += 1;
            }
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            *s /= c as f64;
        }
    }
    Ok((sums, counts))
}

/// Per-frequency SNR at step t: alpha_bar * |x0_hat(f)|^2 over
/// (1 - alpha_bar) * E|eps_hat(f)|^2, with the noise expectation estimated
/// by Monte Carlo over unit-Gaussian fields. The draws depend only on
/// `seed`, so sweeping t keeps the same noise estimate.
pub fn measure_snr<T: Real>(
    x0: &Field<T>,
    schedule: &NoiseSchedule,
    t: usize,
    n_bins: usize,
    n_noise_draws: usize,
    seed: u64,
) -> Result<SnrSpectrum> {
    if t > schedule.t_max() {
        return Err(FeraError::Index(format!(
            "timestep {t} out of range 0..={}",
            schedule.t_max()
        )));
    }
    if n_noise_draws < 8 {
        return Err(FeraError::Domain(format!(
            "n_noise_draws {n_noise_draws} must be >= 8"
        )));
    }
    let (ch, h, w) = x0.shape();
    let (signal, counts) = binned_power(x0, n_bins)?;
    let mut noise = vec![0.0f64; n_bins];
    for d in 0..n_noise_draws {
        let mut rng = keyed_rng(seed, "snr-noise", &[d as u64]);
        let eps = Field::<T>::standard_normal(ch, h, w, &mut rng);
        let (p, _) = binned_power(&eps, n_bins)?;
        for (acc, v) in noise.iter_mut().zip(&p) {
            *acc += v;
        }
    }
    for v in &mut noise {
        *v /= n_noise_draws as f64;
    }
    let ab = schedule.alpha_bar(t);
    let delta = RHO_MAX / n_bins as f64;
    let bin_centers = (0..n_bins).map(|j| (j as f64 + 0.5) * delta).collect();
    let snr = if ab >= 1.0 {
        vec![f64::INFINITY; n_bins]
    } else {
        signal
            .iter()
            .zip(&noise)
            .map(|(&s, &n)| if n > 0.0 { ab * s / ((1.0 - ab) * n) } else { 0.0 })
            .collect()
    };
    Ok(SnrSpectrum {
        bin_centers,
        snr,
        counts,
    })
}

/// Timestep-independent per-band signal/noise energy ratios R_k; the band
/// SNR at step t is alpha_bar/(1-alpha_bar) * R_k.
pub fn band_snr_ratios<T: Real>(
    x0: &Field<T>,
    bank: &FilterBank,
    n_noise_draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_noise_draws < 8 {
        return Err(FeraError::Domain(format!(
            "n_noise_draws {n_noise_draws} must be >= 8"
        )));
    }
    let (ch, h, w) = x0.shape();
    let signal = decompose(x0, bank)?.energies;
    let mut noise = vec![0.0f64; bank.n_bands()];
    for d in 0..n_noise_draws {
        let mut rng = keyed_rng(seed, "band-snr-noise", &[d as u64]);
        let eps = Field::<T>::standard_normal(ch, h, w, &mut rng);
        let e = decompose(&eps, bank)?.energies;
        for (acc, v) in noise.iter_mut().zip(&e) {
            *acc += v;
        }
    }
    Ok(signal
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| s * n_noise_draws as f64 / n)
        .collect())
}

/// Per-band SNR values at one timestep.
pub fn band_snr(ratios: &[f64], schedule: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    if t > schedule.t_max() {
        return Err(FeraError::Index(format!(
            "timestep {t} out of range 0..={}",
            schedule.t_max()
        )));
    }
    let ab = schedule.alpha_bar(t);
    if ab >= 1.0 {
        return Ok(vec![f64::INFINITY; ratios.len()]);
    }
    let m = ab / (1.0 - ab);
    Ok(ratios.iter().map(|r| m * r).collect())
}

/// First timestep, in denoising order (t counting down from T), at which
/// each band's SNR reaches 1. Larger values mean earlier recovery.
pub fn snr_crossings(ratios: &[f64], schedule: &NoiseSchedule) -> Vec<usize> {
    ratios
        .iter()
        .map(|&r| {
            for t in (0..=schedule.t_max()).rev() {
                let ab = schedule.alpha_bar(t);
                if ab >= 1.0 || ab / (1.0 - ab) * r >= 1.0 {
                    return t;
                }
            }
            0
        })
        .collect()
}

/// One row of a frequency-energy evolution table.
#[derive(Debug, Clone)]
pub struct EvolutionRow {
    pub t: usize,
    pub alpha_bar: f64,
    pub e: Vec<f64>,
}

/// FEI of the forward-corrupted field at every timestep, with one
/// deterministic noise draw per t. Rows are ordered by t.
pub fn energy_evolution<T: Real>(
    x0: &Field<T>,
    schedule: &NoiseSchedule,
    bank: &FilterBank,
    seed: u64,
) -> Result<Vec<EvolutionRow>> {
    let (ch, h, w) = x0.shape();
    (0..=schedule.t_max())
        .into_par_iter()
        .map(|t| {
            let mut rng = keyed_rng(seed, "evolution-noise", &[t as u64]);
            let noise = Field::<T>::standard_normal(ch, h, w, &mut rng);
            let xt = crate::diffusion::forward_corrupt(x0, t, schedule, &noise)?;
            let e = fei_of(&xt, bank)?;
            Ok(EvolutionRow {
                t,
                alpha_bar: schedule.alpha_bar(t),
                e: e.components().to_vec(),
            })
        })
        .collect()
}
