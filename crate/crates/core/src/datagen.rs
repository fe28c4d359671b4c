//! Deterministic synthetic data: Gaussian random fields with power-law
//! spectra, and "style" variants with one frequency band amplified.

use crate::error::{FeraError, Result};
use crate::fft;
use crate::field::Field;
use crate::io;
use crate::real::Real;
use crate::rng::{derive_seed, keyed_rng};
use crate::spectrum::{decompose, FilterBank};
use rustfft::num_complex::Complex64;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Powerlaw,
    BandBoost,
}

impl std::fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SyntheticKind::Powerlaw => write!(f, "powerlaw"),
            SyntheticKind::BandBoost => write!(f, "band_boost"),
        }
    }
}

/// Recipe for one synthetic field distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    /// Power-spectrum exponent: |x_hat(f)|^2 proportional to 1/f^gamma.
    pub gamma: f64,
    /// Band to amplify (0-based), for the band_boost kind.
    pub boost_band: Option<usize>,
    pub boost_factor: f64,
    /// Square size; H = W, power of two.
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn powerlaw(gamma: f64, size: usize, channels: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Powerlaw,
            gamma,
            boost_band: None,
            boost_factor: 1.0,
            size,
            channels,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=4.0).contains(&self.gamma) {
            return Err(FeraError::Domain(format!(
                "gamma {} outside [0, 4]",
                self.gamma
            )));
        }
        if !matches!(self.size, 16 | 32 | 64 | 128) {
            return Err(FeraError::Domain(format!(
                "size {} not in {{16, 32, 64, 128}}",
                self.size
            )));
        }
        if self.channels == 0 {
            return Err(FeraError::Domain("channels must be >= 1".into()));
        }
        if self.boost_factor <= 0.0 {
            return Err(FeraError::Domain(format!(
                "boost_factor {} must be > 0",
                self.boost_factor
            )));
        }
        if self.kind == SyntheticKind::BandBoost && self.boost_band.is_none() {
            return Err(FeraError::Domain("band_boost needs boost_band".into()));
        }
        Ok(())
    }

    /// Same spec with a different seed (used for indexed datasets).
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Normalize to unit variance (fields here are zero-mean by construction).
fn normalize_unit_variance<T: Real>(mut f: Field<T>) -> Field<T> {
    let var = f.energy() / f.len() as f64;
    let s = T::of_f64(1.0 / var.sqrt());
    f.data_mut().iter_mut().for_each(|v| *v = *v * s);
    f
}

/// Gaussian random field with |x_hat(f)|^2 proportional to 1/f^gamma:
/// white noise filtered by rho^(-gamma/2) in the Fourier domain, DC zeroed,
/// normalized to unit variance.
pub fn gen_powerlaw<T: Real>(spec: &SyntheticSpec) -> Result<Field<T>> {
    spec.validate()?;
    if spec.kind != SyntheticKind::Powerlaw {
        return Err(FeraError::Domain(format!(
            "gen_powerlaw called with kind {}",
            spec.kind
        )));
    }
    gen_powerlaw_inner(spec)
}

fn gen_powerlaw_inner<T: Real>(spec: &SyntheticSpec) -> Result<Field<T>> {
    let n = spec.size;
    let mut rng = keyed_rng(spec.seed, "powerlaw", &[]);
    let white = Field::<f64>::standard_normal(spec.channels, n, n, &mut rng);
    let mut spectra = fft::fft2(&white)?;
    for plane in &mut spectra {
        for r in 0..n {
            let fy = fft::freq_coord(r, n);
            for c in 0..n {
                let fx = fft::freq_coord(c, n);
                let rho = (fx * fx + fy * fy).sqrt();
                let w = if rho == 0.0 {
                    0.0
                } else {
                    rho.powf(-spec.gamma / 2.0)
                };
                plane[r * n + c] *= Complex64::new(w, 0.0);
            }
        }
    }
    let filtered = fft::ifft2(&spectra, n, n)?;
    Ok(normalize_unit_variance(filtered.cast::<T>()))
}

/// Power-law field with one band multiplied by `boost_factor`, recomposed
/// and renormalized. A factor of exactly 1 returns the underlying field.
pub fn gen_band_boost<T: Real>(spec: &SyntheticSpec, bank: &FilterBank) -> Result<Field<T>> {
    spec.validate()?;
    if spec.kind != SyntheticKind::BandBoost {
        return Err(FeraError::Domain(format!(
            "gen_band_boost called with kind {}",
            spec.kind
        )));
    }
    let band = spec.boost_band.unwrap();
    if band >= bank.n_bands() {
        return Err(FeraError::Index(format!(
            "boost_band {band} out of range for {} bands",
            bank.n_bands()
        )));
    }
    let base: Field<T> = gen_powerlaw_inner(spec)?;
    if spec.boost_factor == 1.0 {
        return Ok(base);
    }
    let d = decompose(&base, bank)?;
    let (c, h, w) = base.shape();
    let mut out = Field::<T>::zeros(c, h, w);
    for (k, b) in d.bands.iter().enumerate() {
        let s = if k == band {
            T::of_f64(spec.boost_factor)
        } else {
            T::one()
        };
        out = out.add(&b.scale(s))?;
    }
    Ok(normalize_unit_variance(out))
}

/// Generate a field for either kind.
pub fn generate<T: Real>(spec: &SyntheticSpec, bank: &FilterBank) -> Result<Field<T>> {
    match spec.kind {
        SyntheticKind::Powerlaw => gen_powerlaw(spec),
        SyntheticKind::BandBoost => gen_band_boost(spec, bank),
    }
}

/// Indexed dataset: element i is `generate` with a seed derived from
/// (spec.seed, i).
pub fn gen_dataset<T: Real>(
    spec: &SyntheticSpec,
    bank: &FilterBank,
    count: usize,
) -> Result<Vec<Field<T>>> {
    (0..count)
        .map(|i| generate(&spec.with_seed(derive_seed(spec.seed, "dataset", &[i as u64])), bank))
        .collect()
}

/// Write `count` fields as tensor files plus a manifest recording the spec
/// and per-file seeds.
pub fn materialize<T: Real>(
    spec: &SyntheticSpec,
    bank: &FilterBank,
    count: usize,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!(
        "kind={} gamma={} boost_band={} boost_factor={} size={} channels={} seed={} count={}\n",
        spec.kind,
        spec.gamma,
        spec.boost_band.map_or("none".into(), |b| b.to_string()),
        spec.boost_factor,
        spec.size,
        spec.channels,
        spec.seed,
        count
    ));
    for i in 0..count {
        let seed = derive_seed(spec.seed, "dataset", &[i as u64]);
        let f: Field<T> = generate(&spec.with_seed(seed), bank)?;
        let name = format!("field_{i:05}.ft");
        io::save_field(&dir.join(&name), &f)?;
        manifest.push_str(&format!("{name} {seed}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load every field listed in a materialized dataset's manifest, in order.
pub fn load_dataset<T: Real>(dir: &Path) -> Result<Vec<Field<T>>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    manifest
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let name = line
                .split_whitespace()
                .next()
                .ok_or_else(|| FeraError::Parse(format!("bad manifest line `{line}`")))?;
            io::load_field(&dir.join(name))
        })
        .collect()
}
