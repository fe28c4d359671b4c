//! Toy DDPM machinery: discrete noise schedules, forward corruption, a
//! small timestep-conditioned convolutional denoiser, and ancestral
//! sampling over a strided sub-schedule.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{FeraError, Result};
use crate::field::Field;
use crate::kernel::conv2d;
use crate::linalg::matvec;
use crate::real::Real;
use crate::rng::keyed_rng;
use crate::routing::{RoutedModel, StepRecord};

/// Guard below which the clean-latent estimate becomes numerically unsafe.
pub const ALPHA_BAR_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

/// Discrete forward-process schedule: per-step variances beta_t and the
/// cumulative signal retention alpha_bar_t (alpha_bar_0 = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, t_total: usize) -> Result<NoiseSchedule> {
    if t_total < 10 {
        return Err(FeraError::Domain(format!(
            "schedule needs T >= 10, got {t_total}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 2e-2);
            (0..t_total)
                .map(|i| lo + (hi - lo) * i as f64 / (t_total - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / t_total as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            (1..=t_total)
                .map(|t| {
                    let ratio = f(t as f64) / f((t - 1) as f64);
                    (1.0 - ratio).clamp(1e-8, 0.999)
                })
                .collect()
        }
    };
    // the cumulative product of (1 - beta) is the stored truth for both kinds
    let mut alpha_bar = Vec::with_capacity(t_total + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alpha_bar,
    })
}

impl NoiseSchedule {
    #[inline]
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }
    /// Total number of diffusion steps T.
    #[inline]
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
    #[inline]
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(FeraError::Index(format!(
                "timestep {t} out of range 0..={}",
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) noise.
pub fn forward_corrupt<T: Real>(
    x0: &Field<T>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Field<T>,
) -> Result<Field<T>> {
    schedule.check_t(t)?;
    x0.check_same_shape(noise, "forward_corrupt noise")?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let a = T::of_f64(ab.sqrt());
    let b = T::of_f64((1.0 - ab).sqrt());
    x0.scale(a).add_scaled(b, noise)
}

/// Clean-latent estimate from an epsilon prediction:
/// (x_t - sqrt(1 - alpha_bar) eps_hat) / sqrt(alpha_bar).
pub fn x0_estimate<T: Real>(
    x_t: &Field<T>,
    eps_hat: &Field<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Field<T>> {
    schedule.check_t(t)?;
    x_t.check_same_shape(eps_hat, "x0_estimate")?;
    let ab = schedule.alpha_bar(t);
    if ab < ALPHA_BAR_GUARD {
        return Err(FeraError::Numeric(format!(
            "alpha_bar {ab:.3e} below guard {ALPHA_BAR_GUARD:.0e} at t={t}"
        )));
    }
    let inv = T::of_f64(1.0 / ab.sqrt());
    let coef = T::of_f64(-(1.0 - ab).sqrt() / ab.sqrt());
    x_t.scale(inv).add_scaled(coef, eps_hat)
}

/// Sinusoidal timestep embedding of the raw step index.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(i as f64) * (10000f64.ln()) / (half as f64 - 1.0)).exp();
        out.push((t as f64 * freq).sin());
        out.push((t as f64 * freq).cos());
    }
    out.truncate(dim);
    out
}

/// Shape of the toy denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub hidden: usize,
    pub emb_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            hidden: 16,
            emb_dim: 32,
        }
    }
}

pub const CONV_K: usize = 3;
pub const N_LAYERS: usize = 3;

/// One conv layer: weight [cout, cin, 3, 3], bias [cout], and a projection
/// [cout, emb_dim] mapping the timestep embedding to per-channel biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Real = f32> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub proj: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    /// Flattened adapter view: in-features = cin * k * k, out-features = cout.
    pub fn in_features(&self) -> usize {
        self.cin * CONV_K * CONV_K
    }
    pub fn out_features(&self) -> usize {
        self.cout
    }
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len() + self.proj.len()
    }
}

/// The 3-layer circularly padded CNN epsilon-predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T: Real = f32> {
    pub config: DenoiserConfig,
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> DenoiserParams<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Self {
        let dims = [
            (config.channels, config.hidden),
            (config.hidden, config.hidden),
            (config.hidden, config.channels),
        ];
        let mut layers = Vec::with_capacity(N_LAYERS);
        for (li, &(cin, cout)) in dims.iter().enumerate() {
            let mut rng = keyed_rng(seed, "denoiser-init", &[li as u64]);
            let wstd = T::of_f64(1.0 / ((cin * CONV_K * CONV_K) as f64).sqrt());
            let weight = (0..cout * cin * CONV_K * CONV_K)
                .map(|_| T::std_normal(&mut rng) * wstd)
                .collect();
            let pstd = T::of_f64(1.0 / (config.emb_dim as f64).sqrt());
            let proj = (0..cout * config.emb_dim)
                .map(|_| T::std_normal(&mut rng) * pstd)
                .collect();
            layers.push(ConvLayer {
                cin,
                cout,
                weight,
                bias: vec![T::zero(); cout],
                proj,
            });
        }
        Self { config, layers }
    }

    pub fn zeros(config: DenoiserConfig) -> Self {
        let mut p = Self::init(config, 0);
        for l in &mut p.layers {
            l.weight.iter_mut().for_each(|v| *v = T::zero());
            l.bias.iter_mut().for_each(|v| *v = T::zero());
            l.proj.iter_mut().for_each(|v| *v = T::zero());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    cin: l.cin,
                    cout: l.cout,
                    weight: l.weight.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                    proj: l.proj.iter().map(|v| U::of_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Per-channel conditioning bias of layer `li` at step `t`:
    /// bias + proj * embedding.
    fn conditioning(&self, li: usize, emb: &[T]) -> Vec<T> {
        let l = &self.layers[li];
        let pv = matvec(&l.proj, emb, l.cout, self.config.emb_dim);
        l.bias.iter().zip(&pv).map(|(&b, &p)| b + p).collect()
    }
}

/// Blended per-layer low-rank weight deltas, flattened [cout, cin*k*k];
/// the routed adapter context consumed by the denoiser.
#[derive(Debug, Clone)]
pub struct AdapterDeltas<T: Real = f32> {
    pub per_layer: Vec<Vec<T>>,
}

/// Epsilon prediction of the denoiser at step t. When an adapter context is
/// present, each conv layer's output adds the low-rank correction applied
/// to the same input.
pub fn denoise<T: Real>(
    params: &DenoiserParams<T>,
    x_t: &Field<T>,
    t: usize,
    adapters: Option<&AdapterDeltas<T>>,
) -> Result<Field<T>> {
    x_t.check_finite("denoise input")?;
    let (c, h, w) = x_t.shape();
    if c != params.config.channels {
        return Err(FeraError::Shape(format!(
            "denoiser expects {} channels, got {c}",
            params.config.channels
        )));
    }
    if let Some(a) = adapters {
        if a.per_layer.len() != N_LAYERS {
            return Err(FeraError::Shape(format!(
                "adapter context has {} layers, expected {N_LAYERS}",
                a.per_layer.len()
            )));
        }
    }
    let emb: Vec<T> = timestep_embedding(t, params.config.emb_dim)
        .into_iter()
        .map(T::of_f64)
        .collect();
    let mut cur = x_t.data().to_vec();
    let mut cin = c;
    for (li, layer) in params.layers.iter().enumerate() {
        let mut pre = conv2d(&cur, cin, h, w, &layer.weight, layer.cout, CONV_K);
        if let Some(a) = adapters {
            let delta = &a.per_layer[li];
            if delta.len() != layer.weight.len() {
                return Err(FeraError::Shape(format!(
                    "adapter delta length {} != layer {li} weight length {}",
                    delta.len(),
                    layer.weight.len()
                )));
            }
            let corr = conv2d(&cur, cin, h, w, delta, layer.cout, CONV_K);
            for (p, cv) in pre.iter_mut().zip(&corr) {
                *p = *p + *cv;
            }
        }
        let cond = params.conditioning(li, &emb);
        for (ch_idx, &cv) in cond.iter().enumerate() {
            for v in &mut pre[ch_idx * h * w..(ch_idx + 1) * h * w] {
                *v = *v + cv;
            }
        }
        if li + 1 < N_LAYERS {
            for v in &mut pre {
                let s = T::one() / (T::one() + (-*v).exp());
                *v = *v * s;
            }
        }
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(FeraError::Numeric(format!(
                "non-finite activations in denoiser layer {li}"
            )));
        }
        cin = layer.cout;
        cur = pre;
    }
    Field::from_vec(c, h, w, cur)
}

/// Tape handles for the denoiser's parameters.
pub struct DenoiserNodes {
    pub weights: Vec<NodeId>,
    pub cond_biases: Vec<NodeId>,
    pub projs: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl<T: Real> DenoiserParams<T> {
    /// Register parameters on a tape, trainable or frozen.
    pub fn to_tape(&self, tape: &mut Tape<T>, trainable: bool) -> DenoiserNodes {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut projs = Vec::new();
        for l in &self.layers {
            let wt = Tensor::new(vec![l.cout, l.cin, CONV_K, CONV_K], l.weight.clone());
            let bt = Tensor::vector(l.bias.clone());
            let pt = Tensor::new(vec![l.cout, self.config.emb_dim], l.proj.clone());
            if trainable {
                weights.push(tape.param(wt));
                biases.push(tape.param(bt));
                projs.push(tape.param(pt));
            } else {
                weights.push(tape.constant(wt));
                biases.push(tape.constant(bt));
                projs.push(tape.constant(pt));
            }
        }
        DenoiserNodes {
            weights,
            cond_biases: Vec::new(),
            projs,
            biases,
        }
    }

    /// Differentiable forward pass. Optional per-layer weight deltas are
    /// folded into the layer weight before the convolution (equivalent to
    /// adding the low-rank correction to the layer output, by linearity).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        nodes: &DenoiserNodes,
        x_t: &Field<T>,
        t: usize,
        deltas: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        let (c, h, w) = x_t.shape();
        if c != params_channels(self) {
            return Err(FeraError::Shape(format!(
                "denoiser expects {} channels, got {c}",
                self.config.channels
            )));
        }
        let emb: Vec<T> = timestep_embedding(t, self.config.emb_dim)
            .into_iter()
            .map(T::of_f64)
            .collect();
        let emb_node = tape.constant(Tensor::vector(emb));
        let mut cur = tape.constant(Tensor::from_field(x_t));
        for (li, layer) in self.layers.iter().enumerate() {
            let w_eff = match deltas {
                Some(d) => {
                    let dl = tape.reshape(d[li], vec![layer.cout, layer.cin, CONV_K, CONV_K]);
                    tape.add(dl, nodes.weights[li])
                }
                None => nodes.weights[li],
            };
            let conv = tape.conv2d(cur, w_eff, layer.cout, CONV_K);
            let pv = tape.matvec(nodes.projs[li], emb_node, layer.cout, self.config.emb_dim);
            let cond = tape.add(nodes.biases[li], pv);
            let pre = tape.add_bias_channel(conv, cond);
            cur = if li + 1 < N_LAYERS { tape.silu(pre) } else { pre };
            if tape.value(cur).data.iter().any(|v| !v.is_finite()) {
                return Err(FeraError::Numeric(format!(
                    "non-finite activations in denoiser layer {li}"
                )));
            }
        }
        let _ = (h, w);
        Ok(cur)
    }
}

fn params_channels<T: Real>(p: &DenoiserParams<T>) -> usize {
    p.config.channels
}

/// Result of an ancestral sampling run.
#[derive(Debug, Clone)]
pub struct DiffusionSample<T: Real = f32> {
    pub trajectory: Option<Vec<Field<T>>>,
    pub final_field: Field<T>,
    pub seed: u64,
}

/// Uniformly strided descending sub-schedule tau_steps = T, ..., tau_1.
pub fn sub_schedule(t_total: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .map(|i| ((i * t_total) as f64 / steps as f64).round() as usize)
        .collect()
}

/// DDPM ancestral sampling with `steps` uniformly strided steps. Routing
/// (when the model routes by frequency energy) is recomputed at every step
/// from the current latent before the denoiser call.
pub fn sample<T: Real>(
    model: &RoutedModel<T>,
    schedule: &NoiseSchedule,
    steps: usize,
    height: usize,
    width: usize,
    seed: u64,
    keep_trajectory: bool,
) -> Result<(DiffusionSample<T>, Vec<StepRecord>)> {
    if steps == 0 || steps > schedule.t_max() {
        return Err(FeraError::Domain(format!(
            "steps {steps} must be in 1..={}",
            schedule.t_max()
        )));
    }
    let ch = model.denoiser.config.channels;
    let taus = sub_schedule(schedule.t_max(), steps);
    let mut rng = keyed_rng(seed, "sample-init", &[]);
    let mut x = Field::<T>::standard_normal(ch, height, width, &mut rng);
    let mut trajectory = keep_trajectory.then(|| vec![x.clone()]);
    let mut records = Vec::with_capacity(steps);
    for i in (0..steps).rev() {
        let hi = taus[i];
        let lo = if i == 0 { 0 } else { taus[i - 1] };
        let (eps_hat, record) = model.denoise_routed(&x, hi, schedule.t_max())?;
        records.push(record);
        let x0_hat = x0_estimate(&x, &eps_hat, hi, schedule)?;
        let (ab_hi, ab_lo) = (schedule.alpha_bar(hi), schedule.alpha_bar(lo));
        let alpha_eff = ab_hi / ab_lo;
        let c0 = ab_lo.sqrt() * (1.0 - alpha_eff) / (1.0 - ab_hi);
        let ct = alpha_eff.sqrt() * (1.0 - ab_lo) / (1.0 - ab_hi);
        let mut next = x0_hat.scale(T::of_f64(c0)).add_scaled(T::of_f64(ct), &x)?;
        if lo > 0 {
            let var = (1.0 - ab_lo) / (1.0 - ab_hi) * (1.0 - alpha_eff);
            let mut zrng = keyed_rng(seed, "sample-step", &[hi as u64]);
            let z = Field::<T>::standard_normal(ch, height, width, &mut zrng);
            next = next.add_scaled(T::of_f64(var.sqrt()), &z)?;
        }
        x = next;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(x.clone());
        }
    }
    Ok((
        DiffusionSample {
            trajectory,
            final_field: x,
            seed,
        },
        records,
    ))
}
