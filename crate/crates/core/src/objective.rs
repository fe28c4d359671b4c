//! Training losses and the adapter training loop: denoising MSE, the
//! frequency-energy consistency loss aligning the bandwise profile of the
//! adapter correction with the residual, and their weighted combination
//! optimized with Adam.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::diffusion::{
    denoise, forward_corrupt, make_schedule, x0_estimate, NoiseSchedule, ScheduleKind,
};
use crate::error::{FeraError, Result};
use crate::field::Field;
use crate::real::Real;
use crate::rng::keyed_rng;
use crate::routing::{route_discrete, RoutedModel, RoutingMode, HARD_TAU};
use crate::spectrum::{decompose, fei_of, FeiVector, FilterBank, ENERGY_EPS};
use rand::Rng;
use rayon::prelude::*;

/// Guard inside band-norm square roots so an exactly-zero band cannot
/// produce an infinite derivative.
const BAND_NORM_EPS: f64 = 1e-30;

/// Mean squared error between an epsilon prediction and the true noise.
pub fn denoise_loss<T: Real>(eps_hat: &Field<T>, eps: &Field<T>) -> Result<f64> {
    eps_hat.check_same_shape(eps, "denoise_loss")?;
    let n = eps.len() as f64;
    let s: f64 = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / n)
}

/// The frequency-energy consistency value and its ingredients.
#[derive(Debug, Clone)]
pub struct FeclTerms<T: Real = f32> {
    pub delta: Field<T>,
    pub residual: Field<T>,
    /// Normalized bandwise L2 fractions of delta (unit square-sum).
    pub delta_profile: Vec<f64>,
    /// Normalized bandwise L2 fractions of the residual.
    pub residual_profile: Vec<f64>,
    pub weights: Vec<f64>,
    pub value: f64,
    /// Set when delta or residual has no usable energy; value is then 0.
    pub degenerate: bool,
}

fn band_profile(energies: &[f64]) -> Vec<f64> {
    let total: f64 = energies.iter().sum();
    energies
        .iter()
        .map(|e| ((e + BAND_NORM_EPS) / (total + energies.len() as f64 * BAND_NORM_EPS)).sqrt())
        .collect()
}

/// FECL: sum_k w_k (|delta_k|/|delta| - |r_k|/|r|)^2 with the bandwise
/// norms normalized so each profile has unit square-sum. Vanishing delta
/// or residual yields value 0 with the degenerate flag set.
pub fn fecl<T: Real>(
    z_lora: &Field<T>,
    z_base: &Field<T>,
    z_true: &Field<T>,
    bank: &FilterBank,
    weights: &FeiVector,
) -> Result<FeclTerms<T>> {
    z_lora.check_same_shape(z_base, "fecl z_base")?;
    z_lora.check_same_shape(z_true, "fecl z_true")?;
    if weights.len() != bank.n_bands() {
        return Err(FeraError::Shape(format!(
            "fecl weights length {} != {} bands",
            weights.len(),
            bank.n_bands()
        )));
    }
    let delta = z_lora.sub(z_base)?;
    let residual = z_lora.sub(z_true)?;
    let n = bank.n_bands();
    if delta.energy() <= ENERGY_EPS || residual.energy() <= ENERGY_EPS {
        return Ok(FeclTerms {
            delta,
            residual,
            delta_profile: vec![0.0; n],
            residual_profile: vec![0.0; n],
            weights: weights.components().to_vec(),
            value: 0.0,
            degenerate: true,
        });
    }
    let dp = band_profile(&decompose(&delta, bank)?.energies);
    let rp = band_profile(&decompose(&residual, bank)?.energies);
    let value = weights
        .components()
        .iter()
        .zip(dp.iter().zip(&rp))
        .map(|(&w, (&p, &q))| w * (p - q) * (p - q))
        .sum();
    Ok(FeclTerms {
        delta,
        residual,
        delta_profile: dp,
        residual_profile: rp,
        weights: weights.components().to_vec(),
        value,
        degenerate: false,
    })
}

/// Differentiable band decomposition on a tape.
fn decompose_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    taps: &[Vec<T>],
) -> Vec<NodeId> {
    let n = taps.len() + 1;
    let blurred: Vec<NodeId> = taps.iter().map(|t| tape.gauss_blur(x, t)).collect();
    let mut bands = Vec::with_capacity(n);
    bands.push(blurred[0]);
    for k in 1..n - 1 {
        bands.push(tape.sub(blurred[k], blurred[k - 1]));
    }
    bands.push(tape.sub(x, blurred[n - 2]));
    bands
}

/// Differentiable unit-square-sum band profile of a field node.
fn band_profile_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    taps: &[Vec<T>],
) -> NodeId {
    let bands = decompose_on_tape(tape, x, taps);
    let eps = tape.constant(Tensor::vector(vec![
        T::of_f64(BAND_NORM_EPS);
        bands.len()
    ]));
    let energies: Vec<NodeId> = bands.iter().map(|&b| tape.sum_sq(b)).collect();
    let stacked0 = tape.stack_scalars(&energies);
    let stacked = tape.add(stacked0, eps);
    let ones = vec![T::one(); bands.len()];
    let total = tape.dot_const(stacked, &ones);
    let norms = tape.sqrt(stacked);
    let denom = tape.sqrt(total);
    tape.div_broadcast(norms, denom)
}

/// Differentiable FECL given the adapted clean-latent estimate node; the
/// base estimate and the target are constants (the base model is frozen).
pub fn fecl_on_tape<T: Real>(
    tape: &mut Tape<T>,
    z_lora: NodeId,
    z_base: &Field<T>,
    z_true: &Field<T>,
    taps: &[Vec<T>],
    weights: &[T],
) -> NodeId {
    let zb = tape.constant(Tensor::from_field(z_base));
    let zt = tape.constant(Tensor::from_field(z_true));
    let delta = tape.sub(z_lora, zb);
    let residual = tape.sub(z_lora, zt);
    let dp = band_profile_on_tape(tape, delta, taps);
    let rp = band_profile_on_tape(tape, residual, taps);
    let diff = tape.sub(dp, rp);
    let sq = tape.mul(diff, diff);
    tape.dot_const(sq, weights)
}

/// How the per-band FECL weights are chosen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeclWeighting {
    /// FEI of the noisy training latent x_t (the default).
    FeiXt,
    /// FEI of the clean target x_0.
    FeiX0,
    Uniform,
}

impl FeclWeighting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fei_xt" => Ok(Self::FeiXt),
            "fei_x0" => Ok(Self::FeiX0),
            "uniform" => Ok(Self::Uniform),
            other => Err(FeraError::Config(format!(
                "unknown fecl weighting `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for FeclWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::FeiXt => "fei_xt",
            Self::FeiX0 => "fei_x0",
            Self::Uniform => "uniform",
        };
        write!(f, "{s}")
    }
}

/// Which parameters a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Train the base denoiser; adapters and router untouched.
    Pretrain,
    /// Train adapters and router; base frozen.
    Adapt,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "adapt" => Ok(Self::Adapt),
            other => Err(FeraError::Config(format!("unknown train mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Pretrain => write!(f, "pretrain"),
            Self::Adapt => write!(f, "adapt"),
        }
    }
}

/// Everything a training run needs to be reproducible.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda_f: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub val_every: usize,
    pub fecl_weights: FeclWeighting,
    pub schedule: ScheduleKind,
    pub t_total: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Adapt,
            lambda_f: 0.1,
            lr: 1e-3,
            steps: 2000,
            batch: 8,
            seed: 0,
            grad_clip: 1.0,
            val_every: 200,
            fecl_weights: FeclWeighting::FeiXt,
            schedule: ScheduleKind::Linear,
            t_total: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_f < 0.0 {
            return Err(FeraError::Config(format!(
                "lambda_f {} must be >= 0",
                self.lambda_f
            )));
        }
        if self.lr <= 0.0 || self.batch == 0 || self.val_every == 0 {
            return Err(FeraError::Config(
                "lr, batch and val_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One training step's logged quantities.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: usize,
    pub loss_denoise: f64,
    pub loss_fecl: f64,
    pub loss_total: f64,
    pub routing_entropy: f64,
}

/// Validation-loss checkpoints along the run.
#[derive(Debug, Clone)]
pub struct ValPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepStats>,
    pub val_points: Vec<ValPoint>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub degenerate_fecl_elements: usize,
    pub degenerate_fei_elements: usize,
    pub trainable_params: usize,
}

/// Output of the per-element differentiable loss build.
struct ElementResult<T: Real> {
    loss_denoise: f64,
    loss_fecl: f64,
    loss_total: f64,
    entropy: f64,
    degenerate_fecl: bool,
    degenerate_fei: bool,
    grads: Vec<Vec<T>>,
}

/// Builds the loss graph for one training element and runs backward.
/// The trainable-leaf order is fixed: pretrain registers
/// (weight, bias, proj) per denoiser layer; adapt registers (down, up) per
/// expert and layer followed by the router (w1, b1, w2, b2).
fn element_backward<T: Real>(
    model: &RoutedModel<T>,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    x0: &Field<T>,
    t: usize,
    eps: &Field<T>,
) -> Result<ElementResult<T>> {
    let x_t = forward_corrupt(x0, t, schedule, eps)?;
    let mut tape: Tape<T> = Tape::new();
    let mut leaf_ids: Vec<NodeId> = Vec::new();
    let mut degenerate_fei = false;
    let mut entropy = 0.0;

    let (out, fecl_node, loss_dn_node) = match cfg.mode {
        TrainMode::Pretrain => {
            let nodes = model.denoiser.to_tape(&mut tape, true);
            for li in 0..nodes.weights.len() {
                leaf_ids.push(nodes.weights[li]);
                leaf_ids.push(nodes.biases[li]);
                leaf_ids.push(nodes.projs[li]);
            }
            let out = model
                .denoiser
                .forward_on_tape(&mut tape, &nodes, &x_t, t, None)?;
            let loss = tape.mse_vs_const(out, Tensor::from_field(eps));
            (out, None, loss)
        }
        TrainMode::Adapt => {
            let experts = model.experts.as_ref().ok_or_else(|| {
                FeraError::Config("adapt mode requires an expert bank".into())
            })?;
            let dn_nodes = model.denoiser.to_tape(&mut tape, false);
            let ex_nodes = experts.to_tape(&mut tape, true);
            for mi in 0..experts.m() {
                for li in 0..experts.attachment.len() {
                    leaf_ids.push(ex_nodes.downs[mi][li]);
                    leaf_ids.push(ex_nodes.ups[mi][li]);
                }
            }
            let router_trainable = matches!(
                model.mode,
                RoutingMode::FeiSoft | RoutingMode::FeiHard | RoutingMode::TimestepSoft
            );
            let r_nodes = model.router.to_tape(&mut tape, router_trainable);
            if router_trainable {
                leaf_ids.push(r_nodes.w1);
                leaf_ids.push(r_nodes.b1);
                leaf_ids.push(r_nodes.w2);
                leaf_ids.push(r_nodes.b2);
            }
            let alpha = match model.mode {
                RoutingMode::FeiSoft | RoutingMode::FeiHard => {
                    let tau = if model.mode == RoutingMode::FeiHard {
                        HARD_TAU
                    } else {
                        model.router.tau
                    };
                    let input: Vec<T> = match fei_of(&x_t, &model.bank) {
                        Ok(e) => e.components().iter().map(|&v| T::of_f64(v)).collect(),
                        Err(FeraError::DegenerateInput(_)) => {
                            degenerate_fei = true;
                            vec![T::of_f64(1.0 / model.bank.n_bands() as f64); model.bank.n_bands()]
                        }
                        Err(e) => return Err(e),
                    };
                    model.router.route_on_tape(&mut tape, &r_nodes, &input, tau)
                }
                RoutingMode::TimestepSoft => {
                    let v = T::of_f64(t as f64 / schedule.t_max() as f64);
                    let input = vec![v; model.router.n_inputs];
                    model
                        .router
                        .route_on_tape(&mut tape, &r_nodes, &input, model.router.tau)
                }
                RoutingMode::TimestepHard => {
                    let w = route_discrete(&model.thresholds, t, schedule.t_max())?;
                    let a: Vec<T> = w.alpha().iter().map(|&v| T::of_f64(v)).collect();
                    tape.constant(Tensor::vector(a))
                }
                RoutingMode::Base => {
                    return Err(FeraError::Config(
                        "adapt mode with base routing trains nothing".into(),
                    ))
                }
            };
            entropy = {
                let a = &tape.value(alpha).data;
                -a.iter()
                    .map(|v| v.as_f64())
                    .filter(|&v| v > 0.0)
                    .map(|v| v * v.ln())
                    .sum::<f64>()
            };
            let deltas = experts.blended_delta_nodes(&mut tape, &ex_nodes, alpha);
            let out =
                model
                    .denoiser
                    .forward_on_tape(&mut tape, &dn_nodes, &x_t, t, Some(&deltas))?;
            let loss = tape.mse_vs_const(out, Tensor::from_field(eps));

            let fecl_node = if cfg.lambda_f > 0.0 {
                // clean-latent operands: x0 estimates of the adapted and
                // frozen-base predictions against the true x0
                let eps_base = denoise(&model.denoiser, &x_t, t, None)?;
                let z_base = x0_estimate(&x_t, &eps_base, t, schedule)?;
                let ab = schedule.alpha_bar(t);
                let inv = T::of_f64(1.0 / ab.sqrt());
                let coef = T::of_f64(-(1.0 - ab).sqrt() / ab.sqrt());
                let scaled_eps = tape.scale(out, coef);
                let z_lora = tape.add_const(scaled_eps, Tensor::from_field(&x_t.scale(inv)));
                // degeneracy: neutral adapters give a vanishing correction
                let zl = tape.value(z_lora).to_field();
                let delta_energy = zl.sub(&z_base)?.energy();
                let resid_energy = zl.sub(x0)?.energy();
                if delta_energy <= ENERGY_EPS || resid_energy <= ENERGY_EPS {
                    None
                } else {
                    let w = match cfg.fecl_weights {
                        FeclWeighting::Uniform => FeiVector::uniform(model.bank.n_bands()),
                        FeclWeighting::FeiXt => fei_of(&x_t, &model.bank)
                            .unwrap_or_else(|_| FeiVector::uniform(model.bank.n_bands())),
                        FeclWeighting::FeiX0 => fei_of(x0, &model.bank)
                            .unwrap_or_else(|_| FeiVector::uniform(model.bank.n_bands())),
                    };
                    let wt: Vec<T> = w.components().iter().map(|&v| T::of_f64(v)).collect();
                    let (_, h, wdt) = x0.shape();
                    let taps = model.bank.taps_for::<T>(h, wdt)?;
                    Some(fecl_on_tape(&mut tape, z_lora, &z_base, x0, &taps, &wt))
                }
            } else {
                None
            };
            (out, fecl_node, loss)
        }
    };
    let _ = out;

    let total = match fecl_node {
        Some(f) => {
            let scaled = tape.scale(f, T::of_f64(cfg.lambda_f));
            tape.add(loss_dn_node, scaled)
        }
        None => loss_dn_node,
    };
    let grads = tape.backward(total);
    let grad_vecs = leaf_ids
        .iter()
        .map(|&id| grads.get(&tape, id).data)
        .collect();
    let loss_denoise = tape.value(loss_dn_node).item().as_f64();
    let loss_fecl = fecl_node.map_or(0.0, |f| tape.value(f).item().as_f64());
    Ok(ElementResult {
        loss_denoise,
        loss_fecl,
        loss_total: tape.value(total).item().as_f64(),
        entropy,
        degenerate_fecl: cfg.mode == TrainMode::Adapt && cfg.lambda_f > 0.0 && fecl_node.is_none(),
        degenerate_fei,
        grads: grad_vecs,
    })
}

/// Mutable views over the trainable parameters, in the fixed leaf order.
fn trainable_slices<T: Real>(
    model: &mut RoutedModel<T>,
    mode: TrainMode,
) -> Vec<&mut Vec<T>> {
    let mut out: Vec<&mut Vec<T>> = Vec::new();
    match mode {
        TrainMode::Pretrain => {
            for l in &mut model.denoiser.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
                out.push(&mut l.proj);
            }
        }
        TrainMode::Adapt => {
            let experts = model.experts.as_mut().expect("adapt mode has experts");
            for ex in &mut experts.experts {
                for l in &mut ex.layers {
                    out.push(&mut l.down);
                    out.push(&mut l.up);
                }
            }
            if matches!(
                model.mode,
                RoutingMode::FeiSoft | RoutingMode::FeiHard | RoutingMode::TimestepSoft
            ) {
                out.push(&mut model.router.w1);
                out.push(&mut model.router.b1);
                out.push(&mut model.router.w2);
                out.push(&mut model.router.b2);
            }
        }
    }
    out
}

/// Adam with global-norm gradient clipping.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(shapes: &[usize], lr: f64) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step<T: Real>(&mut self, params: &mut [&mut Vec<T>], grads: &[Vec<T>], clip: f64) {
        self.t += 1;
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for i in 0..g.len() {
                let gv = g[i].as_f64() * scale;
                let m = &mut self.m[slot][i];
                let v = &mut self.v[slot][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                p[i] = T::of_f64(p[i].as_f64() - upd);
            }
        }
    }
}

/// Validation denoising loss with deterministic per-index (t, noise) draws.
pub fn validation_loss<T: Real>(
    model: &RoutedModel<T>,
    schedule: &NoiseSchedule,
    val_set: &[Field<T>],
    seed: u64,
) -> Result<f64> {
    let losses: Vec<f64> = val_set
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let (c, h, w) = x0.shape();
            let mut rng = keyed_rng(seed, "val", &[i as u64]);
            let t = rng.gen_range(1..=schedule.t_max());
            let eps = Field::<T>::standard_normal(c, h, w, &mut rng);
            let x_t = forward_corrupt(x0, t, schedule, &eps)?;
            let (eps_hat, _) = model.denoise_routed(&x_t, t, schedule.t_max())?;
            denoise_loss(&eps_hat, &eps)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Run the training loop, mutating the model's trainable parameters in
/// place. Deterministic per (config, seed): batches, timesteps and noise
/// are keyed streams, and gradient reduction is in element order.
pub fn train<T: Real>(
    model: &mut RoutedModel<T>,
    cfg: &TrainConfig,
    train_set: &[Field<T>],
    val_set: &[Field<T>],
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(FeraError::Config("empty train or validation set".into()));
    }
    let schedule = make_schedule(cfg.schedule, cfg.t_total)?;
    let trainable_params: usize = {
        let slices = trainable_slices(model, cfg.mode);
        slices.iter().map(|s| s.len()).sum()
    };
    let shapes: Vec<usize> = {
        let slices = trainable_slices(model, cfg.mode);
        slices.iter().map(|s| s.len()).collect()
    };
    let mut adam = Adam::new(&shapes, cfg.lr);
    let initial_val_loss = validation_loss(model, &schedule, val_set, cfg.seed)?;
    let mut report = TrainReport {
        steps: Vec::with_capacity(cfg.steps),
        val_points: vec![ValPoint {
            step: 0,
            loss: initial_val_loss,
        }],
        initial_val_loss,
        final_val_loss: initial_val_loss,
        degenerate_fecl_elements: 0,
        degenerate_fei_elements: 0,
        trainable_params,
    };
    for step in 0..cfg.steps {
        let mut brng = keyed_rng(cfg.seed, "batch", &[step as u64]);
        let picks: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| {
                (
                    brng.gen_range(0..train_set.len()),
                    brng.gen_range(1..=schedule.t_max()),
                )
            })
            .collect();
        let results: Vec<ElementResult<T>> = picks
            .par_iter()
            .enumerate()
            .map(|(i, &(idx, t))| {
                let x0 = &train_set[idx];
                let (c, h, w) = x0.shape();
                let mut nrng = keyed_rng(cfg.seed, "train-noise", &[step as u64, i as u64]);
                let eps = Field::<T>::standard_normal(c, h, w, &mut nrng);
                element_backward(model, cfg, &schedule, x0, t, &eps)
            })
            .collect::<Result<_>>()?;

        // deterministic reduction in element-index order
        let inv_b = T::of_f64(1.0 / cfg.batch as f64);
        let mut grads: Vec<Vec<T>> = shapes.iter().map(|&n| vec![T::zero(); n]).collect();
        let mut stats = StepStats {
            step,
            loss_denoise: 0.0,
            loss_fecl: 0.0,
            loss_total: 0.0,
            routing_entropy: 0.0,
        };
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a = *a + *v * inv_b;
                }
            }
            stats.loss_denoise += r.loss_denoise / cfg.batch as f64;
            stats.loss_fecl += r.loss_fecl / cfg.batch as f64;
            stats.loss_total += r.loss_total / cfg.batch as f64;
            stats.routing_entropy += r.entropy / cfg.batch as f64;
            report.degenerate_fecl_elements += r.degenerate_fecl as usize;
            report.degenerate_fei_elements += r.degenerate_fei as usize;
        }
        {
            let mut slices = trainable_slices(model, cfg.mode);
            adam.step(&mut slices, &grads, cfg.grad_clip);
        }
        report.steps.push(stats);
        if (step + 1) % cfg.val_every == 0 && step + 1 < cfg.steps {
            let loss = validation_loss(model, &schedule, val_set, cfg.seed)?;
            report.val_points.push(ValPoint {
                step: step + 1,
                loss,
            });
        }
    }
    let final_loss = validation_loss(model, &schedule, val_set, cfg.seed)?;
    report.val_points.push(ValPoint {
        step: cfg.steps,
        loss: final_loss,
    });
    report.final_val_loss = final_loss;
    Ok(report)
}

/// Loss value and gradient vectors (in leaf order) for one element; used
/// by the gradient-check suite and equivalence tests.
pub fn single_element_loss<T: Real>(
    model: &RoutedModel<T>,
    cfg: &TrainConfig,
    x0: &Field<T>,
    t: usize,
    eps: &Field<T>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let schedule = make_schedule(cfg.schedule, cfg.t_total)?;
    let r = element_backward(model, cfg, &schedule, x0, t, eps)?;
    Ok((r.loss_total, r.grads))
}

/// Single-step gradient extraction used by equivalence tests: returns the
/// flat gradient vectors of one batch element in leaf order.
pub fn single_element_grads<T: Real>(
    model: &RoutedModel<T>,
    cfg: &TrainConfig,
    x0: &Field<T>,
    t: usize,
    eps: &Field<T>,
) -> Result<Vec<Vec<T>>> {
    Ok(single_element_loss(model, cfg, x0, t, eps)?.1)
}
