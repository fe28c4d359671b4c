//! Routing of adapter experts: the soft frequency router (a small
//! two-layer MLP over the FEI with tempered softmax), the timestep-keyed
//! soft variant, and the discrete threshold baseline that hard-switches
//! experts by step index.

use crate::adapters::ExpertBank;
use crate::autodiff::{softmax_temp_eval, NodeId, Tape, Tensor};
use crate::diffusion::{denoise, DenoiserParams};
use crate::error::{FeraError, Result};
use crate::field::Field;
use crate::linalg::{frobenius, matvec};
use crate::real::Real;
use crate::rng::keyed_rng;
use crate::spectrum::{fei_of, FeiVector, FilterBank};

/// Routing softness fixed by the method.
pub const DEFAULT_TAU: f64 = 0.7;
/// Temperature used for the hard (argmax-like) limit of the soft router.
pub const HARD_TAU: f64 = 0.01;
pub const DEFAULT_ROUTER_HIDDEN: usize = 16;

/// Two-layer router MLP (n_inputs -> hidden -> m) with temperature tau.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T: Real = f32> {
    pub n_inputs: usize,
    pub hidden: usize,
    pub m: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub tau: f64,
}

impl<T: Real> RouterParams<T> {
    pub fn init(n_inputs: usize, hidden: usize, m: usize, tau: f64, seed: u64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(FeraError::Domain(format!("tau {tau} must be > 0")));
        }
        if n_inputs == 0 || hidden == 0 || m == 0 {
            return Err(FeraError::Domain("router dims must be positive".into()));
        }
        let mut rng = keyed_rng(seed, "router-init", &[]);
        let s1 = T::of_f64(1.0 / (n_inputs as f64).sqrt());
        let w1 = (0..hidden * n_inputs)
            .map(|_| T::std_normal(&mut rng) * s1)
            .collect();
        let s2 = T::of_f64(1.0 / (hidden as f64).sqrt());
        let w2 = (0..m * hidden)
            .map(|_| T::std_normal(&mut rng) * s2)
            .collect();
        Ok(Self {
            n_inputs,
            hidden,
            m,
            w1,
            b1: vec![T::zero(); hidden],
            w2,
            b2: vec![T::zero(); m],
            tau,
        })
    }

    /// All-zero router: uniform weights for every input.
    pub fn zeros(n_inputs: usize, hidden: usize, m: usize, tau: f64) -> Self {
        Self {
            n_inputs,
            hidden,
            m,
            w1: vec![T::zero(); hidden * n_inputs],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); m * hidden],
            b2: vec![T::zero(); m],
            tau,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn logits(&self, input: &[T]) -> Vec<T> {
        let mut h = matvec(&self.w1, input, self.hidden, self.n_inputs);
        for (v, b) in h.iter_mut().zip(&self.b1) {
            *v = (*v + *b).tanh();
        }
        let mut z = matvec(&self.w2, &h, self.m, self.hidden);
        for (v, b) in z.iter_mut().zip(&self.b2) {
            *v = *v + *b;
        }
        z
    }

    /// Upper bound on the Lipschitz constant of the logit map (tanh has
    /// unit slope bound; Frobenius norms bound the operator norms).
    pub fn lipschitz_bound(&self) -> f64 {
        frobenius(&self.w1) * frobenius(&self.w2)
    }

    pub fn cast<U: Real>(&self) -> RouterParams<U> {
        RouterParams {
            n_inputs: self.n_inputs,
            hidden: self.hidden,
            m: self.m,
            w1: self.w1.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            b1: self.b1.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            w2: self.w2.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            b2: self.b2.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            tau: self.tau,
        }
    }
}

/// Softmax blend weights over the M experts.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    alpha: Vec<f64>,
}

impl RoutingWeights {
    /// Validated constructor: non-negative, summing to 1 within 1e-6.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        let s: f64 = alpha.iter().sum();
        if alpha.iter().any(|&v| v < 0.0) || (s - 1.0).abs() >= 1e-6 {
            return Err(FeraError::Domain(format!(
                "routing weights not on the simplex (sum {s})"
            )));
        }
        Ok(Self { alpha })
    }

    /// For internal math that works with unnormalized coefficient vectors.
    pub fn new_unchecked(alpha: Vec<f64>) -> Self {
        Self { alpha }
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            alpha: vec![1.0 / m as f64; m],
        }
    }

    pub fn one_hot(m: usize, index: usize) -> Self {
        let mut alpha = vec![0.0; m];
        alpha[index] = 1.0;
        Self { alpha }
    }

    #[inline]
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.alpha.len()
    }
    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn is_simplex(&self) -> bool {
        self.alpha.iter().all(|&v| v >= 0.0)
            && (self.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .alpha
            .iter()
            .filter(|&&a| a > 0.0)
            .map(|&a| a * a.ln())
            .sum::<f64>()
    }
}

fn route_with_input<T: Real>(params: &RouterParams<T>, input: &[T]) -> Result<RoutingWeights> {
    let z = params.logits(input);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(FeraError::Numeric("non-finite routing logits".into()));
    }
    let alpha = softmax_temp_eval(&z, T::of_f64(params.tau));
    Ok(RoutingWeights::new_unchecked(
        alpha.iter().map(|v| v.as_f64()).collect(),
    ))
}

/// Soft frequency routing: alpha = softmax(MLP(e) / tau).
pub fn route_soft<T: Real>(params: &RouterParams<T>, e: &FeiVector) -> Result<RoutingWeights> {
    if e.len() != params.n_inputs {
        return Err(FeraError::Shape(format!(
            "FEI length {} != router inputs {}",
            e.len(),
            params.n_inputs
        )));
    }
    let s: f64 = e.components().iter().sum();
    if e.components().iter().any(|&v| v < -1e-9) || (s - 1.0).abs() > 1e-4 {
        return Err(FeraError::Domain(format!(
            "router input is not a simplex vector (sum {s})"
        )));
    }
    let input: Vec<T> = e.components().iter().map(|&v| T::of_f64(v)).collect();
    route_with_input(params, &input)
}

/// Timestep-keyed ablation: the scalar t/T is broadcast across the router
/// input width in place of the FEI.
pub fn route_timestep_soft<T: Real>(
    params: &RouterParams<T>,
    t: usize,
    t_total: usize,
) -> Result<RoutingWeights> {
    if t > t_total {
        return Err(FeraError::Index(format!(
            "timestep {t} out of range 0..={t_total}"
        )));
    }
    let v = T::of_f64(t as f64 / t_total as f64);
    let input = vec![v; params.n_inputs];
    route_with_input(params, &input)
}

/// Hard threshold routing over timesteps: expert 0 handles the earliest
/// (highest-noise) steps and indices increase as t decreases. A step equal
/// to a threshold belongs to the later (lower-noise) interval.
pub fn route_discrete(thresholds: &[usize], t: usize, t_total: usize) -> Result<RoutingWeights> {
    if thresholds.is_empty()
        || thresholds.windows(2).any(|w| w[0] >= w[1])
        || thresholds[0] == 0
        || *thresholds.last().unwrap() >= t_total
    {
        return Err(FeraError::Domain(format!(
            "thresholds {thresholds:?} must be strictly increasing within (0, {t_total})"
        )));
    }
    if t > t_total {
        return Err(FeraError::Index(format!(
            "timestep {t} out of range 0..={t_total}"
        )));
    }
    let m = thresholds.len() + 1;
    let expert = thresholds.iter().filter(|&&th| th >= t).count();
    Ok(RoutingWeights::one_hot(m, expert))
}

/// Evenly spaced default thresholds for M experts over T steps.
pub fn default_thresholds(m: usize, t_total: usize) -> Vec<usize> {
    (1..m).map(|j| j * t_total / m).collect()
}

/// How expert blend weights are produced during sampling and training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingMode {
    /// FEI-driven soft routing (the method's default).
    FeiSoft,
    /// FEI-driven routing in the hard limit (tau -> 0).
    FeiHard,
    /// Learned soft routing keyed by normalized timestep.
    TimestepSoft,
    /// Discrete threshold switching keyed by timestep.
    TimestepHard,
    /// No adapters applied at all.
    Base,
}

impl RoutingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fei_soft" => Ok(Self::FeiSoft),
            "fei_hard" => Ok(Self::FeiHard),
            "timestep_soft" => Ok(Self::TimestepSoft),
            "timestep_hard" => Ok(Self::TimestepHard),
            "base" | "none" => Ok(Self::Base),
            other => Err(FeraError::Config(format!("unknown routing mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::FeiSoft => "fei_soft",
            Self::FeiHard => "fei_hard",
            Self::TimestepSoft => "timestep_soft",
            Self::TimestepHard => "timestep_hard",
            Self::Base => "base",
        };
        write!(f, "{s}")
    }
}

/// Denoiser plus everything needed to route experts at each step.
#[derive(Debug, Clone)]
pub struct RoutedModel<T: Real = f32> {
    pub denoiser: DenoiserParams<T>,
    pub bank: FilterBank,
    pub router: RouterParams<T>,
    pub experts: Option<ExpertBank<T>>,
    pub mode: RoutingMode,
    pub thresholds: Vec<usize>,
}

/// One sampling step's routing diagnostics.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub fei: Vec<f64>,
    pub alpha: Vec<f64>,
    pub degenerate_fei: bool,
}

impl<T: Real> RoutedModel<T> {
    /// Routing weights for the current latent/timestep; a degenerate
    /// (zero-energy) FEI falls back to uniform weights.
    pub fn routing_for(
        &self,
        x_t: &Field<T>,
        t: usize,
        t_total: usize,
    ) -> Result<(Vec<f64>, RoutingWeights, bool)> {
        let m = self.experts.as_ref().map(ExpertBank::m).unwrap_or(self.router.m);
        match self.mode {
            RoutingMode::Base => Ok((Vec::new(), RoutingWeights::uniform(m), false)),
            RoutingMode::FeiSoft | RoutingMode::FeiHard => {
                let tau = if self.mode == RoutingMode::FeiHard {
                    HARD_TAU
                } else {
                    self.router.tau
                };
                let router = RouterParams {
                    tau,
                    ..self.router.clone()
                };
                match fei_of(x_t, &self.bank) {
                    Ok(e) => {
                        let w = route_soft(&router, &e)?;
                        Ok((e.components().to_vec(), w, false))
                    }
                    Err(FeraError::DegenerateInput(_)) => {
                        Ok((Vec::new(), RoutingWeights::uniform(m), true))
                    }
                    Err(e) => Err(e),
                }
            }
            RoutingMode::TimestepSoft => {
                let w = route_timestep_soft(&self.router, t, t_total)?;
                Ok((Vec::new(), w, false))
            }
            RoutingMode::TimestepHard => {
                let w = route_discrete(&self.thresholds, t, t_total)?;
                Ok((Vec::new(), w, false))
            }
        }
    }

    /// Epsilon prediction with routing applied, plus the step diagnostics.
    pub fn denoise_routed(
        &self,
        x_t: &Field<T>,
        t: usize,
        t_total: usize,
    ) -> Result<(Field<T>, StepRecord)> {
        match (&self.experts, &self.mode) {
            (None, _) | (_, RoutingMode::Base) => {
                let eps = denoise(&self.denoiser, x_t, t, None)?;
                Ok((
                    eps,
                    StepRecord {
                        t,
                        fei: Vec::new(),
                        alpha: Vec::new(),
                        degenerate_fei: false,
                    },
                ))
            }
            (Some(bankx), _) => {
                let (mut fei, weights, degenerate) = self.routing_for(x_t, t, t_total)?;
                if fei.is_empty() && !degenerate {
                    // timestep-keyed modes do not consume the FEI, but the
                    // trace still records it for diagnostics
                    if let Ok(e) = fei_of(x_t, &self.bank) {
                        fei = e.components().to_vec();
                    }
                }
                let deltas = bankx.blended_delta_weights(&weights)?;
                let eps = denoise(&self.denoiser, x_t, t, Some(&deltas))?;
                Ok((
                    eps,
                    StepRecord {
                        t,
                        fei,
                        alpha: weights.alpha().to_vec(),
                        degenerate_fei: degenerate,
                    },
                ))
            }
        }
    }
}

/// FEI and routing weights recorded over one full sampling run.
pub fn routing_trace<T: Real>(
    model: &RoutedModel<T>,
    schedule: &crate::diffusion::NoiseSchedule,
    steps: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<StepRecord>> {
    let (_, records) = crate::diffusion::sample(model, schedule, steps, height, width, seed, false)?;
    Ok(records)
}

/// Largest adjacent-step max-norm change in routing weights over a trace.
pub fn max_adjacent_jump(records: &[StepRecord]) -> f64 {
    records
        .windows(2)
        .map(|w| {
            w[0].alpha
                .iter()
                .zip(&w[1].alpha)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Tape handles for the router parameters.
pub struct RouterNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl<T: Real> RouterParams<T> {
    pub fn to_tape(&self, tape: &mut Tape<T>, trainable: bool) -> RouterNodes {
        let w1 = Tensor::new(vec![self.hidden, self.n_inputs], self.w1.clone());
        let b1 = Tensor::vector(self.b1.clone());
        let w2 = Tensor::new(vec![self.m, self.hidden], self.w2.clone());
        let b2 = Tensor::vector(self.b2.clone());
        if trainable {
            RouterNodes {
                w1: tape.param(w1),
                b1: tape.param(b1),
                w2: tape.param(w2),
                b2: tape.param(b2),
            }
        } else {
            RouterNodes {
                w1: tape.constant(w1),
                b1: tape.constant(b1),
                w2: tape.constant(w2),
                b2: tape.constant(b2),
            }
        }
    }

    /// Differentiable routing weights for a fixed input vector.
    pub fn route_on_tape(
        &self,
        tape: &mut Tape<T>,
        nodes: &RouterNodes,
        input: &[T],
        tau: f64,
    ) -> NodeId {
        let inp = tape.constant(Tensor::vector(input.to_vec()));
        let h0 = tape.matvec(nodes.w1, inp, self.hidden, self.n_inputs);
        let h1 = tape.add(h0, nodes.b1);
        let h = tape.tanh(h1);
        let z0 = tape.matvec(nodes.w2, h, self.m, self.hidden);
        let z = tape.add(z0, nodes.b2);
        tape.softmax_temp(z, T::of_f64(tau))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn fixed_logit_router(logits: &[f64], tau: f64) -> RouterParams<f64> {
        // zero weights force the hidden layer to zero; biases select logits
        let mut p = RouterParams::<f64>::zeros(3, 4, logits.len(), tau);
        p.b2 = logits.to_vec();
        p
    }

    #[test]
    fn zero_router_is_uniform() {
        let p = RouterParams::<f64>::zeros(3, 16, 4, DEFAULT_TAU);
        let e = FeiVector::uniform(3);
        let w = route_soft(&p, &e).unwrap();
        for &a in w.alpha() {
            assert!((a - 0.25).abs() < 1e-12);
        }
        assert!(w.is_simplex());
    }

    #[test]
    fn low_temperature_sharpens() {
        let p = fixed_logit_router(&[2.0, 0.0, 0.0], 0.01);
        let e = FeiVector::uniform(3);
        let w = route_soft(&p, &e).unwrap();
        assert!(w.alpha()[0] > 0.999, "{:?}", w.alpha());
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        let p = fixed_logit_router(&[1.0, 0.5, 0.0], 0.7);
        let e = FeiVector::uniform(3);
        let w = route_soft(&p, &e).unwrap();
        // direct softmax evaluation
        let exps: Vec<f64> = [1.0f64, 0.5, 0.0].iter().map(|z| (z / 0.7).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (a, b) in w.alpha().iter().zip(&exps) {
            assert!((a - b / s).abs() < 1e-9);
        }
    }

    #[test]
    fn tau_monotone_sharpness() {
        let taus = [0.05, 0.2, 0.7, 2.0, 10.0];
        let mut prev_max = f64::INFINITY;
        for &tau in &taus {
            let p = fixed_logit_router(&[1.2, 0.3, -0.4], tau);
            let w = route_soft(&p, &FeiVector::uniform(3)).unwrap();
            let mx = w.alpha().iter().cloned().fold(0.0, f64::max);
            assert!(mx <= prev_max + 1e-12, "tau {tau}: {mx} > {prev_max}");
            prev_max = mx;
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut p = RouterParams::<f64>::init(3, 8, 3, DEFAULT_TAU, 4).unwrap();
        let e = FeiVector::new(vec![0.6, 0.3, 0.1]);
        let w = route_soft(&p, &e).unwrap();
        // swap output rows 0 and 2
        for h in 0..8 {
            p.w2.swap(h, 2 * 8 + h);
        }
        p.b2.swap(0, 2);
        let w2 = route_soft(&p, &e).unwrap();
        assert!((w.alpha()[0] - w2.alpha()[2]).abs() < 1e-12);
        assert!((w.alpha()[2] - w2.alpha()[0]).abs() < 1e-12);
        assert!((w.alpha()[1] - w2.alpha()[1]).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_simplex_input() {
        let p = RouterParams::<f64>::zeros(3, 4, 2, DEFAULT_TAU);
        let bad = FeiVector::new(vec![0.9, 0.9, 0.9]);
        assert!(matches!(
            route_soft(&p, &bad),
            Err(FeraError::Domain(_))
        ));
    }

    #[test]
    fn discrete_high_noise_expert_first() {
        let t_total = 100;
        let w = route_discrete(&[50], 99, t_total).unwrap();
        assert_eq!(w.alpha(), &[1.0, 0.0]);
        let w = route_discrete(&[50], 10, t_total).unwrap();
        assert_eq!(w.alpha(), &[0.0, 1.0]);
    }

    #[test]
    fn discrete_tie_goes_to_later_interval() {
        let w = route_discrete(&[50], 50, 100).unwrap();
        assert_eq!(w.alpha(), &[0.0, 1.0]);
    }

    #[test]
    fn discrete_interval_lengths_exact() {
        let t_total = 99;
        let thresholds = [33, 66];
        let mut counts = [0usize; 3];
        for t in 1..=t_total {
            let w = route_discrete(&thresholds, t, t_total).unwrap();
            let idx = w.alpha().iter().position(|&a| a == 1.0).unwrap();
            counts[idx] += 1;
        }
        assert_eq!(counts, [33, 33, 33]);
    }

    #[test]
    fn discrete_out_of_range() {
        assert!(matches!(
            route_discrete(&[50], 101, 100),
            Err(FeraError::Index(_))
        ));
        assert!(matches!(
            route_discrete(&[0], 5, 100),
            Err(FeraError::Domain(_))
        ));
        assert!(matches!(
            route_discrete(&[60, 50], 5, 100),
            Err(FeraError::Domain(_))
        ));
    }

    #[test]
    fn timestep_router_zero_is_uniform_and_deterministic() {
        let p = RouterParams::<f64>::zeros(3, 16, 3, DEFAULT_TAU);
        for t in [0usize, 13, 50, 100] {
            let w = route_timestep_soft(&p, t, 100).unwrap();
            for &a in w.alpha() {
                assert!((a - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let p2 = RouterParams::<f64>::init(3, 16, 3, DEFAULT_TAU, 5).unwrap();
        let a = route_timestep_soft(&p2, 42, 100).unwrap();
        let b = route_timestep_soft(&p2, 42, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_logit_router_sweeps_monotonically() {
        // hand-built router whose first logit increases with t/T:
        // hidden = tanh(x) with positive weights, w2 row 0 positive, row 1 negative
        let mut p = RouterParams::<f64>::zeros(3, 4, 2, DEFAULT_TAU);
        p.w1.iter_mut().for_each(|v| *v = 0.5);
        for h in 0..4 {
            p.w2[h] = 1.0; // expert 0 logit grows with input
            p.w2[4 + h] = -1.0;
        }
        let mut prev = -1.0;
        for t in 0..=50 {
            let w = route_timestep_soft(&p, t, 50).unwrap();
            assert!(w.alpha()[0] >= prev - 1e-12);
            prev = w.alpha()[0];
        }
        assert!(prev > 0.5);
    }

    #[test]
    fn route_soft_grad_check() {
        let p = RouterParams::<f64>::init(3, 8, 3, DEFAULT_TAU, 9).unwrap();
        let e = [0.5, 0.3, 0.2];
        let probe = [0.7, -0.2, 0.4];
        let n1 = p.w1.len();
        let n2 = n1 + p.b1.len();
        let n3 = n2 + p.w2.len();
        let mut theta: Vec<f64> = Vec::new();
        theta.extend(&p.w1);
        theta.extend(&p.b1);
        theta.extend(&p.w2);
        theta.extend(&p.b2);
        let build = |t: &[f64], tape: &mut Tape<f64>| {
            let mut q = p.clone();
            q.w1 = t[..n1].to_vec();
            q.b1 = t[n1..n2].to_vec();
            q.w2 = t[n2..n3].to_vec();
            q.b2 = t[n3..].to_vec();
            let nodes = q.to_tape(tape, true);
            let alpha = q.route_on_tape(tape, &nodes, &e, q.tau);
            (nodes, tape.dot_const(alpha, &probe))
        };
        let report = grad_check(
            |t| {
                let mut tape = Tape::new();
                let (_, out) = build(t, &mut tape);
                Ok(tape.value(out).item())
            },
            |t| {
                let mut tape = Tape::new();
                let (nodes, out) = build(t, &mut tape);
                let g = tape.backward(out);
                let mut v = g.get(&tape, nodes.w1).data;
                v.extend(g.get(&tape, nodes.b1).data);
                v.extend(g.get(&tape, nodes.w2).data);
                v.extend(g.get(&tape, nodes.b2).data);
                Ok(v)
            },
            &theta,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
