//! Registered central-difference gradient checks, all in double precision.
//! The CLI's self-check command runs every entry and fails on any
//! violation; the same suite backs the verification tests.

use crate::adapters::{attach_all_conv_layers, init_expert_bank, ExpertBank};
use crate::autodiff::{grad_check, GradCheckReport, Tape, Tensor};
use crate::diffusion::{DenoiserConfig, DenoiserParams, CONV_K};
use crate::error::Result;
use crate::field::Field;
use crate::objective::{single_element_loss, TrainConfig, TrainMode};
use crate::real::Real;
use crate::rng::keyed_rng;
use crate::routing::{default_thresholds, RoutedModel, RouterParams, RoutingMode, DEFAULT_TAU};
use crate::spectrum::build_filter_bank;

/// One named gradient check with its pass threshold.
pub struct NamedCheck {
    pub name: &'static str,
    pub threshold: f64,
    pub run: fn() -> Result<GradCheckReport>,
}

/// Every registered check, in a stable order.
pub fn grad_check_suite() -> Vec<NamedCheck> {
    vec![
        NamedCheck {
            name: "sum_of_squares",
            threshold: 1e-8,
            run: check_sum_of_squares,
        },
        NamedCheck {
            name: "softmax_cross_entropy",
            threshold: 1e-6,
            run: check_softmax_cross_entropy,
        },
        NamedCheck {
            name: "router_mlp",
            threshold: 1e-4,
            run: check_router,
        },
        NamedCheck {
            name: "expert_factors",
            threshold: 1e-4,
            run: check_expert_factors,
        },
        NamedCheck {
            name: "denoiser",
            threshold: 1e-4,
            run: check_denoiser,
        },
        NamedCheck {
            name: "fecl",
            threshold: 1e-4,
            run: check_fecl,
        },
        NamedCheck {
            name: "total_loss",
            threshold: 1e-4,
            run: check_total_loss,
        },
    ]
}

fn check_sum_of_squares() -> Result<GradCheckReport> {
    let theta = [1.5, -2.0, 0.25, 3.0, 0.0];
    grad_check(
        |t| Ok(t.iter().map(|v| v * v).sum()),
        |t| Ok(t.iter().map(|v| 2.0 * v).collect()),
        &theta,
    )
}

fn check_softmax_cross_entropy() -> Result<GradCheckReport> {
    let theta = [0.3, -1.2, 0.8, 0.1];
    let target = 2usize;
    let build = |t: &[f64], tape: &mut Tape<f64>| {
        let p = tape.param(Tensor::vector(t.to_vec()));
        let alpha = tape.softmax_temp(p, 1.0);
        let picked = tape.index_vec(alpha, target);
        let lp = tape.ln(picked);
        (p, tape.scale(lp, -1.0))
    };
    grad_check(
        |t| {
            let mut tape = Tape::new();
            let (_, out) = build(t, &mut tape);
            Ok(tape.value(out).item())
        },
        |t| {
            let mut tape = Tape::new();
            let (p, out) = build(t, &mut tape);
            let g = tape.backward(out);
            Ok(g.get(&tape, p).data)
        },
        &theta,
    )
}

fn check_router() -> Result<GradCheckReport> {
    let proto = RouterParams::<f64>::init(3, 8, 3, DEFAULT_TAU, 42)?;
    let e = [0.55, 0.30, 0.15];
    let probe = [0.9, -0.4, 0.2];
    let theta = flatten_router(&proto);
    let build = |t: &[f64], tape: &mut Tape<f64>| {
        let q = unflatten_router(&proto, t);
        let nodes = q.to_tape(tape, true);
        let alpha = q.route_on_tape(tape, &nodes, &e, q.tau);
        (nodes, tape.dot_const(alpha, &probe))
    };
    grad_check(
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
}

fn check_expert_factors() -> Result<GradCheckReport> {
    let denoiser = DenoiserParams::<f64>::init(DenoiserConfig::default(), 7);
    let att = attach_all_conv_layers(&denoiser);
    let mut bank = init_expert_bank::<f64>(2, 2, 1.0, &att[..1], 9)?;
    let mut rng = keyed_rng(11, "check-experts", &[]);
    for ex in &mut bank.experts {
        for l in &mut ex.layers {
            l.up.iter_mut().for_each(|v| *v = f64::std_normal(&mut rng) * 0.1);
        }
    }
    let x = Field::<f64>::standard_normal(1, 8, 8, &mut rng);
    let probe: Vec<f64> = (0..16 * 64).map(|_| f64::std_normal(&mut rng)).collect();
    let alpha = [0.6, 0.4];
    let theta = flatten_bank(&bank);
    let shape = bank.attachment[0];
    let build = |t: &[f64], tape: &mut Tape<f64>| {
        let b = unflatten_bank(&bank, t);
        let nodes = b.to_tape(tape, true);
        let alpha_node = tape.constant(Tensor::vector(alpha.to_vec()));
        let deltas = b.blended_delta_nodes(tape, &nodes, alpha_node);
        let xn = tape.constant(Tensor::from_field(&x));
        let dl = tape.reshape(deltas[0], vec![shape.out_features, 1, CONV_K, CONV_K]);
        let corr = tape.conv2d(xn, dl, shape.out_features, CONV_K);
        (nodes, tape.dot_const(corr, &probe))
    };
    grad_check(
        |t| {
            let mut tape = Tape::new();
            let (_, out) = build(t, &mut tape);
            Ok(tape.value(out).item())
        },
        |t| {
            let mut tape = Tape::new();
            let (nodes, out) = build(t, &mut tape);
            let g = tape.backward(out);
            let mut v = Vec::new();
            for mi in 0..2 {
                v.extend(g.get(&tape, nodes.downs[mi][0]).data);
                v.extend(g.get(&tape, nodes.ups[mi][0]).data);
            }
            Ok(v)
        },
        &theta,
    )
}

fn check_denoiser() -> Result<GradCheckReport> {
    let proto = DenoiserParams::<f64>::init(DenoiserConfig::default(), 21);
    let mut rng = keyed_rng(13, "check-denoiser", &[]);
    let x = Field::<f64>::standard_normal(1, 8, 8, &mut rng);
    let probe: Vec<f64> = (0..64).map(|_| f64::std_normal(&mut rng)).collect();
    let theta = flatten_denoiser(&proto);
    let build = |t: &[f64], tape: &mut Tape<f64>| {
        let p = unflatten_denoiser(&proto, t);
        let nodes = p.to_tape(tape, true);
        let out = p.forward_on_tape(tape, &nodes, &x, 37, None).unwrap();
        (nodes, tape.dot_const(out, &probe))
    };
    grad_check(
        |t| {
            let mut tape = Tape::new();
            let (_, out) = build(t, &mut tape);
            Ok(tape.value(out).item())
        },
        |t| {
            let mut tape = Tape::new();
            let (nodes, out) = build(t, &mut tape);
            let g = tape.backward(out);
            let mut v = Vec::new();
            for li in 0..nodes.weights.len() {
                v.extend(g.get(&tape, nodes.weights[li]).data);
                v.extend(g.get(&tape, nodes.biases[li]).data);
                v.extend(g.get(&tape, nodes.projs[li]).data);
            }
            Ok(v)
        },
        &theta,
    )
}

fn check_fecl() -> Result<GradCheckReport> {
    let bank = build_filter_bank(3, 8, 8)?;
    let mut rng = keyed_rng(17, "check-fecl", &[]);
    let z_base = Field::<f64>::standard_normal(1, 8, 8, &mut rng);
    let z_true = Field::<f64>::standard_normal(1, 8, 8, &mut rng);
    let z_lora0 = Field::<f64>::standard_normal(1, 8, 8, &mut rng);
    let taps = bank.taps_for::<f64>(8, 8)?;
    let w = [0.5, 0.3, 0.2];
    let build = |t: &[f64], tape: &mut Tape<f64>| {
        let zl = tape.param(Tensor::new(vec![1, 8, 8], t.to_vec()));
        (
            zl,
            crate::objective::fecl_on_tape(tape, zl, &z_base, &z_true, &taps, &w),
        )
    };
    grad_check(
        |t| {
            let mut tape = Tape::new();
            let (_, out) = build(t, &mut tape);
            Ok(tape.value(out).item())
        },
        |t| {
            let mut tape = Tape::new();
            let (zl, out) = build(t, &mut tape);
            let g = tape.backward(out);
            Ok(g.get(&tape, zl).data)
        },
        z_lora0.data(),
    )
}

fn check_total_loss() -> Result<GradCheckReport> {
    let proto = toy_model_f64(31);
    let mut rng = keyed_rng(19, "check-total", &[]);
    let x0 = Field::<f64>::standard_normal(1, 8, 8, &mut rng);
    let eps = Field::<f64>::standard_normal(1, 8, 8, &mut rng);
    let cfg = TrainConfig {
        mode: TrainMode::Adapt,
        lambda_f: 0.1,
        t_total: 100,
        ..TrainConfig::default()
    };
    let t = 35;
    let theta = flatten_trainables(&proto);
    grad_check(
        |th| {
            let m = unflatten_trainables(&proto, th);
            let (value, _) = single_element_loss(&m, &cfg, &x0, t, &eps)?;
            Ok(value)
        },
        |th| {
            let m = unflatten_trainables(&proto, th);
            let (_, grads) = single_element_loss(&m, &cfg, &x0, t, &eps)?;
            Ok(grads.into_iter().flatten().collect())
        },
        &theta,
    )
}

fn toy_model_f64(seed: u64) -> RoutedModel<f64> {
    let denoiser = DenoiserParams::<f64>::init(DenoiserConfig::default(), seed);
    let att = attach_all_conv_layers(&denoiser);
    let mut experts = init_expert_bank::<f64>(2, 2, 1.0, &att, seed + 1).unwrap();
    // non-neutral ups so FECL is active
    let mut rng = keyed_rng(seed, "check-total-ups", &[]);
    for ex in &mut experts.experts {
        for l in &mut ex.layers {
            l.up.iter_mut().for_each(|v| *v = f64::std_normal(&mut rng) * 0.05);
        }
    }
    let router = RouterParams::<f64>::init(3, 8, 2, DEFAULT_TAU, seed + 2).unwrap();
    RoutedModel {
        denoiser,
        bank: build_filter_bank(3, 8, 8).unwrap(),
        router,
        experts: Some(experts),
        mode: RoutingMode::FeiSoft,
        thresholds: default_thresholds(2, 100),
    }
}

fn flatten_router<T: Real>(p: &RouterParams<T>) -> Vec<f64> {
    let mut v = Vec::new();
    for part in [&p.w1, &p.b1, &p.w2, &p.b2] {
        v.extend(part.iter().map(|x| x.as_f64()));
    }
    v
}

fn unflatten_router(proto: &RouterParams<f64>, t: &[f64]) -> RouterParams<f64> {
    let mut q = proto.clone();
    let mut o = 0;
    for part in [&mut q.w1, &mut q.b1, &mut q.w2, &mut q.b2] {
        let n = part.len();
        part.copy_from_slice(&t[o..o + n]);
        o += n;
    }
    q
}

fn flatten_denoiser<T: Real>(p: &DenoiserParams<T>) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &p.layers {
        v.extend(l.weight.iter().map(|x| x.as_f64()));
        v.extend(l.bias.iter().map(|x| x.as_f64()));
        v.extend(l.proj.iter().map(|x| x.as_f64()));
    }
    v
}

fn unflatten_denoiser(proto: &DenoiserParams<f64>, t: &[f64]) -> DenoiserParams<f64> {
    let mut q = proto.clone();
    let mut o = 0;
    for l in &mut q.layers {
        for part in [&mut l.weight, &mut l.bias, &mut l.proj] {
            let n = part.len();
            part.copy_from_slice(&t[o..o + n]);
            o += n;
        }
    }
    q
}

fn flatten_bank<T: Real>(b: &ExpertBank<T>) -> Vec<f64> {
    let mut v = Vec::new();
    for ex in &b.experts {
        for l in &ex.layers {
            v.extend(l.down.iter().map(|x| x.as_f64()));
            v.extend(l.up.iter().map(|x| x.as_f64()));
        }
    }
    v
}

fn unflatten_bank(proto: &ExpertBank<f64>, t: &[f64]) -> ExpertBank<f64> {
    let mut q = proto.clone();
    let mut o = 0;
    for ex in &mut q.experts {
        for l in &mut ex.layers {
            for part in [&mut l.down, &mut l.up] {
                let n = part.len();
                part.copy_from_slice(&t[o..o + n]);
                o += n;
            }
        }
    }
    q
}

/// Flatten the adapt-mode trainables (expert factors then router), in the
/// same order the trainer registers leaves.
fn flatten_trainables(m: &RoutedModel<f64>) -> Vec<f64> {
    let mut v = flatten_bank(m.experts.as_ref().unwrap());
    v.extend(flatten_router(&m.router));
    v
}

fn unflatten_trainables(proto: &RoutedModel<f64>, t: &[f64]) -> RoutedModel<f64> {
    let mut q = proto.clone();
    let bank = proto.experts.as_ref().unwrap();
    let nb = flatten_bank(bank).len();
    q.experts = Some(unflatten_bank(bank, &t[..nb]));
    q.router = unflatten_router(&proto.router, &t[nb..]);
    q
}
