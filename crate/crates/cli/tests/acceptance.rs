//! Acceptance suite: one test per criterion, each printing a pass line
//! with the measured quantities. Criterion 11 is the long desk-scale
//! adaptation run; everything else is seconds.

use fera_core::adapters::{attach_all_conv_layers, init_expert_bank};
use fera_core::autodiff::{softmax_temp_eval, Tape, Tensor};
use fera_core::datagen::{gen_band_boost, gen_dataset, gen_powerlaw, SyntheticKind, SyntheticSpec};
use fera_core::diffusion::{
    make_schedule, sample, DenoiserConfig, DenoiserParams, ScheduleKind,
};
use fera_core::field::Field;
use fera_core::objective::{
    fecl, single_element_grads, train, FeclWeighting, TrainConfig, TrainMode,
};
use fera_core::real::Real;
use fera_core::rng::{derive_seed, keyed_rng};
use fera_core::routing::{
    default_thresholds, max_adjacent_jump, route_soft, routing_trace, RoutedModel, RouterParams,
    RoutingMode, DEFAULT_TAU,
};
use fera_core::spectrum::{
    band_snr_ratios, band_transfer_functions, build_filter_bank, decompose, fei, fei_of,
    fit_loglog_slope, measure_snr, mid_bins, snr_crossings, FeiVector,
};
use std::time::Instant;

fn elapsed(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64()
}

#[test]
fn criterion_01_band_reconstruction_identity() {
    let t0 = Instant::now();
    let shapes = [(1usize, 16usize), (3, 16), (1, 32), (3, 32), (1, 64), (3, 64)];
    let bands = [2usize, 3, 4, 5];
    let mut count = 0;
    let mut worst = 0.0f64;
    'outer: for case in 0.. {
        for &(ch, hw) in &shapes {
            for &n in &bands {
                if count >= 100 {
                    break 'outer;
                }
                let mut rng = keyed_rng(case, "acc1", &[ch as u64, hw as u64, n as u64]);
                let x = Field::<f32>::standard_normal(ch, hw, hw, &mut rng);
                let bank = build_filter_bank(n, hw, hw).unwrap();
                let d = decompose(&x, &bank).unwrap();
                let mut sum = Field::<f32>::zeros(ch, hw, hw);
                for b in &d.bands {
                    sum = sum.add(b).unwrap();
                }
                worst = worst.max(sum.max_abs_diff(&x));
                count += 1;
            }
        }
    }
    assert!(worst < 1e-5, "worst abs err {worst}");
    println!(
        "[PASS] criterion 1: reconstruction identity on {count} fields, worst abs err {worst:.2e} ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 10.0);
}

#[test]
fn criterion_02_parseval_per_band() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let hw = if case % 2 == 0 { 64 } else { 32 };
        let mut rng = keyed_rng(case, "acc2", &[]);
        let x = Field::<f32>::standard_normal(1, hw, hw, &mut rng);
        let bank = build_filter_bank(3, hw, hw).unwrap();
        let d = decompose(&x, &bank).unwrap();
        // independent route: filtering done entirely in the Fourier domain
        let xs = fera_core::fft::fft2(&x).unwrap();
        let responses = band_transfer_functions(&bank, hw, hw).unwrap();
        for k in 0..3 {
            let fe: f64 = xs[0]
                .iter()
                .zip(&responses[k])
                .map(|(z, r)| z.norm_sqr() * r * r)
                .sum::<f64>()
                / (hw * hw) as f64;
            let rel = (d.energies[k] - fe).abs() / fe.max(1e-30);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst rel err {worst}");
    println!(
        "[PASS] criterion 2: per-band Parseval on 50 fields, worst rel err {worst:.2e} ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 10.0);
}

#[test]
fn criterion_03_fei_simplex_and_scale_invariance() {
    let t0 = Instant::now();
    let bank = build_filter_bank(3, 32, 32).unwrap();
    let mut worst_sum = 0.0f64;
    let mut worst_diff = 0.0f64;
    for case in 0..50u64 {
        let mut rng = keyed_rng(case, "acc3", &[]);
        let x = Field::<f32>::standard_normal(1, 32, 32, &mut rng);
        let base = fei(&decompose(&x, &bank).unwrap()).unwrap();
        worst_sum = worst_sum.max((base.components().iter().sum::<f64>() - 1.0).abs());
        assert!(base.components().iter().all(|&v| v >= 0.0));
        for &c in &[1e-3f32, 1.0, 1e3] {
            let e = fei(&decompose(&x.scale(c), &bank).unwrap()).unwrap();
            for (a, b) in e.components().iter().zip(base.components()) {
                worst_diff = worst_diff.max((a - b).abs());
            }
        }
    }
    assert!(worst_sum < 1e-6, "simplex sum deviation {worst_sum}");
    assert!(worst_diff < 1e-6, "scale-invariance deviation {worst_diff}");
    println!(
        "[PASS] criterion 3: FEI simplex (dev {worst_sum:.2e}) and scale invariance (dev {worst_diff:.2e}) ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 5.0);
}

#[test]
fn criterion_04_snr_power_law() {
    let t0 = Instant::now();
    let schedule = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    let n_seeds = 16;
    let mut slope_sum = 0.0;
    for s in 0..n_seeds {
        let spec = SyntheticSpec::powerlaw(2.0, 64, 1, 9000 + s);
        let x0: Field<f64> = gen_powerlaw(&spec).unwrap();
        let snr = measure_snr(&x0, &schedule, 300, 16, 8, s).unwrap();
        let mid = mid_bins(&snr.bin_centers, &snr.counts);
        let xs: Vec<f64> = mid.iter().map(|&b| snr.bin_centers[b]).collect();
        let ys: Vec<f64> = mid.iter().map(|&b| snr.snr[b]).collect();
        slope_sum += fit_loglog_slope(&xs, &ys);
    }
    let mean_slope = slope_sum / n_seeds as f64;
    assert!(
        (mean_slope + 2.0).abs() < 0.3,
        "mean SNR slope {mean_slope}"
    );

    // per-band SNR monotone in alpha_bar (same noise draws across t)
    for s in 0..4u64 {
        let spec = SyntheticSpec::powerlaw(2.0, 64, 1, 9100 + s);
        let x0: Field<f64> = gen_powerlaw(&spec).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for t in (1..=1000).rev().step_by(100) {
            let snr = measure_snr(&x0, &schedule, t, 12, 8, 77).unwrap();
            if let Some(p) = &prev {
                for (a, b) in snr.snr.iter().zip(p) {
                    assert!(a >= b, "per-bin SNR not monotone at t={t}");
                }
            }
            prev = Some(snr.snr);
        }
    }
    println!(
        "[PASS] criterion 4: SNR log-log slope {mean_slope:.3} (target -2 +/- 0.3), per-band monotone ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 60.0);
}

#[test]
fn criterion_05_coarse_to_fine_ordering() {
    let t0 = Instant::now();
    let schedule = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    let bank = build_filter_bank(3, 64, 64).unwrap();
    let mut all = Vec::new();
    for s in 0..16u64 {
        let spec = SyntheticSpec::powerlaw(2.0, 64, 1, 9500 + s);
        let x0: Field<f32> = gen_powerlaw(&spec).unwrap();
        let ratios = band_snr_ratios(&x0, &bank, 8, s).unwrap();
        let cross = snr_crossings(&ratios, &schedule);
        assert!(
            cross[0] >= cross[1] && cross[1] >= cross[2],
            "seed {s}: crossings {cross:?} not ordered"
        );
        all.push(cross);
    }
    println!(
        "[PASS] criterion 5: coarse-to-fine crossings ordered on all 16 seeds (example {:?}) ({:.1}s)",
        all[0],
        elapsed(t0)
    );
    assert!(elapsed(t0) < 60.0);
}

#[test]
fn criterion_06_gradient_suite() {
    let t0 = Instant::now();
    for check in fera_core::checks::grad_check_suite() {
        let report = (check.run)().unwrap();
        assert!(
            report.max_rel_err < check.threshold,
            "{}: rel err {} >= {}",
            check.name,
            report.max_rel_err,
            check.threshold
        );
        println!(
            "       gradient check {:<24} rel err {:.2e} < {:.0e}",
            check.name, report.max_rel_err, check.threshold
        );
    }
    println!(
        "[PASS] criterion 6: all gradient checks below thresholds ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 120.0);
}

#[test]
fn criterion_07_fecl_algebra() {
    let t0 = Instant::now();
    let bank = build_filter_bank(3, 16, 16).unwrap();
    let w = FeiVector::uniform(3);
    let mut worst_zero = 0.0f64;
    let mut worst_scale = 0.0f64;
    for case in 0..1000u64 {
        let mut rng = keyed_rng(case, "acc7", &[]);
        let zl = Field::<f64>::standard_normal(1, 16, 16, &mut rng);
        let zb = Field::<f64>::standard_normal(1, 16, 16, &mut rng);
        let zt = Field::<f64>::standard_normal(1, 16, 16, &mut rng);
        let t = fecl(&zl, &zb, &zt, &bank, &w).unwrap();
        assert!(t.value >= 0.0, "case {case}: negative FECL {}", t.value);
        if case % 20 == 0 {
            // delta = c * residual ==> exactly zero
            let r = zl.sub(&zt).unwrap();
            let zb2 = zl.sub(&r.scale(2.5)).unwrap();
            let tz = fecl(&zl, &zb2, &zt, &bank, &w).unwrap();
            worst_zero = worst_zero.max(tz.value.abs());
            // independent rescaling of delta and residual
            let base = t.value;
            let zb3 = zl.sub(&zl.sub(&zb).unwrap().scale(0.1)).unwrap();
            let zt3 = zl.sub(&zl.sub(&zt).unwrap().scale(10.0)).unwrap();
            let tv = fecl(&zl, &zb3, &zt3, &bank, &w).unwrap();
            worst_scale = worst_scale.max((tv.value - base).abs());
        }
    }
    assert!(worst_zero < 1e-10, "proportional case {worst_zero}");
    assert!(worst_scale < 1e-6, "rescaling deviation {worst_scale}");
    println!(
        "[PASS] criterion 7: FECL non-negative on 1000 pairs, proportional zero {worst_zero:.2e}, rescale dev {worst_scale:.2e} ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 10.0);
}

#[test]
fn criterion_08_routing_contracts() {
    let t0 = Instant::now();
    // simplex on 1000 random FEIs
    let router = RouterParams::<f64>::init(3, 16, 4, DEFAULT_TAU, 5).unwrap();
    for case in 0..1000u64 {
        let mut rng = keyed_rng(case, "acc8", &[]);
        use rand::Rng;
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let e = FeiVector::new(raw.iter().map(|v| v / s).collect());
        let w = route_soft(&router, &e).unwrap();
        assert!(w.is_simplex(), "case {case}");
    }
    // uniform under a zero router
    let zero = RouterParams::<f64>::zeros(3, 16, 5, DEFAULT_TAU);
    let w = route_soft(&zero, &FeiVector::uniform(3)).unwrap();
    for &a in w.alpha() {
        assert!((a - 0.2).abs() < 1e-12);
    }
    // sharpening at tau = 0.01 with logit gap 2
    let mut hard = RouterParams::<f64>::zeros(3, 16, 3, 0.01);
    hard.b2 = vec![2.0, 0.0, 0.0];
    let w = route_soft(&hard, &FeiVector::uniform(3)).unwrap();
    assert!(w.alpha()[0] > 0.999, "{:?}", w.alpha());
    // tau-sharpness monotonicity on a 5-point grid
    let logits = [1.1, 0.2, -0.5];
    let mut prev = f64::INFINITY;
    for tau in [0.05, 0.2, 0.7, 2.0, 10.0] {
        let alpha = softmax_temp_eval(&logits, tau);
        let mx = alpha.iter().cloned().fold(0.0, f64::max);
        assert!(mx <= prev + 1e-12, "tau {tau}");
        prev = mx;
    }
    println!(
        "[PASS] criterion 8: routing simplex x1000, uniform zero-router, hard-limit sharpening, tau monotone ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 5.0);
}

#[test]
fn criterion_09_smoothness_dominance() {
    let t0 = Instant::now();
    let schedule = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    for s in 0..8u64 {
        let denoiser = DenoiserParams::<f32>::init(DenoiserConfig::default(), 700 + s);
        let att = attach_all_conv_layers(&denoiser);
        let mut experts = init_expert_bank(3, 4, 1.0, &att, 800 + s).unwrap();
        // non-neutral experts so routing has a visible effect
        let mut rng = keyed_rng(s, "acc9-ups", &[]);
        for ex in &mut experts.experts {
            for l in &mut ex.layers {
                l.up.iter_mut().for_each(|v| *v = f32::std_normal(&mut rng) * 0.02);
            }
        }
        let bank = build_filter_bank(3, 32, 32).unwrap();
        let router = RouterParams::init(3, 16, 3, DEFAULT_TAU, 900 + s).unwrap();
        let soft = RoutedModel {
            denoiser: denoiser.clone(),
            bank: bank.clone(),
            router: router.clone(),
            experts: Some(experts.clone()),
            mode: RoutingMode::FeiSoft,
            thresholds: default_thresholds(3, 1000),
        };
        let discrete = RoutedModel {
            denoiser,
            bank,
            router,
            experts: Some(experts),
            mode: RoutingMode::TimestepHard,
            thresholds: default_thresholds(3, 1000),
        };
        let soft_trace = routing_trace(&soft, &schedule, 30, 32, 32, s).unwrap();
        let disc_trace = routing_trace(&discrete, &schedule, 30, 32, 32, s).unwrap();
        let soft_jump = max_adjacent_jump(&soft_trace);
        let disc_jump = max_adjacent_jump(&disc_trace);
        assert!(soft_jump < 1.0, "seed {s}: soft jump {soft_jump}");
        assert!(
            soft_jump < disc_jump,
            "seed {s}: soft {soft_jump} !< discrete {disc_jump}"
        );
        assert!((disc_jump - 1.0).abs() < 1e-12, "discrete switch jump");
    }
    println!(
        "[PASS] criterion 9: soft routing strictly smoother than the discrete switch on 8 seeds ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 60.0);
}

#[test]
fn criterion_10_neutral_init_equivalence() {
    let t0 = Instant::now();
    let schedule = make_schedule(ScheduleKind::Linear, 500).unwrap();
    let denoiser = DenoiserParams::<f32>::init(DenoiserConfig::default(), 41);
    let att = attach_all_conv_layers(&denoiser);
    let bank = build_filter_bank(3, 32, 32).unwrap();
    let router = RouterParams::init(3, 16, 3, DEFAULT_TAU, 43).unwrap();
    let routed = RoutedModel {
        denoiser: denoiser.clone(),
        bank: bank.clone(),
        router: router.clone(),
        experts: Some(init_expert_bank(3, 4, 1.0, &att, 42).unwrap()),
        mode: RoutingMode::FeiSoft,
        thresholds: default_thresholds(3, 500),
    };
    let base = RoutedModel {
        denoiser,
        bank,
        router,
        experts: None,
        mode: RoutingMode::Base,
        thresholds: default_thresholds(3, 500),
    };
    for seed in [1u64, 2, 3] {
        let (a, _) = sample(&routed, &schedule, 20, 32, 32, seed, true).unwrap();
        let (b, _) = sample(&base, &schedule, 20, 32, 32, seed, true).unwrap();
        for (x, y) in a.trajectory.unwrap().iter().zip(&b.trajectory.unwrap()) {
            assert_eq!(x.data(), y.data(), "trajectory diverged at seed {seed}");
        }
    }

    // lambda_f = 0 gradients equal an independently built FECL-free graph
    let model = {
        let mut m = routed.clone();
        // non-neutral experts so gradients are non-trivial
        let mut rng = keyed_rng(4, "acc10-ups", &[]);
        for ex in &mut m.experts.as_mut().unwrap().experts {
            for l in &mut ex.layers {
                l.up.iter_mut().for_each(|v| *v = f32::std_normal(&mut rng) * 0.03);
            }
        }
        m
    };
    let cfg = TrainConfig {
        mode: TrainMode::Adapt,
        lambda_f: 0.0,
        schedule: ScheduleKind::Linear,
        t_total: 500,
        ..TrainConfig::default()
    };
    let mut rng = keyed_rng(5, "acc10-data", &[]);
    let x0 = Field::<f32>::standard_normal(1, 32, 32, &mut rng);
    let eps = Field::<f32>::standard_normal(1, 32, 32, &mut rng);
    let t = 120;
    let trainer_grads = single_element_grads(&model, &cfg, &x0, t, &eps).unwrap();

    // independent plain-adapter graph: same primitives, no FECL code path
    let plain_grads = {
        let experts = model.experts.as_ref().unwrap();
        let x_t = fera_core::diffusion::forward_corrupt(&x0, t, &schedule, &eps).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let dn = model.denoiser.to_tape(&mut tape, false);
        let exn = experts.to_tape(&mut tape, true);
        let rn = model.router.to_tape(&mut tape, true);
        let e = fei_of(&x_t, &model.bank).unwrap();
        let input: Vec<f32> = e.components().iter().map(|&v| v as f32).collect();
        let alpha = model
            .router
            .route_on_tape(&mut tape, &rn, &input, model.router.tau);
        let deltas = experts.blended_delta_nodes(&mut tape, &exn, alpha);
        let out = model
            .denoiser
            .forward_on_tape(&mut tape, &dn, &x_t, t, Some(&deltas))
            .unwrap();
        let loss = tape.mse_vs_const(out, Tensor::from_field(&eps));
        let grads = tape.backward(loss);
        let mut v: Vec<Vec<f32>> = Vec::new();
        for mi in 0..experts.m() {
            for li in 0..experts.attachment.len() {
                v.push(grads.get(&tape, exn.downs[mi][li]).data);
                v.push(grads.get(&tape, exn.ups[mi][li]).data);
            }
        }
        v.push(grads.get(&tape, rn.w1).data);
        v.push(grads.get(&tape, rn.b1).data);
        v.push(grads.get(&tape, rn.w2).data);
        v.push(grads.get(&tape, rn.b2).data);
        v
    };
    assert_eq!(trainer_grads.len(), plain_grads.len());
    for (a, b) in trainer_grads.iter().zip(&plain_grads) {
        assert_eq!(a, b, "lambda_f = 0 gradients differ from plain-adapter graph");
    }
    println!(
        "[PASS] criterion 10: neutral-init trajectories identical; lambda=0 gradients bitwise equal plain-adapter run ({:.1}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 30.0);
}

/// The full desk-scale study shared by the adaptation criterion: pretrain
/// once, then adapt under every routing configuration.
#[test]
fn criterion_11_desk_scale_adaptation() {
    let t0 = Instant::now();
    let size = 32usize;
    let t_total = 1000usize;
    let bank = build_filter_bank(3, size, size).unwrap();

    // source distribution: gamma = 2 power-law fields
    let src_spec = SyntheticSpec::powerlaw(2.0, size, 1, 70);
    let src_train: Vec<Field<f32>> = gen_dataset(&src_spec, &bank, 256).unwrap();
    let src_val: Vec<Field<f32>> =
        gen_dataset(&src_spec.with_seed(derive_seed(70, "val-set", &[])), &bank, 64).unwrap();

    // target "style": high band boosted by 3
    let tgt_spec = SyntheticSpec {
        kind: SyntheticKind::BandBoost,
        boost_band: Some(2),
        boost_factor: 3.0,
        ..src_spec.clone()
    };
    let tgt_train: Vec<Field<f32>> = gen_dataset(&tgt_spec, &bank, 256).unwrap();
    let tgt_val: Vec<Field<f32>> =
        gen_dataset(&tgt_spec.with_seed(derive_seed(70, "val-set", &[])), &bank, 64).unwrap();

    // pretrain the base denoiser on the source distribution
    let mut base = RoutedModel {
        denoiser: DenoiserParams::<f32>::init(DenoiserConfig::default(), 11),
        bank: bank.clone(),
        router: RouterParams::init(3, 16, 3, DEFAULT_TAU, 12).unwrap(),
        experts: None,
        mode: RoutingMode::Base,
        thresholds: default_thresholds(3, t_total),
    };
    let pre_cfg = TrainConfig {
        mode: TrainMode::Pretrain,
        steps: 3000,
        batch: 8,
        lr: 1e-3,
        seed: 100,
        val_every: 1000,
        schedule: ScheduleKind::Linear,
        t_total,
        ..TrainConfig::default()
    };
    let pre_report = train(&mut base, &pre_cfg, &src_train, &src_val).unwrap();
    println!(
        "       pretrain: val {} -> {} ({:.0}s)",
        pre_report.initial_val_loss,
        pre_report.final_val_loss,
        elapsed(t0)
    );
    assert!(pre_report.final_val_loss < pre_report.initial_val_loss);

    // sampled fields' radial slope vs the training distribution's slope
    let schedule = make_schedule(ScheduleKind::Linear, t_total).unwrap();
    let train_slope = mean_radial_slope(&src_train[..16]);
    let mut sample_slopes = Vec::new();
    for i in 0..16u64 {
        let (s, _) = sample(&base, &schedule, 30, size, size, 3000 + i, false).unwrap();
        sample_slopes.push(radial_slope(&s.final_field));
    }
    let sample_slope = sample_slopes.iter().sum::<f64>() / sample_slopes.len() as f64;
    println!(
        "       sampled radial slope {sample_slope:.3} vs training distribution {train_slope:.3}"
    );
    assert!(
        (sample_slope - train_slope).abs() < 0.5,
        "sampled slope {sample_slope} vs training {train_slope}"
    );

    let adapt = |mode: RoutingMode, m: usize, rank: usize, lambda_f: f64, seed: u64| -> f64 {
        let att = attach_all_conv_layers(&base.denoiser);
        let experts = init_expert_bank(m, rank, 1.0, &att, 2000 + seed).unwrap();
        let router = RouterParams::init(3, 16, m, DEFAULT_TAU, 3000 + seed).unwrap();
        let mut model = RoutedModel {
            denoiser: base.denoiser.clone(),
            bank: bank.clone(),
            router,
            experts: Some(experts),
            mode,
            thresholds: default_thresholds(m, t_total),
        };
        let cfg = TrainConfig {
            mode: TrainMode::Adapt,
            lambda_f,
            lr: 1e-3,
            steps: 2000,
            batch: 8,
            seed,
            val_every: 500,
            schedule: ScheduleKind::Linear,
            t_total,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &cfg, &tgt_train, &tgt_val).unwrap();
        report.final_val_loss
    };

    let seeds = [0u64, 1, 2];
    let mut fera_wins = 0;
    let mut mean = std::collections::BTreeMap::<&str, f64>::new();
    for &s in &seeds {
        // the full method: one expert per band, FEI soft routing, FECL on
        let f = adapt(RoutingMode::FeiSoft, 3, 4, 0.1, s);
        // equal-parameter single-expert baseline: rank 12 = 3 x 4
        let l = adapt(RoutingMode::FeiSoft, 1, 12, 0.0, s);
        println!("       seed {s}: fera {f:.6} vs single-expert lora {l:.6}");
        if f <= l {
            fera_wins += 1;
        }
        let fh = adapt(RoutingMode::FeiHard, 3, 4, 0.1, s);
        let ts = adapt(RoutingMode::TimestepSoft, 3, 4, 0.1, s);
        let th = adapt(RoutingMode::TimestepHard, 3, 4, 0.1, s);
        println!("       seed {s}: fei_hard {fh:.6} timestep_soft {ts:.6} timestep_hard {th:.6}");
        *mean.entry("fei_soft").or_default() += f / seeds.len() as f64;
        *mean.entry("fei_hard").or_default() += fh / seeds.len() as f64;
        *mean.entry("timestep_soft").or_default() += ts / seeds.len() as f64;
        *mean.entry("timestep_hard").or_default() += th / seeds.len() as f64;
    }
    println!("       grid means: {mean:?}");
    assert!(
        fera_wins >= 2,
        "FeRA beat the equal-parameter baseline in only {fera_wins}/3 seeds"
    );
    let (fs, fh, ts, th) = (
        mean["fei_soft"],
        mean["fei_hard"],
        mean["timestep_soft"],
        mean["timestep_hard"],
    );
    assert!(fs <= fh, "full ({fs}) !<= fei-only/hard-router ({fh})");
    assert!(fs <= ts, "full ({fs}) !<= soft-router-only ({ts})");
    assert!(fh <= th, "fei-only ({fh}) !<= both-off ({th})");
    assert!(ts <= th, "soft-only ({ts}) !<= both-off ({th})");
    println!(
        "[PASS] criterion 11: desk-scale adaptation; FeRA wins {fera_wins}/3, grid ordering holds ({:.0}s)",
        elapsed(t0)
    );
    assert!(elapsed(t0) < 900.0, "runtime {:.0}s exceeds 15 min", elapsed(t0));
}

fn radial_slope(f: &Field<f32>) -> f64 {
    let rs = fera_core::spectrum::radial_spectrum(f, 16).unwrap();
    let mid = mid_bins(&rs.bin_centers, &rs.counts);
    fit_loglog_slope(
        &mid.iter().map(|&b| rs.bin_centers[b]).collect::<Vec<_>>(),
        &mid.iter().map(|&b| rs.amplitudes[b]).collect::<Vec<_>>(),
    )
}

fn mean_radial_slope(fields: &[Field<f32>]) -> f64 {
    fields.iter().map(radial_slope).sum::<f64>() / fields.len() as f64
}

#[test]
fn criterion_12_command_determinism() {
    let t0 = Instant::now();
    let base = std::env::temp_dir().join(format!("fera-acc12-{}", std::process::id()));
    std::fs::remove_dir_all(&base).ok();
    let bin = env!("CARGO_BIN_EXE_fera");
    let runs = [
        (
            "analyze",
            vec!["--set", "schedule.t=50", "--set", "field.size=32"],
            vec!["evolution.csv"],
        ),
        (
            "snr",
            vec!["--set", "schedule.t=100", "--set", "field.size=64"],
            vec!["snr.csv", "crossings.csv"],
        ),
        (
            "train",
            vec![
                "--set",
                "train.mode=pretrain",
                "--set",
                "train.steps=8",
                "--set",
                "data.train_count=8",
                "--set",
                "data.val_count=4",
            ],
            vec!["train.csv", "val.csv"],
        ),
    ];
    for (cmd, args, outputs) in &runs {
        let d1 = base.join(format!("{cmd}-1"));
        let d2 = base.join(format!("{cmd}-2"));
        for d in [&d1, &d2] {
            let out = std::process::Command::new(bin)
                .arg(cmd)
                .args(["--out", d.to_str().unwrap()])
                .args(args.iter())
                .output()
                .unwrap();
            assert!(
                out.status.success(),
                "{cmd}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        for name in outputs {
            let a = std::fs::read(d1.join(name)).unwrap();
            let b = std::fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{cmd}: {name} differs between reruns");
        }
    }
    std::fs::remove_dir_all(&base).ok();
    println!(
        "[PASS] criterion 12: byte-identical CSV outputs across command reruns ({:.1}s)",
        elapsed(t0)
    );
}
