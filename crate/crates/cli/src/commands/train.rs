//! Pretraining (base denoiser) and adaptation (experts + router) runs.

use super::{assemble_model, build_bank, build_datasets, RunContext};
use crate::config::RunConfig;
use crate::svg::{line_chart, Series};
use fera_core::diffusion::DenoiserParams;
use fera_core::io::{save_model, sig9, Csv};
use fera_core::objective::{train, TrainConfig, TrainMode, TrainReport};
use fera_core::routing::RoutingMode;
use fera_core::{FeraError, Result};

pub fn run(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let bank = build_bank(cfg)?;
    let (train_set, val_set) = build_datasets(cfg, &bank)?;
    let mut model = match cfg.train_mode {
        TrainMode::Pretrain => assemble_model(
            cfg,
            DenoiserParams::init(super::denoiser_config(cfg), cfg.denoiser_seed),
            RoutingMode::Base,
            false,
        )?,
        TrainMode::Adapt => {
            if cfg.train_base_ckpt.is_empty() {
                return Err(FeraError::Config(
                    "adapt mode requires train.base_ckpt".into(),
                ));
            }
            let path = std::path::Path::new(&cfg.train_base_ckpt);
            if !path.exists() {
                return Err(FeraError::Config(format!(
                    "base checkpoint `{}` does not exist",
                    cfg.train_base_ckpt
                )));
            }
            let ck = fera_core::io::Checkpoint::load(path)?;
            let denoiser = fera_core::io::load_denoiser(&ck)?;
            assemble_model(cfg, denoiser, cfg.routing_mode.clone(), true)?
        }
    };

    let tc = TrainConfig {
        mode: cfg.train_mode,
        lambda_f: cfg.train_lambda_f,
        lr: cfg.train_lr,
        steps: cfg.train_steps,
        batch: cfg.train_batch,
        seed: cfg.train_seed,
        grad_clip: cfg.train_grad_clip,
        val_every: cfg.train_val_every,
        fecl_weights: cfg.train_fecl_weights,
        schedule: cfg.schedule_kind,
        t_total: cfg.schedule_t,
    };
    let report = train(&mut model, &tc, &train_set, &val_set)?;

    write_training_outputs(ctx, cfg, &model, &report)?;
    Ok(())
}

pub fn write_training_outputs(
    ctx: &mut RunContext,
    cfg: &RunConfig,
    model: &fera_core::routing::RoutedModel<f32>,
    report: &TrainReport,
) -> Result<()> {
    let mut csv = Csv::new(&[
        "step",
        "loss_denoise",
        "loss_fecl",
        "loss_total",
        "routing_entropy",
    ]);
    for s in &report.steps {
        csv.row(&[
            s.step.to_string(),
            sig9(s.loss_denoise),
            sig9(s.loss_fecl),
            sig9(s.loss_total),
            sig9(s.routing_entropy),
        ]);
    }
    ctx.write("train.csv", &csv.into_string())?;

    let mut vcsv = Csv::new(&["step", "val_loss"]);
    for p in &report.val_points {
        vcsv.row(&[p.step.to_string(), sig9(p.loss)]);
    }
    ctx.write("val.csv", &vcsv.into_string())?;

    let series = vec![
        Series {
            label: "train total".into(),
            points: report
                .steps
                .iter()
                .map(|s| (s.step as f64, s.loss_total))
                .collect(),
        },
        Series {
            label: "validation".into(),
            points: report
                .val_points
                .iter()
                .map(|p| (p.step as f64, p.loss))
                .collect(),
        },
    ];
    ctx.write(
        "loss.svg",
        &line_chart("training curves", "step", "loss", &series),
    )?;

    save_model(
        &ctx.path("model.ckpt"),
        &model.denoiser,
        model.experts.as_ref(),
        model
            .experts
            .as_ref()
            .map(|_| &model.router),
    )?;
    ctx.record("model.ckpt");
    ctx.record("model.ckpt.manifest");

    // desk-scale optimizer settings are recorded with every run
    let improvement = report.final_val_loss / report.initial_val_loss;
    let report_txt = format!(
        "mode: {}\nrouting: {}\nsteps: {}\nbatch: {}\nlr: {}\ngrad_clip: {}\nlambda_f: {}\n\
         optimizer: adam (beta1 0.9, beta2 0.999)\n\
         trainable_params: {}\ndenoiser_params: {}\nadapter_params: {}\nrouter_params: {}\n\
         initial_val_loss: {}\nfinal_val_loss: {}\nimprovement_ratio: {}\n\
         degenerate_fecl_elements: {}\ndegenerate_fei_elements: {}\n",
        cfg.train_mode,
        model.mode,
        cfg.train_steps,
        cfg.train_batch,
        cfg.train_lr,
        cfg.train_grad_clip,
        cfg.train_lambda_f,
        report.trainable_params,
        model.denoiser.param_count(),
        model.experts.as_ref().map_or(0, |e| e.param_count()),
        model.router.param_count(),
        sig9(report.initial_val_loss),
        sig9(report.final_val_loss),
        sig9(improvement),
        report.degenerate_fecl_elements,
        report.degenerate_fei_elements,
    );
    ctx.write("report.txt", &report_txt)?;
    Ok(())
}
