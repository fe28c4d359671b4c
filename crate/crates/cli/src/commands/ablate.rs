//! Cross-product ablation sweeps: band counts, expert counts, FECL
//! strengths and routing modes, each cell a short adaptation run against
//! the shared base checkpoint.

use super::RunContext;
use crate::config::RunConfig;
use fera_core::adapters::{attach_all_conv_layers, init_expert_bank};
use fera_core::datagen::gen_dataset;
use fera_core::io::{sig9, Csv};
use fera_core::objective::{train, TrainConfig, TrainMode};
use fera_core::rng::derive_seed;
use fera_core::routing::{default_thresholds, RoutedModel, RouterParams, RoutingMode};
use fera_core::spectrum::build_filter_bank;
use fera_core::{FeraError, Result};
use rayon::prelude::*;

#[derive(Debug, Clone)]
struct Cell {
    bands: usize,
    m: usize,
    lambda_f: f64,
    routing: RoutingMode,
    seed: u64,
}

pub fn run(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    if cfg.train_base_ckpt.is_empty() {
        return Err(FeraError::Config("ablate requires train.base_ckpt".into()));
    }
    let ck = fera_core::io::Checkpoint::load(std::path::Path::new(&cfg.train_base_ckpt))?;
    let denoiser = fera_core::io::load_denoiser(&ck)?;

    // deterministic grid order: bands, m, lambda, routing, seed
    let mut cells = Vec::new();
    for &bands in &cfg.ablate_bands {
        for &m in &cfg.ablate_m {
            for &lambda_f in &cfg.ablate_lambda_f {
                for routing in &cfg.ablate_routing {
                    for &seed in &cfg.ablate_seeds {
                        cells.push(Cell {
                            bands,
                            m,
                            lambda_f,
                            routing: routing.clone(),
                            seed,
                        });
                    }
                }
            }
        }
    }

    let results: Vec<(Cell, f64, f64)> = cells
        .par_iter()
        .map(|cell| -> Result<(Cell, f64, f64)> {
            let report = run_cell(cfg, &denoiser, cell)?;
            Ok((
                cell.clone(),
                report.initial_val_loss,
                report.final_val_loss,
            ))
        })
        .collect::<Result<_>>()?;

    let mut csv = Csv::new(&[
        "bands",
        "m",
        "lambda_f",
        "routing",
        "seed",
        "initial_val_loss",
        "final_val_loss",
    ]);
    for (cell, init, fin) in &results {
        csv.row(&[
            cell.bands.to_string(),
            cell.m.to_string(),
            cell.lambda_f.to_string(),
            cell.routing.to_string(),
            cell.seed.to_string(),
            sig9(*init),
            sig9(*fin),
        ]);
    }
    ctx.write("summary.csv", &csv.into_string())?;
    Ok(())
}

fn run_cell(
    cfg: &RunConfig,
    denoiser: &fera_core::diffusion::DenoiserParams<f32>,
    cell: &Cell,
) -> Result<fera_core::objective::TrainReport> {
    let bank = build_filter_bank(cell.bands, cfg.field_size, cfg.field_size)?;
    let spec = super::build_spec(cfg)?;
    let train_set = gen_dataset(&spec, &bank, cfg.data_train_count)?;
    let val_spec = spec.with_seed(derive_seed(cfg.data_seed, "val-set", &[]));
    let val_set = gen_dataset(&val_spec, &bank, cfg.data_val_count)?;
    let att = attach_all_conv_layers(denoiser);
    let experts = init_expert_bank(
        cell.m,
        cfg.adapters_rank,
        cfg.adapters_scale,
        &att,
        cfg.adapters_seed.wrapping_add(cell.seed),
    )?;
    let router = RouterParams::init(
        cell.bands,
        cfg.router_hidden,
        cell.m,
        cfg.router_tau,
        cfg.router_seed.wrapping_add(cell.seed),
    )?;
    let mut model = RoutedModel {
        denoiser: denoiser.clone(),
        bank,
        router,
        experts: Some(experts),
        mode: cell.routing.clone(),
        thresholds: default_thresholds(cell.m, cfg.schedule_t),
    };
    let tc = TrainConfig {
        mode: TrainMode::Adapt,
        lambda_f: cell.lambda_f,
        lr: cfg.train_lr,
        steps: cfg.ablate_steps,
        batch: cfg.train_batch,
        seed: cell.seed,
        grad_clip: cfg.train_grad_clip,
        val_every: cfg.ablate_steps.max(1),
        fecl_weights: cfg.train_fecl_weights,
        schedule: cfg.schedule_kind,
        t_total: cfg.schedule_t,
    };
    train(&mut model, &tc, &train_set, &val_set)
}
