//! Side-by-side soft frequency routing vs discrete timestep switching on
//! identical sampling runs.

use super::{assemble_model, load_model, RunContext};
use crate::config::RunConfig;
use crate::svg::heatmap;
use fera_core::diffusion::{make_schedule, DenoiserParams};
use fera_core::io::{sig9, Csv};
use fera_core::routing::{max_adjacent_jump, routing_trace, RoutingMode, StepRecord};
use fera_core::Result;

pub fn run(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let schedule = make_schedule(cfg.schedule_kind, cfg.schedule_t)?;
    let model_for = |mode: RoutingMode| -> Result<_> {
        if cfg.compare_ckpt.is_empty() {
            assemble_model(
                cfg,
                DenoiserParams::init(super::denoiser_config(cfg), cfg.denoiser_seed),
                mode,
                true,
            )
        } else {
            load_model(cfg, std::path::Path::new(&cfg.compare_ckpt), mode)
        }
    };

    let mut stats = Csv::new(&["mode", "max_adjacent_jump", "n_switches"]);
    for (tag, mode) in [
        ("soft", RoutingMode::FeiSoft),
        ("discrete", RoutingMode::TimestepHard),
    ] {
        let model = model_for(mode)?;
        let records = routing_trace(
            &model,
            &schedule,
            cfg.compare_steps,
            cfg.field_size,
            cfg.field_size,
            cfg.compare_seed,
        )?;
        write_trace(ctx, tag, &records, model.bank.n_bands())?;
        let switches = records
            .windows(2)
            .filter(|w| argmax(&w[0].alpha) != argmax(&w[1].alpha))
            .count();
        stats.row(&[
            tag.to_string(),
            sig9(max_adjacent_jump(&records)),
            switches.to_string(),
        ]);
    }
    ctx.write("stats.csv", &stats.into_string())?;
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map_or(0, |(i, _)| i)
}

/// Trace CSV (`t,e1..en,a1..aM`) plus FEI and weight heatmaps.
pub fn write_trace(
    ctx: &mut RunContext,
    tag: &str,
    records: &[StepRecord],
    n_bands: usize,
) -> Result<()> {
    let m = records.first().map_or(0, |r| r.alpha.len());
    let mut header = vec!["t".to_string()];
    for k in 1..=n_bands {
        header.push(format!("e{k}"));
    }
    for j in 1..=m {
        header.push(format!("a{j}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header_refs);
    for r in records {
        let mut cells = vec![r.t.to_string()];
        if r.fei.is_empty() {
            cells.extend(std::iter::repeat_with(|| sig9(0.0)).take(n_bands));
        } else {
            cells.extend(r.fei.iter().map(|&v| sig9(v)));
        }
        cells.extend(r.alpha.iter().map(|&v| sig9(v)));
        csv.row(&cells);
    }
    ctx.write(&format!("trace_{tag}.csv"), &csv.into_string())?;

    if records.iter().any(|r| !r.fei.is_empty()) {
        let grid: Vec<Vec<f64>> = (0..n_bands)
            .map(|k| {
                records
                    .iter()
                    .map(|r| r.fei.get(k).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        let labels: Vec<String> = (1..=n_bands).map(|k| format!("e{k}")).collect();
        ctx.write(
            &format!("{tag}_fei.svg"),
            &heatmap(
                &format!("frequency-energy indicator ({tag})"),
                "sampling step (denoising order)",
                &labels,
                &grid,
            ),
        )?;
    }
    let grid: Vec<Vec<f64>> = (0..m)
        .map(|j| records.iter().map(|r| r.alpha[j]).collect())
        .collect();
    let labels: Vec<String> = (1..=m).map(|j| format!("a{j}")).collect();
    ctx.write(
        &format!("{tag}_alpha.svg"),
        &heatmap(
            &format!("routing weights ({tag})"),
            "sampling step (denoising order)",
            &labels,
            &grid,
        ),
    )?;
    Ok(())
}
