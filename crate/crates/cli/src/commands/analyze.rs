//! Frequency-energy evolution of the forward process on one field.

use super::{build_bank, build_spec, RunContext};
use crate::config::RunConfig;
use crate::svg::{line_chart, Series};
use fera_core::datagen::generate;
use fera_core::diffusion::make_schedule;
use fera_core::io::{sig9, Csv};
use fera_core::spectrum::energy_evolution;
use fera_core::{Field, Result};

pub fn run(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let bank = build_bank(cfg)?;
    let spec = build_spec(cfg)?;
    let x0: Field = generate(&spec, &bank)?;
    let schedule = make_schedule(cfg.schedule_kind, cfg.schedule_t)?;
    let rows = energy_evolution(&x0, &schedule, &bank, cfg.analyze_seed)?;

    let mut header = vec!["t".to_string(), "alpha_bar".to_string()];
    for k in 1..=bank.n_bands() {
        header.push(format!("e{k}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header_refs);
    for row in &rows {
        let mut cells = vec![row.t.to_string(), sig9(row.alpha_bar)];
        cells.extend(row.e.iter().map(|&v| sig9(v)));
        csv.row(&cells);
    }
    ctx.write("evolution.csv", &csv.into_string())?;

    let series: Vec<Series> = (0..bank.n_bands())
        .map(|k| Series {
            label: format!("band {}", k + 1),
            points: rows.iter().map(|r| (r.t as f64, r.e[k])).collect(),
        })
        .collect();
    ctx.write(
        "evolution.svg",
        &line_chart(
            "frequency-band energy evolution",
            "timestep t",
            "normalized band energy",
            &series,
        ),
    )?;
    Ok(())
}
