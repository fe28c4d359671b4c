//! Per-band SNR over the schedule and the SNR = 1 crossing steps.

use super::{build_bank, build_spec, RunContext};
use crate::config::RunConfig;
use crate::svg::{line_chart, Series};
use fera_core::datagen::generate;
use fera_core::diffusion::make_schedule;
use fera_core::io::{sig9, Csv};
use fera_core::spectrum::{band_snr, band_snr_ratios, snr_crossings};
use fera_core::{FeraError, Field, Result};

pub fn run(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let bank = build_bank(cfg)?;
    let spec = build_spec(cfg)?;
    let x0: Field = generate(&spec, &bank)?;
    let schedule = make_schedule(cfg.schedule_kind, cfg.schedule_t)?;
    let ratios = band_snr_ratios(&x0, &bank, cfg.snr_n_draws, cfg.snr_seed)?;
    let crossings = snr_crossings(&ratios, &schedule);
    let n = bank.n_bands();

    let mut header = vec!["t".to_string(), "alpha_bar".to_string()];
    for k in 1..=n {
        header.push(format!("snr{k}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header_refs);
    let stride = (schedule.t_max() / 200).max(1);
    let mut series: Vec<Series> = (0..n)
        .map(|k| Series {
            label: format!("band {}", k + 1),
            points: Vec::new(),
        })
        .collect();
    let mut t = 1;
    while t <= schedule.t_max() {
        let snr = band_snr(&ratios, &schedule, t)?;
        let mut cells = vec![t.to_string(), sig9(schedule.alpha_bar(t))];
        cells.extend(snr.iter().map(|&v| sig9(v)));
        csv.row(&cells);
        for (k, s) in series.iter_mut().enumerate() {
            if snr[k].is_finite() && snr[k] > 0.0 {
                s.points.push((t as f64, snr[k].log10()));
            }
        }
        t += stride;
    }
    ctx.write("snr.csv", &csv.into_string())?;

    let mut ccsv = Csv::new(&["band", "signal_noise_ratio_factor", "t_star"]);
    for (k, (&r, &c)) in ratios.iter().zip(&crossings).enumerate() {
        ccsv.row(&[(k + 1).to_string(), sig9(r), c.to_string()]);
    }
    ctx.write("crossings.csv", &ccsv.into_string())?;
    ctx.write(
        "snr.svg",
        &line_chart("per-band SNR", "timestep t", "log10 SNR", &series),
    )?;

    if cfg.snr_assert_monotone {
        for w in crossings.windows(2) {
            if w[0] < w[1] {
                return Err(FeraError::Domain(format!(
                    "SNR crossings not monotone across bands: {crossings:?}"
                )));
            }
        }
    }
    Ok(())
}
