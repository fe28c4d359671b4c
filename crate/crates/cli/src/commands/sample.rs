//! Ancestral sampling from a checkpointed model.

use super::{load_model, RunContext};
use crate::config::RunConfig;
use fera_core::diffusion::{make_schedule, sample};
use fera_core::io::{save_field, sig9, Csv};
use fera_core::rng::derive_seed;
use fera_core::spectrum::{fit_loglog_slope, mid_bins, radial_spectrum};
use fera_core::{FeraError, Result};

pub fn run(cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    if cfg.sample_ckpt.is_empty() {
        return Err(FeraError::Config("sample requires sample.ckpt".into()));
    }
    let model = load_model(
        cfg,
        std::path::Path::new(&cfg.sample_ckpt),
        cfg.routing_mode.clone(),
    )?;
    let schedule = make_schedule(cfg.schedule_kind, cfg.schedule_t)?;
    let mut csv = Csv::new(&["index", "seed", "mean", "variance", "radial_slope"]);
    for i in 0..cfg.sample_count {
        let seed = derive_seed(cfg.sample_seed, "sample", &[i as u64]);
        let (s, _records) = sample(
            &model,
            &schedule,
            cfg.sample_steps,
            cfg.field_size,
            cfg.field_size,
            seed,
            cfg.sample_keep_trajectory,
        )?;
        let name = format!("sample_{i:03}.ft");
        save_field(&ctx.path(&name), &s.final_field)?;
        ctx.record(&name);
        if let Some(traj) = &s.trajectory {
            for (j, f) in traj.iter().enumerate() {
                let tname = format!("sample_{i:03}_traj_{j:03}.ft");
                save_field(&ctx.path(&tname), f)?;
                ctx.record(&tname);
            }
        }
        let rs = radial_spectrum(&s.final_field, 16)?;
        let mid = mid_bins(&rs.bin_centers, &rs.counts);
        let slope = fit_loglog_slope(
            &mid.iter().map(|&b| rs.bin_centers[b]).collect::<Vec<_>>(),
            &mid.iter().map(|&b| rs.amplitudes[b]).collect::<Vec<_>>(),
        );
        let var = s.final_field.energy() / s.final_field.len() as f64
            - s.final_field.mean() * s.final_field.mean();
        csv.row(&[
            i.to_string(),
            seed.to_string(),
            sig9(s.final_field.mean()),
            sig9(var),
            sig9(slope),
        ]);
    }
    ctx.write("samples.csv", &csv.into_string())?;
    Ok(())
}
