//! Command implementations. Every command echoes its resolved config into
//! the output directory, records each file it writes in `manifest.txt`,
//! and flags errors there before the process exits nonzero.

pub mod ablate;
pub mod analyze;
pub mod gradcheck;
pub mod route_compare;
pub mod sample;
pub mod snr;
pub mod train;

use crate::config::RunConfig;
use fera_core::adapters::{attach_all_conv_layers, init_expert_bank, ExpertBank};
use fera_core::datagen::{gen_dataset, SyntheticKind, SyntheticSpec};
use fera_core::diffusion::{DenoiserConfig, DenoiserParams};
use fera_core::io::Checkpoint;
use fera_core::rng::derive_seed;
use fera_core::routing::{default_thresholds, RoutedModel, RouterParams, RoutingMode};
use fera_core::spectrum::{build_filter_bank, FilterBank};
use fera_core::{FeraError, Field, Result};
use std::path::{Path, PathBuf};

/// Output-directory bookkeeping shared by all commands.
pub struct RunContext {
    pub out_dir: PathBuf,
    outputs: Vec<String>,
}

impl RunContext {
    pub fn create(out_dir: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        let mut ctx = Self {
            out_dir: out_dir.to_path_buf(),
            outputs: Vec::new(),
        };
        ctx.write("config.resolved.ini", &cfg.to_ini_string())?;
        Ok(ctx)
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.out_dir.join(name), content)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Write the manifest; called with the command's final status.
    pub fn finish(&self, status: &Result<()>) {
        let mut m = String::new();
        for o in &self.outputs {
            m.push_str(&format!("output {o}\n"));
        }
        match status {
            Ok(()) => m.push_str("status ok\n"),
            Err(e) => m.push_str(&format!("status error {e}\n")),
        }
        let _ = std::fs::write(self.out_dir.join("manifest.txt"), m);
    }
}

pub fn build_bank(cfg: &RunConfig) -> Result<FilterBank> {
    build_filter_bank(cfg.bank_n_bands, cfg.field_size, cfg.field_size)
}

pub fn build_spec(cfg: &RunConfig) -> Result<SyntheticSpec> {
    let kind = match cfg.data_kind.as_str() {
        "powerlaw" => SyntheticKind::Powerlaw,
        "band_boost" => SyntheticKind::BandBoost,
        other => return Err(FeraError::Config(format!("unknown data kind `{other}`"))),
    };
    let spec = SyntheticSpec {
        kind,
        gamma: cfg.data_gamma,
        boost_band: (kind == SyntheticKind::BandBoost).then_some(cfg.data_boost_band),
        boost_factor: cfg.data_boost_factor,
        size: cfg.field_size,
        channels: cfg.field_channels,
        seed: cfg.data_seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Deterministic train/validation datasets from disjoint seed streams.
pub fn build_datasets(cfg: &RunConfig, bank: &FilterBank) -> Result<(Vec<Field>, Vec<Field>)> {
    let spec = build_spec(cfg)?;
    let train = gen_dataset(&spec, bank, cfg.data_train_count)?;
    let val_spec = spec.with_seed(derive_seed(cfg.data_seed, "val-set", &[]));
    let val = gen_dataset(&val_spec, bank, cfg.data_val_count)?;
    Ok((train, val))
}

pub fn denoiser_config(cfg: &RunConfig) -> DenoiserConfig {
    DenoiserConfig {
        channels: cfg.field_channels,
        hidden: cfg.denoiser_hidden,
        emb_dim: cfg.denoiser_emb_dim,
    }
}

pub fn thresholds_for(cfg: &RunConfig, m: usize) -> Vec<usize> {
    if cfg.routing_thresholds.is_empty() {
        default_thresholds(m, cfg.schedule_t)
    } else {
        cfg.routing_thresholds.clone()
    }
}

/// Assemble a routed model around a given (or freshly initialized) base.
pub fn assemble_model(
    cfg: &RunConfig,
    denoiser: DenoiserParams<f32>,
    mode: RoutingMode,
    with_experts: bool,
) -> Result<RoutedModel<f32>> {
    let bank = build_bank(cfg)?;
    let experts: Option<ExpertBank<f32>> = if with_experts {
        let att = attach_all_conv_layers(&denoiser);
        Some(init_expert_bank(
            cfg.adapters_m,
            cfg.adapters_rank,
            cfg.adapters_scale,
            &att,
            cfg.adapters_seed,
        )?)
    } else {
        None
    };
    let router = RouterParams::init(
        cfg.bank_n_bands,
        cfg.router_hidden,
        cfg.adapters_m,
        cfg.router_tau,
        cfg.router_seed,
    )?;
    Ok(RoutedModel {
        denoiser,
        bank,
        router,
        experts,
        mode,
        thresholds: thresholds_for(cfg, cfg.adapters_m),
    })
}

/// Load a full routed model from a checkpoint path.
pub fn load_model(cfg: &RunConfig, path: &Path, mode: RoutingMode) -> Result<RoutedModel<f32>> {
    let ck = Checkpoint::load(path)?;
    let denoiser = fera_core::io::load_denoiser(&ck)?;
    let att = attach_all_conv_layers(&denoiser);
    let experts = fera_core::io::load_experts(&ck, &att)?;
    let router = match fera_core::io::load_router(&ck)? {
        Some(r) => r,
        None => RouterParams::init(
            cfg.bank_n_bands,
            cfg.router_hidden,
            cfg.adapters_m,
            cfg.router_tau,
            cfg.router_seed,
        )?,
    };
    let m = experts.as_ref().map_or(cfg.adapters_m, ExpertBank::m);
    let bank = build_filter_bank(cfg.bank_n_bands, cfg.field_size, cfg.field_size)?;
    Ok(RoutedModel {
        denoiser,
        bank,
        router,
        experts,
        mode,
        thresholds: thresholds_for(cfg, m),
    })
}
