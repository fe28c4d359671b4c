//! Flat INI-style run configuration: `[section]` headers and `key = value`
//! pairs, a fixed schema with defaults, `--set section.key=value`
//! overrides, and a canonical echo of the fully resolved configuration.

use fera_core::diffusion::ScheduleKind;
use fera_core::objective::{FeclWeighting, TrainMode};
use fera_core::routing::RoutingMode;
use fera_core::{FeraError, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    // [field]
    pub field_size: usize,
    pub field_channels: usize,
    // [data]
    pub data_kind: String,
    pub data_gamma: f64,
    pub data_boost_band: usize,
    pub data_boost_factor: f64,
    pub data_seed: u64,
    pub data_train_count: usize,
    pub data_val_count: usize,
    // [bank]
    pub bank_n_bands: usize,
    // [schedule]
    pub schedule_kind: ScheduleKind,
    pub schedule_t: usize,
    // [denoiser]
    pub denoiser_hidden: usize,
    pub denoiser_emb_dim: usize,
    pub denoiser_seed: u64,
    // [adapters]
    pub adapters_m: usize,
    pub adapters_rank: usize,
    pub adapters_scale: f64,
    pub adapters_seed: u64,
    // [router]
    pub router_tau: f64,
    pub router_hidden: usize,
    pub router_seed: u64,
    // [routing]
    pub routing_mode: RoutingMode,
    pub routing_thresholds: Vec<usize>,
    // [train]
    pub train_mode: TrainMode,
    pub train_steps: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_seed: u64,
    pub train_lambda_f: f64,
    pub train_grad_clip: f64,
    pub train_val_every: usize,
    pub train_fecl_weights: FeclWeighting,
    pub train_base_ckpt: String,
    // [sample]
    pub sample_steps: usize,
    pub sample_count: usize,
    pub sample_seed: u64,
    pub sample_ckpt: String,
    pub sample_keep_trajectory: bool,
    // [analyze]
    pub analyze_seed: u64,
    // [snr]
    pub snr_n_bins: usize,
    pub snr_n_draws: usize,
    pub snr_seed: u64,
    pub snr_assert_monotone: bool,
    // [compare]
    pub compare_ckpt: String,
    pub compare_steps: usize,
    pub compare_seed: u64,
    // [ablate]
    pub ablate_bands: Vec<usize>,
    pub ablate_m: Vec<usize>,
    pub ablate_lambda_f: Vec<f64>,
    pub ablate_routing: Vec<RoutingMode>,
    pub ablate_seeds: Vec<u64>,
    pub ablate_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            field_size: 32,
            field_channels: 1,
            data_kind: "powerlaw".into(),
            data_gamma: 2.0,
            data_boost_band: 2,
            data_boost_factor: 3.0,
            data_seed: 7,
            data_train_count: 256,
            data_val_count: 64,
            bank_n_bands: 3,
            schedule_kind: ScheduleKind::Linear,
            schedule_t: 1000,
            denoiser_hidden: 16,
            denoiser_emb_dim: 32,
            denoiser_seed: 1,
            adapters_m: 3,
            adapters_rank: 4,
            adapters_scale: 1.0,
            adapters_seed: 2,
            router_tau: fera_core::routing::DEFAULT_TAU,
            router_hidden: fera_core::routing::DEFAULT_ROUTER_HIDDEN,
            router_seed: 3,
            routing_mode: RoutingMode::FeiSoft,
            routing_thresholds: Vec::new(),
            train_mode: TrainMode::Adapt,
            train_steps: 2000,
            train_lr: 1e-3,
            train_batch: 8,
            train_seed: 0,
            train_lambda_f: 0.1,
            train_grad_clip: 1.0,
            train_val_every: 200,
            train_fecl_weights: FeclWeighting::FeiXt,
            train_base_ckpt: String::new(),
            sample_steps: 30,
            sample_count: 8,
            sample_seed: 0,
            sample_ckpt: String::new(),
            sample_keep_trajectory: false,
            analyze_seed: 11,
            snr_n_bins: 16,
            snr_n_draws: 16,
            snr_seed: 5,
            snr_assert_monotone: true,
            compare_ckpt: String::new(),
            compare_steps: 30,
            compare_seed: 0,
            ablate_bands: vec![3],
            ablate_m: vec![3],
            ablate_lambda_f: vec![0.1],
            ablate_routing: vec![RoutingMode::FeiSoft],
            ablate_seeds: vec![0],
            ablate_steps: 400,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| FeraError::Config(format!("bad value `{v}` for key `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(FeraError::Config(format!(
            "bad boolean `{v}` for key `{key}`"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| parse_num(key, p))
        .collect()
}

impl RunConfig {
    /// Apply one `section.key = value` assignment; unknown keys are errors.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let v = value.trim();
        match full.as_str() {
            "field.size" => self.field_size = parse_num(&full, v)?,
            "field.channels" => self.field_channels = parse_num(&full, v)?,
            "data.kind" => {
                if v != "powerlaw" && v != "band_boost" {
                    return Err(FeraError::Config(format!("unknown data kind `{v}`")));
                }
                self.data_kind = v.to_string();
            }
            "data.gamma" => self.data_gamma = parse_num(&full, v)?,
            "data.boost_band" => self.data_boost_band = parse_num(&full, v)?,
            "data.boost_factor" => self.data_boost_factor = parse_num(&full, v)?,
            "data.seed" => self.data_seed = parse_num(&full, v)?,
            "data.train_count" => self.data_train_count = parse_num(&full, v)?,
            "data.val_count" => self.data_val_count = parse_num(&full, v)?,
            "bank.n_bands" => self.bank_n_bands = parse_num(&full, v)?,
            "schedule.kind" => {
                self.schedule_kind = match v {
                    "linear" => ScheduleKind::Linear,
                    "cosine" => ScheduleKind::Cosine,
                    _ => return Err(FeraError::Config(format!("unknown schedule `{v}`"))),
                }
            }
            "schedule.t" => self.schedule_t = parse_num(&full, v)?,
            "denoiser.hidden" => self.denoiser_hidden = parse_num(&full, v)?,
            "denoiser.emb_dim" => self.denoiser_emb_dim = parse_num(&full, v)?,
            "denoiser.seed" => self.denoiser_seed = parse_num(&full, v)?,
            "adapters.m" => self.adapters_m = parse_num(&full, v)?,
            "adapters.rank" => self.adapters_rank = parse_num(&full, v)?,
            "adapters.scale" => self.adapters_scale = parse_num(&full, v)?,
            "adapters.seed" => self.adapters_seed = parse_num(&full, v)?,
            "router.tau" => self.router_tau = parse_num(&full, v)?,
            "router.hidden" => self.router_hidden = parse_num(&full, v)?,
            "router.seed" => self.router_seed = parse_num(&full, v)?,
            "routing.mode" => self.routing_mode = RoutingMode::parse(v)?,
            "routing.thresholds" => {
                self.routing_thresholds = if v.is_empty() {
                    Vec::new()
                } else {
                    parse_list(&full, v)?
                }
            }
            "train.mode" => self.train_mode = TrainMode::parse(v)?,
            "train.steps" => self.train_steps = parse_num(&full, v)?,
            "train.lr" => self.train_lr = parse_num(&full, v)?,
            "train.batch" => self.train_batch = parse_num(&full, v)?,
            "train.seed" => self.train_seed = parse_num(&full, v)?,
            "train.lambda_f" => self.train_lambda_f = parse_num(&full, v)?,
            "train.grad_clip" => self.train_grad_clip = parse_num(&full, v)?,
            "train.val_every" => self.train_val_every = parse_num(&full, v)?,
            "train.fecl_weights" => self.train_fecl_weights = FeclWeighting::parse(v)?,
            "train.base_ckpt" => self.train_base_ckpt = v.to_string(),
            "sample.steps" => self.sample_steps = parse_num(&full, v)?,
            "sample.count" => self.sample_count = parse_num(&full, v)?,
            "sample.seed" => self.sample_seed = parse_num(&full, v)?,
            "sample.ckpt" => self.sample_ckpt = v.to_string(),
            "sample.keep_trajectory" => self.sample_keep_trajectory = parse_bool(&full, v)?,
            "analyze.seed" => self.analyze_seed = parse_num(&full, v)?,
            "snr.n_bins" => self.snr_n_bins = parse_num(&full, v)?,
            "snr.n_draws" => self.snr_n_draws = parse_num(&full, v)?,
            "snr.seed" => self.snr_seed = parse_num(&full, v)?,
            "snr.assert_monotone" => self.snr_assert_monotone = parse_bool(&full, v)?,
            "compare.ckpt" => self.compare_ckpt = v.to_string(),
            "compare.steps" => self.compare_steps = parse_num(&full, v)?,
            "compare.seed" => self.compare_seed = parse_num(&full, v)?,
            "ablate.bands" => self.ablate_bands = parse_list(&full, v)?,
            "ablate.m" => self.ablate_m = parse_list(&full, v)?,
            "ablate.lambda_f" => self.ablate_lambda_f = parse_list(&full, v)?,
            "ablate.routing" => {
                self.ablate_routing = v
                    .split(',')
                    .map(|p| RoutingMode::parse(p.trim()))
                    .collect::<Result<_>>()?
            }
            "ablate.seeds" => self.ablate_seeds = parse_list(&full, v)?,
            "ablate.steps" => self.ablate_steps = parse_num(&full, v)?,
            _ => {
                return Err(FeraError::Config(format!("unknown config key `{full}`")));
            }
        }
        Ok(())
    }

    /// Parse an INI document into this config.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| FeraError::Config(format!("line {}: bad section", ln + 1)))?;
                section = name.trim().to_string();
            } else if let Some((k, v)) = line.split_once('=') {
                if section.is_empty() {
                    return Err(FeraError::Config(format!(
                        "line {}: key outside any section",
                        ln + 1
                    )));
                }
                self.apply(&section, k.trim(), v.trim())?;
            } else {
                return Err(FeraError::Config(format!(
                    "line {}: expected `key = value`",
                    ln + 1
                )));
            }
        }
        Ok(())
    }

    /// Load: defaults, then the optional file, then `--set` overrides.
    pub fn load(path: Option<&std::path::Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            cfg.apply_ini(&text)?;
        }
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                FeraError::Config(format!("--set needs section.key=value, got `{s}`"))
            })?;
            let (section, key) = k.trim().split_once('.').ok_or_else(|| {
                FeraError::Config(format!("--set key must be section.key, got `{k}`"))
            })?;
            cfg.apply(section, key, v.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical INI echo of every key, defaults merged, fixed order.
    pub fn to_ini_string(&self) -> String {
        let thresholds = self
            .routing_thresholds
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let join_us = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_u64 = |v: &[u64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_r = |v: &[RoutingMode]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "[field]\nsize = {}\nchannels = {}\n\n\
             [data]\nkind = {}\ngamma = {}\nboost_band = {}\nboost_factor = {}\nseed = {}\ntrain_count = {}\nval_count = {}\n\n\
             [bank]\nn_bands = {}\n\n\
             [schedule]\nkind = {}\nt = {}\n\n\
             [denoiser]\nhidden = {}\nemb_dim = {}\nseed = {}\n\n\
             [adapters]\nm = {}\nrank = {}\nscale = {}\nseed = {}\n\n\
             [router]\ntau = {}\nhidden = {}\nseed = {}\n\n\
             [routing]\nmode = {}\nthresholds = {}\n\n\
             [train]\nmode = {}\nsteps = {}\nlr = {}\nbatch = {}\nseed = {}\nlambda_f = {}\ngrad_clip = {}\nval_every = {}\nfecl_weights = {}\nbase_ckpt = {}\n\n\
             [sample]\nsteps = {}\ncount = {}\nseed = {}\nckpt = {}\nkeep_trajectory = {}\n\n\
             [analyze]\nseed = {}\n\n\
             [snr]\nn_bins = {}\nn_draws = {}\nseed = {}\nassert_monotone = {}\n\n\
             [compare]\nckpt = {}\nsteps = {}\nseed = {}\n\n\
             [ablate]\nbands = {}\nm = {}\nlambda_f = {}\nrouting = {}\nseeds = {}\nsteps = {}\n",
            self.field_size,
            self.field_channels,
            self.data_kind,
            self.data_gamma,
            self.data_boost_band,
            self.data_boost_factor,
            self.data_seed,
            self.data_train_count,
            self.data_val_count,
            self.bank_n_bands,
            self.schedule_kind,
            self.schedule_t,
            self.denoiser_hidden,
            self.denoiser_emb_dim,
            self.denoiser_seed,
            self.adapters_m,
            self.adapters_rank,
            self.adapters_scale,
            self.adapters_seed,
            self.router_tau,
            self.router_hidden,
            self.router_seed,
            self.routing_mode,
            thresholds,
            self.train_mode,
            self.train_steps,
            self.train_lr,
            self.train_batch,
            self.train_seed,
            self.train_lambda_f,
            self.train_grad_clip,
            self.train_val_every,
            self.train_fecl_weights,
            self.train_base_ckpt,
            self.sample_steps,
            self.sample_count,
            self.sample_seed,
            self.sample_ckpt,
            self.sample_keep_trajectory,
            self.analyze_seed,
            self.snr_n_bins,
            self.snr_n_draws,
            self.snr_seed,
            self.snr_assert_monotone,
            self.compare_ckpt,
            self.compare_steps,
            self.compare_seed,
            join_us(&self.ablate_bands),
            join_us(&self.ablate_m),
            join_f(&self.ablate_lambda_f),
            join_r(&self.ablate_routing),
            join_u64(&self.ablate_seeds),
            self.ablate_steps,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_named_in_error() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("train", "nonsense", "1").unwrap_err();
        assert!(err.to_string().contains("train.nonsense"), "{err}");
    }

    #[test]
    fn ini_round_trip_is_stable() {
        let cfg = RunConfig::default();
        let echo = cfg.to_ini_string();
        let mut cfg2 = RunConfig::default();
        cfg2.apply_ini(&echo).unwrap();
        assert_eq!(echo, cfg2.to_ini_string());
    }

    #[test]
    fn sets_override_file_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_ini("[train]\nsteps = 50\nlambda_f = 0.2\n").unwrap();
        assert_eq!(cfg.train_steps, 50);
        assert_eq!(cfg.train_lambda_f, 0.2);
        cfg.apply("train", "steps", "75").unwrap();
        assert_eq!(cfg.train_steps, 75);
    }

    #[test]
    fn lists_parse() {
        let mut cfg = RunConfig::default();
        cfg.apply("ablate", "bands", "2,3,4,5").unwrap();
        assert_eq!(cfg.ablate_bands, vec![2, 3, 4, 5]);
        cfg.apply("ablate", "routing", "fei_soft,timestep_hard").unwrap();
        assert_eq!(cfg.ablate_routing.len(), 2);
        cfg.apply("routing", "thresholds", "333,666").unwrap();
        assert_eq!(cfg.routing_thresholds, vec![333, 666]);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_ini("# top comment\n\n[field]\nsize = 64 # inline\n").unwrap();
        assert_eq!(cfg.field_size, 64);
    }
}
