//! Key-value configuration files.
//!
//! A config file is plain text, one `key = value` pair per line, `#` starts a
//! comment. Unknown keys are rejected so typos surface as usage errors rather
//! than silently falling back to defaults. All keys are optional; defaults
//! reproduce the reference setup documented in the README.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-step arrival probability of an operating period is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HazardMode {
    /// Conditional arrival probability `Pr(T = e) / Pr(T >= e)`. Sampled
    /// period lengths reproduce the travel-time law exactly.
    Exact,
    /// Variant whose denominator is the product `prod_x (1 - Pr(T = x))`
    /// over elapsed steps; kept selectable for comparison.
    ProductForm,
}

/// Feature scaling for the Q-network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureRange {
    /// Min-max scaling onto `[-1, 1]`.
    Symmetric,
    /// Min-max scaling onto `[0, 1]`.
    Unit,
}

/// Environment and schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub dt_minutes: u32,
    /// First departure of this bus, minutes since midnight.
    pub first_departure_min: u32,
    /// Gap between two consecutive departures of the same bus, minutes.
    pub headway_minutes: u32,
    /// Number of operating periods in the service day (K). There are K-1
    /// charging periods sandwiched between them.
    pub num_operating_periods: u32,
    /// Shift applied to this bus's schedule, minutes (for staggered fleets).
    pub bus_offset_minutes: u32,
    /// Rush-hour windows as (start, end) minutes since midnight.
    pub rush_windows: Vec<(u32, u32)>,
    pub travel_mean_rush_min: f64,
    pub travel_mean_offpeak_min: f64,
    pub travel_std_min: f64,
    pub e_min_kwh: f64,
    pub e_max_kwh: f64,
    pub c_max_kw: f64,
    pub d_max_kw: f64,
    /// Penalty charged once when the battery drops below `e_min_kwh`.
    pub terminal_penalty: f64,
    /// Number of past prices in the observation window, in addition to the
    /// current one (the window holds `price_window + 1` entries).
    pub price_window: usize,
    /// Mean operating discharge power, positive magnitude in kW. When absent
    /// it is derived so a mean-length off-peak trip consumes
    /// `consumption_fraction` of the battery.
    pub discharge_mean_kw: Option<f64>,
    pub discharge_std_kw: f64,
    /// Multiplier on the discharge mean while inside a rush window.
    pub rush_discharge_multiplier: f64,
    /// Fraction of `e_max_kwh` a mean-length off-peak trip consumes; used to
    /// derive the default discharge mean.
    pub consumption_fraction: f64,
    /// Number of evenly spaced charging-power levels spanning
    /// `[-d_max_kw, c_max_kw]` (must be odd so 0 kW is a level).
    pub action_levels: usize,
    /// Add the battery-capacity window edges as extra action levels when they
    /// cut off grid levels.
    pub clip_endpoints: bool,
    /// Spacing of the charging-target grid in kWh.
    pub option_step_kwh: f64,
    pub hazard_mode: HazardMode,
    /// Battery level at the start of the day.
    pub initial_soc_kwh: f64,
    /// Price file path, resolved relative to the config file's directory.
    pub price_file: Option<PathBuf>,
    /// Day index separating the training span from the test span.
    pub train_boundary_day: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt_minutes: 10,
            first_departure_min: 6 * 60 + 30,
            headway_minutes: 90,
            num_operating_periods: 12,
            bus_offset_minutes: 0,
            rush_windows: vec![(7 * 60, 9 * 60), (17 * 60, 19 * 60)],
            travel_mean_rush_min: 50.0,
            travel_mean_offpeak_min: 40.0,
            travel_std_min: 8.0,
            e_min_kwh: 0.0,
            e_max_kwh: 240.0,
            c_max_kw: 120.0,
            d_max_kw: 120.0,
            terminal_penalty: 50.0,
            price_window: 4,
            discharge_mean_kw: None,
            discharge_std_kw: 10.0,
            rush_discharge_multiplier: 1.0,
            consumption_fraction: 0.25,
            action_levels: 5,
            clip_endpoints: true,
            option_step_kwh: 10.0,
            hazard_mode: HazardMode::Exact,
            initial_soc_kwh: 240.0,
            price_file: None,
            train_boundary_day: 31,
        }
    }
}

impl EnvConfig {
    /// Mean discharge magnitude in kW, either configured or derived from the
    /// consumption fraction over a mean-length off-peak trip.
    pub fn effective_discharge_mean_kw(&self) -> f64 {
        match self.discharge_mean_kw {
            Some(m) => m,
            None => {
                let trip_hours = self.travel_mean_offpeak_min / 60.0;
                self.consumption_fraction * self.e_max_kwh / trip_hours
            }
        }
    }

    pub fn dt_hours(&self) -> f64 {
        f64::from(self.dt_minutes) / 60.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dt_minutes == 0 || 60 % self.dt_minutes != 0 {
            return Err(Error::Config(format!(
                "dt_minutes must divide 60, got {}",
                self.dt_minutes
            )));
        }
        if self.num_operating_periods < 2 {
            return Err(Error::Config(
                "num_operating_periods must be at least 2".into(),
            ));
        }
        if self.headway_minutes % self.dt_minutes != 0 {
            return Err(Error::Config(
                "headway_minutes must be a multiple of dt_minutes".into(),
            ));
        }
        if self.e_max_kwh <= self.e_min_kwh {
            return Err(Error::Config("e_max_kwh must exceed e_min_kwh".into()));
        }
        if self.action_levels < 3 || self.action_levels % 2 == 0 {
            return Err(Error::Config(
                "action_levels must be an odd number >= 3 so that 0 kW is a level".into(),
            ));
        }
        if !(self.e_min_kwh..=self.e_max_kwh).contains(&self.initial_soc_kwh) {
            return Err(Error::Config(
                "initial_soc_kwh must lie within the battery bounds".into(),
            ));
        }
        Ok(())
    }
}

/// Training-run parameters shared by all agent modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Episode index below which high-level rewards come from replaying the
    /// fixed max-power policy instead of the learned low-level policy.
    pub phase_threshold: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the episode budget over which epsilon anneals linearly.
    pub eps_anneal_frac: f64,
    pub batch_low: usize,
    pub batch_high: usize,
    pub lr_low: f64,
    pub lr_high: f64,
    pub lr_flat: f64,
    /// Learning rate for the fixed-target baseline's network.
    pub lr_ddqn_low: f64,
    pub hidden: Vec<usize>,
    /// Hidden sizes for the fixed-target baseline's network.
    pub hidden_ddqn_low: Vec<usize>,
    pub buffer_low: usize,
    pub buffer_high: usize,
    /// Hard target-network copy every this many gradient updates.
    pub target_sync: usize,
    /// Run an evaluation every this many training episodes.
    pub eval_every: usize,
    /// Number of greedy test episodes per evaluation.
    pub eval_episodes: usize,
    /// Coefficient of the squared charging-target miss penalty.
    pub target_penalty: f64,
    /// Coefficient of the squared range-anxiety penalty (fixed-target baseline).
    pub range_anxiety: f64,
    pub feature_range: FeatureRange,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 24_000,
            phase_threshold: 6_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_frac: 0.6,
            batch_low: 64,
            batch_high: 128,
            lr_low: 5e-6,
            lr_high: 5e-6,
            lr_flat: 5e-6,
            lr_ddqn_low: 1e-6,
            hidden: vec![256, 300, 100],
            hidden_ddqn_low: vec![400, 300, 100],
            buffer_low: 100_000,
            buffer_high: 10_000,
            target_sync: 200,
            eval_every: 100,
            eval_episodes: 10,
            target_penalty: 0.005,
            range_anxiety: 0.0006,
            feature_range: FeatureRange::Symmetric,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be positive".into()));
        }
        if self.phase_threshold > self.episodes {
            return Err(Error::Config(
                "phase_threshold cannot exceed episodes".into(),
            ));
        }
        for (name, v) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.target_penalty <= 0.0 || self.range_anxiety <= 0.0 {
            return Err(Error::Config(
                "target_penalty_coeff and range_anxiety_coeff must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Exploration probability for a 0-based episode index.
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let span = (self.episodes as f64 * self.eps_anneal_frac).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Full configuration: environment plus training parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Config {
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Config::from_str_content(&text)?;
        // Resolve the price file relative to the config file location.
        if let Some(pf) = &cfg.env.price_file {
            if pf.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.env.price_file = Some(dir.join(pf));
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_str_content(text: &str) -> Result<Config> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        let mut cfg = Config::default();
        for (key, value) in &pairs {
            cfg.apply(key, value)?;
        }
        cfg.env.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.env;
        let t = &mut self.train;
        match key {
            "dt_minutes" => e.dt_minutes = parse(key, value)?,
            "first_departure" => e.first_departure_min = parse_clock(value)?,
            "headway_minutes" => e.headway_minutes = parse(key, value)?,
            "num_operating_periods" => e.num_operating_periods = parse(key, value)?,
            "bus_offset_minutes" => e.bus_offset_minutes = parse(key, value)?,
            "rush_windows" => e.rush_windows = parse_windows(value)?,
            "travel_mean_rush" => e.travel_mean_rush_min = parse(key, value)?,
            "travel_mean_offpeak" => e.travel_mean_offpeak_min = parse(key, value)?,
            "travel_std" => e.travel_std_min = parse(key, value)?,
            "e_min_kwh" => e.e_min_kwh = parse(key, value)?,
            "e_max_kwh" => e.e_max_kwh = parse(key, value)?,
            "c_max_kw" => e.c_max_kw = parse(key, value)?,
            "d_max_kw" => e.d_max_kw = parse(key, value)?,
            "c_end" => e.terminal_penalty = parse(key, value)?,
            "w_p" => e.price_window = parse(key, value)?,
            "discharge_mean_kw" => e.discharge_mean_kw = Some(parse(key, value)?),
            "discharge_std_kw" => e.discharge_std_kw = parse(key, value)?,
            "rush_discharge_multiplier" => e.rush_discharge_multiplier = parse(key, value)?,
            "consumption_fraction" => e.consumption_fraction = parse(key, value)?,
            "action_levels" => e.action_levels = parse(key, value)?,
            "clip_endpoints" => e.clip_endpoints = parse_bool(key, value)?,
            "option_step_kwh" => e.option_step_kwh = parse(key, value)?,
            "hazard_mode" => {
                e.hazard_mode = match value {
                    "exact" => HazardMode::Exact,
                    "product_form" => HazardMode::ProductForm,
                    other => {
                        return Err(Error::Config(format!(
                            "hazard_mode must be `exact` or `product_form`, got `{other}`"
                        )))
                    }
                }
            }
            "initial_soc_kwh" => e.initial_soc_kwh = parse(key, value)?,
            "price_file" => e.price_file = Some(PathBuf::from(value)),
            "train_boundary_day" => e.train_boundary_day = parse(key, value)?,
            "episodes" => t.episodes = parse(key, value)?,
            "phase_threshold" => t.phase_threshold = parse(key, value)?,
            "eps_start" => t.eps_start = parse(key, value)?,
            "eps_end" => t.eps_end = parse(key, value)?,
            "eps_anneal_frac" => t.eps_anneal_frac = parse(key, value)?,
            "batch_low" => t.batch_low = parse(key, value)?,
            "batch_high" => t.batch_high = parse(key, value)?,
            "lr_low" => t.lr_low = parse(key, value)?,
            "lr_high" => t.lr_high = parse(key, value)?,
            "lr_flat" => t.lr_flat = parse(key, value)?,
            "lr_ddqn_low" => t.lr_ddqn_low = parse(key, value)?,
            "hidden_sizes" => t.hidden = parse_list(key, value)?,
            "hidden_sizes_ddqn_low" => t.hidden_ddqn_low = parse_list(key, value)?,
            "buffer_low" => t.buffer_low = parse(key, value)?,
            "buffer_high" => t.buffer_high = parse(key, value)?,
            "target_sync" => t.target_sync = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "eval_episodes" => t.eval_episodes = parse(key, value)?,
            "target_penalty_coeff" => t.target_penalty = parse(key, value)?,
            "range_anxiety_coeff" => t.range_anxiety = parse(key, value)?,
            "feature_range" => {
                t.feature_range = match value {
                    "symmetric" => FeatureRange::Symmetric,
                    "unit" => FeatureRange::Unit,
                    other => {
                        return Err(Error::Config(format!(
                            "feature_range must be `symmetric` or `unit`, got `{other}`"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse boolean `{value}` for key `{key}`"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<Vec<_>>>()
}

/// Parses `HH:MM` as minutes since midnight; `24:00` maps to 1440.
pub fn parse_clock(value: &str) -> Result<u32> {
    let (h, m) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("expected HH:MM clock time, got `{value}`")))?;
    let h: u32 = parse("clock hours", h)?;
    let m: u32 = parse("clock minutes", m)?;
    if h > 24 || m >= 60 || (h == 24 && m != 0) {
        return Err(Error::Config(format!("clock time out of range: `{value}`")));
    }
    Ok(h * 60 + m)
}

/// Formats minutes since midnight as `HH:MM`, wrapping past midnight.
pub fn format_clock(minutes: u32) -> String {
    let m = minutes % (24 * 60);
    format!("{:02}:{:02}", m / 60, m % 60)
}

fn parse_windows(value: &str) -> Result<Vec<(u32, u32)>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|w| {
            let (a, b) = w
                .trim()
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("expected HH:MM-HH:MM window, got `{w}`")))?;
            Ok((parse_clock(a.trim())?, parse_clock(b.trim())?))
        })
        .collect()
}

/// True when the clock time (minutes since midnight) falls in any window.
/// Window ends are exclusive.
pub fn in_windows(windows: &[(u32, u32)], clock_min: u32) -> bool {
    let c = clock_min % (24 * 60);
    windows.iter().any(|&(a, b)| a <= c && c < b)
}
