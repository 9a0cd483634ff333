//! Scenario configuration: line-oriented `key = value` text with `#` comments.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::channel::{ChannelParams, LinkBudget};
use crate::traffic::{ServiceClass, TrafficParams};
use crate::utility::{CaseParams, UtilitySpec};

/// Highest MCS spectral efficiency, bits per symbol.
pub const MCS_CAP_BITS: f64 = 5.25;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    InvalidValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerMode {
    BestChannel,
    UtilityGreedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMetric {
    /// Normalized utility of each user's window throughput.
    Utility,
    /// Mean normalized per-subcarrier optimizer utility.
    Objective,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizeTo {
    /// Total cell capacity at the top MCS.
    Auto,
    Kbps(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityShape {
    Power,
    Polynomial,
    Exponential,
    ExponentialUnit,
    ProportionalFairness,
    Sigmoid,
    Linear,
}

impl UtilityShape {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "power" => Self::Power,
            "polynomial" => Self::Polynomial,
            "exponential" => Self::Exponential,
            "exponential_unit" => Self::ExponentialUnit,
            "proportional_fairness" | "log" => Self::ProportionalFairness,
            "sigmoid" => Self::Sigmoid,
            "linear" => Self::Linear,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Power => "power",
            Self::Polynomial => "polynomial",
            Self::Exponential => "exponential",
            Self::ExponentialUnit => "exponential_unit",
            Self::ProportionalFairness => "proportional_fairness",
            Self::Sigmoid => "sigmoid",
            Self::Linear => "linear",
        }
    }
}

/// Utility of one service class. The argument is the user's rate divided by
/// `rate_unit_kbps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassUtility {
    pub kind: UtilityShape,
    pub params: Vec<f64>,
    pub normalize_to: NormalizeTo,
    pub rate_unit_kbps: f64,
}

impl ClassUtility {
    pub fn spec(&self) -> Result<UtilitySpec, ConfigError> {
        let p = &self.params;
        let need = |n: usize| -> Result<(), ConfigError> {
            if p.len() < n {
                Err(ConfigError::Invalid(format!(
                    "utility kind {} needs {n} params, got {}",
                    self.kind.name(),
                    p.len()
                )))
            } else {
                Ok(())
            }
        };
        let case = match self.kind {
            UtilityShape::Power => {
                need(2)?;
                if p[1] < 0.0 || p[1].fract() != 0.0 {
                    return Err(ConfigError::Invalid(
                        "power exponent must be a whole number".into(),
                    ));
                }
                CaseParams::Power {
                    a: p[0],
                    k: p[1] as u32,
                }
            }
            UtilityShape::Polynomial => {
                need(1)?;
                CaseParams::Polynomial { coeffs: p.clone() }
            }
            UtilityShape::Exponential => {
                need(1)?;
                CaseParams::Exponential { a: p[0] }
            }
            UtilityShape::ExponentialUnit => CaseParams::ExponentialUnit,
            UtilityShape::ProportionalFairness => {
                need(3)?;
                CaseParams::ProportionalFairness {
                    weight: p[0],
                    slope: p[1],
                    intercept: p[2],
                    offset: p.get(3).copied().unwrap_or(0.0),
                    exp_coeff: p.get(4).copied().unwrap_or(0.0),
                }
            }
            UtilityShape::Sigmoid => {
                need(1)?;
                CaseParams::Sigmoid { x0: p[0] }
            }
            UtilityShape::Linear => {
                need(1)?;
                CaseParams::Linear { a: p[0] }
            }
        };
        Ok(UtilitySpec::new(case))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub bandwidth_hz: f64,
    pub subcarriers: usize,
    pub tx_power_dbm: f64,
    pub noise_dbm: f64,
    pub ber_target: f64,
    pub channel: ChannelParams,
    /// Frames per channel block; channel, partition and powers are held within a block.
    pub block_frames: usize,
    pub traffic: TrafficParams,
    /// Users per class, indexed like [`ServiceClass::ALL`].
    pub users: [usize; 3],
    pub utility: [ClassUtility; 3],
    pub scheduler: SchedulerMode,
    pub lookahead: usize,
    pub quantize_mcs: bool,
    pub report_metric: ReportMetric,
    pub frame_s: f64,
    pub duration_s: f64,
    pub report_window_s: f64,
    pub seed: u64,
    pub alloc_tol: f64,
    pub alloc_max_iter: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let ch = ChannelParams::default();
        Self {
            bandwidth_hz: 1_024_000.0,
            subcarriers: 256,
            tx_power_dbm: 43.0,
            noise_dbm: -108.0,
            ber_target: 1e-4,
            channel: ch,
            block_frames: 8,
            traffic: TrafficParams::default(),
            users: [10, 4, 20],
            utility: [
                ClassUtility {
                    kind: UtilityShape::Sigmoid,
                    params: vec![8.0],
                    normalize_to: NormalizeTo::Kbps(64.0),
                    rate_unit_kbps: 4.0,
                },
                ClassUtility {
                    kind: UtilityShape::Sigmoid,
                    params: vec![8.0],
                    normalize_to: NormalizeTo::Kbps(512.0),
                    rate_unit_kbps: 22.5,
                },
                ClassUtility {
                    kind: UtilityShape::ProportionalFairness,
                    params: vec![1.0, 1.0, 1.0],
                    normalize_to: NormalizeTo::Auto,
                    rate_unit_kbps: 1.0,
                },
            ],
            scheduler: SchedulerMode::BestChannel,
            lookahead: 16,
            quantize_mcs: true,
            report_metric: ReportMetric::Utility,
            frame_s: 0.000125,
            duration_s: 10.0,
            report_window_s: 0.5,
            seed: 1,
            alloc_tol: 1e-8,
            alloc_max_iter: 200,
        }
    }
}

fn bad(key: &str, value: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        msg: msg.into(),
    }
}

fn num(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v.parse().map_err(|_| bad(key, v, "expected a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad(key, v, "must be finite"))
    }
}

fn count(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse()
        .map_err(|_| bad(key, v, "expected a non-negative integer"))
}

fn flag(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

impl ScenarioConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        if let Some(rest) = key.strip_prefix("utility.") {
            return self.set_utility(key, rest, v);
        }
        match key {
            "channel.bandwidth_hz" => self.bandwidth_hz = num(key, v)?,
            "channel.subcarriers" => self.subcarriers = count(key, v)?,
            "channel.cell_radius_m" => self.channel.cell_radius_m = num(key, v)?,
            "channel.tx_power_dbm" => self.tx_power_dbm = num(key, v)?,
            "channel.noise_dbm" => self.noise_dbm = num(key, v)?,
            "channel.ber_target" => self.ber_target = num(key, v)?,
            "channel.shadow_sigma_db" => self.channel.shadow_sigma_db = num(key, v)?,
            "channel.speed_mean_mps" => self.channel.speed_mean_mps = num(key, v)?,
            "channel.speed_std_mps" => self.channel.speed_std_mps = num(key, v)?,
            "channel.gamma_divides" => self.channel.gamma_divides = flag(key, v)?,
            "channel.carrier_hz" => self.channel.carrier_hz = num(key, v)?,
            "channel.shadow_decorr_m" => self.channel.shadow_decorr_m = num(key, v)?,
            "channel.block_frames" => self.block_frames = count(key, v)?,
            "traffic.voip.on_mean_s" => self.traffic.voip_on_mean_s = num(key, v)?,
            "traffic.voip.off_mean_s" => self.traffic.voip_off_mean_s = num(key, v)?,
            "traffic.voip.rate_kbps" => self.traffic.voip_rate_kbps = num(key, v)?,
            "traffic.voip.deadline_ms" => self.traffic.voip_deadline_ms = num(key, v)?,
            "traffic.video.state_mean_ms" => self.traffic.video_state_mean_ms = num(key, v)?,
            "traffic.video.rate_min_kbps" => self.traffic.video_rate_min_kbps = num(key, v)?,
            "traffic.video.rate_max_kbps" => self.traffic.video_rate_max_kbps = num(key, v)?,
            "traffic.video.rate_mean_kbps" => self.traffic.video_rate_mean_kbps = num(key, v)?,
            "traffic.video.deadline_s" => self.traffic.video_deadline_s = num(key, v)?,
            "traffic.voip.users" => self.users[0] = count(key, v)?,
            "traffic.video.users" => self.users[1] = count(key, v)?,
            "traffic.be.users" => self.users[2] = count(key, v)?,
            "scheduler.mode" => {
                self.scheduler = match v {
                    "best_channel" => SchedulerMode::BestChannel,
                    "utility_greedy" => SchedulerMode::UtilityGreedy,
                    _ => return Err(bad(key, v, "expected best_channel or utility_greedy")),
                }
            }
            "scheduler.lookahead" => self.lookahead = count(key, v)?,
            "link.quantize_mcs" => self.quantize_mcs = flag(key, v)?,
            "report.metric" => {
                self.report_metric = match v {
                    "utility" => ReportMetric::Utility,
                    "objective" => ReportMetric::Objective,
                    _ => return Err(bad(key, v, "expected utility or objective")),
                }
            }
            "sim.frame_s" => self.frame_s = num(key, v)?,
            "sim.duration_s" => self.duration_s = num(key, v)?,
            "sim.report_window_s" => self.report_window_s = num(key, v)?,
            "sim.seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| bad(key, v, "expected an unsigned integer"))?
            }
            "alloc.tol" => self.alloc_tol = num(key, v)?,
            "alloc.max_iter" => self.alloc_max_iter = count(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn set_utility(&mut self, key: &str, rest: &str, v: &str) -> Result<(), ConfigError> {
        let (class, field) = rest
            .split_once('.')
            .ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        let class =
            ServiceClass::parse(class).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        let u = &mut self.utility[class.index()];
        match field {
            "kind" => {
                u.kind =
                    UtilityShape::parse(v).ok_or_else(|| bad(key, v, "unknown utility kind"))?;
            }
            "params" => u.params = list(key, v)?,
            "normalize_to" => {
                u.normalize_to = if v == "auto" {
                    NormalizeTo::Auto
                } else {
                    NormalizeTo::Kbps(num(key, v)?)
                }
            }
            "rate_unit_kbps" => u.rate_unit_kbps = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(self.frame_s > 0.0) {
            return fail("sim.frame_s must be > 0");
        }
        if !(self.duration_s >= 0.0) {
            return fail("sim.duration_s must be >= 0");
        }
        if !(self.report_window_s >= self.frame_s) {
            return fail("sim.report_window_s must be at least one frame");
        }
        if self.block_frames == 0 {
            return fail("channel.block_frames must be >= 1");
        }
        if self.subcarriers == 0 || !(self.bandwidth_hz > 0.0) {
            return fail("need a positive bandwidth and at least one subcarrier");
        }
        if !(self.ber_target > 0.0 && self.ber_target <= 0.2) {
            return fail("channel.ber_target must be in (0, 0.2]");
        }
        if !(self.channel.cell_radius_m > 0.0) {
            return fail("channel.cell_radius_m must be > 0");
        }
        if self.channel.speed_mean_mps < 0.0 || self.channel.speed_std_mps < 0.0 {
            return fail("speeds must be >= 0");
        }
        if !(self.alloc_tol > 0.0) || self.alloc_max_iter == 0 {
            return fail("alloc.tol and alloc.max_iter must be positive");
        }
        for (c, u) in ServiceClass::ALL.iter().zip(&self.utility) {
            if !(u.rate_unit_kbps > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "utility.{c}.rate_unit_kbps must be > 0"
                )));
            }
            if let NormalizeTo::Kbps(m) = u.normalize_to {
                if !(m > 0.0) {
                    return Err(ConfigError::Invalid(format!(
                        "utility.{c}.normalize_to must be > 0"
                    )));
                }
            }
            u.spec()?;
        }
        Ok(())
    }

    pub fn link_budget(&self) -> Result<LinkBudget, ConfigError> {
        LinkBudget::new(
            self.tx_power_dbm,
            self.noise_dbm,
            self.ber_target,
            self.bandwidth_hz,
            self.subcarriers,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn delta_f_hz(&self) -> f64 {
        self.bandwidth_hz / self.subcarriers as f64
    }

    /// Cell throughput with every subcarrier at the top MCS, in kbps.
    pub fn cell_capacity_kbps(&self) -> f64 {
        self.subcarriers as f64 * MCS_CAP_BITS * self.delta_f_hz() / 1e3
    }

    /// Normalization rate of a class, in kbps.
    pub fn normalize_kbps(&self, class: ServiceClass) -> f64 {
        match self.utility[class.index()].normalize_to {
            NormalizeTo::Auto => self.cell_capacity_kbps(),
            NormalizeTo::Kbps(m) => m,
        }
    }

    pub fn total_users(&self) -> usize {
        self.users.iter().sum()
    }

    pub fn class_utility(&self, class: ServiceClass) -> &ClassUtility {
        &self.utility[class.index()]
    }
}

impl FromStr for ScenarioConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerMode::BestChannel => "best_channel",
            SchedulerMode::UtilityGreedy => "utility_greedy",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.users, [10, 4, 20]);
        assert!((cfg.cell_capacity_kbps() - 5376.0).abs() < 1e-9);
    }

    #[test]
    fn parses_keys_and_comments() {
        let text = "\
# Fig. 4 style
traffic.video.users = 12   # trailing comment
scheduler.mode = utility_greedy
utility.be.kind = log
utility.be.params = 2, 1, 1
utility.voip.normalize_to = auto
link.quantize_mcs = false
sim.seed = 99
";
        let cfg: ScenarioConfig = text.parse().unwrap();
        assert_eq!(cfg.users[1], 12);
        assert_eq!(cfg.scheduler, SchedulerMode::UtilityGreedy);
        assert_eq!(cfg.utility[2].params, vec![2.0, 1.0, 1.0]);
        assert_eq!(cfg.utility[0].normalize_to, NormalizeTo::Auto);
        assert!(!cfg.quantize_mcs);
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert_eq!(
            ScenarioConfig::parse("channel.colour = red").unwrap_err(),
            ConfigError::UnknownKey("channel.colour".into())
        );
        assert!(matches!(
            ScenarioConfig::parse("utility.ftp.kind = linear").unwrap_err(),
            ConfigError::UnknownKey(_)
        ));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(matches!(
            ScenarioConfig::parse("\n\njust words").unwrap_err(),
            ConfigError::Syntax { line: 3, .. }
        ));
        assert!(matches!(
            ScenarioConfig::parse("traffic.voip.users = -3").unwrap_err(),
            ConfigError::InvalidValue { .. }
        ));
        assert!(matches!(
            ScenarioConfig::parse("sim.report_window_s = 0.00001").unwrap_err(),
            ConfigError::Invalid(_)
        ));
        assert!(
            ScenarioConfig::parse("utility.video.kind = sigmoid\nutility.video.params =").is_err()
        );
    }
}
