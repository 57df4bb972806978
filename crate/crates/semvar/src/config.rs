//! Versioned TOML configuration.

use std::path::Path;

use semvar_core::engine::CostModel;
use semvar_core::scheduler::SchedConfig;
use semvar_core::service::ClusterConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Sim,
    Serve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub engines: u32,
    pub block_size: usize,
    pub tokens_per_engine: usize,
    pub latency_bound: usize,
    pub throughput_bound: usize,
    pub split_groups: bool,
    pub prefix_sharing: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let s = SchedConfig::default();
        ClusterSection {
            engines: 1,
            block_size: 16,
            tokens_per_engine: 120_000,
            latency_bound: s.latency_bound,
            throughput_bound: s.throughput_bound,
            split_groups: s.split_groups,
            prefix_sharing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub c0_ms: f64,
    pub c1_ms_per_token: f64,
    pub c2_ms: f64,
    pub c3_ms_per_token: f64,
    pub shared_kernel: bool,
}

impl Default for CostSection {
    fn default() -> Self {
        let c = CostModel::default();
        CostSection {
            c0_ms: c.c0_ms,
            c1_ms_per_token: c.c1_ms_per_token,
            c2_ms: c.c2_ms,
            c3_ms_per_token: c.c3_ms_per_token,
            shared_kernel: c.shared_kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    /// Wall-clock seconds per virtual second.
    pub time_scale: f64,
    pub get_timeout_s: f64,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { addr: "127.0.0.1:8080".into(), time_scale: 1.0, get_timeout_s: 300.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub mode: RunMode,
    pub cluster: ClusterSection,
    pub cost: CostSection,
    pub serve: ServeSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            mode: RunMode::Sim,
            cluster: ClusterSection::default(),
            cost: CostSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        let c = &self.cluster;
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Invalid(format!(
                "unsupported version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if c.engines == 0 {
            return bad("cluster.engines must be at least 1");
        }
        if c.block_size == 0 || c.tokens_per_engine == 0 {
            return bad("cluster.block_size and cluster.tokens_per_engine must be positive");
        }
        if c.latency_bound == 0 || c.latency_bound > c.throughput_bound {
            return bad("need 0 < cluster.latency_bound <= cluster.throughput_bound");
        }
        let k = &self.cost;
        if [k.c0_ms, k.c1_ms_per_token, k.c2_ms, k.c3_ms_per_token].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("cost constants must be finite and non-negative");
        }
        if !(self.serve.time_scale.is_finite() && self.serve.time_scale >= 0.0) {
            return bad("serve.time_scale must be non-negative");
        }
        if !(self.serve.get_timeout_s.is_finite() && self.serve.get_timeout_s > 0.0) {
            return bad("serve.get_timeout_s must be positive");
        }
        Ok(())
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        let c = &self.cluster;
        ClusterConfig {
            engines: c.engines,
            cost: CostModel {
                c0_ms: self.cost.c0_ms,
                c1_ms_per_token: self.cost.c1_ms_per_token,
                c2_ms: self.cost.c2_ms,
                c3_ms_per_token: self.cost.c3_ms_per_token,
                shared_kernel: self.cost.shared_kernel,
            },
            block_size: c.block_size,
            blocks_per_engine: c.tokens_per_engine.div_ceil(c.block_size),
            sched: SchedConfig {
                latency_bound: c.latency_bound,
                throughput_bound: c.throughput_bound,
                split_groups: c.split_groups,
                ..SchedConfig::default()
            },
            prefix_sharing: c.prefix_sharing,
            record_trace: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(Config::from_toml("").unwrap(), c);
        assert_eq!(c.cluster_config().blocks_per_engine, 7500);
    }

    #[test]
    fn partial_override() {
        let c = Config::from_toml("[cluster]\nengines = 4\n[cost]\nshared_kernel = false\n").unwrap();
        assert_eq!(c.cluster.engines, 4);
        assert!(!c.cluster_config().cost.shared_kernel);
        assert_eq!(c.cluster.latency_bound, 6144);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(Config::from_toml("version = 2"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::from_toml("[cluster]\nengines = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::from_toml("[cluster]\nlatency_bound = 70000"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::from_toml("bogus = 1"), Err(ConfigError::Parse(_))));
    }
}
