use serde::{Deserialize, Serialize};

use crate::accelerator::{AcceleratorError, AcceleratorProfile, HashOracle, LabelOracle, TruthOracle};
use crate::batching::{BatchMode, BatchingError, PolicyConfig};
use crate::cache::{CacheConfig, CacheError};
use crate::flowtable::{FlowTableConfig, FlowTableError};
use crate::model::{DEFAULT_NUM_CLASSES, MICROS_PER_SEC, SimTime};
use crate::ring::DEFAULT_RING_CAPACITY;

/// How flow managers, analytics managers and chips are wired in a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[serde(alias = "1:1:1")]
    OneOneOne,
    /// Two flow managers, each with its own ring, feed one analytics manager.
    #[serde(alias = "2:1:1")]
    TwoOneOne,
    /// One analytics manager drives two devices.
    #[serde(alias = "1:1:2")]
    OneOneTwo,
}

impl Topology {
    pub fn flow_managers(self) -> usize {
        match self {
            Topology::TwoOneOne => 2,
            _ => 1,
        }
    }

    pub fn devices(self) -> usize {
        match self {
            Topology::OneOneTwo => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Topology::OneOneOne => "1:1:1",
            Topology::TwoOneOne => "2:1:1",
            Topology::OneOneTwo => "1:1:2",
        }
    }
}

/// Order in which an analytics manager drains several rings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOrder {
    /// The ring drained first rotates every cycle.
    RoundRobin,
    /// Always ring 0 first.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deployment {
    pub topology: Topology,
    #[serde(default = "one")]
    pub pipelines: usize,
    #[serde(default = "round_robin")]
    pub merge_order: MergeOrder,
}

fn one() -> usize {
    1
}

fn round_robin() -> MergeOrder {
    MergeOrder::RoundRobin
}

impl Deployment {
    pub fn new(topology: Topology, pipelines: usize) -> Self {
        Self {
            topology,
            pipelines,
            merge_order: MergeOrder::RoundRobin,
        }
    }
}

impl Default for Deployment {
    fn default() -> Self {
        Self::new(Topology::OneOneOne, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Ground-truth labels from the trace, hashing when absent.
    Truth,
    /// Feature hash only.
    Hash,
}

impl OracleKind {
    pub fn build(self, classes: u32) -> Box<dyn LabelOracle> {
        match self {
            OracleKind::Truth => Box::new(TruthOracle::new(classes)),
            OracleKind::Hash => Box::new(HashOracle::new(classes)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub deployment: Deployment,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// `None` disables the cache.
    #[serde(default)]
    pub cache: Option<CacheConfig>,
    #[serde(default = "AcceleratorProfile::tpu1")]
    pub profile: AcceleratorProfile,
    #[serde(default = "FlowTableConfig::end_to_end")]
    pub flow_table: FlowTableConfig,
    #[serde(default = "default_ring_capacity")]
    pub ring_capacity: usize,
    #[serde(default = "default_oracle")]
    pub oracle: OracleKind,
    #[serde(default = "default_classes")]
    pub classes: u32,
    #[serde(default = "default_window_ms")]
    pub window_ms: u64,
}

fn default_ring_capacity() -> usize {
    DEFAULT_RING_CAPACITY
}

fn default_oracle() -> OracleKind {
    OracleKind::Truth
}

fn default_classes() -> u32 {
    DEFAULT_NUM_CLASSES
}

fn default_window_ms() -> u64 {
    1_000
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            deployment: Deployment::default(),
            policy: PolicyConfig::default(),
            cache: None,
            profile: AcceleratorProfile::tpu1(),
            flow_table: FlowTableConfig::end_to_end(),
            ring_capacity: default_ring_capacity(),
            oracle: default_oracle(),
            classes: default_classes(),
            window_ms: default_window_ms(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("at least one pipeline is required")]
    NoPipelines,
    #[error("ring capacity must be positive")]
    RingCapacity,
    #[error("window length must be positive")]
    Window,
    #[error("class count must be positive")]
    Classes,
    #[error("timeout {0} ms must be finite and non-negative")]
    Timeout(f64),
    #[error("topology {topology} cannot drive multi-chip profile {profile:?}")]
    Unsupported { topology: &'static str, profile: String },
    #[error(transparent)]
    Profile(#[from] AcceleratorError),
    #[error(transparent)]
    Policy(#[from] BatchingError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    FlowTable(#[from] FlowTableError),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.deployment.pipelines == 0 {
            return Err(ConfigError::NoPipelines);
        }
        if self.ring_capacity == 0 {
            return Err(ConfigError::RingCapacity);
        }
        if self.window_ms == 0 {
            return Err(ConfigError::Window);
        }
        if self.classes == 0 {
            return Err(ConfigError::Classes);
        }
        if !self.policy.timeout_ms.is_finite() || self.policy.timeout_ms < 0.0 {
            return Err(ConfigError::Timeout(self.policy.timeout_ms));
        }
        self.policy.validate()?;
        self.profile.validate()?;
        if self.deployment.topology == Topology::OneOneTwo && self.profile.chips > 1 {
            return Err(ConfigError::Unsupported {
                topology: self.deployment.topology.as_str(),
                profile: self.profile.name.clone(),
            });
        }
        if let Some(c) = &self.cache {
            crate::cache::PrefixCache::new(*c)?;
        }
        crate::flowtable::FlowTable::check_config(&self.flow_table)?;
        Ok(())
    }

    /// Planning period; `None` when planning is driven by idle chips alone.
    /// A zero timeout means the same thing.
    pub fn period_us(&self) -> Option<SimTime> {
        match self.policy.mode {
            BatchMode::NoTimeout => None,
            _ => {
                let us = (self.policy.timeout_ms * 1_000.0).round() as SimTime;
                (us > 0).then_some(us)
            }
        }
    }

    /// Chips attached to each analytics manager.
    pub fn chips_per_manager(&self) -> usize {
        self.profile.chips * self.deployment.topology.devices()
    }

    pub fn window_us(&self) -> SimTime {
        self.window_ms * MICROS_PER_SEC / 1_000
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn topology_shapes() {
        assert_eq!(Topology::TwoOneOne.flow_managers(), 2);
        assert_eq!(Topology::OneOneTwo.devices(), 2);
        assert_eq!(Topology::OneOneOne.flow_managers() * Topology::OneOneOne.devices(), 1);
    }

    #[test]
    fn zero_timeout_means_no_period() {
        let mut c = SimConfig::default();
        c.policy = PolicyConfig::timeout(0.0);
        assert_eq!(c.period_us(), None);
        c.policy = PolicyConfig::timeout(5.0);
        assert_eq!(c.period_us(), Some(5_000));
        c.policy = PolicyConfig::no_timeout();
        assert_eq!(c.period_us(), None);
    }

    #[test]
    fn rejects_bad_combinations() {
        let mut c = SimConfig::default();
        c.deployment.topology = Topology::OneOneTwo;
        c.profile = AcceleratorProfile::tpu4();
        assert!(matches!(c.validate(), Err(ConfigError::Unsupported { .. })));
        c.profile = AcceleratorProfile::tpu1();
        assert_eq!(c.chips_per_manager(), 2);
        c.validate().unwrap();
        c.deployment.pipelines = 0;
        assert_eq!(c.validate(), Err(ConfigError::NoPipelines));
    }

    #[test]
    fn parses_topology_aliases() {
        let d: Deployment = toml::from_str("topology = \"2:1:1\"\npipelines = 2").unwrap();
        assert_eq!(d.topology, Topology::TwoOneOne);
        assert_eq!(d.merge_order, MergeOrder::RoundRobin);
    }
}
