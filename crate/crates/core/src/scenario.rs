//! Scenario files: a trace source plus a full simulator configuration.
//!
//! ```toml
//! seed = 7
//! profile = "tpu1"
//!
//! [trace]
//! source = "poisson"
//! lambda = 50000.0
//! duration_s = 120.0
//!
//! [deployment]
//! topology = "1:1:1"
//!
//! [policy]
//! mode = "carry_over"
//! timeout_ms = 10.0
//! phi = 0.2
//!
//! [cache]
//! delta = 6
//! capacity = 4096
//! ```

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accelerator::{AcceleratorError, AcceleratorProfile};
use crate::batching::PolicyConfig;
use crate::cache::CacheConfig;
use crate::flowtable::FlowTableConfig;
use crate::model::PacketRecord;
use crate::ring::DEFAULT_RING_CAPACITY;
use crate::sim::live::{run_live, LiveOptions, LiveReport};
use crate::sim::{ConfigError, Deployment, MetricsReport, OracleKind, SimConfig, Simulator};
use crate::traffic::io::read_trace;
use crate::traffic::{Catalog, CatalogConfig, RateSegment, TraceFormat, TraceGenerator, TrafficError};

/// Schema tag written at the top of every report.
pub const REPORT_SCHEMA: &str = "inferline.report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Builtin(String),
    Custom(AcceleratorProfile),
}

impl ProfileSpec {
    pub fn resolve(&self) -> Result<AcceleratorProfile, AcceleratorError> {
        match self {
            ProfileSpec::Builtin(name) => AcceleratorProfile::builtin(name),
            ProfileSpec::Custom(p) => Ok(p.clone()),
        }
    }
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Builtin("tpu1".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    File {
        path: PathBuf,
    },
    Poisson {
        /// Flow arrivals per second.
        lambda: f64,
        duration_s: f64,
        #[serde(default)]
        catalog: CatalogSource,
    },
    Schedule {
        /// `(flows per second, seconds)` segments, played in order.
        segments: Vec<(f64, f64)>,
        #[serde(default)]
        catalog: CatalogSource,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogSource {
    /// Shape catalog CSV; the synthetic catalog is built when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: CatalogConfig,
}

impl CatalogSource {
    pub fn load(&self, seed: u64) -> Result<Catalog, TrafficError> {
        match &self.path {
            Some(p) => Catalog::read_csv(File::open(p)?),
            None => Catalog::synthetic(&self.synthetic, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub trace: TraceSource,
    #[serde(default)]
    pub deployment: Deployment,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub cache: Option<CacheConfig>,
    #[serde(default)]
    pub profile: ProfileSpec,
    #[serde(default = "FlowTableConfig::end_to_end")]
    pub flow_table: FlowTableConfig,
    #[serde(default = "default_ring")]
    pub ring_capacity: usize,
    #[serde(default = "default_oracle")]
    pub oracle: OracleKind,
    #[serde(default = "default_classes")]
    pub classes: u32,
    #[serde(default = "default_window")]
    pub window_ms: u64,
}

fn default_ring() -> usize {
    DEFAULT_RING_CAPACITY
}

fn default_oracle() -> OracleKind {
    OracleKind::Truth
}

fn default_classes() -> u32 {
    crate::model::DEFAULT_NUM_CLASSES
}

fn default_window() -> u64 {
    1_000
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid scenario: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
}

impl From<AcceleratorError> for ScenarioError {
    fn from(e: AcceleratorError) -> Self {
        ScenarioError::Config(ConfigError::Profile(e))
    }
}

/// Report file contents: the scenario that produced it and the metrics.
#[derive(Debug, Clone, Serialize)]
pub struct ReportFile<'a, R: Serialize> {
    pub schema: &'static str,
    pub scenario: &'a Scenario,
    pub report: &'a R,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::from_toml(&text)?;
        // Relative paths are resolved against the scenario file.
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            match &mut s.trace {
                TraceSource::File { path } => fix(path),
                TraceSource::Poisson { catalog, .. } | TraceSource::Schedule { catalog, .. } => {
                    if let Some(p) = &mut catalog.path {
                        fix(p);
                    }
                }
            }
        }
        Ok(s)
    }

    pub fn sim_config(&self) -> Result<SimConfig, ScenarioError> {
        let cfg = SimConfig {
            deployment: self.deployment,
            policy: self.policy,
            cache: self.cache,
            profile: self.profile.resolve()?,
            flow_table: self.flow_table,
            ring_capacity: self.ring_capacity,
            oracle: self.oracle,
            classes: self.classes,
            window_ms: self.window_ms,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed of the shape catalog; the arrival process uses [`Self::arrival_seed`].
    pub fn catalog_seed(&self) -> u64 {
        self.seed
    }

    pub fn arrival_seed(&self) -> u64 {
        self.seed ^ 0x5DEE_CE66_D1CE_4E5B
    }

    /// Calls `f` with the scenario's packet stream.
    pub fn with_trace<T>(
        &self,
        f: impl FnOnce(&mut dyn Iterator<Item = PacketRecord>) -> T,
    ) -> Result<T, ScenarioError> {
        match &self.trace {
            TraceSource::File { path } => {
                let records = read_trace(File::open(path)?, TraceFormat::from_path(path))?;
                Ok(f(&mut records.into_iter()))
            }
            TraceSource::Poisson {
                lambda,
                duration_s,
                catalog,
            } => {
                let cat = catalog.load(self.catalog_seed())?;
                let mut g = TraceGenerator::poisson(&cat, *lambda, *duration_s, self.arrival_seed())?;
                Ok(f(&mut g))
            }
            TraceSource::Schedule { segments, catalog } => {
                let cat = catalog.load(self.catalog_seed())?;
                let segs: Vec<RateSegment> = segments.iter().map(|&(l, d)| RateSegment::new(l, d)).collect();
                let mut g = TraceGenerator::piecewise(&cat, &segs, self.arrival_seed())?;
                Ok(f(&mut g))
            }
        }
    }

    pub fn simulate(&self) -> Result<MetricsReport, ScenarioError> {
        let sim = Simulator::new(self.sim_config()?)?;
        self.with_trace(|t| sim.run(t).report)
    }

    pub fn simulate_live(&self, opts: LiveOptions) -> Result<LiveReport, ScenarioError> {
        let cfg = self.sim_config()?;
        self.with_trace(|t| run_live(t, &cfg, opts))?.map_err(Into::into)
    }

    pub fn report_json<R: Serialize>(&self, report: &R) -> String {
        serde_json::to_string_pretty(&ReportFile {
            schema: REPORT_SCHEMA,
            scenario: self,
            report,
        })
        .expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::BatchMode;
    use crate::sim::Topology;

    const SMALL: &str = r#"
seed = 3
profile = "tpu1"

[trace]
source = "poisson"
lambda = 2000.0
duration_s = 0.5
catalog = { synthetic = { size = 500 } }

[deployment]
topology = "2:1:1"

[policy]
mode = "carry_over"
timeout_ms = 5.0
phi = 0.2

[cache]
delta = 6
capacity = 256

[flow_table]
records = 65536
buckets = 8192
"#;

    #[test]
    fn parses_and_runs() {
        let s = Scenario::from_toml(SMALL).unwrap();
        assert_eq!(s.deployment.topology, Topology::TwoOneOne);
        assert_eq!(s.policy.mode, BatchMode::CarryOver);
        let a = s.simulate().unwrap();
        assert!(a.series_routed > 0);
        assert!(a.conserved());
        let b = s.simulate().unwrap();
        assert_eq!(s.report_json(&a), s.report_json(&b));
    }

    #[test]
    fn inline_profile_and_schedule() {
        let text = r#"
[trace]
source = "schedule"
segments = [[1000.0, 0.2], [3000.0, 0.2]]
catalog = { synthetic = { size = 200 } }

[profile]
name = "custom"
latency = { kind = "affine", c0_ms = 0.5, c1_ms = 0.01 }
power_watts = 9.0

[flow_table]
records = 4096
buckets = 1024
"#;
        let s = Scenario::from_toml(text).unwrap();
        assert_eq!(s.sim_config().unwrap().profile.name, "custom");
        assert!(s.simulate().unwrap().series_routed > 0);
    }

    #[test]
    fn bad_profile_is_config_error() {
        let text = SMALL.replace("\"tpu1\"", "\"abacus\"");
        let s = Scenario::from_toml(&text).unwrap();
        assert!(matches!(s.sim_config(), Err(ScenarioError::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{SMALL}\nbogus = 1\n");
        assert!(Scenario::from_toml(&text).is_err());
    }
}
