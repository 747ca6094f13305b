//! Inference device model: supported batch sizes, batch latency, power draw
//! and a deterministic stand-in for the trained classifier.

use serde::{Deserialize, Serialize};

use crate::batching::{Batch, BatchSizeSet};
use crate::model::{ms_to_micros, Label, Series, SimTime, DEFAULT_NUM_CLASSES};

/// Power reference for the power/throughput quadrant, in watts.
pub const POWER_TARGET_W: f64 = 30.0;
/// Throughput reference for the quadrant, in classifications per second.
pub const RATE_TARGET_PER_S: f64 = 50_000.0;

/// Power of one TPU-like chip, in watts.
pub const TPU_CHIP_POWER_W: f64 = 12.8;

/// Deterministic classifier stand-in.
pub trait LabelOracle: Send + Sync {
    fn label(&self, series: &Series) -> Label;
}

/// Labels a series by an FNV-1a hash of its features, modulo the class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashOracle {
    classes: u32,
}

impl HashOracle {
    pub fn new(classes: u32) -> Self {
        assert!(classes > 0);
        Self { classes }
    }
}

impl Default for HashOracle {
    fn default() -> Self {
        Self::new(DEFAULT_NUM_CLASSES)
    }
}

impl LabelOracle for HashOracle {
    fn label(&self, series: &Series) -> Label {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for f in &series.features {
            for byte in f.to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Label((h % u64::from(self.classes)) as u32)
    }
}

/// Uses the trace's ground-truth label when the series carries one and
/// falls back to hashing otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthOracle {
    fallback: HashOracle,
}

impl TruthOracle {
    pub fn new(classes: u32) -> Self {
        Self {
            fallback: HashOracle::new(classes),
        }
    }
}

impl LabelOracle for TruthOracle {
    fn label(&self, series: &Series) -> Label {
        series.truth.unwrap_or_else(|| self.fallback.label(series))
    }
}

/// Batch latency as a function of batch size, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencyModel {
    /// `c0 + c1 * B`.
    Affine { c0_ms: f64, c1_ms: f64 },
    /// Measured `(batch size, latency)` points, interpolated linearly and
    /// clamped at both ends.
    Table { points: Vec<(usize, f64)> },
}

impl LatencyModel {
    pub fn latency_ms(&self, b: usize) -> f64 {
        match self {
            LatencyModel::Affine { c0_ms, c1_ms } => c0_ms + c1_ms * b as f64,
            LatencyModel::Table { points } => {
                let i = points.partition_point(|&(x, _)| x < b);
                if i == 0 {
                    return points[0].1;
                }
                if i == points.len() {
                    return points[points.len() - 1].1;
                }
                let (x0, y0) = points[i - 1];
                let (x1, y1) = points[i];
                if x1 == b {
                    return y1;
                }
                y0 + (y1 - y0) * (b - x0) as f64 / (x1 - x0) as f64
            }
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AcceleratorError {
    #[error("batch size {0} is not supported by this accelerator")]
    BatchSizeUnsupported(usize),
    #[error("unknown accelerator profile {0:?}")]
    UnknownProfile(String),
    #[error("invalid accelerator profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorProfile {
    pub name: String,
    #[serde(default)]
    pub batch_sizes: BatchSizeSet,
    pub latency: LatencyModel,
    pub power_watts: f64,
    #[serde(default = "one")]
    pub chips: usize,
}

fn one() -> usize {
    1
}

impl AcceleratorProfile {
    pub fn affine(name: &str, c0_ms: f64, c1_ms: f64, power_watts: f64, chips: usize) -> Self {
        Self {
            name: name.to_owned(),
            batch_sizes: BatchSizeSet::default(),
            latency: LatencyModel::Affine { c0_ms, c1_ms },
            power_watts,
            chips,
        }
    }

    /// Single TPU-like chip: small fixed cost, moderate per-item cost.
    pub fn tpu1() -> Self {
        Self::affine("tpu1", 1.0, 0.015, TPU_CHIP_POWER_W, 1)
    }

    /// Four TPU-like chips serving independently.
    pub fn tpu4() -> Self {
        Self::affine("tpu4", 1.0, 0.015, 4.0 * TPU_CHIP_POWER_W, 4)
    }

    /// GPU-like device: large launch overhead, cheap per item.
    pub fn gpu() -> Self {
        Self::affine("gpu", 5.0, 0.004, 70.0, 1)
    }

    pub fn cpu1() -> Self {
        Self::affine("cpu1", 1.5, 0.025, 15.0, 1)
    }

    pub fn cpu52() -> Self {
        Self::affine("cpu52", 3.0, 0.003, 165.0, 1)
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["tpu1", "tpu4", "gpu", "cpu1", "cpu52"]
    }

    pub fn builtin(name: &str) -> Result<Self, AcceleratorError> {
        match name {
            "tpu1" => Ok(Self::tpu1()),
            "tpu4" => Ok(Self::tpu4()),
            "gpu" => Ok(Self::gpu()),
            "cpu1" => Ok(Self::cpu1()),
            "cpu52" => Ok(Self::cpu52()),
            other => Err(AcceleratorError::UnknownProfile(other.to_owned())),
        }
    }

    pub fn validate(&self) -> Result<(), AcceleratorError> {
        let bad = |m: &str| Err(AcceleratorError::InvalidProfile(format!("{}: {m}", self.name)));
        if self.chips == 0 {
            return bad("chips must be positive");
        }
        match &self.latency {
            LatencyModel::Affine { c0_ms, c1_ms } => {
                if !(*c0_ms >= 0.0 && *c1_ms >= 0.0) {
                    return bad("latency coefficients must be non-negative");
                }
            }
            LatencyModel::Table { points } => {
                if points.is_empty() || points.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return bad("latency table must be non-empty and sorted by batch size");
                }
            }
        }
        if self.batch_sizes.sizes().iter().any(|&b| self.latency_ms(b) <= 0.0) {
            return bad("latency must be positive for every batch size");
        }
        if !(self.power_watts >= 0.0) {
            return bad("power must be non-negative");
        }
        Ok(())
    }

    pub fn latency_ms(&self, b: usize) -> f64 {
        self.latency.latency_ms(b)
    }

    /// Latency in simulation ticks, never below one microsecond.
    pub fn latency_us(&self, b: usize) -> SimTime {
        ms_to_micros(self.latency_ms(b)).max(1)
    }

    /// Classifications per second of one chip at batch size `b`.
    pub fn rate(&self, b: usize) -> f64 {
        b as f64 / self.latency_ms(b) * 1_000.0
    }

    /// Classifications per second of all chips together.
    pub fn device_rate(&self, b: usize) -> f64 {
        self.rate(b) * self.chips as f64
    }

    pub fn quadrant(&self, b: usize) -> QuadrantPoint {
        QuadrantPoint::new(self.power_watts, self.device_rate(b))
    }

    /// Runs `batch` submitted at `now` on one idle chip.
    pub fn infer(
        &self,
        batch: &Batch,
        oracle: &dyn LabelOracle,
        now: SimTime,
    ) -> Result<Inference, AcceleratorError> {
        let b = batch.size();
        if !self.batch_sizes.contains(b) {
            return Err(AcceleratorError::BatchSizeUnsupported(b));
        }
        let latency = self.latency_us(b);
        let padding_busy = latency * batch.padding() as u64 / b as u64;
        Ok(Inference {
            labels: batch.real_series().iter().map(|s| oracle.label(s)).collect(),
            completion: now + latency,
            busy_real: latency - padding_busy,
            busy_padding: padding_busy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    /// One label per real series, in batch order.
    pub labels: Vec<Label>,
    pub completion: SimTime,
    /// Busy time attributed to real series, in microseconds.
    pub busy_real: SimTime,
    /// Busy time attributed to padding, in microseconds.
    pub busy_padding: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    /// Within the power budget and above the rate target.
    Desirable,
    /// Fast enough but over the power budget.
    PowerHungry,
    /// Within the power budget but too slow.
    TooSlow,
    /// Fails both targets.
    Avoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadrantPoint {
    pub power_ratio: f64,
    pub rate_ratio: f64,
    pub quadrant: Quadrant,
}

impl QuadrantPoint {
    pub fn new(power_watts: f64, rate_per_s: f64) -> Self {
        let power_ratio = power_watts / POWER_TARGET_W;
        let rate_ratio = rate_per_s / RATE_TARGET_PER_S;
        let quadrant = match (power_ratio <= 1.0, rate_ratio >= 1.0) {
            (true, true) => Quadrant::Desirable,
            (false, true) => Quadrant::PowerHungry,
            (true, false) => Quadrant::TooSlow,
            (false, false) => Quadrant::Avoid,
        };
        Self {
            power_ratio,
            rate_ratio,
            quadrant,
        }
    }

    pub fn is_desirable(&self) -> bool {
        self.quadrant == Quadrant::Desirable
    }
}
