//! Dynamic batching over a fixed menu of model batch sizes.
//!
//! A model is compiled for one batch size, so dynamic batching picks among
//! several hosted models. The timeout policy takes the smallest model that
//! holds every waiting series and pads the rest. Carry-over additionally
//! refuses batches whose padding share exceeds `phi`: it scales back to the
//! largest model it can fill completely and leaves the newest series in the
//! ring for the next round.

use serde::{Deserialize, Serialize};

use crate::model::Series;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BatchingError {
    #[error("batch size set is empty")]
    EmptySizeSet,
    #[error("batch sizes must be positive and strictly increasing")]
    UnsortedSizes,
    #[error("padding threshold {0} outside [0, 0.5]")]
    Phi(f64),
}

/// Sorted, distinct batch sizes of the hosted models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BatchSizeSet(Vec<usize>);

impl BatchSizeSet {
    pub fn new(sizes: Vec<usize>) -> Result<Self, BatchingError> {
        if sizes.is_empty() {
            return Err(BatchingError::EmptySizeSet);
        }
        if sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BatchingError::UnsortedSizes);
        }
        Ok(Self(sizes))
    }

    /// Powers of two from 2^`lo` to 2^`hi` inclusive.
    pub fn powers_of_two(lo: u32, hi: u32) -> Self {
        Self((lo..=hi).map(|x| 1usize << x).collect())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn min(&self) -> usize {
        self.0[0]
    }

    pub fn max(&self) -> usize {
        self.0[self.0.len() - 1]
    }

    pub fn contains(&self, b: usize) -> bool {
        self.0.binary_search(&b).is_ok()
    }

    /// Smallest size `>= r`, if any.
    pub fn ceil(&self, r: usize) -> Option<usize> {
        let i = self.0.partition_point(|&b| b < r);
        self.0.get(i).copied()
    }

    /// Largest size `<= r`, if any.
    pub fn floor(&self, r: usize) -> Option<usize> {
        let i = self.0.partition_point(|&b| b <= r);
        i.checked_sub(1).map(|i| self.0[i])
    }
}

impl Default for BatchSizeSet {
    /// 8 through 1024.
    fn default() -> Self {
        Self::powers_of_two(3, 10)
    }
}

impl TryFrom<Vec<usize>> for BatchSizeSet {
    type Error = BatchingError;

    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BatchSizeSet> for Vec<usize> {
    fn from(s: BatchSizeSet) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatchPlan {
    /// Model batch size.
    pub size: usize,
    /// Series pulled from the ring.
    pub take: usize,
    pub padding: usize,
    /// Series left waiting in the ring.
    pub carried_over: usize,
}

impl BatchPlan {
    pub fn padding_ratio(&self) -> f64 {
        self.padding as f64 / self.size as f64
    }
}

/// Timeout batching: the smallest model holding all `r` waiting series,
/// clamped to the largest model when none does.
pub fn plan_timeout(r: usize, sizes: &BatchSizeSet) -> BatchPlan {
    debug_assert!(r >= 1);
    let size = sizes.ceil(r).unwrap_or_else(|| sizes.max());
    let take = r.min(size);
    BatchPlan {
        size,
        take,
        padding: size - take,
        carried_over: r - take,
    }
}

/// Carry-over batching with padding threshold `phi`.
pub fn plan_carryover(r: usize, sizes: &BatchSizeSet, phi: f64) -> BatchPlan {
    let plan = plan_timeout(r, sizes);
    if plan.padding_ratio() <= phi {
        return plan;
    }
    match sizes.floor(r) {
        Some(size) => BatchPlan {
            size,
            take: size,
            padding: 0,
            carried_over: r - size,
        },
        // Fewer series than the smallest model: pad it rather than stall.
        None => plan,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Plan at every deadline with [`plan_timeout`].
    Timeout,
    /// Plan at every deadline with [`plan_carryover`].
    CarryOver,
    /// Plan whenever an accelerator is idle and series are waiting.
    NoTimeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub mode: BatchMode,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: f64,
    #[serde(default = "default_phi")]
    pub phi: f64,
}

fn default_timeout_ms() -> f64 {
    10.0
}

fn default_phi() -> f64 {
    0.2
}

impl PolicyConfig {
    pub fn timeout(timeout_ms: f64) -> Self {
        Self {
            mode: BatchMode::Timeout,
            timeout_ms,
            phi: default_phi(),
        }
    }

    pub fn carry_over(timeout_ms: f64, phi: f64) -> Self {
        Self {
            mode: BatchMode::CarryOver,
            timeout_ms,
            phi,
        }
    }

    pub fn no_timeout() -> Self {
        Self {
            mode: BatchMode::NoTimeout,
            timeout_ms: 0.0,
            phi: default_phi(),
        }
    }

    pub fn validate(&self) -> Result<(), BatchingError> {
        if !(0.0..=0.5).contains(&self.phi) {
            return Err(BatchingError::Phi(self.phi));
        }
        Ok(())
    }

    /// Plans a batch for `r` waiting series; `None` when nothing waits.
    pub fn plan(&self, r: usize, sizes: &BatchSizeSet) -> Option<BatchPlan> {
        if r == 0 {
            return None;
        }
        Some(match self.mode {
            BatchMode::Timeout | BatchMode::NoTimeout => plan_timeout(r, sizes),
            BatchMode::CarryOver => plan_carryover(r, sizes, self.phi),
        })
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::carry_over(default_timeout_ms(), default_phi())
    }
}

/// A model input: real series followed by padding sentinels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub series: Vec<Series>,
    pub real: usize,
}

impl Batch {
    pub fn new(series: Vec<Series>) -> Self {
        let real = series.len();
        Self { series, real }
    }

    pub fn size(&self) -> usize {
        self.series.len()
    }

    pub fn padding(&self) -> usize {
        self.series.len() - self.real
    }

    pub fn real_series(&self) -> &[Series] {
        &self.series[..self.real]
    }
}

/// Appends `padding` all-zero sentinel series of length `k`.
pub fn pad(mut batch: Batch, padding: usize, k: usize) -> Batch {
    batch
        .series
        .extend(std::iter::repeat_with(|| Series::sentinel(k)).take(padding));
    batch
}
