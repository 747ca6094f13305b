use serde::Serialize;

use crate::cache::CacheStats;
use crate::flowtable::{FlowCounters, RetiredTally};
use crate::model::{FiveTuple, Label, SimTime};

/// Percentile set used for every distribution in the report.
pub const PERCENTILES: [f64; 5] = [1.0, 25.0, 50.0, 75.0, 99.0];

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn nearest_rank<T: Copy + Default>(sorted: &[T], p: f64) -> T {
    if sorted.is_empty() {
        return T::default();
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Percentiles {
    pub count: u64,
    pub p1: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p99: f64,
}

impl Percentiles {
    /// Sorts `values` in place.
    pub fn from_values(values: &mut [f64]) -> Self {
        values.sort_by(f64::total_cmp);
        let at = |p| nearest_rank(values, p);
        Self {
            count: values.len() as u64,
            p1: at(PERCENTILES[0]),
            p25: at(PERCENTILES[1]),
            p50: at(PERCENTILES[2]),
            p75: at(PERCENTILES[3]),
            p99: at(PERCENTILES[4]),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WindowStats {
    pub start_ms: u64,
    pub series_completed: u64,
    pub cache_hits: u64,
    pub labels: u64,
    pub median_delay_ms: f64,
    pub batches: u64,
    pub avg_batch_size: f64,
    pub busy_real_us: f64,
    pub busy_padding_us: f64,
    /// Busy share of the window across all chips.
    pub usage: f64,
    pub padding_usage: f64,
}

/// Column names of [`MetricsReport::windows_csv`].
pub const WINDOW_CSV_HEADER: &str =
    "start_ms,series_completed,cache_hits,labels,median_delay_ms,batches,avg_batch_size,busy_real_us,busy_padding_us,usage,padding_usage";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub series_routed: u64,
    pub cache_hits: u64,
    pub good_hits: u64,
    pub error_hits: u64,
    pub inferred: u64,
    pub ring_dropped: u64,
    /// Series still queued when the run ended; zero for a drained run.
    pub unresolved: u64,
    pub hit_ratio: f64,
    pub batches: u64,
    pub padded_slots: u64,
    pub mean_batch_size: f64,
    pub delay_ms: Percentiles,
    pub padding_ratio: Percentiles,
    pub post_mortem_flows: u64,
    pub post_mortem_ratio: f64,
    pub long_lived_flows: u64,
    pub long_lived_packets: u64,
    pub long_lived_untagged: u64,
    pub long_lived_untagged_ratio: f64,
    pub chips: u64,
    /// End of analytics activity: the last series arrival, label or
    /// inference completion. Usage is measured over `[0, wall_us]`.
    pub wall_us: SimTime,
    pub busy_real_us: SimTime,
    pub busy_padding_us: SimTime,
    pub usage: f64,
    pub usage_real: f64,
    pub usage_padding: f64,
    /// Padding busy time over all busy time.
    pub padding_share: f64,
    pub flow_table: FlowCounters,
    pub cache: CacheStats,
    pub windows: Vec<WindowStats>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn windows_csv(&self) -> String {
        let mut out = String::from(WINDOW_CSV_HEADER);
        out.push('\n');
        for w in &self.windows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{},{:.6},{:.3},{:.3},{:.6},{:.6}\n",
                w.start_ms,
                w.series_completed,
                w.cache_hits,
                w.labels,
                w.median_delay_ms,
                w.batches,
                w.avg_batch_size,
                w.busy_real_us,
                w.busy_padding_us,
                w.usage,
                w.padding_usage
            ));
        }
        out
    }

    /// Series accounted for by a terminal outcome, plus those still queued.
    pub fn conserved(&self) -> bool {
        self.cache_hits + self.inferred + self.ring_dropped + self.unresolved == self.series_routed
    }
}

/// How a series got its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Cache,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlowOutcome {
    pub key: FiveTuple,
    pub completed_at: SimTime,
    pub labeled_at: SimTime,
    pub label: Label,
    pub source: LabelSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatchRecord {
    pub manager: usize,
    pub submitted_at: SimTime,
    pub size: usize,
    pub padding: usize,
}

/// Per-series and per-batch traces of a run, in event order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunDetail {
    pub outcomes: Vec<FlowOutcome>,
    pub batches: Vec<BatchRecord>,
}

#[derive(Default)]
struct WindowAcc {
    series_completed: u64,
    cache_hits: u64,
    delays_us: Vec<SimTime>,
    batches: u64,
    batch_slots: u64,
    busy_real: f64,
    busy_padding: f64,
}

/// Accumulates samples during a run and folds them into a report.
pub struct Collector {
    window_us: SimTime,
    chips: u64,
    windows: Vec<WindowAcc>,
    delays_us: Vec<SimTime>,
    padding_ratios: Vec<f64>,
    series_routed: u64,
    cache_hits: u64,
    good_hits: u64,
    error_hits: u64,
    inferred: u64,
    ring_dropped: u64,
    batches: u64,
    batch_slots: u64,
    padded_slots: u64,
    busy_real: SimTime,
    busy_padding: SimTime,
    last_event: SimTime,
    detail: Option<RunDetail>,
}

impl Collector {
    pub fn new(window_us: SimTime, chips: u64, keep_detail: bool) -> Self {
        Self {
            window_us,
            chips,
            windows: Vec::new(),
            delays_us: Vec::new(),
            padding_ratios: Vec::new(),
            series_routed: 0,
            cache_hits: 0,
            good_hits: 0,
            error_hits: 0,
            inferred: 0,
            ring_dropped: 0,
            batches: 0,
            batch_slots: 0,
            padded_slots: 0,
            busy_real: 0,
            busy_padding: 0,
            last_event: 0,
            detail: keep_detail.then(RunDetail::default),
        }
    }

    fn window(&mut self, t: SimTime) -> &mut WindowAcc {
        let i = (t / self.window_us) as usize;
        if self.windows.len() <= i {
            self.windows.resize_with(i + 1, WindowAcc::default);
        }
        &mut self.windows[i]
    }

    fn touch(&mut self, t: SimTime) {
        self.last_event = self.last_event.max(t);
    }

    pub fn series_routed(&mut self, at: SimTime, accepted: bool) {
        self.touch(at);
        self.series_routed += 1;
        if !accepted {
            self.ring_dropped += 1;
        }
        self.window(at).series_completed += 1;
    }

    pub fn cache_hit(&mut self, good: bool) {
        self.cache_hits += 1;
        if good {
            self.good_hits += 1;
        } else {
            self.error_hits += 1;
        }
    }

    pub fn labeled(&mut self, key: FiveTuple, completed_at: SimTime, now: SimTime, label: Label, source: LabelSource) {
        self.touch(now);
        debug_assert!(now >= completed_at);
        let delay = now - completed_at;
        self.delays_us.push(delay);
        let w = self.window(now);
        w.delays_us.push(delay);
        if source == LabelSource::Cache {
            w.cache_hits += 1;
        } else {
            self.inferred += 1;
        }
        if let Some(d) = &mut self.detail {
            d.outcomes.push(FlowOutcome {
                key,
                completed_at,
                labeled_at: now,
                label,
                source,
            });
        }
    }

    /// Records a submitted batch busy on one chip over `[start, start + real + padding)`.
    pub fn batch(&mut self, manager: usize, start: SimTime, size: usize, padding: usize, real_us: SimTime, padding_us: SimTime) {
        self.batches += 1;
        self.batch_slots += size as u64;
        self.padded_slots += padding as u64;
        self.padding_ratios.push(padding as f64 / size as f64);
        self.busy_real += real_us;
        self.busy_padding += padding_us;
        self.window(start).batches += 1;
        self.window(start).batch_slots += size as u64;

        let end = start + real_us + padding_us;
        self.touch(end);
        let total = (real_us + padding_us) as f64;
        let pad_frac = if total > 0.0 { padding_us as f64 / total } else { 0.0 };
        let mut t = start;
        while t < end {
            let w_end = (t / self.window_us + 1) * self.window_us;
            let seg = (end.min(w_end) - t) as f64;
            let w = self.window(t);
            w.busy_padding += seg * pad_frac;
            w.busy_real += seg * (1.0 - pad_frac);
            t = w_end;
        }
        if let Some(d) = &mut self.detail {
            d.batches.push(BatchRecord {
                manager,
                submitted_at: start,
                size,
                padding,
            });
        }
    }

    pub fn finish(
        mut self,
        flow_table: FlowCounters,
        tally: RetiredTally,
        cache: CacheStats,
        unresolved: u64,
    ) -> (MetricsReport, Option<RunDetail>) {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut delays: Vec<f64> = self.delays_us.iter().map(|&d| d as f64 / 1_000.0).collect();
        let wall = self.last_event;
        let chip_time = wall as f64 * self.chips as f64;
        let frac = |x: f64| if chip_time > 0.0 { x / chip_time } else { 0.0 };
        let post_mortem = flow_table.series_emitted.saturating_sub(flow_table.flows_tagged);

        let window_us = self.window_us;
        let chips = self.chips as f64;
        let windows = self
            .windows
            .iter_mut()
            .enumerate()
            .map(|(i, w)| {
                w.delays_us.sort_unstable();
                let cap = window_us as f64 * chips;
                WindowStats {
                    start_ms: i as u64 * window_us / 1_000,
                    series_completed: w.series_completed,
                    cache_hits: w.cache_hits,
                    labels: w.delays_us.len() as u64,
                    median_delay_ms: nearest_rank(&w.delays_us, 50.0) as f64 / 1_000.0,
                    batches: w.batches,
                    avg_batch_size: ratio(w.batch_slots, w.batches),
                    busy_real_us: w.busy_real,
                    busy_padding_us: w.busy_padding,
                    usage: (w.busy_real + w.busy_padding) / cap,
                    padding_usage: w.busy_padding / cap,
                }
            })
            .collect();

        let report = MetricsReport {
            series_routed: self.series_routed,
            cache_hits: self.cache_hits,
            good_hits: self.good_hits,
            error_hits: self.error_hits,
            inferred: self.inferred,
            ring_dropped: self.ring_dropped,
            unresolved,
            hit_ratio: ratio(self.cache_hits, self.series_routed),
            batches: self.batches,
            padded_slots: self.padded_slots,
            mean_batch_size: ratio(self.batch_slots, self.batches),
            delay_ms: Percentiles::from_values(&mut delays),
            padding_ratio: Percentiles::from_values(&mut self.padding_ratios),
            post_mortem_flows: post_mortem,
            post_mortem_ratio: ratio(post_mortem, flow_table.series_emitted),
            long_lived_flows: tally.long_lived_flows,
            long_lived_packets: tally.long_lived_packets,
            long_lived_untagged: tally.long_lived_untagged,
            long_lived_untagged_ratio: ratio(tally.long_lived_untagged, tally.long_lived_packets),
            chips: self.chips,
            wall_us: wall,
            busy_real_us: self.busy_real,
            busy_padding_us: self.busy_padding,
            usage: frac((self.busy_real + self.busy_padding) as f64),
            usage_real: frac(self.busy_real as f64),
            usage_padding: frac(self.busy_padding as f64),
            padding_share: ratio(self.busy_padding, self.busy_real + self.busy_padding),
            flow_table,
            cache,
            windows,
        };
        (report, self.detail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_convention() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(nearest_rank(&v, 1.0), 1);
        assert_eq!(nearest_rank(&v, 50.0), 50);
        assert_eq!(nearest_rank(&v, 99.0), 99);
        assert_eq!(nearest_rank(&[7u64], 1.0), 7);
        assert_eq!(nearest_rank::<u64>(&[], 50.0), 0);
        let mut f = vec![3.0, 1.0, 2.0];
        let p = Percentiles::from_values(&mut f);
        assert_eq!((p.count, p.p1, p.p50, p.p99), (3, 1.0, 2.0, 3.0));
    }

    #[test]
    fn busy_time_spreads_over_windows() {
        let mut c = Collector::new(1_000, 1, false);
        c.batch(0, 500, 8, 2, 750, 250);
        let (r, _) = c.finish(FlowCounters::default(), RetiredTally::default(), CacheStats::default(), 0);
        assert_eq!(r.windows.len(), 2);
        assert!((r.windows[0].busy_real_us - 375.0).abs() < 1e-9);
        assert!((r.windows[1].busy_padding_us - 125.0).abs() < 1e-9);
        assert_eq!(r.wall_us, 1_500);
        assert!((r.padding_share - 0.25).abs() < 1e-12);
        assert!((r.usage - 1_000.0 / 1_500.0).abs() < 1e-12);
    }

    #[test]
    fn empty_report_is_zero() {
        let (r, _) = Collector::new(1_000, 1, false).finish(
            FlowCounters::default(),
            RetiredTally::default(),
            CacheStats::default(),
            0,
        );
        assert_eq!(r.delay_ms, Percentiles::default());
        assert_eq!(r.post_mortem_ratio, 0.0);
        assert!(r.windows.is_empty());
        assert!(r.conserved());
        assert_eq!(r.windows_csv().lines().count(), 1);
    }
}
