//! Flow-table throughput micro-benchmark.
//!
//! The table is pre-loaded with synthetic flows to a target load factor, then
//! driven with packets of those flows. Load 0 uses a single flow.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::flowtable::{FlowAction, FlowTable, FlowTableConfig, FlowTableError, TableStats};
use crate::model::{Direction, FiveTuple, PacketRecord};

pub const DEFAULT_LOADS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub table: FlowTableConfig,
    pub loads: Vec<f64>,
    /// Measured packets per load point.
    pub packets: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            table: FlowTableConfig::micro_benchmark(),
            loads: DEFAULT_LOADS.to_vec(),
            packets: 5_000_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LoadPoint {
    pub target_load: f64,
    pub flows: usize,
    /// Pre-load insertions refused for lack of a free slot.
    pub preload_dropped: u64,
    pub packets: u64,
    pub elapsed_s: f64,
    pub ops_per_s: f64,
    pub table: TableStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub points: Vec<LoadPoint>,
}

impl BenchReport {
    pub fn min_ops_per_s(&self) -> f64 {
        self.points.iter().map(|p| p.ops_per_s).fold(f64::INFINITY, f64::min)
    }
}

fn synthetic_flows(n: usize, seed: u64) -> Vec<FiveTuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = FiveTuple::new(rng.gen(), rng.gen(), rng.gen(), rng.gen(), 6);
        if seen.insert(t.canonicalize().0) {
            out.push(t);
        }
    }
    out
}

/// Odd stride coprime with `n`, so `i * stride % n` visits every flow.
fn stride_for(n: usize) -> usize {
    let gcd = |mut a: usize, mut b: usize| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    let mut s = 2_654_435_761 % n.max(1) | 1;
    while gcd(s, n) != 1 {
        s += 2;
    }
    s
}

pub fn run_point(
    table_cfg: FlowTableConfig,
    load: f64,
    packets: u64,
    seed: u64,
) -> Result<LoadPoint, FlowTableError> {
    let mut table = FlowTable::new(table_cfg)?;
    let flows = ((load.clamp(0.0, 1.0) * table_cfg.records as f64).round() as usize).max(1);
    let tuples = synthetic_flows(flows, seed);
    let mut preload_dropped = 0;
    for t in &tuples {
        let pkt = PacketRecord::new(*t, 0, 64, Direction::Forward);
        if table.on_packet(&pkt, 0) == FlowAction::DroppedNoCapacity {
            preload_dropped += 1;
        }
    }

    let stride = stride_for(flows);
    let mut i = 0usize;
    let mut ready = 0u64;
    let start = Instant::now();
    for _ in 0..packets {
        i = (i + stride) % flows;
        let pkt = PacketRecord::new(tuples[i], 0, 64, Direction::Forward);
        if let FlowAction::SeriesReady(_) = table.on_packet(&pkt, 0) {
            ready += 1;
        }
    }
    let elapsed_s = start.elapsed().as_secs_f64();
    std::hint::black_box(ready);

    Ok(LoadPoint {
        target_load: load,
        flows,
        preload_dropped,
        packets,
        elapsed_s,
        ops_per_s: packets as f64 / elapsed_s.max(1e-9),
        table: table.stats(),
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, FlowTableError> {
    let points = cfg
        .loads
        .iter()
        .map(|&l| run_point(cfg.table, l, cfg.packets, cfg.seed))
        .collect::<Result<_, _>>()?;
    Ok(BenchReport {
        config: cfg.clone(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FlowTableConfig {
        FlowTableConfig {
            records: 4096,
            buckets: 1024,
            ..FlowTableConfig::micro_benchmark()
        }
    }

    #[test]
    fn load_zero_uses_one_flow() {
        let p = run_point(small(), 0.0, 1000, 1).unwrap();
        assert_eq!(p.flows, 1);
        assert_eq!(p.table.occupied, 1);
        assert_eq!(p.table.counters.packets, 1001);
    }

    #[test]
    fn preload_reaches_target_load() {
        for load in DEFAULT_LOADS.into_iter().skip(1) {
            let p = run_point(small(), load, 10_000, 2).unwrap();
            assert_eq!(p.preload_dropped, 0);
            assert!((p.table.load_factor - load).abs() < 1e-3, "{load} {}", p.table.load_factor);
        }
    }

    #[test]
    fn stride_is_coprime() {
        for n in [1, 2, 3, 64, 1000, 4096, 524_288] {
            let s = stride_for(n);
            let mut seen = std::collections::HashSet::new();
            let mut i = 0;
            for _ in 0..n.min(5000) {
                i = (i + s) % n;
                seen.insert(i);
            }
            assert_eq!(seen.len(), n.min(5000));
        }
    }

    #[test]
    fn report_serializes() {
        let cfg = BenchConfig {
            table: small(),
            loads: vec![0.5],
            packets: 100,
            seed: 3,
        };
        let r = run_bench(&cfg).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("ops_per_s"));
        assert!(r.min_ops_per_s() > 0.0);
    }
}
