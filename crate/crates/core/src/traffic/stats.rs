//! Dataset statistics: volumes, counts and rates scaled to a link load.

use std::collections::HashMap;

use serde::Serialize;

use crate::flowtable::LONG_LIVED_MIN_PACKETS;
use crate::model::{FiveTuple, PacketRecord, SimTime, MICROS_PER_SEC};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaledRates {
    pub link_bps: f64,
    pub mpps: f64,
    pub kflows_per_s: f64,
    pub kclass_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStats {
    pub volume_bytes: u64,
    pub packets: u64,
    pub flows: u64,
    /// Flows with at least `k` packets.
    pub series: u64,
    pub short_lived_flows: u64,
    pub long_lived_flows: u64,
    pub duration_us: SimTime,
    pub k: usize,
    pub pps: f64,
    pub flows_per_s: f64,
    pub series_per_s: f64,
    pub scaled: Option<ScaledRates>,
}

/// Rate a count would reach if the trace's volume were carried at `link_bps`.
pub fn scaled_rate(count: u64, volume_bytes: u64, link_bps: f64) -> f64 {
    if volume_bytes == 0 {
        return 0.0;
    }
    count as f64 * link_bps / (volume_bytes as f64 * 8.0)
}

impl TraceStats {
    pub fn from_packets<I>(packets: I, k: usize, link_bps: Option<f64>) -> Self
    where
        I: IntoIterator<Item = PacketRecord>,
    {
        let mut per_flow: HashMap<FiveTuple, u64> = HashMap::new();
        let (mut volume, mut pkts) = (0u64, 0u64);
        let mut span: Option<(SimTime, SimTime)> = None;
        for p in packets {
            let w = u64::from(p.weight);
            volume += u64::from(p.length) * w;
            pkts += w;
            *per_flow.entry(p.flow.canonicalize().0).or_default() += w;
            span = Some(match span {
                None => (p.ts, p.ts),
                Some((a, b)) => (a.min(p.ts), b.max(p.ts)),
            });
        }
        Self::from_counts(volume, pkts, per_flow.values().copied(), span.map_or(0, |(a, b)| b - a), k, link_bps)
    }

    /// Builds the summary from per-flow packet counts.
    pub fn from_counts<I>(volume_bytes: u64, packets: u64, flow_sizes: I, duration_us: SimTime, k: usize, link_bps: Option<f64>) -> Self
    where
        I: IntoIterator<Item = u64>,
    {
        let (mut flows, mut series, mut short) = (0u64, 0u64, 0u64);
        for n in flow_sizes {
            flows += 1;
            if n >= k as u64 {
                series += 1;
            }
            if n < LONG_LIVED_MIN_PACKETS {
                short += 1;
            }
        }
        let secs = duration_us as f64 / MICROS_PER_SEC as f64;
        let per_s = |c: u64| if secs > 0.0 { c as f64 / secs } else { 0.0 };
        Self {
            volume_bytes,
            packets,
            flows,
            series,
            short_lived_flows: short,
            long_lived_flows: flows - short,
            duration_us,
            k,
            pps: per_s(packets),
            flows_per_s: per_s(flows),
            series_per_s: per_s(series),
            scaled: link_bps.map(|bps| ScaledRates {
                link_bps: bps,
                mpps: scaled_rate(packets, volume_bytes, bps) / 1e6,
                kflows_per_s: scaled_rate(flows, volume_bytes, bps) / 1e3,
                kclass_per_s: scaled_rate(series, volume_bytes, bps) / 1e3,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Direction;

    fn flow(id: u32, n: usize, t0: SimTime) -> Vec<PacketRecord> {
        let t = FiveTuple::new(id, 99, 1000, 80, 6);
        (0..n)
            .map(|i| {
                let (f, d) = if i % 2 == 0 { (t, Direction::Forward) } else { (t.reverse(), Direction::Backward) };
                PacketRecord::new(f, t0 + i as SimTime * 10, 100, d)
            })
            .collect()
    }

    #[test]
    fn access_row_scaling() {
        // 765 GB, 858 M packets, 3963 k flows, 2481 k series at 100 Gbps.
        let vol = 765_000_000_000u64;
        let bps = 100e9;
        assert!((scaled_rate(858_000_000, vol, bps) / 1e6 - 14.0).abs() < 0.1);
        assert!((scaled_rate(3_963_000, vol, bps) / 1e3 - 64.7).abs() < 0.1);
        assert!((scaled_rate(2_481_000, vol, bps) / 1e3 - 40.5).abs() < 0.1);
    }

    #[test]
    fn nine_packet_flows_make_no_series() {
        let pkts: Vec<_> = (0..5).flat_map(|i| flow(i, 9, 0)).collect();
        let s = TraceStats::from_packets(pkts, 10, None);
        assert_eq!((s.flows, s.series), (5, 0));
    }

    #[test]
    fn single_twelve_packet_flow() {
        let s = TraceStats::from_packets(flow(1, 12, 0), 10, Some(1e9));
        assert_eq!((s.flows, s.series, s.packets, s.volume_bytes), (1, 1, 12, 1200));
        assert_eq!((s.short_lived_flows, s.long_lived_flows), (1, 0));
        assert!(s.series <= s.flows);
    }

    #[test]
    fn weights_count_as_packets() {
        let mut pkts = flow(1, 3, 0);
        pkts[2].weight = 40;
        let s = TraceStats::from_packets(pkts, 10, None);
        assert_eq!((s.packets, s.series, s.long_lived_flows), (42, 1, 1));
    }

    #[test]
    fn rates_are_counts_over_duration() {
        let mut pkts = flow(1, 11, 0);
        pkts.extend(flow(2, 11, 2 * MICROS_PER_SEC - 100));
        let s = TraceStats::from_packets(pkts, 10, None);
        assert_eq!(s.duration_us, 2 * MICROS_PER_SEC);
        assert!((s.flows_per_s - 1.0).abs() < 1e-9);
        assert!((s.pps - 11.0).abs() < 1e-9);
    }
}
