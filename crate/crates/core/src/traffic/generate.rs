//! Poisson flow arrivals replaying catalog shapes.
//!
//! Flows start at exponentially distributed gaps; each draws a shape
//! uniformly from the catalog and a fresh 5-tuple. Packets of concurrently
//! active flows are merged into one time-ordered stream lazily, so memory is
//! bounded by the number of active flows rather than the trace length.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::model::{Direction, FiveTuple, PacketRecord, SimTime, MICROS_PER_SEC};
use crate::traffic::catalog::Catalog;
use crate::traffic::TrafficError;

/// One constant-rate stretch of a piecewise Poisson schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSegment {
    pub flows_per_s: f64,
    pub duration_s: f64,
}

impl RateSegment {
    pub fn new(flows_per_s: f64, duration_s: f64) -> Self {
        Self {
            flows_per_s,
            duration_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Pending {
    ts: SimTime,
    flow_seq: u64,
    pkt: u32,
    shape: u32,
    tuple: FiveTuple,
}

/// Lazily generated, globally time-sorted packet stream.
pub struct TraceGenerator<'a> {
    catalog: &'a Catalog,
    segments: Vec<(SimTime, SimTime, Option<Exp<f64>>)>,
    segment: usize,
    rng: ChaCha8Rng,
    next_start: Option<SimTime>,
    flow_seq: u64,
    heap: BinaryHeap<Reverse<Pending>>,
}

impl<'a> TraceGenerator<'a> {
    pub fn piecewise(catalog: &'a Catalog, schedule: &[RateSegment], seed: u64) -> Result<Self, TrafficError> {
        let mut segments = Vec::with_capacity(schedule.len());
        let mut start = 0u64;
        for seg in schedule {
            if !(seg.flows_per_s > 0.0) || !(seg.duration_s >= 0.0) {
                return Err(TrafficError::Rate(seg.flows_per_s, seg.duration_s));
            }
            let end = start + (seg.duration_s * MICROS_PER_SEC as f64).round() as SimTime;
            // Mean inter-arrival of 1/λ seconds, in microseconds.
            let exp = Exp::new(seg.flows_per_s / MICROS_PER_SEC as f64).ok();
            segments.push((start, end, exp));
            start = end;
        }
        let mut g = Self {
            catalog,
            segments,
            segment: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_start: None,
            flow_seq: 0,
            heap: BinaryHeap::new(),
        };
        g.next_start = g.draw_start(g.segments.first().map_or(0, |s| s.0));
        Ok(g)
    }

    pub fn poisson(catalog: &'a Catalog, flows_per_s: f64, duration_s: f64, seed: u64) -> Result<Self, TrafficError> {
        Self::piecewise(catalog, &[RateSegment::new(flows_per_s, duration_s)], seed)
    }

    /// Next arrival strictly after `from`, restarting the memoryless clock at
    /// each segment boundary.
    fn draw_start(&mut self, mut from: SimTime) -> Option<SimTime> {
        while let Some(&(start, end, exp)) = self.segments.get(self.segment) {
            from = from.max(start);
            let exp = exp?;
            let t = from + exp.sample(&mut self.rng).round() as SimTime;
            if t < end {
                return Some(t);
            }
            self.segment += 1;
            from = end;
        }
        None
    }

    fn spawn(&mut self, ts: SimTime) {
        let seq = self.flow_seq;
        self.flow_seq += 1;
        let shape = self.rng.gen_range(0..self.catalog.len()) as u32;
        let tuple = FiveTuple::new(
            0x0A00_0000 | (seq as u32 & 0x00ff_ffff),
            0xAC10_0000 | self.rng.gen_range(0..0x000f_ffff),
            1024 + ((seq >> 24) as u16).wrapping_add(self.rng.gen_range(0..60_000)),
            [443, 80, 53, 8080, 22][self.rng.gen_range(0..5)],
            if self.rng.gen_bool(0.8) { 6 } else { 17 },
        );
        self.heap.push(Reverse(Pending {
            ts,
            flow_seq: seq,
            pkt: 0,
            shape,
            tuple,
        }));
    }

    /// Flows started so far.
    pub fn flows_started(&self) -> u64 {
        self.flow_seq
    }
}

impl Iterator for TraceGenerator<'_> {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        while let Some(start) = self.next_start {
            match self.heap.peek() {
                Some(Reverse(p)) if p.ts < start => break,
                _ => {
                    self.spawn(start);
                    self.next_start = self.draw_start(start);
                }
            }
        }
        let Reverse(p) = self.heap.pop()?;
        let shape = &self.catalog.shapes()[p.shape as usize];
        let head = shape.packets.len() as u32;
        let mut rec = if p.pkt < head {
            let sp = shape.packets[p.pkt as usize];
            let flow = match sp.direction {
                Direction::Forward => p.tuple,
                Direction::Backward => p.tuple.reverse(),
            };
            PacketRecord::new(flow, p.ts, sp.length, sp.direction)
        } else {
            let tail = shape.tail.expect("tail position without tail");
            let mut r = PacketRecord::new(p.tuple, p.ts, tail.mean_length, Direction::Forward);
            r.weight = tail.packets;
            r
        };
        rec.label = shape.label;

        let next = p.pkt + 1;
        if next < head {
            let gap = u64::from(shape.packets[next as usize].gap_us);
            self.heap.push(Reverse(Pending {
                ts: p.ts + gap,
                pkt: next,
                ..p
            }));
        } else if next == head {
            if let Some(tail) = shape.tail {
                self.heap.push(Reverse(Pending {
                    ts: p.ts + tail.duration_us,
                    pkt: next,
                    ..p
                }));
            }
        }
        Some(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::catalog::CatalogConfig;
    use std::collections::HashSet;

    fn catalog() -> Catalog {
        Catalog::synthetic(
            &CatalogConfig {
                size: 1_000,
                ..CatalogConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn poisson_flow_count_within_three_sigma() {
        let c = catalog();
        let mut g = TraceGenerator::poisson(&c, 50_000.0, 2.0, 42).unwrap();
        let mut flows = HashSet::new();
        for p in g.by_ref() {
            if p.ts < 2 * MICROS_PER_SEC {
                flows.insert(p.flow.canonicalize().0);
            }
        }
        let n = g.flows_started() as f64;
        assert!((n - 100_000.0).abs() <= 3.0 * 100_000f64.sqrt(), "{n}");
        assert_eq!(flows.len() as f64, n);
    }

    #[test]
    fn zero_duration_is_empty() {
        let c = catalog();
        assert_eq!(TraceGenerator::poisson(&c, 1_000.0, 0.0, 1).unwrap().count(), 0);
        assert_eq!(TraceGenerator::piecewise(&c, &[], 1).unwrap().count(), 0);
    }

    #[test]
    fn rejects_non_positive_rate() {
        let c = catalog();
        assert!(TraceGenerator::poisson(&c, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn timestamps_are_sorted_and_deterministic() {
        let c = catalog();
        let a: Vec<_> = TraceGenerator::poisson(&c, 2_000.0, 1.0, 9).unwrap().collect();
        let b: Vec<_> = TraceGenerator::poisson(&c, 2_000.0, 1.0, 9).unwrap().collect();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].ts <= w[1].ts));
        assert!(!a.is_empty());
    }

    #[test]
    fn single_segment_equals_poisson() {
        let c = catalog();
        let a: Vec<_> = TraceGenerator::poisson(&c, 3_000.0, 0.5, 2).unwrap().collect();
        let b: Vec<_> = TraceGenerator::piecewise(&c, &[RateSegment::new(3_000.0, 0.5)], 2)
            .unwrap()
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn piecewise_rates_shape_arrivals() {
        let c = catalog();
        let sched = [
            RateSegment::new(1_000.0, 2.0),
            RateSegment::new(7_000.0, 2.0),
            RateSegment::new(1_000.0, 2.0),
        ];
        let mut first_seen = std::collections::HashMap::new();
        for p in TraceGenerator::piecewise(&c, &sched, 4).unwrap() {
            first_seen.entry(p.flow.canonicalize().0).or_insert(p.ts);
        }
        let mut per_phase = [0u32; 3];
        for ts in first_seen.values() {
            per_phase[(*ts / (2 * MICROS_PER_SEC)) as usize] += 1;
        }
        assert!(per_phase[1] > 5 * per_phase[0] && per_phase[1] > 5 * per_phase[2], "{per_phase:?}");
    }
}
