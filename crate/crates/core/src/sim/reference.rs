//! Naive re-implementation of the pipeline for equivalence checks.
//!
//! Flows live in a plain list searched linearly, rings are deques, the cache
//! is an explicit recency list and pending events are found by scanning.
//! Only meant for traces of up to about a thousand packets that span less
//! than the stale timeout, so no flow is ever evicted.

use std::collections::VecDeque;

use crate::flowtable::{FlowCounters, RetiredTally, LONG_LIVED_MIN_PACKETS};
use crate::model::{Direction, FiveTuple, Label, PacketRecord, Series, SimTime};
use crate::cache::{CacheStats, KeyMode};
use crate::batching::BatchMode;
use crate::sim::config::{ConfigError, MergeOrder, SimConfig};
use crate::sim::engine::SimOutput;
use crate::sim::metrics::{Collector, LabelSource};
use crate::traffic::dispatch::symmetric_hash;

struct Flow {
    key: FiveTuple,
    initiator: (u32, u16),
    features: Vec<i32>,
    pkts: u64,
    untagged: u64,
    last_ts: SimTime,
    truth: Option<Label>,
    label: Option<(Label, SimTime)>,
    emitted: bool,
    tagged_seen: bool,
}

struct Cache {
    /// Most recently used first.
    entries: Vec<(Vec<i32>, Label)>,
    capacity: usize,
    delta: usize,
    mode: KeyMode,
    stats: CacheStats,
}

impl Cache {
    fn key(&self, s: &Series) -> Vec<i32> {
        let d = self.delta.min(s.features.len());
        match self.mode {
            KeyMode::Prefix => s.features[..d].to_vec(),
            KeyMode::Postfix => s.features[s.features.len() - d..].to_vec(),
            KeyMode::Exact => s.features.clone(),
        }
    }

    fn lookup(&mut self, s: &Series) -> Option<Label> {
        let key = self.key(s);
        self.stats.lookups += 1;
        match self.entries.iter().position(|(k, _)| *k == key) {
            Some(i) => {
                let e = self.entries.remove(i);
                let l = e.1;
                self.entries.insert(0, e);
                self.stats.hits += 1;
                Some(l)
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    fn insert(&mut self, s: &Series, l: Label) {
        let key = self.key(s);
        self.stats.inserts += 1;
        if let Some(i) = self.entries.iter().position(|(k, _)| *k == key) {
            self.entries.remove(i);
        } else if self.entries.len() == self.capacity {
            self.entries.pop();
            self.stats.evictions += 1;
        }
        self.entries.insert(0, (key, l));
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pending {
    Complete { manager: usize, chip: usize },
    Deadline { manager: usize },
}

struct Manager {
    rings: Vec<usize>,
    cache: Option<Cache>,
    chips: Vec<Option<(Vec<Series>, Vec<Label>)>>,
    pending: bool,
    first_ring: usize,
}

struct State<'c> {
    cfg: &'c SimConfig,
    oracle: Box<dyn crate::accelerator::LabelOracle>,
    period: Option<SimTime>,
    flows: Vec<Vec<Flow>>,
    rings: Vec<VecDeque<Series>>,
    ring_cap: usize,
    managers: Vec<Manager>,
    events: Vec<(SimTime, u8, u64, Pending)>,
    seq: u64,
    counters: FlowCounters,
    out: Collector,
    trace_done: bool,
}

/// Runs `trace` through the naive pipeline. Reports and details must equal
/// those of [`crate::sim::Simulator`] with detail enabled.
pub fn reference_run(trace: &[PacketRecord], cfg: &SimConfig) -> Result<SimOutput, ConfigError> {
    cfg.validate()?;
    let pipelines = cfg.deployment.pipelines;
    let per = cfg.deployment.topology.flow_managers();
    let chips = cfg.profile.chips * cfg.deployment.topology.devices();
    let managers = (0..pipelines)
        .map(|p| Manager {
            rings: (p * per..(p + 1) * per).collect(),
            cache: cfg.cache.map(|c| Cache {
                entries: Vec::new(),
                capacity: c.capacity,
                delta: c.delta,
                mode: c.key_mode,
                stats: CacheStats::default(),
            }),
            chips: vec![None; chips],
            pending: false,
            first_ring: 0,
        })
        .collect();
    let period = match cfg.policy.mode {
        BatchMode::NoTimeout => None,
        _ => Some((cfg.policy.timeout_ms * 1000.0).round() as SimTime).filter(|&t| t > 0),
    };
    let mut st = State {
        cfg,
        oracle: cfg.oracle.build(cfg.classes),
        period,
        flows: (0..pipelines * per).map(|_| Vec::new()).collect(),
        rings: (0..pipelines * per).map(|_| VecDeque::new()).collect(),
        ring_cap: cfg.ring_capacity.next_power_of_two(),
        managers,
        events: Vec::new(),
        seq: 0,
        counters: FlowCounters::default(),
        out: Collector::new(cfg.window_ms * 1000, (pipelines * chips) as u64, true),
        trace_done: false,
    };
    if let Some(t) = period {
        for m in 0..pipelines {
            st.schedule(t, Pending::Deadline { manager: m });
        }
    }

    let mut i = 0;
    let mut now: SimTime = 0;
    loop {
        let next_event = st.events.iter().copied().min_by_key(|e| (e.0, e.1, e.2));
        let take_packet = match (trace.get(i), next_event) {
            (Some(p), Some(e)) => p.ts <= e.0,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        if take_packet {
            now = now.max(trace[i].ts);
            st.packet(&trace[i], now);
            i += 1;
            if i == trace.len() {
                st.trace_done = true;
            }
        } else {
            st.trace_done = i >= trace.len();
            let e = next_event.expect("checked");
            st.events.retain(|x| x.2 != e.2);
            now = e.0;
            match e.3 {
                Pending::Complete { manager, chip } => st.complete(manager, chip, now),
                Pending::Deadline { manager } => st.deadline(manager, now),
            }
        }
    }

    let mut tally = RetiredTally::default();
    for f in st.flows.iter().flatten() {
        tally.flows += 1;
        if f.pkts >= LONG_LIVED_MIN_PACKETS {
            tally.long_lived_flows += 1;
            tally.long_lived_packets += f.pkts;
            tally.long_lived_untagged += f.untagged;
        } else {
            tally.short_lived_flows += 1;
        }
    }
    let mut cache = CacheStats::default();
    let mut unresolved: u64 = st.rings.iter().map(|r| r.len() as u64).sum();
    for m in &st.managers {
        if let Some(c) = &m.cache {
            cache.lookups += c.stats.lookups;
            cache.hits += c.stats.hits;
            cache.misses += c.stats.misses;
            cache.good_hits += c.stats.good_hits;
            cache.error_hits += c.stats.error_hits;
            cache.inserts += c.stats.inserts;
            cache.evictions += c.stats.evictions;
        }
        for c in m.chips.iter().flatten() {
            unresolved += c.0.len() as u64;
        }
    }
    let (report, detail) = st.out.finish(st.counters, tally, cache, unresolved);
    Ok(SimOutput { report, detail })
}

impl State<'_> {
    fn schedule(&mut self, at: SimTime, e: Pending) {
        let rank = match e {
            Pending::Complete { .. } => 1,
            Pending::Deadline { .. } => 2,
        };
        self.events.push((at, rank, self.seq, e));
        self.seq += 1;
    }

    fn owner(&self, key: &FiveTuple) -> usize {
        let p = self.managers.len() as u32;
        let per = self.rings.len() as u32 / p;
        let h = symmetric_hash(key);
        ((h % p) * per + (h / p) % per) as usize
    }

    fn canonical(t: &FiveTuple) -> FiveTuple {
        let r = t.reverse();
        if (t.src_ip, t.src_port) <= (r.src_ip, r.src_port) {
            *t
        } else {
            r
        }
    }

    fn packet(&mut self, p: &PacketRecord, now: SimTime) {
        let fm = self.owner(&p.flow);
        let key = Self::canonical(&p.flow);
        let w = u64::from(p.weight);
        self.counters.packets += w;
        let k = self.cfg.flow_table.k;
        let idx = match self.flows[fm].iter().position(|f| f.key == key) {
            Some(i) => i,
            None => {
                self.counters.inserted += 1;
                self.flows[fm].push(Flow {
                    key,
                    initiator: (p.flow.src_ip, p.flow.src_port),
                    features: Vec::new(),
                    pkts: 0,
                    untagged: 0,
                    last_ts: p.ts,
                    truth: None,
                    label: None,
                    emitted: false,
                    tagged_seen: false,
                });
                self.flows[fm].len() - 1
            }
        };
        let f = &mut self.flows[fm][idx];
        let prev = f.last_ts;
        f.pkts += w;
        f.last_ts = p.ts;
        if f.truth.is_none() {
            f.truth = p.label;
        }
        if let Some((_, at)) = f.label {
            let mut untagged = 0;
            if w > 1 && at > prev && p.ts > prev {
                let before = (at.min(p.ts) - prev) as f64;
                untagged = (w as f64 * before / (p.ts - prev) as f64).round() as u64;
            }
            f.untagged += untagged;
            self.counters.untagged_packets += untagged;
            self.counters.tagged_packets += w - untagged;
            if !f.tagged_seen {
                f.tagged_seen = true;
                self.counters.flows_tagged += 1;
            }
            return;
        }
        f.untagged += w;
        self.counters.untagged_packets += w;
        if f.features.len() < k {
            let sign = if (p.flow.src_ip, p.flow.src_port) == f.initiator {
                Direction::Forward.sign()
            } else {
                Direction::Backward.sign()
            };
            f.features.push(i32::from(p.length) * sign);
        }
        if !f.emitted && f.features.len() == k {
            f.emitted = true;
            self.counters.series_emitted += 1;
            let s = Series {
                key,
                features: f.features.clone(),
                completed_at: p.ts,
                truth: f.truth,
            };
            let accepted = self.rings[fm].len() < self.ring_cap;
            if accepted {
                self.rings[fm].push_back(s);
            }
            self.out.series_routed(now, accepted);
            let m = fm / (self.rings.len() / self.managers.len());
            if accepted && self.period.is_none() && self.managers[m].chips.iter().any(Option::is_none) {
                self.cycle(m, now);
            }
        }
    }

    fn label_flow(&mut self, key: &FiveTuple, l: Label, now: SimTime) {
        let fm = self.owner(key);
        match self.flows[fm].iter_mut().find(|f| f.key == *key) {
            Some(f) => {
                if f.label.is_none() {
                    f.label = Some((l, now));
                }
                self.counters.labels_applied += 1;
            }
            None => self.counters.labels_missed += 1,
        }
    }

    fn deadline(&mut self, m: usize, now: SimTime) {
        self.cycle(m, now);
        let busy = self.managers[m].chips.iter().any(Option::is_some);
        let waiting = self.managers[m].rings.iter().any(|&r| !self.rings[r].is_empty());
        if !self.trace_done || busy || waiting {
            let t = self.period.expect("periodic");
            self.schedule(now + t, Pending::Deadline { manager: m });
        }
    }

    fn complete(&mut self, m: usize, chip: usize, now: SimTime) {
        let (series, labels) = self.managers[m].chips[chip].take().expect("busy chip");
        for (s, &l) in series.iter().zip(&labels) {
            self.label_flow(&s.key, l, now);
            self.out.labeled(s.key, s.completed_at, now, l, LabelSource::Inference);
        }
        if let Some(c) = &mut self.managers[m].cache {
            for (s, &l) in series.iter().zip(&labels) {
                c.insert(s, l);
            }
        }
        if self.period.is_none() || self.managers[m].pending {
            self.managers[m].pending = false;
            self.cycle(m, now);
        }
    }

    fn plan(&self, r: usize) -> (usize, usize) {
        let sizes = self.cfg.profile.batch_sizes.sizes();
        let largest = *sizes.last().expect("non-empty");
        let mut size = largest;
        for &b in sizes {
            if b >= r {
                size = b;
                break;
            }
        }
        let mut take = r.min(size);
        if self.cfg.policy.mode == BatchMode::CarryOver
            && (size - take) as f64 / size as f64 > self.cfg.policy.phi
        {
            if let Some(&b) = sizes.iter().filter(|&&b| b <= r).last() {
                size = b;
                take = b;
            }
        }
        (size, take)
    }

    fn cycle(&mut self, m: usize, now: SimTime) {
        let n = self.managers[m].rings.len();
        let start = self.managers[m].first_ring;
        if self.cfg.deployment.merge_order == MergeOrder::RoundRobin {
            self.managers[m].first_ring = (start + 1) % n;
        }
        let order: Vec<usize> = (0..n).map(|i| self.managers[m].rings[(start + i) % n]).collect();

        if self.managers[m].cache.is_some() {
            for &r in &order {
                let mut keep = VecDeque::new();
                let mut hits = Vec::new();
                while let Some(s) = self.rings[r].pop_front() {
                    match self.managers[m].cache.as_mut().expect("cache").lookup(&s) {
                        Some(l) => hits.push((s, l)),
                        None => keep.push_back(s),
                    }
                }
                self.rings[r] = keep;
                for (s, l) in hits {
                    let good = self.oracle.label(&s) == l;
                    let c = self.managers[m].cache.as_mut().expect("cache");
                    if good {
                        c.stats.good_hits += 1;
                    } else {
                        c.stats.error_hits += 1;
                    }
                    self.out.cache_hit(good);
                    self.label_flow(&s.key, l, now);
                    self.out.labeled(s.key, s.completed_at, now, l, LabelSource::Cache);
                }
            }
        }

        let largest = self.cfg.profile.batch_sizes.max();
        let mut first = true;
        loop {
            let r: usize = order.iter().map(|&x| self.rings[x].len()).sum();
            if r == 0 {
                break;
            }
            let Some(chip) = self.managers[m].chips.iter().position(Option::is_none) else {
                self.managers[m].pending = true;
                break;
            };
            if !first && r < largest {
                break;
            }
            let (size, take) = self.plan(r);
            let mut series = Vec::new();
            for &x in &order {
                while series.len() < take {
                    match self.rings[x].pop_front() {
                        Some(s) => series.push(s),
                        None => break,
                    }
                }
            }
            let padding = size - take;
            let lat = self.cfg.profile.latency_us(size);
            let pad_us = lat * padding as u64 / size as u64;
            let labels: Vec<Label> = series.iter().map(|s| self.oracle.label(s)).collect();
            self.out.batch(m, now, size, padding, lat - pad_us, pad_us);
            self.managers[m].chips[chip] = Some((series, labels));
            self.schedule(now + lat, Pending::Complete { manager: m, chip });
            first = false;
        }
    }
}
