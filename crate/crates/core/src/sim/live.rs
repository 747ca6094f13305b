//! Threaded execution of a deployment.
//!
//! A feeder thread dispatches packets to one thread per flow manager. Flow
//! managers push completed series into their ring; one thread per analytics
//! manager drains its rings, filters them through the cache, batches and
//! classifies, and sends `(flow, label)` pairs back to the owning flow
//! manager over a second ring. Rings are the only channel between threads.
//! Timing is wall-clock, so runs are not reproducible.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::accelerator::LabelOracle;
use crate::batching::{pad, Batch};
use crate::cache::{grade_hit, CacheStats, HitGrade, PrefixCache};
use crate::flowtable::{FlowAction, FlowCounters, FlowTable};
use crate::model::{FiveTuple, Label, PacketRecord, Series};
use crate::ring::{CRing, Consumer, Producer, RingReader};
use crate::sim::config::{ConfigError, SimConfig};
use crate::traffic::dispatch::symmetric_hash;

#[derive(Debug, Clone, Copy)]
pub struct LiveOptions {
    /// Stop feeding packets after this long.
    pub max_wall: Option<Duration>,
    /// Sleep for the modeled latency of every batch.
    pub sleep_latency: bool,
    pub packet_ring_capacity: usize,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            max_wall: None,
            sleep_latency: true,
            packet_ring_capacity: 1 << 14,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LiveReport {
    pub packets_fed: u64,
    pub series_produced: u64,
    pub ring_dropped: u64,
    pub series_consumed: u64,
    pub cache_hits: u64,
    pub good_hits: u64,
    pub error_hits: u64,
    pub inferred: u64,
    pub unresolved: u64,
    pub duplicates: u64,
    pub batches: u64,
    pub padded_slots: u64,
    pub labels_returned: u64,
    pub flow_table: FlowCounters,
    pub cache: CacheStats,
    pub elapsed_ms: u64,
}

impl LiveReport {
    pub fn conserved(&self) -> bool {
        self.cache_hits + self.inferred + self.ring_dropped + self.unresolved == self.series_produced
    }
}

struct FmResult {
    produced: u64,
    dropped: u64,
    labels: u64,
    counters: FlowCounters,
}

#[derive(Default)]
struct AmResult {
    consumed: u64,
    hits: u64,
    good: u64,
    error: u64,
    inferred: u64,
    duplicates: u64,
    batches: u64,
    padded: u64,
    unresolved: u64,
    cache: CacheStats,
}

fn push_blocking<T>(p: &mut Producer<T>, mut v: T) {
    loop {
        match p.try_push(v) {
            Ok(()) => return,
            Err(back) => {
                v = back;
                thread::yield_now();
            }
        }
    }
}

fn owner(key: &FiveTuple, pipelines: u32, per: u32) -> usize {
    let h = symmetric_hash(key);
    ((h % pipelines) * per + (h / pipelines) % per) as usize
}

/// Runs `trace` on threads and returns the consumer-side accounting.
pub fn run_live<I>(trace: I, config: &SimConfig, opts: LiveOptions) -> Result<LiveReport, ConfigError>
where
    I: IntoIterator<Item = PacketRecord>,
{
    config.validate()?;
    let started = Instant::now();
    let pipelines = config.deployment.pipelines;
    let per = config.deployment.topology.flow_managers();
    let n_fm = pipelines * per;

    let mut pkt_tx = Vec::new();
    let mut fm_parts = Vec::new();
    let mut series_rx: Vec<Option<Consumer<Series>>> = Vec::new();
    let mut label_tx: Vec<Option<Producer<(FiveTuple, Label)>>> = Vec::new();
    for _ in 0..n_fm {
        let (ptx, prx) = CRing::new(opts.packet_ring_capacity).split();
        let (stx, srx) = CRing::new(config.ring_capacity).split();
        let (ltx, lrx) = CRing::new(config.ring_capacity).split();
        pkt_tx.push(ptx);
        fm_parts.push((prx, stx, lrx, FlowTable::new(config.flow_table)?));
        series_rx.push(Some(srx));
        label_tx.push(Some(ltx));
    }

    let input_done: Arc<Vec<AtomicBool>> = Arc::new((0..n_fm).map(|_| AtomicBool::new(false)).collect());
    let fm_done: Arc<Vec<AtomicBool>> = Arc::new((0..n_fm).map(|_| AtomicBool::new(false)).collect());
    let am_done: Arc<Vec<AtomicBool>> = Arc::new((0..pipelines).map(|_| AtomicBool::new(false)).collect());

    let mut fm_handles = Vec::new();
    for (i, (mut prx, mut stx, mut lrx, mut table)) in fm_parts.into_iter().enumerate() {
        let (input_done, fm_done, am_done) = (input_done.clone(), fm_done.clone(), am_done.clone());
        let m = i / per;
        fm_handles.push(thread::spawn(move || {
            let mut produced = 0u64;
            let mut labels = 0u64;
            let epoch = Instant::now();
            loop {
                let now = epoch.elapsed().as_micros() as u64;
                for (key, l) in lrx.drain_up_to(usize::MAX) {
                    table.apply_label(&key, l, now);
                    labels += 1;
                }
                let pkts = prx.drain_up_to(256);
                let idle = pkts.is_empty();
                for p in pkts {
                    if let FlowAction::SeriesReady(s) = table.on_packet(&p, now) {
                        produced += 1;
                        stx.push(s);
                    }
                }
                if idle && input_done[i].load(Ordering::Acquire) && prx.is_empty() {
                    fm_done[i].store(true, Ordering::Release);
                    if am_done[m].load(Ordering::Acquire) && lrx.is_empty() {
                        break;
                    }
                }
                if idle {
                    thread::yield_now();
                }
            }
            FmResult {
                produced,
                dropped: stx.dropped(),
                labels,
                counters: *table.counters(),
            }
        }));
    }

    let mut am_handles = Vec::new();
    for m in 0..pipelines {
        let ids: Vec<usize> = (m * per..(m + 1) * per).collect();
        let mut rings: Vec<Consumer<Series>> = ids.iter().map(|&i| series_rx[i].take().expect("one consumer")).collect();
        let mut back: Vec<Producer<(FiveTuple, Label)>> = ids.iter().map(|&i| label_tx[i].take().expect("one producer")).collect();
        let cfg = config.clone();
        let (fm_done, am_done) = (fm_done.clone(), am_done.clone());
        am_handles.push(thread::spawn(move || {
            let oracle: Box<dyn LabelOracle> = cfg.oracle.build(cfg.classes);
            let mut cache = cfg.cache.map(|c| PrefixCache::new(c).expect("validated"));
            let period = cfg.period_us().map(Duration::from_micros);
            let sizes = cfg.profile.batch_sizes.clone();
            let k = cfg.flow_table.k;
            let mut seen: HashSet<FiveTuple> = HashSet::new();
            let mut res = AmResult::default();
            let mut next_deadline = Instant::now() + period.unwrap_or_default();
            let mut first_ring = 0usize;
            let route = |key: &FiveTuple| owner(key, cfg.deployment.pipelines as u32, per as u32) - m * per;
            loop {
                let inputs_done = ids.iter().all(|&i| fm_done[i].load(Ordering::Acquire));
                let waiting: usize = rings.iter().map(|r| r.len()).sum();
                if inputs_done && waiting == 0 {
                    break;
                }
                if let Some(p) = period {
                    let now = Instant::now();
                    if now < next_deadline && !inputs_done {
                        thread::sleep((next_deadline - now).min(Duration::from_millis(1)));
                        continue;
                    }
                    next_deadline += p;
                } else if waiting == 0 {
                    thread::yield_now();
                    continue;
                }
                let n = rings.len();
                let order: Vec<usize> = (0..n).map(|j| (first_ring + j) % n).collect();
                first_ring = (first_ring + 1) % n;

                if let Some(c) = &mut cache {
                    for &j in &order {
                        for (s, l) in c.filter_ring(&mut rings[j]) {
                            res.consumed += 1;
                            if !seen.insert(s.key) {
                                res.duplicates += 1;
                            }
                            let g = grade_hit(&s, l, oracle.as_ref());
                            c.record_grade(g);
                            res.hits += 1;
                            if g == HitGrade::Good {
                                res.good += 1;
                            } else {
                                res.error += 1;
                            }
                            push_blocking(&mut back[route(&s.key)], (s.key, l));
                        }
                    }
                }
                let r: usize = rings.iter().map(|x| x.len()).sum();
                let Some(plan) = cfg.policy.plan(r, &sizes) else { continue };
                let mut series = Vec::with_capacity(plan.size);
                for &j in &order {
                    let want = plan.take - series.len();
                    series.extend(rings[j].drain_up_to(want));
                }
                let real = series.len();
                let batch = pad(Batch::new(series), plan.size - real, k);
                let inf = match cfg.profile.infer(&batch, oracle.as_ref(), 0) {
                    Ok(inf) => inf,
                    Err(_) => unreachable!("planned sizes come from the profile"),
                };
                if opts.sleep_latency {
                    thread::sleep(Duration::from_micros(inf.completion));
                }
                res.batches += 1;
                res.padded += batch.padding() as u64;
                for (s, &l) in batch.real_series().iter().zip(&inf.labels) {
                    res.consumed += 1;
                    res.inferred += 1;
                    if !seen.insert(s.key) {
                        res.duplicates += 1;
                    }
                    if let Some(c) = &mut cache {
                        c.insert(s, l);
                    }
                    push_blocking(&mut back[route(&s.key)], (s.key, l));
                }
            }
            res.unresolved = rings.iter().map(|r| r.len() as u64).sum();
            res.cache = cache.map(|c| *c.stats()).unwrap_or_default();
            am_done[m].store(true, Ordering::Release);
            res
        }));
    }

    let mut fed = 0u64;
    for p in trace {
        if opts.max_wall.is_some_and(|w| started.elapsed() >= w) {
            break;
        }
        let i = owner(&p.flow, pipelines as u32, per as u32);
        push_blocking(&mut pkt_tx[i], p);
        fed += 1;
    }
    for flag in input_done.iter() {
        flag.store(true, Ordering::Release);
    }

    let mut report = LiveReport {
        packets_fed: fed,
        ..LiveReport::default()
    };
    for h in am_handles {
        let r = h.join().expect("analytics thread panicked");
        report.series_consumed += r.consumed;
        report.cache_hits += r.hits;
        report.good_hits += r.good;
        report.error_hits += r.error;
        report.inferred += r.inferred;
        report.duplicates += r.duplicates;
        report.batches += r.batches;
        report.padded_slots += r.padded;
        report.unresolved += r.unresolved;
        report.cache.merge(&r.cache);
    }
    for h in fm_handles {
        let r = h.join().expect("flow manager thread panicked");
        report.series_produced += r.produced;
        report.ring_dropped += r.dropped;
        report.labels_returned += r.labels;
        report.flow_table.merge(&r.counters);
    }
    report.elapsed_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::PolicyConfig;
    use crate::cache::CacheConfig;
    use crate::flowtable::FlowTableConfig;
    use crate::sim::config::{Deployment, Topology};
    use crate::traffic::{Catalog, CatalogConfig, TraceGenerator};

    fn config(topology: Topology, policy: PolicyConfig) -> SimConfig {
        SimConfig {
            deployment: Deployment::new(topology, 2),
            policy,
            cache: Some(CacheConfig::default()),
            flow_table: FlowTableConfig {
                records: 1 << 16,
                buckets: 1 << 13,
                ..FlowTableConfig::micro_benchmark()
            },
            ..SimConfig::default()
        }
    }

    #[test]
    fn conserves_series_on_every_topology() {
        let cat = Catalog::synthetic(&CatalogConfig { size: 2_000, ..CatalogConfig::default() }, 3).unwrap();
        for topology in [Topology::OneOneOne, Topology::TwoOneOne, Topology::OneOneTwo] {
            for policy in [PolicyConfig::carry_over(2.0, 0.2), PolicyConfig::no_timeout()] {
                let trace = TraceGenerator::poisson(&cat, 5_000.0, 0.5, 11).unwrap();
                let opts = LiveOptions {
                    sleep_latency: false,
                    ..LiveOptions::default()
                };
                let r = run_live(trace, &config(topology, policy), opts).unwrap();
                assert!(r.series_produced > 0);
                assert!(r.conserved(), "{r:?}");
                assert_eq!(r.duplicates, 0);
                assert_eq!(r.unresolved, 0);
                assert_eq!(r.labels_returned, r.cache_hits + r.inferred);
            }
        }
    }
}
