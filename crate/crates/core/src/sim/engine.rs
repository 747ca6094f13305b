use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::accelerator::LabelOracle;
use crate::batching::{pad, Batch};
use crate::cache::{grade_hit, HitGrade, PrefixCache};
use crate::flowtable::{FlowAction, FlowCounters, FlowTable, RetiredTally};
use crate::model::{FiveTuple, Label, PacketRecord, Series, SimTime};
use crate::ring::{CRing, RingReader};
use crate::sim::config::{ConfigError, MergeOrder, SimConfig};
use crate::sim::metrics::{Collector, LabelSource, MetricsReport, RunDetail};
use crate::traffic::dispatch::symmetric_hash;

/// Kinds of scheduled events, in tie-breaking order. Packet arrivals are
/// merged from the trace and sort before both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Event {
    InferenceComplete { manager: usize, chip: usize },
    PlanningDeadline { manager: usize },
}

/// Events ordered by time, then kind, then insertion sequence.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<(SimTime, Event, u64)>>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, at: SimTime, ev: Event) {
        self.heap.push(Reverse((at, ev, self.seq)));
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse((t, _, _))| *t)
    }

    pub fn pop(&mut self) -> Option<(SimTime, Event)> {
        self.heap.pop().map(|Reverse((t, e, _))| (t, e))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

struct FlowManager {
    table: FlowTable,
    ring: CRing<Series>,
}

struct InFlight {
    series: Vec<Series>,
    labels: Vec<Label>,
}

struct AnalyticsManager {
    /// Flow-manager indexes whose rings this manager drains.
    rings: Vec<usize>,
    cache: Option<PrefixCache>,
    chips: Vec<Option<InFlight>>,
    pending: bool,
    first_ring: usize,
}

/// Report plus the optional per-series and per-batch traces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub detail: Option<RunDetail>,
}

pub struct Simulator {
    config: SimConfig,
    period: Option<SimTime>,
    fms: Vec<FlowManager>,
    ams: Vec<AnalyticsManager>,
    oracle: Box<dyn LabelOracle>,
    queue: EventQueue,
    collector: Collector,
    trace_done: bool,
    now: SimTime,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let pipelines = config.deployment.pipelines;
        let per = config.deployment.topology.flow_managers();
        let chips = config.chips_per_manager();
        let mut fms = Vec::with_capacity(pipelines * per);
        for _ in 0..pipelines * per {
            fms.push(FlowManager {
                table: FlowTable::new(config.flow_table)?,
                ring: CRing::new(config.ring_capacity),
            });
        }
        let mut ams = Vec::with_capacity(pipelines);
        for p in 0..pipelines {
            ams.push(AnalyticsManager {
                rings: (p * per..(p + 1) * per).collect(),
                cache: config.cache.map(PrefixCache::new).transpose()?,
                chips: (0..chips).map(|_| None).collect(),
                pending: false,
                first_ring: 0,
            });
        }
        let period = config.period_us();
        let mut queue = EventQueue::default();
        if let Some(t) = period {
            for m in 0..pipelines {
                queue.push(t, Event::PlanningDeadline { manager: m });
            }
        }
        Ok(Self {
            period,
            oracle: config.oracle.build(config.classes),
            collector: Collector::new(config.window_us(), (pipelines * chips) as u64, false),
            fms,
            ams,
            queue,
            trace_done: false,
            now: 0,
            config,
        })
    }

    /// Keeps per-series outcomes and per-batch records in the output.
    pub fn with_detail(mut self) -> Self {
        self.collector = Collector::new(
            self.config.window_us(),
            (self.ams.len() * self.config.chips_per_manager()) as u64,
            true,
        );
        self
    }

    /// Seeds every manager's cache with `label` under the key of `series`.
    pub fn prewarm(&mut self, series: &Series, label: Label) {
        for am in &mut self.ams {
            if let Some(c) = &mut am.cache {
                c.insert(series, label);
            }
        }
    }

    /// Flow manager owning a flow: pipeline by symmetric hash, then a second
    /// split across the pipeline's flow managers.
    fn flow_manager_of(&self, key: &FiveTuple) -> usize {
        let p = self.ams.len() as u32;
        let per = self.fms.len() as u32 / p;
        let h = symmetric_hash(key);
        ((h % p) * per + (h / p) % per) as usize
    }

    fn manager_of_fm(&self, fm: usize) -> usize {
        fm / (self.fms.len() / self.ams.len())
    }

    pub fn run<I>(mut self, trace: I) -> SimOutput
    where
        I: IntoIterator<Item = PacketRecord>,
    {
        for p in trace {
            self.feed(&p);
        }
        self.finish()
    }

    /// Processes every event due before `p`, then `p` itself.
    ///
    /// Feeding packets one by one and calling [`Self::finish`] is equivalent
    /// to [`Self::run`]; it lets several simulators share one trace pass.
    pub fn feed(&mut self, p: &PacketRecord) {
        while self.queue.peek_time().is_some_and(|t| t < p.ts) {
            self.step();
        }
        // Out-of-order records are processed at the current time.
        self.now = self.now.max(p.ts);
        self.on_packet(p);
    }

    /// Marks the trace as exhausted, drains the event queue and reports.
    pub fn finish(mut self) -> SimOutput {
        self.trace_done = true;
        while !self.queue.is_empty() {
            self.step();
        }
        self.report()
    }

    fn step(&mut self) {
        let (t, ev) = self.queue.pop().expect("queue not empty");
        self.now = t;
        match ev {
            Event::InferenceComplete { manager, chip } => self.on_complete(manager, chip),
            Event::PlanningDeadline { manager } => self.on_deadline(manager),
        }
    }

    fn on_packet(&mut self, p: &PacketRecord) {
        let now = self.now;
        let fm = self.flow_manager_of(&p.flow);
        if let FlowAction::SeriesReady(series) = self.fms[fm].table.on_packet(p, now) {
            let accepted = self.fms[fm].ring.push(series);
            self.collector.series_routed(now, accepted);
            let m = self.manager_of_fm(fm);
            if accepted && self.period.is_none() && self.ams[m].chips.iter().any(Option::is_none) {
                self.analytics_cycle(m, now);
            }
        }
    }

    fn on_deadline(&mut self, m: usize) {
        let now = self.now;
        self.analytics_cycle(m, now);
        let am = &self.ams[m];
        let busy = am.chips.iter().any(Option::is_some);
        let waiting = am.rings.iter().any(|&r| !self.fms[r].ring.is_empty());
        if !self.trace_done || busy || waiting {
            let t = self.period.expect("deadlines need a period");
            self.queue.push(now + t, Event::PlanningDeadline { manager: m });
        }
    }

    fn on_complete(&mut self, m: usize, chip: usize) {
        let now = self.now;
        let done = self.ams[m].chips[chip].take().expect("completion for idle chip");
        for (s, &l) in done.series.iter().zip(&done.labels) {
            let fm = self.flow_manager_of(&s.key);
            self.fms[fm].table.apply_label(&s.key, l, now);
            self.collector.labeled(s.key, s.completed_at, now, l, LabelSource::Inference);
        }
        if let Some(c) = &mut self.ams[m].cache {
            for (s, &l) in done.series.iter().zip(&done.labels) {
                c.insert(s, l);
            }
        }
        if self.period.is_none() || self.ams[m].pending {
            self.ams[m].pending = false;
            self.analytics_cycle(m, now);
        }
    }

    fn waiting(&self, m: usize) -> usize {
        self.ams[m].rings.iter().map(|&r| self.fms[r].ring.len()).sum()
    }

    /// Cache filter, then batch composition and submission on idle chips.
    ///
    /// The first batch of a cycle follows the policy; further batches in the
    /// same cycle are only submitted while a full largest batch is waiting.
    pub(crate) fn analytics_cycle(&mut self, m: usize, now: SimTime) {
        let order = self.ring_order(m);

        if self.ams[m].cache.is_some() {
            for &r in &order {
                let cache = self.ams[m].cache.as_mut().expect("checked");
                let hits = cache.filter_ring(&mut self.fms[r].ring);
                for (s, l) in hits {
                    let grade = grade_hit(&s, l, self.oracle.as_ref());
                    let cache = self.ams[m].cache.as_mut().expect("checked");
                    cache.record_grade(grade);
                    self.collector.cache_hit(grade == HitGrade::Good);
                    self.fms[r].table.apply_label(&s.key, l, now);
                    self.collector.labeled(s.key, s.completed_at, now, l, LabelSource::Cache);
                }
            }
        }

        let sizes = self.config.profile.batch_sizes.clone();
        let k = self.config.flow_table.k;
        let mut first = true;
        loop {
            let r = self.waiting(m);
            if r == 0 {
                break;
            }
            let Some(chip) = self.ams[m].chips.iter().position(Option::is_none) else {
                self.ams[m].pending = true;
                break;
            };
            if !first && r < sizes.max() {
                break;
            }
            let plan = self.config.policy.plan(r, &sizes).expect("r > 0");
            let mut series = Vec::with_capacity(plan.size);
            for &ring in &order {
                let want = plan.take - series.len();
                if want == 0 {
                    break;
                }
                series.extend(self.fms[ring].ring.drain_up_to(want));
            }
            debug_assert_eq!(series.len(), plan.take);
            let batch = pad(Batch::new(series), plan.padding, k);
            let inf = self
                .config
                .profile
                .infer(&batch, self.oracle.as_ref(), now)
                .expect("planned sizes come from the profile");
            self.collector
                .batch(m, now, batch.size(), batch.padding(), inf.busy_real, inf.busy_padding);
            let mut series = batch.series;
            series.truncate(batch.real);
            self.ams[m].chips[chip] = Some(InFlight {
                series,
                labels: inf.labels,
            });
            self.queue
                .push(inf.completion, Event::InferenceComplete { manager: m, chip });
            first = false;
        }
    }

    fn ring_order(&mut self, m: usize) -> Vec<usize> {
        let am = &mut self.ams[m];
        let n = am.rings.len();
        let start = am.first_ring;
        if self.config.deployment.merge_order == MergeOrder::RoundRobin {
            am.first_ring = (am.first_ring + 1) % n;
        }
        (0..n).map(|i| am.rings[(start + i) % n]).collect()
    }

    fn report(self) -> SimOutput {
        let mut counters = FlowCounters::default();
        let mut tally = RetiredTally::default();
        let mut unresolved = 0u64;
        for fm in &self.fms {
            counters.merge(fm.table.counters());
            tally.merge(&fm.table.tally_all());
            unresolved += fm.ring.len() as u64;
        }
        let mut cache = crate::cache::CacheStats::default();
        for am in &self.ams {
            if let Some(c) = &am.cache {
                cache.merge(c.stats());
            }
            unresolved += am
                .chips
                .iter()
                .flatten()
                .map(|f| f.series.len() as u64)
                .sum::<u64>();
        }
        let (report, detail) = self.collector.finish(counters, tally, cache, unresolved);
        SimOutput { report, detail }
    }
}

/// Runs `trace` through a freshly built deployment.
pub fn run<I>(trace: I, config: &SimConfig) -> Result<MetricsReport, ConfigError>
where
    I: IntoIterator<Item = PacketRecord>,
{
    Ok(Simulator::new(config.clone())?.run(trace).report)
}

/// Runs every simulator over one pass of `trace`.
pub fn run_shared<I>(mut sims: Vec<Simulator>, trace: I) -> Vec<SimOutput>
where
    I: IntoIterator<Item = PacketRecord>,
{
    for p in trace {
        for s in &mut sims {
            s.feed(&p);
        }
    }
    sims.into_iter().map(Simulator::finish).collect()
}
