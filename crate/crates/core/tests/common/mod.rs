//! Independent reference models shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use inferline::flowtable::{flow_hash, FlowAction, FlowTableConfig, FlowView, SLOTS_PER_BUCKET};
use inferline::model::{Direction, FiveTuple, Label, PacketRecord, Series, SimTime, MICROS_PER_SEC};
use inferline::traffic::symmetric_hash;

// ---------------------------------------------------------------------------
// Batch planning, written straight from the algorithm text with linear scans.

/// `(size, take, padding, carried)` for the timeout policy.
pub fn brute_timeout(r: usize, sizes: &[usize]) -> (usize, usize, usize, usize) {
    let mut best: Option<usize> = None;
    for &b in sizes {
        if b >= r && best.map_or(true, |x| b < x) {
            best = Some(b);
        }
    }
    let size = match best {
        Some(b) => b,
        None => {
            let mut m = 0;
            for &b in sizes {
                if b > m {
                    m = b;
                }
            }
            m
        }
    };
    let take = if r < size { r } else { size };
    (size, take, size - take, r - take)
}

pub fn brute_carryover(r: usize, sizes: &[usize], phi: f64) -> (usize, usize, usize, usize) {
    let plan = brute_timeout(r, sizes);
    // padding / B > phi, compared without division.
    if (plan.2 as f64) <= phi * plan.0 as f64 {
        return plan;
    }
    let mut below: Option<usize> = None;
    for &b in sizes {
        if b <= r && below.map_or(true, |x| b > x) {
            below = Some(b);
        }
    }
    match below {
        Some(b) => (b, b, 0, r - b),
        None => plan,
    }
}

// ---------------------------------------------------------------------------
// Flow table: a hash map of flows plus a per-bucket slot layout, used only to
// decide when lazy reclamation runs and which flows it frees.

#[derive(Debug, Clone)]
struct ShadowFlow {
    initiator: (u32, u16),
    count: u64,
    features: Vec<i32>,
    label: Option<Label>,
    truth: Option<Label>,
    emitted: bool,
    /// Coarse seconds of the last packet (or insertion).
    touched_s: u64,
}

pub struct ShadowTable {
    cfg: FlowTableConfig,
    flows: HashMap<FiveTuple, ShadowFlow>,
    chains: HashMap<usize, Vec<[Option<FiveTuple>; SLOTS_PER_BUCKET]>>,
}

impl ShadowTable {
    pub fn new(cfg: FlowTableConfig) -> Self {
        Self {
            cfg,
            flows: HashMap::new(),
            chains: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    fn canonical(t: &FiveTuple) -> FiveTuple {
        let r = t.reverse();
        if (t.src_ip, t.src_port) <= (r.src_ip, r.src_port) {
            *t
        } else {
            r
        }
    }

    fn bucket_of(&self, t: &FiveTuple) -> usize {
        let h = flow_hash(symmetric_hash(t), t);
        (h & 0x00ff_ffff) as usize & (self.cfg.buckets - 1)
    }

    fn reclaim(&mut self, b: usize, now_s: u64) {
        let chain = self.chains.entry(b).or_insert_with(|| vec![[None; SLOTS_PER_BUCKET]]);
        let mut freed = Vec::new();
        for bucket in chain.iter_mut() {
            for slot in bucket.iter_mut() {
                if let Some(k) = slot {
                    let f = &self.flows[k];
                    if now_s - f.touched_s > u64::from(self.cfg.stale_timeout_s) {
                        freed.push(*k);
                        *slot = None;
                    }
                }
            }
        }
        let main = chain[0];
        let mut rest: Vec<_> = chain[1..].iter().filter(|b| b.iter().any(Option::is_some)).copied().collect();
        chain.clear();
        chain.push(main);
        chain.append(&mut rest);
        for k in freed {
            self.flows.remove(&k);
        }
    }

    fn insert(&mut self, key: FiveTuple, initiator: (u32, u16), now_s: u64) -> bool {
        let b = self.bucket_of(&key);
        let has_free = self
            .chains
            .get(&b)
            .map_or(true, |c| c.iter().any(|bk| bk.iter().any(Option::is_none)));
        if self.flows.len() == self.cfg.records || !has_free {
            self.reclaim(b, now_s);
        }
        if self.flows.len() == self.cfg.records {
            return false;
        }
        let chain = self.chains.entry(b).or_insert_with(|| vec![[None; SLOTS_PER_BUCKET]]);
        let place = chain
            .iter_mut()
            .flat_map(|bk| bk.iter_mut())
            .find(|s| s.is_none());
        match place {
            Some(s) => *s = Some(key),
            None => {
                let mut fresh = [None; SLOTS_PER_BUCKET];
                fresh[0] = Some(key);
                chain.push(fresh);
            }
        }
        self.flows.insert(
            key,
            ShadowFlow {
                initiator,
                count: 0,
                features: Vec::new(),
                label: None,
                truth: None,
                emitted: false,
                touched_s: now_s,
            },
        );
        true
    }

    pub fn on_packet(&mut self, p: &PacketRecord) -> FlowAction {
        let key = Self::canonical(&p.flow);
        let now_s = p.ts / MICROS_PER_SEC;
        if let Some(f) = self.flows.get_mut(&key) {
            f.touched_s = now_s;
        } else if !self.insert(key, (p.flow.src_ip, p.flow.src_port), now_s) {
            return FlowAction::DroppedNoCapacity;
        }
        let k = self.cfg.k;
        let f = self.flows.get_mut(&key).expect("present");
        f.count += u64::from(p.weight);
        if f.truth.is_none() {
            f.truth = p.label;
        }
        if let Some(l) = f.label {
            return FlowAction::TagAndForward(l);
        }
        if f.features.len() < k {
            let sign = if (p.flow.src_ip, p.flow.src_port) == f.initiator { 1 } else { -1 };
            f.features.push(i32::from(p.length) * sign);
        }
        if !f.emitted && f.features.len() == k {
            f.emitted = true;
            return FlowAction::SeriesReady(Series {
                key,
                features: f.features.clone(),
                completed_at: p.ts,
                truth: f.truth,
            });
        }
        FlowAction::ForwardUntagged
    }

    pub fn lookup(&self, t: &FiveTuple) -> Option<FlowView> {
        let key = Self::canonical(t);
        self.flows.get(&key).map(|f| FlowView {
            key,
            label: f.label,
            pkt_count: f.count,
            features: f.features.clone(),
        })
    }

    pub fn apply_label(&mut self, t: &FiveTuple, label: Label) -> bool {
        match self.flows.get_mut(&Self::canonical(t)) {
            Some(f) => {
                f.label.get_or_insert(label);
                true
            }
            None => false,
        }
    }
}

// ---------------------------------------------------------------------------
// LRU as a plain recency list, most recent first.

pub struct RecencyList {
    cap: usize,
    items: Vec<(Vec<i32>, Label)>,
}

impl RecencyList {
    pub fn new(cap: usize) -> Self {
        Self { cap, items: Vec::new() }
    }

    pub fn get(&mut self, k: &[i32]) -> Option<Label> {
        let i = self.items.iter().position(|(x, _)| x == k)?;
        let e = self.items.remove(i);
        let l = e.1;
        self.items.insert(0, e);
        Some(l)
    }

    pub fn put(&mut self, k: Vec<i32>, l: Label) {
        if let Some(i) = self.items.iter().position(|(x, _)| *x == k) {
            self.items.remove(i);
        }
        self.items.insert(0, (k, l));
        self.items.truncate(self.cap);
    }

    pub fn keys(&self) -> Vec<Vec<i32>> {
        self.items.iter().map(|(k, _)| k.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Small hand-built traces.

pub fn tuple(i: u32) -> FiveTuple {
    FiveTuple::new(0x0A00_0000 + i, 0xC0A8_0000 + i * 7, 10_000 + (i % 50_000) as u16, 443, 6)
}

/// `packets` packets of flow `i`, alternating direction, `gap` µs apart.
pub fn flow_packets(i: u32, packets: u32, start: SimTime, gap: SimTime) -> Vec<PacketRecord> {
    let t = tuple(i);
    (0..packets)
        .map(|n| {
            let (flow, dir) = if n % 3 == 2 {
                (t.reverse(), Direction::Backward)
            } else {
                (t, Direction::Forward)
            };
            let len = 60 + ((i * 31 + n * 17) % 1400) as u16;
            let mut p = PacketRecord::new(flow, start + SimTime::from(n) * gap, len, dir);
            p.label = Some(Label(i % 7));
            p
        })
        .collect()
}

/// Merges per-flow packet lists into one stable, time-sorted trace.
pub fn merge(flows: Vec<Vec<PacketRecord>>) -> Vec<PacketRecord> {
    let mut all: Vec<PacketRecord> = flows.into_iter().flatten().collect();
    all.sort_by_key(|p| p.ts);
    all
}

// ---------------------------------------------------------------------------
// Randomized flow-table run against the shadow model.

/// Applies `ops` random packets, lookups, labels and clock jumps to both the
/// table and the shadow, comparing every result and checking the table's
/// invariants after each step. Returns the number of drops observed.
/// With `jumps` off the clock only creeps forward, so the table fills up.
pub fn shadow_run(cfg: FlowTableConfig, ops: usize, seed: u64, jumps: bool) -> Result<u64, String> {
    use inferline::flowtable::FlowTable;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut table = FlowTable::new(cfg).map_err(|e| e.to_string())?;
    let mut shadow = ShadowTable::new(cfg);
    let pool: Vec<FiveTuple> = (0..cfg.records as u32 * 3 / 2)
        .map(|i| FiveTuple::new(rng.gen(), rng.gen(), rng.gen_range(1..u16::MAX), 80 + (i % 4) as u16, 6))
        .collect();
    let mut now: SimTime = 0;
    let mut drops = 0;
    for step in 0..ops {
        let t = pool[rng.gen_range(0..pool.len())];
        let t = if rng.gen_bool(0.3) { t.reverse() } else { t };
        let roll = rng.gen_range(0..100);
        if roll < 70 {
            now += rng.gen_range(0..if jumps { 2_000 } else { 200 });
            let mut p = PacketRecord::new(t, now, rng.gen_range(40..1500), Direction::Forward);
            if rng.gen_bool(0.5) {
                p.label = Some(Label(rng.gen_range(0..5)));
            }
            let got = table.on_packet(&p, now);
            let want = shadow.on_packet(&p);
            if got != want {
                return Err(format!("step {step}: packet {got:?} != {want:?}"));
            }
            drops += u64::from(got == FlowAction::DroppedNoCapacity);
        } else if roll < 80 {
            let (got, want) = (table.lookup(&t), shadow.lookup(&t));
            if got != want {
                return Err(format!("step {step}: lookup {got:?} != {want:?}"));
            }
        } else if roll < 95 {
            let l = Label(rng.gen_range(0..200));
            let (got, want) = (table.apply_label(&t, l, now), shadow.apply_label(&t, l));
            if got != want {
                return Err(format!("step {step}: label {got} != {want}"));
            }
        } else {
            now += if !jumps {
                rng.gen_range(0..1_000)
            } else if rng.gen_bool(0.2) {
                rng.gen_range(25..45) * MICROS_PER_SEC
            } else {
                rng.gen_range(0..3) * MICROS_PER_SEC
            };
        }
        table.check_invariants().map_err(|e| format!("step {step}: {e}"))?;
        if table.occupied() != shadow.len() {
            return Err(format!("step {step}: occupancy {} != {}", table.occupied(), shadow.len()));
        }
    }
    Ok(drops)
}
