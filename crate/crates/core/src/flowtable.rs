//! Flow-state store of a flow manager.
//!
//! Buckets mirror a cache-line layout: an occupancy bitmap, eight compact
//! entries (tag, coarse timestamp, data-array index) and a link to an
//! overflow bucket. Flow state lives in a separate data array whose unused
//! slots are tracked by a ring of free indexes. Stale flows are reclaimed
//! lazily, only when an insertion finds its bucket chain full or the free
//! ring empty.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::model::{Direction, FiveTuple, Label, PacketRecord, Series, SimTime, DEFAULT_K, MICROS_PER_SEC};
use crate::traffic::dispatch::symmetric_hash;

pub const SLOTS_PER_BUCKET: usize = 8;

/// Flows with fewer packets than this are short-lived.
pub const LONG_LIVED_MIN_PACKETS: u64 = 35;

/// Half of the 16-bit timestamp range; older entries are always stale.
const TIMESTAMP_WINDOW: u16 = 32_767;

/// Combines the symmetric RSS hash with both addresses.
///
/// XOR is commutative, so the value is the same for either direction as long
/// as `rss_hash` is.
#[inline]
pub fn flow_hash(rss_hash: u32, t: &FiveTuple) -> u32 {
    rss_hash ^ t.src_ip ^ t.dst_ip
}

/// Most significant byte of the hash. Bucket selection uses the low three
/// bytes, so tag and index never share bits.
#[inline]
pub fn hash_tag(hash: u32) -> u8 {
    (hash >> 24) as u8
}

/// Coarse seconds clock stored in bucket entries.
#[inline]
pub fn coarse_seconds(now: SimTime) -> u16 {
    (now / MICROS_PER_SEC) as u16
}

/// Modular age check on the wrapping 16-bit clock.
#[inline]
pub fn is_stale(entry_ts: u16, now_s: u16, timeout_s: u16) -> bool {
    let age = now_s.wrapping_sub(entry_ts);
    age > timeout_s || age > TIMESTAMP_WINDOW
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BucketEntry {
    pub tag: u8,
    pub timestamp: u16,
    pub index: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Bucket {
    pub bitmap: u8,
    pub entries: [BucketEntry; SLOTS_PER_BUCKET],
    /// Overflow bucket in the chain pool.
    pub next: Option<u32>,
}

impl Bucket {
    pub fn occupied(&self) -> u32 {
        self.bitmap.count_ones()
    }

    pub fn is_full(&self) -> bool {
        self.bitmap == u8::MAX
    }

    fn first_free_slot(&self) -> Option<usize> {
        let free = !self.bitmap;
        (free != 0).then(|| free.trailing_zeros() as usize)
    }

    fn slot_used(&self, slot: usize) -> bool {
        self.bitmap & (1 << slot) != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BucketRef {
    Main(usize),
    Chain(u32),
}

#[derive(Debug, Clone, Default)]
struct FlowRecord {
    occupied: bool,
    key: FiveTuple,
    initiator: (u32, u16),
    label: Option<Label>,
    labeled_at: SimTime,
    truth: Option<Label>,
    feature_len: u8,
    pkt_count: u64,
    untagged: u64,
    last_ts: SimTime,
    series_emitted: bool,
    tagged_seen: bool,
}

/// What the forwarding plane does with a packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowAction {
    TagAndForward(Label),
    ForwardUntagged,
    /// The packet completed the flow's series; it is forwarded untagged.
    SeriesReady(Series),
    DroppedNoCapacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTableConfig {
    pub records: usize,
    pub buckets: usize,
    #[serde(default = "default_stale_timeout")]
    pub stale_timeout_s: u16,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_stale_timeout() -> u16 {
    30
}

fn default_k() -> usize {
    DEFAULT_K
}

impl FlowTableConfig {
    /// Sizing used for table micro-benchmarks: 2^19 records over 2^17 buckets.
    pub const fn micro_benchmark() -> Self {
        Self {
            records: 1 << 19,
            buckets: 1 << 17,
            stale_timeout_s: 30,
            k: DEFAULT_K,
        }
    }

    /// Sizing used for end-to-end runs: 2^22 records and buckets.
    pub const fn end_to_end() -> Self {
        Self {
            records: 1 << 22,
            buckets: 1 << 22,
            stale_timeout_s: 30,
            k: DEFAULT_K,
        }
    }
}

impl Default for FlowTableConfig {
    fn default() -> Self {
        Self::micro_benchmark()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FlowTableError {
    #[error("bucket count {0} must be a power of two between 1 and 2^24")]
    BucketCount(usize),
    #[error("record capacity {0} must be between 1 and 2^32 - 1")]
    RecordCount(usize),
    #[error("series length {0} must be between 1 and 255")]
    SeriesLength(usize),
}

/// Read-only view of a stored flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowView {
    pub key: FiveTuple,
    pub label: Option<Label>,
    pub pkt_count: u64,
    pub features: Vec<i32>,
}

/// Monotone event counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlowCounters {
    pub packets: u64,
    pub inserted: u64,
    pub dropped_no_capacity: u64,
    pub reclaimed: u64,
    pub series_emitted: u64,
    pub labels_applied: u64,
    pub labels_missed: u64,
    pub tagged_packets: u64,
    pub untagged_packets: u64,
    /// Flows that forwarded at least one tagged packet.
    pub flows_tagged: u64,
}

impl FlowCounters {
    pub fn merge(&mut self, o: &FlowCounters) {
        self.packets += o.packets;
        self.inserted += o.inserted;
        self.dropped_no_capacity += o.dropped_no_capacity;
        self.reclaimed += o.reclaimed;
        self.series_emitted += o.series_emitted;
        self.labels_applied += o.labels_applied;
        self.labels_missed += o.labels_missed;
        self.tagged_packets += o.tagged_packets;
        self.untagged_packets += o.untagged_packets;
        self.flows_tagged += o.flows_tagged;
    }
}

/// Per-flow outcomes folded in as records leave the table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RetiredTally {
    pub flows: u64,
    pub long_lived_flows: u64,
    pub long_lived_packets: u64,
    pub long_lived_untagged: u64,
    pub short_lived_flows: u64,
}

impl RetiredTally {
    fn add(&mut self, rec: &FlowRecord) {
        self.flows += 1;
        if rec.pkt_count >= LONG_LIVED_MIN_PACKETS {
            self.long_lived_flows += 1;
            self.long_lived_packets += rec.pkt_count;
            self.long_lived_untagged += rec.untagged;
        } else {
            self.short_lived_flows += 1;
        }
    }

    pub fn merge(&mut self, other: &RetiredTally) {
        self.flows += other.flows;
        self.long_lived_flows += other.long_lived_flows;
        self.long_lived_packets += other.long_lived_packets;
        self.long_lived_untagged += other.long_lived_untagged;
        self.short_lived_flows += other.short_lived_flows;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TableStats {
    pub records: usize,
    pub buckets: usize,
    pub occupied: usize,
    pub free_indexes: usize,
    pub load_factor: f64,
    pub chain_buckets: usize,
    /// `chain_length_histogram[n]` counts buckets with `n` overflow buckets.
    pub chain_length_histogram: Vec<u64>,
    pub stale_timeout_s: u16,
    pub counters: FlowCounters,
}

pub struct FlowTable {
    config: FlowTableConfig,
    bucket_mask: u32,
    buckets: Vec<Bucket>,
    chain_pool: Vec<Bucket>,
    chain_free: Vec<u32>,
    records: Vec<FlowRecord>,
    features: Vec<i32>,
    free_ring: VecDeque<u32>,
    counters: FlowCounters,
    retired: RetiredTally,
}

impl FlowTable {
    /// Validates sizing without allocating.
    pub fn check_config(config: &FlowTableConfig) -> Result<(), FlowTableError> {
        if !config.buckets.is_power_of_two() || config.buckets > 1 << 24 {
            return Err(FlowTableError::BucketCount(config.buckets));
        }
        if config.records == 0 || config.records >= u32::MAX as usize {
            return Err(FlowTableError::RecordCount(config.records));
        }
        if config.k == 0 || config.k > u8::MAX as usize {
            return Err(FlowTableError::SeriesLength(config.k));
        }
        Ok(())
    }

    pub fn new(config: FlowTableConfig) -> Result<Self, FlowTableError> {
        Self::check_config(&config)?;
        Ok(Self {
            config,
            bucket_mask: (config.buckets - 1) as u32,
            buckets: vec![Bucket::default(); config.buckets],
            chain_pool: Vec::new(),
            chain_free: Vec::new(),
            records: vec![FlowRecord::default(); config.records],
            features: vec![0; config.records * config.k],
            free_ring: (0..config.records as u32).collect(),
            counters: FlowCounters::default(),
            retired: RetiredTally::default(),
        })
    }

    pub fn config(&self) -> &FlowTableConfig {
        &self.config
    }

    pub fn capacity(&self) -> usize {
        self.config.records
    }

    pub fn occupied(&self) -> usize {
        self.config.records - self.free_ring.len()
    }

    pub fn free_indexes(&self) -> usize {
        self.free_ring.len()
    }

    pub fn load_factor(&self) -> f64 {
        self.occupied() as f64 / self.config.records as f64
    }

    pub fn counters(&self) -> &FlowCounters {
        &self.counters
    }

    #[inline]
    fn bucket_index(&self, hash: u32) -> usize {
        ((hash & 0x00ff_ffff) & self.bucket_mask) as usize
    }

    fn bucket(&self, r: BucketRef) -> &Bucket {
        match r {
            BucketRef::Main(i) => &self.buckets[i],
            BucketRef::Chain(i) => &self.chain_pool[i as usize],
        }
    }

    fn bucket_mut(&mut self, r: BucketRef) -> &mut Bucket {
        match r {
            BucketRef::Main(i) => &mut self.buckets[i],
            BucketRef::Chain(i) => &mut self.chain_pool[i as usize],
        }
    }

    fn hash_of(t: &FiveTuple) -> (u32, FiveTuple) {
        let (canonical, _) = t.canonicalize();
        (flow_hash(symmetric_hash(t), t), canonical)
    }

    fn find(&self, hash: u32, canonical: &FiveTuple) -> Option<(BucketRef, usize)> {
        let tag = hash_tag(hash);
        let mut cur = Some(BucketRef::Main(self.bucket_index(hash)));
        while let Some(r) = cur {
            let b = self.bucket(r);
            let mut mask = b.bitmap;
            while mask != 0 {
                let slot = mask.trailing_zeros() as usize;
                mask &= mask - 1;
                let e = &b.entries[slot];
                if e.tag == tag && self.records[e.index as usize].key == *canonical {
                    return Some((r, slot));
                }
            }
            cur = b.next.map(BucketRef::Chain);
        }
        None
    }

    /// Looks a flow up without touching its timestamp.
    pub fn lookup(&self, t: &FiveTuple) -> Option<FlowView> {
        let (hash, canonical) = Self::hash_of(t);
        self.find(hash, &canonical).map(|(r, slot)| {
            let idx = self.bucket(r).entries[slot].index as usize;
            self.view(idx)
        })
    }

    fn view(&self, idx: usize) -> FlowView {
        let rec = &self.records[idx];
        let k = self.config.k;
        FlowView {
            key: rec.key,
            label: rec.label,
            pkt_count: rec.pkt_count,
            features: self.features[idx * k..idx * k + rec.feature_len as usize].to_vec(),
        }
    }

    /// Processes one packet and returns the forwarding decision.
    pub fn on_packet(&mut self, pkt: &PacketRecord, now: SimTime) -> FlowAction {
        let (hash, canonical) = Self::hash_of(&pkt.flow);
        let now_s = coarse_seconds(now);
        self.counters.packets += u64::from(pkt.weight);
        let idx = match self.find(hash, &canonical) {
            Some((r, slot)) => {
                let e = &mut self.bucket_mut(r).entries[slot];
                e.timestamp = now_s;
                e.index as usize
            }
            None => match self.insert(hash, canonical, pkt, now) {
                Some(idx) => idx,
                None => {
                    self.counters.dropped_no_capacity += 1;
                    return FlowAction::DroppedNoCapacity;
                }
            },
        };
        self.update_record(idx, pkt)
    }

    fn update_record(&mut self, idx: usize, pkt: &PacketRecord) -> FlowAction {
        let k = self.config.k;
        let weight = u64::from(pkt.weight);
        let rec = &mut self.records[idx];
        let prev_ts = rec.last_ts;
        rec.pkt_count += weight;
        rec.last_ts = pkt.ts;
        if rec.truth.is_none() {
            rec.truth = pkt.label;
        }

        if let Some(label) = rec.label {
            // A condensed tail record spans (prev_ts, ts]; the share of it
            // that preceded the label went out untagged.
            let untagged = if weight > 1 && rec.labeled_at > prev_ts && pkt.ts > prev_ts {
                let span = (pkt.ts - prev_ts) as f64;
                let before = (rec.labeled_at.min(pkt.ts) - prev_ts) as f64;
                ((weight as f64) * before / span).round() as u64
            } else {
                0
            };
            rec.untagged += untagged;
            self.counters.untagged_packets += untagged;
            self.counters.tagged_packets += weight - untagged;
            if !rec.tagged_seen {
                rec.tagged_seen = true;
                self.counters.flows_tagged += 1;
            }
            return FlowAction::TagAndForward(label);
        }

        rec.untagged += weight;
        self.counters.untagged_packets += weight;
        if (rec.feature_len as usize) < k {
            let dir = if pkt.flow.src_endpoint() == rec.initiator {
                Direction::Forward
            } else {
                Direction::Backward
            };
            let feature = i32::from(pkt.length) * dir.sign();
            self.features[idx * k + rec.feature_len as usize] = feature;
            rec.feature_len += 1;
        }
        if !rec.series_emitted && rec.feature_len as usize == k {
            rec.series_emitted = true;
            self.counters.series_emitted += 1;
            let series = Series {
                key: rec.key,
                features: self.features[idx * k..(idx + 1) * k].to_vec(),
                completed_at: pkt.ts,
                truth: rec.truth,
            };
            return FlowAction::SeriesReady(series);
        }
        FlowAction::ForwardUntagged
    }

    fn insert(&mut self, hash: u32, canonical: FiveTuple, pkt: &PacketRecord, now: SimTime) -> Option<usize> {
        let b = self.bucket_index(hash);
        if self.free_ring.is_empty() || self.chain_free_slot(b).is_none() {
            self.reclaim_stale(b, now);
        }
        let idx = self.free_ring.pop_front()?;
        let (r, slot) = match self.chain_free_slot(b) {
            Some(place) => place,
            None => (self.grow_chain(b), 0),
        };
        let entry = BucketEntry {
            tag: hash_tag(hash),
            timestamp: coarse_seconds(now),
            index: idx,
        };
        let bucket = self.bucket_mut(r);
        bucket.entries[slot] = entry;
        bucket.bitmap |= 1 << slot;

        let rec = &mut self.records[idx as usize];
        *rec = FlowRecord {
            occupied: true,
            key: canonical,
            initiator: pkt.flow.src_endpoint(),
            last_ts: pkt.ts,
            ..FlowRecord::default()
        };
        self.counters.inserted += 1;
        Some(idx as usize)
    }

    fn chain_free_slot(&self, main: usize) -> Option<(BucketRef, usize)> {
        let mut cur = Some(BucketRef::Main(main));
        while let Some(r) = cur {
            let b = self.bucket(r);
            if let Some(slot) = b.first_free_slot() {
                return Some((r, slot));
            }
            cur = b.next.map(BucketRef::Chain);
        }
        None
    }

    fn grow_chain(&mut self, main: usize) -> BucketRef {
        let id = match self.chain_free.pop() {
            Some(id) => {
                self.chain_pool[id as usize] = Bucket::default();
                id
            }
            None => {
                self.chain_pool.push(Bucket::default());
                (self.chain_pool.len() - 1) as u32
            }
        };
        let mut cur = BucketRef::Main(main);
        while let Some(next) = self.bucket(cur).next {
            cur = BucketRef::Chain(next);
        }
        self.bucket_mut(cur).next = Some(id);
        BucketRef::Chain(id)
    }

    /// Frees every stale entry of bucket `main` and its chain, returning the
    /// number of flows reclaimed. Emptied overflow buckets go back to the pool.
    pub fn reclaim_stale(&mut self, main: usize, now: SimTime) -> usize {
        let now_s = coarse_seconds(now);
        let timeout = self.config.stale_timeout_s;
        let mut reclaimed = 0;
        let mut cur = Some(BucketRef::Main(main));
        while let Some(r) = cur {
            let b = self.bucket(r).clone();
            for slot in 0..SLOTS_PER_BUCKET {
                if b.slot_used(slot) && is_stale(b.entries[slot].timestamp, now_s, timeout) {
                    self.release(r, slot);
                    reclaimed += 1;
                }
            }
            cur = b.next.map(BucketRef::Chain);
        }
        self.unlink_empty_chain(main);
        self.counters.reclaimed += reclaimed as u64;
        reclaimed
    }

    fn release(&mut self, r: BucketRef, slot: usize) {
        let bucket = self.bucket_mut(r);
        let idx = bucket.entries[slot].index;
        bucket.bitmap &= !(1 << slot);
        bucket.entries[slot] = BucketEntry::default();
        let rec = std::mem::take(&mut self.records[idx as usize]);
        self.retired.add(&rec);
        self.free_ring.push_back(idx);
    }

    fn unlink_empty_chain(&mut self, main: usize) {
        let mut prev = BucketRef::Main(main);
        while let Some(id) = self.bucket(prev).next {
            let b = &self.chain_pool[id as usize];
            if b.bitmap == 0 {
                let after = b.next;
                self.bucket_mut(prev).next = after;
                self.chain_free.push(id);
            } else {
                prev = BucketRef::Chain(id);
            }
        }
    }

    /// Stores the classifier result for a flow.
    ///
    /// Returns false when the flow is no longer in the table. A flow keeps the
    /// first label it receives; later ones are accepted and ignored.
    pub fn apply_label(&mut self, t: &FiveTuple, label: Label, now: SimTime) -> bool {
        let (hash, canonical) = Self::hash_of(t);
        match self.find(hash, &canonical) {
            Some((r, slot)) => {
                let idx = self.bucket(r).entries[slot].index as usize;
                let rec = &mut self.records[idx];
                if rec.label.is_none() {
                    rec.label = Some(label);
                    rec.labeled_at = now;
                }
                self.counters.labels_applied += 1;
                true
            }
            None => {
                self.counters.labels_missed += 1;
                false
            }
        }
    }

    /// Outcomes of flows that already left the table.
    pub fn retired(&self) -> &RetiredTally {
        &self.retired
    }

    /// Outcomes of every flow seen so far, including those still stored.
    pub fn tally_all(&self) -> RetiredTally {
        let mut tally = self.retired;
        for rec in self.records.iter().filter(|r| r.occupied) {
            tally.add(rec);
        }
        tally
    }

    pub fn stats(&self) -> TableStats {
        let mut histogram: Vec<u64> = Vec::new();
        for b in &self.buckets {
            let mut len = 0;
            let mut next = b.next;
            while let Some(id) = next {
                len += 1;
                next = self.chain_pool[id as usize].next;
            }
            if histogram.len() <= len {
                histogram.resize(len + 1, 0);
            }
            histogram[len] += 1;
        }
        TableStats {
            records: self.config.records,
            buckets: self.config.buckets,
            occupied: self.occupied(),
            free_indexes: self.free_ring.len(),
            load_factor: self.load_factor(),
            chain_buckets: self.chain_pool.len() - self.chain_free.len(),
            chain_length_histogram: histogram,
            stale_timeout_s: self.config.stale_timeout_s,
            counters: self.counters,
        }
    }

    /// Verifies the structural invariants; returns a description of the first
    /// violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.config.records;
        let mut seen = vec![false; n];
        let mut occupied = 0usize;
        for main in 0..self.buckets.len() {
            let mut cur = Some(BucketRef::Main(main));
            while let Some(r) = cur {
                let b = self.bucket(r);
                let mut used = 0;
                for slot in 0..SLOTS_PER_BUCKET {
                    if !b.slot_used(slot) {
                        continue;
                    }
                    used += 1;
                    let e = b.entries[slot];
                    let idx = e.index as usize;
                    if idx >= n {
                        return Err(format!("entry index {idx} out of range"));
                    }
                    if std::mem::replace(&mut seen[idx], true) {
                        return Err(format!("index {idx} referenced twice"));
                    }
                    let rec = &self.records[idx];
                    if !rec.occupied {
                        return Err(format!("index {idx} points at a free record"));
                    }
                    let (hash, _) = Self::hash_of(&rec.key);
                    if hash_tag(hash) != e.tag {
                        return Err(format!("tag mismatch at index {idx}"));
                    }
                    if self.bucket_index(hash) != main {
                        return Err(format!("record {idx} stored in the wrong bucket"));
                    }
                }
                if used != b.occupied() {
                    return Err("bitmap popcount mismatch".into());
                }
                occupied += used as usize;
                cur = b.next.map(BucketRef::Chain);
            }
        }
        if occupied + self.free_ring.len() != n {
            return Err(format!(
                "index leak: {occupied} occupied + {} free != {n}",
                self.free_ring.len()
            ));
        }
        if self.free_ring.iter().any(|&i| seen[i as usize]) {
            return Err("free index also in use".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(records: usize, buckets: usize) -> FlowTable {
        FlowTable::new(FlowTableConfig {
            records,
            buckets,
            stale_timeout_s: 30,
            k: DEFAULT_K,
        })
        .unwrap()
    }

    fn pkt(flow: FiveTuple, ts: SimTime, len: u16) -> PacketRecord {
        PacketRecord::new(flow, ts, len, Direction::Forward)
    }

    #[test]
    fn hash_examples() {
        let t = FiveTuple::new(0x0A00_0001, 0x0A00_0002, 1, 2, 6);
        assert_eq!(flow_hash(0, &t), 0x0000_0003);
        let same = FiveTuple::new(0x1234_5678, 0x1234_5678, 1, 2, 6);
        assert_eq!(flow_hash(0xCAFE_F00D, &same), 0xCAFE_F00D);
        let t = FiveTuple::new(0x0102_0304, 0x0506_0708, 1, 2, 6);
        assert_eq!(flow_hash(0xDEAD_BEEF, &t), 0xDAA9_BAE3);
        assert_eq!(flow_hash(0xDEAD_BEEF, &t.reverse()), 0xDAA9_BAE3);
        assert_eq!(hash_tag(0xDAA9_BAE3), 0xDA);
    }

    #[test]
    fn bucket_layout_is_compact() {
        assert_eq!(std::mem::size_of::<BucketEntry>(), 8);
    }

    #[test]
    fn rejects_bad_sizes() {
        let bad = FlowTableConfig {
            buckets: 3,
            ..FlowTableConfig::default()
        };
        assert_eq!(FlowTable::new(bad).err(), Some(FlowTableError::BucketCount(3)));
        let bad = FlowTableConfig {
            records: 0,
            ..FlowTableConfig::default()
        };
        assert_eq!(FlowTable::new(bad).err(), Some(FlowTableError::RecordCount(0)));
    }

    #[test]
    fn tenth_packet_completes_series() {
        let mut t = small(64, 8);
        let f = FiveTuple::new(1, 2, 1000, 80, 6);
        for i in 0..9 {
            assert_eq!(t.on_packet(&pkt(f, i, 100 + i as u16), i), FlowAction::ForwardUntagged);
        }
        match t.on_packet(&pkt(f, 9, 109), 9) {
            FlowAction::SeriesReady(s) => {
                assert_eq!(s.features.len(), 10);
                assert_eq!(s.features, (100..110).collect::<Vec<i32>>());
                assert_eq!(s.completed_at, 9);
                assert_eq!(s.key, f.canonicalize().0);
            }
            other => panic!("unexpected {other:?}"),
        }
        // 11th packet: unlabeled, features frozen.
        assert_eq!(t.on_packet(&pkt(f, 10, 1), 10), FlowAction::ForwardUntagged);
        let v = t.lookup(&f).unwrap();
        assert_eq!(v.features.len(), 10);
        assert_eq!(v.pkt_count, 11);
    }

    #[test]
    fn labeled_flow_is_tagged() {
        let mut t = small(64, 8);
        let f = FiveTuple::new(1, 2, 1000, 80, 6);
        t.on_packet(&pkt(f, 0, 60), 0);
        assert!(t.apply_label(&f, Label(42), 1));
        assert_eq!(t.on_packet(&pkt(f.reverse(), 2, 60), 2), FlowAction::TagAndForward(Label(42)));
        assert_eq!(t.counters().flows_tagged, 1);
    }

    #[test]
    fn first_label_wins() {
        let mut t = small(64, 8);
        let f = FiveTuple::new(1, 2, 1000, 80, 6);
        t.on_packet(&pkt(f, 0, 60), 0);
        assert!(t.apply_label(&f, Label(7), 1));
        assert!(t.apply_label(&f, Label(9), 2));
        assert_eq!(t.lookup(&f).unwrap().label, Some(Label(7)));
    }

    #[test]
    fn label_for_missing_flow_is_discarded() {
        let mut t = small(64, 8);
        assert!(!t.apply_label(&FiveTuple::new(5, 6, 7, 8, 6), Label(1), 0));
        assert_eq!(t.counters().labels_missed, 1);
    }

    #[test]
    fn directions_share_a_record_with_signed_features() {
        let mut t = small(64, 8);
        let fwd = FiveTuple::new(9, 3, 1000, 80, 6);
        for i in 0..10u64 {
            let flow = if i % 2 == 0 { fwd } else { fwd.reverse() };
            let action = t.on_packet(&pkt(flow, i, 50), i);
            if i == 9 {
                let FlowAction::SeriesReady(s) = action else { panic!() };
                assert_eq!(s.features, vec![50, -50, 50, -50, 50, -50, 50, -50, 50, -50]);
            }
        }
        assert_eq!(t.lookup(&fwd.reverse()).unwrap().pkt_count, 10);
        assert_eq!(t.occupied(), 1);
    }

    #[test]
    fn stale_entry_is_reclaimed() {
        let mut t = small(16, 1);
        let f = FiveTuple::new(1, 2, 3, 4, 6);
        t.on_packet(&pkt(f, 0, 60), 0);
        assert_eq!(t.reclaim_stale(0, 30 * MICROS_PER_SEC), 0);
        assert_eq!(t.reclaim_stale(0, 31 * MICROS_PER_SEC), 1);
        assert!(t.lookup(&f).is_none());
        assert_eq!(t.free_indexes(), 16);
        t.check_invariants().unwrap();
    }

    #[test]
    fn fresh_entries_survive_reclaim() {
        let mut t = small(16, 1);
        for i in 0..5 {
            t.on_packet(&pkt(FiveTuple::new(i, 100, 3, 4, 6), 0, 60), 0);
        }
        assert_eq!(t.reclaim_stale(0, 0), 0);
        assert_eq!(t.occupied(), 5);
    }

    #[test]
    fn wrapped_timestamps_use_modular_age() {
        assert!(!is_stale(65_530, 10, 30));
        assert!(is_stale(65_500, 10, 30));
        assert!(!is_stale(100, 130, 30));
        assert!(is_stale(100, 131, 30));
    }

    #[test]
    fn full_table_drops_new_flows() {
        let mut t = small(4, 1);
        for i in 0..4 {
            assert_ne!(
                t.on_packet(&pkt(FiveTuple::new(i, 100, 3, 4, 6), 0, 60), 0),
                FlowAction::DroppedNoCapacity
            );
        }
        let extra = FiveTuple::new(99, 100, 3, 4, 6);
        assert_eq!(t.on_packet(&pkt(extra, 1, 60), 1), FlowAction::DroppedNoCapacity);
        // Once the others go stale there is room again.
        let later = 40 * MICROS_PER_SEC;
        assert_eq!(t.on_packet(&pkt(extra, later, 60), later), FlowAction::ForwardUntagged);
        assert_eq!(t.occupied(), 1);
        t.check_invariants().unwrap();
    }

    #[test]
    fn chains_grow_and_shrink() {
        let mut t = small(64, 1);
        for i in 0..20 {
            t.on_packet(&pkt(FiveTuple::new(i, 100, 3, 4, 6), 0, 60), 0);
        }
        let stats = t.stats();
        assert_eq!(stats.chain_buckets, 2);
        assert_eq!(stats.chain_length_histogram, vec![0, 0, 1]);
        t.check_invariants().unwrap();
        let later = 100 * MICROS_PER_SEC;
        assert_eq!(t.reclaim_stale(0, later), 20);
        assert_eq!(t.stats().chain_buckets, 0);
        t.check_invariants().unwrap();
    }

    #[test]
    fn weighted_tail_splits_untagged_share() {
        let mut t = small(16, 1);
        let f = FiveTuple::new(1, 2, 3, 4, 6);
        t.on_packet(&pkt(f, 0, 60), 0);
        t.apply_label(&f, Label(3), 250);
        let mut tail = pkt(f, 1_000, 60);
        tail.weight = 100;
        assert_eq!(t.on_packet(&tail, 1_000), FlowAction::TagAndForward(Label(3)));
        // 1 untagged head packet + 25 of the 100 folded ones.
        assert_eq!(t.counters().untagged_packets, 26);
        assert_eq!(t.counters().tagged_packets, 75);
        let tally = t.tally_all();
        assert_eq!(tally.long_lived_flows, 1);
        assert_eq!(tally.long_lived_untagged, 26);
    }
}
