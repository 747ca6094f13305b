//! Approximate LRU cache keyed on a truncation of the series.
//!
//! Before each batch is composed, every waiting series is looked up by its
//! key (the first `delta` features by default). Hits leave the ring with the
//! cached label and never reach the accelerator; results coming back from
//! the accelerator are inserted under the same key. Because several distinct
//! series can share a key, a hit may return a label the classifier would not
//! have produced for that series: such hits are graded as errors.

use std::num::NonZeroUsize;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::accelerator::LabelOracle;
use crate::batching::Batch;
use crate::model::{Label, Prefix, Series};
use crate::ring::RingReader;

/// Keeps the first `delta` features, order preserved.
pub fn q_delta(s: &Series, delta: usize) -> Prefix {
    assert!(delta >= 1 && delta <= s.k(), "delta {delta} outside 1..={}", s.k());
    Prefix {
        features: s.features[..delta].to_vec(),
    }
}

/// Keeps the last `delta` features, order preserved.
pub fn q_delta_postfix(s: &Series, delta: usize) -> Prefix {
    assert!(delta >= 1 && delta <= s.k(), "delta {delta} outside 1..={}", s.k());
    Prefix {
        features: s.features[s.k() - delta..].to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    Prefix,
    Postfix,
    /// The whole series; hits are always correct.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub delta: usize,
    pub capacity: usize,
    #[serde(default = "default_key_mode")]
    pub key_mode: KeyMode,
}

fn default_key_mode() -> KeyMode {
    KeyMode::Prefix
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            delta: 6,
            capacity: 4096,
            key_mode: KeyMode::Prefix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitGrade {
    Good,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitRecord {
    Miss,
    Hit(HitGrade),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub good_hits: u64,
    pub error_hits: u64,
    pub inserts: u64,
    pub evictions: u64,
}

impl CacheStats {
    pub fn hit_ratio(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups as f64
        }
    }

    pub fn merge(&mut self, o: &CacheStats) {
        self.lookups += o.lookups;
        self.hits += o.hits;
        self.misses += o.misses;
        self.good_hits += o.good_hits;
        self.error_hits += o.error_hits;
        self.inserts += o.inserts;
        self.evictions += o.evictions;
    }
}

/// Good iff the classifier would have produced the cached label.
pub fn grade_hit(series: &Series, cached: Label, oracle: &dyn LabelOracle) -> HitGrade {
    if oracle.label(series) == cached {
        HitGrade::Good
    } else {
        HitGrade::Error
    }
}

pub struct PrefixCache {
    config: CacheConfig,
    store: LruCache<Vec<i32>, Label>,
    stats: CacheStats,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("cache capacity must be positive")]
    ZeroCapacity,
    #[error("prefix length must be positive")]
    ZeroDelta,
}

impl PrefixCache {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        let cap = NonZeroUsize::new(config.capacity).ok_or(CacheError::ZeroCapacity)?;
        if config.delta == 0 && config.key_mode != KeyMode::Exact {
            return Err(CacheError::ZeroDelta);
        }
        Ok(Self {
            config,
            store: LruCache::new(cap),
            stats: CacheStats::default(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn key(&self, s: &Series) -> Vec<i32> {
        let delta = self.config.delta.min(s.k());
        match self.config.key_mode {
            KeyMode::Prefix => q_delta(s, delta).features,
            KeyMode::Postfix => q_delta_postfix(s, delta).features,
            KeyMode::Exact => s.features.clone(),
        }
    }

    /// Looks `s` up, promoting a hit to most recently used.
    pub fn lookup(&mut self, s: &Series) -> Option<Label> {
        let key = self.key(s);
        self.stats.lookups += 1;
        let hit = self.store.get(&key).copied();
        if hit.is_some() {
            self.stats.hits += 1;
        } else {
            self.stats.misses += 1;
        }
        hit
    }

    /// Stored label without touching recency or counters.
    pub fn peek(&self, s: &Series) -> Option<Label> {
        self.store.peek(&self.key(s)).copied()
    }

    pub fn insert(&mut self, s: &Series, label: Label) {
        let key = self.key(s);
        self.stats.inserts += 1;
        if let Some((old, _)) = self.store.push(key, label) {
            // `push` hands back the replaced value for an existing key too.
            if self.store.peek(&old).is_none() {
                self.stats.evictions += 1;
            }
        }
    }

    /// Pulls every ring series whose key is cached, in ring order; misses
    /// stay in the ring in their original relative order.
    pub fn filter_ring<R: RingReader<Series>>(&mut self, ring: &mut R) -> Vec<(Series, Label)> {
        let mut labels = Vec::new();
        let hits = ring.extract_if(|s| match self.lookup(s) {
            Some(l) => {
                labels.push(l);
                true
            }
            None => false,
        });
        hits.into_iter().zip(labels).collect()
    }

    /// Caches the labels of the batch's real series; sentinels are skipped.
    /// `labels` aligns with [`Batch::real_series`].
    pub fn insert_results(&mut self, batch: &Batch, labels: &[Label]) -> usize {
        let mut n = 0;
        for (s, &l) in batch.real_series().iter().zip(labels) {
            if s.is_sentinel() {
                continue;
            }
            self.insert(s, l);
            n += 1;
        }
        n
    }

    pub fn record_grade(&mut self, grade: HitGrade) {
        match grade {
            HitGrade::Good => self.stats.good_hits += 1,
            HitGrade::Error => self.stats.error_hits += 1,
        }
    }

    /// Keys from most to least recently used.
    pub fn recency_order(&self) -> Vec<Vec<i32>> {
        self.store.iter().map(|(k, _)| k.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accelerator::HashOracle;
    use crate::model::FiveTuple;
    use crate::ring::CRing;

    fn series(f: &[i32]) -> Series {
        Series::new(FiveTuple::default(), f.to_vec(), 0)
    }

    fn cache(delta: usize, capacity: usize) -> PrefixCache {
        PrefixCache::new(CacheConfig {
            delta,
            capacity,
            key_mode: KeyMode::Prefix,
        })
        .unwrap()
    }

    #[test]
    fn truncation_examples() {
        let s = series(&[52, -40, 1448, 1448, 60, -1448, 52, 52, -60, 1448]);
        assert_eq!(q_delta(&s, 4).features, vec![52, -40, 1448, 1448]);
        assert_eq!(q_delta(&s, 9).features, s.features[..9].to_vec());
        assert_eq!(q_delta_postfix(&s, 2).features, vec![-60, 1448]);
        let t = series(&[52, -40, 1448, 1448, 60, -1448, 1, 2, 3, 4]);
        assert_eq!(q_delta(&s, 6), q_delta(&t, 6));
        assert_ne!(q_delta(&s, 7), q_delta(&t, 7));
    }

    #[test]
    fn lru_eviction_order() {
        let mut c = cache(1, 2);
        let (a, b, d) = (series(&[1, 0]), series(&[2, 0]), series(&[3, 0]));
        c.insert(&a, Label(1));
        c.insert(&b, Label(2));
        assert_eq!(c.lookup(&a), Some(Label(1)));
        c.insert(&d, Label(3));
        assert_eq!(c.peek(&b), None);
        assert_eq!(c.peek(&a), Some(Label(1)));
        assert_eq!(c.stats().evictions, 1);
    }

    #[test]
    fn filter_pulls_hits_and_keeps_order() {
        let mut c = cache(2, 16);
        let mut ring = CRing::new(16);
        for i in 0..10 {
            ring.push(series(&[i + 1, 7, 9, 9]));
        }
        for i in [2, 5, 8] {
            c.insert(&series(&[i + 1, 7, 0, 0]), Label(i as u32));
        }
        let hits = c.filter_ring(&mut ring);
        assert_eq!(
            hits.iter().map(|(_, l)| l.0).collect::<Vec<_>>(),
            vec![2, 5, 8]
        );
        let left: Vec<i32> = ring.drain_up_to(100).iter().map(|s| s.features[0]).collect();
        assert_eq!(left, vec![1, 2, 4, 5, 7, 8, 10]);
    }

    #[test]
    fn empty_cache_leaves_ring() {
        let mut c = cache(2, 16);
        let mut ring = CRing::new(4);
        ring.push(series(&[1, 2, 3]));
        assert!(c.filter_ring(&mut ring).is_empty());
        assert_eq!(ring.len(), 1);
    }

    #[test]
    fn duplicate_prefixes_both_hit() {
        let mut c = cache(2, 16);
        let mut ring = CRing::new(4);
        ring.push(series(&[1, 2, 3]));
        ring.push(series(&[1, 2, 4]));
        c.insert(&series(&[1, 2, 5]), Label(9));
        assert_eq!(c.filter_ring(&mut ring).len(), 2);
    }

    #[test]
    fn results_skip_sentinels() {
        let mut c = cache(2, 128);
        let real: Vec<Series> = (1..=100).map(|i| series(&[i, 1, 1])).collect();
        let labels: Vec<Label> = (0..100).map(Label).collect();
        let batch = crate::batching::pad(Batch::new(real), 28, 3);
        assert_eq!(c.insert_results(&batch, &labels), 100);
        assert_eq!(c.len(), 100);
        assert_eq!(c.peek(&Series::sentinel(3)), None);
    }

    #[test]
    fn grading() {
        let oracle = HashOracle::new(200);
        let s = series(&[5, 6, 7]);
        let truth = oracle.label(&s);
        assert_eq!(grade_hit(&s, truth, &oracle), HitGrade::Good);
        assert_eq!(grade_hit(&s, Label((truth.0 + 1) % 200), &oracle), HitGrade::Error);
    }

    #[test]
    fn exact_keys_never_err() {
        let oracle = HashOracle::new(200);
        let mut c = PrefixCache::new(CacheConfig {
            delta: 0,
            capacity: 8,
            key_mode: KeyMode::Exact,
        })
        .unwrap();
        let s = series(&[1, 2, 3]);
        c.insert(&s, oracle.label(&s));
        let l = c.lookup(&s).unwrap();
        assert_eq!(grade_hit(&s, l, &oracle), HitGrade::Good);
        assert_eq!(c.lookup(&series(&[1, 2, 4])), None);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert_eq!(
            PrefixCache::new(CacheConfig {
                capacity: 0,
                ..CacheConfig::default()
            })
            .err(),
            Some(CacheError::ZeroCapacity)
        );
    }
}
