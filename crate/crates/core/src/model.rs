//! Domain types shared by every stage of the pipeline.

use std::cmp::Ordering;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

/// Simulation time in microseconds since the start of a run.
pub type SimTime = u64;

pub const MICROS_PER_MS: u64 = 1_000;
pub const MICROS_PER_SEC: u64 = 1_000_000;

/// Number of packets whose features make up one series.
pub const DEFAULT_K: usize = 10;

/// Size of the label space of the default classifier.
pub const DEFAULT_NUM_CLASSES: u32 = 200;

/// Largest packet length, and therefore largest feature magnitude.
pub const MAX_PACKET_LEN: u32 = 65_535;

/// IPv4 5-tuple identifying one direction of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_ip: u32,
    pub dst_ip: u32,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FiveTuple {
    pub const fn new(src_ip: u32, dst_ip: u32, src_port: u16, dst_port: u16, proto: u8) -> Self {
        Self {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            proto,
        }
    }

    /// The same flow seen from the other endpoint.
    pub const fn reverse(&self) -> Self {
        Self {
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            src_port: self.dst_port,
            dst_port: self.src_port,
            proto: self.proto,
        }
    }

    pub const fn src_endpoint(&self) -> (u32, u16) {
        (self.src_ip, self.src_port)
    }

    pub const fn dst_endpoint(&self) -> (u32, u16) {
        (self.dst_ip, self.dst_port)
    }

    /// Orders the two endpoints so that both directions of a flow map to one
    /// tuple. The endpoint with the smaller `(ip, port)` pair becomes the
    /// source; the returned direction tells whether `self` already was in that
    /// order.
    pub fn canonicalize(&self) -> (FiveTuple, Direction) {
        match self.src_endpoint().cmp(&self.dst_endpoint()) {
            Ordering::Greater => (self.reverse(), Direction::Backward),
            // Equal endpoints: both orders are the same tuple.
            Ordering::Less | Ordering::Equal => (*self, Direction::Forward),
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.src_endpoint() <= self.dst_endpoint()
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} ({})",
            Ipv4Addr::from(self.src_ip),
            self.src_port,
            Ipv4Addr::from(self.dst_ip),
            self.dst_port,
            self.proto
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub const fn sign(self) -> i32 {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }

    pub const fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    pub fn from_sign(sign: i32) -> Option<Self> {
        match sign {
            1 => Some(Direction::Forward),
            -1 => Some(Direction::Backward),
            _ => None,
        }
    }
}

/// One packet of a trace.
///
/// `weight` is 1 for an ordinary packet. Condensed traces fold the tail of a
/// long flow into a single record stamped with the time of its last packet;
/// such a record stands for `weight` packets of average size `length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketRecord {
    pub flow: FiveTuple,
    pub ts: SimTime,
    pub length: u16,
    pub direction: Direction,
    pub label: Option<Label>,
    pub weight: u32,
}

impl PacketRecord {
    pub fn new(flow: FiveTuple, ts: SimTime, length: u16, direction: Direction) -> Self {
        Self {
            flow,
            ts,
            length,
            direction,
            label: None,
            weight: 1,
        }
    }

    /// Signed length: positive in the forward direction.
    pub fn feature(&self) -> i32 {
        i32::from(self.length) * self.direction.sign()
    }
}

/// Classifier output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u32);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Signed packet lengths of the first K packets of a flow, the unit handed to
/// the classifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Series {
    pub key: FiveTuple,
    pub features: Vec<i32>,
    pub completed_at: SimTime,
    /// Ground-truth label carried over from the trace, when it has one.
    pub truth: Option<Label>,
}

impl Series {
    pub fn new(key: FiveTuple, features: Vec<i32>, completed_at: SimTime) -> Self {
        Self {
            key,
            features,
            completed_at,
            truth: None,
        }
    }

    /// Filler used to pad a batch up to a model's fixed size.
    pub fn sentinel(k: usize) -> Self {
        Self::new(FiveTuple::default(), vec![0; k], 0)
    }

    pub fn k(&self) -> usize {
        self.features.len()
    }

    /// Real features are never zero, so an all-zero vector marks padding.
    pub fn is_sentinel(&self) -> bool {
        self.features.iter().all(|&f| f == 0)
    }

    /// Checks the structural invariants of a real series.
    pub fn is_well_formed(&self, k: usize) -> bool {
        self.features.len() == k
            && self
                .features
                .iter()
                .all(|&f| f != 0 && f.unsigned_abs() <= MAX_PACKET_LEN)
    }
}

impl Default for FiveTuple {
    fn default() -> Self {
        Self::new(0, 0, 0, 0, 0)
    }
}

/// A truncated series used as an approximate cache key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prefix {
    pub features: Vec<i32>,
}

impl Prefix {
    pub fn delta(&self) -> usize {
        self.features.len()
    }
}

pub fn ms_to_micros(ms: f64) -> SimTime {
    (ms * MICROS_PER_MS as f64).round().max(0.0) as SimTime
}

pub fn micros_to_ms(us: SimTime) -> f64 {
    us as f64 / MICROS_PER_MS as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(a: u8, b: u8, c: u8, d: u8) -> u32 {
        u32::from(Ipv4Addr::new(a, b, c, d))
    }

    #[test]
    fn both_directions_share_canonical_tuple() {
        let fwd = FiveTuple::new(ip(10, 0, 0, 1), ip(10, 0, 0, 2), 80, 5000, 6);
        let bwd = FiveTuple::new(ip(10, 0, 0, 2), ip(10, 0, 0, 1), 5000, 80, 6);
        let (c1, d1) = fwd.canonicalize();
        let (c2, d2) = bwd.canonicalize();
        assert_eq!(c1, c2);
        assert_eq!(d1, Direction::Forward);
        assert_eq!(d2, Direction::Backward);
    }

    #[test]
    fn canonical_input_is_identity() {
        let t = FiveTuple::new(ip(1, 1, 1, 1), ip(2, 2, 2, 2), 9, 9, 17);
        assert!(t.is_canonical());
        assert_eq!(t.canonicalize(), (t, Direction::Forward));
    }

    #[test]
    fn equal_ips_are_ordered_by_port() {
        let a = ip(192, 168, 0, 7);
        let t = FiveTuple::new(a, a, 81, 80, 6);
        let (c, d) = t.canonicalize();
        assert_eq!(c.src_port, 80);
        assert_eq!(c.dst_port, 81);
        assert_eq!(d, Direction::Backward);
    }

    #[test]
    fn feature_sign_follows_direction() {
        let t = FiveTuple::default();
        assert_eq!(PacketRecord::new(t, 0, 1448, Direction::Forward).feature(), 1448);
        assert_eq!(PacketRecord::new(t, 0, 52, Direction::Backward).feature(), -52);
    }

    #[test]
    fn sentinel_is_recognised() {
        let s = Series::sentinel(10);
        assert!(s.is_sentinel());
        assert!(!s.is_well_formed(10));
        let real = Series::new(FiveTuple::default(), vec![52; 10], 1);
        assert!(!real.is_sentinel());
        assert!(real.is_well_formed(10));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tuple() -> impl Strategy<Value = FiveTuple> {
            (any::<u32>(), any::<u32>(), any::<u16>(), any::<u16>(), any::<u8>())
                .prop_map(|(a, b, c, d, e)| FiveTuple::new(a, b, c, d, e))
        }

        proptest! {
            #[test]
            fn reverse_is_an_involution(t in tuple()) {
                prop_assert_eq!(t.reverse().reverse(), t);
            }

            #[test]
            fn reversal_flips_only_direction(t in tuple()) {
                let (c, d) = t.canonicalize();
                let (rc, rd) = t.reverse().canonicalize();
                prop_assert_eq!(c, rc);
                prop_assert!(c.is_canonical());
                if t.src_endpoint() != t.dst_endpoint() {
                    prop_assert_eq!(rd, d.flip());
                }
                prop_assert_eq!(c.canonicalize().0, c);
            }
        }
    }
}
