//! RSS-style dispatch of packets onto parallel pipelines.

use crate::model::{FiveTuple, PacketRecord};

const HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Direction-agnostic 32-bit hash of a 5-tuple.
///
/// Hashing the canonical tuple makes the value identical for both directions
/// of a flow, so it can stand in for a symmetric RSS key.
pub fn symmetric_hash(t: &FiveTuple) -> u32 {
    let (c, _) = t.canonicalize();
    let addrs = (u64::from(c.src_ip) << 32) | u64::from(c.dst_ip);
    let rest = (u64::from(c.src_port) << 24) | (u64::from(c.dst_port) << 8) | u64::from(c.proto);
    let h = mix64(addrs ^ mix64(rest ^ HASH_SEED));
    ((h >> 32) as u32) ^ (h as u32)
}

/// Maps packets onto `pipelines` receive queues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatcher {
    pipelines: usize,
}

impl Dispatcher {
    pub fn new(pipelines: usize) -> Self {
        assert!(pipelines > 0, "at least one pipeline is required");
        Self { pipelines }
    }

    pub fn pipelines(&self) -> usize {
        self.pipelines
    }

    pub fn index_of(&self, t: &FiveTuple) -> usize {
        symmetric_hash(t) as usize % self.pipelines
    }

    pub fn dispatch(&self, pkt: &PacketRecord) -> usize {
        self.index_of(&pkt.flow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pipeline_is_always_zero() {
        let d = Dispatcher::new(1);
        let t = FiveTuple::new(1, 2, 3, 4, 6);
        assert_eq!(d.index_of(&t), 0);
    }

    #[test]
    fn directions_land_on_same_pipeline() {
        let d = Dispatcher::new(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = FiveTuple::new(rng.gen(), rng.gen(), rng.gen(), rng.gen(), 6);
            assert_eq!(d.index_of(&t), d.index_of(&t.reverse()));
            assert_eq!(symmetric_hash(&t), symmetric_hash(&t.reverse()));
        }
    }

    #[test]
    fn two_pipelines_split_evenly() {
        let d = Dispatcher::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| {
                let t = FiveTuple::new(rng.gen(), rng.gen(), rng.gen(), rng.gen(), 6);
                d.index_of(&t) == 0
            })
            .count();
        let share = zeros as f64 / n as f64;
        assert!((share - 0.5).abs() < 0.01, "share {share}");
    }
}
