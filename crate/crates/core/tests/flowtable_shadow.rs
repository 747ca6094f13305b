mod common;

use inferline::flowtable::FlowTableConfig;

fn cfg(records: usize, buckets: usize, k: usize) -> FlowTableConfig {
    FlowTableConfig {
        records,
        buckets,
        stale_timeout_s: 30,
        k,
    }
}

#[test]
fn matches_shadow_with_long_chains() {
    for seed in 0..4 {
        common::shadow_run(cfg(1024, 32, 10), 20_000, seed, true).unwrap();
    }
}

#[test]
fn matches_shadow_with_one_bucket() {
    common::shadow_run(cfg(64, 1, 4), 10_000, 9, true).unwrap();
}

#[test]
fn matches_shadow_when_roomy() {
    common::shadow_run(cfg(4096, 4096, 10), 10_000, 3, true).unwrap();
}

#[test]
fn exhaustion_drops_new_flows() {
    let drops = common::shadow_run(cfg(256, 8, 10), 20_000, 5, false).unwrap();
    assert!(drops > 0);
}
