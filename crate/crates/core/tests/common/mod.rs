#![allow(dead_code)]

use cgsd::data::SyntheticConfig;
use cgsd::guidance::{GuidanceModel, GuidanceShape};
use cgsd::pipeline::Benchmark;
use cgsd::rng;

/// Small default-shaped benchmark for fast pipeline tests.
pub fn small_bench(n: usize, delta: f64, seed: u64) -> Benchmark {
    let cfg = SyntheticConfig {
        n,
        delta,
        seed,
        ..SyntheticConfig::default()
    };
    let (s, t) = cgsd::data::gen_synthetic(&cfg).unwrap();
    Benchmark::new(s, t).unwrap()
}

pub fn random_model(d_in: usize, k: usize, seed: u64) -> GuidanceModel {
    let shape = GuidanceShape {
        d_in,
        hidden: 12,
        d: 6,
        k,
        rank: 3,
    };
    GuidanceModel::init(shape, 6.0, &mut rng::seeded(seed)).unwrap()
}
