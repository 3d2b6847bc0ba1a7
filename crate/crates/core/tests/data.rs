use std::fs;

use cgsd::data::{
    apply_domain_shift, apportion, gen_synthetic, meta_path, read_dataset, split_counts, stratified_split,
    write_dataset, Dataset, Domain, SyntheticConfig,
};
use cgsd::numkit::Tensor2;
use cgsd::Error;
use proptest::prelude::*;

fn small_cfg(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n: 300,
        d_in: 8,
        seed,
        ..SyntheticConfig::default()
    }
}

fn nearest_mean(x: &[f64], means: &[Vec<f64>]) -> usize {
    let dist = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    (0..means.len())
        .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
        .unwrap()
}

fn class_means(ds: &Dataset) -> Vec<Vec<f64>> {
    let counts = ds.class_counts();
    let mut means = vec![vec![0.0; ds.d_in()]; ds.k];
    for (i, &l) in ds.labels.iter().enumerate() {
        for (m, v) in means[l].iter_mut().zip(ds.features.row(i)) {
            *m += v / counts[l] as f64;
        }
    }
    means
}

fn accuracy(ds: &Dataset, means: &[Vec<f64>]) -> f64 {
    let hits = (0..ds.n())
        .filter(|&i| nearest_mean(ds.features.row(i), means) == ds.labels[i])
        .count();
    hits as f64 / ds.n() as f64
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let (s1, t1) = gen_synthetic(&small_cfg(5)).unwrap();
    let (s2, t2) = gen_synthetic(&small_cfg(5)).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(t1, t2);
    let bits = |d: &Dataset| d.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&s1), bits(&s2));
    let (s3, _) = gen_synthetic(&small_cfg(6)).unwrap();
    assert_ne!(s1.features, s3.features);
    assert_eq!(s1.domain, Domain::Source);
    assert_eq!(t1.domain, Domain::Target);
}

#[test]
fn class_counts_follow_apportionment() {
    let cfg = SyntheticConfig::default();
    let (s, t) = gen_synthetic(&cfg).unwrap();
    let want = apportion(cfg.n, &cfg.proportions);
    assert_eq!(s.class_counts(), want);
    assert_eq!(t.class_counts(), want);
    assert_eq!(want.iter().sum::<usize>(), 3662);
}

#[test]
fn well_separated_classes_are_nearly_bayes_separable() {
    let cfg = SyntheticConfig {
        n: 2000,
        delta: 6.0,
        sigma: 1.0,
        seed: 2024,
        ..SyntheticConfig::default()
    };
    let (source, _) = gen_synthetic(&cfg).unwrap();
    let means: Vec<Vec<f64>> = (0..cfg.k)
        .map(|j| {
            let mut m = vec![0.0; cfg.d_in];
            m[0] = j as f64 * cfg.delta;
            m
        })
        .collect();
    let acc = accuracy(&source, &means);
    assert!(acc >= 0.98, "accuracy {acc}");
}

#[test]
fn domain_shift_breaks_a_source_classifier() {
    let cfg = SyntheticConfig {
        seed: 11,
        ..SyntheticConfig::default()
    };
    let (source, target) = gen_synthetic(&cfg).unwrap();
    let means = class_means(&source);
    let (a_src, a_tgt) = (accuracy(&source, &means), accuracy(&target, &means));
    assert!(a_src - a_tgt >= 0.10, "source {a_src}, target {a_tgt}");
}

#[test]
fn shift_rotation_examples() {
    let e1 = Tensor2::row_vector(&[1.0, 0.0]);
    let y = apply_domain_shift(&e1, std::f64::consts::FRAC_PI_2, 0.0, 3).unwrap();
    assert!(y.get(0, 0).abs() < 1e-12);
    assert!((y.get(0, 1) - 1.0).abs() < 1e-12);
    let x = Tensor2::from_fn(4, 10, |i, j| ((i * 10 + j) as f64).sin());
    assert_eq!(apply_domain_shift(&x, 0.0, 0.0, 1).unwrap(), x);
}

proptest! {
    #[test]
    fn shift_preserves_norms_without_bias(
        vals in prop::collection::vec(-5.0f64..5.0, 12),
        angle in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let x = Tensor2::new(2, 6, vals).unwrap();
        let y = apply_domain_shift(&x, angle, 0.0, seed).unwrap();
        for i in 0..2 {
            let nx: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((nx - ny).abs() < 1e-9);
        }
    }

    #[test]
    fn apportionment_sums_to_n(raw in prop::collection::vec(0.0f64..1.0, 2..9), n in 0usize..5000) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let c = apportion(n, &p);
        prop_assert_eq!(c.iter().sum::<usize>(), n);
        for (ci, pi) in c.iter().zip(&p) {
            prop_assert!((*ci as f64 - n as f64 * pi).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn split_is_a_stratified_partition(counts in prop::collection::vec(1usize..40, 2..6), seed in any::<u64>()) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat(c).take(m)).collect();
        let n = labels.len();
        let ds = Dataset::new(Tensor2::zeros(n, 2), labels, counts.len(), Domain::Target, 0).unwrap();
        let split = stratified_split(&ds, 0.7, seed).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for (c, &m) in counts.iter().enumerate() {
            let k = split.train.iter().filter(|&&i| ds.labels[i] == c).count();
            prop_assert!((k as f64 / m as f64 - 0.7).abs() < 1.0 / m as f64);
        }
        prop_assert_eq!(split_counts(&counts, 0.7).iter().sum::<usize>(), split.train.len());
    }
}

#[test]
fn split_depends_only_on_seed() {
    let (_, t) = gen_synthetic(&small_cfg(1)).unwrap();
    assert_eq!(stratified_split(&t, 0.7, 9).unwrap(), stratified_split(&t, 0.7, 9).unwrap());
    assert_ne!(stratified_split(&t, 0.7, 9).unwrap(), stratified_split(&t, 0.7, 10).unwrap());
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.csv");
    let (_, t) = gen_synthetic(&small_cfg(77)).unwrap();
    write_dataset(&path, &t).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.labels, t.labels);
    assert_eq!(back.k, t.k);
    assert_eq!(back.domain, t.domain);
    assert_eq!(back.seed, t.seed);
    for (a, b) in back.features.data().iter().zip(t.features.data()) {
        assert!((a - b).abs() <= 1e-15 * b.abs());
    }
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("label,f0,f1,"));
    assert!(!text.contains('\r'));
}

fn write_raw(dir: &std::path::Path, body: &str, k: usize) -> std::path::PathBuf {
    let path = dir.join("raw.csv");
    fs::write(&path, body).unwrap();
    let n = body.lines().count() - 1;
    let meta = format!(r#"{{"n":{n},"d_in":2,"k":{k},"domain_tag":"target","seed":1}}"#);
    fs::write(meta_path(&path), meta).unwrap();
    path
}

#[test]
fn parse_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_raw(dir.path(), "label,f0,f1\n7,0.1,0.2\n", 5);
    let err = read_dataset(&path).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }));
    assert_eq!(err.to_string(), "label 7 out of range [0,5) at line 2");

    let path = write_raw(dir.path(), "label,f0,f1\n1,0.1,0.2\nx,0.1,0.2\n", 5);
    assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 3, .. })));

    let path = write_raw(dir.path(), "label,f0,f1\n1,0.1\n", 5);
    assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 2, .. })));

    let path = write_raw(dir.path(), "label,a,b\n1,0.1,0.2\n", 5);
    assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn missing_sidecar_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lonely.csv");
    fs::write(&path, "label,f0\n0,1.0\n").unwrap();
    let err = read_dataset(&path).unwrap_err();
    assert!(matches!(err, Error::MetadataNotFound(_)));
    assert!(err.to_string().contains("metadata not found"));
}
