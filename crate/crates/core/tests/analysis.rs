use cgsd::analysis::{confusion_and_metrics, pca_project_2d, silhouette_score};
use cgsd::numkit::Tensor2;
use cgsd::rng;
use cgsd::Error;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

fn gaussian_cloud(n: usize, m: usize, seed: u64, scales: &[f64]) -> Tensor2 {
    let mut r = rng::seeded(seed);
    Tensor2::from_fn(n, m, |_, j| scales[j] * rng::normal(&mut r))
}

#[test]
fn metrics_match_brute_force_recount() {
    let mut r = rng::seeded(3);
    for _ in 0..100 {
        let k = r.random_range(2..7);
        let n = r.random_range(1..200);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let m = confusion_and_metrics(&preds, &labels, k).unwrap();

        let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        assert_eq!(m.accuracy, hits as f64 / n as f64);
        assert_eq!(m.confusion.total(), n as u64);

        let mut f1_sum = 0.0;
        for c in 0..k {
            let tp = (0..n).filter(|&i| preds[i] == c && labels[i] == c).count() as f64;
            let fp = (0..n).filter(|&i| preds[i] == c && labels[i] != c).count() as f64;
            let fn_ = (0..n).filter(|&i| preds[i] != c && labels[i] == c).count() as f64;
            let f1 = if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            assert!((m.per_class_f1[c] - f1).abs() < 1e-12);
            f1_sum += f1;
        }
        assert!((m.macro_f1 - f1_sum / k as f64).abs() < 1e-12);
    }
}

#[test]
fn metric_hand_examples() {
    let m = confusion_and_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(confusion_and_metrics(&[0], &[0, 1], 2), Err(Error::Data(_))));
    assert!(matches!(confusion_and_metrics(&[2], &[0], 2), Err(Error::Data(_))));
}

#[test]
fn pca_variance_matches_dense_eigen_oracle() {
    let n = 400;
    let x = gaussian_cloud(n, 5, 17, &[3.0, 2.0, 1.5, 0.7, 0.2]);
    // mix the axes so the principal directions are not the coordinate axes
    let mix = Tensor2::from_fn(5, 5, |i, j| ((i * 5 + j) as f64 * 0.731).sin());
    let x = x.matmul(&mix).unwrap();

    let mat = DMatrix::from_row_slice(n, 5, x.data());
    let mean = mat.row_mean();
    let centered = DMatrix::from_fn(n, 5, |i, j| mat[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));

    let p = pca_project_2d(&x).unwrap();
    let var = |c: usize| {
        let mu: f64 = (0..n).map(|i| p.get(i, c)).sum::<f64>() / n as f64;
        (0..n).map(|i| (p.get(i, c) - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0)
    };
    assert!((var(0) + var(1) - eig[0] - eig[1]).abs() < 1e-9);
    assert!((var(0) - eig[0]).abs() < 1e-9);
}

#[test]
fn pca_of_2d_data_preserves_distances() {
    let x = gaussian_cloud(30, 2, 4, &[2.0, 0.5]);
    let p = pca_project_2d(&x).unwrap();
    let d = |t: &Tensor2, i: usize, j: usize| ((t.get(i, 0) - t.get(j, 0)).powi(2) + (t.get(i, 1) - t.get(j, 1)).powi(2)).sqrt();
    for i in 0..30 {
        for j in 0..30 {
            assert!((d(&x, i, j) - d(&p, i, j)).abs() < 1e-9);
        }
    }
}

#[test]
fn pca_of_rank_one_data_has_flat_second_axis() {
    let dir = [0.3, -1.0, 2.0, 0.5];
    let x = Tensor2::from_fn(50, 4, |i, j| (i as f64 * 0.37).cos() * 5.0 * dir[j]);
    let p = pca_project_2d(&x).unwrap();
    let mu: f64 = (0..50).map(|i| p.get(i, 1)).sum::<f64>() / 50.0;
    let var: f64 = (0..50).map(|i| (p.get(i, 1) - mu).powi(2)).sum::<f64>() / 50.0;
    assert!(var < 1e-12, "second-axis variance {var}");
    assert!(matches!(pca_project_2d(&Tensor2::zeros(2, 3)), Err(Error::Data(_))));
}

#[test]
fn silhouette_far_clusters() {
    let mut r = rng::seeded(8);
    let pts = Tensor2::from_fn(20, 2, |i, j| {
        let c = if j == 0 { if i < 10 { 100.0 } else { -100.0 } } else { 0.0 };
        c + 0.1 * rng::normal(&mut r)
    });
    let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
    assert!(silhouette_score(&pts, &labels).unwrap() > 0.95);
}

#[test]
fn silhouette_of_random_labels_is_near_zero() {
    for seed in 0..5 {
        let pts = gaussian_cloud(200, 2, 100 + seed, &[1.0, 1.0]);
        let mut r = rng::seeded(200 + seed);
        let labels: Vec<usize> = (0..200).map(|_| r.random_range(0..3)).collect();
        let s = silhouette_score(&pts, &labels).unwrap();
        assert!(s.abs() < 0.1, "seed {seed}: {s}");
    }
}

#[test]
fn silhouette_of_overlapping_clusters_is_small() {
    let base = gaussian_cloud(50, 2, 12, &[1.0, 1.0]);
    let rows: Vec<&[f64]> = (0..50).chain(0..50).map(|i| base.row(i)).collect();
    let pts = Tensor2::from_rows(&rows).unwrap();
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 50)).collect();
    assert!(silhouette_score(&pts, &labels).unwrap() <= 0.05);
    assert!(matches!(silhouette_score(&pts, &[0; 100]), Err(Error::Data(_))));
}

fn rigid(p: &Tensor2, angle: f64, shift: (f64, f64)) -> Tensor2 {
    let (s, c) = angle.sin_cos();
    Tensor2::from_fn(p.rows(), 2, |i, j| {
        let (x, y) = (p.get(i, 0), p.get(i, 1));
        if j == 0 { c * x - s * y + shift.0 } else { s * x + c * y + shift.1 }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_is_translation_invariant(seed in any::<u64>(), shift in prop::collection::vec(-100.0f64..100.0, 4)) {
        let x = gaussian_cloud(25, 4, seed, &[3.0, 2.0, 1.0, 0.5]);
        let moved = Tensor2::from_fn(25, 4, |i, j| x.get(i, j) + shift[j]);
        let a = pca_project_2d(&x).unwrap();
        let b = pca_project_2d(&moved).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn silhouette_is_rigid_motion_invariant(seed in any::<u64>(), angle in -3.2f64..3.2, dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let pts = gaussian_cloud(40, 2, seed, &[1.0, 2.0]);
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let a = silhouette_score(&pts, &labels).unwrap();
        let b = silhouette_score(&rigid(&pts, angle, (dx, dy)), &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}
