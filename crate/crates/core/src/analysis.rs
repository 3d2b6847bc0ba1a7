//! Classification metrics and the 2-D projection / cluster-separation tools
//! used to score label trajectories.

use serde::{Deserialize, Serialize};

use crate::numkit::Tensor2;
use crate::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
}

pub fn confusion_and_metrics(preds: &[usize], labels: &[usize], k: usize) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::Data(format!("class index out of range [0,{k}): pred {p}, label {l}")));
        }
        counts[l][p] += 1;
    }
    let confusion = ConfusionMatrix { k, counts };
    let accuracy = confusion.trace() as f64 / confusion.total() as f64;
    let per_class_f1: Vec<f64> = (0..k)
        .map(|c| {
            let tp = confusion.counts[c][c];
            let fn_: u64 = confusion.counts[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|r| confusion.counts[r][c]).sum::<u64>() - tp;
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = per_class_f1.iter().sum::<f64>() / k as f64;
    Ok(Metrics {
        confusion,
        accuracy,
        per_class_f1,
        macro_f1,
    })
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (descending) and matching unit
/// eigenvectors as columns of a row-major `n x n` matrix.
pub fn symmetric_eigen(a: &Tensor2) -> Result<(Vec<f64>, Tensor2)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension {
            op: "symmetric_eigen",
            lhs: a.shape(),
            rhs: (n, n),
        });
    }
    let mut m = a.clone();
    let mut v = Tensor2::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        let scale: f64 = m.data().iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (mrp, mrq) = (m.get(r, p), m.get(r, q));
                    m.set(r, p, c * mrp - s * mrq);
                    m.set(r, q, s * mrp + c * mrq);
                }
                for r in 0..n {
                    let (mpr, mqr) = (m.get(p, r), m.get(q, r));
                    m.set(p, r, c * mpr - s * mqr);
                    m.set(q, r, s * mpr + c * mqr);
                }
                for r in 0..n {
                    let (vrp, vrq) = (v.get(r, p), v.get(r, q));
                    v.set(r, p, c * vrp - s * vrq);
                    v.set(r, q, s * vrp + c * vrq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Tensor2::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok((values, vectors))
}

/// Sample covariance of the rows (divisor `n - 1`) and the column means.
pub fn covariance(points: &Tensor2) -> (Tensor2, Vec<f64>) {
    let (n, m) = points.shape();
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (mu, x) in mean.iter_mut().zip(points.row(i)) {
            *mu += x;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= n as f64);
    let mut cov = Tensor2::zeros(m, m);
    for i in 0..n {
        let row = points.row(i);
        for a in 0..m {
            let da = row[a] - mean[a];
            for b in a..m {
                let v = cov.get(a, b) + da * (row[b] - mean[b]);
                cov.set(a, b, v);
            }
        }
    }
    let denom = (n - 1).max(1) as f64;
    for a in 0..m {
        for b in a..m {
            let v = cov.get(a, b) / denom;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    (cov, mean)
}

/// Centers the rows and projects them onto the two leading principal axes.
/// Each axis is signed so its largest-magnitude loading is positive.
pub fn pca_project_2d(points: &Tensor2) -> Result<Tensor2> {
    let (n, m) = points.shape();
    if n < 3 {
        return Err(Error::Data(format!("PCA needs at least 3 points, got {n}")));
    }
    let (cov, mean) = covariance(points);
    let (_, vecs) = symmetric_eigen(&cov)?;
    let mut axes = Vec::with_capacity(2);
    for c in 0..2.min(m) {
        let mut axis: Vec<f64> = (0..m).map(|r| vecs.get(r, c)).collect();
        let lead = axis.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(axis);
    }
    Ok(Tensor2::from_fn(n, 2, |i, c| match axes.get(c) {
        Some(axis) => points
            .row(i)
            .iter()
            .zip(&mean)
            .zip(axis)
            .map(|((x, mu), a)| (x - mu) * a)
            .sum(),
        None => 0.0,
    }))
}

/// Mean silhouette with Euclidean distances. Points in singleton clusters
/// score 0.
pub fn silhouette_score(points: &Tensor2, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} points", labels.len())));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Data("silhouette needs at least two distinct labels".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}
