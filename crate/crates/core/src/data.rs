//! Synthetic ordinal benchmark with a source/target domain shift, stratified
//! splitting and CSV + JSON sidecar storage.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::Tensor2;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub k: usize,
    /// One sample per row.
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub seed: u64,
}

impl Dataset {
    pub fn new(features: Tensor2, labels: Vec<usize>, k: usize, domain: Domain, seed: u64) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range [0,{k})")));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            k,
            features,
            labels,
            domain,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty subset".into()));
        }
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.features.row(i)).collect();
        Ok(Self {
            k: self.k,
            features: Tensor2::from_rows(&rows)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domain: self.domain,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d_in: usize,
    pub k: usize,
    pub seed: u64,
    pub proportions: Vec<f64>,
    /// Distance between adjacent class means along the ordinal axis.
    pub delta: f64,
    pub sigma: f64,
    /// Radians.
    pub shift_angle: f64,
    pub shift_bias: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 3662,
            d_in: 64,
            k: 5,
            seed: 42,
            proportions: vec![0.50, 0.10, 0.27, 0.05, 0.08],
            delta: 4.0,
            sigma: 1.0,
            shift_angle: 0.5,
            shift_bias: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("need k >= 2, got {}", self.k)));
        }
        if self.proportions.len() != self.k {
            return Err(Error::Config(format!(
                "{} proportions for {} grades",
                self.proportions.len(),
                self.k
            )));
        }
        let total: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "proportions must be nonnegative and sum to 1 (sum = {total})"
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.n < self.k {
            return Err(Error::Config(format!("n = {} is smaller than k = {}", self.n, self.k)));
        }
        if self.d_in < 2 {
            return Err(Error::Config(format!("d_in must be >= 2, got {}", self.d_in)));
        }
        if !self.delta.is_finite() || !self.shift_angle.is_finite() || !self.shift_bias.is_finite() {
            return Err(Error::Config("non-finite generator parameter".into()));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` slots; ties go to the smaller
/// index. Always sums to `n`.
pub fn apportion(n: usize, proportions: &[f64]) -> Vec<usize> {
    let total: f64 = proportions.iter().sum();
    let quotas: Vec<f64> = proportions.iter().map(|p| n as f64 * p / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // Stable sort keeps smaller indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Class means `j * delta * e1` plus isotropic noise, in class-count blocks
/// shuffled into a random order.
fn draw_domain<R: Rng + ?Sized>(cfg: &SyntheticConfig, counts: &[usize], rng: &mut R) -> (Tensor2, Vec<usize>) {
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &c)| std::iter::repeat_n(j, c))
        .collect();
    labels.shuffle(rng);
    let features = Tensor2::from_fn(labels.len(), cfg.d_in, |i, c| {
        let mean = if c == 0 { labels[i] as f64 * cfg.delta } else { 0.0 };
        mean + cfg.sigma * rng::normal(rng)
    });
    (features, labels)
}

/// Source and shifted target datasets, both fully determined by `cfg.seed`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let counts = apportion(cfg.n, &cfg.proportions);
    let (fs, ls) = draw_domain(cfg, &counts, &mut rng::substream(cfg.seed, &[0xDA7A, 0]));
    let (ft, lt) = draw_domain(cfg, &counts, &mut rng::substream(cfg.seed, &[0xDA7A, 1]));
    let ft = apply_domain_shift(&ft, cfg.shift_angle, cfg.shift_bias, cfg.seed)?;
    Ok((
        Dataset::new(fs, ls, cfg.k, Domain::Source, cfg.seed)?,
        Dataset::new(ft, lt, cfg.k, Domain::Target, cfg.seed)?,
    ))
}

/// Rotation by `shift_angle` in the plane of axes 0 and 1, a second rotation
/// by a seeded fraction of `shift_angle` in a seeded plane among the
/// remaining axes (when at least two remain), then `shift_bias` along `-e1`.
pub fn apply_domain_shift(features: &Tensor2, shift_angle: f64, shift_bias: f64, seed: u64) -> Result<Tensor2> {
    let d = features.cols();
    if d < 2 {
        return Err(Error::Config(format!("domain shift needs d_in >= 2, got {d}")));
    }
    let mut rng = rng::substream(seed, &[0x5D1F7]);
    let second = if d >= 4 {
        let p = rng.random_range(2..d);
        let mut q = rng.random_range(2..d - 1);
        if q >= p {
            q += 1;
        }
        let frac: f64 = rng.random_range(-1.0..1.0);
        Some((p, q, frac * shift_angle))
    } else {
        None
    };
    let mut out = features.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        rotate(row, 0, 1, shift_angle);
        if let Some((p, q, angle)) = second {
            rotate(row, p, q, angle);
        }
        row[0] -= shift_bias;
    }
    Ok(out)
}

fn rotate(row: &mut [f64], p: usize, q: usize, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    let (x, y) = (row[p], row[q]);
    row[p] = c * x - s * y;
    row[q] = s * x + c * y;
}

/// Index partition produced by [`stratified_split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class train counts: floors of `count * fraction`, then the remaining
/// slots by largest fractional remainder (smaller class first on ties).
pub fn split_counts(counts: &[usize], train_fraction: f64) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let target = (n as f64 * train_fraction + 1e-9).floor() as usize;
    let quotas: Vec<f64> = counts.iter().map(|&c| c as f64 * train_fraction).collect();
    let mut train: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - train[a] as f64;
        let rb = quotas[b] - train[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    let assigned: usize = train.iter().sum();
    for &i in order.iter().take(target.saturating_sub(assigned)) {
        if train[i] < counts[i] {
            train[i] += 1;
        }
    }
    train
}

pub fn stratified_split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let counts = ds.class_counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} has no samples")));
    }
    let quotas = split_counts(&counts, train_fraction);
    let mut rng = rng::substream(seed, &[0x5917]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..ds.k {
        let mut members: Vec<usize> = (0..ds.n()).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..quotas[class]]);
        test.extend_from_slice(&members[quotas[class]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    n: usize,
    d_in: usize,
    k: usize,
    domain_tag: Domain,
    seed: u64,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Decimal text with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `path` (CSV, header `label,f0,..`) and `path.meta.json`.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.d_in()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (i, &label) in ds.labels.iter().enumerate() {
        let mut rec = vec![label.to_string()];
        rec.extend(ds.features.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = Metadata {
        n: ds.n(),
        d_in: ds.d_in(),
        k: ds.k,
        domain_tag: ds.domain,
        seed: ds.seed,
    };
    let mp = meta_path(path);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&mp, text).map_err(|e| Error::io(mp, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Reads a dataset written by [`write_dataset`]; the sidecar is mandatory.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mp = meta_path(path);
    if !mp.exists() {
        return Err(Error::MetadataNotFound(mp));
    }
    let meta_text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: Metadata = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Data(format!("{}: {e}", mp.display())))?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut records = reader.records();
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    let expected: Vec<String> = std::iter::once("label".to_string())
        .chain((0..meta.d_in).map(|j| format!("f{j}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, format!("header mismatch, expected label,f0..f{}", meta.d_in - 1)));
    }

    let mut labels = Vec::with_capacity(meta.n);
    let mut data = Vec::with_capacity(meta.n * meta.d_in);
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != meta.d_in + 1 {
            return Err(parse_err(
                line,
                format!("row has {} fields, expected {}", rec.len(), meta.d_in + 1),
            ));
        }
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("non-integer label {:?}", &rec[0])))?;
        if label >= meta.k {
            return Err(parse_err(line, format!("label {label} out of range [0,{})", meta.k)));
        }
        labels.push(label);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
    }
    if labels.len() != meta.n {
        return Err(Error::Data(format!(
            "{}: metadata says n = {}, found {} rows",
            path.display(),
            meta.n,
            labels.len()
        )));
    }
    let features = Tensor2::new(meta.n, meta.d_in, data)?;
    Dataset::new(features, labels, meta.k, meta.domain_tag, meta.seed)
}

/// Conventional file names inside a benchmark directory.
pub fn source_path(dir: &Path) -> PathBuf {
    dir.join("source.csv")
}

pub fn target_path(dir: &Path) -> PathBuf {
    dir.join("target.csv")
}

pub fn write_benchmark(dir: &Path, source: &Dataset, target: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset(&source_path(dir), source)?;
    write_dataset(&target_path(dir), target)
}

pub fn read_benchmark(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((read_dataset(&source_path(dir))?, read_dataset(&target_path(dir))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(100, &[0.50, 0.10, 0.27, 0.05, 0.08]), vec![50, 10, 27, 5, 8]);
        assert_eq!(apportion(10, &[0.5, 0.5]), vec![5, 5]);
        // 7 * (1/3) each: floors 2,2,2 and the tie goes to class 0
        assert_eq!(apportion(7, &[1.0 / 3.0; 3]), vec![3, 2, 2]);
    }

    #[test]
    fn split_count_example() {
        assert_eq!(split_counts(&[6, 4], 0.7), vec![4, 3]);
    }

    #[test]
    fn shift_examples() {
        let x = Tensor2::from_fn(3, 6, |i, j| (i * 6 + j) as f64 * 0.37 - 2.0);
        assert_eq!(apply_domain_shift(&x, 0.0, 0.0, 9).unwrap(), x);

        let e1 = Tensor2::row_vector(&[1.0, 0.0]);
        let y = apply_domain_shift(&e1, std::f64::consts::FRAC_PI_2, 0.0, 1).unwrap();
        assert!(y.get(0, 0).abs() < 1e-12 && (y.get(0, 1) - 1.0).abs() < 1e-12);

        assert!(matches!(
            apply_domain_shift(&Tensor2::zeros(2, 1), 0.5, 0.5, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generator_rejects_bad_configs() {
        let bad = |f: fn(&mut SyntheticConfig)| {
            let mut c = SyntheticConfig::default();
            f(&mut c);
            matches!(gen_synthetic(&c), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.n = 3));
        assert!(bad(|c| c.sigma = 0.0));
        assert!(bad(|c| c.proportions = vec![0.5, 0.5, 0.0, 0.0, 0.1]));
        assert!(bad(|c| c.k = 1));
    }

    #[test]
    fn split_rejects_empty_class_and_bad_fraction() {
        let ds = Dataset::new(Tensor2::zeros(4, 2), vec![0, 0, 1, 1], 3, Domain::Source, 0).unwrap();
        assert!(matches!(stratified_split(&ds, 0.7, 0), Err(Error::Data(_))));
        let ds = Dataset::new(Tensor2::zeros(4, 2), vec![0, 0, 1, 1], 2, Domain::Source, 0).unwrap();
        assert!(matches!(stratified_split(&ds, 1.0, 0), Err(Error::Config(_))));
    }
}
