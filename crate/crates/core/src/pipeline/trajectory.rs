use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::KEY_TRAJECTORY;
use crate::analysis::{pca_project_2d, silhouette_score};
use crate::data::Dataset;
use crate::diffusion::{run_chains, ChainPlan, DenoiserNet, NoiseSchedule};
use crate::guidance::GuidanceModel;
use crate::numkit::Tensor2;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub item_id: u64,
    pub true_label: usize,
    pub px: f64,
    pub py: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Grouped by step in the requested order, items in test order.
    pub points: Vec<TrajectoryPoint>,
    /// `(t, silhouette)` per requested step.
    pub silhouettes: Vec<(usize, f64)>,
}

impl Trajectory {
    pub fn silhouette_at(&self, t: usize) -> Option<f64> {
        self.silhouettes.iter().find(|(s, _)| *s == t).map(|(_, v)| *v)
    }
}

/// Runs one seeded chain per test item and projects the noisy labels of
/// every requested step onto their own two leading principal axes.
pub fn export_trajectory(
    guidance: &GuidanceModel,
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    test: &Dataset,
    items: &[u64],
    steps: &[usize],
    seed: u64,
) -> Result<Trajectory> {
    if steps.is_empty() {
        return Err(Error::Config("no trajectory steps requested".into()));
    }
    if let Some(&bad) = steps.iter().find(|&&t| t > sched.t_total) {
        return Err(Error::Config(format!("step {bad} outside 0..={}", sched.t_total)));
    }
    let mut seen = steps.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("duplicate trajectory step".into()));
    }
    if items.len() != test.n() {
        return Err(Error::Contract(format!("{} item ids for {} items", items.len(), test.n())));
    }
    let cond = guidance.condition(&test.features)?;
    let mut rngs: Vec<_> = items
        .iter()
        .map(|&id| rng::substream(seed, &[KEY_TRAJECTORY, id]))
        .collect();
    let mut snapshots: HashMap<usize, Tensor2> = HashMap::new();
    run_chains(net, &cond, sched, &ChainPlan::full(sched), &mut rngs, |t, y| {
        if steps.contains(&t) {
            snapshots.insert(t, y.clone());
        }
    })?;
    let mut points = Vec::with_capacity(steps.len() * test.n());
    let mut silhouettes = Vec::with_capacity(steps.len());
    for &t in steps {
        let proj = pca_project_2d(&snapshots[&t])?;
        silhouettes.push((t, silhouette_score(&proj, &test.labels)?));
        for (i, (&id, &label)) in items.iter().zip(&test.labels).enumerate() {
            points.push(TrajectoryPoint {
                t,
                item_id: id,
                true_label: label,
                px: proj.get(i, 0),
                py: proj.get(i, 1),
            });
        }
    }
    Ok(Trajectory { points, silhouettes })
}

/// Companion file holding `t,silhouette` rows.
pub fn silhouette_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".silhouette.csv");
    PathBuf::from(s)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["t", "item_id", "true_label", "px", "py"])
        .map_err(|e| csv_err(path, e))?;
    for p in &traj.points {
        w.write_record([
            p.t.to_string(),
            p.item_id.to_string(),
            p.true_label.to_string(),
            p.px.to_string(),
            p.py.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let side = silhouette_path(path);
    let mut w = csv::Writer::from_path(&side).map_err(|e| csv_err(&side, e))?;
    w.write_record(["t", "silhouette"]).map_err(|e| csv_err(&side, e))?;
    for (t, s) in &traj.silhouettes {
        w.write_record([t.to_string(), s.to_string()])
            .map_err(|e| csv_err(&side, e))?;
    }
    w.flush().map_err(|e| Error::io(&side, e))
}
