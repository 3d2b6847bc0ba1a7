use serde::{Deserialize, Serialize};

use crate::analysis::{confusion_and_metrics, Metrics};
use crate::data::Dataset;
use crate::diffusion::{infer_batch, ChainPlan, Conditioning, DenoiserNet, NoiseSchedule};
use crate::guidance::GuidanceModel;
use crate::numkit::Tensor2;
use crate::{Error, Result};

/// Items handed to one `infer_batch` call.
const INFER_CHUNK: usize = 32;

/// How test labels are decided.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// `argmax d` from the guidance model alone.
    ZeroShot,
    /// Averaged reverse chains of a trained denoiser.
    Diffusion {
        net: &'a DenoiserNet,
        sched: &'a NoiseSchedule,
        n_samples: usize,
    },
}

impl Predictor<'_> {
    pub fn mode(&self) -> &'static str {
        match self {
            Predictor::ZeroShot => "zero-shot",
            Predictor::Diffusion { .. } => "diffusion",
        }
    }
}

fn rows(t: &Tensor2, lo: usize, hi: usize) -> Tensor2 {
    Tensor2::from_fn(hi - lo, t.cols(), |i, j| t.get(lo + i, j))
}

fn chunk_cond(c: &Conditioning, lo: usize, hi: usize) -> Conditioning {
    Conditioning {
        f: rows(&c.f, lo, hi),
        d: rows(&c.d, lo, hi),
        prior: rows(&c.prior, lo, hi),
    }
}

/// Predicted grade per row of `features`. `items` are the stable ids that
/// key each item's sampling streams; with `parallel` the chunks run on the
/// rayon pool and produce the same predictions.
pub fn predict(
    guidance: &GuidanceModel,
    predictor: Predictor<'_>,
    features: &Tensor2,
    items: &[u64],
    seed: u64,
    parallel: bool,
) -> Result<Vec<usize>> {
    if items.len() != features.rows() {
        return Err(Error::Contract(format!(
            "{} item ids for {} rows",
            items.len(),
            features.rows()
        )));
    }
    let (net, sched, n_samples) = match predictor {
        Predictor::ZeroShot => return guidance.zero_shot_batch(features),
        Predictor::Diffusion {
            net,
            sched,
            n_samples,
        } => (net, sched, n_samples),
    };
    let cond = guidance.condition(features)?;
    let plan = ChainPlan::full(sched);
    let n = features.rows();
    let bounds: Vec<(usize, usize)> = (0..n)
        .step_by(INFER_CHUNK)
        .map(|lo| (lo, (lo + INFER_CHUNK).min(n)))
        .collect();
    let run = |&(lo, hi): &(usize, usize)| -> Result<Vec<usize>> {
        let out = infer_batch(net, &chunk_cond(&cond, lo, hi), &items[lo..hi], sched, &plan, n_samples, seed)?;
        Ok(out.into_iter().map(|inf| inf.grade).collect())
    };
    let parts: Vec<Vec<usize>> = if parallel {
        run_parallel(&bounds, run)?
    } else {
        bounds.iter().map(run).collect::<Result<_>>()?
    };
    Ok(parts.concat())
}

#[cfg(feature = "parallel")]
fn run_parallel<F>(bounds: &[(usize, usize)], run: F) -> Result<Vec<Vec<usize>>>
where
    F: Fn(&(usize, usize)) -> Result<Vec<usize>> + Sync + Send,
{
    use rayon::prelude::*;
    bounds.par_iter().map(run).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_parallel<F>(bounds: &[(usize, usize)], run: F) -> Result<Vec<Vec<usize>>>
where
    F: Fn(&(usize, usize)) -> Result<Vec<usize>> + Sync + Send,
{
    bounds.iter().map(run).collect()
}

pub fn evaluate(
    guidance: &GuidanceModel,
    predictor: Predictor<'_>,
    test: &Dataset,
    items: &[u64],
    seed: u64,
    parallel: bool,
) -> Result<Metrics> {
    let preds = predict(guidance, predictor, &test.features, items, seed, parallel)?;
    confusion_and_metrics(&preds, &test.labels, test.k)
}

/// Published figures carried alongside measured ones; never asserted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Full-method figures on the original fundus benchmark.
pub const FULL_METHOD_REFERENCE: Reference = Reference {
    accuracy: 0.875,
    macro_f1: 0.731,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub n_eval: usize,
    pub seed: u64,
    pub config_digest: String,
    pub reference: Reference,
}

impl EvalReport {
    pub fn new(mode: &str, metrics: &Metrics, seed: u64, config_digest: String) -> Self {
        Self {
            mode: mode.into(),
            accuracy: metrics.accuracy,
            macro_f1: metrics.macro_f1,
            per_class_f1: metrics.per_class_f1.clone(),
            confusion: metrics.confusion.counts.clone(),
            n_eval: metrics.confusion.total() as usize,
            seed,
            config_digest,
            reference: FULL_METHOD_REFERENCE,
        }
    }
}
