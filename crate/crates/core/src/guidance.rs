//! Stage-1 guidance model.
//!
//! A frozen two-layer encoder maps raw features to unit vectors `f`; a LoRA
//! adapter sits on the encoder's output projection. Cosine similarity of `f`
//! with each (normalized) grade prompt gives the semantic vector `d`, and
//! `softmax(exp(log_scale) * d)` gives the prior used as the mean of the label
//! diffusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{argmax, ops, Tape, Tensor2, Var};
use crate::{rng, Error, Result};

/// Floor used when normalizing features and prompt rows.
pub const NORM_EPS: f64 = 1e-12;
/// Upper bound on `exp(log_scale)`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
/// `ln(1 / 0.07)`.
pub const INIT_LOG_SCALE: f64 = 2.659_260_036_932_778_4;

/// Low-rank increment `(alpha / rank) * B A` on a frozen `d_out x d_in`
/// weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `rank x d_in`
    pub a: Tensor2,
    /// `d_out x rank`, zero at initialization.
    pub b: Tensor2,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Zero `B`, uniform `A` in `+-1/sqrt(d_in)`.
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate_rank(rank, d_in, d_out)?;
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be > 0, got {alpha}")));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = Tensor2::from_fn(rank, d_in, |_, _| rng.random_range(-bound..bound));
        Ok(Self {
            a,
            b: Tensor2::zeros(d_out, rank),
            rank,
            alpha,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / rank) * B A`, shape `d_out x d_in`.
    pub fn delta_w(&self) -> Tensor2 {
        self.b.matmul(&self.a).expect("adapter shapes").scale(self.scaling())
    }

    fn check(&self) -> Result<()> {
        validate_rank(self.rank, self.d_in(), self.d_out())?;
        if self.a.shape() != (self.rank, self.d_in()) || self.b.shape() != (self.d_out(), self.rank) {
            return Err(Error::Config(format!(
                "adapter shapes A {:?}, B {:?} inconsistent with rank {}",
                self.a.shape(),
                self.b.shape(),
                self.rank
            )));
        }
        Ok(())
    }
}

fn validate_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "LoRA rank {rank} must lie in [1, {}]",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

/// `W x + (alpha / r) B (A x)` for a single input vector.
pub fn lora_forward(x: &[f64], w_frozen: &Tensor2, adapter: &LoraAdapter) -> Result<Vec<f64>> {
    adapter.check()?;
    if w_frozen.shape() != (adapter.d_out(), adapter.d_in()) {
        return Err(Error::Dimension {
            op: "lora_forward",
            lhs: w_frozen.shape(),
            rhs: (adapter.d_out(), adapter.d_in()),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor2::row_vector(x));
    let w = tape.constant(w_frozen.clone());
    let a = tape.constant(adapter.a.clone());
    let b = tape.constant(adapter.b.clone());
    let y = lora_rows(&mut tape, x, w, a, b, adapter.scaling())?;
    Ok(tape.value(y).data().to_vec())
}

/// Row-batched LoRA projection: `X W^T + s (X A^T) B^T`.
pub fn lora_rows(tape: &mut Tape, x: Var, w: Var, a: Var, b: Var, scaling: f64) -> Result<Var> {
    let base = tape.matmul_t(x, w)?;
    let low = tape.matmul_t(x, a)?;
    let inc = tape.matmul_t(low, b)?;
    let inc = tape.scale(inc, scaling);
    tape.add(base, inc)
}

/// Cosine similarities and the prior derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector {
    pub d: Vec<f64>,
    pub prior: Vec<f64>,
}

/// Which parameter groups are trainable when a model is bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Inference; nothing receives gradients.
    Nothing,
    /// Stage-1 adaptation: LoRA `A`, `B`, prompts and `log_scale`.
    Adaptation,
    /// Source-domain pretraining of the base encoder, prompts and
    /// `log_scale`; the adapter stays at zero.
    Base,
}

/// Tape handles for every tensor of a [`GuidanceModel`].
#[derive(Debug, Clone, Copy)]
pub struct GuidanceVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub lora_a: Var,
    pub lora_b: Var,
    pub prompts: Var,
    pub log_scale: Var,
    pub scaling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceModel {
    /// `hidden x d_in`
    pub w1: Tensor2,
    /// `1 x hidden`
    pub b1: Tensor2,
    /// `d x hidden`; the adapter is attached here.
    pub w2: Tensor2,
    /// `1 x d`
    pub b2: Tensor2,
    pub adapter: LoraAdapter,
    /// Raw grade prompts, `k x d`, normalized on use.
    pub prompts: Tensor2,
    pub log_scale: f64,
}

/// Architecture sizes of a [`GuidanceModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuidanceShape {
    pub d_in: usize,
    pub hidden: usize,
    pub d: usize,
    pub k: usize,
    pub rank: usize,
}

impl GuidanceShape {
    pub fn new(d_in: usize, k: usize, rank: usize) -> Self {
        Self {
            d_in,
            hidden: 128,
            d: 64,
            k,
            rank,
        }
    }
}

impl GuidanceModel {
    /// Randomly initialized base encoder, zero adapter increment.
    pub fn init<R: Rng + ?Sized>(shape: GuidanceShape, alpha: f64, rng: &mut R) -> Result<Self> {
        if shape.k < 2 {
            return Err(Error::Config(format!("need at least 2 grades, got {}", shape.k)));
        }
        let GuidanceShape {
            d_in,
            hidden,
            d,
            k,
            rank,
        } = shape;
        let s1 = (1.0 / d_in as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let w1 = Tensor2::from_fn(hidden, d_in, |_, _| s1 * rng::normal(rng));
        let w2 = Tensor2::from_fn(d, hidden, |_, _| s2 * rng::normal(rng));
        let prompts = Tensor2::from_fn(k, d, |_, _| rng::normal(rng));
        let adapter = LoraAdapter::new(hidden, d, rank, alpha, rng)?;
        Ok(Self {
            w1,
            b1: Tensor2::zeros(1, hidden),
            w2,
            b2: Tensor2::zeros(1, d),
            adapter,
            prompts,
            log_scale: INIT_LOG_SCALE,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn k(&self) -> usize {
        self.prompts.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.rows()
    }

    /// `exp(log_scale)` clamped to `(0, 100]`.
    pub fn logit_scale(&self) -> f64 {
        self.log_scale.exp().min(MAX_LOGIT_SCALE)
    }

    /// Structural consistency of every tensor.
    pub fn validate(&self) -> Result<()> {
        self.adapter.check()?;
        let hidden = self.w1.rows();
        let d = self.w2.rows();
        let ok = self.b1.shape() == (1, hidden)
            && self.w2.cols() == hidden
            && self.b2.shape() == (1, d)
            && self.adapter.d_in() == hidden
            && self.adapter.d_out() == d
            && self.prompts.cols() == d;
        if !ok {
            return Err(Error::Config("inconsistent guidance model shapes".into()));
        }
        if self.k() < 2 {
            return Err(Error::Config(format!("need at least 2 grades, got {}", self.k())));
        }
        if !self.log_scale.is_finite() {
            return Err(Error::Config("non-finite log_scale".into()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> GuidanceVars {
        let base = trainable == Trainable::Base;
        let adapt = trainable == Trainable::Adaptation;
        let head = trainable != Trainable::Nothing;
        let mut leaf = |t: &Tensor2, train: bool| {
            if train {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        GuidanceVars {
            w1: leaf(&self.w1, base),
            b1: leaf(&self.b1, base),
            w2: leaf(&self.w2, base),
            b2: leaf(&self.b2, base),
            lora_a: leaf(&self.adapter.a, adapt),
            lora_b: leaf(&self.adapter.b, adapt),
            prompts: leaf(&self.prompts, head),
            log_scale: leaf(&Tensor2::scalar(self.log_scale), head),
            scaling: self.adapter.scaling(),
        }
    }

    /// Unit features for a batch of raw inputs (one per row).
    pub fn encode_batch(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Trainable::Nothing);
        let x = tape.constant(x.clone());
        let f = encode(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn encode_feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&Tensor2::row_vector(x))?.into_data())
    }

    /// The encoding with the adapter removed.
    pub fn encode_frozen_base(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut base = self.clone();
        base.adapter.b = Tensor2::zeros(base.adapter.b.rows(), base.adapter.b.cols());
        base.encode_feature(x)
    }

    pub fn semantic_vector(&self, f: &[f64]) -> Result<SemanticVector> {
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("feature norm {norm} is not 1")));
        }
        let out = self.semantic_batch(&Tensor2::row_vector(f))?;
        Ok(SemanticVector {
            d: out.d.into_data(),
            prior: out.prior.into_data(),
        })
    }

    /// `d` and the prior for a batch of unit features.
    pub fn semantic_batch(&self, f: &Tensor2) -> Result<BatchSemantics> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Trainable::Nothing);
        let fv = tape.constant(f.clone());
        let (d, scale) = semantic(&mut tape, &vars, fv)?;
        let logits = tape.mul_by_scalar(d, scale)?;
        let prior = tape.softmax_rows(logits);
        Ok(BatchSemantics {
            f: f.clone(),
            d: tape.value(d).clone(),
            prior: tape.value(prior).clone(),
        })
    }

    /// Features, similarities and priors for raw inputs.
    pub fn condition(&self, x: &Tensor2) -> Result<BatchSemantics> {
        let f = self.encode_batch(x)?;
        self.semantic_batch(&f)
    }

    /// `argmax d`, smaller grade on ties.
    pub fn zero_shot_predict(&self, x: &[f64]) -> Result<usize> {
        let f = self.encode_feature(x)?;
        Ok(argmax(&self.semantic_vector(&f)?.d))
    }

    pub fn zero_shot_batch(&self, x: &Tensor2) -> Result<Vec<usize>> {
        let s = self.condition(x)?;
        Ok((0..s.d.rows()).map(|i| argmax(s.d.row(i))).collect())
    }
}

/// Per-row outputs of the guidance model.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSemantics {
    pub f: Tensor2,
    pub d: Tensor2,
    pub prior: Tensor2,
}

/// `f = normalize(lora(g(W1 x + b1)) + b2)`, rows are samples.
pub fn encode(tape: &mut Tape, v: &GuidanceVars, x: Var) -> Result<Var> {
    let h = tape.matmul_t(x, v.w1)?;
    let h = tape.add_row_bias(h, v.b1)?;
    let h = tape.smooth(h);
    let z = lora_rows(tape, h, v.w2, v.lora_a, v.lora_b, v.scaling)?;
    let z = tape.add_row_bias(z, v.b2)?;
    tape.l2_normalize_rows(z, NORM_EPS)
}

/// Returns `(d, scale)`: `d = f normalize(prompts)^T` and the clamped logit
/// scale as a `1 x 1` value.
pub fn semantic(tape: &mut Tape, v: &GuidanceVars, f: Var) -> Result<(Var, Var)> {
    let p = tape.l2_normalize_rows(v.prompts, NORM_EPS)?;
    let d = tape.matmul_t(f, p)?;
    let s = tape.exp(v.log_scale);
    let s = tape.clamp_max(s, MAX_LOGIT_SCALE);
    Ok((d, s))
}

/// Mean cross-entropy of `softmax(scale * d_i)` against the labels.
pub fn contrastive_loss(tape: &mut Tape, d: Var, labels: &[usize], scale: Var) -> Result<Var> {
    let logits = tape.mul_by_scalar(d, scale)?;
    tape.cross_entropy(logits, labels)
}

/// Pairwise ordinal hinge. For a sample of grade `k`, every grade pair
/// `(a, b)` with `|a - k| < |b - k|` contributes `max(0, margin - (d_a - d_b))`;
/// contributions are averaged over the sample's pairs, then over the batch.
pub fn ranking_loss(tape: &mut Tape, d: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let (rows, k) = tape.value(d).shape();
    if labels.len() != rows {
        return Err(Error::Contract(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range [0,{k})")));
    }
    // Column a*k + b of `pairs` holds e_a - e_b.
    let pairs = Tensor2::from_fn(k, k * k, |i, col| {
        let (a, b) = (col / k, col % k);
        (i == a) as i32 as f64 - (i == b) as i32 as f64
    });
    let mut weights = Tensor2::zeros(rows, k * k);
    for (i, &label) in labels.iter().enumerate() {
        let closer = |a: usize, b: usize| a.abs_diff(label) < b.abs_diff(label);
        let count = (0..k * k).filter(|c| closer(c / k, c % k)).count();
        if count == 0 {
            continue;
        }
        for c in 0..k * k {
            if closer(c / k, c % k) {
                weights.set(i, c, 1.0 / count as f64);
            }
        }
    }
    let pairs = tape.constant(pairs);
    let weights = tape.constant(weights);
    let gaps = tape.matmul(d, pairs)?;
    let slack = tape.scale(gaps, -1.0);
    let slack = tape.add_scalar(slack, margin);
    let hinge = tape.relu(slack);
    let weighted = tape.mul(hinge, weights)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Loss weights and schedule for stage-1 adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrainConfig {
    pub lambda_rank: f64,
    pub margin: f64,
    pub lr_lora: f64,
    pub lr_prompt: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for GuidanceTrainConfig {
    fn default() -> Self {
        Self {
            lambda_rank: 1.0,
            margin: 0.05,
            lr_lora: 1e-4,
            lr_prompt: 2e-3,
            epochs: 22,
            batch: 64,
            warmup_epochs: 3,
            seed: 42,
        }
    }
}

impl GuidanceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lambda_rank >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Config("lambda_rank and margin must be >= 0".into()));
        }
        if !(self.lr_lora > 0.0) || !(self.lr_prompt > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// `L_main + lambda * L_rank` over a batch of raw inputs.
pub fn guidance_loss(
    tape: &mut Tape,
    vars: &GuidanceVars,
    x: Var,
    labels: &[usize],
    lambda_rank: f64,
    margin: f64,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Contract("empty guidance batch".into()));
    }
    let f = encode(tape, vars, x)?;
    let (d, scale) = semantic(tape, vars, f)?;
    let main = contrastive_loss(tape, d, labels, scale)?;
    if lambda_rank == 0.0 {
        return Ok(main);
    }
    let rank = ranking_loss(tape, d, labels, margin)?;
    let rank = tape.scale(rank, lambda_rank);
    tape.add(main, rank)
}

/// Evaluates [`guidance_loss`] without recording gradients.
pub fn guidance_loss_value(
    model: &GuidanceModel,
    x: &Tensor2,
    labels: &[usize],
    lambda_rank: f64,
    margin: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, Trainable::Nothing);
    let xv = tape.constant(x.clone());
    let loss = guidance_loss(&mut tape, &vars, xv, labels, lambda_rank, margin)?;
    Ok(tape.value(loss).item())
}

/// Plain-value wrapper over [`contrastive_loss`].
pub fn contrastive_loss_value(d: &Tensor2, labels: &[usize], scale: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let dv = tape.constant(d.clone());
    let s = tape.constant(Tensor2::scalar(scale));
    let loss = contrastive_loss(&mut tape, dv, labels, s)?;
    Ok(tape.value(loss).item())
}

/// Plain-value wrapper over [`ranking_loss`].
pub fn ranking_loss_value(d: &Tensor2, labels: &[usize], margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let dv = tape.constant(d.clone());
    let loss = ranking_loss(&mut tape, dv, labels, margin)?;
    Ok(tape.value(loss).item())
}

/// Softmax of a similarity row at a given scale, for reporting.
pub fn prior_from(d: &[f64], scale: f64) -> Vec<f64> {
    let mut p: Vec<f64> = d.iter().map(|v| v * scale).collect();
    ops::softmax_in_place(&mut p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check_many;

    fn eye_model(k: usize, d: usize) -> GuidanceModel {
        let mut rng = rng::seeded(1);
        let mut m = GuidanceModel::init(
            GuidanceShape {
                d_in: 4,
                hidden: 8,
                d,
                k,
                rank: 2,
            },
            4.0,
            &mut rng,
        )
        .unwrap();
        m.prompts = Tensor2::from_fn(k, d, |i, j| (i == j) as i32 as f64);
        m
    }

    #[test]
    fn lora_zero_b_is_identity_on_base() {
        let mut rng = rng::seeded(3);
        let adapter = LoraAdapter::new(3, 2, 1, 2.0, &mut rng).unwrap();
        let w = Tensor2::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        let y = lora_forward(&[1.0, 1.0, 2.0], &w, &adapter).unwrap();
        assert_eq!(y, vec![9.0, -0.5]);
    }

    #[test]
    fn lora_hand_example() {
        let adapter = LoraAdapter {
            a: Tensor2::from_rows(&[[1.0, 0.0]]).unwrap(),
            b: Tensor2::from_rows(&[[2.0], [0.0]]).unwrap(),
            rank: 1,
            alpha: 2.0,
        };
        let y = lora_forward(&[1.0, 1.0], &Tensor2::identity(2), &adapter).unwrap();
        assert_eq!(y, vec![5.0, 1.0]);
    }

    #[test]
    fn lora_rank_eight_alpha_sixteen_scales_by_two() {
        let mut rng = rng::seeded(5);
        let mut adapter = LoraAdapter::new(16, 12, 8, 16.0, &mut rng).unwrap();
        assert_eq!(adapter.scaling(), 2.0);
        adapter.b = Tensor2::from_fn(12, 8, |i, j| 0.1 * (i as f64 - j as f64));
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let zero = Tensor2::zeros(12, 16);
        let y = lora_forward(&x, &zero, &adapter).unwrap();
        let ba_x = adapter
            .b
            .matmul(&adapter.a)
            .unwrap()
            .matmul(&Tensor2::column_vector(&x))
            .unwrap();
        for (yi, bi) in y.iter().zip(ba_x.data()) {
            assert!((yi - 2.0 * bi).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_rank_bounds() {
        let mut rng = rng::seeded(0);
        assert!(matches!(LoraAdapter::new(4, 3, 0, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(LoraAdapter::new(4, 3, 4, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(LoraAdapter::new(4, 3, 3, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn semantic_vector_examples() {
        let m = eye_model(3, 3);
        let s = m.semantic_vector(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(s.d, vec![0.0, 1.0, 0.0]);
        assert_eq!(argmax(&s.prior), 1);

        let mut m = eye_model(2, 2);
        m.prompts = Tensor2::identity(2);
        let s = m.semantic_vector(&[0.6, 0.8]).unwrap();
        assert!((s.d[0] - 0.6).abs() < 1e-15 && (s.d[1] - 0.8).abs() < 1e-15);

        assert!(m.semantic_vector(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn uniform_similarity_gives_uniform_prior() {
        let p = prior_from(&[0.0; 5], 14.0);
        for v in p {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn contrastive_examples() {
        let one = Tensor2::from_rows(&[[0.3]]).unwrap();
        assert_eq!(contrastive_loss_value(&one, &[0], 5.0).unwrap(), 0.0);

        let d = Tensor2::from_rows(&[[1.0, 0.0]]).unwrap();
        let expected = -(1.0_f64.exp() / (1.0_f64.exp() + 1.0)).ln();
        let got = contrastive_loss_value(&d, &[0], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.3133).abs() < 1e-4);

        let flat = Tensor2::filled(3, 4, 0.25);
        for label in 0..4 {
            let l = contrastive_loss_value(&flat, &[label, label, label], 7.0).unwrap();
            assert!((l - 4.0_f64.ln()).abs() < 1e-14);
        }

        assert!(matches!(contrastive_loss_value(&d, &[2], 1.0), Err(Error::Data(_))));
    }

    #[test]
    fn ranking_examples() {
        let d = Tensor2::from_rows(&[[0.9, 0.6, 0.3, 0.2, 0.1]]).unwrap();
        assert_eq!(ranking_loss_value(&d, &[0], 0.05).unwrap(), 0.0);

        let d = Tensor2::from_rows(&[[0.2, 0.4]]).unwrap();
        assert!((ranking_loss_value(&d, &[0], 0.05).unwrap() - 0.25).abs() < 1e-15);

        let d = Tensor2::from_rows(&[[0.1, 0.5, 0.9, 0.4, 0.0]]).unwrap();
        assert_eq!(ranking_loss_value(&d, &[2], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ranking_penalizes_swapped_grades() {
        let ordered = Tensor2::from_rows(&[[0.1, 0.5, 0.9, 0.5, 0.1]]).unwrap();
        let base = ranking_loss_value(&ordered, &[2], 0.05).unwrap();
        assert_eq!(base, 0.0);
        let swapped = Tensor2::from_rows(&[[0.1, 0.9, 0.5, 0.5, 0.1]]).unwrap();
        assert!(ranking_loss_value(&swapped, &[2], 0.05).unwrap() > base);
    }

    #[test]
    fn zero_shot_tie_goes_to_smaller_grade() {
        let mut m = eye_model(5, 5);
        m.prompts = Tensor2::identity(5);
        let f = [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0, 0.0, 0.0];
        let s = m.semantic_vector(&f).unwrap();
        assert_eq!(s.d[0], s.d[1]);
        assert_eq!(argmax(&s.d), 0);
    }

    #[test]
    fn lambda_zero_is_contrastive_only() {
        let m = eye_model(3, 3);
        let x = Tensor2::from_fn(4, 4, |i, j| ((i * 4 + j) as f64 * 0.7).cos());
        let labels = [0, 2, 1, 2];
        let full = guidance_loss_value(&m, &x, &labels, 0.0, 0.05).unwrap();
        let f = m.encode_batch(&x).unwrap();
        let s = m.semantic_batch(&f).unwrap();
        let main = contrastive_loss_value(&s.d, &labels, m.logit_scale()).unwrap();
        assert_eq!(full, main);
    }

    #[test]
    fn frozen_weights_receive_no_gradient() {
        let m = eye_model(3, 3);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, Trainable::Adaptation);
        let x = tape.constant(Tensor2::from_fn(4, 4, |i, j| (i + 2 * j) as f64 * 0.1));
        let loss = guidance_loss(&mut tape, &vars, x, &[0, 1, 2, 1], 1.0, 0.05).unwrap();
        tape.backward(loss).unwrap();
        for v in [vars.w1, vars.b1, vars.w2, vars.b2] {
            assert!(!tape.requires_grad(v));
            assert!(tape.grad(v).is_none());
        }
        assert!(tape.grad(vars.prompts).is_some());
        assert!(tape.grad(vars.lora_b).is_some());
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let mut rng = rng::seeded(11);
        let mut m = GuidanceModel::init(GuidanceShape::new(6, 5, 2), 4.0, &mut rng).unwrap();
        m.adapter.b = Tensor2::from_fn(64, 2, |_, _| 0.1 * rng::normal(&mut rng));
        let x = Tensor2::from_fn(4, 6, |_, _| rng::normal(&mut rng));
        let labels = [0, 3, 4, 1];
        let points = [
            m.adapter.a.clone(),
            m.adapter.b.clone(),
            m.prompts.clone(),
            Tensor2::scalar(m.log_scale),
        ];
        let err = grad_check_many(
            |tape, p| {
                let mut vars = m.bind(tape, Trainable::Nothing);
                vars.lora_a = p[0];
                vars.lora_b = p[1];
                vars.prompts = p[2];
                vars.log_scale = p[3];
                let xv = tape.constant(x.clone());
                guidance_loss(tape, &vars, xv, &labels, 1.0, 0.05)
            },
            &points,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }
}
