//! Label-space diffusion whose forward process drifts from the one-hot label
//! toward a prior `y_hat0` instead of toward zero:
//!
//! `y_t = sqrt(ab_t) y0 + (1 - sqrt(ab_t)) y_hat0 + sqrt(1 - ab_t) eps`
//!
//! The noise predictor sees `[f | y_t | y_hat0 | d | temb(t)]`. Sampling
//! starts at `y_T ~ N(y_hat0, I)` and walks the Gaussian posterior back to
//! `t = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::guidance::BatchSemantics;
use crate::numkit::{argmax, ops, Tape, Tensor2, Var};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Conditioning rows fed to the noise predictor: unit features `f`,
/// similarities `d` and the prior.
pub type Conditioning = BatchSemantics;

pub const TIME_EMBED_DIM: usize = 64;
pub const DEFAULT_SAMPLES: usize = 5;

/// Linear beta schedule with cumulative products; `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// `beta[t - 1]` is `beta_t`.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Indexed `0..=T`.
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_total: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_total == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = if t_total == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (t_total - 1) as f64;
        (0..t_total).map(|i| beta_start + i as f64 * step).collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_total + 1);
    alpha_bar.push(1.0);
    for a in &alpha {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * a);
    }
    Ok(NoiseSchedule {
        t_total,
        beta_start,
        beta_end,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// `T = 1000`, beta from `1e-4` to `0.02`.
    pub fn reference() -> Self {
        make_schedule(1000, 1e-4, 0.02).expect("valid reference schedule")
    }

    /// Shortened schedule for quick runs: `T = 100` with the beta range
    /// scaled by `1000 / T` so the total noise level matches the reference.
    pub fn desk() -> Self {
        make_schedule(100, 1e-3, 0.2).expect("valid desk schedule")
    }

    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_t(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_total {
            return Err(Error::Index {
                index: t,
                lo: 1,
                hi: self.t_total,
            });
        }
        Ok(())
    }
}

/// Forward marginal at an explicit `alpha_bar` value.
pub fn forward_sample_at(y0: &[f64], y_hat0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let s = alpha_bar.sqrt();
    let n = (1.0 - alpha_bar).sqrt();
    y0.iter()
        .zip(y_hat0)
        .zip(eps)
        .map(|((&y, &p), &e)| s * y + (1.0 - s) * p + n * e)
        .collect()
}

/// Draws from `q(y_t | y0)` with caller-provided noise.
pub fn forward_sample(
    y0: &[f64],
    y_hat0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len(y0.len(), &[y_hat0.len(), eps.len()])?;
    Ok(forward_sample_at(y0, y_hat0, sched.alpha_bar[t], eps))
}

fn check_len(k: usize, others: &[usize]) -> Result<()> {
    if let Some(&bad) = others.iter().find(|&&n| n != k) {
        return Err(Error::Dimension {
            op: "label vector",
            lhs: (1, k),
            rhs: (1, bad),
        });
    }
    Ok(())
}

/// Interleaved `(sin, cos)` pairs at geometric frequencies
/// `t / 10000^(2i / dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dim must be even and > 0, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let phase = t as f64 * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

/// `y0_tilde = (y_t - (1 - sqrt(ab)) y_hat0 - sqrt(1 - ab) eps_hat) / sqrt(ab)`.
pub fn predict_y0(
    y_t: &[f64],
    eps_hat: &[f64],
    y_hat0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len(y_t.len(), &[eps_hat.len(), y_hat0.len()])?;
    Ok(predict_y0_unchecked(y_t, eps_hat, y_hat0, sched.alpha_bar[t]))
}

fn predict_y0_unchecked(y_t: &[f64], eps_hat: &[f64], y_hat0: &[f64], alpha_bar: f64) -> Vec<f64> {
    let s = alpha_bar.sqrt();
    let n = (1.0 - alpha_bar).sqrt();
    y_t.iter()
        .zip(eps_hat)
        .zip(y_hat0)
        .map(|((&y, &e), &p)| (y - (1.0 - s) * p - n * e) / s)
        .collect()
}

/// Coefficients of `q(y_prev | y_t, y0)`:
/// `mean = gamma0 y0 + gamma1 y_t + gamma2 y_hat0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefs {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub var: f64,
}

/// Posterior coefficients for a jump from `t` to an earlier `t_prev`.
/// With `t_prev = t - 1` this is the single-step posterior.
pub fn posterior_coefs_between(
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<PosteriorCoefs> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Index {
            index: t_prev,
            lo: 0,
            hi: t - 1,
        });
    }
    if t_prev == 0 {
        // alpha_bar[0] = 1: the last step returns the clean estimate.
        return Ok(PosteriorCoefs {
            gamma0: 1.0,
            gamma1: 0.0,
            gamma2: 0.0,
            var: 0.0,
        });
    }
    let ab_t = sched.alpha_bar[t];
    let ab_p = sched.alpha_bar[t_prev];
    // Effective single-step alpha/beta over the jump.
    let (a, b) = if t_prev + 1 == t {
        (sched.alpha_t(t), sched.beta_t(t))
    } else {
        let a = ab_t / ab_p;
        (a, 1.0 - a)
    };
    let denom = 1.0 - ab_t;
    let gamma0 = b * ab_p.sqrt() / denom;
    let gamma1 = (1.0 - ab_p) * a.sqrt() / denom;
    let gamma2 = 1.0 + (ab_t.sqrt() - 1.0) * (a.sqrt() + ab_p.sqrt()) / denom;
    let var = b * (1.0 - ab_p) / denom;
    Ok(PosteriorCoefs {
        gamma0,
        gamma1,
        gamma2,
        var,
    })
}

pub fn posterior_coefs(t: usize, sched: &NoiseSchedule) -> Result<PosteriorCoefs> {
    posterior_coefs_between(t, t.saturating_sub(1), sched)
}

/// Mean and variance of `q(y_{t-1} | y_t, y0_tilde)`.
pub fn posterior_params(
    y_t: &[f64],
    y0_tilde: &[f64],
    y_hat0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Vec<f64>, f64)> {
    let c = posterior_coefs(t, sched)?;
    check_len(y_t.len(), &[y0_tilde.len(), y_hat0.len()])?;
    Ok((posterior_mean(&c, y_t, y0_tilde, y_hat0), c.var))
}

fn posterior_mean(c: &PosteriorCoefs, y_t: &[f64], y0: &[f64], y_hat0: &[f64]) -> Vec<f64> {
    y_t.iter()
        .zip(y0)
        .zip(y_hat0)
        .map(|((&yt, &y), &p)| c.gamma0 * y + c.gamma1 * yt + c.gamma2 * p)
        .collect()
}

/// Anything that predicts the injected noise for a batch of noisy labels.
pub trait EpsModel: Sync {
    /// `y_t` and `cond` have one row per sample; `t[i]` is row `i`'s step.
    fn predict(&self, cond: &Conditioning, y_t: &Tensor2, t: &[usize]) -> Result<Tensor2>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub weight: Tensor2,
    /// `1 x out`
    pub bias: Tensor2,
}

/// Fully connected noise predictor over the concatenated conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    pub feature_dim: usize,
    pub k: usize,
    pub temb_dim: usize,
    /// Two smooth hidden layers followed by a linear head.
    pub layers: Vec<Linear>,
}

impl DenoiserNet {
    /// Default widths: hidden `(128, 128)`, 64-dim time embedding, zero
    /// output head.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, k: usize, rng: &mut R) -> Result<Self> {
        Self::with_widths(feature_dim, k, [128, 128], TIME_EMBED_DIM, rng)
    }

    pub fn with_widths<R: Rng + ?Sized>(
        feature_dim: usize,
        k: usize,
        hidden: [usize; 2],
        temb_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k < 2 || feature_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("invalid denoiser widths".into()));
        }
        if temb_dim == 0 || temb_dim % 2 != 0 {
            return Err(Error::Config(format!("time embedding dim must be even, got {temb_dim}")));
        }
        let d_in = feature_dim + 3 * k + temb_dim;
        let mut layer = |fan_in: usize, fan_out: usize, zero: bool| {
            let s = (2.0 / fan_in as f64).sqrt();
            Linear {
                weight: Tensor2::from_fn(fan_out, fan_in, |_, _| {
                    if zero {
                        0.0
                    } else {
                        s * rng::normal(rng)
                    }
                }),
                bias: Tensor2::zeros(1, fan_out),
            }
        };
        let layers = vec![
            layer(d_in, hidden[0], false),
            layer(hidden[0], hidden[1], false),
            layer(hidden[1], k, true),
        ];
        Ok(Self {
            feature_dim,
            k,
            temb_dim,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + 3 * self.k + self.temb_dim
    }

    /// Human-readable description of the input concatenation.
    pub fn layout(&self) -> String {
        format!(
            "f({})|y_t({})|y_hat0({})|d({})|temb({})",
            self.feature_dim, self.k, self.k, self.k, self.temb_dim
        )
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut fan_in = self.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.cols() != fan_in || l.bias.shape() != (1, l.weight.rows()) {
                return Err(Error::Config(format!("denoiser layer {i} has inconsistent shape")));
            }
            fan_in = l.weight.rows();
        }
        if self.layers.is_empty() || fan_in != self.k {
            return Err(Error::Config("denoiser head must output k values".into()));
        }
        Ok(())
    }

    /// Binds every weight to the tape (trainable when `train`).
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if train {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Builds the `[f | y_t | y_hat0 | d | temb]` rows.
    pub fn assemble_input(&self, cond: &Conditioning, y_t: &Tensor2, t: &[usize]) -> Result<Tensor2> {
        let b = y_t.rows();
        let shapes_ok = cond.f.shape() == (b, self.feature_dim)
            && cond.d.shape() == (b, self.k)
            && cond.prior.shape() == (b, self.k)
            && y_t.cols() == self.k
            && t.len() == b;
        if !shapes_ok {
            return Err(Error::Contract(format!(
                "conditioning does not match layout {} for {b} rows",
                self.layout()
            )));
        }
        let mut data = Vec::with_capacity(b * self.input_dim());
        let mut cached: Option<(usize, Vec<f64>)> = None;
        for i in 0..b {
            data.extend_from_slice(cond.f.row(i));
            data.extend_from_slice(y_t.row(i));
            data.extend_from_slice(cond.prior.row(i));
            data.extend_from_slice(cond.d.row(i));
            let emb = match &cached {
                Some((ct, e)) if *ct == t[i] => e,
                _ => {
                    let e = timestep_embedding(t[i], self.temb_dim)?;
                    &cached.insert((t[i], e)).1
                }
            };
            data.extend_from_slice(emb);
        }
        Tensor2::new(b, self.input_dim(), data)
    }

    /// Forward pass on the tape; `weights` come from [`DenoiserNet::bind`].
    pub fn forward(&self, tape: &mut Tape, weights: &[Var], input: Var) -> Result<Var> {
        let mut h = input;
        let n = weights.len() / 2;
        for i in 0..n {
            h = tape.matmul_t(h, weights[2 * i])?;
            h = tape.add_row_bias(h, weights[2 * i + 1])?;
            if i + 1 < n {
                h = tape.smooth(h);
            }
        }
        Ok(h)
    }
}

impl EpsModel for DenoiserNet {
    fn predict(&self, cond: &Conditioning, y_t: &Tensor2, t: &[usize]) -> Result<Tensor2> {
        let input = self.assemble_input(cond, y_t, t)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let x = tape.constant(input);
        let out = self.forward(&mut tape, &w, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Single-sample noise prediction.
pub fn eps_predict(
    net: &DenoiserNet,
    f: &[f64],
    y_t: &[f64],
    y_hat0: &[f64],
    d: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let cond = single_conditioning(f, d, y_hat0);
    Ok(net.predict(&cond, &Tensor2::row_vector(y_t), &[t])?.into_data())
}

pub fn single_conditioning(f: &[f64], d: &[f64], y_hat0: &[f64]) -> Conditioning {
    Conditioning {
        f: Tensor2::row_vector(f),
        d: Tensor2::row_vector(d),
        prior: Tensor2::row_vector(y_hat0),
    }
}

/// A sampled timestep and noise vector for one training item.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, sched: &NoiseSchedule, k: usize) -> Self {
        let t = rng.random_range(1..=sched.t_total);
        Self {
            t,
            eps: rng::normal_vec(rng, k),
        }
    }

    /// Draw owned by `item` under `(seed, keys...)`, independent of batch
    /// position.
    pub fn for_item(seed: u64, keys: &[u64], item: u64, sched: &NoiseSchedule, k: usize) -> Self {
        let mut path = keys.to_vec();
        path.push(item);
        Self::sample(&mut rng::substream(seed, &path), sched, k)
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor2 {
    Tensor2::from_fn(labels.len(), k, |i, j| (labels[i] == j) as i32 as f64)
}

/// Noisy labels `y_t` for a batch of draws.
pub fn noisy_labels(
    y0: &Tensor2,
    prior: &Tensor2,
    draws: &[NoiseDraw],
    sched: &NoiseSchedule,
) -> Result<Tensor2> {
    y0.same_shape(prior, "noisy_labels")?;
    if draws.len() != y0.rows() {
        return Err(Error::Contract(format!("{} draws for {} items", draws.len(), y0.rows())));
    }
    let mut rows = Vec::with_capacity(y0.rows());
    for (i, dr) in draws.iter().enumerate() {
        rows.push(forward_sample(y0.row(i), prior.row(i), dr.t, &dr.eps, sched)?);
    }
    Tensor2::from_rows(&rows)
}

/// Mean over items and label coordinates of `(eps - eps_hat)^2`, recorded
/// on the tape for training.
pub fn epsilon_loss(
    tape: &mut Tape,
    net: &DenoiserNet,
    weights: &[Var],
    cond: &Conditioning,
    labels: &[usize],
    draws: &[NoiseDraw],
    sched: &NoiseSchedule,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Contract("empty diffusion batch".into()));
    }
    let y0 = one_hot(labels, net.k);
    let y_t = noisy_labels(&y0, &cond.prior, draws, sched)?;
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let input = tape.constant(net.assemble_input(cond, &y_t, &ts)?);
    let eps = tape.constant(Tensor2::from_rows(&draws.iter().map(|d| &d.eps[..]).collect::<Vec<_>>())?);
    let eps_hat = net.forward(tape, weights, input)?;
    let diff = tape.sub(eps, eps_hat)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Noise-prediction loss for any [`EpsModel`], drawing `(t, eps)` per item
/// in order from `rng`.
pub fn epsilon_loss_value<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &Conditioning,
    labels: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let k = cond.prior.cols();
    let draws: Vec<NoiseDraw> = labels.iter().map(|_| NoiseDraw::sample(rng, sched, k)).collect();
    epsilon_loss_with_draws(model, cond, labels, &draws, sched)
}

pub fn epsilon_loss_with_draws<M: EpsModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    labels: &[usize],
    draws: &[NoiseDraw],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("empty diffusion batch".into()));
    }
    let k = cond.prior.cols();
    let y0 = one_hot(labels, k);
    let y_t = noisy_labels(&y0, &cond.prior, draws, sched)?;
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let eps_hat = model.predict(cond, &y_t, &ts)?;
    let mut total = 0.0;
    for (i, d) in draws.iter().enumerate() {
        for (e, h) in d.eps.iter().zip(eps_hat.row(i)) {
            total += (e - h) * (e - h);
        }
    }
    Ok(total / (labels.len() * k) as f64)
}

/// Descending timesteps visited by a sampler, ending at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainPlan {
    steps: Vec<usize>,
}

impl ChainPlan {
    /// Every step `T, T-1, ..., 1, 0`.
    pub fn full(sched: &NoiseSchedule) -> Self {
        Self {
            steps: (0..=sched.t_total).rev().collect(),
        }
    }

    /// `T, T-s, ..., 0` (the last jump may be shorter than `s`).
    pub fn strided(sched: &NoiseSchedule, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        let mut steps: Vec<usize> = (0..=sched.t_total).rev().step_by(stride).collect();
        if *steps.last().unwrap() != 0 {
            steps.push(0);
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }
}

/// One reverse step for a batch of chains, each with its own stream.
/// Row `i` of the result depends only on row `i` of the inputs and
/// `rngs[i]`.
pub fn reverse_step_batch<M: EpsModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    y_t: &Tensor2,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rngs: &mut [StreamRng],
) -> Result<Tensor2> {
    let coefs = posterior_coefs_between(t, t_prev, sched)?;
    if rngs.len() != y_t.rows() {
        return Err(Error::Contract(format!("{} streams for {} chains", rngs.len(), y_t.rows())));
    }
    let eps_hat = model.predict(cond, y_t, &vec![t; y_t.rows()])?;
    let ab = sched.alpha_bar[t];
    let sd = coefs.var.sqrt();
    let mut out = Tensor2::zeros(y_t.rows(), y_t.cols());
    for (i, rng) in rngs.iter_mut().enumerate() {
        let prior = cond.prior.row(i);
        let y0 = predict_y0_unchecked(y_t.row(i), eps_hat.row(i), prior, ab);
        let mean = posterior_mean(&coefs, y_t.row(i), &y0, prior);
        let row = out.row_mut(i);
        for (o, m) in row.iter_mut().zip(mean) {
            *o = if coefs.var > 0.0 { m + sd * rng::normal(rng) } else { m };
        }
    }
    Ok(out)
}

/// Single-chain reverse step from `t` to `t - 1`.
pub fn reverse_step<M: EpsModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    y_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut rngs = [rng.clone()];
    let out = reverse_step_batch(model, cond, &Tensor2::row_vector(y_t), t, t - 1, sched, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_data())
}

/// Runs a batch of chains from `y_T = y_hat0 + z` down to 0 along `plan`,
/// calling `observe(t, y_t)` at every visited step (including `T` and 0).
pub fn run_chains<M: EpsModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    plan: &ChainPlan,
    rngs: &mut [StreamRng],
    mut observe: impl FnMut(usize, &Tensor2),
) -> Result<Tensor2> {
    let steps = plan.steps();
    if steps.first() != Some(&sched.t_total) || steps.last() != Some(&0) {
        return Err(Error::Config("chain plan must run from T to 0".into()));
    }
    let k = cond.prior.cols();
    let mut y = Tensor2::zeros(cond.prior.rows(), k);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for (o, p) in y.row_mut(i).iter_mut().zip(cond.prior.row(i)) {
            *o = p + rng::normal(rng);
        }
    }
    observe(sched.t_total, &y);
    for w in steps.windows(2) {
        y = reverse_step_batch(model, cond, &y, w[0], w[1], sched, rngs)?;
        observe(w[1], &y);
    }
    Ok(y)
}

/// One full reverse chain for a single conditioning row.
pub fn sample_chain<M: EpsModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut rngs = [rng.clone()];
    let out = run_chains(model, cond, sched, &ChainPlan::full(sched), &mut rngs, |_, _| {})?;
    *rng = rngs[0].clone();
    Ok(out.into_data())
}

/// Label decision from several averaged chains.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub grade: usize,
    /// Average of the raw final chain vectors.
    pub mean_vector: Vec<f64>,
    /// `softmax(mean_vector)`, for reporting.
    pub mean_probs: Vec<f64>,
}

/// Averages `n_samples` chains per conditioning row. Chain `s` of item
/// `items[i]` uses the stream `(seed, items[i], s)`, so results do not
/// depend on how items are batched.
pub fn infer_batch<M: EpsModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    items: &[u64],
    sched: &NoiseSchedule,
    plan: &ChainPlan,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Inference>> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let b = cond.prior.rows();
    if items.len() != b {
        return Err(Error::Contract(format!("{} item ids for {b} rows", items.len())));
    }
    let rep = |t: &Tensor2| {
        Tensor2::from_fn(b * n_samples, t.cols(), |r, c| t.get(r / n_samples, c))
    };
    let expanded = Conditioning {
        f: rep(&cond.f),
        d: rep(&cond.d),
        prior: rep(&cond.prior),
    };
    let mut rngs: Vec<StreamRng> = (0..b * n_samples)
        .map(|r| rng::substream(seed, &[items[r / n_samples], (r % n_samples) as u64]))
        .collect();
    let finals = run_chains(model, &expanded, sched, plan, &mut rngs, |_, _| {})?;
    let k = cond.prior.cols();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut mean = vec![0.0; k];
        for s in 0..n_samples {
            for (m, v) in mean.iter_mut().zip(finals.row(i * n_samples + s)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_samples as f64);
        let mut probs = mean.clone();
        ops::softmax_in_place(&mut probs);
        out.push(Inference {
            grade: argmax(&mean),
            mean_vector: mean,
            mean_probs: probs,
        });
    }
    Ok(out)
}

/// Single-item form of [`infer_batch`] over the full chain.
pub fn infer_label<M: EpsModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    n_samples: usize,
    seed: u64,
    item: u64,
) -> Result<Inference> {
    let plan = ChainPlan::full(sched);
    Ok(infer_batch(model, cond, &[item], sched, &plan, n_samples, seed)?.remove(0))
}

/// Noise predictor that knows the true clean labels and inverts the forward
/// process exactly. Used to validate samplers.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub y0: Tensor2,
    pub sched: NoiseSchedule,
}

impl EpsModel for OracleDenoiser {
    fn predict(&self, cond: &Conditioning, y_t: &Tensor2, t: &[usize]) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(y_t.rows(), y_t.cols());
        for i in 0..y_t.rows() {
            let ab = self.sched.alpha_bar[t[i]];
            let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            let y0 = self.y0.row(i % self.y0.rows());
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (y_t.get(i, j) - s * y0[j] - (1.0 - s) * cond.prior.get(i, j)) / n;
            }
        }
        Ok(out)
    }
}
