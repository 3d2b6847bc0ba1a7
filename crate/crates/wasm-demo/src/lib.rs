//! Browser bindings for three small views of the label diffusion:
//! the noise schedule, the forward marginal of one grade, and reverse
//! chains driven by the exact (oracle) denoiser.
//!
//! Label vectors live in R^5. For drawing, grade `j` is placed on the
//! `j`-th vertex of a regular pentagon and a vector `y` is drawn at
//! `sum_j y_j v_j`.

use cgsd::diffusion::{forward_sample, make_schedule, run_chains, ChainPlan, Conditioning, NoiseSchedule, OracleDenoiser};
use cgsd::numkit::Tensor2;
use cgsd::rng;
use wasm_bindgen::prelude::*;

pub const K: usize = 5;

fn vertex(j: usize) -> (f64, f64) {
    let a = std::f64::consts::FRAC_PI_2 - 2.0 * std::f64::consts::PI * j as f64 / K as f64;
    (a.cos(), a.sin())
}

pub fn project(y: &[f64]) -> (f64, f64) {
    y.iter().enumerate().fold((0.0, 0.0), |(x, z), (j, v)| {
        let (vx, vz) = vertex(j);
        (x + v * vx, z + v * vz)
    })
}

fn one_hot(grade: usize) -> Vec<f64> {
    (0..K).map(|j| if j == grade { 1.0 } else { 0.0 }).collect()
}

/// Prior `y_hat0`: weight `confidence` on `guess`, the rest spread evenly.
pub fn prior(guess: usize, confidence: f64) -> cgsd::Result<Vec<f64>> {
    if guess >= K || !(0.0..=1.0).contains(&confidence) {
        return Err(cgsd::Error::Config(format!("prior: guess {guess}, confidence {confidence}")));
    }
    let rest = (1.0 - confidence) / (K - 1) as f64;
    Ok((0..K).map(|j| if j == guess { confidence } else { rest }).collect())
}

fn schedule(t_total: usize) -> cgsd::Result<NoiseSchedule> {
    let scale = 1000.0 / t_total as f64;
    make_schedule(t_total, 1e-4 * scale, 0.02 * scale)
}

/// `[beta_1..beta_T, alpha_bar_1..alpha_bar_T]`.
pub fn schedule_curves_impl(t_total: usize) -> cgsd::Result<Vec<f64>> {
    let s = schedule(t_total)?;
    Ok(s.beta.iter().chain(&s.alpha_bar[1..]).copied().collect())
}

/// `n` draws of `y_t` for true `grade`, flattened as `[x0, y0, x1, y1, ...]`.
pub fn forward_cloud_impl(
    t_total: usize,
    grade: usize,
    guess: usize,
    confidence: f64,
    t: usize,
    n: usize,
    seed: u64,
) -> cgsd::Result<Vec<f64>> {
    let s = schedule(t_total)?;
    let p = prior(guess, confidence)?;
    if grade >= K {
        return Err(cgsd::Error::Config(format!("grade {grade} out of range")));
    }
    let y0 = one_hot(grade);
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let eps = rng::normal_vec(&mut r, K);
        let (x, z) = project(&forward_sample(&y0, &p, t, &eps, &s)?);
        out.extend([x, z]);
    }
    Ok(out)
}

/// Reverse chains with the oracle denoiser for `grade`. Each visited step
/// contributes `[t, x_0, y_0, ..., x_{n-1}, y_{n-1}]`.
pub fn reverse_paths_impl(
    t_total: usize,
    grade: usize,
    guess: usize,
    confidence: f64,
    n_chains: usize,
    stride: usize,
    seed: u64,
) -> cgsd::Result<Vec<f64>> {
    let sched = schedule(t_total)?;
    let p = prior(guess, confidence)?;
    if grade >= K || n_chains == 0 {
        return Err(cgsd::Error::Config(format!("grade {grade}, {n_chains} chains")));
    }
    let plan = ChainPlan::strided(&sched, stride)?;
    let oracle = OracleDenoiser {
        y0: Tensor2::row_vector(&one_hot(grade)),
        sched: sched.clone(),
    };
    let cond = Conditioning {
        f: Tensor2::zeros(n_chains, 1),
        d: Tensor2::zeros(n_chains, 1),
        prior: Tensor2::from_rows(&vec![p; n_chains])?,
    };
    let mut rngs: Vec<_> = (0..n_chains as u64).map(|c| rng::substream(seed, &[c])).collect();
    let mut out = Vec::new();
    run_chains(&oracle, &cond, &sched, &plan, &mut rngs, |t, y| {
        out.push(t as f64);
        for i in 0..y.rows() {
            let (x, z) = project(y.row(i));
            out.extend([x, z]);
        }
    })?;
    Ok(out)
}

fn js<T>(r: cgsd::Result<T>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn schedule_curves(t_total: usize) -> Result<Vec<f64>, JsError> {
    js(schedule_curves_impl(t_total))
}

#[wasm_bindgen]
pub fn forward_cloud(
    t_total: usize,
    grade: usize,
    guess: usize,
    confidence: f64,
    t: usize,
    n: usize,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    js(forward_cloud_impl(t_total, grade, guess, confidence, t, n, seed as u64))
}

#[wasm_bindgen]
pub fn reverse_paths(
    t_total: usize,
    grade: usize,
    guess: usize,
    confidence: f64,
    n_chains: usize,
    stride: usize,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    js(reverse_paths_impl(t_total, grade, guess, confidence, n_chains, stride, seed as u64))
}
