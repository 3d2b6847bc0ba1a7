//! Optimizers and training-time state: Adam, RAdam, warmup + cosine
//! learning-rate plans, global-norm gradient clipping and weight EMA.

use serde::{Deserialize, Serialize};

use crate::numkit::Tensor2;
use crate::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// First/second-moment accumulators shared by [`adam_step`] and
/// [`radam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor2>) -> Self {
        let m: Vec<Tensor2> = params
            .into_iter()
            .map(|p| Tensor2::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    fn check(&self, params: &[&mut Tensor2], grads: &[Tensor2], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            shapes_agree(p, g, "optimizer")?;
            shapes_agree(p, m, "optimizer")?;
        }
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(())
    }

    /// Advances the step counter and the moment estimates.
    fn accumulate(&mut self, grads: &[Tensor2]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
        }
    }
}

fn shapes_agree(a: &Tensor2, b: &Tensor2, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor2],
    grads: &[Tensor2],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.check(params, grads, lr)?;
    state.accumulate(grads);
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&state.m).zip(&state.v) {
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Length of the approximated simple moving average at `step`, and its
/// limit.
pub fn radam_rho(beta2: f64, step: u64) -> (f64, f64) {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(step as i32);
    (rho_inf - 2.0 * step as f64 * b2t / (1.0 - b2t), rho_inf)
}

/// Variance rectifier, `None` while the adaptive step is not yet trusted
/// (`rho_t <= 4`).
pub fn radam_rectifier(beta2: f64, step: u64) -> Option<f64> {
    let (rho, rho_inf) = radam_rho(beta2, step);
    (rho > 4.0).then(|| {
        (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
    })
}

/// Rectified Adam. Falls back to an un-adapted momentum step while the
/// second-moment estimate is unreliable.
pub fn radam_step(
    params: &mut [&mut Tensor2],
    grads: &[Tensor2],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.check(params, grads, lr)?;
    state.accumulate(grads);
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let rect = radam_rectifier(state.beta2, state.step);
    for ((p, m), v) in params.iter_mut().zip(&state.m).zip(&state.v) {
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / c1;
            *pi -= match rect {
                Some(r) => lr * r * m_hat / ((vi / c2).sqrt() + state.eps),
                None => lr * m_hat,
            };
        }
    }
    Ok(())
}

/// Per-epoch learning rate: linear warmup, then cosine annealing down to
/// `min_lr` at the last epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPlan {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config(format!(
                "need 0 < min_lr <= base_lr, got {} and {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.warmup_epochs > 0 && !(self.warmup_start_lr > 0.0) {
            return Err(Error::Config("warmup start lr must be > 0".into()));
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, plan: &LrPlan) -> Result<f64> {
    plan.validate()?;
    if epoch >= plan.total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside [0, {})",
            plan.total_epochs
        )));
    }
    let w = plan.warmup_epochs;
    if epoch < w {
        let frac = epoch as f64 / w as f64;
        return Ok(plan.warmup_start_lr + (plan.base_lr - plan.warmup_start_lr) * frac);
    }
    let span = plan.total_epochs - 1 - w;
    let progress = if span == 0 {
        0.0
    } else {
        (epoch - w) as f64 / span as f64
    };
    if progress == 1.0 {
        return Ok(plan.min_lr);
    }
    let cos = (std::f64::consts::PI * progress).cos();
    Ok(plan.min_lr + 0.5 * (plan.base_lr - plan.min_lr) * (1.0 + cos))
}

/// Exponential moving average of a parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: Vec<Tensor2>,
    pub mu: f64,
}

impl EmaState {
    pub fn new(params: &[&Tensor2], mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {mu}")));
        }
        Ok(Self {
            shadow: params.iter().map(|p| (*p).clone()).collect(),
            mu,
        })
    }
}

/// `shadow <- mu * shadow + (1 - mu) * params`.
pub fn ema_update(ema: &mut EmaState, params: &[&Tensor2]) -> Result<()> {
    if params.len() != ema.shadow.len() {
        return Err(Error::Contract(format!(
            "EMA tracks {} tensors, got {}",
            ema.shadow.len(),
            params.len()
        )));
    }
    for (s, p) in ema.shadow.iter().zip(params) {
        shapes_agree(s, p, "ema_update")?;
    }
    let mu = ema.mu;
    for (s, p) in ema.shadow.iter_mut().zip(params) {
        for (si, &pi) in s.data_mut().iter_mut().zip(p.data()) {
            *si = mu * *si + (1.0 - mu) * pi;
        }
    }
    Ok(())
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm measured before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor2], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be > 0, got {max_norm}")));
    }
    let total = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let c = max_norm / total;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> Vec<Tensor2> {
        vec![Tensor2::scalar(v)]
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        for radam in [false, true] {
            let mut p = vec![Tensor2::from_rows(&[[1.5, -2.0]]).unwrap()];
            let before = p.clone();
            let mut st = AdamState::new(&p);
            for _ in 0..50 {
                let g = vec![Tensor2::zeros(1, 2)];
                let mut refs: Vec<&mut Tensor2> = p.iter_mut().collect();
                if radam {
                    radam_step(&mut refs, &g, &mut st, 0.1).unwrap();
                } else {
                    adam_step(&mut refs, &g, &mut st, 0.1).unwrap();
                }
            }
            assert_eq!(p, before);
            assert_eq!(st.step, 50);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor2::from_rows(&[[0.0, 0.0, 0.0]]).unwrap()];
        let g = vec![Tensor2::from_rows(&[[3.0, -0.001, 250.0]]).unwrap()];
        let mut st = AdamState::new(&p);
        let mut refs: Vec<&mut Tensor2> = p.iter_mut().collect();
        adam_step(&mut refs, &g, &mut st, 0.01).unwrap();
        for (v, gi) in p[0].data().iter().zip(g[0].data()) {
            assert!((v.abs() - 0.01).abs() < 1e-6, "{v}");
            assert_eq!(v.signum(), -gi.signum());
        }
    }

    #[test]
    fn radam_first_step_is_unadapted() {
        let (rho1, rho_inf) = radam_rho(0.999, 1);
        assert!((rho_inf - 1999.0).abs() < 1e-9);
        assert!((rho1 - 1.0).abs() < 1e-9);
        assert!(radam_rectifier(0.999, 1).is_none());

        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p);
        let mut refs: Vec<&mut Tensor2> = p.iter_mut().collect();
        radam_step(&mut refs, &scalar_params(0.5), &mut st, 0.1).unwrap();
        // m_hat = g on the first step
        assert!((p[0].item() - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn radam_rectifier_tends_to_one() {
        let late = radam_rectifier(0.999, 1_000_000).unwrap();
        assert!((late - 1.0).abs() < 1e-3);
        let first = (1..100).find(|&t| radam_rectifier(0.999, t).is_some()).unwrap();
        assert!(first > 4, "rectified branch starts at step {first}");
    }

    #[test]
    fn ema_degenerate_decays() {
        let p = Tensor2::row_vector(&[1.0, 2.0]);
        let mut e = EmaState::new(&[&Tensor2::zeros(1, 2)], 0.0).unwrap();
        ema_update(&mut e, &[&p]).unwrap();
        assert_eq!(e.shadow[0], p);

        let mut e = EmaState::new(&[&Tensor2::zeros(1, 2)], 1.0).unwrap();
        ema_update(&mut e, &[&p]).unwrap();
        assert_eq!(e.shadow[0].data(), &[0.0, 0.0]);

        let mut e = EmaState::new(&[&Tensor2::scalar(0.0)], 0.5).unwrap();
        ema_update(&mut e, &[&Tensor2::scalar(1.0)]).unwrap();
        assert_eq!(e.shadow[0].item(), 0.5);

        assert!(EmaState::new(&[&p], 1.5).is_err());
        assert!(ema_update(&mut e, &[&p]).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor2::row_vector(&[3.0, 4.0])];
        let n = clip_grad_norm(&mut g, 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15 && (g[0].get(0, 1) - 0.8).abs() < 1e-15);

        let orig = vec![Tensor2::row_vector(&[0.1, -0.2]), Tensor2::scalar(0.3)];
        let mut g = orig.clone();
        clip_grad_norm(&mut g, 1.0).unwrap();
        assert_eq!(g, orig);

        assert!(matches!(clip_grad_norm(&mut g, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn lr_plan_rejects_bad_configuration() {
        let plan = LrPlan {
            base_lr: 1e-3,
            min_lr: 1e-2,
            warmup_start_lr: 1e-5,
            warmup_epochs: 1,
            total_epochs: 5,
        };
        assert!(lr_at(0, &plan).is_err());
        let plan = LrPlan {
            min_lr: 1e-5,
            ..plan
        };
        assert!(lr_at(4, &plan).is_ok());
        assert!(matches!(lr_at(5, &plan), Err(Error::Contract(_))));
    }
}
