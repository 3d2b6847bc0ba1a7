use super::{Tape, Tensor2, Var};
use crate::{Error, Result};

/// Maximum relative disagreement between tape gradients and central
/// differences `(f(x+h) - f(x-h)) / 2h`, over every coordinate of every
/// point. Relative error is `|auto - fd| / max(1, |auto|, |fd|)`.
///
/// `f` receives a fresh tape and one trainable leaf per point and must
/// return a `1 x 1` value.
pub fn grad_check_many<F>(f: F, points: &[Tensor2], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step h must be > 0, got {h}")));
    }
    let eval = |pts: &[Tensor2]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if eval(points)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "function under check is not deterministic".into(),
        ));
    }
    tape.backward(out)?;

    let mut worst = 0.0_f64;
    let mut probe = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let auto = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(points[pi].rows(), points[pi].cols()));
        for c in 0..points[pi].len() {
            let x0 = points[pi].data()[c];
            probe[pi].data_mut()[c] = x0 + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[c] = x0 - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[c] = x0;
            let fd = (up - down) / (2.0 * h);
            let a = auto.data()[c];
            let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-point form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor2, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), h)
}
