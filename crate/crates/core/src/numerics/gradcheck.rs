use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

/// Compares tape gradients with central differences over every scalar of every
/// parameter in `params`.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &ParamStore, h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape, p)?;
        let v = tape.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteObjective)
        }
    };

    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grads = tape.backward(out)?;

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        for e in 0..params.get(id).len() {
            let base = params.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = base + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = base - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = base;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[e]);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
