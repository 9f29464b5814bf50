//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::field::Field;

/// Default central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Largest relative deviation between autodiff and central finite differences.
///
/// `build` must construct a scalar loss from leaves holding `inputs`, in order,
/// and be deterministic. Each input's deviation is
/// `‖g_ad − g_fd‖∞ / max(‖g_ad‖∞, ‖g_fd‖∞)`; the maximum over inputs is returned.
pub fn gradcheck<F>(inputs: &[Field], build: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |fields: &[Field]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = fields.iter().map(|f| tape.leaf(f.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;

    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let ad = grads.wrt(*var);
        let mut fd = vec![0.0; ad.len()];
        for (e, slot) in fd.iter_mut().enumerate() {
            let orig = probe[k].data()[e];
            probe[k].data_mut()[e] = orig + step;
            let (t, _, l) = eval(&probe)?;
            let plus = t.value(l).data()[0];
            probe[k].data_mut()[e] = orig - step;
            let (t, _, l) = eval(&probe)?;
            let minus = t.value(l).data()[0];
            probe[k].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let diff = ad
            .data()
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = ad.max_abs().max(fd.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}
