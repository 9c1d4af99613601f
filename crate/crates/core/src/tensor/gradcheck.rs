use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<'a, F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape<'a>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let y = f(&tape, xv)?;
    let value = tape.value(y).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("f(x) = {value}")));
    }
    Ok(value)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - fd_i| / (|fd_i| + 1e-12)`.
pub fn grad_check<'a, F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape<'a>, Var) -> Result<Var>,
{
    if !x.is_finite() {
        return Err(Error::Numeric("grad_check input is not finite".into()));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = f(&tape, xv)?;
        let value = tape.value(y).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("f(x) = {value}")));
        }
        tape.gradients(y, &[xv])?.into_vec().remove(0)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let fd = (up - down) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
