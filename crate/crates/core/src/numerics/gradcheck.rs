use super::{NumericsError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` receives a fresh tape and the leaf holding the point; it must build a
/// scalar. Returns the maximum over coordinates of
/// `|autodiff - fd| / max(1, |fd|)`.
pub fn grad_check<F, E>(f: F, point: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let param = point.clone().with_grad();
    let mut tape = Tape::new();
    let x = tape.leaf(&param);
    let loss = f(&mut tape, x)?;
    let analytic = tape.backward(loss)?.wrt(x);

    let numeric = central_differences(&f, point, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Central-difference gradient of the scalar built by `f`, evaluated with
/// the point recorded as a constant (no reverse sweep involved).
pub fn central_differences<F, E>(f: &F, point: &Tensor, eps: f64) -> Result<Vec<f64>, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let eval = |t: &Tensor| -> Result<f64, E> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item()?)
    };
    let mut probe = point.clone();
    probe.set_requires_grad(false);
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}
