//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the loss forward on a frozen
//! graph, so it shares no code with the reverse pass it is checking.

use crate::{Graph, ParameterSet, Result, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all entries.
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// Parameter entry with the largest absolute disagreement.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.relative_error <= tol
    }
}

/// Compare reverse-mode gradients of `loss` against central differences with
/// step `h` for every parameter entry whose name satisfies `select`.
pub fn check_gradients(
    params: &ParameterSet,
    h: f64,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&mut Graph, &ParameterSet) -> Result<Var>,
) -> Result<GradCheck> {
    let mut entries = Vec::new();
    for name in params.names().filter(|n| select(n)) {
        let len = params.get(name)?.numel();
        entries.extend((0..len).map(|i| (name.to_string(), i)));
    }
    check_entries(params, h, &entries, loss)
}

/// Like [`check_gradients`] but only differences the listed `(name, index)`
/// entries. Useful for models too large to sweep exhaustively.
pub fn check_entries(
    params: &ParameterSet,
    h: f64,
    entries: &[(String, usize)],
    loss: impl Fn(&mut Graph, &ParameterSet) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    let analytic = g.backward(l, params)?;

    let eval = |ps: &ParameterSet| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, ps)?;
        Ok(g.value(l).item())
    };

    let mut work = params.clone();
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut worst: Option<(String, usize, f64, f64)> = None;
    for (name, i) in entries {
        let i = *i;
        let orig = params.get(name)?.data()[i];
        work.get_mut(name)?.data_mut()[i] = orig + h;
        let up = eval(&work)?;
        work.get_mut(name)?.data_mut()[i] = orig - h;
        let down = eval(&work)?;
        work.get_mut(name)?.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(name)?.data()[i];
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        let gap = (a - numeric).abs();
        if worst.as_ref().is_none_or(|w| gap > (w.2 - w.3).abs()) {
            worst = Some((name.clone(), i, a, numeric));
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let relative_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheck { relative_error, analytic_norm: a2.sqrt(), numeric_norm: n2.sqrt(), worst })
}
