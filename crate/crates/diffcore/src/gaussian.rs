//! Diagonal-Gaussian likelihood, divergence and entropy terms, both as
//! differentiable graph expressions and as plain `f64` reference formulas.

use std::f64::consts::{E, PI};

use crate::{shape_err, Graph, Result, Var};

pub fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

/// Per-row negative log-likelihood `0.5 Σ [(x−μ)² e^{−v} + v + ln 2π]`,
/// `[n, d] -> [n, 1]`.
pub fn diag_nll_rows(g: &mut Graph, x: Var, mean: Var, log_var: Var) -> Result<Var> {
    if g.shape(x) != g.shape(mean) || g.shape(x) != g.shape(log_var) {
        return Err(shape_err(
            "gaussian_diag_nll",
            format!("x {:?}, mean {:?}, log_var {:?}", g.shape(x), g.shape(mean), g.shape(log_var)),
        ));
    }
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff);
    let neg = g.neg(log_var);
    let prec = g.exp(neg);
    let weighted = g.mul(sq, prec)?;
    let terms = g.add(weighted, log_var)?;
    let terms = g.add_scalar(terms, ln_2pi());
    let rows = g.row_sum(terms);
    Ok(g.scale(rows, 0.5))
}

/// Total negative log-likelihood over every element (a scalar).
pub fn diag_nll(g: &mut Graph, x: Var, mean: Var, log_var: Var) -> Result<Var> {
    let rows = diag_nll_rows(g, x, mean, log_var)?;
    Ok(g.sum(rows))
}

/// Per-row `KL(N(μ_q, e^{v_q}) ‖ N(μ_p, e^{v_p}))`, `[n, d] -> [n, 1]`.
pub fn diag_kl_rows(g: &mut Graph, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Result<Var> {
    let diff = g.sub(mu_q, mu_p)?;
    let sq = g.square(diff);
    let var_q = g.exp(lv_q);
    let num = g.add(var_q, sq)?;
    let neg_p = g.neg(lv_p);
    let inv_p = g.exp(neg_p);
    let ratio = g.mul(num, inv_p)?;
    let dlv = g.sub(lv_p, lv_q)?;
    let t = g.add(dlv, ratio)?;
    let t = g.add_scalar(t, -1.0);
    let rows = g.row_sum(t);
    Ok(g.scale(rows, 0.5))
}

/// Reference value of the diagonal NLL.
pub fn nll_value(x: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * x
        .iter()
        .zip(mean)
        .zip(log_var)
        .map(|((x, m), v)| (x - m).powi(2) * (-v).exp() + v + ln_2pi())
        .sum::<f64>()
}

/// Reference value of the diagonal KL divergence.
pub fn kl_value(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    (0..mu_q.len())
        .map(|i| 0.5 * (lv_p[i] - lv_q[i] + (lv_q[i].exp() + (mu_q[i] - mu_p[i]).powi(2)) / lv_p[i].exp() - 1.0))
        .sum()
}

/// Differential entropy of a diagonal Gaussian given per-dimension log-std.
pub fn entropy_from_log_std(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| 0.5 * (2.0 * PI * E).ln() + s).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn nll_at_mean_unit_variance() {
        let v = nll_value(&[0.3, -1.0], &[0.3, -1.0], &[0.0, 0.0]);
        assert!((v - 1.837877).abs() < 1e-6);
        assert!((v - ln_2pi()).abs() < 1e-15);
    }

    #[test]
    fn nll_unit_offset() {
        let v = nll_value(&[1.0], &[0.0], &[0.0]);
        assert!((v - 1.418939).abs() < 1e-6);
    }

    #[test]
    fn nll_grows_with_distance() {
        let near = nll_value(&[0.5, 0.2], &[0.0, 0.0], &[0.3, -0.2]);
        let far = nll_value(&[1.0, 0.4], &[0.0, 0.0], &[0.3, -0.2]);
        assert!(far > near);
    }

    #[test]
    fn graph_nll_matches_reference() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.4, -1.2, 2.0]));
        let m = g.constant(Tensor::row(&[0.1, 0.3, 1.0]));
        let v = g.constant(Tensor::row(&[0.2, -0.5, 1.5]));
        let nll = diag_nll(&mut g, x, m, v).unwrap();
        let want = nll_value(&[0.4, -1.2, 2.0], &[0.1, 0.3, 1.0], &[0.2, -0.5, 1.5]);
        assert!((g.value(nll).item() - want).abs() < 1e-12);
    }

    #[test]
    fn kl_standard_normals() {
        assert_eq!(kl_value(&[0.2], &[0.1], &[0.2], &[0.1]), 0.0);
        assert!((kl_value(&[0.0], &[0.0], &[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[0.0, 0.0]));
        let b = g.constant(Tensor::row(&[1.0, 1.0]));
        let z = g.constant(Tensor::row(&[0.0, 0.0]));
        let kl = diag_kl_rows(&mut g, a, z, b, z).unwrap();
        assert!((g.value(kl).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_gaussian_entropy() {
        assert!((entropy_from_log_std(&[0.0]) - 1.418939).abs() < 1e-6);
    }
}
