use std::collections::BTreeMap;

use crate::{shape_err, DiffError, Gradients, ParameterSet, Result};

/// Adam with bias-corrected moments. One shared step counter; moment
/// buffers are created lazily per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// Same learning rate for every parameter.
    pub fn step_all(&mut self, params: &mut ParameterSet, grads: &Gradients, lr: f64) -> Result<()> {
        self.step(params, grads, |_| Some(lr))
    }

    /// `lr_for(name)` returns the learning rate, or `None` to leave that
    /// parameter (and its moments) untouched. Nothing is modified unless every
    /// selected gradient is finite and shape-aligned.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &Gradients,
        lr_for: impl Fn(&str) -> Option<f64>,
    ) -> Result<()> {
        let mut plan = Vec::new();
        for (name, p) in params.iter() {
            let Some(lr) = lr_for(name) else { continue };
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(shape_err("adam_step", format!("`{name}`: param {:?} grad {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGradient(name.clone()));
            }
            plan.push((name.clone(), lr));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, lr) in plan {
            let g = grads.get(&name)?.data();
            let p = params.get_mut(&name)?.data_mut();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    fn one(name: &str, v: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert(name, Tensor::scalar(v));
        ps
    }

    fn grad_of(ps: &ParameterSet, name: &str, value: f64) -> Gradients {
        // d/dp (value * p) = value
        let mut g = Graph::new();
        let p = g.param(ps, name).unwrap();
        let l = g.scale(p, value);
        g.backward(l, ps).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = one("w", 1.25);
        let grads = Gradients::zeros_like(&ps);
        let mut adam = Adam::new();
        adam.step_all(&mut ps, &grads, 1e-3).unwrap();
        assert_eq!(ps.get("w").unwrap().item(), 1.25);
        assert_eq!(adam.first_moment("w").unwrap(), &[0.0]);
        assert_eq!(adam.second_moment("w").unwrap(), &[0.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = one("w", 0.0);
        let grads = grad_of(&ps, "w", 0.5);
        let mut adam = Adam::new();
        adam.step_all(&mut ps, &grads, 1e-3).unwrap();
        let delta = ps.get("w").unwrap().item();
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expected).abs() < 1e-18);
        assert!((delta + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut ps = one("w", 2.0);
        ps.insert("v", Tensor::scalar(3.0));
        let mut grads = Gradients::zeros_like(&ps);
        grads.grads.get_mut("v").unwrap().data_mut()[0] = f64::NAN;
        let mut adam = Adam::new();
        let err = adam.step_all(&mut ps, &grads, 1e-3).unwrap_err();
        assert!(err.to_string().contains("`v`"));
        assert_eq!(adam.steps(), 0);
        assert_eq!(ps.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut ps = one("enc.w", 1.0);
        ps.insert("dyn.w", Tensor::scalar(1.0));
        let mut grads = Gradients::zeros_like(&ps);
        grads.grads.get_mut("enc.w").unwrap().data_mut()[0] = 1.0;
        grads.grads.get_mut("dyn.w").unwrap().data_mut()[0] = 1.0;
        let mut adam = Adam::new();
        adam.step(&mut ps, &grads, |n| (!n.starts_with("enc.")).then_some(0.1)).unwrap();
        assert_eq!(ps.get("enc.w").unwrap().item(), 1.0);
        assert!(ps.get("dyn.w").unwrap().item() < 1.0);
        assert!(adam.first_moment("enc.w").is_none());
    }
}
