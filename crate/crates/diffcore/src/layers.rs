//! Parameterised building blocks. Each layer only stores parameter names;
//! values live in a [`ParameterSet`] and are bound per graph.

use rand::Rng;

use crate::{Graph, ParameterSet, Result, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self { w: format!("{prefix}.w"), b: format!("{prefix}.b"), d_in, d_out }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        ps.insert_uniform(&self.w, &[self.d_out, self.d_in], self.d_in, rng);
        ps.insert_zeros(&self.b, &[self.d_out]);
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.w)?;
        let b = g.param(ps, &self.b)?;
        g.linear(x, w, Some(b))
    }
}

/// Dense stack with `tanh` between layers and a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [d_in, hidden..., d_out]`; layers are named `{prefix}.l{i}`.
    pub fn new(prefix: &str, sizes: &[usize]) -> Self {
        let layers = sizes.windows(2).enumerate().map(|(i, w)| Linear::new(&format!("{prefix}.l{i}"), w[0], w[1])).collect();
        Self { layers }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        for l in &self.layers {
            l.init(ps, rng);
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, ps, h)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { w: format!("{prefix}.w"), b: format!("{prefix}.b"), c_in, c_out, kernel, stride, pad }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        let k = self.kernel;
        ps.insert_uniform(&self.w, &[self.c_out, self.c_in, k, k], self.c_in * k * k, rng);
        ps.insert_zeros(&self.b, &[self.c_out]);
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.w)?;
        let b = g.param(ps, &self.b)?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: String,
    pub b: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { w: format!("{prefix}.w"), b: format!("{prefix}.b"), c_in, c_out, kernel, stride, pad }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        let k = self.kernel;
        // each output pixel receives roughly c_in * (k / stride)^2 taps
        let fan_in = self.c_in * (k / self.stride).max(1).pow(2);
        ps.insert_uniform(&self.w, &[self.c_in, self.c_out, k, k], fan_in, rng);
        ps.insert_zeros(&self.b, &[self.c_out]);
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.w)?;
        let b = g.param(ps, &self.b)?;
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}
