//! GRU and LSTM cells over batched rows (`[n, d]`).

use rand::Rng;

use crate::{shape_err, Graph, ParameterSet, Result, Var};

/// Gated recurrent unit with per-gate weights:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W x + U (r ⊙ h) + b)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub d_in: usize,
    pub d_hidden: usize,
    names: [String; 9],
}

impl GruCell {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        let names = [n("w_z"), n("u_z"), n("b_z"), n("w_r"), n("u_r"), n("b_r"), n("w_h"), n("u_h"), n("b_h")];
        Self { d_in, d_hidden, names }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        let (i, h) = (self.d_in, self.d_hidden);
        for gate in 0..3 {
            ps.insert_uniform(&self.names[3 * gate], &[h, i], h, rng);
            ps.insert_uniform(&self.names[3 * gate + 1], &[h, h], h, rng);
            ps.insert_zeros(&self.names[3 * gate + 2], &[h]);
        }
    }

    fn check(&self, g: &Graph, x: Var, h: Var) -> Result<()> {
        let (xs, hs) = (g.shape(x), g.shape(h));
        if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] || xs[1] != self.d_in || hs[1] != self.d_hidden {
            return Err(shape_err(
                "gru_cell",
                format!("input {xs:?} and hidden {hs:?} for cell {}→{}", self.d_in, self.d_hidden),
            ));
        }
        Ok(())
    }

    pub fn step(&self, g: &mut Graph, ps: &ParameterSet, x: Var, h: Var) -> Result<Var> {
        self.check(g, x, h)?;
        let mut p = Vec::with_capacity(9);
        for name in &self.names {
            p.push(g.param(ps, name)?);
        }
        let gate = |g: &mut Graph, w: Var, u: Var, b: Var, hin: Var| -> Result<Var> {
            let a = g.linear(x, w, Some(b))?;
            let c = g.linear(hin, u, None)?;
            g.add(a, c)
        };
        let z = gate(g, p[0], p[1], p[2], h)?;
        let z = g.sigmoid(z);
        let r = gate(g, p[3], p[4], p[5], h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = gate(g, p[6], p[7], p[8], rh)?;
        let cand = g.tanh(cand);
        let diff = g.sub(cand, h)?;
        let step = g.mul(z, diff)?;
        g.add(h, step)
    }
}

/// Long short-term memory cell with fused gate weights in the order
/// input, forget, candidate, output:
/// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub d_in: usize,
    pub d_hidden: usize,
    pub w: String,
    pub u: String,
    pub b: String,
}

impl LstmCell {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize) -> Self {
        Self { d_in, d_hidden, w: format!("{prefix}.w"), u: format!("{prefix}.u"), b: format!("{prefix}.b") }
    }

    pub fn init<R: Rng>(&self, ps: &mut ParameterSet, rng: &mut R) {
        let (i, h) = (self.d_in, self.d_hidden);
        ps.insert_uniform(&self.w, &[4 * h, i], h, rng);
        ps.insert_uniform(&self.u, &[4 * h, h], h, rng);
        ps.insert_zeros(&self.b, &[4 * h]);
    }

    pub fn step(&self, g: &mut Graph, ps: &ParameterSet, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (xs, hs, cs) = (g.shape(x), g.shape(h), g.shape(c));
        if xs.len() != 2 || hs != cs || hs.len() != 2 || xs[0] != hs[0] || xs[1] != self.d_in || hs[1] != self.d_hidden {
            return Err(shape_err(
                "lstm_cell",
                format!("input {xs:?}, hidden {hs:?}, cell {cs:?} for cell {}→{}", self.d_in, self.d_hidden),
            ));
        }
        let d = self.d_hidden;
        let w = g.param(ps, &self.w)?;
        let u = g.param(ps, &self.u)?;
        let b = g.param(ps, &self.b)?;
        let a = g.linear(x, w, Some(b))?;
        let r = g.linear(h, u, None)?;
        let pre = g.add(a, r)?;
        let i = g.slice_cols(pre, 0, d)?;
        let f = g.slice_cols(pre, d, d)?;
        let cand = g.slice_cols(pre, 2 * d, d)?;
        let o = g.slice_cols(pre, 3 * d, d)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}
