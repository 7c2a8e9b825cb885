//! Layers built on the tape: dense, GRU and LSTM cells, and time-major
//! sequence runners.
//!
//! Weights live in a [`ParamStore`] under a name prefix; the layer structs
//! only carry the prefix and dimensions.

use crate::tensor::{BoundParams, Initializer, ParamStore, Real, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub prefix: String,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input_dim: usize, output_dim: usize) -> Self {
        Self { prefix: prefix.into(), input_dim, output_dim }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/W", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/b", self.prefix)
    }

    pub fn init_params<T: Real>(&self, init: &mut Initializer, store: &mut ParamStore<T>) {
        store.insert(self.weight_name(), init.matrix(self.input_dim, self.output_dim));
        store.insert(self.bias_name(), init.zeros(&[self.output_dim]));
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        tape.dense(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

fn check_width<T: Real>(tape: &Tape<T>, op: &'static str, v: Var, width: usize) -> Result<usize> {
    match *tape.shape(v) {
        [b, w] if w == width => Ok(b),
        ref s => Err(TensorError::Shape { op, detail: format!("expected B×{width}, got {s:?}") }),
    }
}

/// One gate pre-activation `x·W + h·U + b`.
fn gate<T: Real>(tape: &mut Tape<T>, p: &BoundParams, prefix: &str, gate: &str, x: Var, h: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}/W{gate}"))?;
    let u = p.get(&format!("{prefix}/U{gate}"))?;
    let b = p.get(&format!("{prefix}/b{gate}"))?;
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add_bias(s, b)
}

fn init_gates<T: Real>(prefix: &str, gates: &[&str], input: usize, hidden: usize, init: &mut Initializer, store: &mut ParamStore<T>) {
    for g in gates {
        store.insert(format!("{prefix}/W{g}"), init.matrix(input, hidden));
        store.insert(format!("{prefix}/U{g}"), init.matrix(hidden, hidden));
        store.insert(format!("{prefix}/b{g}"), init.zeros(&[hidden]));
    }
}

/// Gated recurrent unit with the reset gate applied to the recurrent term
/// before the candidate's tanh:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// h̃  = tanh(x·Wh + (r∘h)·Uh + bh)
/// h' = (1 − z)∘h + z∘h̃
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruCell {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub const GATES: [&'static str; 3] = ["z", "r", "h"];

    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        Self { prefix: prefix.into(), input_dim, hidden_dim }
    }

    pub fn init_params<T: Real>(&self, init: &mut Initializer, store: &mut ParamStore<T>) {
        init_gates(&self.prefix, &Self::GATES, self.input_dim, self.hidden_dim, init, store);
    }

    pub fn param_count(&self) -> usize {
        3 * (self.input_dim * self.hidden_dim + self.hidden_dim * self.hidden_dim + self.hidden_dim)
    }

    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, h: Var) -> Result<Var> {
        let bx = check_width(tape, "gru_step", x, self.input_dim)?;
        let bh = check_width(tape, "gru_step", h, self.hidden_dim)?;
        if bx != bh {
            return Err(TensorError::Shape { op: "gru_step", detail: format!("batch {bx} vs {bh}") });
        }
        let pre_z = gate(tape, p, &self.prefix, "z", x, h)?;
        let z = tape.sigmoid(pre_z)?;
        let pre_r = gate(tape, p, &self.prefix, "r", x, h)?;
        let r = tape.sigmoid(pre_r)?;
        let rh = tape.mul(r, h)?;
        let pre_h = gate(tape, p, &self.prefix, "h", x, rh)?;
        let cand = tape.tanh(pre_h)?;
        let delta = tape.sub(cand, h)?;
        let zd = tape.mul(z, delta)?;
        tape.add(h, zd)
    }
}

/// LSTM cell with input, forget and output gates and a tanh candidate:
///
/// ```text
/// i = σ(x·Wi + h·Ui + bi)    f = σ(x·Wf + h·Uf + bf)
/// o = σ(x·Wo + h·Uo + bo)    g = tanh(x·Wc + h·Uc + bc)
/// c' = f∘c + i∘g             h' = o∘tanh(c')
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmCell {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub const GATES: [&'static str; 4] = ["i", "f", "o", "c"];

    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        Self { prefix: prefix.into(), input_dim, hidden_dim }
    }

    pub fn init_params<T: Real>(&self, init: &mut Initializer, store: &mut ParamStore<T>) {
        init_gates(&self.prefix, &Self::GATES, self.input_dim, self.hidden_dim, init, store);
    }

    pub fn param_count(&self) -> usize {
        4 * (self.input_dim * self.hidden_dim + self.hidden_dim * self.hidden_dim + self.hidden_dim)
    }

    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let bx = check_width(tape, "lstm_step", x, self.input_dim)?;
        let bh = check_width(tape, "lstm_step", h, self.hidden_dim)?;
        let bc = check_width(tape, "lstm_step", c, self.hidden_dim)?;
        if bx != bh || bx != bc {
            return Err(TensorError::Shape { op: "lstm_step", detail: format!("batch {bx}/{bh}/{bc}") });
        }
        let pre_i = gate(tape, p, &self.prefix, "i", x, h)?;
        let i = tape.sigmoid(pre_i)?;
        let pre_f = gate(tape, p, &self.prefix, "f", x, h)?;
        let f = tape.sigmoid(pre_f)?;
        let pre_o = gate(tape, p, &self.prefix, "o", x, h)?;
        let o = tape.sigmoid(pre_o)?;
        let pre_g = gate(tape, p, &self.prefix, "c", x, h)?;
        let g = tape.tanh(pre_g)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

fn zero_state<T: Real>(tape: &mut Tape<T>, batch: usize, hidden: usize) -> Var {
    tape.leaf(&Tensor::zeros(&[batch, hidden]))
}

/// Runs a GRU over time-major rows (`row = t·batch + b`) from a zero state.
/// Returns the hidden states in the same layout.
pub fn run_gru<T: Real>(tape: &mut Tape<T>, p: &BoundParams, cell: &GruCell, xs: Var, steps: usize, batch: usize) -> Result<Var> {
    let mut h = zero_state(tape, batch, cell.hidden_dim);
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.slice_rows(xs, t * batch, batch)?;
        h = cell.step(tape, p, x, h)?;
        outs.push(h);
    }
    tape.concat_rows(&outs)
}

/// LSTM counterpart of [`run_gru`].
pub fn run_lstm<T: Real>(tape: &mut Tape<T>, p: &BoundParams, cell: &LstmCell, xs: Var, steps: usize, batch: usize) -> Result<Var> {
    let mut h = zero_state(tape, batch, cell.hidden_dim);
    let mut c = zero_state(tape, batch, cell.hidden_dim);
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.slice_rows(xs, t * batch, batch)?;
        (h, c) = cell.step(tape, p, x, h, c)?;
        outs.push(h);
    }
    tape.concat_rows(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(names: impl IntoIterator<Item = (String, Vec<usize>)>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, shape) in names {
            s.insert(n, Tensor::zeros(&shape));
        }
        s
    }

    fn cell_shapes(prefix: &str, gates: &[&str], d: usize, h: usize) -> Vec<(String, Vec<usize>)> {
        gates
            .iter()
            .flat_map(|g| {
                [
                    (format!("{prefix}/W{g}"), vec![d, h]),
                    (format!("{prefix}/U{g}"), vec![h, h]),
                    (format!("{prefix}/b{g}"), vec![h]),
                ]
            })
            .collect()
    }

    #[test]
    fn gru_zero_fixed_point_and_half_update() {
        let cell = GruCell::new("g", 2, 3);
        let mut init = Initializer::new(1);
        let mut store = ParamStore::<f64>::new();
        cell.init_params(&mut init, &mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(&Tensor::zeros(&[1, 2]));
        let h = tape.leaf(&Tensor::zeros(&[1, 3]));
        let h1 = cell.step(&mut tape, &p, x, h).unwrap();
        assert_eq!(tape.value(h1), &[0.0; 3]);

        let store = zero_params(cell_shapes("g", &GruCell::GATES, 2, 3));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![0.7, -1.3]).unwrap());
        let h = tape.leaf(&Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let h1 = cell.step(&mut tape, &p, x, h).unwrap();
        assert_eq!(tape.value(h1), &[0.5, -1.0, 0.25]);
    }

    #[test]
    fn lstm_zero_cases() {
        let cell = LstmCell::new("l", 2, 2);
        let mut init = Initializer::new(1);
        let mut store = ParamStore::<f64>::new();
        cell.init_params(&mut init, &mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = tape.leaf(&Tensor::zeros(&[1, 2]));
        let (h1, c1) = cell.step(&mut tape, &p, z, z, z).unwrap();
        assert_eq!(tape.value(h1), &[0.0; 2]);
        assert_eq!(tape.value(c1), &[0.0; 2]);

        let store = zero_params(cell_shapes("l", &LstmCell::GATES, 2, 2));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![0.3, 0.9]).unwrap());
        let h = tape.leaf(&Tensor::new(vec![1, 2], vec![-0.4, 0.2]).unwrap());
        let c = tape.leaf(&Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap());
        let (h1, c1) = cell.step(&mut tape, &p, x, h, c).unwrap();
        assert_eq!(tape.value(c1), &[1.0, -0.5]);
        let want = [0.5 * 1.0f64.tanh(), 0.5 * (-0.5f64).tanh()];
        for (a, b) in tape.value(h1).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cells_reject_wrong_widths() {
        let cell = GruCell::new("g", 2, 3);
        let mut store = ParamStore::<f64>::new();
        cell.init_params(&mut Initializer::new(0), &mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(&Tensor::zeros(&[1, 3]));
        let h = tape.leaf(&Tensor::zeros(&[1, 3]));
        assert!(matches!(cell.step(&mut tape, &p, x, h), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn param_counts_match_store() {
        let mut init = Initializer::new(0);
        let mut s = ParamStore::<f32>::new();
        GruCell::new("g", 300, 128).init_params(&mut init, &mut s);
        assert_eq!(s.numel(), GruCell::new("g", 300, 128).param_count());
        let mut s = ParamStore::<f32>::new();
        LstmCell::new("l", 100, 100).init_params(&mut init, &mut s);
        assert_eq!(s.numel(), LstmCell::new("l", 100, 100).param_count());
    }
}
