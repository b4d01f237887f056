//! Recurrent cells: vanilla RNN, GRU and LSTM.
//!
//! All three families step a batch of hidden states `[B,H]` given embedded
//! inputs `[B,I]`. The exact update equations (σ is the logistic sigmoid,
//! ⊙ elementwise product; every gate has its own input weights `W [I,H]`,
//! recurrent weights `U [H,H]` and bias `b [H]`):
//!
//! RNN:
//! ```text
//! h' = tanh(x·W + h·U + b)
//! ```
//!
//! GRU (update gate blends old state and candidate; the reset gate scales the
//! recurrent term inside the candidate):
//! ```text
//! r  = σ(x·W_r + h·U_r + b_r)
//! z  = σ(x·W_z + h·U_z + b_z)
//! h̃  = tanh(x·W_n + r ⊙ (h·U_n) + b_n)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! LSTM:
//! ```text
//! i  = σ(x·W_i + h·U_i + b_i)
//! f  = σ(x·W_f + h·U_f + b_f)
//! g  = tanh(x·W_g + h·U_g + b_g)
//! o  = σ(x·W_o + h·U_o + b_o)
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ tanh(c')
//! ```
//!
//! Initialisation: all weights uniform in `[-0.08, 0.08]`, biases zero, except
//! the LSTM forget-gate bias which starts at `+1.0` so early training does not
//! erase the cell state. Initial hidden (and cell) states are always zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::RngState;
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::params::ParamStore;
use crate::{Error, Result};

pub const WEIGHT_INIT_RANGE: f64 = 0.08;
pub const LSTM_FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellFamily {
    Rnn,
    Gru,
    Lstm,
}

impl CellFamily {
    pub fn gate_names(&self) -> &'static [&'static str] {
        match self {
            CellFamily::Rnn => &["h"],
            CellFamily::Gru => &["r", "z", "n"],
            CellFamily::Lstm => &["i", "f", "g", "o"],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CellFamily::Rnn => "rnn",
            CellFamily::Gru => "gru",
            CellFamily::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellFamily::Rnn),
            "gru" => Ok(CellFamily::Gru),
            "lstm" => Ok(CellFamily::Lstm),
            other => Err(Error::invalid(format!(
                "unknown cell family '{other}' (expected rnn, gru or lstm)"
            ))),
        }
    }
}

/// Per-gate parameter slots of one cell, as indices into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CellSpec {
    pub family: CellFamily,
    pub input_dim: usize,
    pub hidden_dim: usize,
    w: Vec<usize>,
    u: Vec<usize>,
    b: Vec<usize>,
}

impl CellSpec {
    /// Create and register freshly initialised parameters under
    /// `{prefix}.{gate}.{w|u|b}`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        family: CellFamily,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut RngState,
    ) -> Result<CellSpec> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::invalid(format!(
                "cell dims must be positive, got input {input_dim}, hidden {hidden_dim}"
            )));
        }
        let (mut w, mut u, mut b) = (Vec::new(), Vec::new(), Vec::new());
        for gate in family.gate_names() {
            let mut wt = Tensor::zeros(&[input_dim, hidden_dim]);
            rng.fill_uniform(wt.data_mut(), -WEIGHT_INIT_RANGE, WEIGHT_INIT_RANGE);
            let mut ut = Tensor::zeros(&[hidden_dim, hidden_dim]);
            rng.fill_uniform(ut.data_mut(), -WEIGHT_INIT_RANGE, WEIGHT_INIT_RANGE);
            let bias = if family == CellFamily::Lstm && *gate == "f" {
                Tensor::full(&[hidden_dim], LSTM_FORGET_BIAS)
            } else {
                Tensor::zeros(&[hidden_dim])
            };
            w.push(store.add(format!("{prefix}.{gate}.w"), wt)?);
            u.push(store.add(format!("{prefix}.{gate}.u"), ut)?);
            b.push(store.add(format!("{prefix}.{gate}.b"), bias)?);
        }
        Ok(CellSpec { family, input_dim, hidden_dim, w, u, b })
    }

    /// Resolve the slots against the tape handles produced by
    /// [`ParamStore::bind`].
    pub fn bind(&self, vars: &[Var]) -> CellVars {
        CellVars {
            family: self.family,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w: self.w.iter().map(|&i| vars[i]).collect(),
            u: self.u.iter().map(|&i| vars[i]).collect(),
            b: self.b.iter().map(|&i| vars[i]).collect(),
        }
    }
}

/// Tape handles for one cell's parameters within one step's tape.
#[derive(Debug, Clone)]
pub struct CellVars {
    pub family: CellFamily,
    pub input_dim: usize,
    pub hidden_dim: usize,
    w: Vec<Var>,
    u: Vec<Var>,
    b: Vec<Var>,
}

impl CellVars {
    /// Build directly from per-gate handles, in `gate_names()` order.
    /// Mostly useful in tests; models go through [`CellSpec::bind`].
    pub fn from_parts(
        family: CellFamily,
        input_dim: usize,
        hidden_dim: usize,
        w: Vec<Var>,
        u: Vec<Var>,
        b: Vec<Var>,
    ) -> Result<Self> {
        let gates = family.gate_names().len();
        if w.len() != gates || u.len() != gates || b.len() != gates {
            return Err(Error::invalid(format!(
                "{} expects {gates} gate parameter triples, got {}/{}/{}",
                family.as_str(),
                w.len(),
                u.len(),
                b.len()
            )));
        }
        Ok(CellVars { family, input_dim, hidden_dim, w, u, b })
    }
}

/// Recurrent state: hidden vector, plus the cell vector for LSTMs.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellState {
    /// All-zero initial state for a batch of `rows`.
    pub fn zeros(tape: &mut Tape, cell: &CellVars, rows: usize) -> CellState {
        let h = tape.constant(Tensor::zeros(&[rows, cell.hidden_dim]));
        let c = match cell.family {
            CellFamily::Lstm => Some(tape.constant(Tensor::zeros(&[rows, cell.hidden_dim]))),
            _ => None,
        };
        CellState { h, c }
    }
}

/// Pre-activation for one gate: `x·W_g + h·U_g + b_g`.
fn gate_preact(tape: &mut Tape, cell: &CellVars, gate: usize, x: Var, h: Var) -> Result<Var> {
    let xw = tape.matmul(x, cell.w[gate])?;
    let hu = tape.matmul(h, cell.u[gate])?;
    let s = tape.add(xw, hu)?;
    tape.add_bias(s, cell.b[gate])
}

/// Advance one timestep. `x` is `[B, input_dim]`; the state shapes must match
/// the cell's hidden dim and the batch of `x`.
pub fn cell_step(tape: &mut Tape, cell: &CellVars, x: Var, state: &CellState) -> Result<CellState> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 2 || xs[1] != cell.input_dim {
        return Err(Error::shape(format!(
            "cell input must be [B, {}], got {xs:?}",
            cell.input_dim
        )));
    }
    let hs = tape.value(state.h).shape().to_vec();
    if hs != [xs[0], cell.hidden_dim] {
        return Err(Error::shape(format!(
            "hidden state must be [{}, {}], got {hs:?}",
            xs[0], cell.hidden_dim
        )));
    }

    match cell.family {
        CellFamily::Rnn => {
            let pre = gate_preact(tape, cell, 0, x, state.h)?;
            Ok(CellState { h: tape.tanh(pre), c: None })
        }
        CellFamily::Gru => {
            let r_pre = gate_preact(tape, cell, 0, x, state.h)?;
            let r = tape.sigmoid(r_pre);
            let z_pre = gate_preact(tape, cell, 1, x, state.h)?;
            let z = tape.sigmoid(z_pre);
            // candidate: tanh(x·W_n + r ⊙ (h·U_n) + b_n)
            let xw = tape.matmul(x, cell.w[2])?;
            let hu = tape.matmul(state.h, cell.u[2])?;
            let rhu = tape.mul(r, hu)?;
            let pre = tape.add(xw, rhu)?;
            let pre = tape.add_bias(pre, cell.b[2])?;
            let cand = tape.tanh(pre);
            // h' = (1 − z) ⊙ h + z ⊙ h̃  ==  h − z ⊙ h + z ⊙ h̃
            let zh = tape.mul(z, state.h)?;
            let zc = tape.mul(z, cand)?;
            let keep = tape.sub(state.h, zh)?;
            let h = tape.add(keep, zc)?;
            Ok(CellState { h, c: None })
        }
        CellFamily::Lstm => {
            let c_prev = state.c.ok_or_else(|| {
                Error::invalid("LSTM step requires a cell state; got a hidden-only state")
            })?;
            let i_pre = gate_preact(tape, cell, 0, x, state.h)?;
            let i = tape.sigmoid(i_pre);
            let f_pre = gate_preact(tape, cell, 1, x, state.h)?;
            let f = tape.sigmoid(f_pre);
            let g_pre = gate_preact(tape, cell, 2, x, state.h)?;
            let g = tape.tanh(g_pre);
            let o_pre = gate_preact(tape, cell, 3, x, state.h)?;
            let o = tape.sigmoid(o_pre);
            let fc = tape.mul(f, c_prev)?;
            let ig = tape.mul(i, g)?;
            let c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc)?;
            Ok(CellState { h, c: Some(c) })
        }
    }
}

/// Run a cell over a full sequence from the zero state, returning the state
/// after every timestep (`result[t]` has consumed inputs `0..=t`).
pub fn encode_sequence(tape: &mut Tape, cell: &CellVars, xs: &[Var]) -> Result<Vec<CellState>> {
    if xs.is_empty() {
        return Err(Error::invalid("encode_sequence on a zero-length sequence"));
    }
    let rows = tape.value(xs[0]).shape()[0];
    let mut state = CellState::zeros(tape, cell, rows);
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        state = cell_step(tape, cell, x, &state)?;
        out.push(state);
    }
    Ok(out)
}

/// Run `fwd` over the sequence and `bwd` over the reversed sequence, and
/// concatenate the two final hidden states into `[B, 2H]`.
///
/// Note this treats every batch row as having the full length `xs.len()`;
/// ragged batches need per-row final-state selection on top of
/// [`encode_sequence`].
pub fn encode_bidirectional(
    tape: &mut Tape,
    fwd: &CellVars,
    bwd: &CellVars,
    xs: &[Var],
) -> Result<Var> {
    if fwd.family != bwd.family {
        return Err(Error::invalid(format!(
            "bidirectional encoder mixes cell families {} and {}",
            fwd.family.as_str(),
            bwd.family.as_str()
        )));
    }
    if fwd.hidden_dim != bwd.hidden_dim {
        return Err(Error::shape(format!(
            "bidirectional hidden dims differ: {} vs {}",
            fwd.hidden_dim, bwd.hidden_dim
        )));
    }
    let fwd_states = encode_sequence(tape, fwd, xs)?;
    let reversed: Vec<Var> = xs.iter().rev().copied().collect();
    let bwd_states = encode_sequence(tape, bwd, &reversed)?;
    let hf = fwd_states.last().expect("non-empty sequence").h;
    let hb = bwd_states.last().expect("non-empty sequence").h;
    tape.concat(hf, hb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::grad_check;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Zero-initialised cell parameters as constants on a tape (biases per
    /// the init rule, so the LSTM forget bias is 1).
    fn zero_cell(tape: &mut Tape, family: CellFamily, i: usize, h: usize) -> CellVars {
        let gates = family.gate_names();
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for gate in gates {
            w.push(tape.constant(Tensor::zeros(&[i, h])));
            u.push(tape.constant(Tensor::zeros(&[h, h])));
            let bias = if family == CellFamily::Lstm && *gate == "f" {
                Tensor::full(&[h], LSTM_FORGET_BIAS)
            } else {
                Tensor::zeros(&[h])
            };
            b.push(tape.constant(bias));
        }
        CellVars::from_parts(family, i, h, w, u, b).unwrap()
    }

    /// Cell with rng-filled weights registered as tape constants.
    fn random_cell(
        tape: &mut Tape,
        rng: &mut RngState,
        family: CellFamily,
        i: usize,
        h: usize,
        scale: f64,
    ) -> CellVars {
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for _ in family.gate_names() {
            let mut wt = Tensor::zeros(&[i, h]);
            rng.fill_uniform(wt.data_mut(), -scale, scale);
            w.push(tape.constant(wt));
            let mut ut = Tensor::zeros(&[h, h]);
            rng.fill_uniform(ut.data_mut(), -scale, scale);
            u.push(tape.constant(ut));
            let mut bt = Tensor::zeros(&[h]);
            rng.fill_uniform(bt.data_mut(), -scale, scale);
            b.push(tape.constant(bt));
        }
        CellVars::from_parts(family, i, h, w, u, b).unwrap()
    }

    // Hand oracle: two RNN steps recomputed with straight-line arithmetic.
    #[test]
    fn rnn_steps_match_straight_line_recomputation() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 2, vec![0.5, -0.25, 1.0, 0.0]).unwrap());
        let u = tape.constant(Tensor::matrix(2, 2, vec![0.2, 0.0, 0.0, 0.2]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.1, -0.1]));
        let cell = CellVars::from_parts(CellFamily::Rnn, 2, 2, vec![w], vec![u], vec![b]).unwrap();
        let x1 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let x2 = tape.constant(Tensor::matrix(1, 2, vec![-1.0, 0.5]).unwrap());
        let states = encode_sequence(&mut tape, &cell, &[x1, x2]).unwrap();

        // step 1: h = tanh(x1·W + b); U·0 contributes nothing
        let h1: [f64; 2] =
            [(1.0_f64 * 0.5 + 2.0 * 1.0 + 0.1).tanh(), (1.0_f64 * -0.25 + 2.0 * 0.0 - 0.1).tanh()];
        let got1 = tape.value(states[0].h).data();
        assert!((got1[0] - h1[0]).abs() < 1e-15 && (got1[1] - h1[1]).abs() < 1e-15);

        // step 2: h = tanh(x2·W + h1·U + b)
        let pre: [f64; 2] = [
            -1.0 * 0.5 + 0.5 * 1.0 + h1[0] * 0.2 + 0.1,
            -1.0 * -0.25 + 0.5 * 0.0 + h1[1] * 0.2 - 0.1,
        ];
        let got2 = tape.value(states[1].h).data();
        assert!((got2[0] - pre[0].tanh()).abs() < 1e-15);
        assert!((got2[1] - pre[1].tanh()).abs() < 1e-15);
    }

    // Hand oracle: one GRU step from a non-zero state, exercising the
    // documented convention (reset gate inside the candidate's recurrent
    // term, update gate blending h and the candidate).
    #[test]
    fn gru_step_matches_documented_equations() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, v: Vec<f64>| tape.constant(Tensor::matrix(1, 1, v).unwrap());
        let w = vec![mk(&mut tape, vec![0.3]), mk(&mut tape, vec![-0.4]), mk(&mut tape, vec![0.7])];
        let u = vec![mk(&mut tape, vec![0.5]), mk(&mut tape, vec![0.2]), mk(&mut tape, vec![-0.6])];
        let b = [0.05, -0.02, 0.1];
        let bv = b.iter().map(|&x| tape.constant(Tensor::vector(vec![x]))).collect();
        let cell = CellVars::from_parts(CellFamily::Gru, 1, 1, w, u, bv).unwrap();

        let x = 0.8;
        let h0 = -0.3;
        let xv = tape.constant(Tensor::matrix(1, 1, vec![x]).unwrap());
        let hv = tape.constant(Tensor::matrix(1, 1, vec![h0]).unwrap());
        let next = cell_step(&mut tape, &cell, xv, &CellState { h: hv, c: None }).unwrap();

        let r = sigmoid(x * 0.3 + h0 * 0.5 + 0.05);
        let z = sigmoid(x * -0.4 + h0 * 0.2 - 0.02);
        let cand = (x * 0.7 + r * (h0 * -0.6) + 0.1).tanh();
        let expect = (1.0 - z) * h0 + z * cand;
        assert!((tape.value(next.h).data()[0] - expect).abs() < 1e-15);
    }

    // Hand oracle: one LSTM step from non-zero (h, c).
    #[test]
    fn lstm_step_matches_documented_equations() {
        let mut tape = Tape::new();
        let wv = [0.2, -0.3, 0.5, 0.4];
        let uv = [0.1, 0.6, -0.2, 0.3];
        let bv = [0.0, 1.0, 0.05, -0.05]; // forget bias at its init value
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for g in 0..4 {
            w.push(tape.constant(Tensor::matrix(1, 1, vec![wv[g]]).unwrap()));
            u.push(tape.constant(Tensor::matrix(1, 1, vec![uv[g]]).unwrap()));
            b.push(tape.constant(Tensor::vector(vec![bv[g]])));
        }
        let cell = CellVars::from_parts(CellFamily::Lstm, 1, 1, w, u, b).unwrap();

        let (x, h0, c0) = (0.6, 0.2, -0.4);
        let xv = tape.constant(Tensor::matrix(1, 1, vec![x]).unwrap());
        let hv = tape.constant(Tensor::matrix(1, 1, vec![h0]).unwrap());
        let cv = tape.constant(Tensor::matrix(1, 1, vec![c0]).unwrap());
        let next = cell_step(&mut tape, &cell, xv, &CellState { h: hv, c: Some(cv) }).unwrap();

        let i = sigmoid(x * 0.2 + h0 * 0.1 + 0.0);
        let f = sigmoid(x * -0.3 + h0 * 0.6 + 1.0);
        let g = (x * 0.5 + h0 * -0.2 + 0.05).tanh();
        let o = sigmoid(x * 0.4 + h0 * 0.3 - 0.05);
        let c1 = f * c0 + i * g;
        let h1 = o * c1.tanh();
        assert!((tape.value(next.c.unwrap()).data()[0] - c1).abs() < 1e-15);
        assert!((tape.value(next.h).data()[0] - h1).abs() < 1e-15);
    }

    #[test]
    fn zero_parameters_keep_states_at_zero_for_all_families() {
        for family in [CellFamily::Rnn, CellFamily::Gru, CellFamily::Lstm] {
            let mut tape = Tape::new();
            let cell = zero_cell(&mut tape, family, 3, 4);
            let x = tape.constant(Tensor::full(&[2, 3], 0.9));
            let states = encode_sequence(&mut tape, &cell, &[x, x, x]).unwrap();
            for s in &states {
                assert!(tape.value(s.h).data().iter().all(|&v| v == 0.0), "{}", family.as_str());
            }
        }
    }

    // Restricting the input to a prefix reproduces the prefix of the states
    // bitwise: each state depends only on inputs up to its own timestep.
    #[test]
    fn prefix_of_sequence_encoding_is_bitwise_stable() {
        for family in [CellFamily::Rnn, CellFamily::Gru, CellFamily::Lstm] {
            let mut rng = RngState::new(31);
            let mut tape = Tape::new();
            let cell = random_cell(&mut tape, &mut rng, family, 3, 4, 0.4);
            let xs: Vec<Var> = (0..5)
                .map(|_| {
                    let mut x = Tensor::zeros(&[2, 3]);
                    rng.fill_uniform(x.data_mut(), -1.0, 1.0);
                    tape.constant(x)
                })
                .collect();
            let full = encode_sequence(&mut tape, &cell, &xs).unwrap();
            let prefix = encode_sequence(&mut tape, &cell, &xs[..3]).unwrap();
            for t in 0..3 {
                let (a, b) = (tape.value(full[t].h).data(), tape.value(prefix[t].h).data());
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    // Causality: changing input t must leave states 0..t-1 bitwise unchanged.
    #[test]
    fn perturbing_a_later_token_leaves_earlier_states_unchanged() {
        let mut rng = RngState::new(77);
        let mut tape = Tape::new();
        let cell = random_cell(&mut tape, &mut rng, CellFamily::Gru, 2, 3, 0.5);
        let mut raw: Vec<Tensor> = (0..4)
            .map(|_| {
                let mut x = Tensor::zeros(&[1, 2]);
                rng.fill_uniform(x.data_mut(), -1.0, 1.0);
                x
            })
            .collect();
        let xs: Vec<Var> = raw.iter().map(|t| tape.constant(t.clone())).collect();
        let base = encode_sequence(&mut tape, &cell, &xs).unwrap();

        raw[2].data_mut()[0] += 10.0;
        let xs2: Vec<Var> = raw.iter().map(|t| tape.constant(t.clone())).collect();
        let bumped = encode_sequence(&mut tape, &cell, &xs2).unwrap();

        for t in 0..2 {
            let (a, b) = (tape.value(base[t].h).data(), tape.value(bumped[t].h).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_ne!(tape.value(base[2].h).data(), tape.value(bumped[2].h).data());
    }

    // A palindromic sequence fed to weight-shared forward/backward cells
    // produces identical final states in both directions.
    #[test]
    fn palindrome_with_shared_weights_gives_symmetric_bidirectional_states() {
        let mut rng = RngState::new(13);
        let mut tape = Tape::new();
        let cell = random_cell(&mut tape, &mut rng, CellFamily::Gru, 2, 3, 0.5);
        let mut a = Tensor::zeros(&[1, 2]);
        rng.fill_uniform(a.data_mut(), -1.0, 1.0);
        let mut b = Tensor::zeros(&[1, 2]);
        rng.fill_uniform(b.data_mut(), -1.0, 1.0);
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let xs = [av, bv, av]; // palindrome
        let both = encode_bidirectional(&mut tape, &cell, &cell, &xs).unwrap();
        let d = tape.value(both).data();
        let h = cell.hidden_dim;
        for j in 0..h {
            assert_eq!(d[j].to_bits(), d[h + j].to_bits());
        }
    }

    #[test]
    fn bidirectional_rejects_mixed_families() {
        let mut tape = Tape::new();
        let f = zero_cell(&mut tape, CellFamily::Gru, 2, 3);
        let b = zero_cell(&mut tape, CellFamily::Rnn, 2, 3);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let msg = encode_bidirectional(&mut tape, &f, &b, &[x]).unwrap_err().to_string();
        assert!(msg.contains("gru") && msg.contains("rnn"), "{msg}");
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut tape = Tape::new();
        let cell = zero_cell(&mut tape, CellFamily::Rnn, 2, 3);
        assert!(encode_sequence(&mut tape, &cell, &[]).is_err());
    }

    #[test]
    fn init_respects_ranges_and_forget_bias() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(5);
        CellSpec::init(&mut store, "enc", CellFamily::Lstm, 4, 6, &mut rng).unwrap();
        for (name, t) in store.iter() {
            if name.ends_with(".w") || name.ends_with(".u") {
                assert!(t
                    .data()
                    .iter()
                    .all(|v| (-WEIGHT_INIT_RANGE..WEIGHT_INIT_RANGE).contains(v)));
            } else if name == "enc.f.b" {
                assert!(t.data().iter().all(|&v| v == LSTM_FORGET_BIAS));
            } else {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    // Finite-difference certification of each family through three steps.
    #[test]
    fn each_family_survives_gradient_check() {
        for family in [CellFamily::Rnn, CellFamily::Gru, CellFamily::Lstm] {
            let mut store = ParamStore::new();
            let mut rng = RngState::new(101);
            let spec = CellSpec::init(&mut store, "c", family, 2, 3, &mut rng).unwrap();
            // Lift init weights to a generic scale so no gradient is degenerate.
            let params: Vec<Tensor> = (0..store.len())
                .map(|i| {
                    let mut t = store.tensor(i).clone();
                    for v in t.data_mut() {
                        *v *= 5.0;
                        *v += 0.01;
                    }
                    t
                })
                .collect();
            let mut inputs = Vec::new();
            for _ in 0..3 {
                let mut x = Tensor::zeros(&[2, 2]);
                rng.fill_uniform(x.data_mut(), -1.0, 1.0);
                inputs.push(x);
            }
            let report = grad_check(&params, 1e-5, |tape, vars| {
                let cell = spec.bind(vars);
                let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
                let states = encode_sequence(tape, &cell, &xs)?;
                let last = states.last().unwrap().h;
                let sq = tape.mul(last, last)?;
                Ok(tape.sum(sq))
            })
            .unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "{}: rel err {}",
                family.as_str(),
                report.max_rel_err
            );
        }
    }
}
