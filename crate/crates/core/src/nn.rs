//! Layers built on the tape: LSTM cell, embedding lookup, dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Weights of one LSTM layer.
///
/// Gate blocks are stacked along the rows in the order
/// input, forget, cell-candidate, output, each `hidden` rows tall.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4·hidden × input_dim`
    pub w_ih: Tensor,
    /// `4·hidden × hidden`
    pub w_hh: Tensor,
    /// `1 × 4·hidden`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Tensor::zeros(4 * hidden, input_dim),
            w_hh: Tensor::zeros(4 * hidden, hidden),
            bias: Tensor::zeros(1, 4 * hidden),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        LstmParams {
            w_ih: Tensor::uniform(4 * hidden, input_dim, 1.0 / (input_dim as f64).sqrt(), rng),
            w_hh: Tensor::uniform(4 * hidden, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            bias: Tensor::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            w_ih: tape.param(&self.w_ih),
            w_hh: tape.param(&self.w_hh),
            bias: tape.param(&self.bias),
        }
    }
}

/// [`LstmParams`] placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step over a batch of rows. Returns `(h, c)`.
pub fn lstm_step(tape: &mut Tape, p: &LstmVars, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let [gates4, hidden] = tape.shape(p.w_hh);
    if gates4 != 4 * hidden || tape.shape(h_prev)[1] != hidden || tape.shape(c_prev) != tape.shape(h_prev) {
        return Err(Error::Dimension {
            op: "lstm_step",
            left: tape.shape(p.w_hh),
            right: tape.shape(h_prev),
        });
    }
    let from_x = tape.matmul_nt(x, p.w_ih)?;
    let from_h = tape.matmul_nt(h_prev, p.w_hh)?;
    let pre = tape.add(from_x, from_h)?;
    let pre = tape.add_row(pre, p.bias)?;

    let i = tape.slice(pre, 0, hidden)?;
    let f = tape.slice(pre, hidden, 2 * hidden)?;
    let g = tape.slice(pre, 2 * hidden, 3 * hidden)?;
    let o = tape.slice(pre, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok((h, c))
}

/// Per-row select: rows with mask 1 take `new`, rows with mask 0 keep `prev`.
///
/// `mask` and `inv_mask` are `m × 1` constants summing to one.
pub fn masked_update(tape: &mut Tape, new: Var, prev: Var, mask: Var, inv_mask: Var) -> Result<Var> {
    let a = tape.mul_col(new, mask)?;
    let b = tape.mul_col(prev, inv_mask)?;
    tape.add(a, b)
}

pub fn embedding_lookup(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather(table, ids)
}

/// Inverted dropout. Identity when `training` is false or `rate` is zero.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
    if !training || rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(Error::Config(format!("dropout rate must be below 1, got {rate}")));
    }
    let [rows, cols] = tape.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(rows, cols);
    for m in mask.as_slice_mut() {
        if rng.random::<f64>() >= rate {
            *m = keep;
        }
    }
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}
