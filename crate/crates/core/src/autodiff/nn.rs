//! Parameterised building blocks on top of the tape.

use super::params::{Init, ParamError, ParamId, ParamStore};
use super::tape::{Result, Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: &mut Init,
    ) -> std::result::Result<Self, ParamError> {
        let weight = store.register(format!("{path}/weight"), init.tensor(&[in_dim, out_dim], in_dim))?;
        let bias = if bias {
            Some(store.register(format!("{path}/bias"), init.tensor(&[out_dim], in_dim))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(p, self.weight);
        let y = t.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = t.param(p, b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two affine layers with a SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        dims: (usize, usize, usize),
        out_bias: bool,
        init: &mut Init,
    ) -> std::result::Result<Self, ParamError> {
        let (i, h, o) = dims;
        Ok(Self {
            hidden: Linear::new(store, &format!("{path}/0"), i, h, true, init)?,
            out: Linear::new(store, &format!("{path}/1"), h, o, out_bias, init)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(t, p, x)?;
        let h = t.silu(h)?;
        self.out.forward(t, p, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Single LSTM cell; gate columns are ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        input_dim: usize,
        hidden: usize,
        init: &mut Init,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            w_ih: store.register(format!("{path}/w_ih"), init.tensor(&[input_dim, 4 * hidden], hidden))?,
            w_hh: store.register(format!("{path}/w_hh"), init.tensor(&[hidden, 4 * hidden], hidden))?,
            bias: store.register(format!("{path}/bias"), init.tensor(&[4 * hidden], hidden))?,
            input_dim,
            hidden,
        })
    }

    /// Zero hidden and cell state for `batch` rows.
    pub fn zero_state(&self, t: &mut Tape, batch: usize) -> LstmState {
        use super::tensor::Tensor;
        let h = t.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = t.constant(Tensor::zeros(&[batch, self.hidden]));
        LstmState { h, c }
    }

    /// One recurrent update for a batch of rows.
    pub fn step(&self, t: &mut Tape, p: &ParamStore, x: Var, state: LstmState) -> Result<LstmState> {
        let d = self.hidden;
        let (w_ih, w_hh, b) = (t.param(p, self.w_ih), t.param(p, self.w_hh), t.param(p, self.bias));
        let xi = t.matmul(x, w_ih)?;
        let hh = t.matmul(state.h, w_hh)?;
        let pre = t.add(xi, hh)?;
        let pre = t.add_row(pre, b)?;
        let i = t.slice_cols(pre, 0, d)?;
        let f = t.slice_cols(pre, d, d)?;
        let g = t.slice_cols(pre, 2 * d, d)?;
        let o = t.slice_cols(pre, 3 * d, d)?;
        let (i, f, g, o) = (t.sigmoid(i)?, t.sigmoid(f)?, t.tanh(g)?, t.sigmoid(o)?);
        let keep = t.mul(f, state.c)?;
        let write = t.mul(i, g)?;
        let c = t.add(keep, write)?;
        let tc = t.tanh(c)?;
        let h = t.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}
