//! Small dense-matrix numeric layer with reverse-mode differentiation.

pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

use std::sync::Arc;

pub use nn::{Linear, LstmCell, LstmState, Mlp};
pub use params::{Init, ParamError, ParamGrads, ParamId, ParamStore};
pub use tape::{smooth_l1, value_and_grad, AutodiffError, Gradients, Result, Tape, Var};
pub use tensor::{ShapeError, Tensor};

/// Per-channel softmax across the members of one set (rows of `members`).
///
/// An empty set has no weights; callers skip the aggregation instead.
pub fn set_softmax(members: &Tensor) -> Result<Tensor> {
    if members.rows() == 0 {
        return Err(ShapeError::Invalid {
            op: "set_softmax",
            msg: "empty set".into(),
        }
        .into());
    }
    let mut t = Tape::new();
    let x = t.constant(members.clone());
    let seg: Arc<[usize]> = vec![0; members.rows()].into();
    let y = t.segment_softmax(x, seg, 1)?;
    Ok(t.value(y).clone())
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite-difference oracle used by gradient tests.

    use super::*;

    /// Relative error with the convention that both sides below `floor` agree.
    pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale <= floor {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    /// Numerical gradient of `f` at `x` by central differences.
    pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
        let mut probe = x.clone();
        (0..x.len())
            .map(|i| {
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + h;
                let up = f(&probe);
                probe.data_mut()[i] = orig - h;
                let down = f(&probe);
                probe.data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}
