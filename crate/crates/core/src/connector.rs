//! Baseline bridge: a two-layer GELU MLP whose hidden width equals the visual
//! vocabulary size, so its parameter count tracks the tokenizer head plus the
//! visual embedding table.

use std::fmt;

use crate::block::Linear;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ConnectorMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl ConnectorMlp {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        width: usize,
        hidden: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::register(store, "connector.fc1", width, hidden, bias, std, seed)?,
            fc2: Linear::register(store, "connector.fc2", hidden, out_dim, bias, std, seed)?,
            width,
            hidden,
            out_dim,
        })
    }

    /// `fc2(gelu(fc1(reps)))`: `n × d → n × d′`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, reps: Var) -> Result<Var> {
        let (n, d) = tape.value(reps).require_matrix("connect")?;
        if d != self.width {
            return Err(Error::shape("connect", &[n, d], &[self.width, self.hidden]));
        }
        let h = self.fc1.forward(tape, bind, reps)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, bind, h)
    }
}

pub fn connect<T: Scalar>(store: &ParamStore<T>, mlp: &ConnectorMlp, reps: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, |_| false);
    let r = tape.constant(reps.clone());
    let out = mlp.forward(&mut tape, &bind, r)?;
    Ok(tape.value(out).clone())
}

/// Parameter counts of the two bridges and the gap between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParityReport {
    pub ovis_visual: usize,
    pub connector: usize,
    pub abs_diff: usize,
    /// `|connector − ovis| / ovis`
    pub rel_diff: f64,
}

pub fn param_parity(ovis_visual: usize, connector: usize) -> ParityReport {
    let abs_diff = ovis_visual.abs_diff(connector);
    ParityReport {
        ovis_visual,
        connector,
        abs_diff,
        rel_diff: abs_diff as f64 / ovis_visual as f64,
    }
}

/// Closed-form counts for width `d`, vocabulary `k` and embedding dim `d′`.
pub fn expected_counts(d: usize, k: usize, d_out: usize, connector_bias: bool) -> (usize, usize) {
    let ovis = d * k + k * d_out;
    let connector = ovis + if connector_bias { k + d_out } else { 0 };
    (ovis, connector)
}

impl fmt::Display for ParityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bridge\tparams")?;
        writeln!(f, "ovis\t{}", self.ovis_visual)?;
        writeln!(f, "connector\t{}", self.connector)?;
        writeln!(f, "rel_diff\t{:.4}%", self.rel_diff * 100.0)
    }
}
