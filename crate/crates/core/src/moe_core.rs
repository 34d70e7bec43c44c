//! Item-level soft routing across experts and fusion with the consensus
//! expert.

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EXPERTS: usize = 4;
pub const MAX_SWEEP_EXPERTS: usize = 6;
pub const DEFAULT_ALPHA: f64 = 0.2;

/// Gate parameters for `n` experts: row `m` of `w` is `W_m` (`1×d_emb`), row
/// `m` of `b` is the per-position bias `b_m` (`1×k_max`).
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w: Mat,
    pub b: Mat,
}

impl GateParams {
    pub fn n_experts(&self) -> usize {
        self.w.nrows()
    }
}

/// `n × k`; column `t` is a distribution over experts.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingWeights {
    pub g: Mat,
}

/// Gate logits `e_t · W_mᵀ + b_m[t]` softmaxed over experts; returns `k × n`
/// (row `t` = routing distribution at position `t`). `bias_cols` selects the
/// bias columns for the rows of `e`.
pub fn gate(tape: &mut Tape, e: Var, w: Var, b: Var, bias_cols: std::ops::Range<usize>) -> Result<Var> {
    let n = tape.shape(w).0;
    if n == 0 {
        return Err(Error::Config("at least one expert is required".into()));
    }
    let k = tape.shape(e).0;
    if bias_cols.len() != k || bias_cols.end > tape.shape(b).1 {
        return Err(Error::Contract(format!(
            "bias columns {bias_cols:?} do not cover {k} positions"
        )));
    }
    let logits = tape.matmul_bt(e, w);
    let bias = tape.slice_cols(b, bias_cols.start, bias_cols.end);
    let bias = tape.transpose(bias);
    let logits = tape.add(logits, bias);
    Ok(tape.softmax(logits))
}

/// `Σ_m G[:, m] ⊙ W_expert_m`, broadcasting over the embedding axis.
pub fn aggregate(tape: &mut Tape, g: Var, experts: &[Var]) -> Result<Var> {
    let (k, n) = tape.shape(g);
    if experts.len() != n {
        return Err(Error::Contract(format!("{} expert outputs for {n} gate columns", experts.len())));
    }
    let shape = tape.shape(experts[0]);
    if shape.0 != k || experts.iter().any(|&x| tape.shape(x) != shape) {
        return Err(Error::Contract("expert outputs must share one k × d_emb shape".into()));
    }
    let mut acc: Option<Var> = None;
    for (m, &x) in experts.iter().enumerate() {
        let col = tape.slice_cols(g, m, m + 1);
        let term = tape.scale_rows(x, col);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    Ok(acc.expect("n >= 1"))
}

/// `alpha · W_SC + W_base`.
pub fn combine(tape: &mut Tape, base: Var, sc: Var, alpha: f64) -> Result<Var> {
    if tape.shape(base) != tape.shape(sc) {
        return Err(Error::Contract("W_base and W_SC shapes differ".into()));
    }
    let scaled = tape.scale(sc, alpha);
    Ok(tape.add(base, scaled))
}

/// Routing weights for a full (padded) sequence `e` of `k` rows. Bias columns
/// beyond `b`'s width count as zero.
pub fn gate_weights(e: &Mat, gates: &GateParams) -> Result<RoutingWeights> {
    let n = gates.n_experts();
    if n == 0 {
        return Err(Error::Config("at least one expert is required".into()));
    }
    if gates.w.ncols() != e.ncols() || gates.b.nrows() != n {
        return Err(Error::Contract("gate shapes do not match the sequence".into()));
    }
    let k = e.nrows();
    let mut bias = Mat::zeros((n, k));
    let keep = k.min(gates.b.ncols());
    bias.slice_mut(ndarray::s![.., ..keep])
        .assign(&gates.b.slice(ndarray::s![.., ..keep]));
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let wv = tape.constant(gates.w.clone());
    let bv = tape.constant(bias);
    let g = gate(&mut tape, ev, wv, bv, 0..k)?;
    Ok(RoutingWeights {
        g: tape.value(g).t().to_owned(),
    })
}

pub fn aggregate_experts(g: &RoutingWeights, experts: &[Mat]) -> Result<Mat> {
    if experts.is_empty() {
        return Err(Error::Config("at least one expert is required".into()));
    }
    let mut tape = Tape::new();
    let gv = tape.constant(g.g.t().to_owned());
    let xs: Vec<Var> = experts.iter().map(|x| tape.constant(x.clone())).collect();
    let out = aggregate(&mut tape, gv, &xs)?;
    Ok(tape.value(out).clone())
}

pub fn combine_with_consensus(base: &Mat, sc: &Mat, alpha: f64) -> Result<Mat> {
    if !alpha.is_finite() {
        return Err(Error::Contract("alpha must be finite".into()));
    }
    if base.dim() != sc.dim() {
        return Err(Error::Contract("W_base and W_SC shapes differ".into()));
    }
    Ok(sc * alpha + base)
}
