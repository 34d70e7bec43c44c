//! Multi-head cross-attention from sequence positions (queries) onto the
//! selected vocabulary tokens (keys and values).

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams {
    /// `d_emb × d_emb`
    pub w_q: Mat,
    /// `d_llm × d_emb`
    pub w_k: Mat,
    /// `d_llm × d_emb`
    pub w_v: Mat,
    /// `d_emb × d_emb`
    pub w_o: Mat,
    pub heads: usize,
}

impl CrossAttnParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.ncols();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_emb = {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let ok = self.w_q.nrows() == d
            && self.w_k.ncols() == d
            && self.w_v.ncols() == d
            && self.w_k.nrows() == self.w_v.nrows()
            && self.w_o.dim() == (d, d);
        if !ok {
            return Err(Error::Contract("inconsistent cross-attention shapes".into()));
        }
        Ok(())
    }
}

/// Tape handles of one cross-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// `k × d_emb` knowledge matrix plus the per-head `k × K` attention maps.
pub struct CrossAttnOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

pub fn cross_attention(
    tape: &mut Tape,
    e: Var,
    domain: Var,
    p: &AttnVars,
    heads: usize,
) -> Result<CrossAttnOutput> {
    cross_attention_blocked(tape, e, domain, p, heads, None)
}

/// With `block = Some(K)`, the domain holds one block of `K` tokens per row
/// of `e` and row `t` attends only to block `t`.
pub fn cross_attention_blocked(
    tape: &mut Tape,
    e: Var,
    domain: Var,
    p: &AttnVars,
    heads: usize,
    block: Option<usize>,
) -> Result<CrossAttnOutput> {
    let d = tape.shape(p.w_q).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("d_emb = {d} is not divisible by {heads} heads")));
    }
    if tape.shape(domain).0 == 0 {
        return Err(Error::EmptyTokens);
    }
    if tape.shape(e).1 != tape.shape(p.w_q).0 || tape.shape(domain).1 != tape.shape(p.w_k).0 {
        return Err(Error::Contract("cross-attention input shapes do not match parameters".into()));
    }
    if let Some(k) = block {
        if k == 0 || tape.shape(domain).0 != tape.shape(e).0 * k {
            return Err(Error::Contract("domain blocks do not match the query rows".into()));
        }
    }
    let k = tape.matmul(domain, p.w_k);
    let v = tape.matmul(domain, p.w_v);
    attend(tape, e, k, v, p.w_q, p.w_o, heads, block)
}

/// Multi-head attention of `e · w_q` over precomputed keys and values. With
/// `block = Some(K)` row `t` sees only key rows `t·K .. (t+1)·K`.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    tape: &mut Tape,
    e: Var,
    k: Var,
    v: Var,
    w_q: Var,
    w_o: Var,
    heads: usize,
    block: Option<usize>,
) -> Result<CrossAttnOutput> {
    let d = tape.shape(w_q).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("d_emb = {d} is not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let q = tape.matmul(e, w_q);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, lo, hi),
                tape.slice_cols(k, lo, hi),
                tape.slice_cols(v, lo, hi),
            )
        };
        let logits = match block {
            Some(kb) => tape.block_dot(qh, kh, kb),
            None => tape.matmul_bt(qh, kh),
        };
        let logits = tape.scale(logits, scale);
        let att = tape.softmax(logits);
        outs.push(match block {
            Some(kb) => tape.block_mix(att, vh, kb),
            None => tape.matmul(att, vh),
        });
        attention.push(att);
    }
    let concat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let output = tape.matmul(concat, w_o);
    Ok(CrossAttnOutput { output, attention })
}

/// Value-level cross-attention; returns `W_expert` (`k × d_emb`).
pub fn integrate(e: &Mat, domain_tokens: &Mat, params: &CrossAttnParams) -> Result<Mat> {
    params.validate()?;
    if domain_tokens.nrows() == 0 {
        return Err(Error::EmptyTokens);
    }
    let mut tape = Tape::new();
    let vars = AttnVars {
        w_q: tape.constant(params.w_q.clone()),
        w_k: tape.constant(params.w_k.clone()),
        w_v: tape.constant(params.w_v.clone()),
        w_o: tape.constant(params.w_o.clone()),
    };
    let ev = tape.constant(e.clone());
    let dv = tape.constant(domain_tokens.clone());
    let out = cross_attention(&mut tape, ev, dv, &vars, params.heads)?;
    Ok(tape.value(out.output).clone())
}
