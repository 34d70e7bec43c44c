//! Transformer sequence encoders (causal next-item and bidirectional
//! mask-slot styles) and inner-product scoring.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::Rng;
use crate::vocab_store::ItemTable;

pub const DEFAULT_DROPOUT: f64 = 0.2;
const LN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneStyle {
    Causal,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub style: BackboneStyle,
    pub layers: usize,
    pub heads: usize,
    pub d_emb: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub positions: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            style: BackboneStyle::Causal,
            layers: 2,
            heads: 2,
            d_emb: 64,
            dropout: DEFAULT_DROPOUT,
            max_len: 50,
            positions: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_emb == 0 || !self.d_emb.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_emb = {} must be a positive multiple of heads = {}",
                self.d_emb, self.heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Inverted dropout driven by an optional stream; without one it is the
/// identity.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut Rng>,
}

impl<'r> Dropout<'r> {
    pub fn new(rate: f64, rng: Option<&'r mut Rng>) -> Self {
        Self { rate, rng }
    }

    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 - self.rate;
                let mask = Mat::from_shape_simple_fn(tape.shape(x), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                tape.mul_const(x, Arc::new(mask))
            }
            _ => x,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerSlots {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_1: ParamId,
    b_1: ParamId,
    w_2: ParamId,
    b_2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pos_emb: ParamId,
    mask_token: Option<ParamId>,
    layers: Vec<LayerSlots>,
}

/// Encoder output: every hidden state plus the user representation row.
pub struct Encoded {
    pub states: Var,
    pub user: Var,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig, std: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_emb;
        let pos_emb = store.add_gaussian("backbone.pos_emb", (cfg.max_len + 1, d), std, seed);
        let mask_token = (cfg.style == BackboneStyle::Bidirectional)
            .then(|| store.add_gaussian("backbone.mask_token", (1, d), std, seed));
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = |p: &str| format!("backbone.layer{l}.{p}");
                LayerSlots {
                    w_q: store.add_gaussian(name("w_q"), (d, d), std, seed),
                    w_k: store.add_gaussian(name("w_k"), (d, d), std, seed),
                    w_v: store.add_gaussian(name("w_v"), (d, d), std, seed),
                    w_o: store.add_gaussian(name("w_o"), (d, d), std, seed),
                    ln1_g: store.add(name("ln1_g"), Mat::ones((1, d))),
                    ln1_b: store.add(name("ln1_b"), Mat::zeros((1, d))),
                    w_1: store.add_gaussian(name("w_1"), (d, d), std, seed),
                    b_1: store.add(name("b_1"), Mat::zeros((1, d))),
                    w_2: store.add_gaussian(name("w_2"), (d, d), std, seed),
                    b_2: store.add(name("b_2"), Mat::zeros((1, d))),
                    ln2_g: store.add(name("ln2_g"), Mat::ones((1, d))),
                    ln2_b: store.add(name("ln2_b"), Mat::zeros((1, d))),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            pos_emb,
            mask_token,
            layers,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.pos_emb];
        ids.extend(self.mask_token);
        for l in &self.layers {
            ids.extend([
                l.w_q, l.w_k, l.w_v, l.w_o, l.ln1_g, l.ln1_b, l.w_1, l.b_1, l.w_2, l.b_2, l.ln2_g,
                l.ln2_b,
            ]);
        }
        ids
    }

    /// Encodes the unpadded rows `e_aug` (`L × d_emb`, most recent last).
    /// Positions are assigned as if left-padded to `max_len`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        e_aug: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<Encoded> {
        let len = tape.shape(e_aug).0;
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        if len > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence length {len} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let first = self.cfg.max_len - len;
        let mut x = dropout.apply(tape, e_aug);
        let mut rows = len;
        if let Some(mask_id) = self.mask_token {
            let m = binder.bind(tape, mask_id);
            x = tape.concat_rows(&[x, m]);
            rows += 1;
        }
        if self.cfg.positions {
            let pos_idx: Vec<usize> = (first..first + rows).collect();
            let pos = binder.bind(tape, self.pos_emb);
            let p = tape.gather_rows(pos, &pos_idx);
            x = tape.add(x, p);
        }
        let allowed = match self.cfg.style {
            BackboneStyle::Causal => Array2::from_shape_fn((rows, rows), |(i, j)| j <= i),
            BackboneStyle::Bidirectional => Array2::from_elem((rows, rows), true),
        };
        let heads = self.cfg.heads;
        let dk = self.cfg.d_emb / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        for l in &self.layers {
            let [wq, wk, wv, wo] = [l.w_q, l.w_k, l.w_v, l.w_o].map(|id| binder.bind(tape, id));
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (lo, hi) = (h * dk, (h + 1) * dk);
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (tape.slice_cols(q, lo, hi), tape.slice_cols(k, lo, hi), tape.slice_cols(v, lo, hi))
                };
                let logits = tape.matmul_bt(qh, kh);
                let logits = tape.scale(logits, scale);
                let att = tape.softmax_masked(logits, Some(&allowed));
                outs.push(tape.matmul(att, vh));
            }
            let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let attn = tape.matmul(cat, wo);
            let attn = dropout.apply(tape, attn);
            let res = tape.add(x, attn);
            let [g1, b1] = [l.ln1_g, l.ln1_b].map(|id| binder.bind(tape, id));
            x = tape.layer_norm(res, g1, b1, LN_EPS);

            let [w1, bb1, w2, bb2] = [l.w_1, l.b_1, l.w_2, l.b_2].map(|id| binder.bind(tape, id));
            let hdn = tape.matmul(x, w1);
            let hdn = tape.add_row(hdn, bb1);
            let hdn = tape.relu(hdn);
            let ff = tape.matmul(hdn, w2);
            let ff = tape.add_row(ff, bb2);
            let ff = dropout.apply(tape, ff);
            let res = tape.add(x, ff);
            let [g2, b2] = [l.ln2_g, l.ln2_b].map(|id| binder.bind(tape, id));
            x = tape.layer_norm(res, g2, b2, LN_EPS);
        }
        let user = tape.slice_rows(x, rows - 1, rows);
        Ok(Encoded { states: x, user })
    }

    fn compact(&self, e_aug: &Mat, valid_mask: &[bool]) -> Result<Mat> {
        if e_aug.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        if e_aug.nrows() > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_len {}",
                e_aug.nrows(),
                self.cfg.max_len
            )));
        }
        if valid_mask.len() != e_aug.nrows() {
            return Err(Error::Contract("mask length must equal sequence length".into()));
        }
        let rows: Vec<usize> = (0..e_aug.nrows()).filter(|&r| valid_mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(e_aug.select(ndarray::Axis(0), &rows))
    }

    /// Hidden states for the valid rows (dropout off).
    pub fn encode_states(&self, store: &ParamStore, e_aug: &Mat, valid_mask: &[bool]) -> Result<Mat> {
        let x = self.compact(e_aug, valid_mask)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, false);
        let xv = tape.constant(x);
        let enc = self.encode(&mut tape, &mut binder, xv, &mut Dropout::off())?;
        Ok(tape.value(enc.states).clone())
    }

    /// User representation `h^u` for a padded sequence (dropout off).
    pub fn encode_sequence(&self, store: &ParamStore, e_aug: &Mat, valid_mask: &[bool]) -> Result<Array1<f64>> {
        let x = self.compact(e_aug, valid_mask)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, false);
        let xv = tape.constant(x);
        let enc = self.encode(&mut tape, &mut binder, xv, &mut Dropout::off())?;
        Ok(tape.value(enc.user).row(0).to_owned())
    }
}

/// `ŷ_i = hᵀ e_i` for the candidates (all items `1..=n` when omitted).
pub fn predict_scores(h: &[f64], items: &ItemTable, candidates: Option<&[usize]>) -> Result<Vec<f64>> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("user representation is not finite".into()));
    }
    let table = &*items.matrix;
    if h.len() != table.ncols() {
        return Err(Error::Contract("user representation width differs from item table".into()));
    }
    let hv = ndarray::ArrayView1::from(h);
    match candidates {
        None => Ok((1..table.nrows()).map(|i| table.row(i).dot(&hv)).collect()),
        Some(c) => c
            .iter()
            .map(|&i| {
                if i == 0 || i >= table.nrows() {
                    Err(Error::Contract(format!("candidate item {i} out of range")))
                } else {
                    Ok(table.row(i).dot(&hv))
                }
            })
            .collect(),
    }
}
