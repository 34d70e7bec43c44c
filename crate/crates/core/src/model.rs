//! The full recommender: item table, token-filtering experts, gating,
//! optional consensus expert and the sequence backbone.

use std::sync::Arc;

use log::warn;
use ndarray::{Array1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::backbone::{predict_scores, Backbone, BackboneConfig, BackboneStyle, Dropout};
use crate::consensus::{self, ConsensusExpert, ExpertParams};
use crate::error::{Error, Result};
use crate::moe_core;
use crate::params::{Binder, GradStore, ParamId, ParamStore};
use crate::rng::{self, tag, Rng};
use crate::semantic_integration::{self, CrossAttnParams};
use crate::token_filter::{self, AlignParams, FilterConfig, SelectionAnchor};
use crate::vocab_store::{ItemTable, VocabEmbedding, ITEM_INIT_STD};

pub const LOGIT_CLAMP: f64 = 30.0;
/// Initial scale of each expert's output projection, small enough that
/// `W_output` starts well below the item embeddings.
pub const EXPERT_OUT_STD: f64 = 0.001;

/// How vocabulary knowledge enters the item sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    /// Filtered tokens routed through the gated experts.
    Moe,
    /// Mean-pooled full vocabulary projected and added to every position.
    TokenInjection,
    /// Plain ID backbone.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_items: usize,
    pub backbone: BackboneConfig,
    pub top_k: usize,
    pub tau: f64,
    pub cross_heads: usize,
    pub augmentation: Augmentation,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn d_emb(&self) -> usize {
        self.backbone.d_emb
    }

    pub fn filter(&self, train_mode: bool) -> FilterConfig {
        FilterConfig {
            k: self.top_k,
            tau: self.tau,
            train_mode,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertSlots {
    pub w_align: ParamId,
    pub b_align: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl ExpertSlots {
    pub fn ids(&self) -> [ParamId; 6] {
        [self.w_align, self.b_align, self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

/// One training example without padding.
#[derive(Clone, Copy, Debug)]
pub struct SeqExample<'a> {
    pub inputs: &'a [usize],
    pub positives: &'a [usize],
    pub negatives: &'a [usize],
}

/// Keys the Gumbel and dropout streams of a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

impl NoiseKey {
    fn stream(&self, purpose: u64, b: usize, extra: u64) -> Rng {
        rng::stream(self.seed, &[purpose, self.epoch, self.step, b as u64, extra])
    }
}

pub struct StepOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grads: Option<GradStore>,
    /// Token selections per sample and expert, for replay.
    pub anchors: Vec<Vec<SelectionAnchor>>,
}

/// Per-sequence leaf holding a shared product, or the listed rows of it.
struct Leaf {
    var: Var,
    rows: Option<Vec<usize>>,
}

/// Adds a leaf gradient into the full-shape accumulator of its product.
fn add_leaf_grad(acc: &mut Option<Mat>, shape: (usize, usize), rows: Option<&[usize]>, g: Mat) {
    match (acc.as_mut(), rows) {
        (Some(a), None) => *a += &g,
        (None, None) => *acc = Some(g),
        (a, Some(rows)) => {
            let a = match a {
                Some(a) => a,
                None => acc.insert(Mat::zeros(shape)),
            };
            for (k, &r) in rows.iter().enumerate() {
                a.row_mut(r).scaled_add(1.0, &g.row(k));
            }
        }
    }
}

struct SeqOut {
    loss: f64,
    grads: Option<GradStore>,
    d_leaves: Vec<(Option<Vec<usize>>, Option<Mat>)>,
    anchors: Vec<SelectionAnchor>,
}

/// Per-batch vocabulary products, three per expert: the aligned normalized
/// vocabulary and its key and value projections.
struct Shared<'s> {
    tape: Tape,
    binder: Binder<'s>,
    vars: Vec<Var>,
    values: Vec<Arc<Mat>>,
    trainable: Vec<bool>,
}

/// Intermediate products of the augmentation stage.
pub struct Augmented {
    pub experts: Vec<Mat>,
    pub base: Option<Mat>,
    pub output: Option<Mat>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub items: ParamId,
    pub experts: Vec<ExpertSlots>,
    pub gate_w: Option<ParamId>,
    pub gate_b: Option<ParamId>,
    pub te_proj: Vec<ParamId>,
    pub backbone: Backbone,
    pub vocabs: Vec<VocabEmbedding>,
    pub consensus: Option<ConsensusExpert>,
    pub alpha: f64,
}

fn xavier(rows: usize) -> f64 {
    1.0 / (rows as f64).sqrt()
}

impl Model {
    pub fn new(cfg: ModelConfig, vocabs: Vec<VocabEmbedding>) -> Result<Self> {
        cfg.backbone.validate()?;
        let d = cfg.d_emb();
        let seed = cfg.init_seed;
        if cfg.n_items == 0 {
            return Err(Error::EmptyDataset);
        }
        if cfg.augmentation != Augmentation::None && vocabs.is_empty() {
            return Err(Error::Config("at least one vocabulary is required".into()));
        }
        let mut store = ParamStore::new();
        let table = ItemTable::init(cfg.n_items, d, ITEM_INIT_STD, seed);
        let items = store.add("items", Arc::unwrap_or_clone(table.matrix));
        let mut experts = Vec::new();
        let mut te_proj = Vec::new();
        let (mut gate_w, mut gate_b) = (None, None);
        match cfg.augmentation {
            Augmentation::Moe => {
                let filter = cfg.filter(false);
                for (m, v) in vocabs.iter().enumerate() {
                    v.validate()?;
                    filter.validate(v.vocab_size())?;
                    let probe = CrossAttnParams {
                        w_q: Mat::zeros((d, d)),
                        w_k: Mat::zeros((v.dim(), d)),
                        w_v: Mat::zeros((v.dim(), d)),
                        w_o: Mat::zeros((d, d)),
                        heads: cfg.cross_heads,
                    };
                    probe.validate()?;
                    let name = |p: &str| format!("expert{m}.{p}");
                    experts.push(ExpertSlots {
                        w_align: store.add_gaussian(name("w_align"), (v.dim(), d), xavier(v.dim()), seed),
                        b_align: store.add(name("b_align"), Mat::zeros((1, d))),
                        w_q: store.add_gaussian(name("w_q"), (d, d), xavier(d), seed),
                        w_k: store.add_gaussian(name("w_k"), (v.dim(), d), xavier(v.dim()), seed),
                        w_v: store.add_gaussian(name("w_v"), (v.dim(), d), xavier(v.dim()), seed),
                        w_o: store.add_gaussian(name("w_o"), (d, d), EXPERT_OUT_STD, seed),
                    });
                }
                let n = vocabs.len();
                gate_w = Some(store.add_gaussian("gate.w", (n, d), xavier(d), seed));
                gate_b = Some(store.add("gate.b", Mat::zeros((n, cfg.backbone.max_len))));
            }
            Augmentation::TokenInjection => {
                for (m, v) in vocabs.iter().enumerate() {
                    v.validate()?;
                    te_proj.push(store.add_gaussian(format!("te{m}.proj"), (v.dim(), d), xavier(v.dim()), seed));
                }
            }
            Augmentation::None => {}
        }
        let backbone = Backbone::new(&mut store, cfg.backbone, xavier(d), seed)?;
        Ok(Self {
            cfg,
            store,
            items,
            experts,
            gate_w,
            gate_b,
            te_proj,
            backbone,
            vocabs,
            consensus: None,
            alpha: 0.0,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn item_table(&self) -> ItemTable {
        ItemTable::from_matrix(Arc::clone(self.store.get(self.items)))
    }

    pub fn expert_params(&self, m: usize) -> ExpertParams {
        let s = &self.experts[m];
        let g = |id: ParamId| (**self.store.get(id)).clone();
        ExpertParams {
            align: AlignParams {
                w_align: g(s.w_align),
                b_align: g(s.b_align),
            },
            attn: CrossAttnParams {
                w_q: g(s.w_q),
                w_k: g(s.w_k),
                w_v: g(s.w_v),
                w_o: g(s.w_o),
                heads: self.cfg.cross_heads,
            },
        }
    }

    /// Installs a frozen consensus expert combined with weight `alpha`.
    pub fn attach_consensus(&mut self, sc: ConsensusExpert, alpha: f64) {
        if sc.is_disabled() {
            warn!("consensus expert disabled; alpha forced to 0");
            self.alpha = 0.0;
        } else {
            self.alpha = alpha;
        }
        self.consensus = Some(sc);
    }

    /// Named parameter groups used for gradient reporting.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = vec![("item_table".to_string(), vec![self.items])];
        if !self.experts.is_empty() {
            groups.push((
                "alignment".into(),
                self.experts.iter().flat_map(|s| [s.w_align, s.b_align]).collect(),
            ));
            groups.push((
                "cross_attention".into(),
                self.experts.iter().flat_map(|s| [s.w_q, s.w_k, s.w_v, s.w_o]).collect(),
            ));
        }
        if let (Some(w), Some(b)) = (self.gate_w, self.gate_b) {
            groups.push(("gating".into(), vec![w, b]));
        }
        if !self.te_proj.is_empty() {
            groups.push(("token_injection".into(), self.te_proj.clone()));
        }
        groups.push(("backbone".into(), self.backbone.param_ids()));
        groups
    }

    fn shared<'s>(&'s self, with_grad: bool) -> Shared<'s> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, with_grad);
        let mut vars = Vec::new();
        let mut values = Vec::new();
        let mut trainable = Vec::new();
        let moe = self.cfg.augmentation == Augmentation::Moe;
        for (m, s) in self.experts.iter().enumerate().filter(|_| moe) {
            let voc = tape.constant(Arc::clone(&self.vocabs[m].matrix));
            let w = binder.bind(&mut tape, s.w_align);
            let b = binder.bind(&mut tape, s.b_align);
            let n = token_filter::aligned_normalized(&mut tape, voc, w, b);
            let wk = binder.bind(&mut tape, s.w_k);
            let wv = binder.bind(&mut tape, s.w_v);
            let pk = tape.matmul(voc, wk);
            let pv = tape.matmul(voc, wv);
            let frozen = |id| self.store.is_frozen(id);
            let flags = [
                !(frozen(s.w_align) && frozen(s.b_align)),
                !frozen(s.w_k),
                !frozen(s.w_v),
            ];
            for (var, f) in [n, pk, pv].into_iter().zip(flags) {
                values.push(tape.value_arc(var));
                vars.push(var);
                trainable.push(with_grad && f);
            }
        }
        Shared {
            tape,
            binder,
            vars,
            values,
            trainable,
        }
    }

    fn sum_leaf_grads(
        &self,
        shared: &Shared<'_>,
        acc: &mut [Option<Mat>],
        d_leaves: Vec<(Option<Vec<usize>>, Option<Mat>)>,
    ) {
        for (i, (rows, g)) in d_leaves.into_iter().enumerate() {
            if let Some(g) = g {
                add_leaf_grad(&mut acc[i], shared.values[i].dim(), rows.as_deref(), g);
            }
        }
    }

    fn shared_backward(&self, shared: &Shared<'_>, d_normed: &[Option<Mat>], out: &mut GradStore) {
        let seeds: Vec<(Var, Mat)> = shared
            .vars
            .iter()
            .zip(d_normed)
            .filter_map(|(&v, g)| g.as_ref().map(|g| (v, g.clone())))
            .collect();
        if seeds.is_empty() {
            return;
        }
        let grads = shared.tape.backward_from(&seeds);
        shared.binder.collect(&grads, out);
    }

    /// Builds `E + W_output` for the rows `e`. Returns the augmented input and
    /// the aligned-vocabulary leaves of this tape.
    #[allow(clippy::too_many_arguments)]
    fn augment(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        e: Var,
        normed: &[Arc<Mat>],
        normed_trainable: &[bool],
        noise: Option<(NoiseKey, usize)>,
        anchors: Option<&[SelectionAnchor]>,
        record: &mut Vec<SelectionAnchor>,
        trace: Option<&mut Augmented>,
    ) -> Result<(Var, Vec<Leaf>)> {
        let len = tape.shape(e).0;
        match self.cfg.augmentation {
            Augmentation::None => Ok((e, Vec::new())),
            Augmentation::TokenInjection => {
                let mut acc = e;
                for (m, &proj) in self.te_proj.iter().enumerate() {
                    let mean = tape.constant(self.vocabs[m].mean_row());
                    let p = binder.bind(tape, proj);
                    let row = tape.matmul(mean, p);
                    acc = tape.add_row(acc, row);
                }
                Ok((acc, Vec::new()))
            }
            Augmentation::Moe => {
                let filter = self.cfg.filter(noise.is_some());
                let causal = self.cfg.backbone.style == BackboneStyle::Causal;
                let u = token_filter::pooled_interest(tape, e, causal)?;
                let mut leaves = Vec::with_capacity(self.experts.len());
                let mut outs = Vec::with_capacity(self.experts.len());
                let mut leaf = |tape: &mut Tape, i: usize, rows: Option<&[usize]>| {
                    let value = match rows {
                        Some(r) => Arc::new(normed[i].select(Axis(0), r)),
                        None => Arc::clone(&normed[i]),
                    };
                    let v = if normed_trainable[i] {
                        tape.param(value)
                    } else {
                        tape.constant(value)
                    };
                    leaves.push(Leaf {
                        var: v,
                        rows: rows.map(<[usize]>::to_vec),
                    });
                    v
                };
                for (m, s) in self.experts.iter().enumerate() {
                    let n = leaf(tape, 3 * m, None);
                    let scores = token_filter::cosine_scores(tape, n, u)?;
                    let mut g = noise.map(|(k, b)| k.stream(tag::GUMBEL, b, m as u64));
                    let sel = token_filter::select_tokens(
                        tape,
                        scores,
                        &self.vocabs[m],
                        &filter,
                        g.as_mut(),
                        anchors.map(|a| &a[m]),
                    )?;
                    record.push(SelectionAnchor {
                        indices: sel.indices.clone(),
                        soft: tape.value(sel.soft).clone(),
                    });
                    let pk = leaf(tape, 3 * m + 1, Some(&sel.indices));
                    let keys = tape.scale_rows(pk, sel.weights);
                    let pv = leaf(tape, 3 * m + 2, Some(&sel.indices));
                    let vals = tape.scale_rows(pv, sel.weights);
                    let w_q = binder.bind(tape, s.w_q);
                    let w_o = binder.bind(tape, s.w_o);
                    let out = semantic_integration::attend(
                        tape,
                        e,
                        keys,
                        vals,
                        w_q,
                        w_o,
                        self.cfg.cross_heads,
                        causal.then_some(filter.k),
                    )?;
                    outs.push(out.output);
                }
                let (gw, gb) = (self.gate_w.expect("moe gate"), self.gate_b.expect("moe gate"));
                let wv = binder.bind(tape, gw);
                let bv = binder.bind(tape, gb);
                let first = self.cfg.backbone.max_len - len;
                let g = moe_core::gate(tape, e, wv, bv, first..first + len)?;
                let base = moe_core::aggregate(tape, g, &outs)?;
                let output = match &self.consensus {
                    Some(sc) if !sc.is_disabled() => {
                        let mut r = noise.map(|(k, b)| k.stream(tag::CONSENSUS, b, 0));
                        let w_sc = consensus::consensus_forward_tape(tape, e, sc, &filter, r.as_mut(), causal)?;
                        moe_core::combine(tape, base, w_sc, self.alpha)?
                    }
                    _ => base,
                };
                if let Some(t) = trace {
                    t.experts = outs.iter().map(|&v| tape.value(v).clone()).collect();
                    t.base = Some(tape.value(base).clone());
                    t.output = Some(tape.value(output).clone());
                }
                Ok((tape.add(e, output), leaves))
            }
        }
    }

    fn sequence(
        &self,
        ex: &SeqExample<'_>,
        normed: &[Arc<Mat>],
        normed_trainable: &[bool],
        noise: Option<(NoiseKey, usize)>,
        anchors: Option<&[SelectionAnchor]>,
        with_grad: bool,
    ) -> Result<SeqOut> {
        let len = ex.inputs.len();
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        if ex.positives.len() != len || ex.negatives.len() != len {
            return Err(Error::Length {
                expected: len,
                found: ex.positives.len().min(ex.negatives.len()),
            });
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, with_grad);
        let (pos_items, neg_items): (&[usize], &[usize]) = match self.cfg.backbone.style {
            BackboneStyle::Causal => (ex.positives, ex.negatives),
            BackboneStyle::Bidirectional => (&ex.positives[len - 1..], &ex.negatives[len - 1..]),
        };
        let mut idx = Vec::with_capacity(len + 2 * pos_items.len());
        idx.extend_from_slice(ex.inputs);
        idx.extend_from_slice(pos_items);
        idx.extend_from_slice(neg_items);
        let rows = binder.bind_rows(&mut tape, self.items, &idx);
        let np = pos_items.len();
        let e = tape.slice_rows(rows, 0, len);
        let pos = tape.slice_rows(rows, len, len + np);
        let neg = tape.slice_rows(rows, len + np, len + 2 * np);

        let mut record = Vec::new();
        let (e_aug, leaves) = self.augment(
            &mut tape,
            &mut binder,
            e,
            normed,
            normed_trainable,
            noise,
            anchors,
            &mut record,
            None,
        )?;
        let mut drop_rng = noise.map(|(k, b)| k.stream(tag::DROPOUT, b, 0));
        let mut dropout = Dropout::new(self.cfg.backbone.dropout, drop_rng.as_mut());
        let enc = self.backbone.encode(&mut tape, &mut binder, e_aug, &mut dropout)?;
        let h = match self.cfg.backbone.style {
            BackboneStyle::Causal => enc.states,
            BackboneStyle::Bidirectional => enc.user,
        };
        let sp = tape.row_dot(h, pos);
        let sn = tape.row_dot(h, neg);
        let sn = tape.scale(sn, -1.0);
        let lp = tape.log_sigmoid(sp, LOGIT_CLAMP);
        let ln = tape.log_sigmoid(sn, LOGIT_CLAMP);
        let both = tape.add(lp, ln);
        let total = tape.sum(both);
        let loss = tape.scale(total, -1.0);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("non-finite sequence loss {value}")));
        }
        let (grads, d_leaves) = if with_grad {
            let mut grads = tape.backward(loss);
            let mut gs = GradStore::new(self.store.len());
            binder.collect(&grads, &mut gs);
            let d = leaves.into_iter().map(|l| (l.rows, grads.take(l.var))).collect();
            (Some(gs), d)
        } else {
            (None, Vec::new())
        };
        Ok(SeqOut {
            loss: value,
            grads,
            d_leaves,
            anchors: record,
        })
    }

    fn run_sequences(
        &self,
        shared: &Shared<'_>,
        batch: &[SeqExample<'_>],
        noise: Option<NoiseKey>,
        anchors: Option<&[Vec<SelectionAnchor>]>,
        with_grad: bool,
    ) -> Result<Vec<SeqOut>> {
        if let Some(a) = anchors {
            if a.len() != batch.len() {
                return Err(Error::Contract("one anchor set per sample is required".into()));
            }
        }
        batch
            .par_iter()
            .enumerate()
            .map(|(b, ex)| {
                self.sequence(
                    ex,
                    &shared.values,
                    &shared.trainable,
                    noise.map(|k| (k, b)),
                    anchors.map(|a| a[b].as_slice()),
                    with_grad,
                )
            })
            .collect()
    }

    /// Summed loss of a batch and, optionally, its gradient.
    pub fn step(
        &self,
        batch: &[SeqExample<'_>],
        noise: Option<NoiseKey>,
        anchors: Option<&[Vec<SelectionAnchor>]>,
        with_grad: bool,
    ) -> Result<StepOutput> {
        let shared = self.shared(with_grad);
        let outs = self.run_sequences(&shared, batch, noise, anchors, with_grad)?;
        let mut loss = 0.0;
        let mut per_sample = Vec::with_capacity(outs.len());
        let mut grads = with_grad.then(|| GradStore::new(self.store.len()));
        let mut d_sum: Vec<Option<Mat>> = vec![None; shared.vars.len()];
        let mut all_anchors = Vec::with_capacity(outs.len());
        for o in outs {
            loss += o.loss;
            per_sample.push(o.loss);
            if let (Some(acc), Some(g)) = (grads.as_mut(), o.grads.as_ref()) {
                acc.merge(g);
            }
            self.sum_leaf_grads(&shared, &mut d_sum, o.d_leaves);
            all_anchors.push(o.anchors);
        }
        if let Some(g) = grads.as_mut() {
            self.shared_backward(&shared, &d_sum, g);
            g.densify(&self.store);
        }
        Ok(StepOutput {
            loss,
            per_sample,
            grads,
            anchors: all_anchors,
        })
    }

    /// Per-sample dense gradients (noise and dropout off).
    pub fn per_sample_grads(&self, batch: &[SeqExample<'_>]) -> Result<Vec<GradStore>> {
        let shared = self.shared(true);
        let outs = self.run_sequences(&shared, batch, None, None, true)?;
        Ok(outs
            .into_iter()
            .map(|o| {
                let mut g = o.grads.expect("gradients requested");
                let mut d = vec![None; shared.vars.len()];
                self.sum_leaf_grads(&shared, &mut d, o.d_leaves);
                self.shared_backward(&shared, &d, &mut g);
                g.densify(&self.store);
                g
            })
            .collect())
    }

    fn eval_normed(&self) -> Vec<Arc<Mat>> {
        self.shared(false).values
    }

    fn encode_prefix(&self, prefix: &[usize], normed: &[Arc<Mat>], trace: Option<&mut Augmented>) -> Result<Array1<f64>> {
        let items = crate::dataset::truncate_recent(prefix, self.cfg.backbone.max_len);
        if items.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&bad) = items.iter().find(|&&i| i == 0 || i > self.cfg.n_items) {
            return Err(Error::Contract(format!("item {bad} out of range")));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let e = tape.constant(self.store.get(self.items).select(Axis(0), items));
        let flags = vec![false; normed.len()];
        let mut record = Vec::new();
        let (e_aug, _) = self.augment(&mut tape, &mut binder, e, normed, &flags, None, None, &mut record, trace)?;
        let enc = self.backbone.encode(&mut tape, &mut binder, e_aug, &mut Dropout::off())?;
        Ok(tape.value(enc.user).row(0).to_owned())
    }

    /// User representation for an evaluation prefix (most recent `max_len`
    /// items).
    pub fn user_representation(&self, prefix: &[usize]) -> Result<Array1<f64>> {
        self.encode_prefix(prefix, &self.eval_normed(), None)
    }

    /// Expert outputs, `W_base` and `W_output` for a prefix in eval mode.
    pub fn augmentation_trace(&self, prefix: &[usize]) -> Result<Augmented> {
        let mut t = Augmented {
            experts: Vec::new(),
            base: None,
            output: None,
        };
        self.encode_prefix(prefix, &self.eval_normed(), Some(&mut t))?;
        Ok(t)
    }

    /// Full-catalog scores (items `1..=n`) for each prefix.
    pub fn score_prefixes(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let normed = self.eval_normed();
        let table = self.item_table();
        prefixes
            .par_iter()
            .map(|p| {
                let h = self.encode_prefix(p, &normed, None)?;
                predict_scores(h.as_slice().expect("contiguous"), &table, None)
            })
            .collect()
    }
}
