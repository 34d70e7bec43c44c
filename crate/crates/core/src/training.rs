//! BCE objective, Adam, the two-round training loop and the finite-difference
//! gradient checker.

use std::io::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sigmoid, Mat};
use crate::consensus::{estimate_fisher, merge_consensus, ConsensusExpert};
use crate::dataset::{batch_and_negatives, BatchOptions, EvalCase, InteractionSequence, SequenceBatch};
use crate::error::{Error, Result};
use crate::metrics::{rank_metrics, MetricsReport};
use crate::model::{Model, NoiseKey, SeqExample, LOGIT_CLAMP};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::rng::{self, tag};
use crate::token_filter::SelectionAnchor;

pub const EVAL_K: usize = 20;

/// `−Σ [log σ(pos) + log(1 − σ(neg))]` with logits clamped to ±30.
pub fn bce_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::Length {
            expected: pos.len(),
            found: neg.len(),
        });
    }
    let c = |x: f64| x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    Ok(-pos
        .iter()
        .zip(neg)
        .map(|(&p, &n)| log_sigmoid(c(p)) + log_sigmoid(-c(n)))
        .sum::<f64>())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            if self.lr == 0.0 {
                continue;
            }
            let (lr, eps) = (self.lr, self.eps);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs_round1: usize,
    pub epochs_round2: usize,
    pub alpha: f64,
    pub n_experts: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub patience: usize,
    /// Epochs of a round before the patience rule may stop it.
    pub min_epochs: usize,
    /// Build the consensus expert between the rounds.
    pub use_consensus: bool,
    pub fisher_fraction: f64,
    pub fisher_max_batches: usize,
    pub max_validation_users: usize,
    pub exclude_history_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-3,
            epochs_round1: 30,
            epochs_round2: 10,
            alpha: crate::moe_core::DEFAULT_ALPHA,
            n_experts: crate::moe_core::DEFAULT_EXPERTS,
            seed: 0,
            eval_every: 1,
            patience: 5,
            min_epochs: 10,
            use_consensus: true,
            fisher_fraction: 0.1,
            fisher_max_batches: 200,
            max_validation_users: 1000,
            exclude_history_negatives: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, eval_every and patience must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and nonnegative".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be finite and nonnegative".into()));
        }
        if !(self.fisher_fraction > 0.0 && self.fisher_fraction <= 1.0) || self.fisher_max_batches == 0 {
            return Err(Error::Config("Fisher subset settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Round1,
    Round2,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Round1 => "round1",
            Phase::Round2 => "round2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-sequence loss over the epoch.
    pub loss: f64,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    /// Summed batch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,phase,loss,HR@20,NDCG@20\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.phase.as_str(), r.loss, opt(r.hr), opt(r.ndcg)));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub consensus: Option<ConsensusExpert>,
    pub history: History,
    pub sc_hash_start: Option<String>,
    pub sc_hash_end: Option<String>,
}

/// Holds out the last item of each training sequence for validation.
pub fn validation_split(train: &[InteractionSequence], max_users: usize, seed: u64) -> (Vec<InteractionSequence>, Vec<EvalCase>) {
    let mut fit = Vec::with_capacity(train.len());
    let mut val = Vec::new();
    for s in train {
        if s.items.len() >= 3 {
            let (&target, prefix) = s.items.split_last().expect("non-empty");
            val.push(EvalCase {
                user_id: s.user_id,
                prefix: prefix.to_vec(),
                target,
            });
            fit.push(InteractionSequence::new(s.user_id, prefix.to_vec()));
        } else {
            fit.push(s.clone());
        }
    }
    if val.len() > max_users {
        val.shuffle(&mut rng::stream(seed, &[tag::VALIDATION]));
        val.truncate(max_users);
        val.sort_by_key(|c| c.user_id);
    }
    (fit, val)
}

/// Full-catalog metrics of `model` on `cases`.
pub fn evaluate(model: &Model, cases: &[EvalCase], k: usize) -> Result<MetricsReport> {
    let mut scores = Vec::with_capacity(cases.len());
    let mut targets = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(256) {
        let prefixes: Vec<&[usize]> = chunk.iter().map(|c| c.prefix.as_slice()).collect();
        scores.extend(model.score_prefixes(&prefixes)?);
        for c in chunk {
            if c.target == 0 || c.target > model.cfg.n_items {
                return Err(Error::Contract(format!("target {} out of range", c.target)));
            }
            targets.push(c.target - 1);
        }
    }
    rank_metrics(&scores, &targets, k)
}

fn rows_of(batch: &SequenceBatch) -> Vec<SeqExample<'_>> {
    (0..batch.len())
        .map(|b| {
            let (inputs, positives, negatives) = batch.row(b);
            SeqExample {
                inputs,
                positives,
                negatives,
            }
        })
        .collect()
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    fit: &'a [InteractionSequence],
    val: &'a [EvalCase],
    adam: Adam,
    history: History,
    epoch: usize,
}

impl Loop<'_> {
    fn batch_opts(&self, model: &Model, seed: u64) -> BatchOptions {
        BatchOptions {
            batch_size: self.cfg.batch_size,
            max_len: model.cfg.backbone.max_len,
            seed,
            n_items: model.cfg.n_items,
            exclude_history: self.cfg.exclude_history_negatives,
            shuffle: true,
        }
    }

    /// Trains up to `epochs` epochs. After `min_epochs`, stops once
    /// `patience` evaluations pass without a validation HR@20 gain.
    fn run(&mut self, model: &mut Model, epochs: usize, phase: Phase) -> Result<()> {
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0usize;
        for done in 1..=epochs {
            let epoch = self.epoch;
            self.epoch += 1;
            let seed = rng::derive(self.cfg.seed, &[tag::SHUFFLE, epoch as u64]);
            let batches: Vec<SequenceBatch> = batch_and_negatives(self.fit, self.batch_opts(model, seed))?.collect();
            let (mut total, mut count) = (0.0, 0usize);
            for (step, batch) in batches.iter().enumerate() {
                let key = NoiseKey {
                    seed: self.cfg.seed,
                    epoch: epoch as u64,
                    step: step as u64,
                };
                let rows = rows_of(batch);
                let out = model.step(&rows, Some(key), None, true)?;
                if !out.loss.is_finite() {
                    return Err(Error::Divergence(format!("loss {} at epoch {epoch}, step {step}", out.loss)));
                }
                self.adam.step(&mut model.store, out.grads.as_ref().expect("gradients requested"));
                self.history.step_losses.push(out.loss);
                total += out.loss;
                count += rows.len();
            }
            let loss = total / count.max(1) as f64;
            let mut row = HistoryRow {
                epoch,
                phase,
                loss,
                hr: None,
                ndcg: None,
            };
            let evaluate_now = !self.val.is_empty() && (epoch + 1).is_multiple_of(self.cfg.eval_every);
            if evaluate_now {
                let r = evaluate(model, self.val, EVAL_K)?;
                row.hr = Some(r.hr_at_k);
                row.ndcg = Some(r.ndcg_at_k);
                info!("{} epoch {epoch}: loss {loss:.5} val HR@20 {:.4}", phase.as_str(), r.hr_at_k);
                if r.hr_at_k > best {
                    best = r.hr_at_k;
                    stale = 0;
                } else {
                    stale += 1;
                }
            } else {
                info!("{} epoch {epoch}: loss {loss:.5}", phase.as_str());
            }
            self.history.rows.push(row);
            if done >= self.cfg.min_epochs && stale >= self.cfg.patience {
                info!("{} converged after epoch {epoch}", phase.as_str());
                break;
            }
        }
        Ok(())
    }
}

/// Batches used for Fisher estimation: a fixed-seed fraction of one pass.
pub fn fisher_subset(model: &Model, fit: &[InteractionSequence], cfg: &TrainConfig) -> Result<Vec<SequenceBatch>> {
    let opts = BatchOptions {
        batch_size: cfg.batch_size,
        max_len: model.cfg.backbone.max_len,
        seed: rng::derive(cfg.seed, &[tag::FISHER]),
        n_items: model.cfg.n_items,
        exclude_history: cfg.exclude_history_negatives,
        shuffle: true,
    };
    let all: Vec<SequenceBatch> = batch_and_negatives(fit, opts)?.collect();
    let n = ((all.len() as f64 * cfg.fisher_fraction).ceil() as usize).clamp(1, cfg.fisher_max_batches);
    Ok(all.into_iter().take(n).collect())
}

/// Round 1 without the consensus expert, then (for MoE models with
/// `use_consensus`) Fisher merge and Round 2 with the frozen expert added at
/// weight `alpha`.
pub fn train_two_rounds(mut model: Model, train: &[InteractionSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (fit, val) = validation_split(train, cfg.max_validation_users, cfg.seed);
    let mut lp = Loop {
        cfg,
        fit: &fit,
        val: &val,
        adam: Adam::new(cfg.lr),
        history: History::default(),
        epoch: 0,
    };
    lp.run(&mut model, cfg.epochs_round1, Phase::Round1)?;

    let mut consensus = None;
    let (mut start, mut end) = (None, None);
    if cfg.epochs_round2 > 0 {
        if cfg.use_consensus && model.n_experts() > 0 {
            let subset = fisher_subset(&model, &fit, cfg)?;
            let fisher = estimate_fisher(&model, &subset)?;
            info!("Fisher scores: {:?}", fisher.iter().map(|f| f.value).collect::<Vec<_>>());
            let experts: Vec<_> = (0..model.n_experts()).map(|m| model.expert_params(m)).collect();
            let sc = merge_consensus(&experts, &fisher, &model.vocabs)?;
            start = Some(sc.hash());
            model.attach_consensus(sc, cfg.alpha);
        } else if cfg.use_consensus {
            warn!("no experts; Round 2 runs without a consensus expert");
        }
        lp.run(&mut model, cfg.epochs_round2, Phase::Round2)?;
        if let Some(sc) = &model.consensus {
            end = Some(sc.hash());
            consensus = Some(sc.clone());
        }
    }
    let history = lp.history;
    Ok(TrainOutcome {
        model,
        consensus,
        history,
        sc_hash_start: start,
        sc_hash_end: end,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub analytic_norm: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub groups: Vec<GroupCheck>,
    pub tol: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.name == name)
    }
}

fn loss_at(model: &Model, batch: &[SeqExample<'_>], anchors: &[Vec<SelectionAnchor>]) -> Result<f64> {
    Ok(model.step(batch, None, Some(anchors), false)?.loss)
}

/// Compares analytic gradients with central finite differences (noise and
/// dropout off, token selections replayed). `tamper` may alter the analytic
/// gradients before comparison.
pub fn check_gradients_with(
    model: &Model,
    batch: &[SeqExample<'_>],
    step: f64,
    tol: f64,
    tamper: impl FnOnce(&mut GradStore),
) -> Result<GradientReport> {
    let first = model.step(batch, None, None, false)?;
    let anchors = first.anchors;
    let mut analytic = model
        .step(batch, None, Some(&anchors), true)?
        .grads
        .expect("gradients requested");
    tamper(&mut analytic);
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for (name, ids) in model.param_groups() {
        let (mut norm_sq, mut numeric_sq, mut diff_sq) = (0.0, 0.0, 0.0);
        for id in ids {
            let shape = model.store.get(id).dim();
            let zero = Mat::zeros(shape);
            let a = analytic.get(id).unwrap_or(&zero);
            let mut numeric = Mat::zeros(shape);
            for idx in ndarray::indices(shape) {
                let orig = model.store.get(id)[idx];
                probe.store.get_mut(id)[idx] = orig + step;
                let up = loss_at(&probe, batch, &anchors)?;
                probe.store.get_mut(id)[idx] = orig - step;
                let down = loss_at(&probe, batch, &anchors)?;
                probe.store.get_mut(id)[idx] = orig;
                numeric[idx] = (up - down) / (2.0 * step);
            }
            norm_sq += a.iter().map(|x| x * x).sum::<f64>();
            numeric_sq += numeric.iter().map(|x| x * x).sum::<f64>();
            diff_sq += (a - &numeric).iter().map(|x| x * x).sum::<f64>();
        }
        let worst = diff_sq.sqrt() / norm_sq.max(numeric_sq).sqrt().max(1e-10);
        groups.push(GroupCheck {
            passed: worst < tol,
            name,
            max_rel_error: worst,
            analytic_norm: norm_sq.sqrt(),
        });
    }
    if model.consensus.is_some() {
        groups.push(GroupCheck {
            name: "consensus".into(),
            max_rel_error: 0.0,
            analytic_norm: 0.0,
            passed: true,
        });
    }
    Ok(GradientReport { groups, tol })
}

pub fn check_gradients(model: &Model, batch: &[SeqExample<'_>], step: f64, tol: f64) -> Result<GradientReport> {
    check_gradients_with(model, batch, step, tol, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneStyle};
    use crate::model::{Augmentation, ModelConfig};
    use crate::vocab_store::synth_vocab;

    /// Expert output projections are scaled up from their near-zero init so
    /// the alignment gradient is well above finite-difference roundoff.
    fn tiny(aug: Augmentation, n: usize, layers: usize, style: BackboneStyle) -> Model {
        let vocabs = (0..n).map(|m| synth_vocab(16, 6, 4, 0.3, 10 + m as u64).unwrap()).collect();
        let mut m = Model::new(
            ModelConfig {
                n_items: 10,
                backbone: BackboneConfig {
                    style,
                    layers,
                    heads: 2,
                    d_emb: 8,
                    dropout: 0.0,
                    max_len: 4,
                    positions: true,
                },
                top_k: 4,
                tau: 0.7,
                cross_heads: 2,
                augmentation: aug,
                init_seed: 1,
            },
            vocabs,
        )
        .unwrap();
        for id in m.experts.iter().map(|s| s.w_o).collect::<Vec<_>>() {
            let v = m.store.get(id).mapv(|x| x * 200.0);
            m.store.set(id, v);
        }
        m
    }

    const EX: [SeqExample<'static>; 2] = [
        SeqExample { inputs: &[1, 2, 3], positives: &[2, 3, 4], negatives: &[7, 8, 9] },
        SeqExample { inputs: &[5, 6, 1, 2], positives: &[6, 1, 2, 10], negatives: &[3, 4, 9, 8] },
    ];

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[30.0], &[-30.0]).unwrap() < 1e-12);
        assert!((bce_loss(&[0.0], &[0.0]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[0.0], &[]).is_err());
        assert!(bce_loss(&[-1000.0], &[1000.0]).unwrap().is_finite());
    }

    #[test]
    fn adam_zero_lr_changes_nothing() {
        let mut s = ParamStore::new();
        let id = s.add("p", Mat::from_elem((2, 2), 0.5));
        let mut g = GradStore::new(1);
        g.add_dense(id, &Mat::ones((2, 2)));
        let mut adam = Adam::new(0.0);
        adam.step(&mut s, &g);
        assert_eq!(**s.get(id), Mat::from_elem((2, 2), 0.5));
        let mut adam = Adam::new(0.1);
        adam.step(&mut s, &g);
        assert!((s.get(id)[[0, 0]] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (aug, layers, style) in [
            (Augmentation::Moe, 1, BackboneStyle::Causal),
            (Augmentation::Moe, 0, BackboneStyle::Causal),
            (Augmentation::TokenInjection, 1, BackboneStyle::Bidirectional),
            (Augmentation::None, 1, BackboneStyle::Causal),
        ] {
            let m = tiny(aug, 2, layers, style);
            let r = check_gradients(&m, &EX, 1e-5, 1e-4).unwrap();
            assert!(r.passed(), "{aug:?} {style:?}: {r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let m = tiny(Augmentation::Moe, 2, 0, BackboneStyle::Causal);
        let id = m.gate_w.unwrap();
        let r = check_gradients_with(&m, &EX, 1e-6, 1e-4, |g| {
            let mut bad = g.get(id).unwrap().clone();
            bad *= 1.5;
            let mut fresh = GradStore::new(m.store.len());
            for pid in m.store.ids() {
                if let Some(x) = g.get(pid) {
                    fresh.add_dense(pid, if pid == id { &bad } else { x });
                }
            }
            *g = fresh;
        })
        .unwrap();
        assert!(!r.group("gating").unwrap().passed);
        assert!(r.group("item_table").unwrap().passed);
    }

    #[test]
    fn history_csv_header() {
        let h = History {
            rows: vec![HistoryRow { epoch: 0, phase: Phase::Round2, loss: 1.5, hr: Some(0.25), ndcg: None }],
            step_losses: vec![],
        };
        assert_eq!(h.to_csv(), "epoch,phase,loss,HR@20,NDCG@20\n0,round2,1.5,0.25,\n");
    }
}
