//! Fisher importance per expert, the Fisher-weighted consensus expert and its
//! frozen forward pass.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};

use crate::autograd::{Mat, Tape, Var};
use crate::checkpoint;
use crate::dataset::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::{Model, SeqExample};
use crate::params::fingerprint;
use crate::rng::{self, tag, Rng};
use crate::semantic_integration::{self, AttnVars, CrossAttnParams};
use crate::token_filter::{self, AlignParams, FilterConfig};
use crate::vocab_store::VocabEmbedding;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub align: AlignParams,
    pub attn: CrossAttnParams,
}

pub const EXPERT_PARAM_NAMES: [&str; 6] = ["w_align", "b_align", "w_q", "w_k", "w_v", "w_o"];

impl ExpertParams {
    pub fn mats(&self) -> [&Mat; 6] {
        [
            &self.align.w_align,
            &self.align.b_align,
            &self.attn.w_q,
            &self.attn.w_k,
            &self.attn.w_v,
            &self.attn.w_o,
        ]
    }

    fn mats_mut(&mut self) -> [&mut Mat; 6] {
        [
            &mut self.align.w_align,
            &mut self.align.b_align,
            &mut self.attn.w_q,
            &mut self.attn.w_k,
            &mut self.attn.w_v,
            &mut self.attn.w_o,
        ]
    }

    /// `(d_llm, d_emb, heads)`; experts merge only within one key.
    pub fn shape_key(&self) -> (usize, usize, usize) {
        (self.align.w_align.nrows(), self.align.w_align.ncols(), self.attn.heads)
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.mats().iter().map(|m| m.dim()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisherScore {
    pub value: f64,
    pub n_samples: usize,
}

/// Frozen Fisher-merged expert.
#[derive(Clone, Debug)]
pub struct ConsensusExpert {
    pub params: ExpertParams,
    pub contributors: Vec<usize>,
    pub weights: Vec<f64>,
    pub fisher: Vec<f64>,
    pub vocabularies: Vec<VocabEmbedding>,
    normed: Vec<Arc<Mat>>,
    attn: [Arc<Mat>; 4],
    frozen: bool,
}

impl ConsensusExpert {
    fn build(
        params: ExpertParams,
        contributors: Vec<usize>,
        weights: Vec<f64>,
        fisher: Vec<f64>,
        vocabularies: Vec<VocabEmbedding>,
    ) -> Self {
        let normed = vocabularies
            .iter()
            .map(|v| {
                let mut tape = Tape::new();
                let voc = tape.constant(Arc::clone(&v.matrix));
                let w = tape.constant(params.align.w_align.clone());
                let b = tape.constant(params.align.b_align.clone());
                let n = token_filter::aligned_normalized(&mut tape, voc, w, b);
                tape.value_arc(n)
            })
            .collect();
        let a = &params.attn;
        let attn = [&a.w_q, &a.w_k, &a.w_v, &a.w_o].map(|m| Arc::new(m.clone()));
        Self {
            params,
            contributors,
            weights,
            fisher,
            vocabularies,
            normed,
            attn,
            frozen: true,
        }
    }

    pub fn disabled() -> Self {
        let empty = || Mat::zeros((0, 0));
        let params = ExpertParams {
            align: AlignParams {
                w_align: empty(),
                b_align: empty(),
            },
            attn: CrossAttnParams {
                w_q: empty(),
                w_k: empty(),
                w_v: empty(),
                w_o: empty(),
                heads: 1,
            },
        };
        Self::build(params, Vec::new(), Vec::new(), Vec::new(), Vec::new())
    }

    pub fn is_disabled(&self) -> bool {
        self.contributors.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 of `Θ_SC`.
    pub fn hash(&self) -> String {
        fingerprint(self.params.mats())
    }
}

/// Mean over entries of the squared gradient of each expert, averaged over
/// the per-sample gradients in `samples`.
pub fn fisher_from_gradients(per_sample: &[Vec<Vec<&Mat>>]) -> Result<Vec<FisherScore>> {
    let n = per_sample.len();
    if n == 0 {
        return Err(Error::Config("Fisher subset is empty".into()));
    }
    let n_experts = per_sample[0].len();
    let mut acc = vec![0.0; n_experts];
    for sample in per_sample {
        for (r, mats) in sample.iter().enumerate() {
            let count: usize = mats.iter().map(|m| m.len()).sum();
            let sq: f64 = mats.iter().flat_map(|m| m.iter()).map(|g| g * g).sum();
            acc[r] += sq / count.max(1) as f64;
        }
    }
    let scores: Vec<FisherScore> = acc
        .into_iter()
        .map(|s| FisherScore {
            value: s / n as f64,
            n_samples: n,
        })
        .collect();
    if scores.iter().all(|f| f.value == 0.0) {
        warn!("all Fisher scores are zero; merge falls back to uniform weights");
    }
    Ok(scores)
}

/// Empirical Fisher of every expert over the sequences of `subset`
/// (noise and dropout off, observed labels).
pub fn estimate_fisher(model: &Model, subset: &[SequenceBatch]) -> Result<Vec<FisherScore>> {
    if subset.iter().all(|b| b.is_empty()) {
        return Err(Error::Config("Fisher subset is empty".into()));
    }
    let n_experts = model.n_experts();
    let mut acc = vec![0.0; n_experts];
    let mut n = 0usize;
    for batch in subset {
        let rows: Vec<SeqExample<'_>> = (0..batch.len())
            .map(|b| {
                let (inputs, positives, negatives) = batch.row(b);
                SeqExample {
                    inputs,
                    positives,
                    negatives,
                }
            })
            .collect();
        for g in model.per_sample_grads(&rows)? {
            let sample: Vec<Vec<&Mat>> = model
                .experts
                .iter()
                .map(|s| s.ids().iter().filter_map(|&id| g.get(id)).collect())
                .collect();
            let f = fisher_from_gradients(std::slice::from_ref(&sample))?;
            for (a, s) in acc.iter_mut().zip(f) {
                *a += s.value;
            }
            n += 1;
        }
    }
    let scores: Vec<FisherScore> = acc
        .into_iter()
        .map(|s| FisherScore {
            value: s / n as f64,
            n_samples: n,
        })
        .collect();
    if scores.iter().all(|f| f.value == 0.0) {
        warn!("all Fisher scores are zero; merge falls back to uniform weights");
    }
    Ok(scores)
}

/// Fisher-weighted average over the largest group of shape-identical
/// experts. `vocabs[r]` is expert `r`'s vocabulary.
pub fn merge_consensus(
    experts: &[ExpertParams],
    fisher: &[FisherScore],
    vocabs: &[VocabEmbedding],
) -> Result<ConsensusExpert> {
    if experts.len() != fisher.len() || experts.len() != vocabs.len() {
        return Err(Error::Contract("one Fisher score and vocabulary per expert".into()));
    }
    if experts.is_empty() {
        warn!("no experts to merge; consensus expert disabled");
        return Ok(ConsensusExpert::disabled());
    }
    if let Some(f) = fisher.iter().find(|f| !(f.value >= 0.0 && f.value.is_finite())) {
        return Err(Error::Validation(format!("invalid Fisher score {}", f.value)));
    }
    let mut groups: BTreeMap<Vec<(usize, usize)>, Vec<usize>> = BTreeMap::new();
    for (r, e) in experts.iter().enumerate() {
        let mut key = e.shapes();
        key.push((e.attn.heads, 0));
        groups.entry(key).or_default().push(r);
    }
    let contributors = groups
        .into_values()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .expect("non-empty");
    for r in 0..experts.len() {
        if !contributors.contains(&r) {
            info!("expert {r} excluded from the consensus (shape mismatch)");
        }
    }
    if contributors.len() == 1 {
        info!("consensus expert equals expert {}", contributors[0]);
    }
    let f: Vec<f64> = contributors.iter().map(|&r| fisher[r].value).collect();
    let total: f64 = f.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        f.iter().map(|v| v / total).collect()
    } else {
        warn!("Fisher scores sum to zero; using uniform weights");
        vec![1.0 / contributors.len() as f64; contributors.len()]
    };
    let mut merged = experts[contributors[0]].clone();
    for (slot, out) in merged.mats_mut().into_iter().enumerate() {
        for (idx, v) in out.indexed_iter_mut() {
            let (mut lo, mut hi, mut s) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for (&r, &w) in contributors.iter().zip(&weights) {
                let x = experts[r].mats()[slot][idx];
                lo = lo.min(x);
                hi = hi.max(x);
                s += w * x;
            }
            *v = s.clamp(lo, hi);
        }
    }
    let vocabularies = contributors.iter().map(|&r| vocabs[r].clone()).collect();
    Ok(ConsensusExpert::build(merged, contributors, weights, f, vocabularies))
}

/// `W_SC` on a tape: the pipeline under `Θ_SC` averaged over the
/// contributors' vocabularies. Everything about `Θ_SC` is constant.
pub fn consensus_forward_tape(
    tape: &mut Tape,
    e: Var,
    sc: &ConsensusExpert,
    filter: &FilterConfig,
    mut noise: Option<&mut Rng>,
    causal: bool,
) -> Result<Var> {
    if !sc.frozen {
        return Err(Error::Contract("consensus expert must be frozen".into()));
    }
    let (k, d) = tape.shape(e);
    if sc.is_disabled() {
        return Ok(tape.constant(Mat::zeros((k, d))));
    }
    let u = token_filter::pooled_interest(tape, e, causal)?;
    let vars = AttnVars {
        w_q: tape.constant(Arc::clone(&sc.attn[0])),
        w_k: tape.constant(Arc::clone(&sc.attn[1])),
        w_v: tape.constant(Arc::clone(&sc.attn[2])),
        w_o: tape.constant(Arc::clone(&sc.attn[3])),
    };
    let mut acc: Option<Var> = None;
    for (vocab, normed) in sc.vocabularies.iter().zip(&sc.normed) {
        let n = tape.constant(Arc::clone(normed));
        let scores = token_filter::cosine_scores(tape, n, u)?;
        let sel = token_filter::select_tokens(tape, scores, vocab, filter, noise.as_deref_mut(), None)?;
        let out = semantic_integration::cross_attention_blocked(
            tape,
            e,
            sel.domain,
            &vars,
            sc.params.attn.heads,
            causal.then_some(filter.k),
        )?;
        acc = Some(match acc {
            Some(a) => tape.add(a, out.output),
            None => out.output,
        });
    }
    let sum = acc.expect("at least one contributor");
    Ok(tape.scale(sum, 1.0 / sc.vocabularies.len() as f64))
}

/// Value-level `W_SC` for the rows of `e` pooled as one sequence; `seed` keys
/// the Gumbel stream when `filter.train_mode` is set.
pub fn consensus_forward(e: &Mat, sc: &ConsensusExpert, filter: &FilterConfig, seed: u64) -> Result<Mat> {
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let mut r = rng::stream(seed, &[tag::CONSENSUS]);
    let out = consensus_forward_tape(&mut tape, ev, sc, filter, Some(&mut r), false)?;
    Ok(tape.value(out).clone())
}

/// Writes `Θ_SC` blocks plus a `name<TAB>fisher` manifest.
/// Writes `Θ_SC` under `sc/` and `sc_contributors.tsv` with columns
/// `expert name fisher weight`, preceded by a `heads` line.
pub fn save_consensus(dir: &Path, sc: &ConsensusExpert) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blocks: Vec<(String, &Mat, bool)> = EXPERT_PARAM_NAMES
        .iter()
        .zip(sc.params.mats())
        .map(|(n, m)| (format!("sc.{n}"), m, true))
        .collect();
    checkpoint::save_blocks(&dir.join("sc"), &blocks)?;
    let mut text = format!("heads\t{}\n", sc.params.attn.heads);
    for (((r, v), f), w) in sc.contributors.iter().zip(&sc.vocabularies).zip(&sc.fisher).zip(&sc.weights) {
        text.push_str(&format!("{r}\t{}\t{f:e}\t{w:e}\n", v.name));
    }
    let path = dir.join(CONTRIBUTORS);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

const CONTRIBUTORS: &str = "sc_contributors.tsv";

/// Rebuilds a consensus expert saved by [`save_consensus`]; `vocabs` are the
/// model's vocabularies, indexed by expert.
pub fn load_consensus(dir: &Path, vocabs: &[VocabEmbedding]) -> Result<ConsensusExpert> {
    let path = dir.join(CONTRIBUTORS);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, m: &str| Error::Parse {
        line: line + 1,
        message: m.to_string(),
    };
    let heads = match lines.next() {
        Some((n, l)) => l
            .strip_prefix("heads\t")
            .and_then(|h| h.parse::<usize>().ok())
            .ok_or_else(|| bad(n, "expected a heads line"))?,
        None => return Ok(ConsensusExpert::disabled()),
    };
    let (mut contributors, mut fisher, mut weights, mut vocabularies) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (n, l) in lines {
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(n, "expected 4 tab-separated fields"));
        }
        let r: usize = f[0].parse().map_err(|_| bad(n, "bad expert index"))?;
        let v = vocabs
            .get(r)
            .ok_or_else(|| Error::Format(format!("consensus contributor {r} has no vocabulary")))?;
        if v.name != f[1] {
            return Err(Error::Format(format!("contributor {r} was {} but the model has {}", f[1], v.name)));
        }
        contributors.push(r);
        fisher.push(f[2].parse().map_err(|_| bad(n, "bad Fisher score"))?);
        weights.push(f[3].parse().map_err(|_| bad(n, "bad weight"))?);
        vocabularies.push(v.clone());
    }
    if contributors.is_empty() {
        return Ok(ConsensusExpert::disabled());
    }
    let mut blocks = checkpoint::load_blocks(&dir.join("sc"))?;
    if blocks.len() != EXPERT_PARAM_NAMES.len() {
        return Err(Error::Format("consensus checkpoint needs six blocks".into()));
    }
    let mut take = |name: &str| -> Result<Mat> {
        let want = format!("sc.{name}");
        let i = blocks
            .iter()
            .position(|b| b.name == want)
            .ok_or_else(|| Error::Format(format!("missing block {want}")))?;
        Ok(blocks.swap_remove(i).matrix)
    };
    let params = ExpertParams {
        align: AlignParams {
            w_align: take("w_align")?,
            b_align: take("b_align")?,
        },
        attn: CrossAttnParams {
            w_q: take("w_q")?,
            w_k: take("w_k")?,
            w_v: take("w_v")?,
            w_o: take("w_o")?,
            heads,
        },
    };
    Ok(ConsensusExpert::build(params, contributors, weights, fisher, vocabularies))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab_store::{synth_vocab, VocabSource};
    use ndarray::array;

    fn expert(fill: f64, d_llm: usize, d: usize) -> ExpertParams {
        ExpertParams {
            align: AlignParams {
                w_align: Mat::from_elem((d_llm, d), fill),
                b_align: Mat::from_elem((1, d), fill),
            },
            attn: CrossAttnParams {
                w_q: Mat::from_elem((d, d), fill),
                w_k: Mat::from_elem((d_llm, d), fill),
                w_v: Mat::from_elem((d_llm, d), fill),
                w_o: Mat::from_elem((d, d), fill),
                heads: 1,
            },
        }
    }

    fn vocab(d_llm: usize, seed: u64) -> VocabEmbedding {
        synth_vocab(8, d_llm, 2, 0.3, seed).unwrap()
    }

    fn score(v: f64) -> FisherScore {
        FisherScore { value: v, n_samples: 1 }
    }

    #[test]
    fn weighted_merge_examples() {
        let ex = [expert(1.0, 3, 2), expert(3.0, 3, 2)];
        let vs = [vocab(3, 1), vocab(3, 2)];
        let sc = merge_consensus(&ex, &[score(1.0), score(3.0)], &vs).unwrap();
        assert!(sc.params.mats().iter().all(|m| m.iter().all(|&v| v == 2.5)));
        assert!(sc.is_frozen());
        let eq = merge_consensus(&ex, &[score(0.5), score(0.5)], &vs).unwrap();
        assert!(eq.params.mats().iter().all(|m| m.iter().all(|&v| v == 2.0)));
        let zero = merge_consensus(&ex, &[score(0.0), score(0.0)], &vs).unwrap();
        assert_eq!(zero.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn only_largest_homogeneous_group_contributes() {
        let ex = [expert(1.0, 3, 2), expert(5.0, 4, 2), expert(3.0, 3, 2)];
        let vs = [vocab(3, 1), vocab(4, 2), vocab(3, 3)];
        let sc = merge_consensus(&ex, &[score(1.0), score(9.0), score(1.0)], &vs).unwrap();
        assert_eq!(sc.contributors, vec![0, 2]);
        assert_eq!(sc.params.align.w_align[[0, 0]], 2.0);

        let single = merge_consensus(&ex[..2], &[score(1.0), score(1.0)], &vs[..2]).unwrap();
        assert_eq!(single.contributors.len(), 1);
        assert!(merge_consensus(&[], &[], &[]).unwrap().is_disabled());
    }

    #[test]
    fn consensus_round_trips_through_disk() {
        let ex = [expert(0.25, 3, 4), expert(0.75, 3, 4)];
        let vs = [vocab(3, 1), vocab(3, 2)];
        let sc = merge_consensus(&ex, &[score(1.0), score(3.0)], &vs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_consensus(dir.path(), &sc).unwrap();
        let back = load_consensus(dir.path(), &vs).unwrap();
        assert_eq!(back.params, sc.params);
        assert_eq!(back.contributors, sc.contributors);
        assert_eq!(back.weights, sc.weights);
        assert_eq!(back.hash(), sc.hash());
        assert!(back.is_frozen());
    }

    #[test]
    fn disabled_forward_is_zero() {
        let sc = ConsensusExpert::disabled();
        let out = consensus_forward(&Mat::ones((3, 2)), &sc, &FilterConfig::default(), 0).unwrap();
        assert_eq!(out, Mat::zeros((3, 2)));
    }

    #[test]
    fn forward_averages_vocabularies() {
        let mut p = expert(0.0, 3, 4);
        let mut r = rng::stream(9, &[]);
        for m in p.mats_mut() {
            m.mapv_inplace(|_| rand::Rng::random_range(&mut r, -1.0..1.0));
        }
        p.attn.heads = 2;
        let v = vocab(3, 4);
        let e = array![[0.3, -0.1, 0.5, 0.2], [0.1, 0.4, -0.3, 0.0]];
        let cfg = FilterConfig { k: 3, tau: 0.7, train_mode: false };
        let one = merge_consensus(&[p.clone()], &[score(1.0)], std::slice::from_ref(&v)).unwrap();
        let two = merge_consensus(&[p.clone(), p.clone()], &[score(1.0), score(2.0)], &[v.clone(), v.clone()]).unwrap();
        let a = consensus_forward(&e, &one, &cfg, 0).unwrap();
        let b = consensus_forward(&e, &two, &cfg, 0).unwrap();
        assert_eq!(a, b);
        let other = VocabEmbedding::new((*v.matrix).clone() * -1.0, "neg", VocabSource::File).unwrap();
        let mixed = merge_consensus(&[p.clone(), p.clone()], &[score(1.0), score(1.0)], &[v.clone(), other.clone()]).unwrap();
        let c = consensus_forward(&e, &mixed, &cfg, 0).unwrap();
        let d = consensus_forward(&e, &merge_consensus(&[p.clone()], &[score(1.0)], &[other]).unwrap(), &cfg, 0).unwrap();
        let mean = (&a + &d) * 0.5;
        assert!((&c - &mean).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn fisher_of_constant_gradient_is_its_square() {
        let g = array![[0.5]];
        let samples = vec![vec![vec![&g]]; 4];
        let f = fisher_from_gradients(&samples).unwrap();
        assert_eq!(f[0].value, 0.25);
        assert_eq!(f[0].n_samples, 4);
        assert!(fisher_from_gradients(&[]).is_err());
    }
}
