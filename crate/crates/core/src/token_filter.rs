//! User-guided token selection: interest pooling, cosine scoring in a
//! learned alignment space, and Gumbel-perturbed hard Top-K selection with a
//! straight-through backward path.

use std::sync::Arc;

use ndarray::{Array1, Axis};
use rand::Rng as _;

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::vocab_store::VocabEmbedding;

pub const DEFAULT_TOP_K: usize = 256;
pub const DEFAULT_TAU: f64 = 0.7;
pub const TAU_RANGE: (f64, f64) = (0.3, 1.0);

/// Projection from the vocabulary space into the item-embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignParams {
    /// `d_llm × d_emb`
    pub w_align: Mat,
    /// `1 × d_emb`
    pub b_align: Mat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    pub k: usize,
    pub tau: f64,
    /// Gumbel noise on.
    pub train_mode: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_TOP_K,
            tau: DEFAULT_TAU,
            train_mode: false,
        }
    }
}

impl FilterConfig {
    /// Builds a config with `tau` clamped into the supported range.
    pub fn clamped(k: usize, tau: f64) -> Self {
        Self {
            k,
            tau: tau.clamp(TAU_RANGE.0, TAU_RANGE.1),
            train_mode: false,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.k == 0 || self.k > vocab_size {
            return Err(Error::Config(format!(
                "top-k must be in [1, {vocab_size}], got {}",
                self.k
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub soft_dist: Vec<f64>,
    pub st_weights: Vec<f64>,
    /// `K × d_llm` raw vocabulary rows.
    pub domain_tokens: Mat,
}

/// Frozen selection used to replay a forward pass: the hard index set and
/// the soft distribution subtracted in the straight-through construction.
#[derive(Clone, Debug)]
pub struct SelectionAnchor {
    pub indices: Vec<usize>,
    pub soft: Mat,
}

/// Indices of the `k` largest entries, largest first, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Standard Gumbel draw `-ln(-ln u)`, `u ∈ (0, 1)`.
pub fn gumbel(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Mean of the listed rows of `e` (`1 × d_emb`).
pub fn interest(tape: &mut Tape, e: Var, rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(tape.mean_rows(e, rows))
}

/// Row `t` is the mean of rows `0..=t` of `e` (`L × d_emb`).
pub fn prefix_interest(tape: &mut Tape, e: Var) -> Result<Var> {
    let len = tape.shape(e).0;
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let avg = Mat::from_shape_fn((len, len), |(t, j)| if j <= t { 1.0 / (t + 1) as f64 } else { 0.0 });
    let a = tape.constant(avg);
    Ok(tape.matmul(a, e))
}

/// Prefix means when `causal`, otherwise the single whole-sequence mean.
pub fn pooled_interest(tape: &mut Tape, e: Var, causal: bool) -> Result<Var> {
    if causal {
        prefix_interest(tape, e)
    } else {
        let rows: Vec<usize> = (0..tape.shape(e).0).collect();
        interest(tape, e, &rows)
    }
}

/// Unit-normalized aligned vocabulary `normalize(W_voc · W_align + b_align)`.
/// Rows that project to zero stay zero and therefore score 0.
pub fn aligned_normalized(tape: &mut Tape, vocab: Var, w_align: Var, b_align: Var) -> Var {
    let proj = tape.matmul(vocab, w_align);
    let shifted = tape.add_row(proj, b_align);
    tape.l2_normalize_rows(shifted)
}

/// Cosine similarity of every aligned token with each interest row (`R×V`).
pub fn cosine_scores(tape: &mut Tape, normed_vocab: Var, interest: Var) -> Result<Var> {
    let u = tape.value(interest);
    if u.outer_iter().any(|row| row.iter().all(|&v| v == 0.0)) {
        return Err(Error::DegenerateInterest);
    }
    let unit = tape.l2_normalize_rows(interest);
    Ok(tape.matmul_bt(unit, normed_vocab))
}

/// Tape-level result of a selection over `R` score rows.
pub struct Selection {
    /// Row-major `R × K` token indices.
    pub indices: Vec<usize>,
    /// `R×V` soft distributions.
    pub soft: Var,
    /// `R×V` straight-through weights.
    pub st: Var,
    /// `(R·K) × 1` straight-through weights of the selected tokens.
    pub weights: Var,
    /// `(R·K) × d_llm` gathered rows scaled by their straight-through
    /// weights; block `r` belongs to score row `r`.
    pub domain: Var,
}

/// Soft distribution, hard Top-K and gathered tokens for each score row.
///
/// `noise` supplies Gumbel draws when `cfg.train_mode` is set. With an
/// `anchor`, the index sets are reused and the straight-through value becomes
/// `hard + (p - anchor.soft)`.
pub fn select_tokens(
    tape: &mut Tape,
    scores: Var,
    vocab: &VocabEmbedding,
    cfg: &FilterConfig,
    noise: Option<&mut Rng>,
    anchor: Option<&SelectionAnchor>,
) -> Result<Selection> {
    let v = vocab.vocab_size();
    cfg.validate(v)?;
    let (rows, cols) = tape.shape(scores);
    if cols != v || rows == 0 {
        return Err(Error::Contract(format!(
            "scores shape {:?} does not match vocabulary size {v}",
            tape.shape(scores)
        )));
    }
    if let Some(a) = anchor {
        if a.soft.dim() != (rows, v) || a.indices.len() != rows * cfg.k {
            return Err(Error::Contract("anchor does not match the selection shape".into()));
        }
    }
    let perturbed = match (cfg.train_mode, noise) {
        (true, Some(rng)) => {
            let g = Mat::from_shape_simple_fn((rows, v), || gumbel(rng));
            tape.shift(scores, &g)
        }
        _ => scores,
    };
    let logits = tape.scale(perturbed, 1.0 / cfg.tau);
    let soft = tape.softmax(logits);
    let p = tape.value(soft).clone();
    let indices: Vec<usize> = match anchor {
        Some(a) => a.indices.clone(),
        None => p
            .outer_iter()
            .flat_map(|row| top_k(row.as_slice().expect("contiguous"), cfg.k))
            .collect(),
    };
    let mut st_value = Mat::zeros((rows, v));
    for (n, &i) in indices.iter().enumerate() {
        st_value[[n / cfg.k, i]] = 1.0;
    }
    let reference = anchor.map_or(&p, |a| &a.soft);
    st_value += &(&p - reference);
    let st = tape.straight_through(soft, st_value);
    let weights = tape.pick_per_row(st, &indices, cfg.k);
    let raw = tape.constant(Arc::new(vocab.matrix.select(Axis(0), &indices)));
    let domain = tape.scale_rows(raw, weights);
    Ok(Selection {
        indices,
        soft,
        st,
        weights,
        domain,
    })
}

/// Mean of the valid rows of `e`.
pub fn pool_user_interest(e: &Mat, valid_mask: &[bool]) -> Result<Array1<f64>> {
    if valid_mask.len() != e.nrows() {
        return Err(Error::Contract("mask length must equal sequence length".into()));
    }
    let rows: Vec<usize> = (0..e.nrows()).filter(|&r| valid_mask[r]).collect();
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let i = interest(&mut tape, ev, &rows)?;
    Ok(tape.value(i).row(0).to_owned())
}

/// Cosine score of every vocabulary token against `interest`.
pub fn score_tokens(vocab: &VocabEmbedding, align: &AlignParams, interest: &[f64]) -> Result<Vec<f64>> {
    if align.w_align.nrows() != vocab.dim()
        || align.w_align.ncols() != interest.len()
        || align.b_align.dim() != (1, interest.len())
    {
        return Err(Error::Contract("alignment shapes do not match vocabulary/interest".into()));
    }
    let mut tape = Tape::new();
    let voc = tape.constant(Arc::clone(&vocab.matrix));
    let w = tape.constant(align.w_align.clone());
    let b = tape.constant(align.b_align.clone());
    let normed = aligned_normalized(&mut tape, voc, w, b);
    let u = tape.constant(Mat::from_shape_vec((1, interest.len()), interest.to_vec()).expect("row"));
    let s = cosine_scores(&mut tape, normed, u)?;
    Ok(tape.value(s).iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// Selection over precomputed scores. `seed` keys the Gumbel stream.
pub fn filter_tokens(
    scores: &[f64],
    vocab: &VocabEmbedding,
    cfg: &FilterConfig,
    seed: u64,
) -> Result<SelectionResult> {
    let mut tape = Tape::new();
    let s = tape.constant(Mat::from_shape_vec((1, scores.len()), scores.to_vec()).expect("row"));
    let mut rng = rng::stream(seed, &[rng::tag::GUMBEL]);
    let sel = select_tokens(&mut tape, s, vocab, cfg, Some(&mut rng), None)?;
    Ok(SelectionResult {
        indices: sel.indices,
        soft_dist: tape.value(sel.soft).iter().copied().collect(),
        st_weights: tape.value(sel.st).iter().copied().collect(),
        domain_tokens: tape.value(sel.domain).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab_store::{random_vocab, VocabSource};
    use ndarray::array;

    #[test]
    fn pooling_examples() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(pool_user_interest(&e, &[true, true]).unwrap().to_vec(), vec![0.5, 0.5]);
        let e = array![[3.0, 4.0]];
        assert_eq!(pool_user_interest(&e, &[true]).unwrap().to_vec(), vec![3.0, 4.0]);
        let e = array![[2.0, 2.0], [9.0, 9.0]];
        assert_eq!(pool_user_interest(&e, &[true, false]).unwrap().to_vec(), vec![2.0, 2.0]);
        assert!(matches!(pool_user_interest(&e, &[false, false]), Err(Error::EmptySequence)));
    }

    fn identity_align(d: usize) -> AlignParams {
        AlignParams {
            w_align: Mat::eye(d),
            b_align: Mat::zeros((1, d)),
        }
    }

    #[test]
    fn scoring_examples() {
        let interest = [0.6, 0.8];
        let vocab = VocabEmbedding::new(
            array![[0.6, 0.8], [-0.8, 0.6], [-0.6, -0.8], [0.0, 0.0]],
            "t",
            VocabSource::File,
        )
        .unwrap();
        let s = score_tokens(&vocab, &identity_align(2), &interest).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!((s[2] + 1.0).abs() < 1e-12);
        assert_eq!(s[3], 0.0);
        assert!(matches!(
            score_tokens(&vocab, &identity_align(2), &[0.0, 0.0]),
            Err(Error::DegenerateInterest)
        ));
    }

    #[test]
    fn scoring_is_scale_invariant() {
        let vocab = random_vocab(30, 5, 1.0, 3).unwrap();
        let mut r = rng::stream(4, &[]);
        let align = AlignParams {
            w_align: Mat::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0)),
            b_align: Mat::from_shape_fn((1, 3), |_| r.random_range(-1.0..1.0)),
        };
        let u = [0.3, -1.2, 0.5];
        let a = score_tokens(&vocab, &align, &u).unwrap();
        let b = score_tokens(&vocab, &align, &u.map(|x| 7.5 * x)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_picks_argmax() {
        let vocab = random_vocab(3, 2, 1.0, 0).unwrap();
        let cfg = FilterConfig {
            k: 1,
            tau: 0.7,
            train_mode: false,
        };
        let r = filter_tokens(&[2.0, 1.0, 0.5], &vocab, &cfg, 0).unwrap();
        assert_eq!(r.indices, vec![0]);
        assert_eq!(r.st_weights, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.domain_tokens.row(0), vocab.matrix.row(0));
    }

    #[test]
    fn ties_break_to_lower_index() {
        assert_eq!(top_k(&[0.1, 0.5, 0.2, 0.2], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.3, 0.3, 0.3], 3), vec![0, 1, 2]);
    }

    #[test]
    fn oversized_k_is_rejected() {
        let vocab = random_vocab(3, 2, 1.0, 0).unwrap();
        let cfg = FilterConfig {
            k: 4,
            ..FilterConfig::default()
        };
        assert!(matches!(filter_tokens(&[0.0; 3], &vocab, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn low_temperature_concentrates() {
        let vocab = random_vocab(5, 2, 1.0, 0).unwrap();
        let cfg = FilterConfig {
            k: 1,
            tau: 1e-3,
            train_mode: false,
        };
        let r = filter_tokens(&[0.1, 0.9, 0.3, -0.5, 0.2], &vocab, &cfg, 0).unwrap();
        assert!((r.soft_dist[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn train_mode_noise_is_seeded() {
        let vocab = random_vocab(50, 2, 1.0, 0).unwrap();
        let cfg = FilterConfig {
            k: 5,
            tau: 0.7,
            train_mode: true,
        };
        let s: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = filter_tokens(&s, &vocab, &cfg, 1).unwrap();
        let b = filter_tokens(&s, &vocab, &cfg, 1).unwrap();
        let c = filter_tokens(&s, &vocab, &cfg, 2).unwrap();
        assert_eq!(a.soft_dist, b.soft_dist);
        assert_ne!(a.soft_dist, c.soft_dist);
        let sum: f64 = a.soft_dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    /// Weighted sum of the straight-through weights and of the soft
    /// distribution share a gradient w.r.t. the scores; the soft side is
    /// checked by central differences.
    #[test]
    fn straight_through_gradient_matches_soft_path() {
        let vocab = random_vocab(12, 3, 1.0, 0).unwrap();
        let cfg = FilterConfig {
            k: 4,
            tau: 0.7,
            train_mode: false,
        };
        let s0: Vec<f64> = (0..12).map(|i| ((i * 7 % 12) as f64 / 6.0) - 1.0).collect();
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).cos()).collect();
        let wmat = Mat::from_shape_vec((1, 12), w.clone()).unwrap();

        let mut tape = Tape::new();
        let s = tape.param(Arc::new(Mat::from_shape_vec((1, 12), s0.clone()).unwrap()));
        let sel = select_tokens(&mut tape, s, &vocab, &cfg, None, None).unwrap();
        let wv = tape.constant(wmat.clone());
        let weighted = tape.mul(sel.st, wv);
        let root = tape.sum(weighted);
        let analytic = tape.backward(root).get(s).unwrap().clone();

        let soft_objective = |sv: &[f64]| {
            let max = sv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sv.iter().map(|x| ((x - max) / cfg.tau).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().zip(&w).map(|(a, b)| a / z * b).sum::<f64>()
        };
        let h = 1e-5;
        for i in 0..12 {
            let mut plus = s0.clone();
            plus[i] += h;
            let mut minus = s0.clone();
            minus[i] -= h;
            let fd = (soft_objective(&plus) - soft_objective(&minus)) / (2.0 * h);
            let a = analytic[[0, i]];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-8), "{i}: {a} vs {fd}");
        }
    }
}
