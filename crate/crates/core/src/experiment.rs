//! Experiment configuration and orchestration: variants, sweeps, the
//! popularity baseline and the MoE timing benchmark.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::consensus::save_consensus;
use crate::dataset::{load_interactions, split_leave_one_out, Dataset, EvalCase, InteractionSequence};
use crate::error::{Error, Result};
use crate::metrics::{rank_metrics, MetricsReport};
use crate::model::{Augmentation, Model, ModelConfig};
use crate::moe_core;
use crate::rng;
use crate::semantic_integration::{self, AttnVars, DEFAULT_HEADS};
use crate::synthetic::{planted_dataset, SyntheticSpec};
use crate::token_filter::{self, FilterConfig, DEFAULT_TAU, DEFAULT_TOP_K};
use crate::training::{evaluate, train_two_rounds, History, TrainConfig};
use crate::vocab_store::{load_vocab, random_vocab, synth_vocab, VocabEmbedding, DEFAULT_RANDOM_SCALE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WoSc,
    LlmTe,
    LlmRe,
    BackboneOnly,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "wo_sc" => Ok(Variant::WoSc),
            "llm_te" => Ok(Variant::LlmTe),
            "llm_re" => Ok(Variant::LlmRe),
            "backbone_only" => Ok(Variant::BackboneOnly),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::WoSc => "wo_sc",
            Variant::LlmTe => "llm_te",
            Variant::LlmRe => "llm_re",
            Variant::BackboneOnly => "backbone_only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    File,
    SyntheticClustered,
    SyntheticRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSpec {
    pub name: String,
    pub kind: VocabKind,
    pub path: Option<PathBuf>,
    pub size: usize,
    pub dim: usize,
    pub clusters: usize,
    pub spread: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            name: "vocab".into(),
            kind: VocabKind::SyntheticClustered,
            path: None,
            size: 512,
            dim: 32,
            clusters: 10,
            spread: 0.5,
            scale: DEFAULT_RANDOM_SCALE,
            seed: 0,
        }
    }
}

impl VocabSpec {
    pub fn build(&self, seed_offset: u64) -> Result<VocabEmbedding> {
        let seed = rng::derive(self.seed, &[seed_offset]);
        let mut v = match self.kind {
            VocabKind::File => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("vocabulary {} needs a path", self.name)))?;
                return load_vocab(path);
            }
            VocabKind::SyntheticClustered => synth_vocab(self.size, self.dim, self.clusters, self.spread, seed)?,
            VocabKind::SyntheticRandom => random_vocab(self.size, self.dim, self.scale, seed)?,
        };
        v.name = self.name.clone();
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    /// Interaction file; synthetic data is generated when absent.
    pub path: Option<PathBuf>,
    pub min_core: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            path: None,
            min_core: 5,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    pub top_k: usize,
    pub tau: f64,
    pub cross_heads: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            tau: DEFAULT_TAU,
            cross_heads: DEFAULT_HEADS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub eval_k: usize,
    /// Largest expert count of a sweep.
    pub sweep_max: usize,
    pub data: DataSpec,
    pub vocabs: Vec<VocabSpec>,
    pub filter: FilterSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            eval_k: 20,
            sweep_max: moe_core::MAX_SWEEP_EXPERTS,
            data: DataSpec::default(),
            vocabs: (0..moe_core::DEFAULT_EXPERTS)
                .map(|m| VocabSpec {
                    name: format!("synthetic{m}"),
                    seed: m as u64,
                    ..Default::default()
                })
                .collect(),
            filter: FilterSpec::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if self.eval_k == 0 {
            return Err(Error::Config("eval_k must be positive".into()));
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        for v in &self.vocabs {
            if let (VocabKind::File, Some(p)) = (v.kind, &v.path) {
                if !p.exists() {
                    return Err(Error::Config(format!("vocabulary file {} does not exist", p.display())));
                }
            }
        }
        if self.variant != Variant::BackboneOnly && self.train.n_experts == 0 {
            return Err(Error::Config("n_experts must be positive".into()));
        }
        if self.variant != Variant::BackboneOnly && self.vocabs.len() < self.train.n_experts {
            return Err(Error::Config(format!(
                "{} experts requested but {} vocabularies configured",
                self.train.n_experts,
                self.vocabs.len()
            )));
        }
        Ok(())
    }

    /// Reseeds training, the synthetic data and every synthetic vocabulary.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.synthetic.seed = seed;
        for (m, v) in self.vocabs.iter_mut().enumerate() {
            v.seed = seed * 10 + m as u64;
        }
        self
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(p) => load_interactions(p, self.data.min_core),
            None => planted_dataset(&self.data.synthetic),
        }
    }

    /// Vocabularies for the variant: the configured ones, or random ones of
    /// identical shape for `llm_re`.
    pub fn build_vocabs(&self) -> Result<Vec<VocabEmbedding>> {
        if self.variant == Variant::BackboneOnly {
            return Ok(Vec::new());
        }
        let specs = &self.vocabs[..self.train.n_experts];
        specs
            .iter()
            .enumerate()
            .map(|(m, s)| {
                let v = s.build(m as u64)?;
                if self.variant == Variant::LlmRe {
                    let mut r = random_vocab(v.vocab_size(), v.dim(), DEFAULT_RANDOM_SCALE, rng::derive(s.seed, &[99, m as u64]))?;
                    r.name = format!("{}-random", v.name);
                    Ok(r)
                } else {
                    Ok(v)
                }
            })
            .collect()
    }

    pub fn model_config(&self, n_items: usize) -> ModelConfig {
        ModelConfig {
            n_items,
            backbone: self.backbone,
            top_k: self.filter.top_k,
            tau: self.filter.tau.clamp(token_filter::TAU_RANGE.0, token_filter::TAU_RANGE.1),
            cross_heads: self.filter.cross_heads,
            augmentation: match self.variant {
                Variant::Full | Variant::WoSc => Augmentation::Moe,
                Variant::LlmTe | Variant::LlmRe => Augmentation::TokenInjection,
                Variant::BackboneOnly => Augmentation::None,
            },
            init_seed: rng::derive(self.train.seed, &[rng::tag::INIT]),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        match self.variant {
            Variant::Full => {}
            _ => {
                t.use_consensus = false;
                t.epochs_round1 += t.epochs_round2;
                t.epochs_round2 = 0;
            }
        }
        t
    }
}

/// Caps the evaluation thread pool from `MLTFR_THREADS`; a no-op once the
/// global pool exists.
pub fn init_threads() {
    if let Some(n) = std::env::var("MLTFR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 && rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialized; MLTFR_THREADS ignored");
        }
    }
}

pub struct ExperimentResult {
    pub variant: Variant,
    pub report: MetricsReport,
    pub popularity: MetricsReport,
    pub history: History,
    pub model: Model,
    pub sc_hash_start: Option<String>,
    pub sc_hash_end: Option<String>,
}

/// Scores every item by its frequency in the training sequences.
pub fn popularity_scores(train: &[InteractionSequence], n_items: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_items];
    for s in train {
        for &i in &s.items {
            counts[i - 1] += 1.0;
        }
    }
    counts
}

pub fn popularity_report(train: &[InteractionSequence], eval: &[EvalCase], n_items: usize, k: usize) -> Result<MetricsReport> {
    let scores = popularity_scores(train, n_items);
    let all: Vec<Vec<f64>> = eval.iter().map(|_| scores.clone()).collect();
    let targets: Vec<usize> = eval.iter().map(|c| c.target - 1).collect();
    rank_metrics(&all, &targets, k)
}

/// Splits, trains the configured variant and evaluates on the held-out
/// items. Artifacts go to `out` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    run_on_dataset(cfg, &data, out)
}

pub fn run_on_dataset(cfg: &ExperimentConfig, data: &Dataset, out: Option<&Path>) -> Result<ExperimentResult> {
    let split = split_leave_one_out(&data.sequences);
    if split.train.is_empty() || split.eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocabs = cfg.build_vocabs()?;
    let model = Model::new(cfg.model_config(data.n_items), vocabs)?;
    let started = Instant::now();
    let outcome = train_two_rounds(model, &split.train, &cfg.train_config())?;
    let report = evaluate(&outcome.model, &split.eval, cfg.eval_k)?;
    let popularity = popularity_report(&split.train, &split.eval, data.n_items, cfg.eval_k)?;
    info!(
        "{}: HR@{k} {:.4} NDCG@{k} {:.4} (popularity HR {:.4}) in {:.1}s",
        cfg.variant,
        report.hr_at_k,
        report.ndcg_at_k,
        popularity.hr_at_k,
        started.elapsed().as_secs_f64(),
        k = cfg.eval_k
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("metrics.txt", report.to_kv())?;
        write("popularity.txt", popularity.to_kv())?;
        write("config.toml", cfg.to_toml()?)?;
        outcome.history.write_csv(&dir.join("history.csv"))?;
        checkpoint::save_store(&dir.join("model"), &outcome.model.store)?;
        if let Some(sc) = &outcome.consensus {
            save_consensus(&dir.join("consensus"), sc)?;
        }
    }
    Ok(ExperimentResult {
        variant: cfg.variant,
        report,
        popularity,
        history: outcome.history,
        model: outcome.model,
        sc_hash_start: outcome.sc_hash_start,
        sc_hash_end: outcome.sc_hash_end,
    })
}

/// Runs the variant once per expert count `1..=cfg.sweep_max`, each using the
/// first `m` vocabularies.
pub fn sweep_experts(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<(usize, MetricsReport)>> {
    let data = cfg.load_data()?;
    let mut rows = Vec::new();
    for m in 1..=cfg.sweep_max.min(cfg.vocabs.len()) {
        let mut c = cfg.clone();
        c.train.n_experts = m;
        let dir = out.map(|d| d.join(format!("experts_{m}")));
        let r = run_on_dataset(&c, &data, dir.as_deref())?;
        rows.push((m, r.report));
    }
    if let Some(dir) = out {
        let mut csv = String::from("n_experts,HR@K,NDCG@K\n");
        for (m, r) in &rows {
            csv.push_str(&format!("{m},{},{}\n", r.hr_at_k, r.ndcg_at_k));
        }
        let p = dir.join("sweep.csv");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}

/// Fixed shapes of the MoE timing benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchShapes {
    /// Sequence length `T`.
    pub seq_len: usize,
    pub top_k: usize,
    pub d_emb: usize,
    pub d_llm: usize,
    pub vocab_size: usize,
    pub heads: usize,
}

impl Default for BenchShapes {
    fn default() -> Self {
        Self {
            seq_len: 50,
            top_k: 64,
            d_emb: 64,
            d_llm: 128,
            vocab_size: 2048,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub n_experts: Vec<usize>,
    pub median_ms: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl BenchResult {
    pub fn residuals(&self) -> Vec<f64> {
        self.n_experts
            .iter()
            .zip(&self.median_ms)
            .map(|(&n, &t)| t - (self.intercept + self.slope * n as f64))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_experts,median_ms,fit_residual\n");
        for ((n, t), r) in self.n_experts.iter().zip(&self.median_ms).zip(self.residuals()) {
            s.push_str(&format!("{n},{t},{r}\n"));
        }
        s
    }
}

/// Least-squares line through `(x, y)`: `(slope, intercept, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

type BenchExpert = (VocabEmbedding, [Arc<Mat>; 6], Arc<Mat>);

/// One MoE forward (filter, integrate, gate, aggregate) for `n` experts. The
/// aligned, normalised vocabulary is computed once per parameter state, as
/// in a training batch.
fn moe_forward(e: &Mat, experts: &[BenchExpert], gate: &(Mat, Mat), shapes: &BenchShapes) -> Result<Mat> {
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let rows: Vec<usize> = (0..e.nrows()).collect();
    let u = token_filter::interest(&mut tape, ev, &rows)?;
    let filter = FilterConfig {
        k: shapes.top_k,
        tau: DEFAULT_TAU,
        train_mode: false,
    };
    let mut outs = Vec::with_capacity(experts.len());
    for (vocab, p, normed) in experts {
        let normed = tape.constant(Arc::clone(normed));
        let scores = token_filter::cosine_scores(&mut tape, normed, u)?;
        let sel = token_filter::select_tokens(&mut tape, scores, vocab, &filter, None, None)?;
        let vars = AttnVars {
            w_q: tape.constant(Arc::clone(&p[2])),
            w_k: tape.constant(Arc::clone(&p[3])),
            w_v: tape.constant(Arc::clone(&p[4])),
            w_o: tape.constant(Arc::clone(&p[5])),
        };
        outs.push(semantic_integration::cross_attention(&mut tape, ev, sel.domain, &vars, shapes.heads)?.output);
    }
    let gw = tape.constant(gate.0.clone());
    let gb = tape.constant(gate.1.clone());
    let g = moe_core::gate(&mut tape, ev, gw, gb, 0..e.nrows())?;
    let out = moe_core::aggregate(&mut tape, g, &outs)?;
    Ok(tape.value(out).clone())
}

/// Median wall-clock time of one MoE forward per expert count, with a linear
/// fit over `n`. Repetitions cycle through the expert counts.
pub fn benchmark_moe_scaling(n_list: &[usize], shapes: &BenchShapes, repetitions: usize, seed: u64) -> Result<BenchResult> {
    if n_list.is_empty() || repetitions == 0 {
        return Err(Error::Config("benchmark needs expert counts and repetitions".into()));
    }
    let n_max = *n_list.iter().max().expect("non-empty");
    let d = shapes.d_emb;
    let mut r = rng::stream(seed, &[rng::tag::INIT, 500]);
    let mut gauss = |rows: usize, cols: usize, std: f64| {
        let mut m = Mat::zeros((rows, cols));
        let u = crate::vocab_store::unit_rows(&mut r, rows, cols);
        m.assign(&(u * std * (cols as f64).sqrt()));
        Arc::new(m)
    };
    let e = (*gauss(shapes.seq_len, d, 0.1)).clone();
    let mut experts = Vec::with_capacity(n_max);
    for m in 0..n_max {
        let vocab = synth_vocab(shapes.vocab_size, shapes.d_llm, 16, 0.5, rng::derive(seed, &[m as u64]))?;
        let p = [
            gauss(shapes.d_llm, d, 0.1),
            gauss(1, d, 0.01),
            gauss(d, d, 0.1),
            gauss(shapes.d_llm, d, 0.1),
            gauss(shapes.d_llm, d, 0.1),
            gauss(d, d, 0.1),
        ];
        let mut tape = Tape::new();
        let voc = tape.constant(Arc::clone(&vocab.matrix));
        let w = tape.constant(Arc::clone(&p[0]));
        let b = tape.constant(Arc::clone(&p[1]));
        let normed = token_filter::aligned_normalized(&mut tape, voc, w, b);
        let normed = tape.value_arc(normed);
        experts.push((vocab, p, normed));
    }
    let gates: Vec<(Mat, Mat)> = n_list
        .iter()
        .map(|&n| ((*gauss(n, d, 0.1)).clone(), Mat::zeros((n, shapes.seq_len))))
        .collect();
    for _ in 0..2 {
        for (&n, gate) in n_list.iter().zip(&gates) {
            moe_forward(&e, &experts[..n], gate, shapes)?;
        }
    }
    let mut times = vec![Vec::with_capacity(repetitions); n_list.len()];
    for _ in 0..repetitions {
        for ((&n, gate), t) in n_list.iter().zip(&gates).zip(times.iter_mut()) {
            let start = Instant::now();
            std::hint::black_box(moe_forward(&e, &experts[..n], gate, shapes)?);
            t.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let medians: Vec<f64> = times
        .into_iter()
        .map(|mut t| {
            t.sort_by(f64::total_cmp);
            t[t.len() / 2]
        })
        .collect();
    let x: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
    let (slope, intercept, r2) = linear_fit(&x, &medians);
    Ok(BenchResult {
        n_experts: n_list.to_vec(),
        median_ms: medians,
        slope,
        intercept,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Full, Variant::WoSc, Variant::LlmTe, Variant::LlmRe, Variant::BackboneOnly] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("mystery".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn config_toml_round_trip_and_unknown_variant() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("variant = \"nope\"").is_err());
        let missing = "[data]\npath = \"/definitely/not/here.tsv\"\n";
        assert!(ExperimentConfig::from_toml(missing).is_err());
    }

    #[test]
    fn linear_fit_exact_line() {
        let (s, i, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn popularity_ranks_by_frequency() {
        let train = vec![InteractionSequence::new(1, vec![2, 2, 3]), InteractionSequence::new(2, vec![2, 1])];
        assert_eq!(popularity_scores(&train, 3), vec![1.0, 3.0, 1.0]);
        let eval = vec![EvalCase { user_id: 1, prefix: vec![1], target: 2 }];
        assert_eq!(popularity_report(&train, &eval, 3, 1).unwrap().hr_at_k, 1.0);
    }

    #[test]
    fn benchmark_time_grows_with_experts() {
        let shapes = BenchShapes {
            seq_len: 10,
            top_k: 16,
            d_emb: 16,
            d_llm: 32,
            vocab_size: 512,
            heads: 2,
        };
        let r = benchmark_moe_scaling(&[1, 4], &shapes, 15, 0).unwrap();
        assert!(r.median_ms[1] > r.median_ms[0]);
        assert!(r.to_csv().starts_with("n_experts,median_ms,fit_residual\n1,"));
    }
}
