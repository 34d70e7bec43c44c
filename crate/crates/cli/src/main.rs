use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mltfr_core::checkpoint;
use mltfr_core::consensus::load_consensus;
use mltfr_core::dataset::{save_interactions, split_leave_one_out};
use mltfr_core::experiment::{
    benchmark_moe_scaling, init_threads, popularity_report, run_experiment, sweep_experts, BenchShapes,
    ExperimentConfig, Variant,
};
use mltfr_core::metrics::{compute_improvement, MetricsReport};
use mltfr_core::model::Model;
use mltfr_core::training::evaluate;

#[derive(Parser)]
#[command(name = "mltfr", version, about = "Token-filtering mixture of experts for sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, k-core filter and re-index interactions; write them densely.
    PrepareData(Common),
    /// Train the configured variant and evaluate it.
    Train(Common),
    /// Evaluate a trained model directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`; defaults to `--out`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run several variants on identical seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "full,wo_sc,llm_te,llm_re,backbone_only")]
        variants: Vec<Variant>,
    },
    /// Repeat training for expert counts 1..=max.
    SweepExperts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max: Option<usize>,
    },
    /// Time one MoE forward for several expert counts.
    BenchMoe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        reps: usize,
    },
    /// Relative improvement of one metrics file over another.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        mltfr: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_experts: Option<usize>,
    #[arg(long)]
    epochs_round1: Option<usize>,
    #[arg(long)]
    epochs_round2: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    eval_k: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(p) = &self.data {
            cfg.data.path = Some(p.clone());
        }
        if let Some(n) = self.n_experts {
            cfg.train.n_experts = n;
        }
        if let Some(e) = self.epochs_round1 {
            cfg.train.epochs_round1 = e;
        }
        if let Some(e) = self.epochs_round2 {
            cfg.train.epochs_round2 = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        if let Some(k) = self.top_k {
            cfg.filter.top_k = k;
        }
        if let Some(t) = self.tau {
            cfg.filter.tau = t;
        }
        if let Some(k) = self.eval_k {
            cfg.eval_k = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn prepare_data(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let data = cfg.load_data()?;
    fs::create_dir_all(&c.out)?;
    save_interactions(&c.out.join("interactions.txt"), &data.sequences)?;
    data.item_ids.save(&c.out.join("item_ids.tsv"))?;
    data.user_ids.save(&c.out.join("user_ids.tsv"))?;
    let split = split_leave_one_out(&data.sequences);
    let n: usize = data.sequences.iter().map(|s| s.items.len()).sum();
    println!(
        "{} users, {} items, {} interactions, {} evaluation cases",
        data.sequences.len(),
        data.n_items,
        n,
        split.eval.len()
    );
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let r = run_experiment(&cfg, Some(&c.out))?;
    println!("{} (popularity HR@{} {:.5})", cfg.variant, cfg.eval_k, r.popularity.hr_at_k);
    println!("{}", r.report);
    Ok(())
}

fn evaluate_dir(c: &Common, model_dir: &Path) -> Result<()> {
    let cfg = match &c.config {
        Some(_) => c.config()?,
        None => ExperimentConfig::load(&model_dir.join("config.toml"))?,
    };
    let data = cfg.load_data()?;
    let split = split_leave_one_out(&data.sequences);
    let mut model = Model::new(cfg.model_config(data.n_items), cfg.build_vocabs()?)?;
    checkpoint::load_into_store(&model_dir.join("model"), &mut model.store)?;
    let sc_dir = model_dir.join("consensus");
    if sc_dir.exists() {
        let sc = load_consensus(&sc_dir, &model.vocabs)?;
        model.attach_consensus(sc, cfg.train.alpha);
    }
    let report = evaluate(&model, &split.eval, cfg.eval_k)?;
    let pop = popularity_report(&split.train, &split.eval, data.n_items, cfg.eval_k)?;
    write(&c.out, "eval_metrics.txt", &report.to_kv())?;
    println!("{} (popularity HR@{} {:.5})", cfg.variant, cfg.eval_k, pop.hr_at_k);
    println!("{report}");
    Ok(())
}

fn ablate(c: &Common, variants: &[Variant]) -> Result<()> {
    let base = c.config()?;
    let mut rows: Vec<(Variant, MetricsReport)> = Vec::new();
    for &v in variants {
        let mut cfg = base.clone();
        cfg.variant = v;
        info!("ablation: {v}");
        let r = run_experiment(&cfg, Some(&c.out.join(v.to_string())))?;
        rows.push((v, r.report));
    }
    let reference = rows.iter().find(|(v, _)| *v == Variant::BackboneOnly).map(|(_, r)| *r);
    let mut csv = String::from("variant,HR@K,NDCG@K,imp_vs_backbone\n");
    println!("| variant | HR@{k} | NDCG@{k} | Imp. |", k = base.eval_k);
    println!("|---|---:|---:|---:|");
    for (v, r) in &rows {
        let imp = reference.and_then(|b| compute_improvement(b.hr_at_k, b.ndcg_at_k, r.hr_at_k, r.ndcg_at_k).ok());
        let imp_s = imp.map(|x| format!("{x:.2}")).unwrap_or_default();
        csv.push_str(&format!("{v},{},{},{imp_s}\n", r.hr_at_k, r.ndcg_at_k));
        println!("| {v} | {:.5} | {:.5} | {imp_s} |", r.hr_at_k, r.ndcg_at_k);
    }
    write(&c.out, "ablation.csv", &csv)
}

fn sweep(c: &Common, max: Option<usize>) -> Result<()> {
    let mut cfg = c.config()?;
    if let Some(m) = max {
        cfg.sweep_max = m;
    }
    if cfg.vocabs.len() < cfg.sweep_max {
        bail!("sweep up to {} experts needs as many vocabularies", cfg.sweep_max);
    }
    for (m, r) in sweep_experts(&cfg, Some(&c.out))? {
        println!("{m} experts: HR@{} {:.5} NDCG {:.5}", r.k, r.hr_at_k, r.ndcg_at_k);
    }
    Ok(())
}

fn bench(c: &Common, n: &[usize], reps: usize) -> Result<()> {
    let seed = c.seed.unwrap_or(0);
    let r = benchmark_moe_scaling(n, &BenchShapes::default(), reps, seed)?;
    write(&c.out, "timing.csv", &r.to_csv())?;
    print!("{}", r.to_csv());
    println!("slope {:.3} ms/expert, R² {:.4}", r.slope, r.r2);
    Ok(())
}

fn report(base: &Path, mltfr: &Path) -> Result<()> {
    let read = |p: &Path| -> Result<MetricsReport> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(MetricsReport::from_kv(&text)?)
    };
    let (b, m) = (read(base)?, read(mltfr)?);
    let imp = compute_improvement(b.hr_at_k, b.ndcg_at_k, m.hr_at_k, m.ndcg_at_k)?;
    println!("| | HR@{k} | NDCG@{k} |", k = m.k);
    println!("|---|---:|---:|");
    println!("| base | {:.5} | {:.5} |", b.hr_at_k, b.ndcg_at_k);
    println!("| mltfr | {:.5} | {:.5} |", m.hr_at_k, m.ndcg_at_k);
    println!("Imp. {imp:.2}%");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    match Cli::parse().command {
        Command::PrepareData(c) => prepare_data(&c),
        Command::Train(c) => train(&c),
        Command::Evaluate { common, model } => {
            let dir = model.unwrap_or_else(|| common.out.clone());
            evaluate_dir(&common, &dir)
        }
        Command::Ablate { common, variants } => ablate(&common, &variants),
        Command::SweepExperts { common, max } => sweep(&common, max),
        Command::BenchMoe { common, n, reps } => bench(&common, &n, reps),
        Command::Report { base, mltfr, .. } => report(&base, &mltfr),
    }
}
