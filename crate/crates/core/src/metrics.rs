//! Ranking metrics and the relative-improvement statistic.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub top1: f64,
    pub k: usize,
    pub n_users: usize,
}

impl MetricsReport {
    pub fn to_kv(&self) -> String {
        format!(
            "hr_at_k={}\nndcg_at_k={}\ntop1={}\nk={}\nn_users={}\n",
            self.hr_at_k, self.ndcg_at_k, self.top1, self.k, self.n_users
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = MetricsReport {
            hr_at_k: f64::NAN,
            ndcg_at_k: f64::NAN,
            top1: f64::NAN,
            k: 0,
            n_users: 0,
        };
        for (n, line) in text.lines().enumerate() {
            let Some((key, val)) = line.split_once('=') else {
                continue;
            };
            let bad = || Error::Parse {
                line: n + 1,
                message: format!("bad value for {key}"),
            };
            match key.trim() {
                "hr_at_k" => r.hr_at_k = val.trim().parse().map_err(|_| bad())?,
                "ndcg_at_k" => r.ndcg_at_k = val.trim().parse().map_err(|_| bad())?,
                "top1" => r.top1 = val.trim().parse().map_err(|_| bad())?,
                "k" => r.k = val.trim().parse().map_err(|_| bad())?,
                "n_users" => r.n_users = val.trim().parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        Ok(r)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "| users | HR@{k} | NDCG@{k} | Top-1 |", k = self.k)?;
        writeln!(f, "|------:|------:|------:|------:|")?;
        write!(
            f,
            "| {} | {:.5} | {:.5} | {:.5} |",
            self.n_users, self.hr_at_k, self.ndcg_at_k, self.top1
        )
    }
}

/// 1-based rank of `target`; equal scores rank the lower index first.
pub fn rank_of(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&t) = scores.get(target) else {
        return Err(Error::Contract(format!("target index {target} outside {} scores", scores.len())));
    };
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("scores contain NaN".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count();
    Ok(ahead + 1)
}

/// HR@K, NDCG@K and Top-1 over users; `targets[u]` indexes `scores[u]`.
pub fn rank_metrics(scores: &[Vec<f64>], targets: &[usize], k: usize) -> Result<MetricsReport> {
    if scores.len() != targets.len() {
        return Err(Error::Contract("every user needs exactly one target".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be positive".into()));
    }
    let (mut hr, mut ndcg, mut top1) = (0.0, 0.0, 0.0);
    for (s, &t) in scores.iter().zip(targets) {
        let r = rank_of(s, t)?;
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
        if r == 1 {
            top1 += 1.0;
        }
    }
    let n = scores.len().max(1) as f64;
    Ok(MetricsReport {
        hr_at_k: hr / n,
        ndcg_at_k: ndcg / n,
        top1: top1 / n,
        k,
        n_users: scores.len(),
    })
}

/// Fraction of users whose target outranks every other candidate of its pool.
pub fn top1_restricted(scores: &[Vec<f64>], candidates: &[Vec<usize>], targets: &[usize]) -> Result<f64> {
    if scores.len() != targets.len() || candidates.len() != targets.len() {
        return Err(Error::Contract("every user needs exactly one target".into()));
    }
    let mut hits = 0usize;
    for ((s, c), &t) in scores.iter().zip(candidates).zip(targets) {
        let pos = c
            .iter()
            .position(|&i| i == t)
            .ok_or_else(|| Error::Contract("target missing from its candidate pool".into()))?;
        let sub: Vec<f64> = c
            .iter()
            .map(|&i| s.get(i).copied().ok_or_else(|| Error::Contract(format!("candidate {i} out of range"))))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..c.len()).collect();
        order.sort_by_key(|&j| c[j]);
        let sorted: Vec<f64> = order.iter().map(|&j| sub[j]).collect();
        let target_pos = order.iter().position(|&j| j == pos).expect("present");
        if rank_of(&sorted, target_pos)? == 1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / targets.len().max(1) as f64)
}

/// `100 · (√((hr_m/hr_b)·(ndcg_m/ndcg_b)) − 1)`, rounded to two decimals.
pub fn compute_improvement(hr_base: f64, ndcg_base: f64, hr_mltfr: f64, ndcg_mltfr: f64) -> Result<f64> {
    let all = [hr_base, ndcg_base, hr_mltfr, ndcg_mltfr];
    if all.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Contract("improvement inputs must be positive".into()));
    }
    let raw = 100.0 * (((hr_mltfr / hr_base) * (ndcg_mltfr / ndcg_base)).sqrt() - 1.0);
    Ok((raw * 100.0).round() / 100.0)
}
