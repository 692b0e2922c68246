//! Cross-modality retrieval evaluation: distance ranking, CMC, mAP and mINP.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingBatch;
use crate::error::{AgmError, Result};

/// `mask[q][g] == true` removes gallery item `g` from query `q`'s ranking.
pub type ExclusionMask = Vec<Vec<bool>>;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRanking {
    /// Unmasked gallery indices by ascending distance.
    pub order: Vec<usize>,
    /// Same-identity flags aligned with `order`.
    pub relevant: Vec<bool>,
}

impl QueryRanking {
    fn relevant_ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.relevant.iter().enumerate().filter(|(_, &r)| r).map(|(i, _)| i + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
    pub num_gallery: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_inputs(query: &EmbeddingBatch, gallery: &EmbeddingBatch, exclusion: Option<&ExclusionMask>) -> Result<()> {
    if query.dim() != gallery.dim() {
        return Err(AgmError::ShapeMismatch(format!(
            "query dimension {} differs from gallery dimension {}",
            query.dim(),
            gallery.dim()
        )));
    }
    if let Some(mask) = exclusion {
        if mask.len() != query.len() || mask.iter().any(|row| row.len() != gallery.len()) {
            return Err(AgmError::ShapeMismatch(format!(
                "exclusion mask must be {}×{}",
                query.len(),
                gallery.len()
            )));
        }
    }
    Ok(())
}

/// Orders each query's unmasked gallery by Euclidean distance, ties by
/// ascending gallery index.
pub fn rank(query: &EmbeddingBatch, gallery: &EmbeddingBatch, exclusion: Option<&ExclusionMask>) -> Result<RankingResult> {
    check_inputs(query, gallery, exclusion)?;
    let excluded = |q: usize, g: usize| exclusion.map_or(false, |m| m[q][g]);
    let mut queries = Vec::with_capacity(query.len());
    let mut offenders = Vec::new();
    for q in 0..query.len() {
        let mut scored: Vec<(f64, usize)> = (0..gallery.len())
            .filter(|&g| !excluded(q, g))
            .map(|g| (sq_dist(query.row(q), gallery.row(g)), g))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = scored.into_iter().map(|(_, g)| g).collect();
        let relevant: Vec<bool> = order.iter().map(|&g| gallery.labels()[g] == query.labels()[q]).collect();
        if !relevant.contains(&true) {
            offenders.push(format!("query {q} (identity {})", query.labels()[q]));
        }
        queries.push(QueryRanking { order, relevant });
    }
    if !offenders.is_empty() {
        return Err(AgmError::Data(format!("no relevant gallery item for {}", offenders.join(", "))));
    }
    Ok(RankingResult {
        queries,
        num_gallery: gallery.len(),
    })
}

/// Fraction of queries with a relevant item in the top `k`.
pub fn cmc(r: &RankingResult, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(AgmError::Precondition("rank cutoff must be at least 1".into()));
    }
    let hits = r
        .queries
        .iter()
        .filter(|q| q.relevant.iter().take(k).any(|&rel| rel))
        .count();
    Ok(hits as f64 / r.queries.len() as f64)
}

pub fn cmc_curve(r: &RankingResult, max_k: usize) -> Vec<f64> {
    (1..=max_k).map(|k| cmc(r, k).unwrap_or(0.0)).collect()
}

fn average_precision(q: &QueryRanking) -> f64 {
    let ranks: Vec<usize> = q.relevant_ranks().collect();
    let sum: f64 = ranks.iter().enumerate().map(|(i, &rank)| (i + 1) as f64 / rank as f64).sum();
    sum / ranks.len() as f64
}

pub fn mean_ap(r: &RankingResult) -> f64 {
    r.queries.iter().map(average_precision).sum::<f64>() / r.queries.len() as f64
}

/// Mean over queries of `|G| / R_hard`, the relevant count over the rank of
/// the last relevant item.
pub fn mean_inp(r: &RankingResult) -> f64 {
    r.queries
        .iter()
        .map(|q| {
            let ranks: Vec<usize> = q.relevant_ranks().collect();
            ranks.len() as f64 / *ranks.last().expect("ranking has a relevant item") as f64
        })
        .sum::<f64>()
        / r.queries.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub num_query: usize,
    pub num_gallery: usize,
}

impl MetricsReport {
    pub fn from_ranking(r: &RankingResult) -> Self {
        let at = |k| cmc(r, k).expect("cutoff is positive");
        MetricsReport {
            rank1: at(1),
            rank5: at(5),
            rank10: at(10),
            rank20: at(20),
            map: mean_ap(r),
            minp: mean_inp(r),
            num_query: r.queries.len(),
            num_gallery: r.num_gallery,
        }
    }
}

/// mAP of uniformly shuffled rankings: mean and standard deviation over
/// `shuffles` draws.
pub fn permutation_baseline(r: &RankingResult, shuffles: usize, seed: u64) -> (f64, f64) {
    let mut rng = crate::seed::rng(seed, &[crate::seed::tag("permutation_baseline")]);
    let mut shuffled = r.clone();
    let samples: Vec<f64> = (0..shuffles)
        .map(|_| {
            for q in &mut shuffled.queries {
                q.relevant.shuffle(&mut rng);
            }
            mean_ap(&shuffled)
        })
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Exhaustive re-derivation of every metric. A relevant item's rank is one
/// plus the number of unmasked items that precede it under the distance and
/// index tie rule; nothing is sorted.
pub mod oracle {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    pub struct OracleMetrics {
        /// `cmc[k-1]` is the rank-k accuracy for `k` up to the gallery size.
        pub cmc: Vec<f64>,
        pub map: f64,
        pub minp: f64,
    }

    pub fn brute_force_metrics(
        query: &EmbeddingBatch,
        gallery: &EmbeddingBatch,
        exclusion: Option<&ExclusionMask>,
    ) -> Result<OracleMetrics> {
        check_inputs(query, gallery, exclusion)?;
        let ng = gallery.len();
        let nq = query.len() as f64;
        let mut hits = vec![0usize; ng];
        let (mut map, mut minp) = (0.0, 0.0);
        for q in 0..query.len() {
            let kept = |g: usize| !exclusion.map_or(false, |m| m[q][g]);
            let dist: Vec<f64> = (0..ng)
                .map(|g| {
                    let mut s = 0.0;
                    for k in 0..query.dim() {
                        let d = query.row(q)[k] - gallery.row(g)[k];
                        s += d * d;
                    }
                    s
                })
                .collect();
            let position = |g: usize| {
                1 + (0..ng)
                    .filter(|&o| kept(o) && (dist[o] < dist[g] || (dist[o] == dist[g] && o < g)))
                    .count()
            };
            let ranks: Vec<usize> = (0..ng)
                .filter(|&g| kept(g) && gallery.labels()[g] == query.labels()[q])
                .map(position)
                .collect();
            if ranks.is_empty() {
                return Err(AgmError::Data(format!("no relevant gallery item for query {q}")));
            }
            let best = *ranks.iter().min().unwrap();
            let worst = *ranks.iter().max().unwrap();
            for (k, h) in hits.iter_mut().enumerate() {
                if best <= k + 1 {
                    *h += 1;
                }
            }
            let ap: f64 = ranks
                .iter()
                .map(|&r| ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
                .sum::<f64>()
                / ranks.len() as f64;
            map += ap / nq;
            minp += ranks.len() as f64 / worst as f64 / nq;
        }
        Ok(OracleMetrics {
            cmc: hits.into_iter().map(|h| h as f64 / nq).collect(),
            map,
            minp,
        })
    }
}
