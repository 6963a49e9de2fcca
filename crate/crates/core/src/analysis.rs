//! Context-selection protocols: random contexts across seeds, nearest vs
//! farthest by cosine similarity, and the NN/FF/NF pair comparison.
//!
//! A selection of several candidates is rewarded with the mean oracle score
//! of its members.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::index;
use thiserror::Error;

use crate::features::{cosine_similarity, FeatureError, FeatureSet, FeatureVector};
use crate::oracle::{Oracle, OracleError};
use crate::rng;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("n_shot {n_shot} needs at least that many candidates, have {available}")]
    TooFewCandidates { n_shot: usize, available: usize },
    #[error("n_shot must be >= 1")]
    ZeroShot,
    #[error("no seeds given")]
    NoSeeds,
    #[error("misaligned results: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    name: String,
    query_ids: Vec<String>,
    selections: Vec<Vec<String>>,
    rewards: Vec<f64>,
    mean: f64,
}

impl StrategyResult {
    pub fn new(name: impl Into<String>, query_ids: Vec<String>, selections: Vec<Vec<String>>, rewards: Vec<f64>) -> Result<Self> {
        if query_ids.len() != selections.len() || query_ids.len() != rewards.len() {
            return Err(AnalysisError::Misaligned(format!(
                "{} queries, {} selections, {} rewards",
                query_ids.len(),
                selections.len(),
                rewards.len()
            )));
        }
        let mean = if rewards.is_empty() {
            0.0
        } else {
            rewards.iter().sum::<f64>() / rewards.len() as f64
        };
        Ok(Self {
            name: name.into(),
            query_ids,
            selections,
            rewards,
            mean,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    pub fn selections(&self) -> &[Vec<String>] {
        &self.selections
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_ids.is_empty()
    }

    /// `strategy,query_id,selected,reward`; selected ids joined by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,query_id,selected,reward\n");
        self.write_rows(&mut out);
        out
    }

    fn write_rows(&self, out: &mut String) {
        for ((q, sel), r) in self.query_ids.iter().zip(&self.selections).zip(&self.rewards) {
            let _ = writeln!(out, "{},{},{},{}", self.name, q, sel.join(";"), r);
        }
    }
}

/// Concatenated per-query rows of several strategies under one header.
pub fn results_csv(results: &[&StrategyResult]) -> String {
    let mut out = String::from("strategy,query_id,selected,reward\n");
    for r in results {
        r.write_rows(&mut out);
    }
    out
}

/// One `name: mean reward` line per strategy.
pub fn summary(results: &[&StrategyResult]) -> String {
    let mut out = String::new();
    for r in results {
        let _ = writeln!(out, "{}: mean reward {:.6} over {} queries", r.name, r.mean, r.len());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    seeds: Vec<u64>,
    runs: Vec<StrategyResult>,
    best: f64,
    worst: f64,
    mean: f64,
}

impl VarianceReport {
    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn runs(&self) -> &[StrategyResult] {
        &self.runs
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn worst(&self) -> f64 {
        self.worst
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `seed,mean_reward` per seed.
    pub fn seeds_csv(&self) -> String {
        let mut out = String::from("seed,mean_reward\n");
        for (s, r) in self.seeds.iter().zip(&self.runs) {
            let _ = writeln!(out, "{},{}", s, r.mean());
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "random: {} seeds, best {:.6}, worst {:.6}, mean {:.6}\n",
            self.seeds.len(),
            self.best,
            self.worst,
            self.mean
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    Nearest,
    Farthest,
}

impl SimilarityMode {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityMode::Nearest => "nearest",
            SimilarityMode::Farthest => "farthest",
        }
    }
}

fn check_shot(n_shot: usize, candidates: &FeatureSet) -> Result<()> {
    if n_shot == 0 {
        return Err(AnalysisError::ZeroShot);
    }
    if n_shot > candidates.len() {
        return Err(AnalysisError::TooFewCandidates {
            n_shot,
            available: candidates.len(),
        });
    }
    Ok(())
}

fn mean_reward(oracle: &dyn Oracle, query_id: &str, selected: &[String]) -> Result<f64> {
    let mut total = 0.0;
    for c in selected {
        total += oracle.score_pair(query_id, c)?;
    }
    Ok(total / selected.len() as f64)
}

/// Candidate indices ordered by `mode`: similarity descending for nearest,
/// ascending for farthest, ties by id in both.
pub fn rank_by_similarity(query: &FeatureVector, candidates: &FeatureSet, mode: SimilarityMode) -> Result<Vec<usize>> {
    let sims = candidates
        .iter()
        .map(|c| cosine_similarity(query, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let items = candidates.items();
    order.sort_by(|&a, &b| {
        let by_sim = match mode {
            SimilarityMode::Nearest => sims[b].total_cmp(&sims[a]),
            SimilarityMode::Farthest => sims[a].total_cmp(&sims[b]),
        };
        by_sim.then_with(|| items[a].id().cmp(items[b].id()))
    });
    Ok(order)
}

fn pick(candidates: &FeatureSet, idx: impl IntoIterator<Item = usize>) -> Vec<String> {
    idx.into_iter().map(|i| candidates.items()[i].id().to_string()).collect()
}

fn query_ids(queries: &FeatureSet) -> Vec<String> {
    queries.ids().map(str::to_string).collect()
}

/// Uniform draws without replacement, one stream per seed.
pub fn random_baseline(
    queries: &FeatureSet,
    candidates: &FeatureSet,
    oracle: &dyn Oracle,
    n_shot: usize,
    seeds: &[u64],
) -> Result<VarianceReport> {
    check_shot(n_shot, candidates)?;
    if seeds.is_empty() {
        return Err(AnalysisError::NoSeeds);
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut r = rng::seeded(seed);
        let mut selections = Vec::with_capacity(queries.len());
        let mut rewards = Vec::with_capacity(queries.len());
        for q in queries {
            let sel = pick(candidates, index::sample(&mut r, candidates.len(), n_shot));
            rewards.push(mean_reward(oracle, q.id(), &sel)?);
            selections.push(sel);
        }
        runs.push(StrategyResult::new(format!("random_seed{seed}"), query_ids(queries), selections, rewards)?);
    }
    let means: Vec<f64> = runs.iter().map(StrategyResult::mean).collect();
    let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = means.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    Ok(VarianceReport {
        seeds: seeds.to_vec(),
        runs,
        best,
        worst,
        mean,
    })
}

pub fn similarity_baseline(
    queries: &FeatureSet,
    candidates: &FeatureSet,
    oracle: &dyn Oracle,
    mode: SimilarityMode,
    n_shot: usize,
) -> Result<StrategyResult> {
    check_shot(n_shot, candidates)?;
    let mut selections = Vec::with_capacity(queries.len());
    let mut rewards = Vec::with_capacity(queries.len());
    for q in queries {
        let order = rank_by_similarity(q, candidates, mode)?;
        let sel = pick(candidates, order.into_iter().take(n_shot));
        rewards.push(mean_reward(oracle, q.id(), &sel)?);
        selections.push(sel);
    }
    StrategyResult::new(mode.name(), query_ids(queries), selections, rewards)
}

/// Two nearest (NN), two farthest (FF), and nearest plus farthest (NF).
pub fn diversity_comparison(
    queries: &FeatureSet,
    candidates: &FeatureSet,
    oracle: &dyn Oracle,
) -> Result<(StrategyResult, StrategyResult, StrategyResult)> {
    check_shot(2, candidates)?;
    let mut sel: [Vec<Vec<String>>; 3] = Default::default();
    let mut rew: [Vec<f64>; 3] = Default::default();
    for q in queries {
        let near = rank_by_similarity(q, candidates, SimilarityMode::Nearest)?;
        let far = rank_by_similarity(q, candidates, SimilarityMode::Farthest)?;
        let picks = [
            pick(candidates, [near[0], near[1]]),
            pick(candidates, [far[0], far[1]]),
            pick(candidates, [near[0], far[0]]),
        ];
        for (k, p) in picks.into_iter().enumerate() {
            rew[k].push(mean_reward(oracle, q.id(), &p)?);
            sel[k].push(p);
        }
    }
    let [s_nn, s_ff, s_nf] = sel;
    let [r_nn, r_ff, r_nf] = rew;
    Ok((
        StrategyResult::new("NN", query_ids(queries), s_nn, r_nn)?,
        StrategyResult::new("FF", query_ids(queries), s_ff, r_ff)?,
        StrategyResult::new("NF", query_ids(queries), s_nf, r_nf)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinnerProportions {
    pub nearest_wins: f64,
    pub farthest_wins: f64,
    pub ties: f64,
}

impl WinnerProportions {
    pub fn to_csv(&self) -> String {
        format!(
            "p_nearest_wins,p_farthest_wins,p_ties\n{},{},{}\n",
            self.nearest_wins, self.farthest_wins, self.ties
        )
    }
}

/// Per-query reward comparison; equal rewards count as ties.
pub fn winner_proportions(nearest: &StrategyResult, farthest: &StrategyResult) -> Result<WinnerProportions> {
    if nearest.query_ids != farthest.query_ids {
        return Err(AnalysisError::Misaligned(format!(
            "{} and {} cover different queries",
            nearest.name, farthest.name
        )));
    }
    if nearest.is_empty() {
        return Err(AnalysisError::Misaligned("no queries to compare".into()));
    }
    let (mut n, mut f, mut t) = (0usize, 0usize, 0usize);
    for (a, b) in nearest.rewards.iter().zip(&farthest.rewards) {
        match a.partial_cmp(b) {
            Some(Ordering::Greater) => n += 1,
            Some(Ordering::Less) => f += 1,
            _ => t += 1,
        }
    }
    let total = nearest.len() as f64;
    Ok(WinnerProportions {
        nearest_wins: n as f64 / total,
        farthest_wins: f as f64 / total,
        ties: t as f64 / total,
    })
}
