//! REINFORCE training of the search agent.
//!
//! For one query with pool rewards `u` and baseline `u_avg = mean(u)`, the
//! surrogate loss is
//!
//! ```text
//! L = -(1/P) * sum_m (u_m - u_avg) * log softmax(s)_m
//! ```
//!
//! where `s` are the agent scores over the `P` pool members. Its gradient
//! with respect to score `s_j` is `-(1/P) * (A_j - a_j * sum_m A_m)` with
//! `A = u - u_avg` and `a = softmax(s)`, which is then backpropagated through
//! the MLP. Every pool member is rewarded for every training query, so the
//! estimator is the exact full-enumeration sum rather than a sampled one.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::agent::{check_inputs, init_agent, softmax, AgentConfig, AgentError, AgentParams, SelectionDistribution};
use crate::features::{FeatureSet, FeatureVector};
use crate::oracle::{Oracle, OracleError, RewardRecord};
use crate::pool::CandidatePool;
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("oracle failed for query {query_id:?}: {source}")]
    Oracle {
        query_id: String,
        #[source]
        source: OracleError,
    },
    #[error("reward record for {query_id:?} does not match the pool: {reason}")]
    Misaligned { query_id: String, reason: String },
    #[error("pool of {0} candidates is too small; REINFORCE needs at least 2")]
    PoolTooSmall(usize),
    #[error("non-finite {0} during training")]
    NonFinite(String),
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Queries per Adam step.
    pub batch_size: usize,
    pub lr0: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halving_period: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Seeds the batch shuffle stream.
    pub seed: u64,
    /// Optional global L2 clip applied to each batch gradient.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr0: 1e-3,
            lr_halving_period: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.lr_halving_period == 0 {
            return bad("lr_halving_period must be >= 1".into());
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return bad(format!("max_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / lr_halving_period)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.lr_halving_period.max(1)).min(i32::MAX as usize) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

/// Gradient with the flat layout of [`AgentParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn check_rewards(pool: &CandidatePool, query: &FeatureVector, rewards: &RewardRecord) -> Result<()> {
    if rewards.query_id() != query.id() {
        return Err(TrainError::Misaligned {
            query_id: query.id().to_string(),
            reason: format!("record belongs to {:?}", rewards.query_id()),
        });
    }
    if rewards.len() != pool.len() {
        return Err(TrainError::Misaligned {
            query_id: query.id().to_string(),
            reason: format!("{} rewards for {} candidates", rewards.len(), pool.len()),
        });
    }
    if pool.len() < 2 {
        return Err(TrainError::PoolTooSmall(pool.len()));
    }
    Ok(())
}

/// Adds `scale * dL/dtheta` for one query into `grad` and returns the loss.
fn accumulate(
    params: &AgentParams,
    pool: &CandidatePool,
    query: &FeatureVector,
    rewards: &RewardRecord,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_inputs(params, pool, query)?;
    check_rewards(pool, query, rewards)?;
    let caches: Vec<_> = pool
        .vectors()
        .iter()
        .map(|c| params.forward_cached(c.values(), query.values()))
        .collect();
    let scores: Vec<f64> = caches.iter().map(|c| c.output).collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(AgentError::NonFinite(pool.entries()[i].id.clone()).into());
    }
    let p = pool.len() as f64;
    let probs = softmax(&scores);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();

    let advantages = rewards.advantages();
    let adv_sum: f64 = advantages.iter().sum();
    let loss = -advantages
        .iter()
        .zip(&scores)
        .map(|(a, s)| a * (s - max - log_z))
        .sum::<f64>()
        / p;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite(format!("loss for query {:?}", query.id())));
    }
    for ((cache, a), pr) in caches.iter().zip(&advantages).zip(&probs) {
        let d_score = -(a - pr * adv_sum) / p;
        params.backward(cache, scale * d_score, grad);
    }
    Ok(loss)
}

/// REINFORCE surrogate loss and its exact gradient for one query.
pub fn reinforce_loss_and_gradient(
    params: &AgentParams,
    pool: &CandidatePool,
    query: &FeatureVector,
    rewards: &RewardRecord,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros(params.num_params());
    let loss = accumulate(params, pool, query, rewards, 1.0, &mut grad.values)?;
    if grad.values.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite(format!("gradient for query {:?}", query.id())));
    }
    Ok((loss, grad))
}

pub fn reinforce_gradient(
    params: &AgentParams,
    pool: &CandidatePool,
    query: &FeatureVector,
    rewards: &RewardRecord,
) -> Result<Gradient> {
    reinforce_loss_and_gradient(params, pool, query, rewards).map(|(_, g)| g)
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut AgentParams, grad: &Gradient, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    let n = params.num_params();
    for found in [grad.len(), state.m.len()] {
        if found != n {
            return Err(TrainError::ShapeMismatch { expected: n, found });
        }
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(&grad.values)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean surrogate loss over the epoch's queries, at pre-step parameters.
    pub mean_loss: f64,
    /// Mean reward of the greedy top-1 choice after the epoch.
    pub mean_top1_reward: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean top-1 reward of the initial parameters.
    pub initial_top1_reward: f64,
    pub epochs: Vec<EpochRecord>,
    pub checksum: String,
}

impl TrainReport {
    pub fn final_top1_reward(&self) -> f64 {
        self.epochs.last().map_or(self.initial_top1_reward, |e| e.mean_top1_reward)
    }

    /// `epoch,lr,mean_loss,mean_top1_reward` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,mean_loss,mean_top1_reward\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.lr, e.mean_loss, e.mean_top1_reward);
        }
        out
    }
}

/// Reward of the most probable candidate for every query, averaged.
pub fn mean_top1_reward(params: &AgentParams, pool: &CandidatePool, queries: &FeatureSet, rewards: &[RewardRecord]) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (q, r) in queries.iter().zip(rewards) {
        let dist = crate::agent::score_candidates(params, pool, q)?;
        total += r.ious()[top1(&dist)];
    }
    Ok(total / queries.len() as f64)
}

fn top1(dist: &SelectionDistribution) -> usize {
    dist.ranking()[0]
}

/// Rewards of every pool member for every query, in query order.
pub fn collect_rewards(queries: &FeatureSet, pool: &CandidatePool, oracle: &dyn Oracle) -> Result<Vec<RewardRecord>> {
    let ids = pool.ids();
    queries
        .iter()
        .map(|q| {
            oracle.score_batch(q.id(), &ids).map_err(|source| TrainError::Oracle {
                query_id: q.id().to_string(),
                source,
            })
        })
        .collect()
}

pub fn train_agent(
    queries: &FeatureSet,
    pool: &CandidatePool,
    oracle: &dyn Oracle,
    cfg: &TrainConfig,
    agent_cfg: &AgentConfig,
) -> Result<(AgentParams, TrainReport)> {
    let params = init_agent(agent_cfg)?;
    train_from(params, queries, pool, oracle, cfg, |_, _| Ok(()))
}

/// Trains starting from `params`. `on_epoch` runs after every epoch with
/// the current parameters.
pub fn train_from(
    mut params: AgentParams,
    queries: &FeatureSet,
    pool: &CandidatePool,
    oracle: &dyn Oracle,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &AgentParams) -> Result<()>,
) -> Result<(AgentParams, TrainReport)> {
    cfg.validate()?;
    if queries.is_empty() {
        let epochs = (0..cfg.epochs)
            .map(|epoch| EpochRecord {
                epoch,
                lr: lr_schedule(epoch, cfg),
                mean_loss: 0.0,
                mean_top1_reward: 0.0,
                batches: 0,
            })
            .collect();
        let checksum = params.checksum();
        return Ok((
            params,
            TrainReport {
                initial_top1_reward: 0.0,
                epochs,
                checksum,
            },
        ));
    }
    if pool.len() < 2 {
        return Err(TrainError::PoolTooSmall(pool.len()));
    }
    let rewards = collect_rewards(queries, pool, oracle)?;
    let initial_top1_reward = mean_top1_reward(&params, pool, queries, &rewards)?;

    let mut shuffle_rng = rng::seeded(cfg.seed);
    let mut state = AdamState::new(params.num_params());
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut grad = Gradient::zeros(params.num_params());
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            grad.values.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &qi in batch {
                let q = &queries.items()[qi];
                loss_sum += accumulate(&params, pool, q, &rewards[qi], scale, &mut grad.values)?;
            }
            if grad.values.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite(format!("batch gradient in epoch {epoch}")));
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                let norm = grad.norm();
                if norm > max_norm {
                    let s = max_norm / norm;
                    grad.values.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam_step(&mut params, &grad, &mut state, lr, cfg)?;
            batches += 1;
        }
        let mean_top1 = mean_top1_reward(&params, pool, queries, &rewards)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / queries.len() as f64,
            mean_top1_reward: mean_top1,
            batches,
        });
        on_epoch(epoch, &params)?;
    }
    let checksum = params.checksum();
    Ok((
        params,
        TrainReport {
            initial_top1_reward,
            epochs,
            checksum,
        },
    ))
}
