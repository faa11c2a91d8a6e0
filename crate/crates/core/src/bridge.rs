//! Bridging a pretrained skill agent to a task: skill identification and
//! reward scale matching.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::env::{task_reward, Env, EnvSpec, Task, Transition};
use crate::error::{Error, Result};
use crate::hilp::{sample_skill, FeatureNet, RunningStats, SkillLatent, SkillPolicySet};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OfflineSubset,
    OnlineCollected,
}

/// Reward-labeled transitions used to identify the task's skill.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardDataset {
    pub transitions: Vec<Transition>,
    pub provenance: Provenance,
}

impl RewardDataset {
    pub fn new(transitions: Vec<Transition>, provenance: Provenance) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for t in &transitions {
            match t.reward {
                None => return Err(Error::MissingRewards),
                Some(r) if !r.is_finite() => {
                    return Err(Error::NumericalFailure(format!("non-finite reward {r}")))
                }
                _ => {}
            }
        }
        Ok(Self {
            transitions,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions
            .iter()
            .map(|t| t.reward.expect("validated"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillMethod {
    Lsq,
    Goal,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillIdentity {
    pub z_star: SkillLatent,
    pub residual: f64,
    pub method: SkillMethod,
}

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Solves `(F^T F + ridge I) z = F^T r` and returns the unnormalized solution.
pub fn solve_regression(
    features: ArrayView2<f64>,
    rewards: &[f64],
    ridge: f64,
) -> Result<Vec<f64>> {
    let (n, d) = features.dim();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if rewards.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: rewards.len(),
        });
    }
    let f = DMatrix::from_fn(n, d, |i, j| features[[i, j]]);
    let r = DVector::from_column_slice(rewards);
    let a = f.transpose() * &f + DMatrix::identity(d, d) * ridge;
    let b = f.transpose() * r;
    let z = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::NumericalFailure(format!("normal equations: {e}")))?,
    };
    Ok(z.iter().copied().collect())
}

/// Mean squared error of `r - F z`.
pub fn regression_residual(features: ArrayView2<f64>, rewards: &[f64], z: &[f64]) -> f64 {
    let pred = features.dot(&ndarray::aview1(z));
    pred.iter()
        .zip(rewards)
        .map(|(p, r)| (r - p) * (r - p))
        .sum::<f64>()
        / rewards.len() as f64
}

/// Least-squares skill for precomputed successor features.
pub fn identify_skill_from_features(
    features: ArrayView2<f64>,
    rewards: &[f64],
    ridge: f64,
) -> Result<SkillIdentity> {
    let z = solve_regression(features, rewards, ridge)?;
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm >= 1e-8) {
        return Err(Error::DegenerateReward(norm));
    }
    let residual = regression_residual(features, rewards, &z);
    let z_star = SkillLatent::normalized(z).ok_or(Error::DegenerateReward(norm))?;
    Ok(SkillIdentity {
        z_star,
        residual,
        method: SkillMethod::Lsq,
    })
}

/// Successor features `xi(s') - xi(s)` for every transition, one row each.
pub fn successor_features(xi: &FeatureNet, transitions: &[Transition]) -> Array2<f64> {
    let dim = transitions.first().map_or(0, |t| t.s.len());
    let s = Array2::from_shape_fn((transitions.len(), dim), |(i, j)| transitions[i].s[j]);
    let sn = Array2::from_shape_fn((transitions.len(), dim), |(i, j)| transitions[i].s_next[j]);
    xi.features(sn.view()) - xi.features(s.view())
}

pub fn identify_skill_lsq(
    data: &RewardDataset,
    xi: &FeatureNet,
    ridge: f64,
) -> Result<SkillIdentity> {
    let f = successor_features(xi, &data.transitions);
    identify_skill_from_features(f.view(), &data.rewards(), ridge)
}

pub fn identify_skill_goal(xi: &FeatureNet, s_ref: &[f64], goal: &[f64]) -> Result<SkillIdentity> {
    let a = xi.features_one(s_ref)?;
    let b = xi.features_one(goal)?;
    identify_from_displacement(b.iter().zip(&a).map(|(x, y)| x - y).collect())
}

fn identify_from_displacement(v: Vec<f64>) -> Result<SkillIdentity> {
    let z_star = SkillLatent::normalized(v).ok_or(Error::GoalIndistinct)?;
    Ok(SkillIdentity {
        z_star,
        residual: 0.0,
        method: SkillMethod::Goal,
    })
}

pub fn identify_skill_random(rng: &mut Rng, d: usize) -> SkillIdentity {
    SkillIdentity {
        z_star: sample_skill(rng, d),
        residual: 0.0,
        method: SkillMethod::Random,
    }
}

/// Rolls out the skill policy with a fresh random skill per episode and labels
/// every transition with the task reward.
pub fn collect_reward_dataset_online(
    spec: &EnvSpec,
    task: &Task,
    skills: &SkillPolicySet,
    n: usize,
    exploration_std: f64,
    rng: &mut Rng,
) -> Result<RewardDataset> {
    let d = skills.policy.net.spec.input_dim() - spec.obs_dim;
    let mut env = Env::new(spec.clone());
    let mut transitions = Vec::with_capacity(n);
    let mut obs = env.reset(rng);
    let mut z = sample_skill(rng, d);
    while transitions.len() < n {
        let input: Vec<f64> = obs.iter().chain(z.as_slice()).copied().collect();
        let input = Array2::from_shape_vec((1, input.len()), input).expect("one row");
        let a = skills
            .policy
            .act_explore(input.view(), exploration_std, rng)
            .remove(0);
        let (next, done) = env.step(&a);
        let r = task_reward(task, &obs, &a, &next)?;
        transitions.push(Transition {
            s: obs,
            a,
            s_next: next.clone(),
            reward: Some(r),
            done,
        });
        obs = if done {
            z = sample_skill(rng, d);
            env.reset(rng)
        } else {
            next
        };
    }
    RewardDataset::new(transitions, Provenance::OnlineCollected)
}

/// Task-reward normalizer used during fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerState {
    /// Intrinsic reward statistics, frozen at the end of pretraining.
    pub intrinsic_stats: RunningStats,
    pub task_stats: RunningStats,
    pub enabled: bool,
}

impl NormalizerState {
    pub fn new(intrinsic_stats: RunningStats, enabled: bool) -> Result<Self> {
        if enabled && intrinsic_stats.count < 2 {
            return Err(Error::InsufficientStats(intrinsic_stats.count));
        }
        Ok(Self {
            intrinsic_stats,
            task_stats: RunningStats::default(),
            enabled,
        })
    }

    pub fn disabled() -> Self {
        Self {
            intrinsic_stats: RunningStats::default(),
            task_stats: RunningStats::default(),
            enabled: false,
        }
    }

    /// Updates the task statistics with `r`, then returns its normalized value.
    pub fn match_task_reward(&mut self, r: f64) -> f64 {
        if !self.enabled {
            return r;
        }
        self.task_stats.update(r);
        self.task_stats.normalize(r).unwrap_or(0.0)
    }

    /// Normalizes with the current statistics without updating them.
    pub fn normalize_frozen(&self, r: f64) -> f64 {
        if !self.enabled {
            return r;
        }
        self.task_stats.normalize(r).unwrap_or(0.0)
    }
}
