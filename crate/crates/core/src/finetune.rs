//! Online fine-tuning and the baselines it is compared against.
//!
//! All methods share one online loop: act with exploration, store the transition,
//! run `utd_ratio` updates on minibatches mixing offline and online samples, and
//! evaluate the deterministic policy every `eval_interval` environment steps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    identify_skill_goal, identify_skill_lsq, identify_skill_random, NormalizerState, RewardDataset,
    SkillIdentity, SkillMethod, DEFAULT_RIDGE,
};
use crate::diag::{feature_dot_product, mean_std, sample_consecutive_pairs, FeaturePairBatch};
use crate::env::{
    initial_observation, task_reward, Action, Env, EnvSpec, Task, Transition, TransitionDataset,
};
use crate::error::{Error, Result};
use crate::hilp::PretrainBundle;
use crate::offline_rl::{
    update_step, Agent, Batch, LossReport, PolicyNet, TrainConfig, TransitionStore,
};
use crate::rng::{derive_rng, derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    U2o,
    O2o,
    ScratchWithData,
    ZeroShot,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::U2o => "u2o",
            Method::O2o => "o2o",
            Method::ScratchWithData => "scratch_with_data",
            Method::ZeroShot => "zero_shot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Method::U2o,
            Method::O2o,
            Method::ScratchWithData,
            Method::ZeroShot,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }

    pub fn needs_bundle(self) -> bool {
        matches!(self, Method::U2o | Method::ZeroShot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferFlags {
    pub transfer_value: bool,
    pub transfer_policy: bool,
}

impl Default for TransferFlags {
    fn default() -> Self {
        Self {
            transfer_value: true,
            transfer_policy: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub env: String,
    pub task: String,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub utd_ratio: usize,
    pub offline_sample_fraction: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub transfer: TransferFlags,
    pub reward_matching: bool,
    /// Skill identification method; `None` picks goal-based for sparse tasks and
    /// least squares otherwise.
    pub skill_method: Option<SkillMethod>,
    pub buffer_capacity: Option<usize>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(method: Method, spec: &EnvSpec, task: &str, seed: u64) -> Self {
        let backbone = if spec.action_spec.is_discrete() {
            crate::offline_rl::Backbone::Iql
        } else {
            crate::offline_rl::Backbone::Td3
        };
        Self {
            method,
            env: spec.name(),
            task: task.to_string(),
            pretrain_steps: 100_000,
            finetune_steps: 50_000,
            utd_ratio: 1,
            offline_sample_fraction: 0.5,
            eval_interval: 2_500,
            eval_episodes: 50,
            transfer: TransferFlags::default(),
            reward_matching: true,
            skill_method: None,
            buffer_capacity: None,
            train: TrainConfig::for_backbone(backbone),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::RangeViolation {
                    key: key.into(),
                    msg: msg.into(),
                })
            }
        };
        range(
            self.utd_ratio >= 1,
            "utd_ratio",
            "must be a positive integer",
        )?;
        range(
            (0.0..=1.0).contains(&self.offline_sample_fraction),
            "offline_sample_fraction",
            "must be in [0,1]",
        )?;
        range(self.eval_interval >= 1, "eval_interval", "must be positive")?;
        range(self.eval_episodes >= 1, "eval_episodes", "must be positive")?;
        range(
            self.buffer_capacity != Some(0),
            "buffer_capacity",
            "must be positive",
        )?;
        self.train.validate()
    }

    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_{}_seed{}",
            self.method.as_str(),
            self.env,
            self.task,
            self.seed
        )
    }
}

/// Fixed-capacity ring buffer; the oldest transition is evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    inserted: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.inserted % self.capacity] = t;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> usize {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn sample_index(&self, rng: &mut Rng) -> usize {
        rng.random_range(0..self.items.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub success_rate: f64,
}

/// Deterministic rollouts of `policy` (conditioned on `z` if given), run in lockstep.
/// An episode succeeds if the agent comes within the task's success radius of the goal.
pub fn evaluate_policy(
    spec: &EnvSpec,
    task: &Task,
    policy: &PolicyNet,
    z: Option<&[f64]>,
    n_episodes: usize,
    rng: &mut Rng,
) -> Result<EvalResult> {
    let z = z.unwrap_or(&[]);
    evaluate_with(spec, task, n_episodes, rng, |states| {
        let width = spec.obs_dim + z.len();
        let input = Array2::from_shape_fn((states.len(), width), |(i, j)| {
            if j < spec.obs_dim {
                states[i][j]
            } else {
                z[j - spec.obs_dim]
            }
        });
        policy.act_deterministic(input.view())
    })
}

/// Lockstep rollouts of an arbitrary batch controller.
pub fn evaluate_with(
    spec: &EnvSpec,
    task: &Task,
    n_episodes: usize,
    rng: &mut Rng,
    mut act: impl FnMut(&[Vec<f64>]) -> Vec<Action>,
) -> Result<EvalResult> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one episode".into(),
        ));
    }
    let mut states: Vec<Vec<f64>> = (0..n_episodes)
        .map(|_| initial_observation(spec, rng))
        .collect();
    let mut returns = vec![0.0; n_episodes];
    let mut success = vec![false; n_episodes];
    for _ in 0..spec.max_episode_len {
        let actions = act(&states);
        for (i, a) in actions.iter().enumerate() {
            let next = spec.transition(&states[i], a);
            returns[i] += task_reward(task, &states[i], a, &next)?;
            success[i] |= task.reached(&next);
            states[i] = next;
        }
    }
    Ok(EvalResult {
        mean_return: returns.iter().sum::<f64>() / n_episodes as f64,
        success_rate: success.iter().filter(|&&s| s).count() as f64 / n_episodes as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub env_steps: usize,
    pub eval_return: f64,
    pub success_rate: f64,
    pub critic_loss: f64,
    pub value_loss: f64,
    pub actor_loss: f64,
    pub feature_dot: f64,
    pub reward_raw_mean: f64,
    pub reward_norm_mean: f64,
    pub reward_norm_std: f64,
}

pub const METRICS_HEADER: &str = "step,env_steps,eval_return,success_rate,critic_loss,value_loss,actor_loss,feature_dot,reward_raw_mean,reward_norm_mean,reward_norm_std";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.env_steps,
            r.eval_return,
            r.success_rate,
            r.critic_loss,
            r.value_loss,
            r.actor_loss,
            r.feature_dot,
            r.reward_raw_mean,
            r.reward_norm_mean,
            r.reward_norm_std
        )
        .expect("writing to a string");
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "unexpected metrics header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 11 {
                return Err(err(format!("expected 11 fields, got {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(e.to_string()));
            let real = |s: &str| s.parse::<f64>().map_err(|e| err(e.to_string()));
            Ok(MetricsRow {
                step: int(f[0])?,
                env_steps: int(f[1])?,
                eval_return: real(f[2])?,
                success_rate: real(f[3])?,
                critic_loss: real(f[4])?,
                value_loss: real(f[5])?,
                actor_loss: real(f[6])?,
                feature_dot: real(f[7])?,
                reward_raw_mean: real(f[8])?,
                reward_norm_mean: real(f[9])?,
                reward_norm_std: real(f[10])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub config: RunConfig,
    pub rows: Vec<MetricsRow>,
    pub skill: Option<SkillIdentity>,
    pub agent: Agent,
    /// Every online task reward, raw and as normalized at collection time.
    pub online_rewards: Vec<(f64, f64)>,
    pub env_steps: usize,
}

impl RunResult {
    pub fn write_csv(&self, dir: &Path) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.csv", self.config.file_stem()));
        fs::write(&path, metrics_csv(&self.rows))?;
        Ok(path)
    }

    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("runs always log an initial row")
    }
}

/// Offline dataset transitions labeled with the task reward.
pub fn label_offline(dataset: &TransitionDataset, task: &Task) -> Result<TransitionStore> {
    let labeled = dataset
        .transitions
        .iter()
        .map(|t| {
            Ok(Transition {
                reward: Some(task_reward(task, &t.s, &t.a, &t.s_next)?),
                ..t.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionStore::new(
        &labeled,
        dataset.spec.obs_dim,
        &dataset.spec.action_spec,
    ))
}

/// Supervised offline RL on task-labeled data (no skills).
pub fn offline_pretrain(
    store: &TransitionStore,
    agent: &mut Agent,
    train: &TrainConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<LossReport> {
    let mut last = LossReport::default();
    for _ in 0..steps {
        let idx: Vec<usize> = (0..train.batch_size)
            .map(|_| rng.random_range(0..store.len()))
            .collect();
        last = update_step(agent, &store.gather(&idx), train, rng)?;
    }
    Ok(last)
}

struct OnlineSetup<'a> {
    cfg: &'a RunConfig,
    spec: &'a EnvSpec,
    task: &'a Task,
    offline: &'a TransitionStore,
    probe: &'a FeaturePairBatch,
    z: Option<Vec<f64>>,
    normalizer: NormalizerState,
}

fn gather_online(buffer: &ReplayBuffer, idx: &[usize], spec: &EnvSpec) -> Batch {
    let items: Vec<Transition> = idx.iter().map(|&i| buffer.get(i).clone()).collect();
    TransitionStore::new(&items, spec.obs_dim, &spec.action_spec)
        .gather(&(0..items.len()).collect::<Vec<_>>())
}

fn concat_batches(a: Batch, b: Batch) -> Batch {
    use ndarray::{concatenate, Axis};
    let cat2 = |x: &Array2<f64>, y: &Array2<f64>| {
        concatenate(Axis(0), &[x.view(), y.view()]).expect("same width")
    };
    let cat1 = |x: &ndarray::Array1<f64>, y: &ndarray::Array1<f64>| {
        concatenate(Axis(0), &[x.view(), y.view()]).expect("1-d")
    };
    Batch {
        obs: cat2(&a.obs, &b.obs),
        actions: cat2(&a.actions, &b.actions),
        action_idx: a.action_idx.zip(b.action_idx).map(|(mut x, y)| {
            x.extend(y);
            x
        }),
        next_obs: cat2(&a.next_obs, &b.next_obs),
        rewards: a.rewards.zip(b.rewards).map(|(x, y)| cat1(&x, &y)),
        terminals: cat1(&a.terminals, &b.terminals),
    }
}

/// Number of offline rows in a minibatch of size `b`.
pub fn offline_count(b: usize, fraction: f64, online_len: usize) -> usize {
    if online_len == 0 {
        b
    } else {
        (b as f64 * fraction).round() as usize
    }
}

fn eval_row(
    setup: &OnlineSetup,
    agent: &Agent,
    env_steps: usize,
    updates: usize,
    losses: Option<LossReport>,
    rewards: &[(f64, f64)],
) -> Result<MetricsRow> {
    let mut erng = derive_rng(setup.cfg.seed, &["eval", &env_steps.to_string()]);
    let ev = evaluate_policy(
        setup.spec,
        setup.task,
        &agent.policy,
        setup.z.as_deref(),
        setup.cfg.eval_episodes,
        &mut erng,
    )?;
    let fd = feature_dot_product(&agent.critic, setup.probe, setup.z.as_deref())?;
    let raw: Vec<f64> = rewards.iter().map(|r| r.0).collect();
    let norm: Vec<f64> = rewards.iter().map(|r| r.1).collect();
    let (raw_mean, _) = mean_std(&raw);
    let (norm_mean, norm_std) = mean_std(&norm);
    let nan = f64::NAN;
    let l = losses.unwrap_or(LossReport {
        critic: nan,
        value: nan,
        actor: nan,
    });
    Ok(MetricsRow {
        step: updates,
        env_steps,
        eval_return: ev.mean_return,
        success_rate: ev.success_rate,
        critic_loss: l.critic,
        value_loss: l.value,
        actor_loss: l.actor,
        feature_dot: fd,
        reward_raw_mean: if rewards.is_empty() { nan } else { raw_mean },
        reward_norm_mean: if rewards.is_empty() { nan } else { norm_mean },
        reward_norm_std: if rewards.is_empty() { nan } else { norm_std },
    })
}

fn condition(obs: &[f64], z: Option<&[f64]>) -> Array2<f64> {
    let v: Vec<f64> = obs.iter().chain(z.unwrap_or(&[])).copied().collect();
    Array2::from_shape_vec((1, v.len()), v).expect("one row")
}

fn online_loop(
    setup: OnlineSetup,
    mut agent: Agent,
    skill: Option<SkillIdentity>,
) -> Result<RunResult> {
    let OnlineSetup {
        cfg,
        spec,
        task,
        offline,
        ..
    } = setup;
    let mut normalizer = setup.normalizer.clone();
    let mut env = Env::new(spec.clone());
    let mut env_rng = derive_rng(cfg.seed, &["env"]);
    let mut act_rng = derive_rng(cfg.seed, &["act"]);
    let mut upd_rng = derive_rng(cfg.seed, &["update"]);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity.unwrap_or(cfg.finetune_steps.max(1)));
    let z = setup.z.clone();
    let b = cfg.train.batch_size;
    let mut rows = vec![eval_row(&setup, &agent, 0, 0, None, &[])?];
    let mut rewards: Vec<(f64, f64)> = Vec::with_capacity(cfg.finetune_steps);
    let mut window_start = 0;
    let mut updates = 0;
    let mut losses = None;
    let mut obs = env.reset(&mut env_rng);
    for t in 1..=cfg.finetune_steps {
        let a: Action = agent
            .policy
            .act_explore(
                condition(&obs, z.as_deref()).view(),
                cfg.train.td3_exploration_std,
                &mut act_rng,
            )
            .remove(0);
        let (next, done) = env.step(&a);
        let r = task_reward(task, &obs, &a, &next)?;
        rewards.push((r, normalizer.match_task_reward(r)));
        buffer.push(Transition {
            s: obs,
            a,
            s_next: next.clone(),
            reward: Some(r),
            done,
        });
        obs = if done { env.reset(&mut env_rng) } else { next };

        for _ in 0..cfg.utd_ratio {
            let n_off = offline_count(b, cfg.offline_sample_fraction, buffer.len())
                .min(if offline.is_empty() { 0 } else { b });
            let off_idx: Vec<usize> = (0..n_off)
                .map(|_| upd_rng.random_range(0..offline.len()))
                .collect();
            let on_idx: Vec<usize> = (0..b - n_off)
                .map(|_| buffer.sample_index(&mut upd_rng))
                .collect();
            let mut batch = concat_batches(
                offline.gather(&off_idx),
                gather_online(&buffer, &on_idx, spec),
            );
            if let Some(r) = batch.rewards.as_mut() {
                r.mapv_inplace(|x| normalizer.normalize_frozen(x));
            }
            if let Some(z) = z.as_deref() {
                batch = batch.with_skill(z);
            }
            losses = Some(update_step(&mut agent, &batch, &cfg.train, &mut upd_rng)?);
            updates += 1;
        }
        if t % cfg.eval_interval == 0 {
            rows.push(eval_row(
                &setup,
                &agent,
                t,
                updates,
                losses,
                &rewards[window_start..],
            )?);
            window_start = rewards.len();
        }
    }
    Ok(RunResult {
        config: cfg.clone(),
        rows,
        skill,
        agent,
        online_rewards: rewards,
        env_steps: cfg.finetune_steps,
    })
}

fn check_task(cfg: &RunConfig, dataset: &TransitionDataset) -> Result<(EnvSpec, Task)> {
    cfg.validate()?;
    let spec = EnvSpec::from_name(&cfg.env)?;
    if spec != dataset.spec {
        return Err(Error::InvalidArgument(format!(
            "dataset environment {} differs from run environment {}",
            dataset.spec.name(),
            cfg.env
        )));
    }
    let task = Task::named(&spec, &cfg.task, cfg.train.gamma)?;
    Ok((spec, task))
}

fn probe_pairs(dataset: &TransitionDataset, seed: u64) -> Result<FeaturePairBatch> {
    sample_consecutive_pairs(dataset, 1024, &mut derive_rng(seed, &["probe"]))
}

/// Picks the task skill from the bundle's features.
pub fn identify_for_task(
    cfg: &RunConfig,
    spec: &EnvSpec,
    task: &Task,
    bundle: &PretrainBundle,
    reward_data: Option<&RewardDataset>,
) -> Result<SkillIdentity> {
    let method = cfg.skill_method.unwrap_or(if task.is_sparse() {
        SkillMethod::Goal
    } else {
        SkillMethod::Lsq
    });
    match method {
        SkillMethod::Lsq => {
            let rd = reward_data.ok_or_else(|| {
                Error::InvalidArgument("least-squares identification needs a reward dataset".into())
            })?;
            identify_skill_lsq(rd, &bundle.feature, DEFAULT_RIDGE)
        }
        SkillMethod::Goal => {
            let s_ref = initial_observation(spec, &mut derive_rng(cfg.seed, &["s_ref"]));
            let goal = task
                .goal
                .as_deref()
                .ok_or_else(|| Error::MissingGoal(task.task_id.clone()))?;
            identify_skill_goal(&bundle.feature, &s_ref, goal)
        }
        SkillMethod::Random => Ok(identify_skill_random(
            &mut derive_rng(cfg.seed, &["random_skill"]),
            bundle.d(),
        )),
    }
}

fn u2o_start(
    cfg: &RunConfig,
    spec: &EnvSpec,
    task: &Task,
    bundle: &PretrainBundle,
    reward_data: Option<&RewardDataset>,
) -> Result<(Agent, SkillIdentity, NormalizerState)> {
    if bundle.spec != *spec {
        return Err(Error::InvalidArgument(
            "bundle was pretrained on a different environment".into(),
        ));
    }
    if bundle.backbone != cfg.train.backbone {
        return Err(Error::InvalidArgument(
            "bundle backbone differs from the run backbone".into(),
        ));
    }
    let skill = identify_for_task(cfg, spec, task, bundle, reward_data)?;
    let mut skills = bundle.skills.clone();
    let fresh = Agent::new(
        spec.obs_dim + bundle.d(),
        &spec.action_spec,
        &cfg.train,
        derive_seed(cfg.seed, &["fresh"]),
    )?;
    if !cfg.transfer.transfer_value {
        skills.critic = fresh.critic.clone();
        skills.value = fresh.value.clone();
    }
    if !cfg.transfer.transfer_policy {
        skills.policy = fresh.policy.clone();
    }
    let agent = skills.into_agent(&cfg.train);
    let enabled = cfg.reward_matching && !task.is_sparse();
    let normalizer = if enabled {
        NormalizerState::new(bundle.stats, true)?
    } else {
        NormalizerState::disabled()
    };
    Ok((agent, skill, normalizer))
}

pub fn run_u2o(
    cfg: &RunConfig,
    bundle: Option<&PretrainBundle>,
    reward_data: Option<&RewardDataset>,
    dataset: &TransitionDataset,
) -> Result<RunResult> {
    let bundle = bundle.ok_or(Error::MissingBundle)?;
    let (spec, task) = check_task(cfg, dataset)?;
    let (agent, skill, normalizer) = u2o_start(cfg, &spec, &task, bundle, reward_data)?;
    let offline = label_offline(dataset, &task)?;
    let probe = probe_pairs(dataset, cfg.seed)?;
    let setup = OnlineSetup {
        cfg,
        spec: &spec,
        task: &task,
        offline: &offline,
        probe: &probe,
        z: Some(skill.z_star.as_slice().to_vec()),
        normalizer,
    };
    online_loop(setup, agent, Some(skill))
}

/// Evaluates the identified skill without any parameter update.
pub fn run_zero_shot(
    cfg: &RunConfig,
    bundle: Option<&PretrainBundle>,
    reward_data: Option<&RewardDataset>,
    dataset: &TransitionDataset,
) -> Result<RunResult> {
    let zero = RunConfig {
        finetune_steps: 0,
        ..cfg.clone()
    };
    let mut res = run_u2o(&zero, bundle, reward_data, dataset)?;
    res.config = cfg.clone();
    Ok(res)
}

pub fn run_o2o(cfg: &RunConfig, dataset: &TransitionDataset) -> Result<RunResult> {
    let (spec, task) = check_task(cfg, dataset)?;
    let offline = label_offline(dataset, &task)?;
    let mut agent = Agent::new(
        spec.obs_dim,
        &spec.action_spec,
        &cfg.train,
        derive_seed(cfg.seed, &["fresh"]),
    )?;
    offline_pretrain(
        &offline,
        &mut agent,
        &cfg.train,
        cfg.pretrain_steps,
        &mut derive_rng(cfg.seed, &["offline"]),
    )?;
    let agent = Agent::with_nets(&cfg.train, agent.critic, agent.value, agent.policy);
    let probe = probe_pairs(dataset, cfg.seed)?;
    let setup = OnlineSetup {
        cfg,
        spec: &spec,
        task: &task,
        offline: &offline,
        probe: &probe,
        z: None,
        normalizer: NormalizerState::disabled(),
    };
    online_loop(setup, agent, None)
}

pub fn run_scratch_with_data(cfg: &RunConfig, dataset: &TransitionDataset) -> Result<RunResult> {
    let zero = RunConfig {
        pretrain_steps: 0,
        ..cfg.clone()
    };
    let mut res = run_o2o(&zero, dataset)?;
    res.config = cfg.clone();
    Ok(res)
}

/// Dispatches on `cfg.method`.
pub fn run_method(
    cfg: &RunConfig,
    bundle: Option<&PretrainBundle>,
    reward_data: Option<&RewardDataset>,
    dataset: &TransitionDataset,
) -> Result<RunResult> {
    match cfg.method {
        Method::U2o => run_u2o(cfg, bundle, reward_data, dataset),
        Method::ZeroShot => run_zero_shot(cfg, bundle, reward_data, dataset),
        Method::O2o => run_o2o(cfg, dataset),
        Method::ScratchWithData => run_scratch_with_data(cfg, dataset),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_offline_dataset, label_subset, value_iteration, Behavior};
    use crate::hilp::{pretrain_skills, PretrainConfig};
    use crate::nn::{Activation, Layer, Mlp, MlpSpec, NetworkParams, OutputActivation};
    use crate::offline_rl::PolicyHead;
    use crate::rng::rng_from_seed;
    use ndarray::Array1;

    fn transition(i: usize) -> Transition {
        Transition {
            s: vec![i as f64],
            a: Action::Discrete(0),
            s_next: vec![i as f64],
            reward: Some(0.0),
            done: false,
        }
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(transition(i));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.inserted(), 5);
        let mut seen: Vec<f64> = (0..3).map(|i| b.get(i).s[0]).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..100 {
            b.push(transition(i));
        }
        let mut counts = [0usize; 100];
        let mut rng = rng_from_seed(0);
        let n = 100_000;
        for _ in 0..n {
            counts[b.sample_index(&mut rng)] += 1;
        }
        let e = n as f64 / 100.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99 degrees of freedom, p = 0.01 critical value
        assert!(chi2 < 134.64, "chi2 {chi2}");
    }

    #[test]
    fn mixed_sampling_fraction() {
        let mut total = 0;
        for _ in 0..10_000 {
            total += offline_count(128, 0.5, 10);
        }
        let frac = total as f64 / (10_000.0 * 128.0);
        assert!((frac - 0.5).abs() < 0.02);
        assert!((offline_count(128, 0.3, 10) as f64 / 128.0 - 0.3).abs() < 0.02);
        assert_eq!(offline_count(128, 0.5, 0), 128);
    }

    #[test]
    fn value_iteration_policy_always_succeeds() {
        let spec = EnvSpec::gridworld(5);
        let task = Task::named(&spec, "goal_br", 0.99).unwrap();
        let sol = value_iteration(&spec, &task, |r| r, 1e-12).unwrap();
        let ev = evaluate_with(&spec, &task, 10, &mut rng_from_seed(0), |states| {
            states
                .iter()
                .map(|s| Action::Discrete(sol.greedy(sol.index_of(spec.decode_cell(s)).unwrap())))
                .collect()
        })
        .unwrap();
        assert_eq!(ev.success_rate, 1.0);
    }

    fn still_policy(spec: &EnvSpec) -> PolicyNet {
        // continuous zero-output policy
        let m = MlpSpec::new(
            vec![spec.obs_dim, 2],
            Activation::Relu,
            OutputActivation::Tanh,
        )
        .unwrap();
        let params = NetworkParams {
            layers: vec![Layer {
                weight: Array2::zeros((2, spec.obs_dim)),
                bias: Array1::zeros(2),
            }],
        };
        PolicyNet {
            net: Mlp::from_parts(m, params).unwrap(),
            head: PolicyHead::Deterministic,
            action_spec: spec.action_spec.clone(),
            target: None,
        }
    }

    #[test]
    fn policy_that_never_moves_fails() {
        let spec = EnvSpec::pointmass();
        let task = Task::named(&spec, "reach_tl_sparse", 0.99).unwrap();
        let ev = evaluate_policy(
            &spec,
            &task,
            &still_policy(&spec),
            None,
            5,
            &mut rng_from_seed(0),
        )
        .unwrap();
        assert_eq!(ev.success_rate, 0.0);
        assert_eq!(ev.mean_return, 0.0);
    }

    fn small_setup(seed: u64) -> (TransitionDataset, PretrainBundle, RunConfig) {
        let spec = EnvSpec::gridworld(5);
        let ds = collect_offline_dataset(
            &spec,
            Behavior::UniformRandom,
            2_000,
            &mut rng_from_seed(seed),
        )
        .unwrap();
        let mut pcfg = PretrainConfig {
            d: 3,
            feature_steps: 50,
            skill_steps: 50,
            ..PretrainConfig::for_env(&spec)
        };
        pcfg.train.batch_size = 32;
        pcfg.train.hidden = vec![16, 16];
        pcfg.hilbert.batch_size = 32;
        let (bundle, _) = pretrain_skills(&ds, &pcfg, seed).unwrap();
        let mut cfg = RunConfig::new(Method::U2o, &spec, "dense_br", seed);
        cfg.train = pcfg.train.clone();
        cfg.finetune_steps = 40;
        cfg.eval_interval = 10;
        cfg.eval_episodes = 3;
        cfg.pretrain_steps = 20;
        (ds, bundle, cfg)
    }

    fn reward_data(ds: &TransitionDataset, cfg: &RunConfig) -> RewardDataset {
        let task = Task::named(&ds.spec, &cfg.task, cfg.train.gamma).unwrap();
        label_subset(ds, &task, 0.2, &mut rng_from_seed(cfg.seed)).unwrap()
    }

    #[test]
    fn zero_finetune_steps_is_zero_shot() {
        let (ds, bundle, cfg) = small_setup(0);
        let rd = reward_data(&ds, &cfg);
        let none = RunConfig {
            finetune_steps: 0,
            ..cfg.clone()
        };
        let u = run_u2o(&none, Some(&bundle), Some(&rd), &ds).unwrap();
        let z = run_zero_shot(&cfg, Some(&bundle), Some(&rd), &ds).unwrap();
        assert_eq!(metrics_csv(&u.rows), metrics_csv(&z.rows));
        assert_eq!(z.rows.len(), 1);
        // no parameter changed
        let mut untouched = bundle.skills.clone().into_agent(&cfg.train);
        untouched.policy_opt = z.agent.policy_opt.clone();
        assert_eq!(z.agent.policy, untouched.policy);
        assert_eq!(z.agent.critic, untouched.critic);
    }

    #[test]
    fn transfer_flags_select_starting_networks() {
        let (ds, bundle, cfg) = small_setup(1);
        let rd = reward_data(&ds, &cfg);
        let spec = ds.spec.clone();
        let task = Task::named(&spec, &cfg.task, cfg.train.gamma).unwrap();
        let (agent, _, _) = u2o_start(&cfg, &spec, &task, &bundle, Some(&rd)).unwrap();
        assert_eq!(agent.policy, bundle.skills.policy);
        assert_eq!(agent.critic, bundle.skills.critic);
        assert_eq!(agent.value, bundle.skills.value);

        let off = RunConfig {
            transfer: TransferFlags {
                transfer_value: false,
                transfer_policy: false,
            },
            finetune_steps: 0,
            ..cfg.clone()
        };
        let res = run_u2o(&off, Some(&bundle), Some(&rd), &ds).unwrap();
        let fresh = Agent::new(
            spec.obs_dim + bundle.d(),
            &spec.action_spec,
            &cfg.train,
            derive_seed(cfg.seed, &["fresh"]),
        )
        .unwrap();
        assert_eq!(res.agent.policy, fresh.policy);
        let z = res.skill.as_ref().unwrap().z_star.as_slice();
        let ev = evaluate_policy(
            &spec,
            &task,
            &fresh.policy,
            Some(z),
            cfg.eval_episodes,
            &mut derive_rng(cfg.seed, &["eval", "0"]),
        )
        .unwrap();
        assert_eq!(res.rows[0].eval_return, ev.mean_return);
    }

    #[test]
    fn runs_are_deterministic_and_counted() {
        let (ds, bundle, cfg) = small_setup(2);
        let rd = reward_data(&ds, &cfg);
        let a = run_u2o(&cfg, Some(&bundle), Some(&rd), &ds).unwrap();
        let b = run_u2o(&cfg, Some(&bundle), Some(&rd), &ds).unwrap();
        assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
        assert_eq!(a.rows.len(), cfg.finetune_steps / cfg.eval_interval + 1);
        assert_eq!(a.online_rewards.len(), cfg.finetune_steps);
        assert!(a.rows.windows(2).all(|w| w[0].env_steps < w[1].env_steps));
        let parsed = parse_metrics_csv(&metrics_csv(&a.rows)).unwrap();
        assert_eq!(metrics_csv(&parsed), metrics_csv(&a.rows));
    }

    #[test]
    fn missing_bundle_is_an_error() {
        let (ds, _, cfg) = small_setup(3);
        assert!(matches!(
            run_u2o(&cfg, None, None, &ds),
            Err(Error::MissingBundle)
        ));
    }

    #[test]
    fn scratch_equals_o2o_without_pretraining() {
        let (ds, _, cfg) = small_setup(4);
        let scratch = run_scratch_with_data(
            &RunConfig {
                method: Method::ScratchWithData,
                ..cfg.clone()
            },
            &ds,
        )
        .unwrap();
        let o2o = run_o2o(
            &RunConfig {
                method: Method::O2o,
                pretrain_steps: 0,
                ..cfg.clone()
            },
            &ds,
        )
        .unwrap();
        assert_eq!(metrics_csv(&scratch.rows), metrics_csv(&o2o.rows));
        assert_eq!(
            scratch.rows.len(),
            cfg.finetune_steps / cfg.eval_interval + 1
        );
    }

    #[test]
    fn o2o_offline_phase_solves_small_grid() {
        let spec = EnvSpec::gridworld(5).with_uniform_start();
        let ds = collect_offline_dataset(
            &spec,
            Behavior::UniformRandom,
            20_000,
            &mut rng_from_seed(0),
        )
        .unwrap();
        let mut cfg = RunConfig::new(Method::O2o, &spec, "goal_br", 0);
        cfg.pretrain_steps = 5_000;
        cfg.finetune_steps = 0;
        cfg.train.gamma = 0.9;
        cfg.train.lr_critic = 1e-3;
        cfg.train.lr_value = 1e-3;
        cfg.train.lr_actor = 1e-3;
        let res = run_o2o(&cfg, &ds).unwrap();
        assert!(res.rows[0].success_rate >= 0.8, "{:?}", res.rows[0]);
    }
}
