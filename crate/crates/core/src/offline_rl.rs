//! Actor-critic backbones shared by pretraining, offline baselines and fine-tuning.
//!
//! Two backbones are supported:
//!
//! * **IQL**: twin critics regressed toward `r + gamma * V(s')`, a value network fit
//!   by expectile regression on the min-twin target critic, and an actor extracted
//!   by advantage-weighted regression (weights `min(exp(beta * (Q - V)), 100)`).
//! * **TD3**: twin critics with target policy smoothing and a deterministic actor
//!   maximizing the first critic.
//!
//! Networks never see skills explicitly: callers that condition on a skill `z`
//! append it to the observation columns of a [`Batch`], so every "observation"
//! here is the conditioning input `[obs, z]`. Critics take `[obs, z, action]` where
//! discrete actions are one-hot encoded.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionSpec, Transition};
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, polyak_update, AdamConfig, AdamState, Mlp, MlpSpec, NetworkParams, OutputActivation,
};
use crate::rng::{derive_seed, Rng};

pub const AWR_WEIGHT_CAP: f64 = 100.0;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Iql,
    Td3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub expectile_tau: f64,
    pub awr_temperature: f64,
    pub polyak_coeff: f64,
    pub lr_feature: f64,
    pub lr_critic: f64,
    pub lr_value: f64,
    pub lr_actor: f64,
    pub batch_size: usize,
    pub backbone: Backbone,
    pub td3_policy_noise: f64,
    pub td3_noise_clip: f64,
    pub td3_exploration_std: f64,
    /// Weight of the squared pre-tanh actor output added to the DDPG actor loss. Keeps
    /// the squashed action from saturating where the critic gradient cannot reach it.
    #[serde(default = "default_preact_penalty")]
    pub td3_preact_penalty: f64,
    /// Log standard deviation of the IQL Gaussian actor, in units of the action half-range.
    pub iql_log_std: f64,
    pub hidden: Vec<usize>,
}

pub const DEFAULT_PREACT_PENALTY: f64 = 1e-3;

fn default_preact_penalty() -> f64 {
    DEFAULT_PREACT_PENALTY
}

impl TrainConfig {
    pub fn for_backbone(backbone: Backbone) -> Self {
        Self {
            gamma: 0.98,
            expectile_tau: 0.9,
            awr_temperature: 10.0,
            polyak_coeff: match backbone {
                Backbone::Iql => 0.005,
                Backbone::Td3 => 0.01,
            },
            lr_feature: 5e-4,
            lr_critic: 3e-4,
            lr_value: 3e-4,
            lr_actor: 3e-4,
            batch_size: 128,
            backbone,
            td3_policy_noise: 0.2,
            td3_noise_clip: 0.5,
            td3_exploration_std: 0.2,
            td3_preact_penalty: DEFAULT_PREACT_PENALTY,
            iql_log_std: -1.0,
            hidden: vec![64, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::RangeViolation {
                    key: key.into(),
                    msg: msg.into(),
                })
            }
        };
        check(
            self.gamma > 0.0 && self.gamma < 1.0,
            "gamma",
            "must be in (0,1)",
        )?;
        check(
            self.expectile_tau > 0.0 && self.expectile_tau < 1.0,
            "expectile",
            "must be in (0,1)",
        )?;
        check(
            self.awr_temperature >= 0.0,
            "awr_temperature",
            "must be >= 0",
        )?;
        check(
            self.polyak_coeff > 0.0 && self.polyak_coeff <= 1.0,
            "polyak",
            "must be in (0,1]",
        )?;
        for (k, v) in [
            ("lr.feature", self.lr_feature),
            ("lr.critic", self.lr_critic),
            ("lr.value", self.lr_value),
            ("lr.actor", self.lr_actor),
        ] {
            check(
                v >= 0.0 && v.is_finite(),
                k,
                "must be a finite nonnegative number",
            )?;
        }
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        for (k, v) in [
            ("td3.policy_noise", self.td3_policy_noise),
            ("td3.noise_clip", self.td3_noise_clip),
            ("td3.exploration_std", self.td3_exploration_std),
            ("td3.preact_penalty", self.td3_preact_penalty),
        ] {
            check(v >= 0.0, k, "must be >= 0")?;
        }
        check(
            !self.hidden.is_empty() && self.hidden.iter().all(|&w| w > 0),
            "hidden",
            "needs positive widths",
        )
    }
}

/// `|tau - 1(x < 0)| * x^2`.
pub fn expectile_loss(x: f64, tau: f64) -> f64 {
    expectile_weight(x, tau) * x * x
}

fn expectile_weight(x: f64, tau: f64) -> f64 {
    if x < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// A minibatch. `obs`/`next_obs` hold the full conditioning input (observation,
/// then skill if any); `actions` holds the critic encoding of the actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub action_idx: Option<Vec<usize>>,
    pub next_obs: Array2<f64>,
    pub rewards: Option<Array1<f64>>,
    /// 1.0 where `s'` is a true terminal state (bootstrap masked).
    pub terminals: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }

    fn rewards(&self) -> Result<&Array1<f64>> {
        self.rewards.as_ref().ok_or(Error::MissingRewards)
    }

    /// Appends the same skill vector to every observation and next observation.
    pub fn with_skill(mut self, z: &[f64]) -> Self {
        let zs = Array2::from_shape_fn((self.len(), z.len()), |(_, j)| z[j]);
        self.obs = hcat(self.obs.view(), zs.view());
        self.next_obs = hcat(self.next_obs.view(), zs.view());
        self
    }

    /// Appends a per-row skill matrix to observations and next observations.
    pub fn with_skills(mut self, zs: ArrayView2<f64>) -> Self {
        self.obs = hcat(self.obs.view(), zs);
        self.next_obs = hcat(self.next_obs.view(), zs);
        self
    }

    pub fn critic_input(&self) -> Array2<f64> {
        hcat(self.obs.view(), self.actions.view())
    }
}

pub fn hcat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a, b]).expect("row counts agree")
}

/// Columnar copy of a transition list for fast minibatch gathering.
#[derive(Clone, Debug)]
pub struct TransitionStore {
    pub action_spec: ActionSpec,
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub action_idx: Option<Vec<usize>>,
    pub next_obs: Array2<f64>,
    pub rewards: Option<Array1<f64>>,
}

impl TransitionStore {
    pub fn new(transitions: &[Transition], obs_dim: usize, action_spec: &ActionSpec) -> Self {
        let n = transitions.len();
        let adim = action_spec.encoded_dim();
        let mut obs = Array2::zeros((n, obs_dim));
        let mut next_obs = Array2::zeros((n, obs_dim));
        let mut actions = Array2::zeros((n, adim));
        for (i, t) in transitions.iter().enumerate() {
            obs.row_mut(i).assign(&ndarray::aview1(&t.s));
            next_obs.row_mut(i).assign(&ndarray::aview1(&t.s_next));
            t.a.encode_into(
                action_spec,
                actions.row_mut(i).as_slice_mut().expect("row-major"),
            );
        }
        let action_idx = action_spec.is_discrete().then(|| {
            transitions
                .iter()
                .map(|t| t.a.as_discrete().expect("discrete"))
                .collect()
        });
        let rewards = transitions
            .iter()
            .map(|t| t.reward)
            .collect::<Option<Vec<f64>>>()
            .filter(|_| n > 0)
            .map(Array1::from);
        Self {
            action_spec: action_spec.clone(),
            obs,
            actions,
            action_idx,
            next_obs,
            rewards,
        }
    }

    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        Batch {
            obs: self.obs.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            action_idx: self
                .action_idx
                .as_ref()
                .map(|a| idx.iter().map(|&i| a[i]).collect()),
            next_obs: self.next_obs.select(Axis(0), idx),
            rewards: self
                .rewards
                .as_ref()
                .map(|r| idx.iter().map(|&i| r[i]).collect()),
            terminals: Array1::zeros(idx.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticEnsemble {
    pub q: [Mlp; 2],
    pub target: [NetworkParams; 2],
}

impl CriticEnsemble {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let q =
            [0, 1].map(|i| Mlp::new(spec.clone(), derive_seed(seed, &["critic", &i.to_string()])));
        let target = [q[0].params.clone(), q[1].params.clone()];
        Self { q, target }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.q[0].spec
    }

    /// Elementwise min of the two target critics, as a column vector per row.
    pub fn min_target(&self, input: ArrayView2<f64>) -> Array1<f64> {
        let spec = self.spec();
        let a = crate::nn::forward_params(spec, &self.target[0], input);
        let b = crate::nn::forward_params(spec, &self.target[1], input);
        Zip::from(a.column(0))
            .and(b.column(0))
            .map_collect(|&x, &y| x.min(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn values(&self, obs: ArrayView2<f64>) -> Array1<f64> {
        self.net.forward(obs).column(0).to_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyHead {
    /// Softmax over action logits.
    Categorical,
    /// Gaussian around the squashed mean with a fixed log-std (in half-range units).
    Gaussian {
        log_std: f64,
    },
    Deterministic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub net: Mlp,
    pub head: PolicyHead,
    pub action_spec: ActionSpec,
    /// Polyak target of the actor (TD3 only).
    pub target: Option<NetworkParams>,
}

impl PolicyNet {
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.action_spec {
            ActionSpec::Continuous { low, high, .. } => {
                let center = low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect();
                let half = low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect();
                (center, half)
            }
            ActionSpec::Discrete(_) => (Vec::new(), Vec::new()),
        }
    }

    /// Maps tanh outputs in `[-1, 1]` to the action box.
    fn scale_actions(&self, mut u: Array2<f64>) -> Array2<f64> {
        let (center, half) = self.bounds();
        for mut row in u.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = center[j] + half[j] * *v;
            }
        }
        u
    }

    /// Deterministic (mean or argmax) actions for a batch of conditioning inputs.
    pub fn mean_actions(&self, obs: ArrayView2<f64>) -> Array2<f64> {
        self.scale_actions(self.net.forward(obs))
    }

    fn target_actions(&self, obs: ArrayView2<f64>) -> Array2<f64> {
        let params = self.target.as_ref().unwrap_or(&self.net.params);
        self.scale_actions(crate::nn::forward_params(&self.net.spec, params, obs))
    }

    pub fn act_deterministic(&self, obs: ArrayView2<f64>) -> Vec<Action> {
        let out = self.net.forward(obs);
        match self.head {
            PolicyHead::Categorical => out
                .rows()
                .into_iter()
                .map(|r| Action::Discrete(argmax(&r.to_vec())))
                .collect(),
            _ => self
                .scale_actions(out)
                .rows()
                .into_iter()
                .map(|r| Action::Continuous(r.to_vec()))
                .collect(),
        }
    }

    /// Behaviour actions for data collection.
    pub fn act_explore(
        &self,
        obs: ArrayView2<f64>,
        exploration_std: f64,
        rng: &mut Rng,
    ) -> Vec<Action> {
        let out = self.net.forward(obs);
        match self.head {
            PolicyHead::Categorical => out
                .rows()
                .into_iter()
                .map(|r| {
                    let p = softmax(&r.to_vec());
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let a = p.iter().position(|&pi| {
                        acc += pi;
                        u < acc
                    });
                    Action::Discrete(a.unwrap_or(p.len() - 1))
                })
                .collect(),
            head => {
                let std = match head {
                    PolicyHead::Gaussian { log_std } => log_std.exp(),
                    _ => exploration_std,
                };
                let (_, half) = self.bounds();
                let mean = self.scale_actions(out);
                let ActionSpec::Continuous { low, high, .. } = &self.action_spec else {
                    unreachable!()
                };
                mean.rows()
                    .into_iter()
                    .map(|r| {
                        Action::Continuous(
                            r.iter()
                                .enumerate()
                                .map(|(j, m)| {
                                    let eps: f64 = StandardNormal.sample(rng);
                                    (m + eps * std * half[j]).clamp(low[j], high[j])
                                })
                                .collect(),
                        )
                    })
                    .collect()
            }
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// The full set of trainable networks plus their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub backbone: Backbone,
    pub critic: CriticEnsemble,
    pub value: Option<ValueNet>,
    pub policy: PolicyNet,
    pub critic_opt: [AdamState; 2],
    pub value_opt: Option<AdamState>,
    pub policy_opt: AdamState,
}

impl Agent {
    /// Fresh agent over conditioning inputs of width `cond_dim` (observation + skill).
    pub fn new(
        cond_dim: usize,
        action_spec: &ActionSpec,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let adim = action_spec.encoded_dim();
        let critic = CriticEnsemble::new(MlpSpec::relu(cond_dim + adim, &config.hidden, 1), seed);
        let value = (config.backbone == Backbone::Iql).then(|| ValueNet {
            net: Mlp::new(
                MlpSpec::relu(cond_dim, &config.hidden, 1),
                derive_seed(seed, &["value"]),
            ),
        });
        let head = match (config.backbone, action_spec) {
            (Backbone::Iql, ActionSpec::Discrete(_)) => PolicyHead::Categorical,
            (Backbone::Iql, ActionSpec::Continuous { .. }) => PolicyHead::Gaussian {
                log_std: config.iql_log_std,
            },
            (Backbone::Td3, ActionSpec::Continuous { .. }) => PolicyHead::Deterministic,
            (Backbone::Td3, ActionSpec::Discrete(_)) => {
                return Err(Error::InvalidArgument(
                    "the td3 backbone needs continuous actions".into(),
                ))
            }
        };
        let mut pspec = MlpSpec::relu(cond_dim, &config.hidden, adim);
        if head != PolicyHead::Categorical {
            pspec = pspec.with_output_activation(OutputActivation::Tanh);
        }
        let net = Mlp::new(pspec, derive_seed(seed, &["policy"]));
        let target = (config.backbone == Backbone::Td3).then(|| net.params.clone());
        let policy = PolicyNet {
            net,
            head,
            action_spec: action_spec.clone(),
            target,
        };
        Ok(Self::with_nets(config, critic, value, policy))
    }

    /// Wraps existing networks with fresh optimizer states.
    pub fn with_nets(
        config: &TrainConfig,
        critic: CriticEnsemble,
        value: Option<ValueNet>,
        policy: PolicyNet,
    ) -> Self {
        let critic_opt = [0, 1]
            .map(|i| AdamState::new(&critic.q[i].params, AdamConfig::with_lr(config.lr_critic)));
        let value_opt = value
            .as_ref()
            .map(|v| AdamState::new(&v.net.params, AdamConfig::with_lr(config.lr_value)));
        let policy_opt = AdamState::new(&policy.net.params, AdamConfig::with_lr(config.lr_actor));
        Self {
            backbone: config.backbone,
            critic,
            value,
            policy,
            critic_opt,
            value_opt,
            policy_opt,
        }
    }
}

/// Component losses reported by one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic: f64,
    pub value: f64,
    pub actor: f64,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalFailure(format!(
            "{what} loss evaluated to {v}"
        )))
    }
}

/// Twin-critic squared TD loss toward fixed targets `y`, averaged over batch and twins.
fn twin_regression(
    critic: &CriticEnsemble,
    input: ArrayView2<f64>,
    y: &Array1<f64>,
) -> (f64, [NetworkParams; 2]) {
    let b = y.len() as f64;
    let mut total = 0.0;
    let grads = [0, 1].map(|i| {
        let tape = critic.q[i].forward_tape(input);
        let diff = &tape.output().column(0) - y;
        total += diff.iter().map(|d| d * d).sum::<f64>() / b;
        let g = (&diff / b).insert_axis(Axis(1));
        critic.q[i].backward(&tape, g)
    });
    (0.5 * total, grads)
}

/// `mean_{b, i} (r + gamma (1 - term) V(s') - Q_i(s, a))^2`.
pub fn iql_q_loss(
    critic: &CriticEnsemble,
    value: &ValueNet,
    batch: &Batch,
    gamma: f64,
) -> Result<(f64, [NetworkParams; 2])> {
    let r = batch.rewards()?;
    let v_next = value.values(batch.next_obs.view());
    let y = r + &(gamma * (1.0 - &batch.terminals) * v_next);
    let (loss, g) = twin_regression(critic, batch.critic_input().view(), &y);
    Ok((finite(loss, "iql critic")?, g))
}

/// `mean_b l2_tau(min_i Qbar_i(s, a) - V(s))`.
pub fn iql_v_loss(
    value: &ValueNet,
    critic: &CriticEnsemble,
    batch: &Batch,
    tau: f64,
) -> Result<(f64, NetworkParams)> {
    let q = critic.min_target(batch.critic_input().view());
    let tape = value.net.forward_tape(batch.obs.view());
    let b = q.len() as f64;
    let mut loss = 0.0;
    let g = Zip::from(&q)
        .and(tape.output().column(0))
        .map_collect(|&q, &v| {
            let u = q - v;
            let w = expectile_weight(u, tau);
            loss += w * u * u;
            -2.0 * w * u / b
        });
    let grads = value.net.backward(&tape, g.insert_axis(Axis(1)));
    Ok((finite(loss / b, "iql value")?, grads))
}

/// TD3 bootstrap target with pre-drawn standard normal noise `eps` (batch x action dim).
pub fn td3_target(
    critic: &CriticEnsemble,
    policy: &PolicyNet,
    batch: &Batch,
    gamma: f64,
    policy_noise: f64,
    noise_clip: f64,
    eps: &Array2<f64>,
) -> Result<Array1<f64>> {
    let r = batch.rewards()?;
    let ActionSpec::Continuous { low, high, .. } = &policy.action_spec else {
        return Err(Error::InvalidArgument(
            "td3 needs continuous actions".into(),
        ));
    };
    let (_, half) = policy.bounds();
    let mut a_next = policy.target_actions(batch.next_obs.view());
    for (mut row, e) in a_next.rows_mut().into_iter().zip(eps.rows()) {
        for j in 0..row.len() {
            let noise =
                (e[j] * policy_noise * half[j]).clamp(-noise_clip * half[j], noise_clip * half[j]);
            row[j] = (row[j] + noise).clamp(low[j], high[j]);
        }
    }
    let q_next = critic.min_target(hcat(batch.next_obs.view(), a_next.view()).view());
    Ok(r + &(gamma * (1.0 - &batch.terminals) * q_next))
}

pub fn td3_critic_loss(
    critic: &CriticEnsemble,
    policy: &PolicyNet,
    batch: &Batch,
    gamma: f64,
    policy_noise: f64,
    noise_clip: f64,
    rng: &mut Rng,
) -> Result<(f64, [NetworkParams; 2])> {
    let eps = Array2::from_shape_simple_fn((batch.len(), batch.actions.ncols()), || {
        StandardNormal.sample(rng)
    });
    let y = td3_target(critic, policy, batch, gamma, policy_noise, noise_clip, &eps)?;
    let (loss, g) = twin_regression(critic, batch.critic_input().view(), &y);
    Ok((finite(loss, "td3 critic")?, g))
}

/// Advantage weights `min(exp(beta (min Qbar - V)), cap)`.
pub fn awr_weights(
    critic: &CriticEnsemble,
    value: &ValueNet,
    batch: &Batch,
    beta: f64,
) -> Array1<f64> {
    let q = critic.min_target(batch.critic_input().view());
    let v = value.values(batch.obs.view());
    Zip::from(&q)
        .and(&v)
        .map_collect(|&q, &v| (beta * (q - v)).exp().min(AWR_WEIGHT_CAP))
}

/// `-mean_b w_b log pi(a_b | s_b)` with [`awr_weights`].
pub fn awr_actor_loss(
    policy: &PolicyNet,
    critic: &CriticEnsemble,
    value: &ValueNet,
    batch: &Batch,
    temperature: f64,
) -> Result<(f64, NetworkParams)> {
    let w = awr_weights(critic, value, batch, temperature);
    weighted_log_likelihood_loss(policy, batch, &w)
}

/// `-mean_b w_b log pi(a_b | s_b)` for fixed weights.
pub fn weighted_log_likelihood_loss(
    policy: &PolicyNet,
    batch: &Batch,
    w: &Array1<f64>,
) -> Result<(f64, NetworkParams)> {
    let b = batch.len() as f64;
    let tape = policy.net.forward_tape(batch.obs.view());
    let out = tape.output();
    let mut loss = 0.0;
    let mut g = Array2::zeros(out.raw_dim());
    match policy.head {
        PolicyHead::Categorical => {
            let idx = batch.action_idx.as_ref().ok_or_else(|| {
                Error::InvalidArgument("categorical policy needs discrete actions".into())
            })?;
            for (i, row) in out.rows().into_iter().enumerate() {
                let p = softmax(&row.to_vec());
                let a = idx[i];
                loss -= w[i] * p[a].ln();
                for (j, pj) in p.iter().enumerate() {
                    g[[i, j]] = w[i] * (pj - f64::from(u8::from(j == a))) / b;
                }
            }
        }
        PolicyHead::Gaussian { log_std } => {
            let (center, half) = policy.bounds();
            for (i, row) in out.rows().into_iter().enumerate() {
                for (j, &u) in row.iter().enumerate() {
                    let sigma = log_std.exp() * half[j];
                    let mu = center[j] + half[j] * u;
                    let d = batch.actions[[i, j]] - mu;
                    let logp = -0.5 * d * d / (sigma * sigma) - sigma.ln() - 0.5 * LN_2PI;
                    loss -= w[i] * logp;
                    g[[i, j]] = -w[i] * d / (sigma * sigma) * half[j] / b;
                }
            }
        }
        PolicyHead::Deterministic => {
            return Err(Error::InvalidArgument(
                "deterministic policies have no likelihood".into(),
            ))
        }
    }
    let grads = policy.net.backward(&tape, g);
    Ok((finite(loss / b, "awr actor")?, grads))
}

/// `-mean_b Q_1(s_b, pi(s_b))`, differentiated through the critic into the actor.
pub fn ddpg_actor_loss(
    policy: &PolicyNet,
    critic: &CriticEnsemble,
    batch: &Batch,
    preact_penalty: f64,
) -> Result<(f64, NetworkParams)> {
    let b = batch.len() as f64;
    let cond = batch.obs.ncols();
    let ptape = policy.net.forward_tape(batch.obs.view());
    let actions = policy.scale_actions(ptape.output().clone());
    let qtape = critic.q[0].forward_tape(hcat(batch.obs.view(), actions.view()).view());
    let pre = policy.net.output_preactivation(&ptape);
    let loss = -qtape.output().sum() / b + preact_penalty * pre.mapv(|u| u * u).sum() / b;
    let dq = Array2::from_elem((batch.len(), 1), -1.0 / b);
    let dinput = critic.q[0].input_grad(&qtape, dq);
    let (_, half) = policy.bounds();
    let mut du = dinput.slice(s![.., cond..]).to_owned();
    for mut row in du.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= half[j];
        }
    }
    let grads = policy.net.backward_with_preactivation(
        &ptape,
        du,
        &pre.mapv(|u| 2.0 * preact_penalty * u / b),
    );
    Ok((finite(loss, "ddpg actor")?, grads))
}

/// One gradient step on critics (and the value net for IQL) and the actor, then
/// Polyak target updates.
pub fn update_step(
    agent: &mut Agent,
    batch: &Batch,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossReport> {
    let mut report = LossReport::default();
    match agent.backbone {
        Backbone::Iql => {
            let value = agent.value.as_mut().expect("iql agent has a value net");
            let (vl, vg) = iql_v_loss(value, &agent.critic, batch, config.expectile_tau)?;
            adam_step(
                &mut value.net.params,
                &vg,
                agent.value_opt.as_mut().expect("value optimizer"),
            );
            report.value = vl;

            let (ql, qg) = iql_q_loss(&agent.critic, value, batch, config.gamma)?;
            for i in 0..2 {
                adam_step(
                    &mut agent.critic.q[i].params,
                    &qg[i],
                    &mut agent.critic_opt[i],
                );
            }
            report.critic = ql;

            let (al, ag) = awr_actor_loss(
                &agent.policy,
                &agent.critic,
                value,
                batch,
                config.awr_temperature,
            )?;
            adam_step(&mut agent.policy.net.params, &ag, &mut agent.policy_opt);
            report.actor = al;
        }
        Backbone::Td3 => {
            let (ql, qg) = td3_critic_loss(
                &agent.critic,
                &agent.policy,
                batch,
                config.gamma,
                config.td3_policy_noise,
                config.td3_noise_clip,
                rng,
            )?;
            for i in 0..2 {
                adam_step(
                    &mut agent.critic.q[i].params,
                    &qg[i],
                    &mut agent.critic_opt[i],
                );
            }
            report.critic = ql;

            let (al, ag) = ddpg_actor_loss(
                &agent.policy,
                &agent.critic,
                batch,
                config.td3_preact_penalty,
            )?;
            adam_step(&mut agent.policy.net.params, &ag, &mut agent.policy_opt);
            report.actor = al;
        }
    }
    for i in 0..2 {
        polyak_update(
            &mut agent.critic.target[i],
            &agent.critic.q[i].params,
            config.polyak_coeff,
        );
    }
    if let Some(t) = agent.policy.target.as_mut() {
        polyak_update(t, &agent.policy.net.params, config.polyak_coeff);
    }
    Ok(report)
}
