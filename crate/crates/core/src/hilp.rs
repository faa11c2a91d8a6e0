//! Unsupervised pretraining: Hilbert features, intrinsic rewards and skill policies.
//!
//! The feature net `xi` is trained first as a goal-conditioned value
//! `V(s, g) = -|xi(s) - xi(g)|`. It is then frozen and a skill-conditioned
//! actor-critic is trained on the intrinsic reward `(xi(s') - xi(s)) . z`.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diag::{feature_dot_product, sample_consecutive_pairs};
use crate::env::{ActionSpec, EnvId, EnvSpec, TransitionDataset};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_params, save_params};
use crate::nn::{adam_step, polyak_update, AdamConfig, AdamState, Mlp, MlpSpec, NetworkParams};
use crate::offline_rl::{
    update_step, Agent, Backbone, CriticEnsemble, LossReport, PolicyHead, PolicyNet, TrainConfig,
    TransitionStore, ValueNet,
};
use crate::rng::{derive_rng, derive_seed, Rng};

/// Unit-norm skill vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillLatent(Vec<f64>);

impl SkillLatent {
    /// Normalizes `v`; fails on (near) zero vectors.
    pub fn normalized(v: Vec<f64>) -> Option<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n >= 1e-8 && n.is_finite()).then(|| Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn sample_skill(rng: &mut Rng, d: usize) -> SkillLatent {
    assert!(d >= 1, "skill dimension must be positive");
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(z) = SkillLatent::normalized(v) {
            return z;
        }
    }
}

/// Welford running mean and population variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2.max(0.0) / self.count as f64).sqrt()
        }
    }

    pub fn normalize(&self, x: f64) -> Result<f64> {
        if self.count < 2 {
            return Err(Error::InsufficientStats(self.count));
        }
        Ok((x - self.mean) / (self.std() + 1e-8))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub net: Mlp,
    pub target: NetworkParams,
}

impl FeatureNet {
    pub fn new(obs_dim: usize, d: usize, hidden: &[usize], seed: u64) -> Self {
        let net = Mlp::new(MlpSpec::relu(obs_dim, hidden, d), seed);
        let target = net.params.clone();
        Self { net, target }
    }

    pub fn dim(&self) -> usize {
        self.net.spec.output_dim()
    }

    pub fn features(&self, obs: ArrayView2<f64>) -> Array2<f64> {
        self.net.forward(obs)
    }

    pub fn features_one(&self, obs: &[f64]) -> Result<Vec<f64>> {
        crate::nn::mlp_forward(&self.net.spec, &self.net.params, obs)
    }

    /// `V(s, g) = -|xi(s) - xi(g)|`.
    pub fn value(&self, s: &[f64], g: &[f64]) -> Result<f64> {
        let a = self.features_one(s)?;
        let b = self.features_one(g)?;
        Ok(-a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt())
    }
}

/// `xi(s') - xi(s)`.
pub fn successor_feature(xi: &FeatureNet, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
    let a = xi.features_one(s)?;
    let b = xi.features_one(s_next)?;
    Ok(b.iter().zip(&a).map(|(x, y)| x - y).collect())
}

pub fn intrinsic_reward(xi: &FeatureNet, s: &[f64], s_next: &[f64], z: &[f64]) -> Result<f64> {
    let f = successor_feature(xi, s, s_next)?;
    if f.len() != z.len() {
        return Err(Error::ShapeMismatch {
            expected: f.len(),
            got: z.len(),
        });
    }
    Ok(f.iter().zip(z).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HilbertConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub expectile: f64,
    pub lr: f64,
    pub polyak_coeff: f64,
    pub batch_size: usize,
    pub p_next: f64,
    pub p_future: f64,
    pub p_random: f64,
    /// Distance under which two observations count as the same goal.
    pub goal_tolerance: f64,
}

impl HilbertConfig {
    pub fn for_env(spec: &EnvSpec) -> Self {
        Self {
            hidden: vec![64, 64],
            gamma: 0.98,
            expectile: 0.9,
            lr: 5e-4,
            polyak_coeff: 0.005,
            batch_size: 128,
            p_next: 0.2,
            p_future: 0.5,
            p_random: 0.3,
            goal_tolerance: match spec.env_id {
                EnvId::Gridworld { .. } => 1e-9,
                EnvId::Pointmass => 0.05,
            },
        }
    }
}

/// Goal-conditioned minibatch for the Hilbert value loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalBatch {
    pub obs: Array2<f64>,
    pub next_obs: Array2<f64>,
    pub goals: Array2<f64>,
}

fn rows_match(a: ArrayView2<f64>, b: ArrayView2<f64>, tol: f64) -> Vec<bool> {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
                <= tol
        })
        .collect()
}

fn row_norms(x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

/// Expectile TD loss of `V(s, g) = -|xi(s) - xi(g)|` against
/// `-1(s != g) + gamma (1 - 1(s = g)) Vbar(s', g)` and its gradient.
pub fn hilbert_loss(
    xi: &FeatureNet,
    batch: &GoalBatch,
    cfg: &HilbertConfig,
) -> Result<(f64, NetworkParams)> {
    let n = batch.obs.nrows();
    let success = rows_match(batch.obs.view(), batch.goals.view(), cfg.goal_tolerance);
    let spec = &xi.net.spec;
    let tn = crate::nn::forward_params(spec, &xi.target, batch.next_obs.view());
    let tg = crate::nn::forward_params(spec, &xi.target, batch.goals.view());
    let v_next = row_norms(&(&tn - &tg)).mapv(|x| -x);

    let stacked =
        ndarray::concatenate(Axis(0), &[batch.obs.view(), batch.goals.view()]).expect("same width");
    let tape = xi.net.forward_tape(stacked.view());
    let out = tape.output();
    let diff = &out.slice(s![..n, ..]) - &out.slice(s![n.., ..]);
    let dist = row_norms(&diff);
    let mut grad = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for i in 0..n {
        let hit = f64::from(u8::from(success[i]));
        let y = hit - 1.0 + cfg.gamma * (1.0 - hit) * v_next[i];
        let u = y + dist[i];
        let w = if u < 0.0 {
            1.0 - cfg.expectile
        } else {
            cfg.expectile
        };
        loss += w * u * u;
        if dist[i] > 0.0 {
            // dL/d dist = 2 w u / n; d dist / d xi(s) = diff / dist
            let c = 2.0 * w * u / n as f64 / dist[i];
            for j in 0..diff.ncols() {
                grad[[i, j]] = c * diff[[i, j]];
                grad[[n + i, j]] = -c * diff[[i, j]];
            }
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "hilbert loss evaluated to {loss}"
        )));
    }
    Ok((loss, xi.net.backward(&tape, grad)))
}

/// Goal sampler over a dataset with episode structure.
pub struct GoalSampler<'a> {
    store: &'a TransitionStore,
    ends: Vec<usize>,
    cfg: &'a HilbertConfig,
}

impl<'a> GoalSampler<'a> {
    pub fn new(
        dataset: &TransitionDataset,
        store: &'a TransitionStore,
        cfg: &'a HilbertConfig,
    ) -> Result<Self> {
        if !dataset.transitions.iter().any(|t| t.done) {
            return Err(Error::NoCompleteEpisodes);
        }
        Ok(Self {
            store,
            ends: dataset.episode_ends(),
            cfg,
        })
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> GoalBatch {
        let len = self.store.len();
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
        let p_geom = 1.0 - self.cfg.gamma;
        let goal_idx: Vec<usize> = idx
            .iter()
            .map(|&i| {
                let u: f64 =
                    rng.random::<f64>() * (self.cfg.p_next + self.cfg.p_future + self.cfg.p_random);
                if u < self.cfg.p_next {
                    i
                } else if u < self.cfg.p_next + self.cfg.p_future {
                    // offset k >= 1 with P(k) = p (1 - p)^(k - 1), truncated at the episode end
                    let v: f64 = rng.random();
                    let k = ((1.0 - v).ln() / (1.0 - p_geom).ln()).floor() as usize + 1;
                    (i + k - 1).min(self.ends[i] - 1)
                } else {
                    rng.random_range(0..len)
                }
            })
            .collect();
        GoalBatch {
            obs: self.store.obs.select(Axis(0), &idx),
            next_obs: self.store.next_obs.select(Axis(0), &idx),
            goals: self.store.next_obs.select(Axis(0), &goal_idx),
        }
    }
}

pub fn train_hilbert_features(
    dataset: &TransitionDataset,
    d: usize,
    cfg: &HilbertConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<FeatureNet> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let store = TransitionStore::new(
        &dataset.transitions,
        dataset.spec.obs_dim,
        &dataset.spec.action_spec,
    );
    let sampler = GoalSampler::new(dataset, &store, cfg)?;
    let mut xi = FeatureNet::new(dataset.spec.obs_dim, d, &cfg.hidden, rng.random());
    let mut opt = AdamState::new(&xi.net.params, AdamConfig::with_lr(cfg.lr));
    for _ in 0..steps {
        let batch = sampler.sample(cfg.batch_size, rng);
        let (_, g) = hilbert_loss(&xi, &batch, cfg)?;
        adam_step(&mut xi.net.params, &g, &mut opt);
        polyak_update(&mut xi.target, &xi.net.params, cfg.polyak_coeff);
    }
    Ok(xi)
}

/// Skill-conditioned networks (inputs are `[obs, z]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SkillPolicySet {
    pub critic: CriticEnsemble,
    pub value: Option<ValueNet>,
    pub policy: PolicyNet,
}

impl SkillPolicySet {
    pub fn from_agent(agent: &Agent) -> Self {
        Self {
            critic: agent.critic.clone(),
            value: agent.value.clone(),
            policy: agent.policy.clone(),
        }
    }

    pub fn into_agent(self, config: &TrainConfig) -> Agent {
        Agent::with_nets(config, self.critic, self.value, self.policy)
    }

    fn round_to_f32(&mut self) {
        for p in self
            .critic
            .q
            .iter_mut()
            .map(|m| &mut m.params)
            .chain(self.critic.target.iter_mut())
        {
            p.round_to_f32();
        }
        if let Some(v) = self.value.as_mut() {
            v.net.params.round_to_f32();
        }
        self.policy.net.params.round_to_f32();
        if let Some(t) = self.policy.target.as_mut() {
            t.round_to_f32();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub d: usize,
    pub feature_steps: usize,
    pub skill_steps: usize,
    pub hilbert: HilbertConfig,
    pub train: TrainConfig,
    /// Interval (in skill steps) between feature-dot log rows; 0 disables logging.
    pub log_interval: usize,
}

impl PretrainConfig {
    pub fn for_env(spec: &EnvSpec) -> Self {
        let backbone = if spec.action_spec.is_discrete() {
            Backbone::Iql
        } else {
            Backbone::Td3
        };
        Self {
            d: 8,
            feature_steps: 20_000,
            skill_steps: 100_000,
            hilbert: HilbertConfig::for_env(spec),
            train: TrainConfig::for_backbone(backbone),
            log_interval: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub step: usize,
    pub losses: LossReport,
    pub feature_dot: f64,
}

/// Everything produced by pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBundle {
    pub spec: EnvSpec,
    pub backbone: Backbone,
    pub feature: FeatureNet,
    pub skills: SkillPolicySet,
    pub stats: RunningStats,
}

impl PretrainBundle {
    pub fn d(&self) -> usize {
        self.feature.dim()
    }
}

/// Trains features, then skills with normalized intrinsic rewards.
pub fn pretrain_skills(
    dataset: &TransitionDataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(PretrainBundle, Vec<PretrainLogRow>)> {
    let mut frng = derive_rng(seed, &["features"]);
    let feature =
        train_hilbert_features(dataset, cfg.d, &cfg.hilbert, cfg.feature_steps, &mut frng)?;
    pretrain_skills_with_features(dataset, feature, cfg, seed)
}

/// Skill stage only, on top of an already trained (frozen) feature net.
pub fn pretrain_skills_with_features(
    dataset: &TransitionDataset,
    feature: FeatureNet,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(PretrainBundle, Vec<PretrainLogRow>)> {
    let spec = &dataset.spec;
    let d = feature.dim();
    let store = TransitionStore::new(&dataset.transitions, spec.obs_dim, &spec.action_spec);
    let phi = feature.features(store.obs.view());
    let phi_next = feature.features(store.next_obs.view());
    let disp = &phi_next - &phi;

    let mut agent = Agent::new(
        spec.obs_dim + d,
        &spec.action_spec,
        &cfg.train,
        derive_seed(seed, &["skills"]),
    )?;
    let mut stats = RunningStats::default();
    let mut rng = derive_rng(seed, &["skill-train"]);
    let mut log = Vec::new();
    let probe = if cfg.log_interval > 0 {
        let pairs = sample_consecutive_pairs(dataset, 1024, &mut derive_rng(seed, &["probe"]))?;
        let z = sample_skill(&mut derive_rng(seed, &["probe-skill"]), d);
        Some((pairs, z))
    } else {
        None
    };
    let b = cfg.train.batch_size;
    for step in 1..=cfg.skill_steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..store.len())).collect();
        let mut zs = Array2::zeros((b, d));
        for mut row in zs.rows_mut() {
            row.assign(&ndarray::aview1(sample_skill(&mut rng, d).as_slice()));
        }
        let raw: Vec<f64> = idx
            .iter()
            .zip(zs.rows())
            .map(|(&i, z)| disp.row(i).dot(&z))
            .collect();
        for &r in &raw {
            stats.update(r);
        }
        let rewards = raw
            .iter()
            .map(|&r| stats.normalize(r))
            .collect::<Result<Array1<f64>>>()?;
        let mut batch = store.gather(&idx).with_skills(zs.view());
        batch.rewards = Some(rewards);
        let losses = update_step(&mut agent, &batch, &cfg.train, &mut rng)?;
        if let Some((pairs, z)) = probe.as_ref().filter(|_| step % cfg.log_interval == 0) {
            let fd = feature_dot_product(&agent.critic, pairs, Some(z.as_slice()))?;
            log.push(PretrainLogRow {
                step,
                losses,
                feature_dot: fd,
            });
        }
    }
    let mut skills = SkillPolicySet::from_agent(&agent);
    skills.round_to_f32();
    let mut feature = feature;
    feature.net.params.round_to_f32();
    feature.target.round_to_f32();
    let bundle = PretrainBundle {
        spec: spec.clone(),
        backbone: cfg.train.backbone,
        feature,
        skills,
        stats,
    };
    Ok((bundle, log))
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    spec: EnvSpec,
    backbone: Backbone,
    feature_spec: MlpSpec,
    critic_spec: MlpSpec,
    value_spec: Option<MlpSpec>,
    policy_spec: MlpSpec,
    policy_head: PolicyHead,
    stats: RunningStats,
}

const BUNDLE_META: &str = "bundle.json";

pub fn save_bundle(dir: &Path, bundle: &PretrainBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sk = &bundle.skills;
    let meta = BundleMeta {
        spec: bundle.spec.clone(),
        backbone: bundle.backbone,
        feature_spec: bundle.feature.net.spec.clone(),
        critic_spec: sk.critic.spec().clone(),
        value_spec: sk.value.as_ref().map(|v| v.net.spec.clone()),
        policy_spec: sk.policy.net.spec.clone(),
        policy_head: sk.policy.head,
        stats: bundle.stats,
    };
    save_params(&dir.join("feature.u2o"), &bundle.feature.net.params)?;
    save_params(&dir.join("feature_target.u2o"), &bundle.feature.target)?;
    for i in 0..2 {
        save_params(&dir.join(format!("critic{i}.u2o")), &sk.critic.q[i].params)?;
        save_params(
            &dir.join(format!("critic{i}_target.u2o")),
            &sk.critic.target[i],
        )?;
    }
    if let Some(v) = &sk.value {
        save_params(&dir.join("value.u2o"), &v.net.params)?;
    }
    save_params(&dir.join("policy.u2o"), &sk.policy.net.params)?;
    if let Some(t) = &sk.policy.target {
        save_params(&dir.join("policy_target.u2o"), t)?;
    }
    fs::write(dir.join(BUNDLE_META), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<PretrainBundle> {
    let meta_path = dir.join(BUNDLE_META);
    if !meta_path.exists() {
        return Err(Error::MissingBundle);
    }
    let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    let mlp = |name: &str, spec: &MlpSpec| -> Result<Mlp> {
        Mlp::from_parts(spec.clone(), load_params(&dir.join(name), spec)?)
    };
    let feature = FeatureNet {
        net: mlp("feature.u2o", &meta.feature_spec)?,
        target: load_params(&dir.join("feature_target.u2o"), &meta.feature_spec)?,
    };
    let critic = CriticEnsemble {
        q: [
            mlp("critic0.u2o", &meta.critic_spec)?,
            mlp("critic1.u2o", &meta.critic_spec)?,
        ],
        target: [
            load_params(&dir.join("critic0_target.u2o"), &meta.critic_spec)?,
            load_params(&dir.join("critic1_target.u2o"), &meta.critic_spec)?,
        ],
    };
    let value = meta
        .value_spec
        .as_ref()
        .map(|s| mlp("value.u2o", s).map(|net| ValueNet { net }))
        .transpose()?;
    let target = match meta.backbone {
        Backbone::Td3 => Some(load_params(
            &dir.join("policy_target.u2o"),
            &meta.policy_spec,
        )?),
        Backbone::Iql => None,
    };
    let policy = PolicyNet {
        net: mlp("policy.u2o", &meta.policy_spec)?,
        head: meta.policy_head,
        action_spec: meta.spec.action_spec.clone(),
        target,
    };
    Ok(PretrainBundle {
        spec: meta.spec,
        backbone: meta.backbone,
        feature,
        skills: SkillPolicySet {
            critic,
            value,
            policy,
        },
        stats: meta.stats,
    })
}

/// Width of the skill-conditioned input for a given action spec.
pub fn skill_input_dim(obs_dim: usize, d: usize, action_spec: &ActionSpec) -> usize {
    obs_dim + d + action_spec.encoded_dim()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_offline_dataset, Behavior};
    use crate::nn::check::{central_difference, max_relative_error};
    use crate::rng::rng_from_seed;

    #[test]
    fn skills_are_unit_norm() {
        let mut rng = rng_from_seed(0);
        for d in 1..10 {
            for _ in 0..50 {
                let z = sample_skill(&mut rng, d);
                let n: f64 = z.as_slice().iter().map(|x| x * x).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-9);
            }
        }
        let mut plus = 0;
        for _ in 0..2000 {
            let z = sample_skill(&mut rng, 1).as_slice()[0];
            assert!(z == 1.0 || z == -1.0);
            plus += usize::from(z > 0.0);
        }
        assert!((900..1100).contains(&plus));
    }

    #[test]
    fn skill_coordinates_have_zero_mean() {
        let mut rng = rng_from_seed(1);
        let mut sum = [0.0; 4];
        let n = 100_000;
        for _ in 0..n {
            for (s, x) in sum.iter_mut().zip(sample_skill(&mut rng, 4).as_slice()) {
                *s += x;
            }
        }
        assert!(sum.iter().all(|s| (s / n as f64).abs() < 0.02));
    }

    #[test]
    fn running_stats_examples() {
        let mut s = RunningStats::default();
        assert!(matches!(s.normalize(0.0), Err(Error::InsufficientStats(0))));
        for x in [1.0, 2.0, 3.0] {
            s.update(x);
        }
        assert!((s.mean - 2.0).abs() < 1e-15);
        assert!((s.std() - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.normalize(2.0).unwrap(), 0.0);
        let mut one = RunningStats::default();
        one.update(5.0);
        assert!(matches!(
            one.normalize(5.0),
            Err(Error::InsufficientStats(1))
        ));
    }

    #[test]
    fn running_stats_match_two_pass_on_long_stream() {
        let mut rng = rng_from_seed(2);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| 3.0 + 2.0 * rng.random::<f64>())
            .collect();
        let mut s = RunningStats::default();
        xs.iter().for_each(|&x| s.update(x));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(((s.mean - mean) / mean).abs() < 1e-9);
        assert!(((s.m2 / s.count as f64 - var) / var).abs() < 1e-9);
    }

    fn tiny_net(d: usize, seed: u64) -> FeatureNet {
        FeatureNet::new(2, d, &[6], seed)
    }

    #[test]
    fn intrinsic_reward_examples() {
        let xi = tiny_net(2, 0);
        let s = [0.3, 0.7];
        assert_eq!(intrinsic_reward(&xi, &s, &s, &[0.6, 0.8]).unwrap(), 0.0);
        assert!(successor_feature(&xi, &s, &s)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        // Known displacements via an identity-like net.
        let spec = MlpSpec::new(
            vec![2, 2],
            crate::nn::Activation::Relu,
            crate::nn::OutputActivation::Identity,
        )
        .unwrap();
        let params = NetworkParams {
            layers: vec![crate::nn::Layer {
                weight: ndarray::Array2::eye(2),
                bias: Array1::zeros(2),
            }],
        };
        let id = FeatureNet {
            net: Mlp::from_parts(spec, params.clone()).unwrap(),
            target: params,
        };
        assert_eq!(
            intrinsic_reward(&id, &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            0.0
        );
        assert!(
            (intrinsic_reward(&id, &[0.0, 0.0], &[0.6, 0.8], &[0.6, 0.8]).unwrap() - 1.0).abs()
                < 1e-15
        );
    }

    #[test]
    fn successor_feature_properties() {
        let xi = tiny_net(3, 4);
        let (a, b) = ([0.1, 0.9], [0.5, 0.2]);
        let f = successor_feature(&xi, &a, &b).unwrap();
        let g = successor_feature(&xi, &b, &a).unwrap();
        assert!(f.iter().zip(&g).all(|(x, y)| x == &-y));
        let fa = xi.features_one(&a).unwrap();
        let fb = xi.features_one(&b).unwrap();
        assert!(f
            .iter()
            .zip(fb.iter().zip(&fa))
            .all(|(x, (p, q))| (x - (p - q)).abs() < 1e-15));
    }

    #[test]
    fn intrinsic_reward_is_linear_in_z() {
        let xi = tiny_net(3, 5);
        let (s, sn) = ([0.2, 0.4], [0.6, 0.1]);
        let (z1, z2) = ([1.0, -2.0, 0.5], [0.3, 0.3, -1.0]);
        let (a, b) = (1.7, -0.4);
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
        let lhs = intrinsic_reward(&xi, &s, &sn, &mix).unwrap();
        let rhs = a * intrinsic_reward(&xi, &s, &sn, &z1).unwrap()
            + b * intrinsic_reward(&xi, &s, &sn, &z2).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn value_is_nonpositive_and_zero_on_diagonal() {
        let xi = tiny_net(4, 6);
        let mut rng = rng_from_seed(3);
        for _ in 0..100 {
            let s = [rng.random::<f64>(), rng.random::<f64>()];
            let g = [rng.random::<f64>(), rng.random::<f64>()];
            assert!(xi.value(&s, &g).unwrap() <= 0.0);
            assert_eq!(xi.value(&s, &s).unwrap(), 0.0);
        }
    }

    fn random_goal_batch(n: usize, seed: u64) -> GoalBatch {
        let mut rng = rng_from_seed(seed);
        let mut m = || Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let obs = m();
        let next_obs = m();
        let mut goals = m();
        // a few exact goal hits exercise the masked branch
        goals.row_mut(0).assign(&obs.row(0));
        GoalBatch {
            obs,
            next_obs,
            goals,
        }
    }

    #[test]
    fn hilbert_loss_matches_finite_differences() {
        let spec = EnvSpec::pointmass();
        let cfg = HilbertConfig::for_env(&spec);
        for seed in 0..5 {
            let mut xi = tiny_net(3, seed);
            xi.target = FeatureNet::new(2, 3, &[6], seed + 100).net.params;
            let batch = random_goal_batch(9, seed);
            let (_, g) = hilbert_loss(&xi, &batch, &cfg).unwrap();
            let fd = central_difference(&xi.net.params, 1e-5, |p| {
                let mut x = xi.clone();
                x.net.params = p.clone();
                hilbert_loss(&x, &batch, &cfg).unwrap().0
            });
            assert!(max_relative_error(&g.to_flat(), &fd.to_flat()) < 1e-4);
        }
    }

    #[test]
    fn goal_sampler_respects_episodes() {
        let spec = EnvSpec::gridworld(4);
        let ds =
            collect_offline_dataset(&spec, Behavior::UniformRandom, 200, &mut rng_from_seed(0))
                .unwrap();
        let store = TransitionStore::new(&ds.transitions, 2, &spec.action_spec);
        let cfg = HilbertConfig {
            p_next: 0.0,
            p_future: 1.0,
            p_random: 0.0,
            ..HilbertConfig::for_env(&spec)
        };
        let sampler = GoalSampler::new(&ds, &store, &cfg).unwrap();
        let mut rng = rng_from_seed(1);
        let b = sampler.sample(500, &mut rng);
        // each future goal is reachable from s within the episode length
        for i in 0..500 {
            let s = spec.decode_cell(b.obs.row(i).as_slice().unwrap());
            let g = spec.decode_cell(b.goals.row(i).as_slice().unwrap());
            let dist = s.0.abs_diff(g.0) + s.1.abs_diff(g.1);
            assert!(dist <= spec.max_episode_len);
        }
    }

    #[test]
    fn no_complete_episode_is_an_error() {
        let spec = EnvSpec::gridworld(4);
        let ds = collect_offline_dataset(&spec, Behavior::UniformRandom, 5, &mut rng_from_seed(0))
            .unwrap();
        let cfg = HilbertConfig::for_env(&spec);
        assert!(matches!(
            train_hilbert_features(&ds, 2, &cfg, 1, &mut rng_from_seed(0)),
            Err(Error::NoCompleteEpisodes)
        ));
    }

    #[test]
    fn zero_skill_steps_keep_initialization() {
        let spec = EnvSpec::gridworld(4);
        let ds =
            collect_offline_dataset(&spec, Behavior::UniformRandom, 200, &mut rng_from_seed(0))
                .unwrap();
        let cfg = PretrainConfig {
            feature_steps: 5,
            skill_steps: 0,
            d: 2,
            ..PretrainConfig::for_env(&spec)
        };
        let (bundle, _) = pretrain_skills(&ds, &cfg, 3).unwrap();
        assert_eq!(bundle.stats.count, 0);
        let mut fresh = SkillPolicySet::from_agent(
            &Agent::new(
                4,
                &spec.action_spec,
                &cfg.train,
                derive_seed(3, &["skills"]),
            )
            .unwrap(),
        );
        fresh.round_to_f32();
        assert_eq!(bundle.skills, fresh);
    }

    #[test]
    fn bundle_round_trip_and_determinism() {
        let spec = EnvSpec::pointmass();
        let ds =
            collect_offline_dataset(&spec, Behavior::UniformRandom, 300, &mut rng_from_seed(0))
                .unwrap();
        let mut cfg = PretrainConfig {
            feature_steps: 20,
            skill_steps: 20,
            d: 3,
            ..PretrainConfig::for_env(&spec)
        };
        cfg.train.batch_size = 16;
        cfg.hilbert.batch_size = 16;
        let (a, _) = pretrain_skills(&ds, &cfg, 9).unwrap();
        let (b, _) = pretrain_skills(&ds, &cfg, 9).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&dir.path().join("x"), &a).unwrap();
        save_bundle(&dir.path().join("y"), &b).unwrap();
        for f in [
            "feature.u2o",
            "critic0.u2o",
            "policy.u2o",
            "policy_target.u2o",
            "bundle.json",
        ] {
            assert_eq!(
                fs::read(dir.path().join("x").join(f)).unwrap(),
                fs::read(dir.path().join("y").join(f)).unwrap()
            );
        }
        assert_eq!(load_bundle(&dir.path().join("x")).unwrap(), a);
        assert!(matches!(
            load_bundle(&dir.path().join("missing")),
            Err(Error::MissingBundle)
        ));
    }
}
