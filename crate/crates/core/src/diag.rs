//! Representation diagnostics: critic feature co-adaptation and reward statistics.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bridge::NormalizerState;
use crate::env::TransitionDataset;
use crate::error::{Error, Result};
use crate::offline_rl::{hcat, CriticEnsemble};
use crate::rng::Rng;

/// Consecutive `((s, a), (s', a'))` pairs from within single episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePairBatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_obs: Array2<f64>,
    pub next_actions: Array2<f64>,
}

impl FeaturePairBatch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sample_consecutive_pairs(
    dataset: &TransitionDataset,
    n: usize,
    rng: &mut Rng,
) -> Result<FeaturePairBatch> {
    let ends = dataset.episode_ends();
    let eligible: Vec<usize> = (0..dataset.len()).filter(|&i| i + 1 < ends[i]).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligiblePairs);
    }
    let spec = &dataset.spec;
    let adim = spec.action_spec.encoded_dim();
    let mut out = FeaturePairBatch {
        obs: Array2::zeros((n, spec.obs_dim)),
        actions: Array2::zeros((n, adim)),
        next_obs: Array2::zeros((n, spec.obs_dim)),
        next_actions: Array2::zeros((n, adim)),
    };
    for k in 0..n {
        let i = eligible[rng.random_range(0..eligible.len())];
        let (t, u) = (&dataset.transitions[i], &dataset.transitions[i + 1]);
        out.obs.row_mut(k).assign(&ndarray::aview1(&t.s));
        out.next_obs.row_mut(k).assign(&ndarray::aview1(&u.s));
        t.a.encode_into(
            &spec.action_spec,
            out.actions.row_mut(k).as_slice_mut().unwrap(),
        );
        u.a.encode_into(
            &spec.action_spec,
            out.next_actions.row_mut(k).as_slice_mut().unwrap(),
        );
    }
    Ok(out)
}

fn critic_input(obs: ArrayView2<f64>, actions: ArrayView2<f64>, z: Option<&[f64]>) -> Array2<f64> {
    match z {
        Some(z) => {
            let zs = Array2::from_shape_fn((obs.nrows(), z.len()), |(_, j)| z[j]);
            hcat(hcat(obs, zs.view()).view(), actions)
        }
        None => hcat(obs, actions),
    }
}

/// Mean of `zeta(s, a) . zeta(s', a')` over the batch, using the first critic's
/// penultimate activations.
pub fn feature_dot_product(
    critic: &CriticEnsemble,
    pairs: &FeaturePairBatch,
    z: Option<&[f64]>,
) -> Result<f64> {
    let q = &critic.q[0];
    let (_, a) =
        q.forward_with_features(critic_input(pairs.obs.view(), pairs.actions.view(), z).view())?;
    let (_, b) = q.forward_with_features(
        critic_input(pairs.next_obs.view(), pairs.next_actions.view(), z).view(),
    )?;
    Ok((&a * &b).sum() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardStatsProbe {
    pub raw_mean: f64,
    pub raw_std: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
}

/// Population mean and standard deviation by two passes.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Streams `rewards` through a copy of `normalizer` and summarizes both streams.
pub fn reward_stats_probe(
    rewards: &[f64],
    normalizer: &NormalizerState,
) -> Result<RewardStatsProbe> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument(
            "reward probe needs a nonempty stream".into(),
        ));
    }
    let mut norm = normalizer.clone();
    let normalized: Vec<f64> = rewards.iter().map(|&r| norm.match_task_reward(r)).collect();
    Ok(summarize(rewards, &normalized))
}

pub fn summarize(raw: &[f64], normalized: &[f64]) -> RewardStatsProbe {
    let (raw_mean, raw_std) = mean_std(raw);
    let (norm_mean, norm_std) = mean_std(normalized);
    RewardStatsProbe {
        raw_mean,
        raw_std,
        norm_mean,
        norm_std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_offline_dataset, Action, Behavior, EnvSpec, Transition};
    use crate::hilp::RunningStats;
    use crate::nn::{Activation, Layer, Mlp, MlpSpec, NetworkParams, OutputActivation};
    use crate::rng::rng_from_seed;
    use ndarray::{array, Array1};

    fn critic_from(mlp: Mlp) -> CriticEnsemble {
        CriticEnsemble {
            q: [mlp.clone(), mlp.clone()],
            target: [mlp.params.clone(), mlp.params],
        }
    }

    /// Hidden layer maps `x` to `(x_0, x_1)` (through relu), output is their sum.
    fn projecting_critic() -> CriticEnsemble {
        let spec =
            MlpSpec::new(vec![2, 2, 1], Activation::Relu, OutputActivation::Identity).unwrap();
        let params = NetworkParams {
            layers: vec![
                Layer {
                    weight: Array2::eye(2),
                    bias: Array1::zeros(2),
                },
                Layer {
                    weight: array![[1.0, 1.0]],
                    bias: Array1::zeros(1),
                },
            ],
        };
        critic_from(Mlp::from_parts(spec, params).unwrap())
    }

    fn pairs(obs: Array2<f64>, next: Array2<f64>) -> FeaturePairBatch {
        let n = obs.nrows();
        FeaturePairBatch {
            obs,
            actions: Array2::zeros((n, 0)),
            next_obs: next,
            next_actions: Array2::zeros((n, 0)),
        }
    }

    #[test]
    fn dot_product_examples() {
        let c = projecting_critic();
        let ones = Array2::ones((5, 2));
        assert_eq!(
            feature_dot_product(&c, &pairs(ones.clone(), ones), None).unwrap(),
            2.0
        );
        let p = pairs(
            array![[1.0, 0.0], [0.0, 2.0]],
            array![[0.0, 3.0], [4.0, 0.0]],
        );
        assert_eq!(feature_dot_product(&c, &p, None).unwrap(), 0.0);
    }

    #[test]
    fn dot_product_needs_hidden_layer() {
        let spec = MlpSpec::new(vec![2, 1], Activation::Relu, OutputActivation::Identity).unwrap();
        let c = critic_from(Mlp::new(spec, 0));
        let p = pairs(Array2::ones((1, 2)), Array2::ones((1, 2)));
        assert!(matches!(
            feature_dot_product(&c, &p, None),
            Err(Error::NoPenultimateLayer)
        ));
    }

    #[test]
    fn dot_product_matches_per_row_recomputation() {
        let spec = EnvSpec::gridworld(5);
        let ds =
            collect_offline_dataset(&spec, Behavior::UniformRandom, 500, &mut rng_from_seed(0))
                .unwrap();
        let p = sample_consecutive_pairs(&ds, 64, &mut rng_from_seed(1)).unwrap();
        let z = [0.6, 0.0, -0.8];
        let c = CriticEnsemble::new(MlpSpec::relu(2 + 3 + 4, &[16, 16], 1), 7);
        let got = feature_dot_product(&c, &p, Some(&z)).unwrap();
        let mut acc = 0.0;
        for i in 0..p.len() {
            let row = |o: ArrayView2<f64>, a: ArrayView2<f64>| -> Vec<f64> {
                o.row(i).iter().chain(&z).chain(a.row(i)).copied().collect()
            };
            let (_, fa) = crate::nn::mlp_forward_with_features(
                &c.q[0].spec,
                &c.q[0].params,
                &row(p.obs.view(), p.actions.view()),
            )
            .unwrap();
            let (_, fb) = crate::nn::mlp_forward_with_features(
                &c.q[0].spec,
                &c.q[0].params,
                &row(p.next_obs.view(), p.next_actions.view()),
            )
            .unwrap();
            acc += fa.iter().zip(&fb).map(|(x, y)| x * y).sum::<f64>();
        }
        assert!((got - acc / 64.0).abs() < 1e-12);
    }

    #[test]
    fn pairs_stay_inside_episodes() {
        let spec = EnvSpec::gridworld(4).with_max_episode_len(3);
        let ds =
            collect_offline_dataset(&spec, Behavior::UniformRandom, 300, &mut rng_from_seed(0))
                .unwrap();
        let p = sample_consecutive_pairs(&ds, 100_000, &mut rng_from_seed(2)).unwrap();
        let starts: Vec<Vec<f64>> = ds
            .episode_starts
            .iter()
            .map(|&i| ds.transitions[i].s.clone())
            .collect();
        let _ = starts;
        // Each pair (s, s') must be one step apart on the grid.
        for i in 0..p.len() {
            let a = spec.decode_cell(p.obs.row(i).as_slice().unwrap());
            let b = spec.decode_cell(p.next_obs.row(i).as_slice().unwrap());
            assert!(a.0.abs_diff(b.0) + a.1.abs_diff(b.1) <= 1);
        }
        let again = sample_consecutive_pairs(&ds, 100_000, &mut rng_from_seed(2)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn single_two_step_episode_has_one_pair() {
        let spec = EnvSpec::gridworld(3);
        let t = |s: Vec<f64>, a: usize, done| {
            let s_next = spec.transition(&s, &Action::Discrete(a));
            Transition {
                s,
                a: Action::Discrete(a),
                s_next,
                reward: None,
                done,
            }
        };
        let t0 = t(vec![0.0, 0.0], 1, false);
        let t1 = t(t0.s_next.clone(), 2, true);
        let ds =
            TransitionDataset::new(spec.clone(), vec![t0.clone(), t1.clone()], vec![0]).unwrap();
        let p = sample_consecutive_pairs(&ds, 10, &mut rng_from_seed(0)).unwrap();
        for i in 0..10 {
            assert_eq!(p.obs.row(i).to_vec(), t0.s);
            assert_eq!(p.next_obs.row(i).to_vec(), t1.s);
            assert_eq!(p.actions.row(i).to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
        }
        let single = TransitionDataset::new(spec, vec![t0], vec![0]).unwrap();
        assert!(matches!(
            sample_consecutive_pairs(&single, 1, &mut rng_from_seed(0)),
            Err(Error::NoEligiblePairs)
        ));
    }

    fn stats_of(xs: &[f64]) -> RunningStats {
        let mut s = RunningStats::default();
        xs.iter().for_each(|&x| s.update(x));
        s
    }

    #[test]
    fn reward_probe_examples() {
        let intrinsic = stats_of(&[0.0, 1.0]);
        let mut rng = rng_from_seed(3);
        let stream: Vec<f64> = (0..20_000)
            .map(|_| 5.0 + 3.0 * rng.random::<f64>())
            .collect();
        let on = NormalizerState::new(intrinsic, true).unwrap();
        let p = reward_stats_probe(&stream[..], &on).unwrap();
        let tail = reward_stats_probe(&stream[10_000..], &on).unwrap();
        assert!(
            p.norm_mean.abs() < 0.05 && (p.norm_std - 1.0).abs() < 0.1,
            "{p:?}"
        );
        assert!(tail.raw_mean > 6.0);
        let off = NormalizerState::new(intrinsic, false).unwrap();
        let p = reward_stats_probe(&stream, &off).unwrap();
        assert_eq!((p.raw_mean, p.raw_std), (p.norm_mean, p.norm_std));
        let p = reward_stats_probe(&[2.5; 100], &on).unwrap();
        assert_eq!((p.norm_mean, p.norm_std), (0.0, 0.0));
    }
}
