//! Experiment configuration, multi-seed orchestration, aggregation and charts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{collect_reward_dataset_online, Provenance, RewardDataset, SkillMethod};
use crate::env::{
    collect_offline_dataset, label_subset, load_dataset, save_dataset, write_jsonl, Behavior,
    EnvSpec, Task, TransitionDataset,
};
use crate::error::{Error, Result};
use crate::finetune::{
    parse_metrics_csv, run_method, Method, MetricsRow, RunConfig, TransferFlags,
};
use crate::hilp::{
    load_bundle, pretrain_skills, save_bundle, PretrainBundle, PretrainConfig, PretrainLogRow,
};
use crate::offline_rl::{Backbone, TrainConfig};
use crate::rng::{derive_rng, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Path(PathBuf),
    Generate {
        size: usize,
        behavior: Behavior,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub env: String,
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSource,
    pub pretrain: PretrainConfig,
    /// Template for every run; method, task and seed are filled per run.
    pub run: RunConfig,
    pub reward_source: Provenance,
    pub reward_samples: usize,
    pub output: PathBuf,
}

impl ExperimentConfig {
    /// Digest of everything that affects results except seeds and output location.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.output = PathBuf::new();
        hex(&Sha256::digest(
            serde_json::to_vec(&c).expect("config serializes"),
        ))
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::from_name(&self.env)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq)]
enum Value {
    Scalar(String),
    List(Vec<String>),
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, (usize, Value)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected key = value".into(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        let unquote = |s: &str| s.trim().trim_matches('"').to_string();
        let value = if let Some(inner) = v.strip_prefix('[') {
            let inner = inner.strip_suffix(']').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "unterminated list".into(),
            })?;
            Value::List(
                inner
                    .split(',')
                    .map(unquote)
                    .filter(|s| !s.is_empty())
                    .collect(),
            )
        } else {
            Value::Scalar(unquote(v))
        };
        if out.insert(k.to_string(), (i + 1, value)).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(out)
}

const KEYS: &[&str] = &[
    "method",
    "env",
    "task",
    "seed",
    "dataset",
    "dataset.size",
    "dataset.behavior",
    "dataset.seed",
    "d",
    "backbone",
    "feature_steps",
    "pretrain_steps",
    "finetune_steps",
    "utd_ratio",
    "offline_sample_fraction",
    "eval_interval",
    "eval_episodes",
    "transfer.value",
    "transfer.policy",
    "reward_matching",
    "skill_method",
    "reward_source",
    "reward_samples",
    "buffer_capacity",
    "gamma",
    "expectile",
    "awr_temperature",
    "polyak",
    "lr.feature",
    "lr.critic",
    "lr.value",
    "lr.actor",
    "batch_size",
    "hidden",
    "td3.policy_noise",
    "td3.noise_clip",
    "td3.exploration_std",
    "td3.preact_penalty",
    "iql.log_std",
    "hilbert.gamma",
    "hilbert.expectile",
    "hilbert.batch_size",
    "hilbert.polyak",
    "output",
];

struct Doc {
    map: BTreeMap<String, (usize, Value)>,
}

impl Doc {
    fn scalar(&self, key: &str) -> Result<Option<&str>> {
        match self.map.get(key) {
            None => Ok(None),
            Some((_, Value::Scalar(s))) => Ok(Some(s)),
            Some((line, Value::List(_))) => Err(Error::Parse {
                line: *line,
                msg: format!("`{key}` takes a single value"),
            }),
        }
    }

    fn list(&self, key: &str) -> Option<Vec<String>> {
        self.map.get(key).map(|(_, v)| match v {
            Value::Scalar(s) => vec![s.clone()],
            Value::List(l) => l.clone(),
        })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.scalar(key)? {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|_| Error::RangeViolation {
                key: key.into(),
                msg: format!("cannot parse `{s}`"),
            }),
        }
    }

    fn set<T: std::str::FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }
}

fn range(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::RangeViolation {
            key: key.into(),
            msg: msg.into(),
        })
    }
}

/// Parses a flat `key = value` document (dotted keys, `[a, b]` lists, `#` comments).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let doc = Doc {
        map: parse_lines(text)?,
    };
    if let Some(k) = doc.map.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(Error::UnknownKey(k.clone()));
    }
    let required = |k: &str| doc.list(k).ok_or_else(|| Error::MissingRequired(k.into()));
    let methods = required("method")?
        .iter()
        .map(|m| {
            Method::parse(m).ok_or_else(|| Error::RangeViolation {
                key: "method".into(),
                msg: format!("unknown method `{m}`"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let env = doc
        .scalar("env")?
        .ok_or_else(|| Error::MissingRequired("env".into()))?
        .to_string();
    let spec = EnvSpec::from_name(&env).map_err(|e| Error::RangeViolation {
        key: "env".into(),
        msg: e.to_string(),
    })?;
    let tasks = required("task")?;
    let seeds = required("seed")?
        .iter()
        .map(|s| {
            s.parse::<u64>().map_err(|_| Error::RangeViolation {
                key: "seed".into(),
                msg: format!("`{s}` is not a seed"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    range(!methods.is_empty(), "method", "needs at least one method")?;
    range(!tasks.is_empty(), "task", "needs at least one task")?;
    range(!seeds.is_empty(), "seed", "seed list must be nonempty")?;
    range(
        seeds.iter().collect::<BTreeSet<_>>().len() == seeds.len(),
        "seed",
        "seeds must be distinct",
    )?;

    let mut pretrain = PretrainConfig::for_env(&spec);
    if let Some(b) = doc.scalar("backbone")? {
        let backbone = match b {
            "iql" => Backbone::Iql,
            "td3" => Backbone::Td3,
            other => {
                return Err(Error::RangeViolation {
                    key: "backbone".into(),
                    msg: format!("unknown backbone `{other}`"),
                })
            }
        };
        range(
            !(backbone == Backbone::Td3 && spec.action_spec.is_discrete()),
            "backbone",
            "td3 needs continuous actions",
        )?;
        pretrain.train = TrainConfig::for_backbone(backbone);
    }
    let t = &mut pretrain.train;
    doc.set("gamma", &mut t.gamma)?;
    doc.set("expectile", &mut t.expectile_tau)?;
    doc.set("awr_temperature", &mut t.awr_temperature)?;
    doc.set("polyak", &mut t.polyak_coeff)?;
    doc.set("lr.feature", &mut t.lr_feature)?;
    doc.set("lr.critic", &mut t.lr_critic)?;
    doc.set("lr.value", &mut t.lr_value)?;
    doc.set("lr.actor", &mut t.lr_actor)?;
    doc.set("batch_size", &mut t.batch_size)?;
    doc.set("td3.policy_noise", &mut t.td3_policy_noise)?;
    doc.set("td3.noise_clip", &mut t.td3_noise_clip)?;
    doc.set("td3.exploration_std", &mut t.td3_exploration_std)?;
    doc.set("td3.preact_penalty", &mut t.td3_preact_penalty)?;
    doc.set("iql.log_std", &mut t.iql_log_std)?;
    if let Some(h) = doc.list("hidden") {
        t.hidden = h
            .iter()
            .map(|w| {
                w.parse().map_err(|_| Error::RangeViolation {
                    key: "hidden".into(),
                    msg: format!("bad width `{w}`"),
                })
            })
            .collect::<Result<_>>()?;
    }
    t.validate()?;
    pretrain.hilbert.lr = t.lr_feature;
    doc.set("hilbert.gamma", &mut pretrain.hilbert.gamma)?;
    doc.set("hilbert.expectile", &mut pretrain.hilbert.expectile)?;
    doc.set("hilbert.batch_size", &mut pretrain.hilbert.batch_size)?;
    doc.set("hilbert.polyak", &mut pretrain.hilbert.polyak_coeff)?;
    let h = &pretrain.hilbert;
    range(
        h.gamma > 0.0 && h.gamma < 1.0,
        "hilbert.gamma",
        "must be in (0,1)",
    )?;
    range(
        h.expectile > 0.0 && h.expectile < 1.0,
        "hilbert.expectile",
        "must be in (0,1)",
    )?;
    range(h.batch_size > 0, "hilbert.batch_size", "must be positive")?;
    range(
        h.polyak_coeff > 0.0 && h.polyak_coeff <= 1.0,
        "hilbert.polyak",
        "must be in (0,1]",
    )?;
    doc.set("d", &mut pretrain.d)?;
    range(pretrain.d >= 1, "d", "skill dimension must be positive")?;
    doc.set("feature_steps", &mut pretrain.feature_steps)?;
    doc.set("pretrain_steps", &mut pretrain.skill_steps)?;

    let mut run = RunConfig::new(methods[0], &spec, &tasks[0], seeds[0]);
    run.train = pretrain.train.clone();
    run.pretrain_steps = pretrain.skill_steps;
    doc.set("finetune_steps", &mut run.finetune_steps)?;
    doc.set("utd_ratio", &mut run.utd_ratio)?;
    doc.set("offline_sample_fraction", &mut run.offline_sample_fraction)?;
    doc.set("eval_interval", &mut run.eval_interval)?;
    doc.set("eval_episodes", &mut run.eval_episodes)?;
    doc.set("reward_matching", &mut run.reward_matching)?;
    let mut flags = TransferFlags::default();
    doc.set("transfer.value", &mut flags.transfer_value)?;
    doc.set("transfer.policy", &mut flags.transfer_policy)?;
    run.transfer = flags;
    if let Some(c) = doc.parsed::<usize>("buffer_capacity")? {
        run.buffer_capacity = Some(c);
    }
    run.skill_method = match doc.scalar("skill_method")? {
        None => None,
        Some("lsq") => Some(SkillMethod::Lsq),
        Some("goal") => Some(SkillMethod::Goal),
        Some("random") => Some(SkillMethod::Random),
        Some(other) => {
            return Err(Error::RangeViolation {
                key: "skill_method".into(),
                msg: format!("unknown method `{other}`"),
            })
        }
    };
    run.validate()?;
    for task in &tasks {
        Task::named(&spec, task, run.train.gamma).map_err(|e| Error::RangeViolation {
            key: "task".into(),
            msg: e.to_string(),
        })?;
    }

    let reward_source = match doc.scalar("reward_source")? {
        None | Some("offline_subset") => Provenance::OfflineSubset,
        Some("online") | Some("online_collected") => Provenance::OnlineCollected,
        Some(other) => {
            return Err(Error::RangeViolation {
                key: "reward_source".into(),
                msg: format!("unknown source `{other}`"),
            })
        }
    };
    let mut reward_samples = 10_000;
    doc.set("reward_samples", &mut reward_samples)?;
    range(reward_samples >= 1, "reward_samples", "must be positive")?;

    let dataset = match doc.scalar("dataset")? {
        Some(p) => {
            let path = PathBuf::from(p);
            range(path.is_file(), "dataset", "file does not exist")?;
            DatasetSource::Path(path)
        }
        None => {
            let mut size = 100_000;
            doc.set("dataset.size", &mut size)?;
            range(size >= 2, "dataset.size", "needs at least 2 transitions")?;
            let behavior = match doc.scalar("dataset.behavior")? {
                None | Some("uniform_random") => Behavior::UniformRandom,
                Some("epsilon_random_walk") => Behavior::EpsilonRandomWalk,
                Some(other) => {
                    return Err(Error::RangeViolation {
                        key: "dataset.behavior".into(),
                        msg: format!("unknown behavior `{other}`"),
                    })
                }
            };
            let mut seed = 0;
            doc.set("dataset.seed", &mut seed)?;
            DatasetSource::Generate {
                size,
                behavior,
                seed,
            }
        }
    };
    let output = doc
        .scalar("output")?
        .map(PathBuf::from)
        .unwrap_or_else(default_output_root);
    Ok(ExperimentConfig {
        methods,
        env,
        tasks,
        seeds,
        dataset,
        pretrain,
        run,
        reward_source,
        reward_samples,
        output,
    })
}

/// `$U2O_OUT` if set, otherwise `./u2o-out`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os("U2O_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("u2o-out"))
}

/// First `root/run_NNN` that does not exist yet; created on return.
pub fn fresh_run_dir(root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    for i in 0.. {
        let dir = root.join(format!("run_{i:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

pub fn materialize_dataset(cfg: &ExperimentConfig) -> Result<(TransitionDataset, String)> {
    match &cfg.dataset {
        DatasetSource::Path(p) => {
            let ds = load_dataset(p)?;
            if ds.spec != cfg.env_spec()? {
                return Err(Error::InvalidArgument(format!(
                    "dataset {} was generated for {}",
                    p.display(),
                    ds.spec.name()
                )));
            }
            Ok((ds, hex(&Sha256::digest(fs::read(p)?))))
        }
        DatasetSource::Generate {
            size,
            behavior,
            seed,
        } => {
            let ds = collect_offline_dataset(
                &cfg.env_spec()?,
                *behavior,
                *size,
                &mut rng_from_seed(*seed),
            )?;
            let mut bytes = Vec::new();
            write_jsonl(&mut bytes, &ds.spec, &ds.transitions)?;
            Ok((ds, hex(&Sha256::digest(&bytes))))
        }
    }
}

/// Cache key of a pretraining bundle.
pub fn pretrain_cache_key(dataset_digest: &str, pretrain: &PretrainConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(dataset_digest.as_bytes());
    h.update(serde_json::to_vec(pretrain).expect("config serializes"));
    h.update(seed.to_le_bytes());
    hex(&h.finalize())
}

/// Pretraining log as CSV.
pub fn pretrain_log_csv(rows: &[PretrainLogRow]) -> String {
    let mut s = String::from("step,critic_loss,value_loss,actor_loss,feature_dot\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.losses.critic, r.losses.value, r.losses.actor, r.feature_dot
        );
    }
    s
}

/// Loads the bundle from `cache_root` or pretrains and stores it. Returns whether
/// pretraining actually ran.
pub fn cached_pretrain(
    cache_root: &Path,
    dataset: &TransitionDataset,
    digest: &str,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<(PretrainBundle, bool)> {
    let dir = cache_root.join(pretrain_cache_key(digest, pretrain, seed));
    if dir.join("bundle.json").exists() {
        return Ok((load_bundle(&dir)?, false));
    }
    let (bundle, log) = pretrain_skills(dataset, pretrain, seed)?;
    let tmp = cache_root.join(format!(
        ".tmp-{}",
        dir.file_name().unwrap().to_string_lossy()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    save_bundle(&tmp, &bundle)?;
    fs::write(tmp.join("pretrain_log.csv"), pretrain_log_csv(&log))?;
    fs::rename(&tmp, &dir)?;
    Ok((bundle, true))
}

pub fn reward_dataset_for(
    cfg: &ExperimentConfig,
    dataset: &TransitionDataset,
    task: &Task,
    bundle: Option<&PretrainBundle>,
    seed: u64,
) -> Result<RewardDataset> {
    let mut rng = derive_rng(seed, &["reward-data", &task.task_id]);
    match cfg.reward_source {
        Provenance::OfflineSubset => {
            let fraction = (cfg.reward_samples as f64 / dataset.len() as f64).min(1.0);
            label_subset(dataset, task, fraction, &mut rng)
        }
        Provenance::OnlineCollected => {
            let b = bundle.ok_or(Error::MissingBundle)?;
            collect_reward_dataset_online(
                &dataset.spec,
                task,
                &b.skills,
                cfg.reward_samples,
                cfg.run.train.td3_exploration_std,
                &mut rng,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub env_steps: usize,
    pub n: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_success: f64,
    pub std_success: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub method: Method,
    pub env: String,
    pub task: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub points: Vec<AggregatePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub method: Option<Method>,
    pub task: Option<String>,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub curves: Vec<AggregateCurve>,
    pub failed: Vec<FailedRun>,
}

/// One finished run's identity and metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub env: String,
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    crate::diag::mean_std(xs)
}

/// Mean and population standard deviation across seeds at every checkpoint that
/// all seeds of a group reached.
pub fn aggregate(records: &[RunRecord], failed: Vec<FailedRun>) -> AggregateReport {
    let mut groups: BTreeMap<(Method, String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((
                r.method,
                r.env.clone(),
                r.task.clone(),
                r.config_hash.clone(),
            ))
            .or_default()
            .push(r);
    }
    let curves = groups
        .into_iter()
        .map(|((method, env, task, config_hash), mut runs)| {
            runs.sort_by_key(|r| r.seed);
            let common = runs
                .iter()
                .map(|r| r.rows.iter().map(|x| x.env_steps).collect::<BTreeSet<_>>())
                .reduce(|a, b| a.intersection(&b).copied().collect())
                .unwrap_or_default();
            let points = common
                .into_iter()
                .map(|step| {
                    let at: Vec<&MetricsRow> = runs
                        .iter()
                        .map(|r| {
                            r.rows
                                .iter()
                                .find(|x| x.env_steps == step)
                                .expect("common step")
                        })
                        .collect();
                    let (mean_return, std_return) =
                        mean_std(&at.iter().map(|x| x.eval_return).collect::<Vec<_>>());
                    let (mean_success, std_success) =
                        mean_std(&at.iter().map(|x| x.success_rate).collect::<Vec<_>>());
                    AggregatePoint {
                        env_steps: step,
                        n: at.len(),
                        mean_return,
                        std_return,
                        mean_success,
                        std_success,
                    }
                })
                .collect();
            AggregateCurve {
                method,
                env,
                task,
                config_hash,
                seeds: runs.iter().map(|r| r.seed).collect(),
                points,
            }
        })
        .collect();
    let mut failed = failed;
    failed.sort_by(|a, b| (a.seed, a.method, &a.task).cmp(&(b.seed, b.method, &b.task)));
    AggregateReport { curves, failed }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub report: AggregateReport,
    /// Number of pretraining runs actually executed (cache misses).
    pub pretrain_runs: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    config: ExperimentConfig,
}

/// Runs every (seed, task, method) combination, sharing one pretraining bundle per seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let spec = cfg.env_spec()?;
    let run_dir = fresh_run_dir(&cfg.output)?;
    let hash = cfg.config_hash();
    fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&Manifest {
            config_hash: hash.clone(),
            config: cfg.clone(),
        })?,
    )?;
    let (dataset, digest) = materialize_dataset(cfg)?;
    let cache_root = cfg.output.join("cache");
    let runs_dir = run_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let needs_bundle = cfg.methods.iter().any(|m| m.needs_bundle());
    let mut records = Vec::new();
    let mut failed = Vec::new();
    let mut pretrain_runs = 0;
    for &seed in &cfg.seeds {
        let bundle = if needs_bundle {
            match cached_pretrain(&cache_root, &dataset, &digest, &cfg.pretrain, seed) {
                Ok((b, ran)) => {
                    pretrain_runs += usize::from(ran);
                    Some(b)
                }
                Err(e) => {
                    failed.push(FailedRun {
                        seed,
                        method: None,
                        task: None,
                        error: e.to_string(),
                    });
                    continue;
                }
            }
        } else {
            None
        };
        for task_id in &cfg.tasks {
            let task = Task::named(&spec, task_id, cfg.run.train.gamma)?;
            let reward_data = if needs_bundle {
                Some(reward_dataset_for(
                    cfg,
                    &dataset,
                    &task,
                    bundle.as_ref(),
                    seed,
                ))
            } else {
                None
            };
            for &method in &cfg.methods {
                let run_cfg = RunConfig {
                    method,
                    task: task_id.clone(),
                    seed,
                    ..cfg.run.clone()
                };
                let result = match &reward_data {
                    Some(Err(e)) if method.needs_bundle() => {
                        Err(Error::InvalidArgument(format!("reward dataset: {e}")))
                    }
                    rd => run_method(
                        &run_cfg,
                        bundle.as_ref(),
                        rd.as_ref().and_then(|r| r.as_ref().ok()),
                        &dataset,
                    ),
                };
                match result {
                    Ok(res) => {
                        res.write_csv(&runs_dir)?;
                        records.push(RunRecord {
                            method,
                            env: cfg.env.clone(),
                            task: task_id.clone(),
                            seed,
                            config_hash: hash.clone(),
                            rows: res.rows,
                        });
                    }
                    Err(e) => failed.push(FailedRun {
                        seed,
                        method: Some(method),
                        task: Some(task_id.clone()),
                        error: e.to_string(),
                    }),
                }
            }
        }
    }
    save_dataset_digest(&run_dir, &digest)?;
    let report = aggregate(&records, failed);
    fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    emit_charts(&report, &run_dir.join("charts"))?;
    Ok(ExperimentOutcome {
        run_dir,
        report,
        pretrain_runs,
    })
}

fn save_dataset_digest(run_dir: &Path, digest: &str) -> Result<()> {
    fs::write(run_dir.join("dataset.sha256"), format!("{digest}\n"))?;
    Ok(())
}

/// Writes a generated dataset to disk (for the `gen-data` command).
pub fn generate_dataset_file(
    env: &str,
    size: usize,
    behavior: Behavior,
    seed: u64,
    path: &Path,
) -> Result<TransitionDataset> {
    let ds = collect_offline_dataset(
        &EnvSpec::from_name(env)?,
        behavior,
        size,
        &mut rng_from_seed(seed),
    )?;
    save_dataset(path, &ds)?;
    Ok(ds)
}

/// Splits `{method}_{env}_{task}_seed{k}` back into its parts.
pub fn parse_run_stem(stem: &str) -> Option<(Method, String, String, u64)> {
    let (rest, seed) = stem.rsplit_once("_seed")?;
    let seed = seed.parse().ok()?;
    let method = [
        Method::ScratchWithData,
        Method::ZeroShot,
        Method::U2o,
        Method::O2o,
    ]
    .into_iter()
    .find(|m| rest.starts_with(&format!("{}_", m.as_str())))?;
    let rest = &rest[method.as_str().len() + 1..];
    let (env, task) = rest.split_once('_')?;
    Some((method, env.to_string(), task.to_string(), seed))
}

/// Re-aggregates the per-run CSVs of an existing run directory.
pub fn report_from_dir(run_dir: &Path) -> Result<AggregateReport> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json"))?)?;
    let mut records = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(run_dir.join("runs"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    for p in paths
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
    {
        let stem = p.file_stem().unwrap().to_string_lossy().to_string();
        let (method, env, task, seed) = parse_run_stem(&stem).ok_or_else(|| Error::Format {
            path: p.clone(),
            msg: "unexpected run file name".into(),
        })?;
        let rows = parse_metrics_csv(&fs::read_to_string(&p)?).map_err(|e| Error::Format {
            path: p.clone(),
            msg: e.to_string(),
        })?;
        records.push(RunRecord {
            method,
            env,
            task,
            seed,
            config_hash: manifest.config_hash.clone(),
            rows,
        });
    }
    let previous: Option<AggregateReport> = fs::read_to_string(run_dir.join("report.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    Ok(aggregate(
        &records,
        previous.map(|r| r.failed).unwrap_or_default(),
    ))
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One SVG learning-curve chart per (env, task): mean return per method with a
/// shaded one-standard-deviation band.
pub fn emit_charts(report: &AggregateReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut by_task: BTreeMap<(String, String), Vec<&AggregateCurve>> = BTreeMap::new();
    for c in report.curves.iter().filter(|c| !c.points.is_empty()) {
        by_task
            .entry((c.env.clone(), c.task.clone()))
            .or_default()
            .push(c);
    }
    let mut files = Vec::new();
    for ((env, task), curves) in by_task {
        let path = dir.join(format!("{env}_{task}.svg"));
        fs::write(&path, render_chart(&format!("{env} / {task}"), &curves))?;
        files.push(path);
    }
    Ok(files)
}

fn render_chart(title: &str, curves: &[&AggregateCurve]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 150.0, 40.0, 50.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let x_max = pts
        .clone()
        .map(|p| p.env_steps as f64)
        .fold(0.0, f64::max)
        .max(1.0);
    let mut y_min = pts
        .clone()
        .map(|p| p.mean_return - p.std_return)
        .fold(f64::INFINITY, f64::min);
    let mut y_max = pts
        .map(|p| p.mean_return + p.std_return)
        .fold(f64::NEG_INFINITY, f64::max);
    if (y_max - y_min).abs() < 1e-9 {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let px = |x: f64| left + x / x_max * (w - left - right);
    let py = |y: f64| top + (y_max - y) / (y_max - y_min) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        (w - right + left) / 2.0,
        xml_escape(title)
    );
    let (x0, x1, y0, y1) = (px(0.0), px(x_max), py(y_min), py(y_max));
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let xv = x_max * k as f64 / 4.0;
        let yv = y_min + (y_max - y_min) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            px(xv),
            y0 + 16.0,
            xv.round()
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{:.2}</text>"#,
            x0 - 6.0,
            py(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">env_steps</text>"#,
        (x0 + x1) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">eval_return</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = c
            .points
            .iter()
            .map(|p| {
                format!(
                    "{:.2},{:.2}",
                    px(p.env_steps as f64),
                    py(p.mean_return + p.std_return)
                )
            })
            .collect();
        let lower: Vec<String> = c
            .points
            .iter()
            .rev()
            .map(|p| {
                format!(
                    "{:.2},{:.2}",
                    px(p.env_steps as f64),
                    py(p.mean_return - p.std_return)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.env_steps as f64), py(p.mean_return)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            w - right + 12.0,
            w - right + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            w - right + 38.0,
            ly + 4.0,
            c.method.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "method = u2o\nenv = pointmass\ntask = reach_tl\nseed = [0]\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.methods, vec![Method::U2o]);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.pretrain.d, 8);
        assert_eq!(c.pretrain.skill_steps, 100_000);
        assert_eq!(c.run.finetune_steps, 50_000);
        assert_eq!(c.run.eval_interval, 2_500);
        assert_eq!(c.run.eval_episodes, 50);
        assert_eq!(c.run.offline_sample_fraction, 0.5);
        assert_eq!(c.run.train.backbone, Backbone::Td3);
        assert_eq!(c.pretrain.hilbert.expectile, 0.9);
        assert_eq!(c.reward_samples, 10_000);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            parse_config(&format!("{MINIMAL}gamma = 1.5\n")),
            Err(Error::RangeViolation { .. })
        ));
        assert!(
            matches!(parse_config(&format!("{MINIMAL}foo = 1\n")), Err(Error::UnknownKey(k)) if k == "foo")
        );
        assert!(
            matches!(parse_config("env = pointmass\ntask = reach_tl\nseed = [0]\n"), Err(Error::MissingRequired(k)) if k == "method")
        );
        assert!(matches!(
            parse_config("method = u2o\nenv = pointmass\ntask = reach_tl\nseed = [1, 1]\n"),
            Err(Error::RangeViolation { .. })
        ));
        assert!(matches!(
            parse_config(&format!("{MINIMAL}offline_sample_fraction = 1.2\n")),
            Err(Error::RangeViolation { .. })
        ));
        assert!(matches!(
            parse_config(&format!("{MINIMAL}dataset = /nonexistent/file.jsonl\n")),
            Err(Error::RangeViolation { .. })
        ));
        assert!(matches!(
            parse_config(
                "method = u2o\nenv = gridworld(5)\ntask = goal_br\nseed = 0\nbackbone = td3\n"
            ),
            Err(Error::RangeViolation { .. })
        ));
        assert!(matches!(
            parse_config("no equals sign\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_config(&format!("{MINIMAL}gamma = 1.5\n"))
            .unwrap_err()
            .is_config_error());
    }

    #[test]
    fn config_overrides_and_lists() {
        let text = "# experiment\nmethod = [u2o, o2o]\nenv = gridworld(5,uniform)\ntask = [goal_br, dense_tl]\nseed = [3, 1]\nhidden = [32, 16]\nlr.critic = 1e-3\ntransfer.value = false\nutd_ratio = 2 # inline comment\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.methods, vec![Method::U2o, Method::O2o]);
        assert_eq!(c.tasks, vec!["goal_br", "dense_tl"]);
        assert_eq!(c.seeds, vec![3, 1]);
        assert_eq!(c.run.train.hidden, vec![32, 16]);
        assert_eq!(c.run.train.lr_critic, 1e-3);
        assert!(!c.run.transfer.transfer_value && c.run.transfer.transfer_policy);
        assert_eq!(c.run.utd_ratio, 2);
        assert_eq!(c.run.train.backbone, Backbone::Iql);
    }

    #[test]
    fn run_stem_round_trip() {
        for (m, env, task) in [
            (Method::ScratchWithData, "gridworld(5,uniform)", "goal_br"),
            (Method::ZeroShot, "pointmass", "reach_tl_sparse"),
            (Method::O2o, "gridworld(7)", "dense_bl"),
        ] {
            let stem = format!("{}_{}_{}_seed{}", m.as_str(), env, task, 12);
            assert_eq!(
                parse_run_stem(&stem),
                Some((m, env.to_string(), task.to_string(), 12))
            );
        }
    }

    fn record(method: Method, seed: u64, returns: &[(usize, f64)]) -> RunRecord {
        let rows = returns
            .iter()
            .map(|&(env_steps, r)| MetricsRow {
                step: env_steps,
                env_steps,
                eval_return: r,
                success_rate: 0.0,
                critic_loss: 0.0,
                value_loss: 0.0,
                actor_loss: 0.0,
                feature_dot: 0.0,
                reward_raw_mean: 0.0,
                reward_norm_mean: 0.0,
                reward_norm_std: 0.0,
            })
            .collect();
        RunRecord {
            method,
            env: "pointmass".into(),
            task: "reach_tl".into(),
            seed,
            config_hash: "h".into(),
            rows,
        }
    }

    #[test]
    fn aggregation_over_seeds() {
        let recs = vec![
            record(Method::U2o, 0, &[(0, 1.0), (10, 2.0)]),
            record(Method::U2o, 1, &[(0, 3.0), (10, 4.0)]),
            record(Method::U2o, 2, &[(0, 5.0)]),
        ];
        let rep = aggregate(&recs, vec![]);
        assert_eq!(rep.curves.len(), 1);
        let pts = &rep.curves[0].points;
        // step 10 is missing from seed 2, so it is omitted
        assert_eq!(pts.len(), 1);
        assert_eq!((pts[0].n, pts[0].mean_return), (3, 3.0));
        assert!((pts[0].std_return - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev, vec![]), rep);
    }

    #[test]
    fn charts_are_valid_svg() {
        let recs = vec![
            record(Method::U2o, 0, &[(0, 1.0), (10, 2.0)]),
            record(Method::O2o, 0, &[(0, 0.5), (10, -1.0)]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let files = emit_charts(&aggregate(&recs, vec![]), dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let text = fs::read_to_string(&files[0]).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        let lines = doc
            .descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .count();
        let bands = doc
            .descendants()
            .filter(|n| n.has_tag_name("polygon"))
            .count();
        assert_eq!((lines, bands), (2, 2));
    }

    #[test]
    fn run_dirs_never_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let a = fresh_run_dir(dir.path()).unwrap();
        let b = fresh_run_dir(dir.path()).unwrap();
        assert_ne!(a, b);
        assert!(a.ends_with("run_000") && b.ends_with("run_001"));
    }

    #[test]
    fn small_experiment_caches_pretraining() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "method = [u2o, zero_shot, scratch_with_data]\nenv = gridworld(4)\ntask = [dense_tl, dense_tr, dense_bl, dense_br]\nseed = [0, 1]\n\
             dataset.size = 400\nd = 2\nfeature_steps = 20\npretrain_steps = 20\nfinetune_steps = 20\neval_interval = 10\neval_episodes = 2\n\
             batch_size = 16\nhidden = [8, 8]\nhilbert.batch_size = 16\nreward_samples = 100\noutput = {}\n",
            dir.path().display()
        );
        let cfg = parse_config(&text).unwrap();
        let first = run_experiment(&cfg).unwrap();
        assert_eq!(first.pretrain_runs, 2);
        assert!(first.report.failed.is_empty(), "{:?}", first.report.failed);
        assert_eq!(first.report.curves.len(), 12);
        assert!(first.report.curves.iter().all(|c| c.seeds.len() == 2));
        let second = run_experiment(&cfg).unwrap();
        assert_eq!(second.pretrain_runs, 0);
        assert_ne!(first.run_dir, second.run_dir);
        let a = fs::read_to_string(first.run_dir.join("report.json")).unwrap();
        let b = fs::read_to_string(second.run_dir.join("report.json")).unwrap();
        assert_eq!(a, b);
        assert_eq!(report_from_dir(&first.run_dir).unwrap(), first.report);
        for f in fs::read_dir(first.run_dir.join("runs")).unwrap() {
            let f = f.unwrap().path();
            let other = second.run_dir.join("runs").join(f.file_name().unwrap());
            assert_eq!(fs::read(&f).unwrap(), fs::read(other).unwrap());
        }
    }

    #[test]
    fn seed_failures_are_reported_without_aborting() {
        let dir = tempfile::tempdir().unwrap();
        // too short for a complete episode, so pretraining fails for every seed
        let text = format!(
            "method = [u2o, scratch_with_data]\nenv = gridworld(4)\ntask = dense_tl\nseed = [0, 1]\ndataset.size = 5\nd = 2\n\
             feature_steps = 5\npretrain_steps = 5\nfinetune_steps = 0\neval_episodes = 1\noutput = {}\n",
            dir.path().display()
        );
        let out = run_experiment(&parse_config(&text).unwrap()).unwrap();
        assert_eq!(out.report.failed.len(), 2);
        assert!(out.report.failed.iter().all(|f| f.method.is_none()));
    }
}
