//! Config-driven pipeline: dataset → training arms → evaluations → tables.
//!
//! One JSON document fully determines a run. Every arm trains one model on
//! the (possibly filtered or reward-delayed) dataset and then runs its
//! evaluation tasks; results land in `output_dir` as CSV tables, SVG plots and
//! a `run.json` summary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Activation;
use crate::data::{
    collect_random_trajectories, filter_top_percentile, load_dataset_for, sample_windows,
    split_seed, TrajectoryDataset,
};
use crate::envs::{shortest_path_oracle, Env, EnvConfig, Environment, GraphMDP};
use crate::error::{Error, Result};
use crate::eval::{
    attention_by_timestep, attention_on, behavior_policy_success, evaluate_graph_starts,
    inversions, k2d_outcome, k2d_pickup_step, pearson, return_probability_trace,
    stitching_analysis, success_rate, target_return_sweep, Outcome, ReturnPrior, RolloutConfig,
    Selection, StitchLabel,
};
use crate::gpt::GptConfig;
use crate::model::{
    ActionSpace, Conditioning, DecisionTransformer, DtConfig, EmbedNorm, ReturnBins, ReturnInputs,
    WindowActions,
};
use crate::report::{
    attention_table, fmt_f64, outcome_name, return_trace_table, Histogram, RunStamp, Table,
};
use crate::train::{train, Objective, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub env: EnvConfig,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub baselines: Baselines,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Random-policy trajectories; the seed defaults to one split from the
    /// experiment seed.
    Generate {
        n_trajectories: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    Load {
        path: PathBuf,
    },
}

/// Architecture shared by all arms. State and action sizes come from the
/// environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub context_k: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_embed_norm")]
    pub embed_norm: EmbedNorm,
    #[serde(default = "default_return_scale")]
    pub return_scale: f64,
    /// Defaults to the environment's episode limit.
    #[serde(default)]
    pub max_episode_len: Option<usize>,
    /// Required by arms that predict returns.
    #[serde(default)]
    pub return_bins: Option<ReturnBins>,
}

fn default_activation() -> Activation {
    Activation::Gelu
}

fn default_embed_norm() -> EmbedNorm {
    EmbedNorm::LayerNorm
}

fn default_return_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataFilter {
    #[default]
    All,
    /// Best episodes covering X% of the timesteps.
    TopPercent {
        percent: f64,
    },
    MinReturn {
        value: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub warmup_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub objective: Objective,
    #[serde(default)]
    pub context_k: Option<usize>,
    #[serde(default)]
    pub predict_returns: bool,
    #[serde(default)]
    pub return_inputs: ReturnInputs,
    #[serde(default)]
    pub data: DataFilter,
    #[serde(default)]
    pub delayed_rewards: bool,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub evals: Vec<EvalTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalTask {
    /// Return-prior rollouts from every start node that reaches the goal,
    /// with the steps-to-goal histogram and stitching labels.
    GraphPrior {
        gamma: f64,
        episodes_per_start: usize,
        #[serde(default = "default_selection")]
        selection: Selection,
    },
    Sweep {
        targets: Vec<f64>,
        episodes_per_target: usize,
    },
    Success {
        episodes: usize,
        #[serde(default = "default_target")]
        target_return: f64,
    },
    /// Running success probabilities and attention on held-out episodes.
    Critic { episodes: usize },
    /// Action logits on fixed dataset windows.
    ActionProbe { windows: usize },
}

impl EvalTask {
    /// Evaluation seeds depend only on the task kind, so every arm is scored
    /// on the same episodes.
    fn seed_stream(&self) -> u64 {
        match self {
            EvalTask::GraphPrior { .. } => 1_000,
            EvalTask::Sweep { .. } => 1_001,
            EvalTask::Success { .. } => 1_002,
            EvalTask::Critic { .. } => 1_003,
            EvalTask::ActionProbe { .. } => 1_004,
        }
    }
}

fn default_selection() -> Selection {
    Selection::Argmax
}

fn default_target() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baselines {
    /// Episodes of the data-collection policy to score.
    #[serde(default)]
    pub behavior_success: Option<usize>,
}

/// Parses a config, reporting schema violations with their field path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Schema(format!("{path}: {}", e.inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.arms.is_empty() {
            return Err(Error::Schema("arms: at least one arm is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for (i, arm) in self.arms.iter().enumerate() {
            let at = |msg: String| Error::Schema(format!("arms[{i}]: {msg}"));
            if arm.name.is_empty()
                || !arm
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(at(format!(
                    "name `{}` must be non-empty [A-Za-z0-9_-]",
                    arm.name
                )));
            }
            if !names.insert(&arm.name) {
                return Err(at(format!("duplicate arm name `{}`", arm.name)));
            }
            if arm.predict_returns && self.model.return_bins.is_none() {
                return Err(at("predict_returns needs model.return_bins".into()));
            }
            if arm.objective == Objective::Bc
                && (arm.predict_returns || arm.return_inputs == ReturnInputs::Hidden)
            {
                return Err(at("behavior cloning has no return tokens".into()));
            }
            for (j, task) in arm.evals.iter().enumerate() {
                let at = |msg: &str| Error::Schema(format!("arms[{i}].evals[{j}]: {msg}"));
                match (task, &self.env) {
                    (EvalTask::GraphPrior { .. }, EnvConfig::Graph(_)) => {
                        if !arm.predict_returns {
                            return Err(at("graph_prior needs predict_returns"));
                        }
                    }
                    (EvalTask::GraphPrior { .. }, _) => {
                        return Err(at("graph_prior needs the graph env"))
                    }
                    (EvalTask::Critic { episodes }, EnvConfig::KeyToDoor(_)) => {
                        if !arm.predict_returns {
                            return Err(at("critic needs predict_returns"));
                        }
                        if *episodes == 0 {
                            return Err(at("episodes must be ≥ 1"));
                        }
                    }
                    (EvalTask::Critic { .. }, _) => {
                        return Err(at("critic needs the key_to_door env"))
                    }
                    (
                        EvalTask::Sweep {
                            targets,
                            episodes_per_target,
                        },
                        _,
                    ) if targets.is_empty() || *episodes_per_target == 0 => {
                        return Err(at("sweep needs targets and episodes"))
                    }
                    (EvalTask::Success { episodes: 0, .. }, _) => {
                        return Err(at("episodes must be ≥ 1"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn arm_train_config(&self, arm: &ArmSpec) -> TrainConfig {
        let o = &arm.train;
        TrainConfig {
            steps: o.steps.unwrap_or(self.train.steps),
            batch_size: o.batch_size.unwrap_or(self.train.batch_size),
            learning_rate: o.learning_rate.unwrap_or(self.train.learning_rate),
            warmup_steps: o.warmup_steps.unwrap_or(self.train.warmup_steps),
            objective: arm.objective,
            ..self.train.clone()
        }
    }

    fn arm_model_config(
        &self,
        arm: &ArmSpec,
        state_dim: usize,
        n_actions: usize,
        max_steps: usize,
    ) -> DtConfig {
        let m = &self.model;
        let conditioning = match arm.objective {
            Objective::Dt => Conditioning::ReturnToGo,
            Objective::Bc => Conditioning::StateAction,
        };
        let k = arm.context_k.unwrap_or(m.context_k);
        let mut cfg = DtConfig {
            context_k: k,
            max_episode_len: m.max_episode_len.unwrap_or(max_steps),
            state_dim,
            action_space: ActionSpace::Discrete { n: n_actions },
            gpt: GptConfig {
                n_layers: m.n_layers,
                n_heads: m.n_heads,
                d_model: m.d_model,
                max_tokens: 0,
                dropout: self.train.dropout,
                activation: m.activation,
            },
            embed_norm: m.embed_norm,
            conditioning,
            predict_returns: if arm.predict_returns {
                m.return_bins
            } else {
                None
            },
            return_scale: m.return_scale,
            return_inputs: arm.return_inputs,
        };
        cfg.gpt.max_tokens = cfg.tokens_needed();
        cfg
    }

    fn dataset_seed(&self) -> u64 {
        match self.dataset {
            DatasetSpec::Generate { seed: Some(s), .. } => s,
            _ => split_seed(self.seed, 1),
        }
    }
}

/// Metrics and notes of one arm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub train_wall_clock_secs: f64,
    pub cached_model: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub status: String,
    pub config_hash: String,
    pub seed: u64,
    pub baselines: BTreeMap<String, f64>,
    pub arms: Vec<ArmReport>,
    pub files: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn metric(&self, arm: &str, name: &str) -> Option<f64> {
        self.arms
            .iter()
            .find(|a| a.name == arm)?
            .metrics
            .get(name)
            .copied()
    }
}

/// Trained models and generated datasets shared between runs in one
/// process, keyed by everything that determines them.
#[derive(Default)]
pub struct ModelCache {
    models: HashMap<String, (DecisionTransformer, TrainLog)>,
    datasets: HashMap<String, TrajectoryDataset>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Runs the whole pipeline into `out_dir`. A `run.json` with status
/// `running` is written first and replaced on completion, or marked
/// `failed` with the error message.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    cache: Option<&mut ModelCache>,
) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let hash = config_hash(cfg);
    let mut report = RunReport {
        name: cfg.name.clone(),
        status: "running".into(),
        config_hash: hash.clone(),
        seed: cfg.seed,
        baselines: BTreeMap::new(),
        arms: Vec::new(),
        files: Vec::new(),
        wall_clock_secs: 0.0,
    };
    write_json(&out_dir.join("run.json"), &report)?;
    let mut local = ModelCache::new();
    let cache = cache.unwrap_or(&mut local);
    let started = Instant::now();
    match run_stages(cfg, out_dir, cache, &mut report) {
        Ok(()) => {
            report.status = "complete".into();
            report.wall_clock_secs = started.elapsed().as_secs_f64();
            write_json(&out_dir.join("run.json"), &report)?;
            Ok(report)
        }
        Err(e) => {
            report.status = format!("failed: {e}");
            report.wall_clock_secs = started.elapsed().as_secs_f64();
            write_json(&out_dir.join("run.json"), &report)?;
            Err(e)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

struct Outputs<'a> {
    dir: &'a Path,
    stamp: RunStamp,
    files: Vec<String>,
}

impl Outputs<'_> {
    fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        table.write(&self.dir.join(name), &self.stamp)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.dir.join(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn base_dataset(cfg: &ExperimentConfig, cache: &mut ModelCache) -> Result<TrajectoryDataset> {
    let key = config_hash(&(&cfg.env, &cfg.dataset, cfg.dataset_seed()));
    if let Some(ds) = cache.datasets.get(&key) {
        return Ok(ds.clone());
    }
    let ds = match &cfg.dataset {
        DatasetSpec::Generate { n_trajectories, .. } => {
            collect_random_trajectories(&cfg.env, *n_trajectories, cfg.dataset_seed())?
        }
        DatasetSpec::Load { path } => load_dataset_for(path, &cfg.env)?,
    };
    cache.datasets.insert(key, ds.clone());
    Ok(ds)
}

fn arm_dataset(base: &TrajectoryDataset, arm: &ArmSpec) -> Result<TrajectoryDataset> {
    let ds = if arm.delayed_rewards {
        base.with_delayed_rewards()?
    } else {
        base.clone()
    };
    match arm.data {
        DataFilter::All => Ok(ds),
        DataFilter::TopPercent { percent } => filter_top_percentile(&ds, percent),
        DataFilter::MinReturn { value } => ds.filter_min_return(value),
    }
}

/// The dataset named by `cfg.dataset`, generated or loaded.
pub fn base_dataset_for(cfg: &ExperimentConfig) -> Result<TrajectoryDataset> {
    base_dataset(cfg, &mut ModelCache::new())
}

pub fn find_arm<'a>(cfg: &'a ExperimentConfig, name: &str) -> Result<&'a ArmSpec> {
    cfg.arms
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Config(format!("no arm named `{name}` in config `{}`", cfg.name)))
}

/// Trains one arm from scratch on its view of `base`.
pub fn train_arm(
    cfg: &ExperimentConfig,
    arm: &ArmSpec,
    base: &TrajectoryDataset,
) -> Result<(DecisionTransformer, TrainLog)> {
    let env = cfg.env.build()?;
    let ds = arm_dataset(base, arm)?;
    let model_cfg = cfg.arm_model_config(arm, base.state_dim(), env.n_actions(), env.max_steps());
    let train_cfg = cfg.arm_train_config(arm);
    train(
        DecisionTransformer::new(model_cfg, train_cfg.seed)?,
        &ds,
        train_cfg,
    )
}

/// Runs a single evaluation task for an already trained arm, writing its
/// tables into `out_dir`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    arm: &ArmSpec,
    task: &EvalTask,
    model: &DecisionTransformer,
    base: &TrajectoryDataset,
    out_dir: &Path,
) -> Result<ArmReport> {
    fs::create_dir_all(out_dir)?;
    let ds = arm_dataset(base, arm)?;
    let mut out = Outputs {
        dir: out_dir,
        stamp: RunStamp {
            config_hash: config_hash(cfg),
            seed: cfg.seed,
        },
        files: Vec::new(),
    };
    let mut rep = ArmReport {
        name: arm.name.clone(),
        ..ArmReport::default()
    };
    let mut success = success_table();
    run_task(
        cfg,
        arm,
        task,
        model,
        &ds,
        base,
        split_seed(cfg.seed, task.seed_stream()),
        &mut out,
        &mut rep,
        &mut success,
    )?;
    if !success.is_empty() {
        out.table(&format!("success_{}.csv", arm.name), &success)?;
    }
    Ok(rep)
}

fn success_table() -> Table {
    Table::new(&["arm", "episodes", "successes", "success_rate"])
}

fn run_stages(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    cache: &mut ModelCache,
    report: &mut RunReport,
) -> Result<()> {
    let env = cfg.env.build()?;
    let base = base_dataset(cfg, cache)?;
    let mut out = Outputs {
        dir: out_dir,
        stamp: RunStamp {
            config_hash: report.config_hash.clone(),
            seed: cfg.seed,
        },
        files: Vec::new(),
    };
    let mut success_rows = success_table();

    if let Some(n) = cfg.baselines.behavior_success {
        let rate = behavior_policy_success(&cfg.env, n, split_seed(cfg.seed, 2))?;
        report
            .baselines
            .insert("behavior_success_rate".into(), rate);
        success_rows.push(vec![
            "behavior_policy".into(),
            n.to_string(),
            ((rate * n as f64).round() as usize).to_string(),
            fmt_f64(rate),
        ])?;
    }

    for arm in &cfg.arms {
        let ds = arm_dataset(&base, arm)?;
        let model_cfg =
            cfg.arm_model_config(arm, base.state_dim(), env.n_actions(), env.max_steps());
        let train_cfg = cfg.arm_train_config(arm);
        let key = config_hash(&(
            &cfg.env,
            &cfg.dataset,
            cfg.dataset_seed(),
            &arm.data,
            arm.delayed_rewards,
            &model_cfg,
            &train_cfg,
        ));
        let mut arm_report = ArmReport {
            name: arm.name.clone(),
            ..ArmReport::default()
        };
        let (model, log) = match cache.models.get(&key) {
            Some(hit) => {
                arm_report.cached_model = true;
                hit.clone()
            }
            None => {
                let model = DecisionTransformer::new(model_cfg, train_cfg.seed)?;
                let trained = train(model, &ds, train_cfg)?;
                cache.models.insert(key, trained.clone());
                trained
            }
        };
        arm_report.train_wall_clock_secs = log.wall_clock_secs;
        arm_report
            .metrics
            .insert("train_trajectories".into(), ds.len() as f64);
        if let Some(last) = log.steps.last() {
            arm_report.metrics.insert("final_loss".into(), last.loss);
        }
        out.table(&format!("train_{}.csv", arm.name), &train_log_table(&log)?)?;

        for task in &arm.evals {
            let seed = split_seed(cfg.seed, task.seed_stream());
            run_task(
                cfg,
                arm,
                task,
                &model,
                &ds,
                &base,
                seed,
                &mut out,
                &mut arm_report,
                &mut success_rows,
            )?;
        }
        report.arms.push(arm_report);
    }

    if !success_rows.is_empty() {
        out.table("success.csv", &success_rows)?;
    }
    let mut metrics = Table::new(&["arm", "metric", "value"]);
    for (k, v) in &report.baselines {
        metrics.push(vec!["baseline".into(), k.clone(), fmt_f64(*v)])?;
    }
    for a in &report.arms {
        for (k, v) in &a.metrics {
            metrics.push(vec![a.name.clone(), k.clone(), fmt_f64(*v)])?;
        }
    }
    out.table("metrics.csv", &metrics)?;
    report.files = out.files;
    Ok(())
}

pub fn train_log_table(log: &TrainLog) -> Result<Table> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    csv_to_table(&buf)
}

fn csv_to_table(bytes: &[u8]) -> Result<Table> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut t = Table::new(&headers.iter().map(String::as_str).collect::<Vec<_>>());
    for rec in r.records() {
        t.push(rec?.iter().map(str::to_string).collect())?;
    }
    Ok(t)
}

#[allow(clippy::too_many_arguments)]
fn run_task(
    cfg: &ExperimentConfig,
    arm: &ArmSpec,
    task: &EvalTask,
    model: &DecisionTransformer,
    ds: &TrajectoryDataset,
    base: &TrajectoryDataset,
    seed: u64,
    out: &mut Outputs,
    rep: &mut ArmReport,
    success_rows: &mut Table,
) -> Result<()> {
    let name = &arm.name;
    match task {
        EvalTask::GraphPrior {
            gamma,
            episodes_per_start,
            selection,
        } => {
            let EnvConfig::Graph(gc) = &cfg.env else {
                unreachable!("validated")
            };
            let graph = GraphMDP::generate(gc)?;
            let prior = ReturnPrior {
                horizon: gc.max_steps,
                gamma: *gamma,
            };
            let rc = RolloutConfig {
                target_return: 0.0,
                context_k: None,
                max_steps: gc.max_steps,
                selection: *selection,
                seed,
            };
            let episodes = evaluate_graph_starts(model, &graph, &prior, &rc, *episodes_per_start)?;
            let model_len: Vec<Option<usize>> = episodes
                .iter()
                .map(|(_, e)| e.graph_path_length())
                .collect();
            let oracle_len: Vec<Option<usize>> = episodes
                .iter()
                .map(|(s, _)| shortest_path_oracle(&graph, *s))
                .collect();
            let starts: Vec<usize> = episodes.iter().map(|(s, _)| *s).collect();
            let walk_len = random_walk_lengths(&graph, &starts, gc.max_steps, split_seed(seed, 1))?;
            let hist = Histogram::new(
                gc.max_steps,
                &[
                    ("random_walk", &walk_len),
                    ("oracle", &oracle_len),
                    ("model", &model_len),
                ],
            )?;
            out.table(&format!("histogram_{name}.csv"), &hist.table())?;
            out.text(
                &format!("histogram_{name}.svg"),
                &hist.svg(&format!("{}: steps to goal", cfg.name)),
            )?;

            let mut labels = Table::new(&["episode", "start", "steps", "oracle_steps", "label"]);
            let (mut reached, mut stitched) = (0usize, 0usize);
            for (i, (start, e)) in episodes.iter().enumerate() {
                let label = stitching_analysis(e, ds);
                match label {
                    StitchLabel::Stitched => {
                        stitched += 1;
                        reached += 1;
                    }
                    StitchLabel::Contained => reached += 1,
                    StitchLabel::Failed => {}
                }
                labels.push(vec![
                    i.to_string(),
                    start.to_string(),
                    model_len[i].map_or("inf".into(), |l| l.to_string()),
                    oracle_len[i].map_or("inf".into(), |l| l.to_string()),
                    serde_json::to_value(label)?
                        .as_str()
                        .unwrap_or_default()
                        .to_string(),
                ])?;
            }
            out.table(&format!("stitching_{name}.csv"), &labels)?;
            let n = episodes.len().max(1) as f64;
            let mean = |v: &[Option<usize>]| {
                let xs: Vec<f64> = v.iter().flatten().map(|&l| l as f64).collect();
                if xs.is_empty() {
                    f64::NAN
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };
            let m = &mut rep.metrics;
            m.insert("graph_episodes".into(), episodes.len() as f64);
            m.insert("goal_reach_rate".into(), reached as f64 / n);
            m.insert("model_mean_steps".into(), mean(&model_len));
            m.insert("oracle_mean_steps".into(), mean(&oracle_len));
            m.insert(
                "random_walk_reach_rate".into(),
                walk_len.iter().flatten().count() as f64 / n,
            );
            m.insert(
                "stitched_fraction".into(),
                stitched as f64 / reached.max(1) as f64,
            );
        }
        EvalTask::Sweep {
            targets,
            episodes_per_target,
        } => {
            let env = cfg.env.build()?;
            let rc = RolloutConfig {
                target_return: 0.0,
                context_k: None,
                max_steps: env.max_steps(),
                selection: Selection::Argmax,
                seed,
            };
            let rows = target_return_sweep(
                model,
                &cfg.env,
                targets,
                *episodes_per_target,
                &rc,
                split_seed(seed, 1),
            )?;
            let mut t = Table::new(&["target", "mean_return", "std_return", "episodes", "oracle"]);
            for r in &rows {
                t.push(vec![
                    fmt_f64(r.target),
                    fmt_f64(r.mean_return),
                    fmt_f64(r.std_return),
                    r.episodes.to_string(),
                    fmt_f64(r.oracle),
                ])?;
            }
            out.table(&format!("sweep_{name}.csv"), &t)?;
            let x: Vec<f64> = rows.iter().map(|r| r.target).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.mean_return).collect();
            rep.metrics.insert("sweep_pearson".into(), pearson(&x, &y));
            rep.metrics
                .insert("sweep_inversions".into(), inversions(&y) as f64);
        }
        EvalTask::Success {
            episodes,
            target_return,
        } => {
            let (rate, eps) = success_rate(model, &cfg.env, *episodes, *target_return, seed)?;
            let wins = eps.iter().filter(|e| e.achieved_return >= 1.0).count();
            success_rows.push(vec![
                name.clone(),
                episodes.to_string(),
                wins.to_string(),
                fmt_f64(rate),
            ])?;
            rep.metrics.insert("success_rate".into(), rate);
        }
        EvalTask::Critic { episodes } => {
            let EnvConfig::KeyToDoor(kc) = &cfg.env else {
                unreachable!("validated")
            };
            let bins = model.config.predict_returns.expect("validated");
            let win_bin = bins.bin(1.0)?;
            // fresh episodes from a seed stream the training data never uses
            let held_out =
                collect_random_trajectories(&cfg.env, *episodes, split_seed(seed, 0x4845_4c44))?;
            let mut traces = Vec::new();
            let mut finals: BTreeMap<Outcome, Vec<f64>> = BTreeMap::new();
            let (mut attn_wins, mut attn_total) = (0usize, 0usize);
            let mut shown = false;
            for t in &held_out.trajectories {
                let outcome = k2d_outcome(kc, &t.states, &t.actions, t.episode_return);
                let trace = return_probability_trace(model, t, win_bin)?;
                finals
                    .entry(outcome)
                    .or_default()
                    .push(*trace.last().expect("nonempty episode"));
                traces.push((outcome, trace));
                if outcome == Outcome::Success {
                    let m = attention_by_timestep(model, t)?;
                    if let Some(pick) = k2d_pickup_step(kc, &t.states) {
                        attn_total += 1;
                        if attention_on(&m, pick) > 1.0 / t.len() as f64 {
                            attn_wins += 1;
                        }
                    }
                    if !shown {
                        out.table(&format!("attention_{name}.csv"), &attention_table(&m))?;
                        shown = true;
                    }
                }
            }
            let (table, missing) = return_trace_table(&traces);
            out.table(&format!("return_traces_{name}.csv"), &table)?;
            for o in missing {
                rep.notes.push(format!(
                    "no held-out episodes with outcome {}",
                    outcome_name(o)
                ));
            }
            for (o, v) in &finals {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                rep.metrics
                    .insert(format!("final_p_{}", outcome_name(*o)), mean);
                rep.metrics
                    .insert(format!("episodes_{}", outcome_name(*o)), v.len() as f64);
            }
            rep.metrics.insert(
                "attention_above_baseline_fraction".into(),
                attn_wins as f64 / attn_total.max(1) as f64,
            );
        }
        EvalTask::ActionProbe { windows } => {
            // windows from the unfiltered data so that arms are comparable
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = model.config.context_k;
            let ws = sample_windows(base, k, *windows, &mut rng)?;
            let refs: Vec<_> = ws.iter().collect();
            let preds = model.predict_batch(&refs, false)?;
            let mut t = Table::new(&["window", "position", "action", "logit"]);
            for (i, (w, p)) in ws.iter().zip(&preds).enumerate() {
                let WindowActions::Discrete(_) = &w.actions else {
                    unreachable!("discrete envs")
                };
                for pos in w.first_valid()..w.len() {
                    for (a, &l) in p.actions.row(pos).iter().enumerate() {
                        t.push(vec![
                            i.to_string(),
                            pos.to_string(),
                            a.to_string(),
                            fmt_f64(l),
                        ])?;
                    }
                }
            }
            out.table(&format!("probe_{name}.csv"), &t)?;
        }
    }
    Ok(())
}

/// Steps to the goal of behavior-policy walks from the given starts.
fn random_walk_lengths(
    graph: &GraphMDP,
    starts: &[usize],
    max_steps: usize,
    seed: u64,
) -> Result<Vec<Option<usize>>> {
    let mut env = Env::Graph(graph.clone());
    starts
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, i as u64));
            if let Env::Graph(g) = &mut env {
                g.reset_at(start)?;
            }
            for step in 1..=max_steps {
                let a = env.behavior_action(&mut rng);
                let tr = env.step(a)?;
                if tr.reward == 0.0 {
                    return Ok(Some(step));
                }
                if tr.done {
                    break;
                }
            }
            Ok(None)
        })
        .collect()
}
