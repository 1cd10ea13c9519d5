//! Autoregressive evaluation: target-conditioned rollouts, the return-prior
//! scheme for the graph task, sweeps, stitching labels, critic traces and
//! attention aggregation.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_seed, Trajectory, TrajectoryDataset};
use crate::envs::{Env, EnvConfig, Environment, GraphMDP, KeyToDoorConfig, KeyToDoorEnv};
use crate::error::{Error, Result};
use crate::model::{DecisionTransformer, ReturnBins, TrajectoryWindow, WindowActions};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    Argmax,
    Sample { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub target_return: f64,
    /// Context length; defaults to the model's K.
    #[serde(default)]
    pub context_k: Option<usize>,
    pub max_steps: usize,
    pub selection: Selection,
    pub seed: u64,
}

/// `P(k) ∝ (T + 1 − k)^γ` over path lengths `k = 0..=T`, i.e. returns
/// `R̂ = −k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnPrior {
    pub horizon: usize,
    pub gamma: f64,
}

impl ReturnPrior {
    /// Normalized weights indexed by path length k.
    pub fn weights(&self) -> Vec<f64> {
        let t = self.horizon as f64;
        let raw: Vec<f64> = (0..=self.horizon)
            .map(|k| (t + 1.0 - k as f64).powf(self.gamma))
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / z).collect()
    }

    /// Log-weights in return-bin order; the bins must be exactly `−T..=0`.
    pub fn log_weights_for(&self, bins: ReturnBins) -> Result<Vec<f64>> {
        if bins.min != -(self.horizon as i64) || bins.max != 0 {
            return Err(Error::Config(format!(
                "return prior over −{}..=0 does not match bins {}..={}",
                self.horizon, bins.min, bins.max
            )));
        }
        let w = self.weights();
        Ok((0..bins.len())
            .map(|b| w[(-bins.value(b)) as usize].ln())
            .collect())
    }

    /// Renormalized `p_model · prior^γ` over return bins.
    pub fn combine(&self, bins: ReturnBins, model_probs: &[f64]) -> Result<Vec<f64>> {
        let lw = self.log_weights_for(bins)?;
        let logits: Vec<f64> = model_probs
            .iter()
            .zip(&lw)
            .map(|(p, w)| p.ln() + w)
            .collect();
        Ok(softmax(&logits))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn select(
    probs_or_logits: &[f64],
    selection: Selection,
    logits: bool,
    rng: &mut ChaCha8Rng,
) -> usize {
    match selection {
        Selection::Argmax => {
            let mut best = 0;
            for (i, &v) in probs_or_logits.iter().enumerate() {
                if v > probs_or_logits[best] {
                    best = i;
                }
            }
            best
        }
        Selection::Sample { temperature } => {
            let probs = if logits {
                let scaled: Vec<f64> = probs_or_logits
                    .iter()
                    .map(|x| x / temperature.max(1e-8))
                    .collect();
                softmax(&scaled)
            } else {
                probs_or_logits.to_vec()
            };
            WeightedIndex::new(&probs)
                .map(|d| d.sample(rng))
                .unwrap_or(0)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// R̂ fed to the model at each step.
    pub conditioned: Vec<f64>,
    pub achieved_return: f64,
    pub terminated: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Graph episodes: steps to the goal, `None` if never reached.
    pub fn graph_path_length(&self) -> Option<usize> {
        (self.rewards.last() == Some(&0.0)).then_some(self.len())
    }

    pub fn to_trajectory(&self, tag: &str) -> Result<Trajectory> {
        Trajectory::new(
            self.states.clone(),
            self.actions.clone(),
            self.rewards.clone(),
            0,
            tag,
        )
    }
}

enum ReturnSource<'a> {
    Target(f64),
    Prior(&'a ReturnPrior),
}

/// Left-padded window over the last `k` entries of the running history.
pub fn history_window(
    rtg: &[f64],
    states: &[Vec<f64>],
    actions: &[usize],
    t0: usize,
    k: usize,
) -> TrajectoryWindow {
    let n = states.len();
    let first = n.saturating_sub(k);
    let pad = k - (n - first);
    let dim = states[0].len();
    let mut w = TrajectoryWindow {
        returns_to_go: vec![0.0; pad],
        states: vec![vec![0.0; dim]; pad],
        actions: WindowActions::Discrete(vec![0; pad]),
        timesteps: vec![0; pad],
        valid: vec![false; pad],
    };
    w.returns_to_go.extend_from_slice(&rtg[first..]);
    w.states.extend_from_slice(&states[first..]);
    if let WindowActions::Discrete(a) = &mut w.actions {
        a.extend_from_slice(&actions[first..]);
    }
    w.timesteps.extend(t0 + first..t0 + n);
    w.valid.extend(std::iter::repeat_n(true, n - first));
    w
}

struct Episode {
    env: Env,
    cfg: RolloutConfig,
    rng: ChaCha8Rng,
    rec: EpisodeRecord,
    rtg: Vec<f64>,
    obs: Vec<f64>,
    next_target: f64,
    finished: bool,
}

impl Episode {
    fn new(env: Env, first_obs: Vec<f64>, cfg: &RolloutConfig, source: &ReturnSource) -> Self {
        Self {
            env,
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            rec: EpisodeRecord::default(),
            rtg: Vec::new(),
            obs: first_obs,
            next_target: match source {
                ReturnSource::Target(g) => *g,
                ReturnSource::Prior(_) => 0.0,
            },
            finished: false,
        }
    }

    fn window(&self, k: usize, model_k: usize) -> TrajectoryWindow {
        pad_to(
            history_window(&self.rtg, &self.rec.states, &self.rec.actions, 0, k),
            model_k,
        )
    }
}

/// Advances every episode in lockstep; each step is one batched forward
/// over the episodes still running. Results equal separate rollouts.
fn run_episodes(
    model: &DecisionTransformer,
    episodes: &mut [Episode],
    source: &ReturnSource,
) -> Result<()> {
    let model_k = model.config.context_k;
    for ep in episodes.iter() {
        if ep.cfg.max_steps == 0 {
            return Err(Error::Config("max_steps must be ≥ 1".into()));
        }
        let k = ep.cfg.context_k.unwrap_or(model_k);
        if k == 0 || k > model_k {
            return Err(Error::Config(format!(
                "rollout context {k} outside 1..={model_k}"
            )));
        }
    }
    let bins = match source {
        ReturnSource::Prior(_) => Some(model.config.predict_returns.ok_or_else(|| {
            Error::Config("return prior needs a model with a return head".into())
        })?),
        ReturnSource::Target(_) => None,
    };
    loop {
        let live: Vec<usize> = (0..episodes.len())
            .filter(|&i| !episodes[i].finished)
            .collect();
        if live.is_empty() {
            return Ok(());
        }
        for &i in &live {
            let ep = &mut episodes[i];
            ep.rec.states.push(ep.obs.clone());
            ep.rec.actions.push(0); // placeholder: action i is never visible to its own prediction
            ep.rtg.push(ep.next_target);
        }
        let windows = |eps: &[Episode]| -> Vec<TrajectoryWindow> {
            live.iter()
                .map(|&i| eps[i].window(eps[i].cfg.context_k.unwrap_or(model_k), model_k))
                .collect()
        };
        if let (ReturnSource::Prior(prior), Some(bins)) = (source, bins) {
            let ws = windows(episodes);
            let refs: Vec<&TrajectoryWindow> = ws.iter().collect();
            let preds = model.predict_batch(&refs, false)?;
            for (&i, pred) in live.iter().zip(preds) {
                let returns = pred.returns.expect("return head");
                let probs = softmax(returns.row(returns.rows() - 1));
                let combined = prior.combine(bins, &probs)?;
                let ep = &mut episodes[i];
                let bin = select(&combined, ep.cfg.selection, false, &mut ep.rng);
                *ep.rtg.last_mut().unwrap() = bins.value(bin);
            }
        }
        let ws = windows(episodes);
        let refs: Vec<&TrajectoryWindow> = ws.iter().collect();
        let preds = model.predict_batch(&refs, false)?;
        for (&i, pred) in live.iter().zip(preds) {
            let ep = &mut episodes[i];
            let logits = pred.actions.row(pred.actions.rows() - 1);
            let a = select(logits, ep.cfg.selection, true, &mut ep.rng);
            *ep.rec.actions.last_mut().unwrap() = a;
            let tr = ep.env.step(a)?;
            ep.rec.rewards.push(tr.reward);
            let g = *ep.rtg.last().unwrap();
            ep.rec.conditioned.push(g);
            ep.next_target = g - tr.reward;
            ep.obs = tr.state;
            if tr.done {
                ep.rec.terminated = true;
            }
            if tr.done || ep.rec.len() >= ep.cfg.max_steps {
                ep.finished = true;
                ep.rec.achieved_return = ep.rec.rewards.iter().sum();
            }
        }
    }
}

fn run_episode(
    model: &DecisionTransformer,
    env: &mut Env,
    first_obs: Vec<f64>,
    cfg: &RolloutConfig,
    source: ReturnSource,
) -> Result<EpisodeRecord> {
    let mut eps = [Episode::new(env.clone(), first_obs, cfg, &source)];
    run_episodes(model, &mut eps, &source)?;
    let [ep] = eps;
    *env = ep.env;
    Ok(ep.rec)
}

/// Windows shorter than the model's K (a reduced rollout context) are padded
/// on the left; padded positions do not influence predictions.
fn pad_to(mut w: TrajectoryWindow, k: usize) -> TrajectoryWindow {
    let extra = k - w.len();
    if extra == 0 {
        return w;
    }
    let dim = w.states.last().map_or(0, Vec::len);
    w.returns_to_go.splice(0..0, vec![0.0; extra]);
    w.states.splice(0..0, vec![vec![0.0; dim]; extra]);
    if let WindowActions::Discrete(a) = &mut w.actions {
        a.splice(0..0, vec![0; extra]);
    }
    w.timesteps.splice(0..0, vec![0; extra]);
    w.valid.splice(0..0, vec![false; extra]);
    w
}

/// Conditions on `cfg.target_return` and decrements it by each reward.
pub fn rollout(
    model: &DecisionTransformer,
    env: &mut Env,
    first_obs: Vec<f64>,
    cfg: &RolloutConfig,
) -> Result<EpisodeRecord> {
    run_episode(
        model,
        env,
        first_obs,
        cfg,
        ReturnSource::Target(cfg.target_return),
    )
}

/// Generates each R̂ₜ from the model's return head reweighted by `prior`,
/// then the action conditioned on it. No oracle information is consumed.
pub fn rollout_with_return_prior(
    model: &DecisionTransformer,
    env: &mut Env,
    first_obs: Vec<f64>,
    prior: &ReturnPrior,
    cfg: &RolloutConfig,
) -> Result<EpisodeRecord> {
    run_episode(model, env, first_obs, cfg, ReturnSource::Prior(prior))
}

/// Rollouts from environment seeds split off `seed`, run as one batch.
pub fn evaluate(
    model: &DecisionTransformer,
    env_config: &EnvConfig,
    n_episodes: usize,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    let source = ReturnSource::Target(cfg.target_return);
    let mut eps = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes as u64 {
        let mut env = env_config.build()?;
        let obs = env.reset(split_seed(seed, 2 * i));
        let c = RolloutConfig {
            seed: split_seed(seed, 2 * i + 1),
            ..cfg.clone()
        };
        eps.push(Episode::new(env, obs, &c, &source));
    }
    run_episodes(model, &mut eps, &source)?;
    Ok(eps.into_iter().map(|e| e.rec).collect())
}

/// Prior-scheme rollouts from every start node that can reach the goal.
pub fn evaluate_graph_starts(
    model: &DecisionTransformer,
    graph: &GraphMDP,
    prior: &ReturnPrior,
    cfg: &RolloutConfig,
    episodes_per_start: usize,
) -> Result<Vec<(usize, EpisodeRecord)>> {
    let source = ReturnSource::Prior(prior);
    let mut starts = Vec::new();
    let mut eps = Vec::new();
    for start in graph.reachable_starts() {
        for j in 0..episodes_per_start as u64 {
            let mut g = graph.clone();
            let obs = g.reset_at(start)?;
            let c = RolloutConfig {
                seed: split_seed(cfg.seed, start as u64 * 1_000 + j),
                ..cfg.clone()
            };
            starts.push(start);
            eps.push(Episode::new(Env::Graph(g), obs, &c, &source));
        }
    }
    run_episodes(model, &mut eps, &source)?;
    Ok(starts
        .into_iter()
        .zip(eps.into_iter().map(|e| e.rec))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub episodes: usize,
    /// Reference diagonal: achieved == target.
    pub oracle: f64,
}

pub fn target_return_sweep(
    model: &DecisionTransformer,
    env_config: &EnvConfig,
    targets: &[f64],
    episodes_per_target: usize,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if targets.is_empty() || episodes_per_target == 0 {
        return Err(Error::Config("sweep needs targets and episodes".into()));
    }
    targets
        .iter()
        .map(|&target| {
            let c = RolloutConfig {
                target_return: target,
                ..cfg.clone()
            };
            // same start states for every target
            let eps = evaluate(model, env_config, episodes_per_target, &c, seed)?;
            let (mean, std) = mean_std(eps.iter().map(|e| e.achieved_return));
            Ok(SweepRow {
                target,
                mean_return: mean,
                std_return: std,
                episodes: eps.len(),
                oracle: target,
            })
        })
        .collect()
}

pub fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation; `NaN` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, _) = mean_std(x.iter().cloned());
    let (my, _) = mean_std(y.iter().cloned());
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Number of adjacent pairs where the sequence decreases.
pub fn inversions(xs: &[f64]) -> usize {
    xs.windows(2).filter(|w| w[1] < w[0]).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchLabel {
    Contained,
    Stitched,
    Failed,
}

/// Whether a goal-reaching episode replays a contiguous (state, action)
/// segment of some dataset trajectory.
pub fn stitching_analysis(episode: &EpisodeRecord, ds: &TrajectoryDataset) -> StitchLabel {
    if episode.graph_path_length().is_none() {
        return StitchLabel::Failed;
    }
    let n = episode.len();
    let contained = ds.trajectories.iter().any(|t| {
        t.len() >= n
            && (0..=t.len() - n).any(|o| {
                (0..n).all(|i| {
                    t.actions[o + i] == episode.actions[i] && t.states[o + i] == episode.states[i]
                })
            })
    });
    if contained {
        StitchLabel::Contained
    } else {
        StitchLabel::Stitched
    }
}

/// Key-to-Door rollouts with full-episode context; returns the success
/// fraction and the episodes.
pub fn success_rate(
    model: &DecisionTransformer,
    env_config: &EnvConfig,
    n_episodes: usize,
    target_return: f64,
    seed: u64,
) -> Result<(f64, Vec<EpisodeRecord>)> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be ≥ 1".into()));
    }
    let env = env_config.build()?;
    let cfg = RolloutConfig {
        target_return,
        context_k: None,
        max_steps: env.max_steps(),
        selection: Selection::Argmax,
        seed,
    };
    let eps = evaluate(model, env_config, n_episodes, &cfg, seed)?;
    let wins = eps.iter().filter(|e| e.achieved_return >= 1.0).count();
    Ok((wins as f64 / n_episodes as f64, eps))
}

/// Success fraction of the data-collection policy: goal reached on the
/// graph, reward 1 on Key-to-Door.
pub fn behavior_policy_success(
    env_config: &EnvConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    let ds = crate::data::collect_random_trajectories(env_config, n_episodes, seed)?;
    let wins = ds
        .trajectories
        .iter()
        .filter(|t| match env_config {
            EnvConfig::Graph(_) => t.rewards.last() == Some(&0.0),
            EnvConfig::KeyToDoor(_) => t.episode_return >= 1.0,
        })
        .count();
    Ok(wins as f64 / n_episodes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    DoorWithoutKey,
    NoDoor,
}

/// Outcome of a Key-to-Door episode recovered from its observations.
pub fn k2d_outcome(
    config: &KeyToDoorConfig,
    states: &[Vec<f64>],
    actions: &[usize],
    ret: f64,
) -> Outcome {
    if ret >= 1.0 {
        return Outcome::Success;
    }
    let env = KeyToDoorEnv::new(config.clone()).expect("valid config");
    let (Some(s), Some(&a)) = (states.last(), actions.last()) else {
        return Outcome::NoDoor;
    };
    let d = KeyToDoorEnv::decode(config, s);
    match d.door {
        Some(door) if d.phase == 2 && env.moved(d.agent, a) == door => Outcome::DoorWithoutKey,
        _ => Outcome::NoDoor,
    }
}

/// Timestep whose observation shows the agent standing on the key.
pub fn k2d_pickup_step(config: &KeyToDoorConfig, states: &[Vec<f64>]) -> Option<usize> {
    let mut key_seen = false;
    for (t, s) in states.iter().enumerate() {
        let d = KeyToDoorEnv::decode(config, s);
        if d.phase != 0 {
            return None;
        }
        match d.key {
            Some(_) => key_seen = true,
            None if key_seen => return Some(t),
            None => {}
        }
    }
    None
}

/// Teacher-forced full-episode window, left-padded to K.
pub fn episode_window(traj: &Trajectory, k: usize) -> Result<TrajectoryWindow> {
    if traj.len() > k {
        return Err(Error::ContextOverflow(traj.len(), k));
    }
    Ok(traj.window(traj.len() - 1, k))
}

/// Predicted probability of return bin `bin` at every step of an episode.
pub fn return_probability_trace(
    model: &DecisionTransformer,
    traj: &Trajectory,
    bin: usize,
) -> Result<Vec<f64>> {
    let w = episode_window(traj, model.config.context_k)?;
    let pred = model.predict(&w, false)?;
    let returns = pred
        .returns
        .ok_or_else(|| Error::Config("model has no return head".into()))?;
    let f = w.first_valid();
    Ok((f..w.len()).map(|i| softmax(returns.row(i))[bin]).collect())
}

/// Attention mass per (query timestep, source timestep), summed over
/// layers, heads and the modality tokens of both steps, then normalized per
/// query. The start token is not a timestep and its mass is dropped.
pub fn attention_by_timestep(model: &DecisionTransformer, traj: &Trajectory) -> Result<Tensor> {
    let w = episode_window(traj, model.config.context_k)?;
    let pred = model.predict(&w, true)?;
    let trace = pred.trace.expect("traced forward");
    let per = model.config.conditioning.tokens_per_step();
    let off = usize::from(model.config.predict_returns.is_some());
    let n = traj.len();
    let mut out = vec![0.0; n * n];
    for layer in &trace.layers {
        for head in layer {
            let tokens = head.rows();
            for q in off..tokens {
                let tq = (q - off) / per;
                let row = head.row(q);
                for (kk, &a) in row.iter().enumerate().take(q + 1).skip(off) {
                    out[tq * n + (kk - off) / per] += a;
                }
            }
        }
    }
    for r in 0..n {
        let z: f64 = out[r * n..(r + 1) * n].iter().sum();
        if z > 0.0 {
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= z;
            }
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Mean attention on `source` over queries at or after it.
pub fn attention_on(matrix: &Tensor, source: usize) -> f64 {
    let n = matrix.rows();
    let vals: Vec<f64> = (source..n).map(|q| matrix.row(q)[source]).collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}
