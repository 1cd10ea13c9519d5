//! Trajectory datasets: behavior-policy collection, percentile filtering,
//! timestep-uniform window sampling and the `.djsonl` on-disk format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{delay_returns, Env, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::model::{compute_returns_to_go, TrajectoryWindow, WindowActions};

pub const FORMAT_VERSION: u32 = 1;

/// Derives an independent seed for item `index` of a stream (splitmix64).
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Observation before each action.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    #[serde(skip)]
    pub returns_to_go: Vec<f64>,
    pub episode_return: f64,
    pub env_seed: u64,
    pub policy: String,
}

impl Trajectory {
    pub fn new(
        states: Vec<Vec<f64>>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        env_seed: u64,
        policy: &str,
    ) -> Result<Self> {
        if states.len() != actions.len() || states.len() != rewards.len() {
            return Err(Error::Window(format!(
                "trajectory lengths differ: {} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                rewards.len()
            )));
        }
        let returns_to_go = compute_returns_to_go(&rewards)?;
        Ok(Self {
            episode_return: returns_to_go[0],
            states,
            actions,
            rewards,
            returns_to_go,
            env_seed,
            policy: policy.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The K steps ending at `end`, left-padded at the episode start.
    pub fn window(&self, end: usize, k: usize) -> TrajectoryWindow {
        let first = (end + 1).saturating_sub(k);
        let pad = k - (end + 1 - first);
        let dim = self.states[0].len();
        let mut w = TrajectoryWindow {
            returns_to_go: vec![0.0; pad],
            states: vec![vec![0.0; dim]; pad],
            actions: WindowActions::Discrete(vec![0; pad]),
            timesteps: vec![0; pad],
            valid: vec![false; pad],
        };
        w.returns_to_go
            .extend_from_slice(&self.returns_to_go[first..=end]);
        w.states.extend_from_slice(&self.states[first..=end]);
        if let WindowActions::Discrete(a) = &mut w.actions {
            a.extend_from_slice(&self.actions[first..=end]);
        }
        w.timesteps.extend(first..=end);
        w.valid.extend(std::iter::repeat_n(true, end + 1 - first));
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub env: EnvConfig,
    pub n_trajectories: usize,
    pub total_timesteps: usize,
    pub generation_seed: u64,
    pub policy: String,
    #[serde(default)]
    pub delayed_rewards: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
    /// `cumulative[i]` = timesteps in trajectories before `i`; one extra
    /// trailing entry holds the total.
    cumulative: Vec<usize>,
}

impl TrajectoryDataset {
    pub fn new(manifest: Manifest, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut cumulative = Vec::with_capacity(trajectories.len() + 1);
        let mut total = 0;
        for t in &trajectories {
            cumulative.push(total);
            total += t.len();
        }
        cumulative.push(total);
        let manifest = Manifest {
            n_trajectories: trajectories.len(),
            total_timesteps: total,
            ..manifest
        };
        Ok(Self {
            manifest,
            trajectories,
            cumulative,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_timesteps(&self) -> usize {
        self.cumulative[self.trajectories.len()]
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories[0].states[0].len()
    }

    /// Maps a global timestep index to `(trajectory, step)`.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let i = self.cumulative.partition_point(|&c| c <= global) - 1;
        (i, global - self.cumulative[i])
    }

    fn derived(&self, trajectories: Vec<Trajectory>) -> Result<Self> {
        Self::new(self.manifest.clone(), trajectories)
    }

    /// Same episodes with every reward moved to the final step.
    pub fn with_delayed_rewards(&self) -> Result<Self> {
        let mut trajs = Vec::with_capacity(self.len());
        for t in &self.trajectories {
            trajs.push(Trajectory::new(
                t.states.clone(),
                t.actions.clone(),
                delay_returns(&t.rewards),
                t.env_seed,
                &t.policy,
            )?);
        }
        let mut ds = self.derived(trajs)?;
        ds.manifest.delayed_rewards = true;
        Ok(ds)
    }

    /// Episodes whose return is at least `min_return`.
    pub fn filter_min_return(&self, min_return: f64) -> Result<Self> {
        let kept: Vec<_> = self
            .trajectories
            .iter()
            .filter(|t| t.episode_return >= min_return)
            .cloned()
            .collect();
        self.derived(kept)
    }
}

/// Rolls out `policy` for `count` episodes. Episode `i` uses seeds split
/// from `seed`, so the result does not depend on generation order.
pub fn collect_trajectories<P>(
    env_config: &EnvConfig,
    count: usize,
    seed: u64,
    tag: &str,
    mut policy: P,
) -> Result<TrajectoryDataset>
where
    P: FnMut(&Env, &mut ChaCha8Rng) -> usize,
{
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut env = env_config.build()?;
    let mut trajs = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let env_seed = split_seed(seed, 2 * i);
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 2 * i + 1));
        let mut obs = env.reset(env_seed);
        let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
        loop {
            let a = policy(&env, &mut rng);
            let tr = env.step(a)?;
            states.push(obs);
            actions.push(a);
            rewards.push(tr.reward);
            obs = tr.state;
            if tr.done {
                break;
            }
        }
        trajs.push(Trajectory::new(states, actions, rewards, env_seed, tag)?);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        env: env_config.clone(),
        n_trajectories: count,
        total_timesteps: 0,
        generation_seed: seed,
        policy: tag.to_string(),
        delayed_rewards: false,
    };
    TrajectoryDataset::new(manifest, trajs)
}

/// Uniformly random behavior (a random walk on the graph).
pub fn collect_random_trajectories(
    env_config: &EnvConfig,
    count: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    collect_trajectories(env_config, count, seed, "random", |env, rng| {
        env.behavior_action(rng)
    })
}

/// Keeps whole episodes in order of decreasing return until they cover
/// ⌈X% of all timesteps⌉. Equal returns keep dataset order; the output keeps
/// the original episode order.
pub fn filter_top_percentile(ds: &TrajectoryDataset, percent: f64) -> Result<TrajectoryDataset> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!(
            "percentile must be in (0, 100], got {percent}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let target = (percent / 100.0 * ds.total_timesteps() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    // stable: ties stay in dataset order
    order.sort_by(|&a, &b| {
        ds.trajectories[b]
            .episode_return
            .total_cmp(&ds.trajectories[a].episode_return)
    });
    let mut keep = vec![false; ds.len()];
    let mut kept = 0;
    for i in order {
        if kept >= target {
            break;
        }
        keep[i] = true;
        kept += ds.trajectories[i].len();
    }
    let trajs = ds
        .trajectories
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    ds.derived(trajs)
}

/// Samples `batch_size` windows whose final step is uniform over all
/// timesteps of the dataset.
pub fn sample_windows(
    ds: &TrajectoryDataset,
    k: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrajectoryWindow>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total = ds.total_timesteps();
    Ok((0..batch_size)
        .map(|_| {
            let (i, t) = ds.locate(rng.gen_range(0..total));
            ds.trajectories[i].window(t, k)
        })
        .collect())
}

pub fn save_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &ds.manifest)?;
    out.write_all(b"\n")?;
    for t in &ds.trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let corrupt = |line: usize, reason: String| Error::CorruptDataset { line, reason };
    let first = lines
        .next()
        .ok_or_else(|| corrupt(1, "missing manifest".into()))??;
    let manifest: Manifest =
        serde_json::from_str(&first).map_err(|e| corrupt(1, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            1,
            format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let mut trajs = Vec::with_capacity(manifest.n_trajectories);
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Trajectory = serde_json::from_str(&line)
            .map_err(|e| corrupt(n, format!("{e}; last good line {}", n - 1)))?;
        let t = Trajectory::new(
            raw.states,
            raw.actions,
            raw.rewards,
            raw.env_seed,
            &raw.policy,
        )
        .map_err(|e| corrupt(n, e.to_string()))?;
        if t.episode_return.to_bits() != raw.episode_return.to_bits() {
            return Err(corrupt(
                n,
                format!(
                    "episode_return {} but rewards sum to {}",
                    raw.episode_return, t.episode_return
                ),
            ));
        }
        trajs.push(t);
    }
    if trajs.len() != manifest.n_trajectories {
        return Err(corrupt(
            trajs.len() + 1,
            format!(
                "manifest declares {} trajectories, found {}; last good line {}",
                manifest.n_trajectories,
                trajs.len(),
                trajs.len() + 1
            ),
        ));
    }
    let total: usize = trajs.iter().map(Trajectory::len).sum();
    if total != manifest.total_timesteps {
        return Err(corrupt(
            1,
            format!(
                "manifest declares {} timesteps, found {total}",
                manifest.total_timesteps
            ),
        ));
    }
    TrajectoryDataset::new(manifest, trajs)
}

/// Loads a dataset and checks that it was generated for `expected`.
pub fn load_dataset_for(path: &Path, expected: &EnvConfig) -> Result<TrajectoryDataset> {
    let ds = load_dataset(path)?;
    if &ds.manifest.env != expected {
        return Err(Error::Schema(format!(
            "dataset {} was generated for {:?}, expected {:?}",
            path.display(),
            ds.manifest.env,
            expected
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{GraphConfig, KeyToDoorConfig};
    use proptest::prelude::*;

    fn toy(returns_and_lengths: &[(f64, usize)]) -> TrajectoryDataset {
        let trajs = returns_and_lengths
            .iter()
            .enumerate()
            .map(|(i, &(ret, len))| {
                let mut rewards = vec![0.0; len];
                rewards[len - 1] = ret;
                Trajectory::new(
                    vec![vec![i as f64]; len],
                    vec![0; len],
                    rewards,
                    i as u64,
                    "toy",
                )
                .unwrap()
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            env: EnvConfig::Graph(GraphConfig::default()),
            n_trajectories: 0,
            total_timesteps: 0,
            generation_seed: 0,
            policy: "toy".into(),
            delayed_rewards: false,
        };
        TrajectoryDataset::new(manifest, trajs).unwrap()
    }

    #[test]
    fn graph_collection_matches_declared_size_and_is_deterministic() {
        let env = EnvConfig::Graph(GraphConfig::default());
        let a = collect_random_trajectories(&env, 1000, 4).unwrap();
        assert_eq!(a.len(), 1000);
        assert!(a
            .trajectories
            .iter()
            .all(|t| t.len() <= 10 && !t.is_empty()));
        assert_eq!(
            a.total_timesteps(),
            a.trajectories.iter().map(Trajectory::len).sum::<usize>()
        );
        let b = collect_random_trajectories(&env, 1000, 4).unwrap();
        assert_eq!(a, b);
        assert!(collect_random_trajectories(&env, 0, 4).is_err());
    }

    #[test]
    fn trajectory_invariants() {
        let env = EnvConfig::KeyToDoor(KeyToDoorConfig::default());
        let ds = collect_random_trajectories(&env, 50, 1).unwrap();
        for t in &ds.trajectories {
            assert_eq!(t.episode_return, t.rewards.iter().sum::<f64>());
            assert_eq!(t.episode_return, t.returns_to_go[0]);
            assert!(t.episode_return == 0.0 || t.episode_return == 1.0);
        }
    }

    #[test]
    fn percentile_identity_and_best_episode() {
        let ds = toy(&(1..=10).map(|r| (r as f64, 4)).collect::<Vec<_>>());
        assert_eq!(
            filter_top_percentile(&ds, 100.0).unwrap().trajectories,
            ds.trajectories
        );
        let top = filter_top_percentile(&ds, 10.0).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top.trajectories[0].episode_return, 10.0);
        let tiny = filter_top_percentile(&ds, 1e-9).unwrap();
        assert_eq!(tiny.len(), 1);
        assert_eq!(tiny.trajectories[0].episode_return, 10.0);
        assert!(filter_top_percentile(&ds, 0.0).is_err());
        assert!(filter_top_percentile(&ds, 101.0).is_err());
    }

    #[test]
    fn percentile_ties_follow_dataset_order() {
        let ds = toy(&[(1.0, 2), (5.0, 2), (5.0, 2), (0.0, 2)]);
        let top = filter_top_percentile(&ds, 25.0).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top.trajectories[0].env_seed, 1);
    }

    proptest! {
        #[test]
        fn percentile_keeps_a_return_prefix(
            eps in prop::collection::vec((-5i32..5, 1usize..6), 1..15),
            x in 1u32..=100,
        ) {
            let ds = toy(&eps.iter().map(|&(r, l)| (r as f64, l)).collect::<Vec<_>>());
            let out = filter_top_percentile(&ds, x as f64).unwrap();
            let kept: std::collections::HashSet<u64> = out.trajectories.iter().map(|t| t.env_seed).collect();
            let min_kept = out.trajectories.iter().map(|t| t.episode_return).fold(f64::INFINITY, f64::min);
            let max_dropped = ds.trajectories.iter().filter(|t| !kept.contains(&t.env_seed))
                .map(|t| t.episode_return).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_kept >= max_dropped);
            let target = (x as f64 / 100.0 * ds.total_timesteps() as f64).ceil() as usize;
            prop_assert!(out.total_timesteps() >= target);
        }

        #[test]
        fn windows_are_valid_suffixes(k in 1usize..6, seed in 0u64..1000) {
            let ds = toy(&[(1.0, 3), (2.0, 1), (3.0, 7)]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for w in sample_windows(&ds, k, 8, &mut rng).unwrap() {
                prop_assert_eq!(w.len(), k);
                let f = w.first_valid();
                prop_assert!(w.valid[f..].iter().all(|&v| v));
                prop_assert!(f == 0 || w.timesteps[f] == 0);
            }
        }
    }

    #[test]
    fn window_boundaries() {
        let ds = toy(&[(1.0, 5)]);
        let t = &ds.trajectories[0];
        assert_eq!(t.window(0, 1).valid, vec![true]);
        assert_eq!(t.window(4, 3).valid, vec![true; 3]);
        assert_eq!(t.window(4, 3).timesteps, vec![2, 3, 4]);
        let w = t.window(0, 4);
        assert_eq!(w.valid, vec![false, false, false, true]);
        assert_eq!(w.returns_to_go[3], 1.0);
    }

    #[test]
    fn sampling_is_uniform_over_timesteps() {
        // 10 timesteps in three episodes; chi-square with 9 dof at p = 0.01
        let ds = toy(&[(0.0, 2), (0.0, 3), (0.0, 5)]);
        let mut counts = [0usize; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        for w in sample_windows(&ds, 1, draws, &mut rng).unwrap() {
            let episode = w.states[0][0] as usize;
            counts[ds.cumulative[episode] + w.timesteps[0]] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let env = EnvConfig::Graph(GraphConfig::default());
        let ds = collect_random_trajectories(&env, 30, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.djsonl");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.trajectories.iter().zip(&ds.trajectories) {
            for (x, y) in a.rewards.iter().zip(&b.rewards) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let other = EnvConfig::KeyToDoor(KeyToDoorConfig::default());
        assert!(matches!(
            load_dataset_for(&path, &other),
            Err(Error::Schema(_))
        ));
        assert!(load_dataset_for(&path, &env).is_ok());
    }

    #[test]
    fn truncated_file_names_last_good_line() {
        let env = EnvConfig::Graph(GraphConfig::default());
        let ds = collect_random_trajectories(&env, 5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.djsonl");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 20];
        std::fs::write(&path, cut).unwrap();
        match load_dataset(&path) {
            Err(Error::CorruptDataset { line, reason }) => {
                assert_eq!(line, 6);
                assert!(reason.contains("last good line 5"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        // drop a whole line
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(&path, lines[..4].join("\n")).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::CorruptDataset { .. })
        ));
        // wrong version
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(load_dataset(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn delayed_dataset_moves_rewards_to_the_end() {
        let env = EnvConfig::Graph(GraphConfig::default());
        let ds = collect_random_trajectories(&env, 20, 3).unwrap();
        let d = ds.with_delayed_rewards().unwrap();
        for (a, b) in ds.trajectories.iter().zip(&d.trajectories) {
            assert_eq!(a.episode_return, b.episode_return);
            assert!(b.returns_to_go.iter().all(|&g| g == b.episode_return));
        }
        assert!(d.manifest.delayed_rewards);
    }
}
