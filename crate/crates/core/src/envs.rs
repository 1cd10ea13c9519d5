//! The two desk-scale environments: a random directed graph with a goal node
//! and a three-room Key-to-Door gridworld, plus the delayed-reward transform
//! and a BFS distance oracle.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One environment step: the observation after the action, the reward it
/// earned and whether the episode is over.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvTransition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    /// Starts a new episode and returns the first observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<EnvTransition>;
    fn n_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Upper bound on episode length.
    fn max_steps(&self) -> usize;
    /// Action of the data-collection policy in the current state.
    fn behavior_action(&self, rng: &mut ChaCha8Rng) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub n_nodes: usize,
    pub sparsity: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            n_nodes: 20,
            sparsity: 0.1,
            max_steps: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyToDoorConfig {
    pub room_size: usize,
    pub phase_steps: [usize; 3],
    pub observe_key_flag: bool,
}

impl Default for KeyToDoorConfig {
    fn default() -> Self {
        Self {
            room_size: 5,
            phase_steps: [12, 8, 12],
            observe_key_flag: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Graph(GraphConfig),
    KeyToDoor(KeyToDoorConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::Graph(c) => Env::Graph(GraphMDP::generate(c)?),
            EnvConfig::KeyToDoor(c) => Env::KeyToDoor(KeyToDoorEnv::new(c.clone())?),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EnvConfig::Graph(_) => "graph",
            EnvConfig::KeyToDoor(_) => "key_to_door",
        }
    }
}

/// Closed set of environments so callers can hold one without boxing.
#[derive(Clone, Debug)]
pub enum Env {
    Graph(GraphMDP),
    KeyToDoor(KeyToDoorEnv),
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            Env::Graph($e) => $body,
            Env::KeyToDoor($e) => $body,
        }
    };
}

impl Environment for Env {
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        dispatch!(self, e => e.reset(seed))
    }
    fn step(&mut self, action: usize) -> Result<EnvTransition> {
        dispatch!(self, e => e.step(action))
    }
    fn n_actions(&self) -> usize {
        dispatch!(self, e => e.n_actions())
    }
    fn obs_dim(&self) -> usize {
        dispatch!(self, e => e.obs_dim())
    }
    fn max_steps(&self) -> usize {
        dispatch!(self, e => e.max_steps())
    }
    fn behavior_action(&self, rng: &mut ChaCha8Rng) -> usize {
        dispatch!(self, e => e.behavior_action(rng))
    }
}

const GENERATION_RETRIES: u64 = 1000;

/// Random digraph; the agent moves along an edge when it picks an adjacent
/// node and stays put otherwise. Reward −1 per step off the goal, 0 on
/// arrival, which also ends the episode.
#[derive(Clone, Debug)]
pub struct GraphMDP {
    pub n_nodes: usize,
    /// Row-major: `adjacency[i * n + j]` is the edge i → j.
    pub adjacency: Vec<bool>,
    pub goal: usize,
    pub max_steps: usize,
    position: usize,
    t: usize,
    done: bool,
}

impl GraphMDP {
    pub fn generate(config: &GraphConfig) -> Result<Self> {
        let n = config.n_nodes;
        if n < 2 || !(config.sparsity > 0.0 && config.sparsity <= 1.0) || config.max_steps == 0 {
            return Err(Error::Config(format!(
                "graph needs n_nodes ≥ 2, sparsity in (0, 1] and max_steps ≥ 1, got {n}, {}, {}",
                config.sparsity, config.max_steps
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..GENERATION_RETRIES {
            let adjacency: Vec<bool> = (0..n * n)
                .map(|k| k / n != k % n && rng.gen_bool(config.sparsity))
                .collect();
            // any node with an incoming edge is reachable from another node
            let candidates: Vec<usize> = (0..n)
                .filter(|&j| (0..n).any(|i| adjacency[i * n + j]))
                .collect();
            if let Some(&goal) = candidates.choose(&mut rng) {
                return Ok(Self {
                    n_nodes: n,
                    adjacency,
                    goal,
                    max_steps: config.max_steps,
                    position: if goal == 0 { 1 } else { 0 },
                    t: 0,
                    done: false,
                });
            }
        }
        Err(Error::Generation(format!(
            "no reachable goal after {GENERATION_RETRIES} graphs"
        )))
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from * self.n_nodes + to]
    }

    pub fn out_neighbors(&self, node: usize) -> Vec<usize> {
        (0..self.n_nodes)
            .filter(|&j| self.has_edge(node, j))
            .collect()
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn observe(&self, node: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_nodes];
        v[node] = 1.0;
        v
    }

    /// Starts an episode at a chosen node.
    pub fn reset_at(&mut self, start: usize) -> Result<Vec<f64>> {
        if start >= self.n_nodes {
            return Err(Error::ActionOutOfRange {
                action: start,
                n: self.n_nodes,
            });
        }
        self.position = start;
        self.t = 0;
        self.done = start == self.goal;
        Ok(self.observe(start))
    }

    /// Non-goal nodes that have a path to the goal.
    pub fn reachable_starts(&self) -> Vec<usize> {
        (0..self.n_nodes)
            .filter(|&s| s != self.goal && shortest_path_oracle(self, s).is_some())
            .collect()
    }
}

impl Environment for GraphMDP {
    /// Uniform start among the non-goal nodes.
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut start = rng.gen_range(0..self.n_nodes - 1);
        if start >= self.goal {
            start += 1;
        }
        self.reset_at(start).expect("start in range")
    }

    fn step(&mut self, action: usize) -> Result<EnvTransition> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action >= self.n_nodes {
            return Err(Error::ActionOutOfRange {
                action,
                n: self.n_nodes,
            });
        }
        if self.has_edge(self.position, action) {
            self.position = action;
        }
        self.t += 1;
        let at_goal = self.position == self.goal;
        self.done = at_goal || self.t >= self.max_steps;
        Ok(EnvTransition {
            state: self.observe(self.position),
            action,
            reward: if at_goal { 0.0 } else { -1.0 },
            done: self.done,
        })
    }

    fn n_actions(&self) -> usize {
        self.n_nodes
    }

    fn obs_dim(&self) -> usize {
        self.n_nodes
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    /// Random walk: a uniformly chosen out-neighbor, or any node when the
    /// current one has no outgoing edges.
    fn behavior_action(&self, rng: &mut ChaCha8Rng) -> usize {
        let next = self.out_neighbors(self.position);
        match next.choose(rng) {
            Some(&j) => j,
            None => rng.gen_range(0..self.n_nodes),
        }
    }
}

/// Breadth-first distance from `start` to the goal.
pub fn shortest_path_oracle(env: &GraphMDP, start: usize) -> Option<usize> {
    let n = env.n_nodes;
    let mut dist = vec![usize::MAX; n];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        if u == env.goal {
            return Some(dist[u]);
        }
        for v in 0..n {
            if env.has_edge(u, v) && dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    None
}

/// Fields recovered from a Key-to-Door observation; `key`/`door` are `None`
/// while absent from view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodedObs {
    pub phase: usize,
    pub agent: (usize, usize),
    pub key: Option<(usize, usize)>,
    pub door: Option<(usize, usize)>,
}

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

/// Three rooms visited in sequence. The key sits somewhere in the first
/// room, the door in the third; the middle room is a distractor. Reaching
/// the door ends the episode with reward 1 only when the key was picked up.
#[derive(Clone, Debug)]
pub struct KeyToDoorEnv {
    pub config: KeyToDoorConfig,
    phase: usize,
    phase_t: usize,
    t: usize,
    agent: (usize, usize),
    key: (usize, usize),
    door: (usize, usize),
    has_key: bool,
    pickup_step: Option<usize>,
    done: bool,
}

impl KeyToDoorEnv {
    pub fn new(config: KeyToDoorConfig) -> Result<Self> {
        if config.room_size < 2 || config.phase_steps.contains(&0) {
            return Err(Error::Config(
                "key_to_door needs room_size ≥ 2 and positive phase budgets".into(),
            ));
        }
        let c = config.room_size / 2;
        let mut env = Self {
            config,
            phase: 0,
            phase_t: 0,
            t: 0,
            agent: (c, c),
            key: (0, 0),
            door: (0, 0),
            has_key: false,
            pickup_step: None,
            done: false,
        };
        env.reset(0);
        Ok(env)
    }

    fn center(&self) -> (usize, usize) {
        let c = self.config.room_size / 2;
        (c, c)
    }

    fn cell(&self, p: (usize, usize)) -> usize {
        p.0 * self.config.room_size + p.1
    }

    fn random_non_center(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let n = self.config.room_size;
        let cells = n * n;
        let center = self.cell(self.center());
        let mut k = rng.gen_range(0..cells - 1);
        if k >= center {
            k += 1;
        }
        (k / n, k % n)
    }

    /// Phase index 0..3.
    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    pub fn key_position(&self) -> (usize, usize) {
        self.key
    }

    pub fn door_position(&self) -> (usize, usize) {
        self.door
    }

    pub fn agent_position(&self) -> (usize, usize) {
        self.agent
    }

    /// Index of the observation in which the agent stands on the key.
    pub fn pickup_step(&self) -> Option<usize> {
        self.pickup_step
    }

    /// Whether the agent reached the door (with or without the key).
    pub fn reached_door(&self) -> bool {
        self.phase == 2 && self.agent == self.door
    }

    pub fn observe(&self) -> Vec<f64> {
        let cells = self.config.room_size * self.config.room_size;
        let mut v = vec![0.0; self.obs_dim()];
        v[self.phase] = 1.0;
        v[3 + self.cell(self.agent)] = 1.0;
        let key_base = 3 + cells;
        let key_slot = if self.phase == 0 && !self.has_key {
            self.cell(self.key)
        } else {
            cells
        };
        v[key_base + key_slot] = 1.0;
        let door_base = key_base + cells + 1;
        let door_slot = if self.phase == 2 {
            self.cell(self.door)
        } else {
            cells
        };
        v[door_base + door_slot] = 1.0;
        if self.config.observe_key_flag {
            v[door_base + cells + 1] = f64::from(u8::from(self.has_key));
        }
        v
    }

    /// Inverse of [`observe`](Self::observe) for the one-hot fields.
    pub fn decode(config: &KeyToDoorConfig, obs: &[f64]) -> DecodedObs {
        let cells = config.room_size * config.room_size;
        let hot = |from: usize, len: usize| obs[from..from + len].iter().position(|&v| v > 0.5);
        let key_base = 3 + cells;
        let door_base = key_base + cells + 1;
        let pos = |c: usize| (c / config.room_size, c % config.room_size);
        DecodedObs {
            phase: hot(0, 3).unwrap_or(0),
            agent: pos(hot(3, cells).unwrap_or(0)),
            key: hot(key_base, cells).map(pos),
            door: hot(door_base, cells).map(pos),
        }
    }

    /// Grid move with wall clipping.
    pub fn moved(&self, from: (usize, usize), action: usize) -> (usize, usize) {
        let last = self.config.room_size - 1;
        let (r, c) = from;
        match action {
            UP => (r.saturating_sub(1), c),
            DOWN => ((r + 1).min(last), c),
            LEFT => (r, c.saturating_sub(1)),
            _ => (r, (c + 1).min(last)),
        }
    }

    /// Greedy walk to the key, then to the door: succeeds in every episode.
    pub fn scripted_action(&self) -> usize {
        let target = match self.phase {
            0 if !self.has_key => self.key,
            2 => self.door,
            _ => return UP,
        };
        let (r, c) = self.agent;
        if r > target.0 {
            UP
        } else if r < target.0 {
            DOWN
        } else if c > target.1 {
            LEFT
        } else {
            RIGHT
        }
    }
}

impl Environment for KeyToDoorEnv {
    /// Places the key and door uniformly on non-center cells.
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.key = self.random_non_center(&mut rng);
        self.door = self.random_non_center(&mut rng);
        self.phase = 0;
        self.phase_t = 0;
        self.t = 0;
        self.agent = self.center();
        self.has_key = false;
        self.pickup_step = None;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<EnvTransition> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action >= 4 {
            return Err(Error::ActionOutOfRange { action, n: 4 });
        }
        self.agent = self.moved(self.agent, action);
        self.t += 1;
        self.phase_t += 1;
        let mut reward = 0.0;
        if self.phase == 0 && !self.has_key && self.agent == self.key {
            self.has_key = true;
            self.pickup_step = Some(self.t);
        }
        if self.phase == 2 && self.agent == self.door {
            self.done = true;
            reward = f64::from(u8::from(self.has_key));
        } else if self.phase_t >= self.config.phase_steps[self.phase] {
            if self.phase == 2 {
                self.done = true;
            } else {
                self.phase += 1;
                self.phase_t = 0;
                self.agent = self.center();
            }
        }
        Ok(EnvTransition {
            state: self.observe(),
            action,
            reward,
            done: self.done,
        })
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn obs_dim(&self) -> usize {
        let cells = self.config.room_size * self.config.room_size;
        3 + cells + 2 * (cells + 1) + usize::from(self.config.observe_key_flag)
    }

    fn max_steps(&self) -> usize {
        self.config.phase_steps.iter().sum()
    }

    fn behavior_action(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(0..4)
    }
}

/// Moves the whole episode return onto the final step.
pub fn delay_returns(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    if let Some(last) = out.last_mut() {
        *last = rewards.iter().sum();
    }
    out
}
