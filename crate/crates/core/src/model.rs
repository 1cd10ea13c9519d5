//! The trajectory transformer: interleaved (return-to-go, state, action)
//! tokens with a per-timestep positional embedding, an action head read at
//! state tokens and an optional return head for critic use.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gpt::{AttentionTrace, ForwardOptions, Gpt, GptConfig, Linear, Norm, INIT_STD};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete {
        n: usize,
    },
    /// `bounded` squashes the head output with `tanh`.
    Continuous {
        dim: usize,
        bounded: bool,
    },
}

impl ActionSpace {
    pub fn output_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete { n } => n,
            ActionSpace::Continuous { dim, .. } => dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedNorm {
    LayerNorm,
    Tanh,
}

/// Token layout. `StateAction` drops return tokens altogether and is what the
/// behavior-cloning baselines train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    ReturnToGo,
    StateAction,
}

impl Conditioning {
    pub fn tokens_per_step(self) -> usize {
        match self {
            Conditioning::ReturnToGo => 3,
            Conditioning::StateAction => 2,
        }
    }
}

/// Whether return-to-go tokens carry their values. `Hidden` feeds zeros so
/// the return head cannot read the episode outcome off earlier return
/// tokens; used when the model acts as a critic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnInputs {
    #[default]
    Given,
    Hidden,
}

/// Integer return values `min..=max`, one class each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnBins {
    pub min: i64,
    pub max: i64,
}

impl ReturnBins {
    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.max < self.min
    }

    pub fn bin(&self, value: f64) -> Result<usize> {
        let r = value.round();
        if (value - r).abs() > 1e-9 || r < self.min as f64 || r > self.max as f64 {
            return Err(Error::Binning {
                value,
                min: self.min,
                max: self.max,
            });
        }
        Ok((r as i64 - self.min) as usize)
    }

    pub fn value(&self, bin: usize) -> f64 {
        (self.min + bin as i64) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtConfig {
    pub context_k: usize,
    pub max_episode_len: usize,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub gpt: GptConfig,
    pub embed_norm: EmbedNorm,
    pub conditioning: Conditioning,
    pub predict_returns: Option<ReturnBins>,
    /// Returns-to-go are divided by this before embedding.
    pub return_scale: f64,
    #[serde(default)]
    pub return_inputs: ReturnInputs,
}

impl DtConfig {
    /// Tokens needed for a full window, including the start token in critic
    /// mode.
    pub fn tokens_needed(&self) -> usize {
        self.conditioning.tokens_per_step() * self.context_k
            + usize::from(self.predict_returns.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        self.gpt.validate()?;
        if self.context_k == 0 || self.max_episode_len == 0 || self.state_dim == 0 {
            return Err(Error::Config(
                "context_k, max_episode_len and state_dim must be positive".into(),
            ));
        }
        if self.action_space.output_dim() == 0 {
            return Err(Error::Config("action space must be non-empty".into()));
        }
        if self.gpt.max_tokens < self.tokens_needed() {
            return Err(Error::Config(format!(
                "gpt.max_tokens {} < {} tokens for K = {}",
                self.gpt.max_tokens,
                self.tokens_needed(),
                self.context_k
            )));
        }
        if self.predict_returns.is_some() && self.conditioning == Conditioning::StateAction {
            return Err(Error::Config(
                "return prediction needs return-to-go tokens".into(),
            ));
        }
        if let Some(b) = self.predict_returns {
            if b.is_empty() {
                return Err(Error::Config("empty return bins".into()));
            }
        }
        if !(self.return_scale > 0.0) {
            return Err(Error::Config("return_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Suffix sums of `rewards`: `R̂ₜ = Σ_{t' ≥ t} r_{t'}`.
pub fn compute_returns_to_go(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum WindowActions {
    Discrete(Vec<usize>),
    Continuous(Vec<Vec<f64>>),
}

impl WindowActions {
    pub fn len(&self) -> usize {
        match self {
            WindowActions::Discrete(a) => a.len(),
            WindowActions::Continuous(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A length-K slice of a trajectory. Padding sits on the left: positions
/// before the first `valid` entry carry placeholder values and are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    pub returns_to_go: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: WindowActions,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TrajectoryWindow {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Index of the first unpadded position (`len()` when fully padded).
    pub fn first_valid(&self) -> usize {
        self.valid
            .iter()
            .position(|&v| v)
            .unwrap_or(self.valid.len())
    }

    pub fn num_valid(&self) -> usize {
        self.len() - self.first_valid()
    }

    pub fn validate(&self, config: &DtConfig) -> Result<()> {
        let k = self.valid.len();
        if self.returns_to_go.len() != k
            || self.states.len() != k
            || self.actions.len() != k
            || self.timesteps.len() != k
        {
            return Err(Error::Window("field lengths differ".into()));
        }
        if k != config.context_k {
            return Err(Error::Window(format!(
                "window length {k} != K {}",
                config.context_k
            )));
        }
        let f = self.first_valid();
        if self.valid[f..].iter().any(|&v| !v) {
            return Err(Error::Window(
                "padding must precede all valid positions".into(),
            ));
        }
        for i in f..k {
            if self.states[i].len() != config.state_dim {
                return Err(Error::Window(format!(
                    "state {i} has {} values, expected {}",
                    self.states[i].len(),
                    config.state_dim
                )));
            }
            if i > f && self.timesteps[i] != self.timesteps[i - 1] + 1 {
                return Err(Error::Window("timesteps must increase by one".into()));
            }
            if self.timesteps[i] >= config.max_episode_len {
                return Err(Error::TimestepOutOfRange {
                    timestep: self.timesteps[i],
                    len: config.max_episode_len,
                });
            }
        }
        match (&self.actions, &config.action_space) {
            (WindowActions::Discrete(a), ActionSpace::Discrete { n }) => {
                if let Some(&bad) = a[f..].iter().find(|&&x| x >= *n) {
                    return Err(Error::ActionOutOfRange { action: bad, n: *n });
                }
            }
            (WindowActions::Continuous(a), ActionSpace::Continuous { dim, .. }) => {
                if a[f..].iter().any(|x| x.len() != *dim) {
                    return Err(Error::Window(
                        "continuous action has wrong dimension".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::Window(
                    "action kind does not match the action space".into(),
                ))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum ActionEmbed {
    Table(ParamId),
    Linear(Linear),
}

/// Tape-level forward result for a batch of windows. Rows cover only the
/// unpadded suffix of each window, stacked window after window; window `b`
/// contributes `steps[b]` rows starting at its position `first_valid[b]`.
pub struct TapeOutput {
    pub first_valid: Vec<usize>,
    pub steps: Vec<usize>,
    pub actions: Var,
    pub returns: Option<Var>,
    pub traces: Option<Vec<AttentionTrace>>,
}

/// Forward result with one row per window position; padded rows are zero.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub actions: Tensor,
    pub returns: Option<Tensor>,
    pub trace: Option<AttentionTrace>,
}

#[derive(Clone, Debug)]
pub struct DecisionTransformer {
    pub config: DtConfig,
    pub params: ParamStore,
    gpt: Gpt,
    embed_return: Linear,
    embed_state: Linear,
    embed_action: ActionEmbed,
    embed_timestep: ParamId,
    embed_ln: Option<Norm>,
    start_token: Option<ParamId>,
    head_action: Linear,
    head_return: Option<Linear>,
}

impl DecisionTransformer {
    /// Builds a freshly initialized model; initialization depends only on
    /// `config` and `seed`.
    pub fn new(config: DtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.gpt.d_model;
        let embed_timestep = store.add_normal(
            "embed_timestep",
            &[config.max_episode_len, d],
            INIT_STD,
            &mut rng,
        );
        let embed_return = Linear::new(&mut store, "embed_return", 1, d, &mut rng);
        let embed_state = Linear::new(&mut store, "embed_state", config.state_dim, d, &mut rng);
        let embed_action = match config.action_space {
            ActionSpace::Discrete { n } => {
                ActionEmbed::Table(store.add_normal("embed_action", &[n, d], INIT_STD, &mut rng))
            }
            ActionSpace::Continuous { dim, .. } => {
                ActionEmbed::Linear(Linear::new(&mut store, "embed_action", dim, d, &mut rng))
            }
        };
        let embed_ln = (config.embed_norm == EmbedNorm::LayerNorm)
            .then(|| Norm::new(&mut store, "embed_ln", d));
        let start_token = config
            .predict_returns
            .map(|_| store.add_normal("start_token", &[1, d], INIT_STD, &mut rng));
        let gpt = Gpt::new(config.gpt.clone(), &mut store, "gpt", &mut rng)?;
        let head_action = Linear::new(
            &mut store,
            "head_action",
            d,
            config.action_space.output_dim(),
            &mut rng,
        );
        let head_return = config
            .predict_returns
            .map(|b| Linear::new(&mut store, "head_return", d, b.len(), &mut rng));
        Ok(Self {
            config,
            params: store,
            gpt,
            embed_return,
            embed_state,
            embed_action,
            embed_timestep,
            embed_ln,
            start_token,
            head_action,
            head_return,
        })
    }

    /// Token embeddings of the unpadded suffixes before normalization:
    /// `[(R̂ᵢ), sᵢ, aᵢ]` per step, each plus the embedding of timestep `tᵢ`,
    /// with the windows stacked one after another.
    fn raw_tokens(&self, tape: &mut Tape, p: &Bound, windows: &[&TrajectoryWindow]) -> Result<Var> {
        let mut timesteps = Vec::new();
        let mut states = Vec::new();
        let mut returns = Vec::new();
        let mut discrete = Vec::new();
        let mut continuous = Vec::new();
        for w in windows {
            w.validate(&self.config)?;
            let f = w.first_valid();
            if f == w.len() {
                return Err(Error::Window("window has no valid positions".into()));
            }
            timesteps.extend_from_slice(&w.timesteps[f..]);
            states.extend_from_slice(&w.states[f..]);
            returns.extend(
                w.returns_to_go[f..]
                    .iter()
                    .map(|x| x / self.config.return_scale),
            );
            match (&self.embed_action, &w.actions) {
                (ActionEmbed::Table(_), WindowActions::Discrete(a)) => {
                    discrete.extend_from_slice(&a[f..])
                }
                (ActionEmbed::Linear(_), WindowActions::Continuous(a)) => {
                    continuous.extend_from_slice(&a[f..])
                }
                _ => {
                    return Err(Error::Window(
                        "action kind does not match the action space".into(),
                    ))
                }
            }
        }
        let n = timesteps.len();
        let t_emb = tape.gather(p.var(self.embed_timestep), &timesteps)?;

        let s = tape.constant(Tensor::from_rows(&states)?);
        let s = self.embed_state.forward(tape, p, s)?;
        let s = tape.add(s, t_emb)?;

        let a = match &self.embed_action {
            ActionEmbed::Table(table) => tape.gather(p.var(*table), &discrete)?,
            ActionEmbed::Linear(lin) => {
                let a = tape.constant(Tensor::from_rows(&continuous)?);
                lin.forward(tape, p, a)?
            }
        };
        let a = tape.add(a, t_emb)?;

        match self.config.conditioning {
            Conditioning::ReturnToGo => {
                if self.config.return_inputs == ReturnInputs::Hidden {
                    returns.fill(0.0);
                }
                let r = tape.constant(Tensor::new(vec![n, 1], returns)?);
                let r = self.embed_return.forward(tape, p, r)?;
                let r = tape.add(r, t_emb)?;
                tape.interleave_rows(&[r, s, a])
            }
            Conditioning::StateAction => tape.interleave_rows(&[s, a]),
        }
    }

    fn normalize(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match &self.embed_ln {
            Some(norm) => norm.forward(tape, p, x),
            None => tape.tanh(x),
        }
    }

    /// Token matrix `[tokens_per_step·K, d_model]` after the embedding
    /// normalization; padded positions are zero rows.
    pub fn tokenize_window(&self, w: &TrajectoryWindow) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape);
        let raw = self.raw_tokens(&mut tape, &p, &[w])?;
        let x = self.normalize(&mut tape, &p, raw)?;
        let per = self.config.conditioning.tokens_per_step();
        Ok(pad_rows(
            tape.value(x),
            per * w.first_valid(),
            per * w.len(),
        ))
    }

    /// Token positions (relative to the first token of the window body)
    /// whose hidden states feed the action head.
    pub fn action_token_indices(&self, steps: usize) -> Vec<usize> {
        let per = self.config.conditioning.tokens_per_step();
        let state_offset = per - 2;
        (0..steps).map(|i| per * i + state_offset).collect()
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        w: &TrajectoryWindow,
        opts: &mut ForwardOptions,
    ) -> Result<TapeOutput> {
        self.forward_batch(tape, p, &[w], opts)
    }

    /// One pass over several windows; each window is its own attention
    /// segment, so the result equals separate forwards.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        windows: &[&TrajectoryWindow],
        opts: &mut ForwardOptions,
    ) -> Result<TapeOutput> {
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let raw = self.raw_tokens(tape, p, windows)?;
        let mut x = self.normalize(tape, p, raw)?;
        let per = self.config.conditioning.tokens_per_step();
        let off = usize::from(self.start_token.is_some());
        let steps: Vec<usize> = windows.iter().map(|w| w.num_valid()).collect();

        let mut segments = Vec::with_capacity(windows.len());
        let mut pos = 0;
        for &v in &steps {
            segments.push((pos, off + per * v));
            pos += off + per * v;
        }
        if let Some(start) = self.start_token {
            // row 0 is the start token, body token j of the stack is row 1 + j
            let stacked = tape.concat_rows(&[p.var(start), x])?;
            let mut idx = Vec::with_capacity(pos);
            let mut body = 1;
            for &v in &steps {
                idx.push(0);
                idx.extend(body..body + per * v);
                body += per * v;
            }
            x = tape.select_rows(stacked, &idx)?;
        }
        let (h, traces) = self.gpt.forward_packed(tape, p, x, &segments, opts)?;

        let mut aidx = Vec::new();
        let mut ridx = Vec::new();
        for (&(s, _), &v) in segments.iter().zip(&steps) {
            aidx.extend(
                self.action_token_indices(v)
                    .into_iter()
                    .map(|i| s + off + i),
            );
            // R̂ᵢ is read from the token just before it: the start token for
            // the first step, the previous action token afterwards.
            ridx.extend((0..v).map(|i| if i == 0 { s } else { s + off + 3 * i - 1 }));
        }
        let ha = tape.select_rows(h, &aidx)?;
        let mut actions = self.head_action.forward(tape, p, ha)?;
        if let ActionSpace::Continuous { bounded: true, .. } = self.config.action_space {
            actions = tape.tanh(actions)?;
        }
        let returns = match &self.head_return {
            Some(head) => {
                let hr = tape.select_rows(h, &ridx)?;
                Some(head.forward(tape, p, hr)?)
            }
            None => None,
        };
        Ok(TapeOutput {
            first_valid: windows.iter().map(|w| w.first_valid()).collect(),
            steps,
            actions,
            returns,
            traces,
        })
    }

    /// Evaluation-mode forward without gradient tracking.
    pub fn predict(&self, w: &TrajectoryWindow, trace: bool) -> Result<Prediction> {
        Ok(self.predict_batch(&[w], trace)?.swap_remove(0))
    }

    /// [`Self::predict`] for several windows in one pass.
    pub fn predict_batch(
        &self,
        windows: &[&TrajectoryWindow],
        trace: bool,
    ) -> Result<Vec<Prediction>> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape);
        let mut opts = ForwardOptions {
            dropout_rng: None,
            trace,
        };
        let out = self.forward_batch(&mut tape, &p, windows, &mut opts)?;
        let mut traces = out
            .traces
            .map(|t| t.into_iter().map(Some).collect::<Vec<_>>());
        let mut row = 0;
        let mut preds = Vec::with_capacity(windows.len());
        for (b, w) in windows.iter().enumerate() {
            let (f, v) = (out.first_valid[b], out.steps[b]);
            let take = |var: Var| pad_rows(&slice_rows(tape.value(var), row, v), f, w.len());
            preds.push(Prediction {
                actions: take(out.actions),
                returns: out.returns.map(take),
                trace: traces.as_mut().and_then(|t| t[b].take()),
            });
            row += v;
        }
        Ok(preds)
    }

    /// Dropout rate used by training forwards (evaluation never drops).
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout {rate} outside [0, 1)")));
        }
        self.config.gpt.dropout = rate;
        self.gpt.config.dropout = rate;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }
}

fn slice_rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let d = t.last_dim();
    Tensor::new(
        vec![len, d],
        t.data()[start * d..(start + len) * d].to_vec(),
    )
    .expect("row slice")
}

fn pad_rows(t: &Tensor, offset: usize, total: usize) -> Tensor {
    let d = t.last_dim();
    let mut data = vec![0.0; total * d];
    data[offset * d..offset * d + t.numel()].copy_from_slice(t.data());
    Tensor::new(vec![total, d], data).expect("padded shape")
}

/// Masked mean action loss over a batch: cross-entropy for discrete actions,
/// squared error for continuous ones.
pub fn dt_action_loss(
    tape: &mut Tape,
    out: &TapeOutput,
    windows: &[&TrajectoryWindow],
) -> Result<Var> {
    if windows.is_empty() || out.first_valid.len() != windows.len() {
        return Err(Error::EmptyBatch);
    }
    match &windows[0].actions {
        WindowActions::Discrete(_) => {
            let mut targets = Vec::new();
            for (&f, w) in out.first_valid.iter().zip(windows) {
                let WindowActions::Discrete(a) = &w.actions else {
                    return Err(Error::Window("mixed action kinds in batch".into()));
                };
                targets.extend(a[f..].iter().map(|&x| Some(x)));
            }
            tape.cross_entropy(out.actions, &targets)
        }
        WindowActions::Continuous(_) => {
            let mut rows = Vec::new();
            for (&f, w) in out.first_valid.iter().zip(windows) {
                let WindowActions::Continuous(a) = &w.actions else {
                    return Err(Error::Window("mixed action kinds in batch".into()));
                };
                rows.extend(a[f..].iter().cloned());
            }
            let target = Tensor::from_rows(&rows)?;
            let keep = vec![true; target.numel()];
            tape.mse(out.actions, &target, &keep)
        }
    }
}

/// Masked mean cross-entropy of the return head against binned returns-to-go.
pub fn dt_return_loss(
    tape: &mut Tape,
    bins: ReturnBins,
    out: &TapeOutput,
    windows: &[&TrajectoryWindow],
) -> Result<Var> {
    let r = out
        .returns
        .ok_or_else(|| Error::Config("model has no return head".into()))?;
    if windows.is_empty() || out.first_valid.len() != windows.len() {
        return Err(Error::EmptyBatch);
    }
    let mut targets = Vec::new();
    for (&f, w) in out.first_valid.iter().zip(windows) {
        for &g in &w.returns_to_go[f..] {
            targets.push(Some(bins.bin(g)?));
        }
    }
    tape.cross_entropy(r, &targets)
}
