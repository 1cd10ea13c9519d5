//! Training loop, learning-rate schedule and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{sample_windows, split_seed, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::gpt::ForwardOptions;
use crate::model::{
    dt_action_loss, dt_return_loss, Conditioning, DecisionTransformer, DtConfig, TrajectoryWindow,
};
use crate::optim::{adamw_step, OptimizerState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    WarmupOnly,
    WarmupCosine,
}

/// `Dt` conditions on returns-to-go; `Bc` uses the (s, a) layout and never
/// reads rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Dt,
    Bc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub objective: Objective,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            learning_rate: 1e-4,
            warmup_steps: 1000,
            schedule: Schedule::WarmupCosine,
            grad_clip: 0.25,
            weight_decay: 1e-4,
            dropout: 0.1,
            seed: 0,
            objective: Objective::Dt,
            betas: default_betas(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "warmup_steps must be ≥ 1 and learning_rate > 0".into(),
            ));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "grad_clip must be positive and weight_decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup, then either constant or cosine decay over the remaining
/// steps. Decay never quite reaches zero, so every step still moves.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let warm = config.warmup_steps.max(1);
    if step + 1 < warm {
        return lr * (step + 1) as f64 / warm as f64;
    }
    match config.schedule {
        Schedule::WarmupOnly => lr,
        Schedule::WarmupCosine => {
            let span = config.steps.saturating_sub(warm) + 1;
            let progress =
                ((step + 1 - warm) as f64 / span as f64).min((span - 1) as f64 / span as f64);
            lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub action_loss: f64,
    pub return_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// `(step, metric)` pairs from periodic evaluation.
    pub snapshots: Vec<(usize, f64)>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.steps {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Training state: model, optimizer moments and both RNG streams, so a
/// saved run resumes exactly where it stopped.
pub struct Trainer {
    pub model: DecisionTransformer,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub step: usize,
    pub log: TrainLog,
    sample_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(mut model: DecisionTransformer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let want = match config.objective {
            Objective::Dt => Conditioning::ReturnToGo,
            Objective::Bc => Conditioning::StateAction,
        };
        if model.config.conditioning != want {
            return Err(Error::Config(format!(
                "objective {:?} needs {:?} conditioning, model has {:?}",
                config.objective, want, model.config.conditioning
            )));
        }
        model.set_dropout(config.dropout)?;
        let optimizer = OptimizerState::new(&model.params, config.betas, config.weight_decay);
        Ok(Self {
            sample_rng: ChaCha8Rng::seed_from_u64(split_seed(config.seed, 0)),
            dropout_rng: ChaCha8Rng::seed_from_u64(split_seed(config.seed, 1)),
            model,
            optimizer,
            config,
            step: 0,
            log: TrainLog::default(),
        })
    }

    fn check_dataset(&self, ds: &TrajectoryDataset) -> Result<()> {
        if ds.state_dim() != self.model.config.state_dim {
            return Err(Error::Config(format!(
                "dataset state_dim {} != model state_dim {}",
                ds.state_dim(),
                self.model.config.state_dim
            )));
        }
        Ok(())
    }

    /// Loss of one batch; returns `(total, action, return)` vars.
    fn batch_loss(
        &mut self,
        tape: &mut Tape,
        windows: &[TrajectoryWindow],
    ) -> Result<(crate::params::Bound, crate::autograd::Var, f64, f64)> {
        let p = self.model.params.bind(tape);
        let refs: Vec<&TrajectoryWindow> = windows.iter().collect();
        let mut opts = ForwardOptions {
            dropout_rng: Some(&mut self.dropout_rng),
            trace: false,
        };
        let outs = self.model.forward_batch(tape, &p, &refs, &mut opts)?;
        let la = dt_action_loss(tape, &outs, &refs)?;
        let action = tape.value(la).item();
        let (loss, ret) = match self.model.config.predict_returns {
            Some(bins) => {
                let lr = dt_return_loss(tape, bins, &outs, &refs)?;
                let ret = tape.value(lr).item();
                (tape.add(la, lr)?, ret)
            }
            None => (la, 0.0),
        };
        Ok((p, loss, action, ret))
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn train_step(&mut self, ds: &TrajectoryDataset) -> Result<StepRecord> {
        let windows = sample_windows(
            ds,
            self.model.config.context_k,
            self.config.batch_size,
            &mut self.sample_rng,
        )?;
        self.step_on(&windows)
    }

    /// One optimizer step on the given windows.
    pub fn step_on(&mut self, windows: &[TrajectoryWindow]) -> Result<StepRecord> {
        let mut tape = Tape::new();
        let (p, loss, action_loss, return_loss) = self.batch_loss(&mut tape, windows)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(self.step));
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = self.model.params.collect_grads(&p, &mut grads);
        drop(tape);
        let lr = lr_at(self.step, &self.config);
        let grad_norm = adamw_step(
            &mut self.model.params,
            grads,
            &mut self.optimizer,
            lr,
            self.config.grad_clip,
        )?;
        let rec = StepRecord {
            step: self.step,
            loss: value,
            action_loss,
            return_loss,
            lr,
            grad_norm,
        };
        self.step += 1;
        self.log.steps.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `config.steps`, calling `eval` every `every` steps.
    pub fn run<F>(
        &mut self,
        ds: &TrajectoryDataset,
        every: Option<usize>,
        mut eval: F,
    ) -> Result<()>
    where
        F: FnMut(&DecisionTransformer, usize) -> Result<f64>,
    {
        self.check_dataset(ds)?;
        let start = std::time::Instant::now();
        while self.step < self.config.steps {
            self.train_step(ds)?;
            if let Some(n) = every {
                if n > 0 && self.step.is_multiple_of(n) {
                    let metric = eval(&self.model, self.step)?;
                    self.log.snapshots.push((self.step, metric));
                }
            }
        }
        self.log.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            magic: MAGIC.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            params: named_params(&self.model),
            train: Some(TrainState {
                config: self.config.clone(),
                step: self.step,
                optimizer: self.optimizer.clone(),
                sample_rng: self.sample_rng.clone(),
                dropout_rng: self.dropout_rng.clone(),
                log: self.log.clone(),
            }),
        };
        write_json(path, &ckpt)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let train = ckpt
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        let model = model_from(ckpt.config, ckpt.params)?;
        let mut t = Trainer::new(model, train.config)?;
        if train.optimizer.first_moment.len() != t.model.params.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameters".into(),
            ));
        }
        t.optimizer = train.optimizer;
        t.step = train.step;
        t.sample_rng = train.sample_rng;
        t.dropout_rng = train.dropout_rng;
        t.log = train.log;
        Ok(t)
    }

    pub fn into_parts(self) -> (DecisionTransformer, TrainLog) {
        (self.model, self.log)
    }
}

/// Trains a model from scratch per `config`.
pub fn train(
    model: DecisionTransformer,
    ds: &TrajectoryDataset,
    config: TrainConfig,
) -> Result<(DecisionTransformer, TrainLog)> {
    let mut t = Trainer::new(model, config)?;
    t.run(ds, None, |_, _| Ok(0.0))?;
    Ok(t.into_parts())
}

const MAGIC: &str = "DTCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    step: usize,
    optimizer: OptimizerState,
    sample_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    log: TrainLog,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    magic: String,
    version: u32,
    config: DtConfig,
    params: Vec<NamedTensor>,
    #[serde(default)]
    train: Option<TrainState>,
}

fn named_params(model: &DecisionTransformer) -> Vec<NamedTensor> {
    model
        .params
        .named()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            tensor: t.clone(),
        })
        .collect()
}

fn model_from(config: DtConfig, params: Vec<NamedTensor>) -> Result<DecisionTransformer> {
    let mut model = DecisionTransformer::new(config, 0)?;
    model
        .params
        .load_named(params.into_iter().map(|p| (p.name, p.tensor)).collect())?;
    Ok(model)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, value)?;
    out.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint",
            path.display()
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            ckpt.version
        )));
    }
    Ok(ckpt)
}

/// Saves weights and config only.
pub fn save_model(model: &DecisionTransformer, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        magic: MAGIC.into(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params: named_params(model),
        train: None,
    };
    write_json(path, &ckpt)
}

pub fn load_model(path: &Path) -> Result<DecisionTransformer> {
    let ckpt = read_checkpoint(path)?;
    model_from(ckpt.config, ckpt.params)
}

/// Loads a model and checks its input/output dimensions against `expected`.
pub fn load_model_for(
    path: &Path,
    state_dim: usize,
    n_actions: usize,
) -> Result<DecisionTransformer> {
    let model = load_model(path)?;
    if model.config.state_dim != state_dim {
        return Err(Error::Checkpoint(format!(
            "checkpoint state_dim {} but environment observations have {state_dim}",
            model.config.state_dim
        )));
    }
    if model.config.action_space.output_dim() != n_actions {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} actions but environment has {n_actions}",
            model.config.action_space.output_dim()
        )));
    }
    Ok(model)
}
