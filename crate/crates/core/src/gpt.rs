//! Causally masked pre-norm transformer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_tokens: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl GptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_tokens < 3 {
            return Err(Error::Config("max_tokens must be at least 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_normal(&format!("{name}.weight"), &[d_in, d_out], INIT_STD, rng),
            bias: store.add_const(&format!("{name}.bias"), &[d_out], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_const(&format!("{name}.gain"), &[d], 1.0),
            bias: store.add_const(&format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln_mlp: Norm,
    pub fc: Linear,
    pub proj: Linear,
}

/// Attention matrices of one forward pass, indexed `[layer][head]`, each
/// `n_tokens × n_tokens` and lower triangular.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Tensor>>,
}

/// Per-call forward switches. Dropout is active only when an RNG is supplied.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub trace: bool,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn traced() -> Self {
        Self {
            dropout_rng: None,
            trace: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gpt {
    pub config: GptConfig,
    pub blocks: Vec<Block>,
    pub ln_final: Norm,
}

impl Gpt {
    pub fn new<R: Rng>(
        config: GptConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.h{l}.{s}");
                Block {
                    ln_attn: Norm::new(store, &n("ln_attn"), d),
                    query: Linear::new(store, &n("attn.query"), d, d, rng),
                    key: Linear::new(store, &n("attn.key"), d, d, rng),
                    value: Linear::new(store, &n("attn.value"), d, d, rng),
                    out: Linear::new(store, &n("attn.out"), d, d, rng),
                    ln_mlp: Norm::new(store, &n("ln_mlp"), d),
                    fc: Linear::new(store, &n("mlp.fc"), d, 4 * d, rng),
                    proj: Linear::new(store, &n("mlp.proj"), 4 * d, d, rng),
                }
            })
            .collect();
        let ln_final = Norm::new(store, &format!("{prefix}.ln_final"), d);
        Ok(Self {
            config,
            blocks,
            ln_final,
        })
    }

    fn check_segments(&self, tape: &Tape, x: Var, segments: &[(usize, usize)]) -> Result<()> {
        if let Some(&(_, len)) = segments.iter().find(|s| s.1 > self.config.max_tokens) {
            return Err(Error::ContextOverflow(len, self.config.max_tokens));
        }
        let n = tape.value(x).rows();
        if segments.iter().map(|s| s.1).sum::<usize>() != n {
            return Err(Error::Window(format!(
                "segments do not cover the {n} token rows"
            )));
        }
        Ok(())
    }

    /// Attention of layer `layer` over packed sequences; returns the attention
    /// matrices `[segment][head]` when tracing.
    fn attention_packed(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        x: Var,
        segments: &[(usize, usize)],
        trace: bool,
    ) -> Result<(Var, Option<Vec<Vec<Tensor>>>)> {
        let blk = &self.blocks[layer];
        let q = blk.query.forward(tape, p, x)?;
        let k = blk.key.forward(tape, p, x)?;
        let v = blk.value.forward(tape, p, x)?;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let att = tape.segment_attention(q, k, v, segments, self.config.n_heads, scale)?;
        let weights = if trace {
            tape.attention_weights(att)
        } else {
            None
        };
        Ok((blk.out.forward(tape, p, att)?, weights))
    }

    /// Multi-head scaled dot-product attention of layer `layer` over the
    /// rows of `x: [T, d_model]`; token `i` sees tokens `0..=i`. The residual
    /// connection is left to the caller.
    pub fn causal_self_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        x: Var,
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Vec<Tensor>)> {
        let t = tape.value(x).rows();
        self.check_segments(tape, x, &[(0, t)])?;
        let (y, w) = self.attention_packed(tape, p, layer, x, &[(0, t)], opts.trace)?;
        Ok((y, w.map(|mut w| w.swap_remove(0)).unwrap_or_default()))
    }

    fn block_packed(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        x: Var,
        segments: &[(usize, usize)],
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Option<Vec<Vec<Tensor>>>)> {
        let blk = &self.blocks[layer];
        let rate = self.config.dropout;
        let h = blk.ln_attn.forward(tape, p, x)?;
        let (a, trace) = self.attention_packed(tape, p, layer, h, segments, opts.trace)?;
        let a = match opts.dropout_rng.as_deref_mut() {
            Some(rng) => tape.dropout(a, rate, rng)?,
            None => a,
        };
        let x = tape.add(x, a)?;
        let h = blk.ln_mlp.forward(tape, p, x)?;
        let h = blk.fc.forward(tape, p, h)?;
        let h = tape.activation(h, self.config.activation)?;
        let h = blk.proj.forward(tape, p, h)?;
        let h = match opts.dropout_rng.as_deref_mut() {
            Some(rng) => tape.dropout(h, rate, rng)?,
            None => h,
        };
        Ok((tape.add(x, h)?, trace))
    }

    /// `x + attn(norm(x))`, then `x + mlp(norm(x))`.
    pub fn transformer_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        x: Var,
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Vec<Tensor>)> {
        let t = tape.value(x).rows();
        self.check_segments(tape, x, &[(0, t)])?;
        let (y, w) = self.block_packed(tape, p, layer, x, &[(0, t)], opts)?;
        Ok((y, w.map(|mut w| w.swap_remove(0)).unwrap_or_default()))
    }

    /// Runs independent sequences stacked row-wise in `x` in one pass.
    /// `segments` are `(start, len)` row ranges tiling `x`; attention never
    /// crosses a segment boundary. Traces are returned per segment.
    pub fn forward_packed(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        segments: &[(usize, usize)],
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Option<Vec<AttentionTrace>>)> {
        self.check_segments(tape, x, segments)?;
        let mut h = x;
        let mut traces = vec![AttentionTrace::default(); segments.len()];
        for l in 0..self.blocks.len() {
            let (next, w) = self.block_packed(tape, p, l, h, segments, opts)?;
            h = next;
            if let Some(w) = w {
                for (t, heads) in traces.iter_mut().zip(w) {
                    t.layers.push(heads);
                }
            }
        }
        let out = self.ln_final.forward(tape, p, h)?;
        Ok((out, opts.trace.then_some(traces)))
    }

    /// Runs every block and the final layer norm over `x: [T, d_model]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Option<AttentionTrace>)> {
        let t = tape.value(x).rows();
        let (h, traces) = self.forward_packed(tape, p, x, &[(0, t)], opts)?;
        Ok((h, traces.map(|mut t| t.swap_remove(0))))
    }
}
