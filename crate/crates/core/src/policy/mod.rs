//! Micro causal transformer policy.
//!
//! Pre-norm decoder with learned absolute positions, RMSNorm, multi-head
//! causal attention and a tanh-GELU MLP of width `4·d`. Everything is `f64`
//! and every reduction runs in ascending index order (see [`forward`]), which
//! makes cached and uncached evaluation bitwise identical.
//!
//! Parameters are stored in one flat buffer; [`Layout`] gives the offset of
//! each tensor in declaration order, which is also the checkpoint order.

mod backward;
pub(crate) mod forward;

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::vocab::Token;

pub use backward::{grad_log_prob, grad_weighted_log_prob};
pub use forward::{
    forward, forward_from, log_prob, log_softmax, sample_action, token_log_probs, Completion, ForwardTrace, KvCache,
};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("sequence of length {len} exceeds context cap {cap}")]
    ContextCap { len: usize, cap: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("token {token} outside vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab: 64, d_model: 16, layers: 2, heads: 2, context_cap: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab == 0 || self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.context_cap == 0 {
            return Err(PolicyError::Config("all dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(PolicyError::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Flat-buffer offsets for every tensor, in declaration order:
/// token embedding `V×d`, position embedding `C×d`, then per block
/// `ln1, wq, wk, wv, wo, ln2, w1 (d×4d), b1, w2 (4d×d), b2`, then the final
/// norm gain and the unembedding `d×V`. Matrices are row-major `in×out`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub ln_f: usize,
    pub unembed: usize,
    pub total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let f = c.mlp_dim();
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let tok_emb = take(c.vocab * d);
        let pos_emb = take(c.context_cap * d);
        let blocks = (0..c.layers)
            .map(|_| BlockLayout {
                ln1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let ln_f = take(d);
        let unembed = take(d * c.vocab);
        Self { tok_emb, pos_emb, blocks, ln_f, unembed, total: off }
    }

    /// Parameter count excluding the position table.
    fn count_without_positions(c: &ModelConfig) -> usize {
        let d = c.d_model;
        let f = c.mlp_dim();
        c.vocab * d + c.layers * (2 * d + 4 * d * d + d * f + f + f * d + d) + d + d * c.vocab
    }
}

/// Initialization scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub embed_std: f64,
    /// Std of the unembedding; small values give a near-uniform initial policy.
    pub unembed_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { embed_std: 0.5, unembed_std: 0.02 }
    }
}

/// Policy weights θ. Also used as the gradient container, since a gradient
/// has exactly the parameter shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

pub type Gradient = PolicyParams;

const CHECKPOINT_MAGIC: u32 = u32::from_le_bytes(*b"ARLP");

impl PolicyParams {
    pub fn zeros(config: ModelConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = config.layout();
        let data = vec![0.0; layout.total];
        Ok(Self { config, layout, data })
    }

    /// Gaussian initialization; gains start at one and biases at zero.
    pub fn init(config: ModelConfig, init: InitConfig, seed_value: u64) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(config)?;
        let mut rng = seed::rng(seed_value);
        let d = config.d_model;
        let f = config.mlp_dim();
        let mut fill = |data: &mut [f64], std: f64| {
            for x in data.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x = z * std;
            }
        };
        let l = p.layout.clone();
        fill(&mut p.data[l.tok_emb..l.tok_emb + config.vocab * d], init.embed_std);
        fill(&mut p.data[l.pos_emb..l.pos_emb + config.context_cap * d], init.embed_std);
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / (2.0 * config.layers as f64).sqrt();
        for b in &l.blocks {
            p.data[b.ln1..b.ln1 + d].fill(1.0);
            p.data[b.ln2..b.ln2 + d].fill(1.0);
            fill(&mut p.data[b.wq..b.wq + d * d], proj);
            fill(&mut p.data[b.wk..b.wk + d * d], proj);
            fill(&mut p.data[b.wv..b.wv + d * d], proj);
            fill(&mut p.data[b.wo..b.wo + d * d], resid);
            fill(&mut p.data[b.w1..b.w1 + d * f], proj);
            fill(&mut p.data[b.w2..b.w2 + f * d], resid / 2.0);
        }
        p.data[l.ln_f..l.ln_f + d].fill(1.0);
        fill(&mut p.data[l.unembed..l.unembed + d * config.vocab], init.unembed_std);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self { config: self.config, layout: self.layout.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self += scale · other`, elementwise in index order.
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn check_tokens(&self, toks: &[Token]) -> Result<(), PolicyError> {
        match toks.iter().find(|t| t.id() >= self.config.vocab) {
            Some(t) => Err(PolicyError::InvalidToken { token: t.0, vocab: self.config.vocab }),
            None => Ok(()),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<(), PolicyError> {
        let c = &self.config;
        for v in [CHECKPOINT_MAGIC, c.vocab as u32, c.d_model as u32, c.layers as u32, c.heads as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint. The header carries `V, d, L, H`; the context cap
    /// is recovered from the payload length (the position table is the only
    /// tensor whose size depends on it).
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self, PolicyError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 20 {
            return Err(PolicyError::Checkpoint("truncated header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if word(0) != CHECKPOINT_MAGIC {
            return Err(PolicyError::Checkpoint("bad magic".into()));
        }
        let (vocab, d_model, layers, heads) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
        let payload = &bytes[20..];
        if payload.len() % 8 != 0 {
            return Err(PolicyError::Checkpoint("payload is not a whole number of f64".into()));
        }
        let floats = payload.len() / 8;
        let mut config = ModelConfig { vocab, d_model, layers, heads, context_cap: 1 };
        config.validate().map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let fixed = Layout::count_without_positions(&config);
        if floats <= fixed || !(floats - fixed).is_multiple_of(d_model) {
            return Err(PolicyError::Checkpoint(format!("payload of {floats} values does not match header")));
        }
        config.context_cap = (floats - fixed) / d_model;
        let mut p = Self::zeros(config)?;
        for (x, chunk) in p.data.iter_mut().zip(payload.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if !p.is_finite() {
            return Err(PolicyError::Checkpoint("non-finite parameter".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let mut f = std::fs::File::open(path)?;
        Self::read_checkpoint(&mut f)
    }
}
