//! A small decoder-only transformer: pre-LN residual blocks, learned position
//! embeddings, untied output head. Everything is f64 and hand-written so the
//! backward pass can be verified coordinate-by-coordinate against finite
//! differences.

mod decode;
mod fdcheck;
mod forward;
mod io;

pub use decode::greedy_decode;
pub use fdcheck::{finite_diff_check, FdReport};
pub use forward::{forward, loss_and_grad, loss_only, GradientSet, LossMask};
pub use io::{load_checkpoint, save_checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.n_layers, "n_layers"),
            (self.d_model, "d_model"),
            (self.n_heads, "n_heads"),
            (self.d_ff, "d_ff"),
            (self.context_len, "context_len"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub scale: Matrix, // 1 x d
    pub shift: Matrix, // 1 x d
}

impl LayerNormParams {
    fn zeros(d: usize) -> Self {
        LayerNormParams { scale: Matrix::zeros(1, d), shift: Matrix::zeros(1, d) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNormParams,
    pub w1: Matrix, // d_model x d_ff
    pub w2: Matrix, // d_ff x d_model
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tok_emb: Matrix, // vocab x d_model
    pub pos_emb: Matrix, // context_len x d_model
    pub blocks: Vec<BlockParams>,
    pub final_ln: LayerNormParams,
    pub head: Matrix, // d_model x vocab
}

impl Parameters {
    /// All-zero parameter tree with the given shape; also the shape of a
    /// gradient accumulator.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1: LayerNormParams::zeros(d),
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                ln2: LayerNormParams::zeros(d),
                w1: Matrix::zeros(d, config.d_ff),
                w2: Matrix::zeros(config.d_ff, d),
            })
            .collect();
        Ok(Parameters {
            config: *config,
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.context_len, d),
            blocks,
            final_ln: LayerNormParams::zeros(d),
            head: Matrix::zeros(d, config.vocab_size),
        })
    }

    /// Gaussian init (std 0.02) for all weight matrices and embeddings; norm
    /// scales start at 1 and shifts at 0. Bitwise deterministic in the seed:
    /// tensors are filled in canonical name order from one ChaCha8 stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for name in params.tensor_names() {
            if name.ends_with(".scale") {
                params.tensor_mut(&name).unwrap().fill(1.0);
            } else if name.ends_with(".shift") {
                // stays zero
            } else {
                let t = params.tensor_mut(&name).unwrap();
                for x in t.data_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        Ok(params)
    }

    /// Canonical tensor order: embeddings, each block's tensors in layer
    /// order, final norm, output head.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.config.n_layers {
            names.push(format!("block{l}.ln1.scale"));
            names.push(format!("block{l}.ln1.shift"));
            names.push(format!("block{l}.attn.Wq"));
            names.push(format!("block{l}.attn.Wk"));
            names.push(format!("block{l}.attn.Wv"));
            names.push(format!("block{l}.attn.Wo"));
            names.push(format!("block{l}.ln2.scale"));
            names.push(format!("block{l}.ln2.shift"));
            names.push(format!("block{l}.ffn.W1"));
            names.push(format!("block{l}.ffn.W2"));
        }
        names.push("final_ln.scale".to_string());
        names.push("final_ln.shift".to_string());
        names.push("head".to_string());
        names
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        match name {
            "tok_emb" => Some(&self.tok_emb),
            "pos_emb" => Some(&self.pos_emb),
            "final_ln.scale" => Some(&self.final_ln.scale),
            "final_ln.shift" => Some(&self.final_ln.shift),
            "head" => Some(&self.head),
            _ => {
                let rest = name.strip_prefix("block")?;
                let dot = rest.find('.')?;
                let layer: usize = rest[..dot].parse().ok()?;
                let block = self.blocks.get(layer)?;
                match &rest[dot + 1..] {
                    "ln1.scale" => Some(&block.ln1.scale),
                    "ln1.shift" => Some(&block.ln1.shift),
                    "attn.Wq" => Some(&block.wq),
                    "attn.Wk" => Some(&block.wk),
                    "attn.Wv" => Some(&block.wv),
                    "attn.Wo" => Some(&block.wo),
                    "ln2.scale" => Some(&block.ln2.scale),
                    "ln2.shift" => Some(&block.ln2.shift),
                    "ffn.W1" => Some(&block.w1),
                    "ffn.W2" => Some(&block.w2),
                    _ => None,
                }
            }
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        match name {
            "tok_emb" => Some(&mut self.tok_emb),
            "pos_emb" => Some(&mut self.pos_emb),
            "final_ln.scale" => Some(&mut self.final_ln.scale),
            "final_ln.shift" => Some(&mut self.final_ln.shift),
            "head" => Some(&mut self.head),
            _ => {
                let rest = name.strip_prefix("block")?;
                let dot = rest.find('.')?;
                let layer: usize = rest[..dot].parse().ok()?;
                let block = self.blocks.get_mut(layer)?;
                match &rest[dot + 1..] {
                    "ln1.scale" => Some(&mut block.ln1.scale),
                    "ln1.shift" => Some(&mut block.ln1.shift),
                    "attn.Wq" => Some(&mut block.wq),
                    "attn.Wk" => Some(&mut block.wk),
                    "attn.Wv" => Some(&mut block.wv),
                    "attn.Wo" => Some(&mut block.wo),
                    "ln2.scale" => Some(&mut block.ln2.scale),
                    "ln2.shift" => Some(&mut block.ln2.shift),
                    "ffn.W1" => Some(&mut block.w1),
                    "ffn.W2" => Some(&mut block.w2),
                    _ => None,
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensor_names()
            .iter()
            .map(|n| self.tensor(n).unwrap().numel())
            .sum()
    }

    pub fn bits_eq(&self, other: &Parameters) -> bool {
        self.config == other.config
            && self
                .tensor_names()
                .iter()
                .all(|n| self.tensor(n).unwrap().bits_eq(other.tensor(n).unwrap()))
    }
}
