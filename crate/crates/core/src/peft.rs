//! Parameter-efficient fine-tuning: which tensors may move (full, one block,
//! or low-rank adapters on the attention query/value projections).

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelConfig, Parameters, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Wq,
    Wv,
}

impl LoraTarget {
    pub fn tensor_name(&self, layer: usize) -> String {
        match self {
            LoraTarget::Wq => format!("block{layer}.attn.Wq"),
            LoraTarget::Wv => format!("block{layer}.attn.Wv"),
        }
    }
}

impl std::fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoraTarget::Wq => write!(f, "wq"),
            LoraTarget::Wv => write!(f, "wv"),
        }
    }
}

impl std::str::FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "wq" => Ok(LoraTarget::Wq),
            "wv" => Ok(LoraTarget::Wv),
            other => Err(Error::Invalid(format!("unknown adapter target {other:?} (expected wq|wv)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PeftMode {
    Full,
    Layer { layer: usize },
    Lora { rank: usize, targets: Vec<LoraTarget> },
}

impl PeftMode {
    pub fn lora(rank: usize) -> Self {
        PeftMode::Lora { rank, targets: vec![LoraTarget::Wq, LoraTarget::Wv] }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self {
            PeftMode::Full => Ok(()),
            PeftMode::Layer { layer } => {
                if *layer >= config.n_layers {
                    Err(Error::InvalidConfig(format!(
                        "layer {layer} out of range for a {}-layer model",
                        config.n_layers
                    )))
                } else {
                    Ok(())
                }
            }
            PeftMode::Lora { rank, targets } => {
                if *rank == 0 {
                    return Err(Error::InvalidConfig("adapter rank must be at least 1".into()));
                }
                if targets.is_empty() {
                    return Err(Error::InvalidConfig("adapter target list is empty".into()));
                }
                let unique: BTreeSet<_> = targets.iter().collect();
                if unique.len() != targets.len() {
                    return Err(Error::InvalidConfig("adapter target list repeats an entry".into()));
                }
                Ok(())
            }
        }
    }
}

impl std::fmt::Display for PeftMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PeftMode::Full => write!(f, "full"),
            PeftMode::Layer { layer } => write!(f, "layer{layer}"),
            PeftMode::Lora { rank, targets } => {
                let ts: Vec<String> = targets.iter().map(|t| t.to_string()).collect();
                write!(f, "lora{rank}:{}", ts.join("+"))
            }
        }
    }
}

impl std::str::FromStr for PeftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_lowercase();
        if s == "full" {
            return Ok(PeftMode::Full);
        }
        if let Some(layer) = s.strip_prefix("layer") {
            let layer = layer
                .parse()
                .map_err(|_| Error::Invalid(format!("bad layer index in {s:?}")))?;
            return Ok(PeftMode::Layer { layer });
        }
        if let Some(rest) = s.strip_prefix("lora") {
            let (rank_str, targets_str) = match rest.split_once(':') {
                Some((r, t)) => (r, Some(t)),
                None => (rest, None),
            };
            let rank = rank_str
                .parse()
                .map_err(|_| Error::Invalid(format!("bad adapter rank in {s:?}")))?;
            let targets = match targets_str {
                None => vec![LoraTarget::Wq, LoraTarget::Wv],
                Some(t) => t
                    .split('+')
                    .map(str::parse)
                    .collect::<Result<Vec<LoraTarget>>>()?,
            };
            return Ok(PeftMode::Lora { rank, targets });
        }
        Err(Error::Invalid(format!(
            "unknown fine-tune mode {s:?} (expected full, layer<N>, or lora<R>[:wq+wv])"
        )))
    }
}

/// Low-rank factors for one adapted weight: the effective weight is
/// W0 + A·Bᵀ with A (d1 x p) Gaussian-initialized and B (d2 x p) zero, so a
/// fresh adapter leaves the model's function unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraFactors {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapters {
    pub rank: usize,
    pub targets: Vec<LoraTarget>,
    /// Keyed by the base tensor they adapt, e.g. "block0.attn.Wq".
    pub entries: BTreeMap<String, LoraFactors>,
}

impl LoraAdapters {
    pub fn factors_for(&self, base_tensor: &str) -> Option<&LoraFactors> {
        self.entries.get(base_tensor)
    }

    /// Same tree shape, all zeros — a gradient accumulator.
    pub fn zeros_like(&self) -> LoraAdapters {
        LoraAdapters {
            rank: self.rank,
            targets: self.targets.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, f)| {
                    let (ar, ac) = f.a.shape();
                    let (br, bc) = f.b.shape();
                    (k.clone(), LoraFactors { a: Matrix::zeros(ar, ac), b: Matrix::zeros(br, bc) })
                })
                .collect(),
        }
    }

    /// Resolve an adapter tensor name like "block0.attn.Wq.lora.A".
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        if let Some(base) = name.strip_suffix(".lora.A") {
            self.entries.get(base).map(|f| &f.a)
        } else if let Some(base) = name.strip_suffix(".lora.B") {
            self.entries.get(base).map(|f| &f.b)
        } else {
            None
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if let Some(base) = name.strip_suffix(".lora.A") {
            self.entries.get_mut(base).map(|f| &mut f.a)
        } else if let Some(base) = name.strip_suffix(".lora.B") {
            self.entries.get_mut(base).map(|f| &mut f.b)
        } else {
            None
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.entries.len() * 2);
        for base in self.entries.keys() {
            names.push(format!("{base}.lora.A"));
            names.push(format!("{base}.lora.B"));
        }
        names
    }
}

/// Build fresh adapters for every (block, target) pair. A is N(0, 0.02), B is
/// zero; the adapted model starts exactly equal to the base model.
pub fn attach_lora(
    params: &Parameters,
    rank: usize,
    targets: &[LoraTarget],
    seed: u64,
) -> Result<LoraAdapters> {
    let mode = PeftMode::Lora { rank, targets: targets.to_vec() };
    mode.validate(&params.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut entries = BTreeMap::new();
    for layer in 0..params.config.n_layers {
        for target in targets {
            let base = target.tensor_name(layer);
            let w0 = params.tensor(&base).expect("target exists in every block");
            let (d1, d2) = w0.shape();
            let mut a = Matrix::zeros(d1, rank);
            for x in a.data_mut() {
                *x = normal.sample(&mut rng);
            }
            entries.insert(base, LoraFactors { a, b: Matrix::zeros(d2, rank) });
        }
    }
    Ok(LoraAdapters { rank, targets: targets.to_vec(), entries })
}

/// W0 + A·Bᵀ, for merged export.
pub fn effective_weight(w0: &Matrix, factors: &LoraFactors) -> Result<Matrix> {
    let (d1, d2) = w0.shape();
    if factors.a.rows() != d1 || factors.b.rows() != d2 || factors.a.cols() != factors.b.cols() {
        return Err(Error::Invalid(format!(
            "adapter shapes {:?}/{:?} do not factor a {:?} weight",
            factors.a.shape(),
            factors.b.shape(),
            w0.shape()
        )));
    }
    let mut w = w0.clone();
    w.add_assign(&factors.a.matmul_tb(&factors.b));
    Ok(w)
}

/// Trainable fraction (A and B entries over d1·d2), i.e. p·(d1+d2)/(d1·d2).
pub fn lora_param_ratio(d1: usize, d2: usize, p: usize) -> Result<f64> {
    if d1 == 0 || d2 == 0 || p == 0 {
        return Err(Error::Invalid("dimensions and rank must be positive".into()));
    }
    Ok((p * (d1 + d2)) as f64 / (d1 * d2) as f64)
}

/// The set of tensor names an optimizer may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask(BTreeSet<String>);

impl TrainableMask {
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        TrainableMask(names.into_iter().collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which tensors a fine-tune mode unfreezes. Full: everything. Layer(l): all
/// ten tensors of block l. LoRA: only the adapter factors of the chosen
/// targets in every block — no base tensor at all.
pub fn trainable_mask(mode: &PeftMode, config: &ModelConfig) -> Result<TrainableMask> {
    mode.validate(config)?;
    let names: Vec<String> = match mode {
        PeftMode::Full => {
            let p = Parameters::zeros(config)?;
            p.tensor_names()
        }
        PeftMode::Layer { layer } => {
            let p = Parameters::zeros(config)?;
            let prefix = format!("block{layer}.");
            p.tensor_names()
                .into_iter()
                .filter(|n| n.starts_with(&prefix))
                .collect()
        }
        PeftMode::Lora { targets, .. } => {
            let mut names = Vec::new();
            for layer in 0..config.n_layers {
                for t in targets {
                    let base = t.tensor_name(layer);
                    names.push(format!("{base}.lora.A"));
                    names.push(format!("{base}.lora.B"));
                }
            }
            names
        }
    };
    Ok(TrainableMask::from_names(names))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            context_len: 24,
            vocab_size: 50,
        }
    }

    #[test]
    fn ratio_matches_closed_form_example() {
        assert_eq!(lora_param_ratio(4096, 4096, 16).unwrap(), 0.0078125);
        assert!((lora_param_ratio(16, 16, 4).unwrap() - 0.5).abs() < 1e-15);
        assert!(lora_param_ratio(0, 4, 1).is_err());
    }

    #[test]
    fn full_mask_covers_all_tensors() {
        let c = cfg();
        let m = trainable_mask(&PeftMode::Full, &c).unwrap();
        assert_eq!(m.len(), 2 + 10 * c.n_layers + 3);
        assert!(m.contains("tok_emb"));
        assert!(m.contains("block1.ffn.W2"));
        assert!(m.contains("head"));
    }

    #[test]
    fn layer_mask_is_exactly_one_block() {
        let m = trainable_mask(&PeftMode::Layer { layer: 1 }, &cfg()).unwrap();
        assert_eq!(m.len(), 10);
        assert!(m.iter().all(|n| n.starts_with("block1.")));
        assert!(trainable_mask(&PeftMode::Layer { layer: 2 }, &cfg()).is_err());
    }

    #[test]
    fn lora_mask_is_adapter_factors_only() {
        let m = trainable_mask(&PeftMode::lora(4), &cfg()).unwrap();
        assert_eq!(m.len(), 2 * 2 * 2); // layers x targets x {A,B}
        assert!(m.contains("block0.attn.Wq.lora.A"));
        assert!(m.contains("block1.attn.Wv.lora.B"));
        assert!(!m.contains("block0.attn.Wq"));

        let q_only = PeftMode::Lora { rank: 4, targets: vec![LoraTarget::Wq] };
        let m = trainable_mask(&q_only, &cfg()).unwrap();
        assert_eq!(m.len(), 4);
        assert!(m.iter().all(|n| n.contains("attn.Wq.lora")));
    }

    #[test]
    fn attach_lora_shapes_and_zero_b() {
        let params = Parameters::init(&cfg(), 3).unwrap();
        let ad = attach_lora(&params, 4, &[LoraTarget::Wq, LoraTarget::Wv], 7).unwrap();
        assert_eq!(ad.entries.len(), 4);
        let f = ad.factors_for("block0.attn.Wq").unwrap();
        assert_eq!(f.a.shape(), (16, 4));
        assert_eq!(f.b.shape(), (16, 4));
        assert!(f.b.data().iter().all(|&x| x == 0.0));
        assert!(f.a.data().iter().any(|&x| x != 0.0));
        // fresh adapters leave the effective weight untouched
        let w = effective_weight(&params.blocks[0].wq, f).unwrap();
        assert!(w.bits_eq(&params.blocks[0].wq));
    }

    #[test]
    fn adapter_tensor_names_resolve() {
        let params = Parameters::init(&cfg(), 3).unwrap();
        let ad = attach_lora(&params, 2, &[LoraTarget::Wv], 7).unwrap();
        let names = ad.tensor_names();
        assert_eq!(names.len(), 4);
        for n in &names {
            assert!(ad.tensor(n).is_some());
        }
        assert!(ad.tensor("block0.attn.Wq.lora.A").is_none());
    }

    #[test]
    fn mode_strings_round_trip() {
        for s in ["full", "layer0", "layer3", "lora16:wq+wv", "lora4:wv"] {
            let m: PeftMode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!("lora8".parse::<PeftMode>().unwrap(), PeftMode::lora(8));
        assert!("banana".parse::<PeftMode>().is_err());
    }

    #[test]
    fn mode_validation() {
        let c = cfg();
        assert!(PeftMode::Lora { rank: 0, targets: vec![LoraTarget::Wq] }.validate(&c).is_err());
        assert!(PeftMode::Lora { rank: 2, targets: vec![] }.validate(&c).is_err());
        assert!(PeftMode::Lora { rank: 2, targets: vec![LoraTarget::Wq, LoraTarget::Wq] }
            .validate(&c)
            .is_err());
    }
}
