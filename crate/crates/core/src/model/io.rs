//! Checkpoints: one container maps tensor names to shapes and row-major f64
//! values, covering base weights and (optionally) adapter factors under
//! `<base>.lora.A` / `<base>.lora.B` names. Two encodings share the layout:
//! JSON (".json", human-inspectable, bit-exact via full-precision floats) and
//! a little-endian binary (".bin") for bulk weights.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::peft::{LoraAdapters, LoraFactors, LoraTarget};

use super::{ModelConfig, Parameters};

const BIN_MAGIC: &[u8; 8] = b"ELFCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorData {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct LoraMeta {
    rank: usize,
    targets: Vec<LoraTarget>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    lora: Option<LoraMeta>,
    tensors: BTreeMap<String, TensorData>,
}

fn to_file(params: &Parameters, adapters: Option<&LoraAdapters>) -> CheckpointFile {
    let mut tensors = BTreeMap::new();
    for name in params.tensor_names() {
        let t = params.tensor(&name).unwrap();
        tensors.insert(name, TensorData { shape: [t.rows(), t.cols()], values: t.data().to_vec() });
    }
    if let Some(ad) = adapters {
        for name in ad.tensor_names() {
            let t = ad.tensor(&name).unwrap();
            tensors.insert(name, TensorData { shape: [t.rows(), t.cols()], values: t.data().to_vec() });
        }
    }
    CheckpointFile {
        config: params.config,
        lora: adapters.map(|a| LoraMeta { rank: a.rank, targets: a.targets.clone() }),
        tensors,
    }
}

fn from_file(mut file: CheckpointFile) -> Result<(Parameters, Option<LoraAdapters>)> {
    let mut params = Parameters::zeros(&file.config)?;
    for name in params.tensor_names() {
        let data = file
            .tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        let dst = params.tensor_mut(&name).unwrap();
        if data.shape != [dst.rows(), dst.cols()] {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                data.shape,
                dst.shape()
            )));
        }
        *dst = Matrix::from_vec(data.shape[0], data.shape[1], data.values);
    }

    let adapters = match file.lora {
        None => None,
        Some(meta) => {
            let mut entries = BTreeMap::new();
            for layer in 0..file.config.n_layers {
                for target in &meta.targets {
                    let base = target.tensor_name(layer);
                    let mut take = |suffix: &str| -> Result<Matrix> {
                        let name = format!("{base}{suffix}");
                        let data = file
                            .tensors
                            .remove(&name)
                            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
                        Ok(Matrix::from_vec(data.shape[0], data.shape[1], data.values))
                    };
                    let a = take(".lora.A")?;
                    let b = take(".lora.B")?;
                    if a.cols() != meta.rank || b.cols() != meta.rank {
                        return Err(Error::Checkpoint(format!(
                            "adapter {base:?} has rank {}, header says {}",
                            a.cols(),
                            meta.rank
                        )));
                    }
                    entries.insert(base, LoraFactors { a, b });
                }
            }
            Some(LoraAdapters { rank: meta.rank, targets: meta.targets, entries })
        }
    };

    if let Some(name) = file.tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name:?}")));
    }
    Ok((params, adapters))
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn write_binary(file: &CheckpointFile, w: &mut impl Write) -> Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        config: &'a ModelConfig,
        lora: &'a Option<LoraMeta>,
        index: Vec<(&'a String, [usize; 2])>,
    }
    let header = Header {
        config: &file.config,
        lora: &file.lora,
        index: file.tensors.iter().map(|(n, t)| (n, t.shape)).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(BIN_MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in file.tensors.values() {
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_binary(r: &mut impl Read) -> Result<CheckpointFile> {
    #[derive(Deserialize)]
    struct Header {
        config: ModelConfig,
        lora: Option<LoraMeta>,
        index: Vec<(String, [usize; 2])>,
    }
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut tensors = BTreeMap::new();
    let mut buf = [0u8; 8];
    for (name, shape) in header.index {
        let mut values = Vec::with_capacity(shape[0] * shape[1]);
        for _ in 0..shape[0] * shape[1] {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        tensors.insert(name, TensorData { shape, values });
    }
    Ok(CheckpointFile { config: header.config, lora: header.lora, tensors })
}

pub fn save_checkpoint(
    params: &Parameters,
    adapters: Option<&LoraAdapters>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = to_file(params, adapters);
    let out = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(out);
    if is_binary(path) {
        write_binary(&file, &mut w)?;
    } else {
        serde_json::to_writer(&mut w, &file)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Parameters, Option<LoraAdapters>)> {
    let path = path.as_ref();
    let input = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(input);
    let file = if is_binary(path) {
        read_binary(&mut r)?
    } else {
        serde_json::from_reader(&mut r)?
    };
    from_file(file)
}
