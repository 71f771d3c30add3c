//! Self-describing checkpoint files.
//!
//! Layout:
//!
//! | bytes        | content                                      |
//! |--------------|----------------------------------------------|
//! | 8            | magic `CATCKPT\0`                            |
//! | 4            | format version, u32 little-endian (1)        |
//! | 8            | header length `n`, u64 little-endian         |
//! | n            | UTF-8 JSON header ([`Header`])               |
//! | rest         | f32 little-endian payload                    |
//!
//! The payload holds every parameter in header order, then (when
//! `adam.moments` is true) all Adam first moments in the same order, then
//! all second moments. Each header entry gives its element offset into the
//! parameter block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cat_tensor::{AdamState, ParamStore};
use serde::{Deserialize, Serialize};

use crate::config::{AdamSettings, ModelConfig};
use crate::error::{CatError, Result};
use crate::model::CatModel;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"CATCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHeader {
    pub step: u64,
    pub settings: AdamSettings,
    pub moments: bool,
}

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Per-epoch log so far.
    #[serde(default)]
    pub history: Vec<crate::train::EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub params: Vec<ParamEntry>,
    pub adam: Option<AdamHeader>,
    pub progress: Progress,
}

pub struct Checkpoint {
    pub header: Header,
    pub model: CatModel,
    pub store: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

fn ck(msg: impl Into<String>) -> CatError {
    CatError::Checkpoint(msg.into())
}

pub fn save(
    path: &Path,
    model: &CatModel,
    store: &ParamStore<f32>,
    vocab: &Vocab,
    adam: Option<&AdamState<f32>>,
    progress: &Progress,
) -> Result<()> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let moments = adam.is_some_and(|a| a.first_moments().len() == store.len());
    let header = Header {
        config: model.config.clone(),
        vocab: vocab.clone(),
        vocab_hash: vocab.hash(),
        params,
        adam: adam.map(|a| AdamHeader {
            step: a.step_count(),
            settings: AdamSettings {
                lr: a.config.lr,
                beta1: a.config.beta1,
                beta2: a.config.beta2,
                eps: a.config.eps,
            },
            moments,
        }),
        progress: progress.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| CatError::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CatError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut put = |vals: &[f32]| -> Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    };
    for t in store.tensors() {
        put(t.data())?;
    }
    if let (Some(a), true) = (adam, moments) {
        for m in a.first_moments() {
            put(m)?;
        }
        for m in a.second_moments() {
            put(m)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io)
}

/// Reads only the JSON header.
pub fn read_header(path: &Path) -> Result<Header> {
    let file = File::open(path).map_err(|e| CatError::io(path, e))?;
    let mut r = BufReader::new(file);
    read_header_from(path, &mut r)
}

fn read_header_from(path: &Path, r: &mut impl Read) -> Result<Header> {
    let io = |e| CatError::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(ck(format!("{} is not a checkpoint file", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    serde_json::from_slice(&json).map_err(|e| ck(format!("header: {e}")))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| CatError::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header_from(path, &mut r)?;
    if header.vocab.hash() != header.vocab_hash {
        return Err(ck("stored vocabulary does not match its hash"));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| CatError::io(path, e))?;
    if rest.len() % 4 != 0 {
        return Err(ck("payload is not a whole number of f32 values"));
    }
    let payload: Vec<f32> = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let (model, mut store) = CatModel::new(&header.config, header.vocab.len(), 0)?;
    if store.len() != header.params.len() {
        return Err(ck(format!(
            "checkpoint lists {} parameters, configuration builds {}",
            header.params.len(),
            store.len()
        )));
    }
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let moments = header.adam.as_ref().is_some_and(|a| a.moments);
    let expected = if moments { 3 * total } else { total };
    if payload.len() != expected {
        return Err(ck(format!("payload has {} values, expected {expected}", payload.len())));
    }
    let mut order = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let id = store
            .id(&p.name)
            .ok_or_else(|| ck(format!("unknown parameter `{}`", p.name)))?;
        if store.get(id).shape() != p.shape.as_slice() {
            return Err(ck(format!(
                "parameter `{}` has shape {:?}, configuration expects {:?}",
                p.name,
                p.shape,
                store.get(id).shape()
            )));
        }
        let n = p.shape.iter().product::<usize>();
        store.set_values(id, &payload[p.offset..p.offset + n])?;
        order.push((id.index(), p.offset, n));
    }
    let adam = match &header.adam {
        None => None,
        Some(a) => {
            let (first, second) = if a.moments {
                // moments are stored in header order; the state is indexed by store order
                order.sort_by_key(|o| o.0);
                let first = order.iter().map(|&(_, off, n)| payload[total + off..total + off + n].to_vec()).collect();
                let second = order
                    .iter()
                    .map(|&(_, off, n)| payload[2 * total + off..2 * total + off + n].to_vec())
                    .collect();
                (first, second)
            } else {
                (Vec::new(), Vec::new())
            };
            Some(AdamState::from_parts(a.settings.into(), a.step, first, second)?)
        }
    };
    Ok(Checkpoint {
        header,
        model,
        store,
        adam,
    })
}

/// Errors unless the checkpoint vocabulary hashes to `expected`.
pub fn check_vocab(header: &Header, expected: &Vocab) -> Result<()> {
    let want = expected.hash();
    if header.vocab_hash != want {
        return Err(CatError::VocabMismatch {
            checkpoint: header.vocab_hash.clone(),
            expected: want,
        });
    }
    Ok(())
}
