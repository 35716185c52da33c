//! Checkpoint serialization: one JSON header line (format version, training
//! config, normalization stats, step counter, RNG state, optimizer scalars,
//! and a name/offset index over the parameter tensors) followed by three raw
//! little-endian f32 blocks — parameters, then the optimizer's first and
//! second moments, each `total_elements` long. The layout is a pure function
//! of the header, so save → load → save is byte-identical.

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::codec::NormStats;
use crate::error::{Error, Result};
use crate::model::ParamSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    /// Element offset into the parameter block.
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    step: u64,
    state_stats: NormStats,
    action_stats: NormStats,
    rng_seed: [u8; 32],
    rng_word_pos_lo: u64,
    rng_word_pos_hi: u64,
    adam_t: u64,
    weight_decay: f64,
    index: Vec<ParamEntry>,
}

/// Everything restored from disk; the caller rebuilds the model and dataset
/// from the embedded config.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub state_stats: NormStats,
    pub action_stats: NormStats,
    pub rng: ChaCha8Rng,
    pub params: Vec<f32>,
    pub opt: AdamW,
    pub param_names: Vec<String>,
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    step: u64,
    state_stats: &NormStats,
    action_stats: &NormStats,
    rng: &ChaCha8Rng,
    params: &ParamSet<f32>,
    opt: &AdamW,
) -> Result<()> {
    let mut index = Vec::with_capacity(params.len());
    let mut off = 0u64;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        index.push(ParamEntry { name: name.clone(), offset: off, len: t.len() as u64 });
        off += t.len() as u64;
    }
    let word_pos = rng.get_word_pos();
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        step,
        state_stats: state_stats.clone(),
        action_stats: action_stats.clone(),
        rng_seed: rng.get_seed(),
        rng_word_pos_lo: word_pos as u64,
        rng_word_pos_hi: (word_pos >> 64) as u64,
        adam_t: opt.t,
        weight_decay: opt.weight_decay,
        index,
    };
    let line = serde_json::to_string(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{line}")?;
    let flat = params.flatten();
    for block in [flat.as_slice(), opt.m.as_slice(), opt.v.as_slice()] {
        if block.len() != off as usize {
            return Err(Error::Checkpoint(format!(
                "block length {} != parameter count {off}",
                block.len()
            )));
        }
        for &v in block {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let total: u64 = header.index.iter().map(|e| e.len).sum();
    // Entries must tile [0, total) in order.
    let mut expect = 0u64;
    for e in &header.index {
        if e.offset != expect {
            return Err(Error::Checkpoint(format!("non-contiguous index at {}", e.name)));
        }
        expect += e.len;
    }
    let mut read_block = |n: usize| -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let params = read_block(total as usize)?;
    let m = read_block(total as usize)?;
    let v = read_block(total as usize)?;

    let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
    rng.set_word_pos(
        (header.rng_word_pos_hi as u128) << 64 | header.rng_word_pos_lo as u128,
    );
    let mut opt = AdamW::new(total as usize, header.weight_decay);
    opt.t = header.adam_t;
    opt.m = m;
    opt.v = v;
    Ok(LoadedCheckpoint {
        config: header.config,
        step: header.step,
        state_stats: header.state_stats,
        action_stats: header.action_stats,
        rng,
        params,
        opt,
        param_names: header.index.into_iter().map(|e| e.name).collect(),
    })
}

/// Error unless the loaded parameter index matches the freshly built model's
/// parameter names and sizes (catches config/checkpoint mismatches).
pub fn check_param_layout(loaded: &LoadedCheckpoint, params: &ParamSet<f32>) -> Result<()> {
    if loaded.param_names != params.names() {
        return Err(Error::Checkpoint("parameter index does not match config".into()));
    }
    if loaded.params.len() != params.total_elements() {
        return Err(Error::Checkpoint(format!(
            "parameter block has {} elements, config needs {}",
            loaded.params.len(),
            params.total_elements()
        )));
    }
    Ok(())
}
