//! Dataset assembly and serialization: a deterministic mixture of scripted
//! demonstrations across embodiments, normalization statistics, and
//! horizon-chunk training examples.
//!
//! On disk a dataset is one JSON header line (manifest, embodiments, stats,
//! per-episode index) followed by fixed-width little-endian f64 records. Per
//! episode, steps are stored consecutively; per step the field order is:
//! raw state (`raw_state_dim` values), raw action (`raw_action_dim` values),
//! then each *present* observation stream (`OBS_DIM` values each).

use super::embodiments::{
    embodiment_by_id, generate_episode, sample_task, Embodiment, Episode, MAX_STREAMS, OBS_DIM,
};
use crate::codec::{encode, mapped_dims, ActionSpace, NormStats, VectorKind, UNIFIED_DIM};
use crate::context::ContextInput;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

/// How normalization statistics are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormScope {
    /// One statistics set over the whole mixture. Unified slots are disjoint
    /// per action space, so this is already per-space in effect.
    #[default]
    Global,
}

/// One mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub embodiment: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<MixtureEntry>,
    pub episodes: usize,
    pub seed: u64,
    pub norm_scope: NormScope,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.entries.is_empty() {
            return Err(Error::Dataset("manifest with zero episodes".into()));
        }
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Dataset(format!("mixture weights sum to {total}, not 1")));
        }
        if self.entries.iter().any(|e| e.weight < 0.0) {
            return Err(Error::Dataset("negative mixture weight".into()));
        }
        Ok(())
    }

    /// Even 1/n mixture over the given embodiment ids.
    pub fn uniform(ids: &[&str], episodes: usize, seed: u64) -> Self {
        let w = 1.0 / ids.len() as f64;
        DatasetManifest {
            entries: ids
                .iter()
                .map(|id| MixtureEntry { embodiment: (*id).into(), weight: w })
                .collect(),
            episodes,
            seed,
            norm_scope: NormScope::Global,
        }
    }

    /// Deterministic largest-remainder interleave of episodes to mixture
    /// entries: after e episodes every entry has been scheduled within ±1 of
    /// e·weight.
    pub fn schedule(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.entries.len()];
        let mut order = Vec::with_capacity(self.episodes);
        for e in 0..self.episodes {
            let pick = (0..self.entries.len())
                .max_by(|&a, &b| {
                    let da = self.entries[a].weight * (e + 1) as f64 - counts[a] as f64;
                    let db = self.entries[b].weight * (e + 1) as f64 - counts[b] as f64;
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            counts[pick] += 1;
            order.push(pick);
        }
        order
    }
}

/// A fully generated dataset with fitted normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub embodiments: Vec<Embodiment>,
    pub episodes: Vec<Episode>,
    pub state_stats: NormStats,
    pub action_stats: NormStats,
}

/// Generate every episode of the manifest. Pure function of
/// (manifest, embodiment table): per-episode seeds are derived from the
/// manifest seed and the episode index.
pub fn build_dataset(manifest: &DatasetManifest, embodiments: &[Embodiment]) -> Result<Dataset> {
    manifest.validate()?;
    let mut used: Vec<Embodiment> = Vec::new();
    for e in &manifest.entries {
        used.push(embodiment_by_id(embodiments, &e.embodiment)?.clone());
    }
    let mut episodes = Vec::with_capacity(manifest.episodes);
    for (idx, &entry) in manifest.schedule().iter().enumerate() {
        let emb = &used[entry];
        let ep_seed = manifest
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(idx as u64);
        let mut task_rng = ChaCha8Rng::seed_from_u64(ep_seed);
        let task = sample_task(emb, &mut task_rng);
        episodes.push(generate_episode(emb, &task, ep_seed.wrapping_add(1))?);
    }

    // Fit statistics over every step's unified state and action.
    let mut state_uvs = Vec::new();
    let mut action_uvs = Vec::new();
    for ep in &episodes {
        let emb = embodiment_by_id(&used, &ep.embodiment)?;
        let mapped = mapped_dims(&emb.desc);
        for s in &ep.states {
            state_uvs.push((encode(s, &emb.desc, VectorKind::State)?, mapped));
        }
        for a in &ep.actions {
            action_uvs.push((encode(a, &emb.desc, VectorKind::Action)?, mapped));
        }
    }
    let state_refs: Vec<_> = state_uvs.iter().map(|(u, m)| (u, m)).collect();
    let action_refs: Vec<_> = action_uvs.iter().map(|(u, m)| (u, m)).collect();
    let state_stats = NormStats::fit(&state_refs)?;
    let action_stats = NormStats::fit(&action_refs)?;
    Ok(Dataset {
        manifest: manifest.clone(),
        embodiments: used,
        episodes,
        state_stats,
        action_stats,
    })
}

/// One model-ready training example: normalized unified state, normalized
/// H×24 action chunk, and the context-encoder input.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub embodiment: String,
    pub space: ActionSpace,
    pub state_values: Vec<f64>,
    pub state_mask: Vec<f64>,
    pub chunk: Vec<Vec<f64>>,
    pub ctx: ContextInput,
}

impl Dataset {
    pub fn embodiment_of(&self, ep: &Episode) -> &Embodiment {
        embodiment_by_id(&self.embodiments, &ep.embodiment).expect("episode embodiment in table")
    }

    /// Example starting at step `t` of episode `ep_idx`; the action chunk
    /// repeats the final action past the episode end.
    pub fn example_at(&self, ep_idx: usize, t: usize, horizon: usize) -> Result<TrainExample> {
        let ep = self
            .episodes
            .get(ep_idx)
            .ok_or_else(|| Error::Dataset(format!("episode {ep_idx} out of range")))?;
        if t >= ep.len() {
            return Err(Error::Dataset(format!("step {t} out of range")));
        }
        let emb = self.embodiment_of(ep).clone();
        let mapped = mapped_dims(&emb.desc);

        let suv = encode(&ep.states[t], &emb.desc, VectorKind::State)?;
        let suv = self.state_stats.apply(&suv, &mapped);
        let state_values = suv.values.to_vec();
        let state_mask: Vec<f64> = suv.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();

        let mut chunk = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let step = (t + h).min(ep.len() - 1);
            let auv = encode(&ep.actions[step], &emb.desc, VectorKind::Action)?;
            let auv = self.action_stats.apply(&auv, &mapped);
            chunk.push(auv.values.to_vec());
        }

        let mut obs_streams = Vec::with_capacity(MAX_STREAMS);
        for s in 0..MAX_STREAMS {
            obs_streams.push(ep.obs[t].get(s).cloned().flatten());
        }
        Ok(TrainExample {
            embodiment: ep.embodiment.clone(),
            space: emb.desc.action_space,
            state_values,
            state_mask,
            chunk,
            ctx: ContextInput { obs_streams, instr_ids: ep.instr_ids.clone() },
        })
    }

    /// Uniformly random (episode, step) example.
    pub fn sample_example(&self, horizon: usize, rng: &mut ChaCha8Rng) -> Result<TrainExample> {
        let ep_idx = rng.gen_range(0..self.episodes.len());
        let t = rng.gen_range(0..self.episodes[ep_idx].len());
        self.example_at(ep_idx, t, horizon)
    }

    /// Total steps across all episodes.
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    // ---- serialization ----

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = DatasetHeader {
            version: 1,
            manifest: self.manifest.clone(),
            embodiments: self.embodiments.clone(),
            state_stats: self.state_stats.clone(),
            action_stats: self.action_stats.clone(),
            index: self
                .episodes
                .iter()
                .map(|ep| EpisodeIndex {
                    embodiment: ep.embodiment.clone(),
                    instr_ids: ep.instr_ids.clone(),
                    target: ep.target,
                    control_hz: ep.control_hz,
                    steps: ep.len(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&header)
            .map_err(|e| Error::Dataset(format!("header encode: {e}")))?;
        writeln!(w, "{line}")?;
        for ep in &self.episodes {
            let emb = self.embodiment_of(ep);
            for t in 0..ep.len() {
                for &v in ep.states[t].iter().chain(ep.actions[t].iter()) {
                    w.write_all(&v.to_le_bytes())?;
                }
                for s in 0..emb.streams {
                    let tok = ep.obs[t][s]
                        .as_ref()
                        .ok_or_else(|| Error::Dataset("missing declared stream".into()))?;
                    for &v in tok {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: DatasetHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Dataset(format!("header decode: {e}")))?;
        if header.version != 1 {
            return Err(Error::Dataset(format!("unsupported dataset version {}", header.version)));
        }
        let mut episodes = Vec::with_capacity(header.index.len());
        let read_f64 = |r: &mut BufReader<std::fs::File>| -> Result<f64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        };
        for idx in &header.index {
            let emb = embodiment_by_id(&header.embodiments, &idx.embodiment)?;
            let mut states = Vec::with_capacity(idx.steps);
            let mut actions = Vec::with_capacity(idx.steps);
            let mut obs = Vec::with_capacity(idx.steps);
            for _ in 0..idx.steps {
                let mut s = Vec::with_capacity(emb.desc.raw_state_dim);
                for _ in 0..emb.desc.raw_state_dim {
                    s.push(read_f64(&mut r)?);
                }
                let mut a = Vec::with_capacity(emb.desc.raw_action_dim);
                for _ in 0..emb.desc.raw_action_dim {
                    a.push(read_f64(&mut r)?);
                }
                let mut streams = Vec::with_capacity(MAX_STREAMS);
                for si in 0..MAX_STREAMS {
                    if si < emb.streams {
                        let mut tok = Vec::with_capacity(OBS_DIM);
                        for _ in 0..OBS_DIM {
                            tok.push(read_f64(&mut r)?);
                        }
                        streams.push(Some(tok));
                    } else {
                        streams.push(None);
                    }
                }
                states.push(s);
                actions.push(a);
                obs.push(streams);
            }
            episodes.push(Episode {
                embodiment: idx.embodiment.clone(),
                instr_ids: idx.instr_ids.clone(),
                target: idx.target,
                control_hz: idx.control_hz,
                states,
                actions,
                obs,
            });
        }
        Ok(Dataset {
            manifest: header.manifest,
            embodiments: header.embodiments,
            episodes,
            state_stats: header.state_stats,
            action_stats: header.action_stats,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    manifest: DatasetManifest,
    embodiments: Vec<Embodiment>,
    state_stats: NormStats,
    action_stats: NormStats,
    index: Vec<EpisodeIndex>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeIndex {
    embodiment: String,
    instr_ids: Vec<usize>,
    target: [f64; 2],
    control_hz: f64,
    steps: usize,
}

/// Which unified dims the episode's embodiment writes, as needed when
/// denormalizing sampled actions.
pub fn mapped_for(ds: &Dataset, embodiment: &str) -> Result<[bool; UNIFIED_DIM]> {
    Ok(mapped_dims(&embodiment_by_id(&ds.embodiments, embodiment)?.desc))
}
