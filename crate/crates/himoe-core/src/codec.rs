//! Unified 24-dim action/state vectors shared across embodiments.
//!
//! Slot layout (fixed system-wide): dims `[0,8)` end-effector,
//! `[8,16)` right-arm joints, `[16,24)` left-arm joints. Single-arm joint
//! embodiments always land in the right-arm slots. For EEF embodiments the
//! 8 slots are read as `[Δpose(6), gripper, reserved]`; toy planar
//! embodiments use `[dx, dy, gripper]` in the first three.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Total width of the unified vector.
pub const UNIFIED_DIM: usize = 24;
/// End-effector slot range.
pub const EEF_SLOTS: std::ops::Range<usize> = 0..8;
/// Right-arm joint slot range (single arms map here).
pub const RIGHT_JOINT_SLOTS: std::ops::Range<usize> = 8..16;
/// Left-arm joint slot range.
pub const LEFT_JOINT_SLOTS: std::ops::Range<usize> = 16..24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionSpace {
    Eef,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorKind {
    State,
    Action,
}

/// Describes how one embodiment's raw vectors map into the unified layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentDescriptor {
    pub id: String,
    pub action_space: ActionSpace,
    pub arm_count: u8,
    pub raw_action_dim: usize,
    pub raw_state_dim: usize,
    pub control_hz: f64,
    /// raw index -> unified index, shared by states and actions
    /// (raw state and action dims coincide for all synthetic embodiments;
    /// see `slot_map_for_dim` when they differ).
    pub slot_map: Vec<usize>,
}

impl EmbodimentDescriptor {
    /// Validates injectivity and that slots respect the action space.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; UNIFIED_DIM];
        for &s in &self.slot_map {
            if s >= UNIFIED_DIM {
                return Err(Error::Codec(format!("slot {} out of range", s)));
            }
            if seen[s] {
                return Err(Error::Codec(format!("slot {} mapped twice", s)));
            }
            seen[s] = true;
            match self.action_space {
                ActionSpace::Eef if !EEF_SLOTS.contains(&s) => {
                    return Err(Error::Codec(format!(
                        "EEF embodiment {} maps into non-EEF slot {}",
                        self.id, s
                    )));
                }
                ActionSpace::Joint if EEF_SLOTS.contains(&s) => {
                    return Err(Error::Codec(format!(
                        "joint embodiment {} maps into EEF slot {}",
                        self.id, s
                    )));
                }
                _ => {}
            }
        }
        if self.arm_count == 1
            && self.action_space == ActionSpace::Joint
            && self.slot_map.iter().any(|s| LEFT_JOINT_SLOTS.contains(s))
        {
            return Err(Error::Codec(format!(
                "single-arm joint embodiment {} must map to the right-arm slots",
                self.id
            )));
        }
        Ok(())
    }

    fn raw_dim(&self, kind: VectorKind) -> usize {
        match kind {
            VectorKind::State => self.raw_state_dim,
            VectorKind::Action => self.raw_action_dim,
        }
    }
}

/// 24 values plus a validity mask. States carry a meaningful mask; actions
/// are zero-padded on unmapped slots and the mask is all-true by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedVector {
    pub values: [f64; UNIFIED_DIM],
    pub mask: [bool; UNIFIED_DIM],
    pub kind: VectorKind,
}

/// Encode a raw state or action vector into the unified layout.
pub fn encode(raw: &[f64], emb: &EmbodimentDescriptor, kind: VectorKind) -> Result<UnifiedVector> {
    let want = emb.raw_dim(kind);
    if raw.len() != want {
        return Err(Error::Codec(format!(
            "{}: raw {:?} length {} != declared {}",
            emb.id,
            kind,
            raw.len(),
            want
        )));
    }
    if raw.len() > emb.slot_map.len() {
        return Err(Error::Codec(format!(
            "{}: slot_map covers {} dims, raw has {}",
            emb.id,
            emb.slot_map.len(),
            raw.len()
        )));
    }
    let mut values = [0.0; UNIFIED_DIM];
    let mut mapped = [false; UNIFIED_DIM];
    for (i, &v) in raw.iter().enumerate() {
        values[emb.slot_map[i]] = v;
        mapped[emb.slot_map[i]] = true;
    }
    let mask = match kind {
        VectorKind::State => mapped,
        VectorKind::Action => [true; UNIFIED_DIM],
    };
    Ok(UnifiedVector { values, mask, kind })
}

/// Invert [`encode`] for actions: read back exactly the mapped slots.
pub fn decode(uv: &UnifiedVector, emb: &EmbodimentDescriptor) -> Vec<f64> {
    emb.slot_map[..emb.raw_action_dim]
        .iter()
        .map(|&s| uv.values[s])
        .collect()
}

/// Per-dimension dataset normalization statistics.
///
/// Fit with population standard deviation over mapped entries only;
/// unmapped dims keep the identity transform (mean 0, std 1) and dims with
/// std below 1e-6 are clamped to std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; UNIFIED_DIM],
    pub std: [f64; UNIFIED_DIM],
}

pub const STD_EPS: f64 = 1e-6;

impl NormStats {
    pub fn identity() -> Self {
        NormStats { mean: [0.0; UNIFIED_DIM], std: [1.0; UNIFIED_DIM] }
    }

    /// Fit over the mapped entries of a dataset of unified vectors.
    /// A dim is "mapped" for a sample when its mask bit is set and, for
    /// actions, when the sample's embodiment actually wrote it — callers
    /// pass per-sample mapped masks for that reason.
    pub fn fit(samples: &[(&UnifiedVector, &[bool; UNIFIED_DIM])]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Codec("fit_normalizer: empty dataset".into()));
        }
        let mut mean = [0.0; UNIFIED_DIM];
        let mut std = [1.0; UNIFIED_DIM];
        for d in 0..UNIFIED_DIM {
            let vals: Vec<f64> = samples
                .iter()
                .filter(|(_, mapped)| mapped[d])
                .map(|(uv, _)| uv.values[d])
                .collect();
            if vals.len() < 2 {
                continue; // identity transform for unmapped / underpopulated dims
            }
            let n = vals.len() as f64;
            let mu = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean[d] = mu;
            let sd = var.sqrt();
            std[d] = if sd < STD_EPS { 1.0 } else { sd };
        }
        Ok(NormStats { mean, std })
    }

    /// Normalize in place; masked-out (zero) entries of states stay zero
    /// only when their dim has the identity transform, so apply respects
    /// the mask by normalizing mapped dims only.
    pub fn apply(&self, uv: &UnifiedVector, mapped: &[bool; UNIFIED_DIM]) -> UnifiedVector {
        let mut out = uv.clone();
        for d in 0..UNIFIED_DIM {
            if mapped[d] {
                out.values[d] = (uv.values[d] - self.mean[d]) / self.std[d];
            }
        }
        out
    }

    pub fn invert(&self, uv: &UnifiedVector, mapped: &[bool; UNIFIED_DIM]) -> UnifiedVector {
        let mut out = uv.clone();
        for d in 0..UNIFIED_DIM {
            if mapped[d] {
                out.values[d] = uv.values[d] * self.std[d] + self.mean[d];
            }
        }
        out
    }

    /// Normalize a raw 24-wide slice (used for action chunks in training).
    pub fn apply_slice(&self, values: &mut [f64], mapped: &[bool; UNIFIED_DIM]) {
        for d in 0..UNIFIED_DIM {
            if mapped[d] {
                values[d] = (values[d] - self.mean[d]) / self.std[d];
            }
        }
    }

    pub fn invert_slice(&self, values: &mut [f64], mapped: &[bool; UNIFIED_DIM]) {
        for d in 0..UNIFIED_DIM {
            if mapped[d] {
                values[d] = values[d] * self.std[d] + self.mean[d];
            }
        }
    }
}

/// Which unified dims an embodiment writes (its action footprint).
pub fn mapped_dims(emb: &EmbodimentDescriptor) -> [bool; UNIFIED_DIM] {
    let mut m = [false; UNIFIED_DIM];
    for &s in &emb.slot_map {
        m[s] = true;
    }
    m
}
