//! The synthetic embodiment zoo: planar-arm robots differing in action
//! space, arm count, camera-stream count, control frequency, and (per
//! episode) operator speed — plus their scripted expert controllers.

use super::arm::{wrap_angle, PlanarArm, MAX_DG, MAX_DQ, MAX_DX};
use crate::codec::{ActionSpace, EmbodimentDescriptor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Success tolerance: final tip-to-target distance, in arm-length units.
pub const DELTA: f64 = 0.01;
/// Gripper state at or above this counts as closed.
pub const GRIP_CLOSED: f64 = 0.9;
/// Width of one synthetic observation token.
pub const OBS_DIM: usize = 8;
/// Maximum camera streams any embodiment exposes.
pub const MAX_STREAMS: usize = 2;
/// Instruction tokens per episode.
pub const INSTR_LEN: usize = 3;
/// Instruction vocabulary size.
pub const VOCAB_SIZE: usize = 32;
/// Hard cap on fine-grained controller steps per episode.
const MAX_FINE_STEPS: usize = 400;
/// Base proportional gain of the scripted controllers.
const BASE_GAIN: f64 = 0.4;

/// A simulated embodiment: the codec descriptor plus simulation-side
/// attributes not visible to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embodiment {
    pub desc: EmbodimentDescriptor,
    /// Camera streams this embodiment exposes (≤ MAX_STREAMS).
    pub streams: usize,
    /// Temporal subsampling factor: a factor-2 embodiment records every
    /// second controller step, with per-command bounds scaled to match.
    pub subsample: usize,
}

impl Embodiment {
    pub fn arm_count(&self) -> usize {
        self.desc.arm_count as usize
    }

    /// Per-component command bound for this embodiment's recorded actions.
    pub fn action_bound(&self, component: usize) -> f64 {
        let per_arm = self.desc.raw_action_dim / self.arm_count();
        let base = match self.desc.action_space {
            ActionSpace::Joint => {
                if component % per_arm < 2 {
                    MAX_DQ
                } else {
                    MAX_DG
                }
            }
            ActionSpace::Eef => {
                if component % per_arm < 2 {
                    MAX_DX
                } else {
                    MAX_DG
                }
            }
        };
        base * self.subsample as f64
    }

    /// Fresh arms at the canonical start pose.
    pub fn spawn_arms(&self) -> Vec<PlanarArm> {
        match self.arm_count() {
            1 => vec![PlanarArm::new([0.0, 0.0])],
            2 => vec![PlanarArm::new([0.5, 0.0]), PlanarArm::new([-0.5, 0.0])],
            n => unreachable!("unsupported arm count {n}"),
        }
    }

    /// Raw proprioceptive state: per arm, `[θ1, θ2, grip]` for joint
    /// embodiments or `[tip_x, tip_y, grip]` for EEF embodiments.
    pub fn raw_state(&self, arms: &[PlanarArm]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.desc.raw_state_dim);
        for a in arms {
            match self.desc.action_space {
                ActionSpace::Joint => out.extend([a.joint_angles[0], a.joint_angles[1], a.gripper]),
                ActionSpace::Eef => {
                    let t = a.tip();
                    out.extend([t[0], t[1], a.gripper]);
                }
            }
        }
        out
    }

    /// Apply one recorded action, splitting it into `subsample` sub-commands
    /// so per-step clamps match generation-time dynamics.
    pub fn apply_action(&self, arms: &mut [PlanarArm], raw: &[f64]) {
        let per_arm = raw.len() / arms.len();
        let s = self.subsample as f64;
        for _ in 0..self.subsample {
            for (i, arm) in arms.iter_mut().enumerate() {
                let cmd: Vec<f64> =
                    raw[i * per_arm..(i + 1) * per_arm].iter().map(|v| v / s).collect();
                match self.desc.action_space {
                    ActionSpace::Joint => arm.apply_joint_delta(&cmd),
                    ActionSpace::Eef => arm.apply_eef_delta(&cmd),
                }
            }
        }
    }
}

fn single(id: &str, space: ActionSpace, streams: usize, subsample: usize, hz: f64) -> Embodiment {
    let slot_map = match space {
        ActionSpace::Eef => vec![0, 1, 2],
        ActionSpace::Joint => vec![8, 9, 10],
    };
    Embodiment {
        desc: EmbodimentDescriptor {
            id: id.into(),
            action_space: space,
            arm_count: 1,
            raw_action_dim: 3,
            raw_state_dim: 3,
            control_hz: hz,
            slot_map,
        },
        streams,
        subsample,
    }
}

/// The six default embodiments: {joint, EEF} × {1, 2 streams}, a
/// half-frequency joint arm, and a dual-arm joint robot that exercises the
/// left-arm slots.
pub fn default_embodiments() -> Vec<Embodiment> {
    vec![
        single("joint-a", ActionSpace::Joint, 1, 1, 10.0),
        single("joint-b", ActionSpace::Joint, 2, 1, 10.0),
        single("eef-a", ActionSpace::Eef, 1, 1, 10.0),
        single("eef-b", ActionSpace::Eef, 2, 1, 10.0),
        single("joint-slow", ActionSpace::Joint, 1, 2, 5.0),
        Embodiment {
            desc: EmbodimentDescriptor {
                id: "dual-joint".into(),
                action_space: ActionSpace::Joint,
                arm_count: 2,
                raw_action_dim: 6,
                raw_state_dim: 6,
                control_hz: 10.0,
                slot_map: vec![8, 9, 10, 16, 17, 18],
            },
            streams: 2,
            subsample: 1,
        },
    ]
}

pub fn embodiment_by_id<'a>(embs: &'a [Embodiment], id: &str) -> Result<&'a Embodiment> {
    embs.iter()
        .find(|e| e.desc.id == id)
        .ok_or_else(|| Error::Dataset(format!("unknown embodiment {id}")))
}

/// A reach-and-grasp task: drive the tip(s) to the target(s) and close the
/// gripper(s). Dual-arm embodiments get the mirrored target for the left arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub target: [f64; 2],
    pub instr_ids: Vec<usize>,
}

/// Target for a given arm index: arm 0 takes the task target, arm 1 its
/// mirror image across the y-axis (reachable by the mirrored left base).
pub fn arm_target(task: &Task, arm_idx: usize) -> [f64; 2] {
    if arm_idx == 0 {
        task.target
    } else {
        [-task.target[0], task.target[1]]
    }
}

/// Quantize the target into instruction tokens: a verb for the embodiment
/// family plus two coarse position buckets.
pub fn instruction_for(emb: &Embodiment, target: [f64; 2]) -> Vec<usize> {
    let verb = match (emb.desc.action_space, emb.arm_count()) {
        (ActionSpace::Joint, 1) => 1,
        (ActionSpace::Eef, 1) => 2,
        (_, _) => 3,
    };
    let bucket = |v: f64| (((v + 2.5) / 5.0).clamp(0.0, 0.999) * 13.0) as usize;
    vec![verb, 4 + bucket(target[0]), 18 + bucket(target[1])]
}

/// Sample a reachable target at least 5·δ from the start tip so the trivial
/// zero policy cannot succeed.
pub fn sample_task(emb: &Embodiment, rng: &mut ChaCha8Rng) -> Task {
    let arms = emb.spawn_arms();
    loop {
        let r = rng.gen_range(0.3..1.7);
        let phi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let target = [
            arms[0].base[0] + r * phi.cos(),
            arms[0].base[1] + r * phi.sin(),
        ];
        let ok = (0..arms.len()).all(|i| {
            let t = if i == 0 { target } else { [-target[0], target[1]] };
            let tip = arms[i].tip();
            let dist = ((tip[0] - t[0]).powi(2) + (tip[1] - t[1]).powi(2)).sqrt();
            arms[i].reachable(t) && dist >= 5.0 * DELTA
        });
        if ok {
            return Task { target, instr_ids: instruction_for(emb, target) };
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Whether the task is solved: every tip within δ of its target and every
/// gripper closed.
pub fn task_done(_emb: &Embodiment, arms: &[PlanarArm], task: &Task) -> bool {
    arms.iter().enumerate().all(|(i, a)| {
        dist(a.tip(), arm_target(task, i)) < DELTA && a.gripper >= GRIP_CLOSED
    })
}

/// One fine-grained scripted expert command for every arm, concatenated in
/// raw layout. Joint arms run an inverse-kinematics proportional servo; EEF
/// arms a straight-line delta controller. Once an arm's tip is within δ it
/// closes its gripper instead of moving.
pub fn expert_action(emb: &Embodiment, arms: &[PlanarArm], task: &Task, gain: f64) -> Result<Vec<f64>> {
    let mut raw = Vec::with_capacity(emb.desc.raw_action_dim);
    for (i, arm) in arms.iter().enumerate() {
        let target = arm_target(task, i);
        let tip = arm.tip();
        if dist(tip, target) < DELTA {
            let dg = if arm.gripper < 0.95 { (MAX_DG * gain).min(MAX_DG) } else { 0.0 };
            raw.extend([0.0, 0.0, dg]);
            continue;
        }
        match emb.desc.action_space {
            ActionSpace::Joint => {
                let q = arm.ik(target)?;
                let e0 = wrap_angle(q[0] - arm.joint_angles[0]);
                let e1 = wrap_angle(q[1] - arm.joint_angles[1]);
                raw.extend([
                    (gain * e0).clamp(-MAX_DQ, MAX_DQ),
                    (gain * e1).clamp(-MAX_DQ, MAX_DQ),
                    0.0,
                ]);
            }
            ActionSpace::Eef => {
                let dx = gain * (target[0] - tip[0]);
                let dy = gain * (target[1] - tip[1]);
                let n = (dx * dx + dy * dy).sqrt();
                let s = if n > MAX_DX { MAX_DX / n } else { 1.0 };
                raw.extend([dx * s, dy * s, 0.0]);
            }
        }
    }
    Ok(raw)
}

/// Synthetic observation tokens for the current scene, one per stream.
/// Low-dimensional geometric features plus per-stream sensor noise.
pub fn obs_tokens(
    emb: &Embodiment,
    arms: &[PlanarArm],
    task: &Task,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<Vec<f64>>> {
    let mut out = Vec::with_capacity(MAX_STREAMS);
    for s in 0..MAX_STREAMS {
        if s >= emb.streams {
            out.push(None);
            continue;
        }
        let a = &arms[0];
        let tip = a.tip();
        let target = arm_target(task, 0);
        let second = arms.get(1);
        let mut f = vec![
            target[0] - tip[0],
            target[1] - tip[1],
            tip[0],
            tip[1],
            a.gripper,
            dist(tip, target),
            match second {
                Some(b) => dist(b.tip(), arm_target(task, 1)),
                None => 0.0,
            },
            s as f64 + rng.gen_range(-0.05..0.05),
        ];
        f.truncate(OBS_DIM);
        out.push(Some(f));
    }
    out
}

/// One demonstration: raw per-step states/actions, per-step observation
/// tokens, and the episode-level instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub embodiment: String,
    pub instr_ids: Vec<usize>,
    pub target: [f64; 2],
    pub control_hz: f64,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub obs: Vec<Vec<Option<Vec<f64>>>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Run the scripted expert on one task. The per-episode operator-speed gain
/// is drawn uniformly from [0.5, 1.5]; `subsample` folds consecutive fine
/// commands into one recorded step.
pub fn generate_episode(emb: &Embodiment, task: &Task, seed: u64) -> Result<Episode> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = BASE_GAIN * rng.gen_range(0.5..1.5);
    let mut arms = emb.spawn_arms();
    for (i, a) in arms.iter().enumerate() {
        let t = arm_target(task, i);
        if !a.reachable(t) {
            return Err(Error::InvalidArgument(format!(
                "target {:?} unreachable by {} arm {}",
                t, emb.desc.id, i
            )));
        }
    }

    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut obs = Vec::new();
    let mut fine = 0usize;
    while !task_done(emb, &arms, task) && fine < MAX_FINE_STEPS {
        let state = emb.raw_state(&arms);
        let o = obs_tokens(emb, &arms, task, &mut rng);
        let mut recorded = vec![0.0; emb.desc.raw_action_dim];
        for _ in 0..emb.subsample {
            if task_done(emb, &arms, task) {
                break;
            }
            let a = expert_action(emb, &arms, task, gain)?;
            let per_arm = a.len() / arms.len();
            for (i, arm) in arms.iter_mut().enumerate() {
                match emb.desc.action_space {
                    ActionSpace::Joint => arm.apply_joint_delta(&a[i * per_arm..(i + 1) * per_arm]),
                    ActionSpace::Eef => arm.apply_eef_delta(&a[i * per_arm..(i + 1) * per_arm]),
                }
            }
            for (r, v) in recorded.iter_mut().zip(&a) {
                *r += v;
            }
            fine += 1;
        }
        states.push(state);
        actions.push(recorded);
        obs.push(o);
    }
    if !task_done(emb, &arms, task) {
        return Err(Error::InvalidArgument(format!(
            "scripted expert failed to converge on {} target {:?}",
            emb.desc.id, task.target
        )));
    }
    Ok(Episode {
        embodiment: emb.desc.id.clone(),
        instr_ids: task.instr_ids.clone(),
        target: task.target,
        control_hz: emb.desc.control_hz,
        states,
        actions,
        obs,
    })
}
