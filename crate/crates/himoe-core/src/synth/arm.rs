//! Two-link planar arm: forward kinematics, analytic Jacobian, closed-form
//! inverse kinematics, and delta-command dynamics.

use crate::error::{Error, Result};

/// Largest joint delta a single command may apply (radians).
pub const MAX_DQ: f64 = 0.35;
/// Largest end-effector translation a single command may apply.
pub const MAX_DX: f64 = 0.25;
/// Largest gripper delta per command.
pub const MAX_DG: f64 = 0.5;

/// Wrap an angle into [−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI);
    if x < 0.0 {
        x += 2.0 * std::f64::consts::PI;
    }
    x - std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarArm {
    pub link_lengths: [f64; 2],
    /// Joint angles in radians, kept wrapped to [−π, π].
    pub joint_angles: [f64; 2],
    /// Gripper opening state in [0, 1]; 1 is fully closed.
    pub gripper: f64,
    pub base: [f64; 2],
}

impl PlanarArm {
    pub fn new(base: [f64; 2]) -> Self {
        PlanarArm {
            link_lengths: [1.0, 1.0],
            joint_angles: [0.6, 0.8],
            gripper: 0.0,
            base,
        }
    }

    /// End-effector position.
    pub fn tip(&self) -> [f64; 2] {
        let [l1, l2] = self.link_lengths;
        let [a, b] = self.joint_angles;
        [
            self.base[0] + l1 * a.cos() + l2 * (a + b).cos(),
            self.base[1] + l1 * a.sin() + l2 * (a + b).sin(),
        ]
    }

    /// Analytic Jacobian d(tip)/d(joint_angles), row-major 2x2.
    pub fn jacobian(&self) -> [[f64; 2]; 2] {
        let [l1, l2] = self.link_lengths;
        let [a, b] = self.joint_angles;
        let s1 = a.sin();
        let c1 = a.cos();
        let s12 = (a + b).sin();
        let c12 = (a + b).cos();
        [
            [-l1 * s1 - l2 * s12, -l2 * s12],
            [l1 * c1 + l2 * c12, l2 * c12],
        ]
    }

    /// Reachable radius interval around the base.
    pub fn reach(&self) -> (f64, f64) {
        let [l1, l2] = self.link_lengths;
        ((l1 - l2).abs(), l1 + l2)
    }

    pub fn reachable(&self, target: [f64; 2]) -> bool {
        let dx = target[0] - self.base[0];
        let dy = target[1] - self.base[1];
        let r = (dx * dx + dy * dy).sqrt();
        let (lo, hi) = self.reach();
        (lo..=hi).contains(&r)
    }

    /// Closed-form elbow-down inverse kinematics.
    pub fn ik(&self, target: [f64; 2]) -> Result<[f64; 2]> {
        let dx = target[0] - self.base[0];
        let dy = target[1] - self.base[1];
        let r2 = dx * dx + dy * dy;
        let [l1, l2] = self.link_lengths;
        let c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
        if !(-1.0..=1.0).contains(&c2) {
            return Err(Error::InvalidArgument(format!(
                "target {:?} unreachable from base {:?}",
                target, self.base
            )));
        }
        let t2 = c2.acos();
        let t1 = dy.atan2(dx) - (l2 * t2.sin()).atan2(l1 + l2 * c2);
        Ok([wrap_angle(t1), wrap_angle(t2)])
    }

    /// Apply a clamped joint-delta command `[dθ1, dθ2, dgrip]`.
    pub fn apply_joint_delta(&mut self, d: &[f64]) {
        self.joint_angles[0] = wrap_angle(self.joint_angles[0] + d[0].clamp(-MAX_DQ, MAX_DQ));
        self.joint_angles[1] = wrap_angle(self.joint_angles[1] + d[1].clamp(-MAX_DQ, MAX_DQ));
        self.gripper = (self.gripper + d[2].clamp(-MAX_DG, MAX_DG)).clamp(0.0, 1.0);
    }

    /// Apply a clamped end-effector delta command `[dx, dy, dgrip]`: the tip
    /// translates (projected back into the reachable annulus) and the joints
    /// follow by inverse kinematics.
    pub fn apply_eef_delta(&mut self, d: &[f64]) {
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let scale = if norm > MAX_DX { MAX_DX / norm } else { 1.0 };
        let tip = self.tip();
        let mut nx = tip[0] + d[0] * scale;
        let mut ny = tip[1] + d[1] * scale;
        // project inside the annulus, away from the IK singularities
        let (lo, hi) = self.reach();
        let (lo, hi) = (lo.max(0.05), hi - 0.02);
        let rx = nx - self.base[0];
        let ry = ny - self.base[1];
        let r = (rx * rx + ry * ry).sqrt().max(1e-9);
        let rc = r.clamp(lo, hi);
        if (rc - r).abs() > 0.0 {
            nx = self.base[0] + rx / r * rc;
            ny = self.base[1] + ry / r * rc;
        }
        if let Ok(q) = self.ik([nx, ny]) {
            self.joint_angles = q;
        }
        self.gripper = (self.gripper + d[2].clamp(-MAX_DG, MAX_DG)).clamp(0.0, 1.0);
    }
}
