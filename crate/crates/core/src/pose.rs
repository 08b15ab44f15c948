//! Pose states, temporal pose deltas, and the plain-text pose track format.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::math::{Quat, Vec3};

pub const UNIT_QUAT_TOL: f64 = 1e-9;

/// One frame of articulation: per-joint local rotations plus the root rigid
/// transform.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseState {
    pub joints: Vec<Quat>,
    pub root_rot: Quat,
    pub root_trans: Vec3,
}

impl PoseState {
    pub fn identity(j: usize) -> PoseState {
        PoseState {
            joints: vec![Quat::IDENTITY; j],
            root_rot: Quat::IDENTITY,
            root_trans: Vec3::ZERO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, q) in self.joints.iter().enumerate() {
            if !q.is_unit(UNIT_QUAT_TOL) {
                return Err(CoreError::Contract(format!(
                    "joint {i} quaternion not unit norm (|q| = {})",
                    q.norm()
                )));
            }
        }
        if !self.root_rot.is_unit(UNIT_QUAT_TOL) {
            return Err(CoreError::Contract("root quaternion not unit norm".into()));
        }
        Ok(())
    }
}

/// Temporal derivative of a pose: per-joint and root rotation deltas as
/// canonical quaternions, root translation delta as a vector difference.
#[derive(Clone, Debug)]
pub struct PoseDelta {
    pub joints: Vec<Quat>,
    pub root_rot: Quat,
    pub root_trans: Vec3,
}

impl PoseDelta {
    pub fn identity(j: usize) -> PoseDelta {
        PoseDelta {
            joints: vec![Quat::IDENTITY; j],
            root_rot: Quat::IDENTITY,
            root_trans: Vec3::ZERO,
        }
    }
}

/// Rotation delta via matrices: quat(R(a) R(b)^T), canonicalized. Going
/// through matrices collapses the quaternion double cover.
fn rot_delta(a: Quat, b: Quat) -> Quat {
    let m = a.to_matrix().mul_mat(&b.to_matrix().transpose());
    Quat::from_matrix(&m)
}

/// Delta from frame k-1 to frame k.
pub fn pose_delta(k: &PoseState, km1: &PoseState) -> PoseDelta {
    assert_eq!(k.joints.len(), km1.joints.len(), "pose joint count mismatch");
    PoseDelta {
        joints: k
            .joints
            .iter()
            .zip(&km1.joints)
            .map(|(a, b)| rot_delta(*a, *b))
            .collect(),
        root_rot: rot_delta(k.root_rot, km1.root_rot),
        root_trans: k.root_trans - km1.root_trans,
    }
}

// ---------------------------------------------------------------------------
// Plain-text pose track format
// ---------------------------------------------------------------------------
//
//   fps <rate>
//   joints <J>
//   <root w x y z> <tx ty tz> <q0 w x y z> ... <q{J-1} w x y z>   (one frame per line)

#[derive(Clone, Debug)]
pub struct PoseTrack {
    pub fps: f64,
    pub frames: Vec<PoseState>,
}

impl PoseTrack {
    pub fn save(&self, path: &Path) -> Result<()> {
        let j = self.frames.first().map_or(0, |p| p.joints.len());
        let mut out = String::new();
        out.push_str(&format!("fps {}\n", self.fps));
        out.push_str(&format!("joints {j}\n"));
        for p in &self.frames {
            let mut fields: Vec<String> = Vec::with_capacity(7 + 4 * j);
            for v in p.root_rot.to_array() {
                fields.push(format!("{v}"));
            }
            for v in p.root_trans.to_array() {
                fields.push(format!("{v}"));
            }
            for q in &p.joints {
                for v in q.to_array() {
                    fields.push(format!("{v}"));
                }
            }
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PoseTrack> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Data(format!("cannot read poses {path:?}: {e}")))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let fps = parse_header(lines.next(), "fps")?;
        let j = parse_header(lines.next(), "joints")? as usize;
        let mut frames = Vec::new();
        for (ln, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| CoreError::Data(format!("pose line {}: {e}", ln + 3)))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 7 + 4 * j {
                return Err(CoreError::Data(format!(
                    "pose line {}: expected {} values, got {}",
                    ln + 3,
                    7 + 4 * j,
                    vals.len()
                )));
            }
            let q = |o: usize| Quat::new(vals[o], vals[o + 1], vals[o + 2], vals[o + 3]);
            let pose = PoseState {
                root_rot: q(0),
                root_trans: Vec3 {
                    x: vals[4],
                    y: vals[5],
                    z: vals[6],
                },
                joints: (0..j).map(|i| q(7 + 4 * i)).collect(),
            };
            pose.validate()?;
            frames.push(pose);
        }
        Ok(PoseTrack { fps, frames })
    }
}

fn parse_header(line: Option<&str>, key: &str) -> Result<f64> {
    let line = line.ok_or_else(|| CoreError::Data(format!("missing `{key}` header")))?;
    let mut it = line.split_whitespace();
    match (it.next(), it.next()) {
        (Some(k), Some(v)) if k == key => v
            .parse()
            .map_err(|e| CoreError::Data(format!("bad `{key}` header: {e}"))),
        _ => Err(CoreError::Data(format!("expected `{key} <value>` header"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;

    #[test]
    fn delta_of_identical_poses_is_identity() {
        let p = PoseState::identity(3);
        let d = pose_delta(&p, &p);
        assert_eq!(d.joints[0], Quat::IDENTITY);
        assert_eq!(d.root_trans, Vec3::ZERO);
    }

    #[test]
    fn ninety_then_one_eighty_about_z() {
        let z = vec3(0.0, 0.0, 1.0);
        let mut a = PoseState::identity(1);
        a.joints[0] = Quat::from_axis_angle(z, std::f64::consts::FRAC_PI_2);
        let mut b = PoseState::identity(1);
        b.joints[0] = Quat::from_axis_angle(z, std::f64::consts::PI);
        let d = pose_delta(&b, &a);
        let expect = Quat::from_axis_angle(z, std::f64::consts::FRAC_PI_2);
        assert!((d.joints[0].w - expect.w).abs() < 1e-12);
        assert!((d.joints[0].z - expect.z).abs() < 1e-12);
    }

    #[test]
    fn sign_flipped_quaternion_gives_identity_delta() {
        let q = Quat::from_axis_angle(vec3(0.3, 0.8, -0.1), 1.2);
        let mut a = PoseState::identity(1);
        a.joints[0] = q;
        let mut b = PoseState::identity(1);
        b.joints[0] = Quat::new(-q.w, -q.x, -q.y, -q.z);
        let d = pose_delta(&b, &a);
        assert!((d.joints[0].w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_composes_back() {
        let a = Quat::from_axis_angle(vec3(1.0, 0.4, 0.0), 0.7);
        let b = Quat::from_axis_angle(vec3(-0.2, 1.0, 0.5), -1.1);
        let mut pa = PoseState::identity(1);
        pa.joints[0] = a;
        let mut pb = PoseState::identity(1);
        pb.joints[0] = b;
        let d = pose_delta(&pb, &pa);
        let recomposed = d.joints[0].to_matrix().mul_mat(&a.to_matrix());
        assert!(recomposed.max_abs_diff(&b.to_matrix()) < 1e-9);
    }

    #[test]
    fn track_round_trip_is_exact() {
        let mut frames = Vec::new();
        for i in 0..4 {
            let mut p = PoseState::identity(2);
            p.joints[0] = Quat::from_axis_angle(vec3(0.0, 0.0, 1.0), 0.17 * i as f64);
            p.root_trans = vec3(0.01 * i as f64, 0.0, -0.3);
            frames.push(p);
        }
        let track = PoseTrack { fps: 30.0, frames };
        let dir = std::env::temp_dir().join("dynbody_pose_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.txt");
        track.save(&path).unwrap();
        let back = PoseTrack::load(&path).unwrap();
        assert_eq!(back.fps, 30.0);
        assert_eq!(back.frames.len(), 4);
        // Shortest round-trip float formatting is exact.
        assert_eq!(back.frames[3], track.frames[3]);
        std::fs::remove_file(&path).unwrap();
    }
}
