//! Synthetic articulated sequence with oracle soft-tissue dynamics.
//!
//! The body is the built-in capsule humanoid posed rigidly per bone, plus
//! soft-tissue bulges: spheres anchored on the torso whose radius follows a
//! single-DOF damped spring driven by the swinging arm's angular
//! acceleration, `m x'' = -k x - c x' + gain * theta''`. The union SDF is an
//! exact signed distance on exposed surfaces away from part seams, and the
//! per-frame surface is sampled into oriented point scans.
//!
//! Scan density is biased toward the bulge spheres (they are the dynamic
//! signal and would otherwise receive a vanishing share of samples).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math::{vec3, Quat, Rigid, Vec3};
use crate::pose::{PoseState, PoseTrack};
use crate::scan_io::ScanData;
use crate::skinning::joint_transforms;
use crate::template::{humanoid_capsules, joints, Template};

pub fn capsule_sdf(p: Vec3, a: Vec3, b: Vec3, r: f64) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm() - r
}

pub fn sphere_sdf(p: Vec3, c: Vec3, r: f64) -> f64 {
    (p - c).norm() - r
}

/// One posed analytic primitive.
#[derive(Clone, Copy, Debug)]
pub enum Primitive {
    Capsule { a: Vec3, b: Vec3, r: f64 },
    Sphere { c: Vec3, r: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Capsule { a, b, r } => capsule_sdf(p, a, b, r),
            Primitive::Sphere { c, r } => sphere_sdf(p, c, r),
        }
    }

    pub fn normal(&self, p: Vec3) -> Vec3 {
        match *self {
            Primitive::Capsule { a, b, r: _ } => {
                let ab = b - a;
                let t = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
                (p - (a + ab * t)).normalized()
            }
            Primitive::Sphere { c, .. } => (p - c).normalized(),
        }
    }

    fn area(&self) -> f64 {
        match *self {
            Primitive::Capsule { a, b, r } => {
                let l = (b - a).norm();
                2.0 * std::f64::consts::PI * r * l + 4.0 * std::f64::consts::PI * r * r
            }
            Primitive::Sphere { r, .. } => 4.0 * std::f64::consts::PI * r * r,
        }
    }
}

/// Rest-frame anchor points of the bulge spheres, all in the rigid pelvis
/// zone of the torso so the oracle and the skinned observers move together.
pub fn bulge_anchors() -> Vec<Vec3> {
    vec![
        vec3(0.0, 1.04, 0.16),      // belly
        vec3(0.0, 1.02, -0.16),     // lower back
        vec3(-0.113, 1.03, 0.113),  // right-front diagonal
    ]
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OracleParams {
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
    /// Bulge radius at zero spring displacement (meters).
    pub bulge_base_radius: f64,
    /// Drive gain applied to the arm's angular acceleration.
    pub drive_gain: f64,
    /// Arm swing amplitude (radians) and frequency (Hz).
    pub arm_amplitude: f64,
    pub arm_frequency: f64,
    /// Arm swing phase offset (radians).
    pub arm_phase: f64,
    /// Root vertical bob amplitude (meters) and frequency (Hz).
    pub root_bob: f64,
    pub root_bob_frequency: f64,
    /// Spring initial conditions.
    pub x0: f64,
    pub v0: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        // Spring resonant with the arm swing; light damping keeps the bulge
        // phase distinct from the pose for several seconds.
        let f = 0.8;
        let k = (2.0 * std::f64::consts::PI * f).powi(2);
        OracleParams {
            mass: 1.0,
            stiffness: k,
            damping: 2.0 * 0.08 * k.sqrt(),
            bulge_base_radius: 0.03,
            drive_gain: 0.005,
            arm_amplitude: 0.6,
            arm_frequency: f,
            arm_phase: 0.0,
            root_bob: 0.02,
            root_bob_frequency: 0.4,
            x0: 0.0,
            v0: 0.0,
        }
    }
}

impl OracleParams {
    /// Held-out variant: same body and pose distribution, different spring
    /// state and swing phase, so shape history is required to predict it.
    pub fn test_variant(&self) -> OracleParams {
        OracleParams {
            x0: 0.015,
            v0: 0.05,
            arm_phase: 2.0,
            ..*self
        }
    }
}

/// RK4 integration of `m x'' = -k x - c x' + drive(t)` at fixed step `dt`,
/// sampled every `sample_dt`.
pub fn simulate_spring(
    mass: f64,
    stiffness: f64,
    damping: f64,
    x0: f64,
    v0: f64,
    drive: impl Fn(f64) -> f64,
    t_end: f64,
    sample_dt: f64,
    dt: f64,
) -> Vec<f64> {
    let accel = |t: f64, x: f64, v: f64| (-stiffness * x - damping * v + drive(t)) / mass;
    let mut x = x0;
    let mut v = v0;
    let mut t = 0.0;
    let mut out = vec![x0];
    let mut next_sample = sample_dt;
    while next_sample <= t_end + 1e-12 {
        while t < next_sample - 1e-12 {
            let h = dt.min(next_sample - t);
            let (k1x, k1v) = (v, accel(t, x, v));
            let (k2x, k2v) = (v + 0.5 * h * k1v, accel(t + 0.5 * h, x + 0.5 * h * k1x, v + 0.5 * h * k1v));
            let (k3x, k3v) = (v + 0.5 * h * k2v, accel(t + 0.5 * h, x + 0.5 * h * k2x, v + 0.5 * h * k2v));
            let (k4x, k4v) = (v + h * k3v, accel(t + h, x + h * k3x, v + h * k3v));
            x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            t += h;
        }
        out.push(x);
        next_sample += sample_dt;
    }
    out
}

#[derive(Clone, Debug)]
pub struct OracleFrame {
    pub primitives: Vec<Primitive>,
}

impl OracleFrame {
    pub fn sdf(&self, q: Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.sdf(q))
            .fold(f64::INFINITY, f64::min)
    }
}

/// The generated sequence: pose track, spring amplitudes, posed primitives.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub params: OracleParams,
    pub fps: f64,
    pub track: PoseTrack,
    pub amplitudes: Vec<f64>,
    pub frames: Vec<OracleFrame>,
}

impl SyntheticSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn sdf(&self, frame: usize, q: Vec3) -> f64 {
        self.frames[frame].sdf(q)
    }
}

fn arm_angle(p: &OracleParams, t: f64) -> f64 {
    p.arm_amplitude * (2.0 * std::f64::consts::PI * p.arm_frequency * t + p.arm_phase).sin()
}

fn arm_accel(p: &OracleParams, t: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * p.arm_frequency;
    -p.arm_amplitude * w * w * (w * t + p.arm_phase).sin()
}

fn pose_at(p: &OracleParams, template: &Template, t: f64) -> PoseState {
    let mut pose = PoseState::identity(template.joint_count());
    let theta = arm_angle(p, t);
    let z = vec3(0.0, 0.0, 1.0);
    pose.joints[joints::L_SHOULDER] = Quat::from_axis_angle(z, theta);
    pose.joints[joints::R_SHOULDER] = Quat::from_axis_angle(z, -theta);
    pose.root_trans = vec3(
        0.0,
        p.root_bob * (2.0 * std::f64::consts::PI * p.root_bob_frequency * t).sin(),
        0.0,
    );
    pose
}

/// Generate `n_frames` at `fps`. Errors on non-positive mass/stiffness or a
/// parameter set that would collapse a bulge radius to zero.
pub fn generate_synthetic(
    params: &OracleParams,
    template: &Template,
    n_frames: usize,
    fps: f64,
) -> Result<SyntheticSequence> {
    if params.mass <= 0.0 || params.stiffness <= 0.0 {
        return Err(CoreError::Config(
            "oracle mass and stiffness must be positive".into(),
        ));
    }
    if params.damping < 0.0 {
        return Err(CoreError::Config("oracle damping must be non-negative".into()));
    }
    let t_end = (n_frames.saturating_sub(1)) as f64 / fps;
    let amplitudes = simulate_spring(
        params.mass,
        params.stiffness,
        params.damping,
        params.x0,
        params.v0,
        |t| params.drive_gain * arm_accel(params, t),
        t_end,
        1.0 / fps,
        1e-4,
    );
    let amplitudes = amplitudes[..n_frames].to_vec();
    for (i, x) in amplitudes.iter().enumerate() {
        let r = params.bulge_base_radius + x;
        if r < 2e-3 {
            return Err(CoreError::Numerical(format!(
                "bulge radius collapses to {r:.4} m at frame {i}; reduce drive or raise base radius"
            )));
        }
    }

    let capsules = humanoid_capsules();
    let anchors = bulge_anchors();
    let mut frames = Vec::with_capacity(n_frames);
    let mut poses = Vec::with_capacity(n_frames);
    for (i, &x) in amplitudes.iter().enumerate() {
        let t = i as f64 / fps;
        let pose = pose_at(params, template, t);
        let world = joint_transforms(template, &pose)?;
        let mut prims: Vec<Primitive> = capsules
            .iter()
            .map(|c| {
                let g: &Rigid = &world[bone_for_capsule(c.bone)];
                Primitive::Capsule {
                    a: g.apply(c.a),
                    b: g.apply(c.b),
                    r: c.radius,
                }
            })
            .collect();
        let g = &world[joints::PELVIS];
        for anchor in &anchors {
            prims.push(Primitive::Sphere {
                c: g.apply(*anchor),
                r: params.bulge_base_radius + x,
            });
        }
        frames.push(OracleFrame { primitives: prims });
        poses.push(pose);
    }
    Ok(SyntheticSequence {
        params: *params,
        fps,
        track: PoseTrack { fps, frames: poses },
        amplitudes,
        frames,
    })
}

fn bone_for_capsule(bone: usize) -> usize {
    bone
}

/// Fraction of scan samples drawn from the bulge spheres.
const BULGE_SAMPLE_SHARE: f64 = 0.25;

/// Sample an oriented point scan of the union surface at `frame`.
/// Points landing inside another primitive are rejected; surviving points
/// carry the exact primitive normal.
pub fn sample_scan(seq: &SyntheticSequence, frame: usize, n: usize, seed: u64) -> ScanData {
    let prims = &seq.frames[frame].primitives;
    let n_caps = prims
        .iter()
        .filter(|p| matches!(p, Primitive::Capsule { .. }))
        .count();
    let mut rng = dynbody_ad::init::stream(seed, &format!("scan-{frame}"));

    // Area tables for the two pools (body capsules / bulge spheres).
    let body: Vec<usize> = (0..n_caps).collect();
    let bulge: Vec<usize> = (n_caps..prims.len()).collect();
    let body_areas: Vec<f64> = body.iter().map(|&i| prims[i].area()).collect();
    let bulge_areas: Vec<f64> = bulge.iter().map(|&i| prims[i].area()).collect();
    let body_total: f64 = body_areas.iter().sum();
    let bulge_total: f64 = bulge_areas.iter().sum();

    let mut scan = ScanData::default();
    let mut guard = 0usize;
    while scan.points.len() < n {
        guard += 1;
        if guard > 200 * n {
            // Pathological parameters only; keep what we have.
            break;
        }
        let from_bulge = !bulge.is_empty() && rng.gen::<f64>() < BULGE_SAMPLE_SHARE;
        let (pool, areas, total) = if from_bulge {
            (&bulge, &bulge_areas, bulge_total)
        } else {
            (&body, &body_areas, body_total)
        };
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = pool[pool.len() - 1];
        for (slot, &i) in pool.iter().enumerate() {
            if pick < areas[slot] {
                chosen = i;
                break;
            }
            pick -= areas[slot];
        }
        let p = sample_primitive_surface(&prims[chosen], &mut rng);
        // Reject points swallowed by (or ambiguously close to) other parts.
        let mut keep = true;
        for (i, other) in prims.iter().enumerate() {
            if i == chosen {
                continue;
            }
            if other.sdf(p) < 1e-7 {
                keep = false;
                break;
            }
        }
        if keep {
            scan.normals.push(prims[chosen].normal(p));
            scan.points.push(p);
        }
    }
    scan
}

fn sample_unit_sphere(rng: &mut impl Rng) -> Vec3 {
    // Marsaglia rejection; exact uniformity.
    loop {
        let x = rng.gen::<f64>() * 2.0 - 1.0;
        let y = rng.gen::<f64>() * 2.0 - 1.0;
        let z = rng.gen::<f64>() * 2.0 - 1.0;
        let v = vec3(x, y, z);
        let n2 = v.norm_sq();
        if n2 > 1e-9 && n2 <= 1.0 {
            return v * (1.0 / n2.sqrt());
        }
    }
}

fn sample_primitive_surface(prim: &Primitive, rng: &mut impl Rng) -> Vec3 {
    match *prim {
        Primitive::Sphere { c, r } => c + sample_unit_sphere(rng) * r,
        Primitive::Capsule { a, b, r } => {
            let l = (b - a).norm();
            let cyl_area = 2.0 * std::f64::consts::PI * r * l;
            let cap_area = 4.0 * std::f64::consts::PI * r * r;
            let axis = (b - a) * (1.0 / l);
            if rng.gen::<f64>() * (cyl_area + cap_area) < cyl_area {
                let helper = if axis.x.abs() < 0.9 {
                    vec3(1.0, 0.0, 0.0)
                } else {
                    vec3(0.0, 1.0, 0.0)
                };
                let e1 = axis.cross(helper).normalized();
                let e2 = axis.cross(e1).normalized();
                let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                let t = rng.gen::<f64>();
                a + (b - a) * t + (e1 * theta.cos() + e2 * theta.sin()) * r
            } else {
                let d = sample_unit_sphere(rng);
                // Hemisphere toward the matching end.
                if d.dot(axis) >= 0.0 {
                    b + d * r
                } else {
                    a + d * r
                }
            }
        }
    }
}
