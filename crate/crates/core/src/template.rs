//! Articulated template: rest mesh, skinning weights, joint hierarchy, UV
//! atlas, region labels, and the observer subset.
//!
//! The built-in template is a procedurally generated low-poly humanoid made
//! of capsule parts (torso, head, two two-segment arms, a leg column) with
//! one UV chart per part. Charts are inset inside disjoint atlas boxes so
//! bilinear taps never bleed across parts. A loader accepts user templates
//! with the same JSON schema.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::math::{vec3, Vec3};

pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Body,
    Face,
    Hands,
    Feet,
}

impl Region {
    /// Regions whose dynamic features get frozen during rollouts.
    pub fn is_frozen(self) -> bool {
        matches!(self, Region::Face | Region::Hands | Region::Feet)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Parent joint index; -1 for the root.
    pub parent: i64,
    pub rest_pos: Vec3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Template {
    pub vertices: Vec<Vec3>,
    /// Analytic rest normals (unit length).
    pub normals: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Dense per-vertex skinning weights, one row of J entries summing to 1.
    pub weights: Vec<Vec<f64>>,
    pub joints: Vec<Joint>,
    /// Per-vertex UV coordinates in [0,1]^2.
    pub uvs: Vec<[f64; 2]>,
    pub regions: Vec<Region>,
    /// Observer subset: indices into `vertices`, length M.
    pub observers: Vec<usize>,
    /// Nearest observer per vertex (rest pose); used to expand observer
    /// signals to full-vertex channels before UV rasterization.
    pub nearest_observer: Vec<usize>,
    /// Mean nearest-neighbor spacing among rest observers (meters).
    pub observer_spacing: f64,
}

impl Template {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn observer_count(&self) -> usize {
        self.observers.len()
    }

    /// J x J binary adjacency: identity plus parent/child pairs (symmetric).
    pub fn joint_adjacency(&self) -> Vec<Vec<f64>> {
        let j = self.joints.len();
        let mut w = vec![vec![0.0; j]; j];
        for (n, joint) in self.joints.iter().enumerate() {
            w[n][n] = 1.0;
            if joint.parent >= 0 {
                let p = joint.parent as usize;
                w[n][p] = 1.0;
                w[p][n] = 1.0;
            }
        }
        w
    }

    /// Per-vertex localization masks `W * omega_i`, a V x J matrix.
    pub fn localization_masks(&self) -> Vec<Vec<f64>> {
        let adj = self.joint_adjacency();
        let j = self.joints.len();
        self.weights
            .iter()
            .map(|omega| {
                (0..j)
                    .map(|n| (0..j).map(|m| adj[n][m] * omega[m]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        let j = self.joints.len();
        if self.normals.len() != v
            || self.weights.len() != v
            || self.uvs.len() != v
            || self.regions.len() != v
            || self.nearest_observer.len() != v
        {
            return Err(CoreError::Data(
                "template per-vertex arrays have inconsistent lengths".into(),
            ));
        }
        for (i, row) in self.weights.iter().enumerate() {
            if row.len() != j {
                return Err(CoreError::Data(format!(
                    "vertex {i}: weight row has {} entries for {j} joints",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL || row.iter().any(|w| *w < 0.0) {
                return Err(CoreError::Data(format!(
                    "vertex {i}: weights must be non-negative and sum to 1 (sum {sum})"
                )));
            }
        }
        for (i, uv) in self.uvs.iter().enumerate() {
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(CoreError::Data(format!(
                    "vertex {i}: uv {uv:?} outside [0,1]^2"
                )));
            }
        }
        for (k, joint) in self.joints.iter().enumerate() {
            if joint.parent >= j as i64 || (joint.parent < 0 && k != 0) {
                return Err(CoreError::Data(format!("joint {k}: bad parent")));
            }
        }
        for &o in &self.observers {
            if o >= v {
                return Err(CoreError::Data(format!("observer index {o} out of range")));
            }
        }
        for f in &self.faces {
            if f.iter().any(|&i| i >= v) {
                return Err(CoreError::Data("face index out of range".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Template> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Data(format!("cannot read template {path:?}: {e}")))?;
        let t: Template = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Procedural humanoid
// ---------------------------------------------------------------------------

/// Joint ids of the built-in humanoid.
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const CHEST: usize = 1;
    pub const HEAD: usize = 2;
    pub const L_SHOULDER: usize = 3;
    pub const L_ELBOW: usize = 4;
    pub const R_SHOULDER: usize = 5;
    pub const R_ELBOW: usize = 6;
    pub const LEGS: usize = 7;
    pub const COUNT: usize = 8;
}

/// One capsule of the built-in body, also used by the analytic oracle.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleSpec {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    /// Joint whose rigid transform carries this capsule.
    pub bone: usize,
}

/// Rest-pose capsules of the built-in humanoid (shared with the oracle SDF).
pub fn humanoid_capsules() -> Vec<CapsuleSpec> {
    use joints::*;
    vec![
        CapsuleSpec {
            a: vec3(0.0, 1.00, 0.0),
            b: vec3(0.0, 1.42, 0.0),
            radius: 0.16,
            bone: PELVIS, // torso; vertices blend PELVIS->CHEST by height
        },
        CapsuleSpec {
            a: vec3(0.0, 1.55, 0.0),
            b: vec3(0.0, 1.70, 0.0),
            radius: 0.09,
            bone: HEAD,
        },
        CapsuleSpec {
            a: vec3(0.18, 1.45, 0.0),
            b: vec3(0.45, 1.45, 0.0),
            radius: 0.055,
            bone: L_SHOULDER,
        },
        CapsuleSpec {
            a: vec3(0.45, 1.45, 0.0),
            b: vec3(0.72, 1.45, 0.0),
            radius: 0.045,
            bone: L_ELBOW,
        },
        CapsuleSpec {
            a: vec3(-0.18, 1.45, 0.0),
            b: vec3(-0.45, 1.45, 0.0),
            radius: 0.055,
            bone: R_SHOULDER,
        },
        CapsuleSpec {
            a: vec3(-0.45, 1.45, 0.0),
            b: vec3(-0.72, 1.45, 0.0),
            radius: 0.045,
            bone: R_ELBOW,
        },
        CapsuleSpec {
            a: vec3(0.0, 0.85, 0.0),
            b: vec3(0.0, 0.20, 0.0),
            radius: 0.13,
            bone: LEGS,
        },
    ]
}

fn humanoid_joints() -> Vec<Joint> {
    let mk = |name: &str, parent: i64, p: Vec3| Joint {
        name: name.into(),
        parent,
        rest_pos: p,
    };
    vec![
        mk("pelvis", -1, vec3(0.0, 1.00, 0.0)),
        mk("chest", 0, vec3(0.0, 1.30, 0.0)),
        mk("head", 1, vec3(0.0, 1.55, 0.0)),
        mk("l_shoulder", 1, vec3(0.18, 1.45, 0.0)),
        mk("l_elbow", 3, vec3(0.45, 1.45, 0.0)),
        mk("r_shoulder", 1, vec3(-0.18, 1.45, 0.0)),
        mk("r_elbow", 5, vec3(-0.45, 1.45, 0.0)),
        mk("legs", 0, vec3(0.0, 0.85, 0.0)),
    ]
}

/// Disjoint atlas boxes per part, inset so bilinear footprints stay inside.
const CHART_INSET: f64 = 0.045;
const CHART_BOXES: [[f64; 4]; 7] = [
    // [u0, u1, v0, v1]
    [0.00, 0.30, 0.00, 0.50], // torso
    [0.60, 0.85, 0.00, 0.50], // head
    [0.00, 0.25, 0.50, 1.00], // l_upper
    [0.25, 0.50, 0.50, 1.00], // l_fore
    [0.50, 0.75, 0.50, 1.00], // r_upper
    [0.75, 1.00, 0.50, 1.00], // r_fore
    [0.30, 0.60, 0.00, 0.50], // legs
];

struct PartTess {
    segments: usize,
    rings: usize,
    cap_rings: usize,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Blend weight toward the secondary joint for one vertex of a part.
/// Returns (joint_a, joint_b, w_b). w_b = 0 means fully bound to joint_a.
fn skin_blend(part: usize, p: Vec3) -> (usize, usize, f64) {
    use joints::*;
    match part {
        0 => (PELVIS, CHEST, smoothstep((p.y - 1.05) / 0.30)),
        1 => (CHEST, HEAD, smoothstep((p.y - 1.48) / 0.12)),
        2 => (CHEST, L_SHOULDER, smoothstep((p.x - 0.14) / 0.10)),
        3 => (L_SHOULDER, L_ELBOW, smoothstep((p.x - 0.41) / 0.08)),
        4 => (CHEST, R_SHOULDER, smoothstep((-p.x - 0.14) / 0.10)),
        5 => (R_SHOULDER, R_ELBOW, smoothstep((-p.x - 0.41) / 0.08)),
        6 => (PELVIS, LEGS, smoothstep((0.90 - p.y) / 0.10)),
        _ => unreachable!(),
    }
}

fn region_of(p: Vec3) -> Region {
    if p.y > 1.64 {
        Region::Face
    } else if p.x.abs() > 0.68 {
        Region::Hands
    } else if p.y < 0.22 {
        Region::Feet
    } else {
        Region::Body
    }
}

/// Build the procedural humanoid with `m_observers` farthest-point-sampled
/// observer vertices. Deterministic for a given seed.
pub fn build_humanoid(m_observers: usize, seed: u64) -> Result<Template> {
    let capsules = humanoid_capsules();
    let tess = [
        PartTess { segments: 24, rings: 14, cap_rings: 6 }, // torso
        PartTess { segments: 16, rings: 5, cap_rings: 4 },  // head
        PartTess { segments: 12, rings: 7, cap_rings: 3 },  // l_upper
        PartTess { segments: 12, rings: 7, cap_rings: 3 },  // l_fore
        PartTess { segments: 12, rings: 7, cap_rings: 3 },  // r_upper
        PartTess { segments: 12, rings: 7, cap_rings: 3 },  // r_fore
        PartTess { segments: 20, rings: 11, cap_rings: 5 }, // legs
    ];

    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    let mut uvs = Vec::new();
    let mut weights: Vec<Vec<f64>> = Vec::new();
    let mut regions = Vec::new();

    for (part, (cap, t)) in capsules.iter().zip(&tess).enumerate() {
        let axis = (cap.b - cap.a).normalized();
        // Stable orthonormal frame around the axis.
        let helper = if axis.x.abs() < 0.9 {
            vec3(1.0, 0.0, 0.0)
        } else {
            vec3(0.0, 1.0, 0.0)
        };
        let e1 = axis.cross(helper).normalized();
        let e2 = axis.cross(e1).normalized();

        // Profile rows: bottom cap (pole included), cylinder, top cap (pole).
        // Each row: (center, radial scale, axial normal component).
        let mut rows: Vec<(Vec3, f64, f64)> = Vec::new();
        for j in 0..t.cap_rings {
            let phi = -std::f64::consts::FRAC_PI_2
                + (j as f64 / t.cap_rings as f64) * std::f64::consts::FRAC_PI_2;
            rows.push((cap.a + axis * (cap.radius * phi.sin()), phi.cos(), phi.sin()));
        }
        for j in 0..=t.rings {
            let s = j as f64 / t.rings as f64;
            rows.push((cap.a + (cap.b - cap.a) * s, 1.0, 0.0));
        }
        for j in 1..=t.cap_rings {
            let phi = (j as f64 / t.cap_rings as f64) * std::f64::consts::FRAC_PI_2;
            rows.push((cap.b + axis * (cap.radius * phi.sin()), phi.cos(), phi.sin()));
        }

        let n_rows = rows.len();
        let segs = t.segments;
        let base = vertices.len();
        let bx = CHART_BOXES[part];
        let (u0, u1) = (bx[0] + CHART_INSET, bx[1] - CHART_INSET);
        let (v0, v1) = (bx[2] + CHART_INSET, bx[3] - CHART_INSET);

        for (ri, &(center, rad, axn)) in rows.iter().enumerate() {
            for c in 0..=segs {
                let theta = 2.0 * std::f64::consts::PI * c as f64 / segs as f64;
                let radial = e1 * theta.cos() + e2 * theta.sin();
                let p = center + radial * (cap.radius * rad);
                let n = (radial * rad + axis * axn).normalized();
                vertices.push(p);
                normals.push(n);
                uvs.push([
                    u0 + (u1 - u0) * c as f64 / segs as f64,
                    v0 + (v1 - v0) * ri as f64 / (n_rows - 1) as f64,
                ]);
                let (ja, jb, wb) = skin_blend(part, p);
                let mut row = vec![0.0; joints::COUNT];
                row[ja] += 1.0 - wb;
                row[jb] += wb;
                weights.push(row);
                regions.push(region_of(p));
            }
        }
        for r in 0..n_rows - 1 {
            for c in 0..segs {
                let i00 = base + r * (segs + 1) + c;
                let i01 = i00 + 1;
                let i10 = i00 + segs + 1;
                let i11 = i10 + 1;
                faces.push([i00, i10, i11]);
                faces.push([i00, i11, i01]);
            }
        }
    }

    let observers = farthest_point_sample(&vertices, m_observers, seed)?;
    let nearest_observer = nearest_observer_map(&vertices, &observers);
    let observer_spacing = mean_observer_spacing(&vertices, &observers);

    let t = Template {
        vertices,
        normals,
        faces,
        weights,
        joints: humanoid_joints(),
        uvs,
        regions,
        observers,
        nearest_observer,
        observer_spacing,
    };
    t.validate()?;
    Ok(t)
}

/// Greedy farthest-point sampling; density-equalizing and deterministic.
fn farthest_point_sample(points: &[Vec3], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > points.len() {
        return Err(CoreError::Config(format!(
            "observer count {m} out of range for {} vertices",
            points.len()
        )));
    }
    use rand::Rng;
    let mut rng = dynbody_ad::init::stream(seed, "observers");
    let start = rng.gen_range(0..points.len());
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut cur = start;
    for _ in 0..m {
        chosen.push(cur);
        for (i, p) in points.iter().enumerate() {
            let d = (*p - points[cur]).norm_sq();
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
        // Next: farthest from the chosen set; ties to the lowest index.
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        cur = best;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

fn nearest_observer_map(points: &[Vec3], observers: &[usize]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (slot, &o) in observers.iter().enumerate() {
                let d = (*p - points[o]).norm_sq();
                if d < best_d {
                    best_d = d;
                    best = slot;
                }
            }
            best
        })
        .collect()
}

fn mean_observer_spacing(points: &[Vec3], observers: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &a) in observers.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, &b) in observers.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = (points[a] - points[b]).norm_sq();
            if d < best {
                best = d;
            }
        }
        total += best.sqrt();
    }
    total / observers.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn humanoid_builds_and_validates() {
        let t = build_humanoid(256, 7).unwrap();
        assert!(t.vertex_count() > 2000, "got {}", t.vertex_count());
        assert_eq!(t.observer_count(), 256);
        assert_eq!(t.joint_count(), joints::COUNT);
        // All regions present
        for r in [Region::Body, Region::Face, Region::Hands, Region::Feet] {
            assert!(t.regions.iter().any(|&x| x == r), "missing region {r:?}");
        }
    }

    #[test]
    fn vertices_lie_on_their_capsule() {
        let t = build_humanoid(64, 7).unwrap();
        let caps = humanoid_capsules();
        // Each vertex must be on the surface of at least one rest capsule.
        for (i, v) in t.vertices.iter().enumerate().step_by(17) {
            let on_any = caps.iter().any(|c| {
                let d = crate::synth::capsule_sdf(*v, c.a, c.b, c.radius);
                d.abs() < 1e-9
            });
            assert!(on_any, "vertex {i} not on any capsule surface");
        }
    }

    #[test]
    fn localization_masks_match_hand_chain() {
        // 3-joint chain 0-1-2 with 1-ring adjacency.
        let mk = |name: &str, parent: i64| Joint {
            name: name.into(),
            parent,
            rest_pos: vec3(0.0, 0.0, 0.0),
        };
        let t = Template {
            vertices: vec![Vec3::ZERO; 2],
            normals: vec![vec3(0.0, 1.0, 0.0); 2],
            faces: vec![],
            weights: vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]],
            joints: vec![mk("a", -1), mk("b", 0), mk("c", 1)],
            uvs: vec![[0.5, 0.5]; 2],
            regions: vec![Region::Body; 2],
            observers: vec![0, 1],
            nearest_observer: vec![0, 1],
            observer_spacing: 1.0,
        };
        let masks = t.localization_masks();
        // omega = e_1 -> W omega = (1,1,1): all joints pass through.
        assert_eq!(masks[0], vec![1.0, 1.0, 1.0]);
        // omega = e_0 -> W omega = (1,1,0): joint 2 suppressed.
        assert_eq!(masks[1], vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let t = build_humanoid(64, 7).unwrap();
        let dir = std::env::temp_dir().join("dynbody_template_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.json");
        t.save(&path).unwrap();
        let back = Template::load(&path).unwrap();
        assert_eq!(t.vertices.len(), back.vertices.len());
        assert_eq!(t.observers, back.observers);
        assert_eq!(t.vertices[100], back.vertices[100]);
        std::fs::remove_file(&path).unwrap();
    }
}
