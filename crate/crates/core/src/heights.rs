//! Implicit-surface state on observer points: signed heights along observer
//! normals, their compressed temporal differences, and ground-truth height
//! construction from scans.
//!
//! Heights are found by sampling f(v + t n) on a uniform bracket over
//! [h_min, h_max], taking the smallest-t sign change, and polishing it with a
//! secant iteration (bisection-guarded). Observers whose ray sees no zero
//! crossing fall back to h_min and are flagged invalid; they still
//! participate in derivatives at the value h_min.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::math::Vec3;
use crate::scan_io::{ScanData, TriMesh};
use crate::skinning::ObserverSet;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeightParams {
    pub h_min: f64,
    pub h_max: f64,
    /// Uniform bracketing samples before the secant polish.
    pub n_bracket: usize,
    /// Secant convergence: |f| below this is a root (meters).
    pub secant_tol: f64,
    pub secant_max_iter: usize,
}

impl Default for HeightParams {
    fn default() -> Self {
        HeightParams {
            h_min: -0.02,
            h_max: 0.08,
            n_bracket: 64,
            secant_tol: 1e-6,
            secant_max_iter: 20,
        }
    }
}

/// Signed heights for one frame, with per-entry root-found validity.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightField {
    pub heights: Vec<f64>,
    pub valid: Vec<bool>,
    pub frame: usize,
}

impl HeightField {
    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn all_in_range(&self, p: &HeightParams) -> bool {
        self.heights
            .iter()
            .all(|h| *h >= p.h_min - 1e-12 && *h <= p.h_max + 1e-12)
    }
}

/// `g(x) = sign(x) ln(alpha |x| + 1) beta`; emphasizes small differences.
pub fn g_transform(x: f64, alpha: f64, beta: f64) -> f64 {
    x.signum() * (alpha * x.abs() + 1.0).ln() * beta
}

/// Elementwise `g(h_k - h_{k-1})`.
pub fn height_delta(hk: &HeightField, hkm1: &HeightField, alpha: f64, beta: f64) -> Vec<f64> {
    assert_eq!(hk.len(), hkm1.len(), "height field length mismatch");
    hk.heights
        .iter()
        .zip(&hkm1.heights)
        .map(|(a, b)| g_transform(a - b, alpha, beta))
        .collect()
}

struct SecantState {
    lo: f64,
    f_lo: f64,
    hi: f64,
    f_hi: f64,
    x0: f64,
    f0: f64,
    x1: f64,
    f1: f64,
    iters: usize,
}

/// Encode heights for every observer against a batched SDF evaluator.
///
/// The evaluator receives query points and returns f at each; a NaN result is
/// reported as an error naming the offending observer. Bracket blocks are
/// evaluated lazily (most observers find their sign change in the first
/// blocks).
pub fn encode_heights<F>(
    eval: &mut F,
    obs: &ObserverSet,
    params: &HeightParams,
    frame: usize,
) -> Result<HeightField>
where
    F: FnMut(&[Vec3]) -> Vec<f64>,
{
    let m = obs.len();
    let n = params.n_bracket;
    assert!(n >= 2, "need at least 2 bracket samples");
    let dt = (params.h_max - params.h_min) / (n - 1) as f64;
    let t_of = |j: usize| params.h_min + dt * j as f64;

    let mut heights = vec![params.h_min; m];
    let mut valid = vec![false; m];

    // Phase 1: lazy bracketing in blocks along t, batched across observers.
    const BLOCK: usize = 16;
    let mut active: Vec<usize> = (0..m).collect();
    let mut prev_f: Vec<f64> = vec![0.0; m]; // f at the last sample of the previous block
    let mut brackets: Vec<Option<(f64, f64, f64, f64)>> = vec![None; m]; // (lo, f_lo, hi, f_hi)
    let mut exact: Vec<Option<f64>> = vec![None; m];

    let mut j0 = 0usize;
    while j0 < n && !active.is_empty() {
        let j1 = (j0 + BLOCK).min(n);
        let mut pts = Vec::with_capacity(active.len() * (j1 - j0));
        for &i in &active {
            for j in j0..j1 {
                pts.push(obs.positions[i] + obs.normals[i] * t_of(j));
            }
        }
        let vals = eval(&pts);
        assert_eq!(vals.len(), pts.len(), "evaluator returned wrong count");
        let mut next_active = Vec::with_capacity(active.len());
        for (slot, &i) in active.iter().enumerate() {
            let base = slot * (j1 - j0);
            let mut found = false;
            for j in j0..j1 {
                let fj = vals[base + (j - j0)];
                if fj.is_nan() {
                    return Err(CoreError::Numerical(format!(
                        "sdf evaluator returned NaN at observer {i} (t = {})",
                        t_of(j)
                    )));
                }
                if fj == 0.0 {
                    exact[i] = Some(t_of(j));
                    found = true;
                    break;
                }
                let f_prev = if j == 0 { f64::NAN } else if j == j0 { prev_f[i] } else { vals[base + (j - j0) - 1] };
                if j > 0 && f_prev * fj < 0.0 {
                    brackets[i] = Some((t_of(j - 1), f_prev, t_of(j), fj));
                    found = true;
                    break;
                }
            }
            if !found {
                prev_f[i] = vals[base + (j1 - j0) - 1];
                next_active.push(i);
            }
        }
        active = next_active;
        j0 = j1;
    }

    for (i, t) in exact.iter().enumerate() {
        if let Some(t) = t {
            heights[i] = *t;
            valid[i] = true;
        }
    }

    // Phase 2: secant polish, batched one evaluation per round.
    let mut states: Vec<(usize, SecantState)> = Vec::new();
    for (i, b) in brackets.iter().enumerate() {
        if let Some((lo, f_lo, hi, f_hi)) = *b {
            states.push((
                i,
                SecantState {
                    lo,
                    f_lo,
                    hi,
                    f_hi,
                    x0: lo,
                    f0: f_lo,
                    x1: hi,
                    f1: f_hi,
                    iters: 0,
                },
            ));
        }
    }
    while !states.is_empty() {
        let mut pts = Vec::with_capacity(states.len());
        let mut proposals = Vec::with_capacity(states.len());
        for (i, s) in &states {
            let denom = s.f1 - s.f0;
            let mut x2 = if denom != 0.0 {
                s.x1 - s.f1 * (s.x1 - s.x0) / denom
            } else {
                f64::NAN
            };
            if !x2.is_finite() || x2 <= s.lo || x2 >= s.hi {
                x2 = 0.5 * (s.lo + s.hi);
            }
            proposals.push(x2);
            pts.push(obs.positions[*i] + obs.normals[*i] * x2);
        }
        let vals = eval(&pts);
        let mut remaining = Vec::new();
        for ((mut entry, x2), f2) in states.into_iter().zip(proposals).zip(vals) {
            let (i, s) = (&entry.0, &mut entry.1);
            if f2.is_nan() {
                return Err(CoreError::Numerical(format!(
                    "sdf evaluator returned NaN at observer {i} during secant"
                )));
            }
            s.iters += 1;
            if f2.abs() < params.secant_tol || s.iters >= params.secant_max_iter {
                heights[*i] = x2;
                valid[*i] = true;
                continue;
            }
            if f2 * s.f_lo < 0.0 {
                s.hi = x2;
                s.f_hi = f2;
            } else {
                s.lo = x2;
                s.f_lo = f2;
            }
            s.x0 = s.x1;
            s.f0 = s.f1;
            s.x1 = x2;
            s.f1 = f2;
            remaining.push(entry);
        }
        states = remaining;
    }

    Ok(HeightField {
        heights,
        valid,
        frame,
    })
}

/// Heights from a scalar closure (analytic SDFs, tests).
pub fn encode_heights_fn(
    f: impl Fn(Vec3) -> f64,
    obs: &ObserverSet,
    params: &HeightParams,
    frame: usize,
) -> Result<HeightField> {
    let mut batch = |pts: &[Vec3]| pts.iter().map(|p| f(*p)).collect::<Vec<f64>>();
    encode_heights(&mut batch, obs, params, frame)
}

// ---------------------------------------------------------------------------
// Ground-truth heights
// ---------------------------------------------------------------------------

/// Exact ray-triangle construction: the smallest parametric hit of
/// `v + t n`, t in [h_min, h_max], over all scan triangles.
pub fn ground_truth_heights_mesh(
    mesh: &TriMesh,
    obs: &ObserverSet,
    params: &HeightParams,
    frame: usize,
) -> Result<HeightField> {
    if mesh.triangles.is_empty() {
        return Err(CoreError::Data("empty scan mesh".into()));
    }
    let mut heights = vec![params.h_min; obs.len()];
    let mut valid = vec![false; obs.len()];
    for i in 0..obs.len() {
        let mut best: Option<f64> = None;
        for tri in &mesh.triangles {
            if let Some(t) = ray_triangle(
                obs.positions[i],
                obs.normals[i],
                mesh.vertices[tri[0]],
                mesh.vertices[tri[1]],
                mesh.vertices[tri[2]],
            ) {
                if t >= params.h_min - 1e-12 && t <= params.h_max + 1e-12 {
                    best = Some(match best {
                        Some(b) => b.min(t),
                        None => t,
                    });
                }
            }
        }
        if let Some(t) = best {
            heights[i] = t.clamp(params.h_min, params.h_max);
            valid[i] = true;
        }
    }
    Ok(HeightField {
        heights,
        valid,
        frame,
    })
}

/// Signed distance proxy for an oriented point set: distance to the nearest
/// point, signed by the half-space of its normal. Smooth enough for the
/// secant away from the medial surface.
pub fn point_cloud_proxy_sdf<'a>(
    scan: &'a ScanData,
    hash: &'a crate::knn::SpatialHash,
) -> impl Fn(Vec3) -> f64 + 'a {
    move |q: Vec3| {
        let nearest = hash.knn(q, 1).expect("non-empty scan");
        let (i, d) = nearest[0];
        let side = (q - scan.points[i]).dot(scan.normals[i]);
        if side >= 0.0 {
            d
        } else {
            -d
        }
    }
}

/// Ground-truth heights from an oriented point cloud via the proxy SDF.
pub fn ground_truth_heights_points(
    scan: &ScanData,
    obs: &ObserverSet,
    params: &HeightParams,
    frame: usize,
) -> Result<HeightField> {
    if scan.is_empty() {
        return Err(CoreError::Data("empty scan".into()));
    }
    let hash = crate::knn::SpatialHash::build(&scan.points, 0.02);
    let f = point_cloud_proxy_sdf(scan, &hash);
    encode_heights_fn(f, obs, params, frame)
}

fn ray_triangle(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    // Moller-Trumbore, unbounded line; caller filters the t range.
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(p) * inv;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = d.dot(q) * inv;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    Some(e2.dot(q) * inv)
}

// ---------------------------------------------------------------------------
// Height sequence cache (flat binary with a shape header)
// ---------------------------------------------------------------------------

const HTS_MAGIC: &[u8; 8] = b"DBHTS001";

pub fn save_height_sequence(path: &Path, fields: &[HeightField]) -> Result<()> {
    let m = fields.first().map_or(0, |f| f.len());
    let mut buf = Vec::with_capacity(16 + fields.len() * m * 9);
    buf.extend_from_slice(HTS_MAGIC);
    buf.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    for f in fields {
        assert_eq!(f.len(), m, "ragged height sequence");
        for h in &f.heights {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        for v in &f.valid {
            buf.push(*v as u8);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_height_sequence(path: &Path) -> Result<Vec<HeightField>> {
    let buf = std::fs::read(path)?;
    if buf.len() < 16 || &buf[..8] != HTS_MAGIC {
        return Err(CoreError::Data(format!("{path:?}: not a height cache")));
    }
    let frames = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let rec = m * 8 + m;
    if buf.len() != 16 + frames * rec {
        return Err(CoreError::Data(format!("{path:?}: truncated height cache")));
    }
    let mut out = Vec::with_capacity(frames);
    for fi in 0..frames {
        let base = 16 + fi * rec;
        let heights = (0..m)
            .map(|i| {
                f64::from_le_bytes(buf[base + i * 8..base + i * 8 + 8].try_into().unwrap())
            })
            .collect();
        let valid = (0..m).map(|i| buf[base + m * 8 + i] != 0).collect();
        out.push(HeightField {
            heights,
            valid,
            frame: fi,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;
    use crate::template::Region;

    fn single_observer(v: Vec3, n: Vec3) -> ObserverSet {
        ObserverSet {
            positions: vec![v],
            normals: vec![n.normalized()],
            uvs: vec![[0.5, 0.5]],
            regions: vec![Region::Body],
            template_indices: vec![0],
        }
    }

    #[test]
    fn unit_sphere_analytic_root() {
        let obs = single_observer(vec3(0.97, 0.0, 0.0), vec3(1.0, 0.0, 0.0));
        let p = HeightParams::default();
        let h = encode_heights_fn(|q| q.norm() - 1.0, &obs, &p, 0).unwrap();
        assert!(h.valid[0]);
        assert!((h.heights[0] - 0.03).abs() < 1e-6, "h = {}", h.heights[0]);
    }

    #[test]
    fn observer_on_surface_gives_zero() {
        let obs = single_observer(vec3(1.0, 0.0, 0.0), vec3(1.0, 0.0, 0.0));
        let p = HeightParams::default();
        let h = encode_heights_fn(|q| q.norm() - 1.0, &obs, &p, 0).unwrap();
        assert!(h.valid[0]);
        assert!(h.heights[0].abs() < 1e-6);
    }

    #[test]
    fn no_root_falls_back_to_h_min() {
        let obs = single_observer(vec3(1.2, 0.0, 0.0), vec3(1.0, 0.0, 0.0));
        let p = HeightParams::default();
        let h = encode_heights_fn(|q| q.norm() - 1.0, &obs, &p, 0).unwrap();
        assert!(!h.valid[0]);
        assert_eq!(h.heights[0], p.h_min);
    }

    #[test]
    fn nan_from_evaluator_names_observer() {
        let obs = single_observer(vec3(0.97, 0.0, 0.0), vec3(1.0, 0.0, 0.0));
        let p = HeightParams::default();
        let err = encode_heights_fn(|_| f64::NAN, &obs, &p, 0).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("observer 0"), "message: {msg}");
    }

    #[test]
    fn g_transform_values_and_symmetry() {
        // 0.25 * ln(1000*0.01 + 1) = 0.25 ln(11)
        let expect = 0.25 * 11.0_f64.ln();
        assert!((g_transform(0.01, 1000.0, 0.25) - expect).abs() < 1e-15);
        assert_eq!(g_transform(0.0, 1000.0, 0.25), 0.0);
        for x in [1e-5, 3e-4, 0.01, 0.07] {
            assert_eq!(
                g_transform(-x, 1000.0, 0.25),
                -g_transform(x, 1000.0, 0.25)
            );
        }
    }

    #[test]
    fn delta_of_identical_fields_is_zero() {
        let h = HeightField {
            heights: vec![0.01, -0.005, 0.03],
            valid: vec![true; 3],
            frame: 1,
        };
        let d = height_delta(&h, &h, 1000.0, 0.25);
        assert!(d.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn minimum_root_selected_on_two_shell_sdf() {
        // Two thin spherical shells; the ray crosses four times. Compare the
        // secant result against a dense-sampling oracle at 1e-5 step.
        let shells = |q: Vec3| -> f64 {
            let r = q.norm();
            ((r - 1.0).abs() - 0.005).min((r - 1.04).abs() - 0.005)
        };
        let obs = single_observer(vec3(0.96, 0.0, 0.0), vec3(1.0, 0.0, 0.0));
        let p = HeightParams::default();
        let h = encode_heights_fn(shells, &obs, &p, 0).unwrap();

        // Dense-sampling oracle.
        let mut oracle = None;
        let mut prev = shells(vec3(0.96 + p.h_min, 0.0, 0.0));
        let steps = ((p.h_max - p.h_min) / 1e-5) as usize;
        for s in 1..=steps {
            let t = p.h_min + 1e-5 * s as f64;
            let f = shells(vec3(0.96 + t, 0.0, 0.0));
            if prev * f <= 0.0 {
                oracle = Some(t);
                break;
            }
            prev = f;
        }
        let oracle = oracle.unwrap();
        assert!(
            (h.heights[0] - oracle).abs() < 2e-5,
            "secant {} vs oracle {}",
            h.heights[0],
            oracle
        );
        // The analytic first root is at 0.035.
        assert!((h.heights[0] - 0.035).abs() < 1e-5);
    }

    #[test]
    fn rigid_invariance_of_heights() {
        use crate::math::Quat;
        let r = Quat::from_axis_angle(vec3(0.3, 1.0, 0.2), 1.1);
        let t = vec3(0.4, -0.7, 1.3);
        let sphere = |q: Vec3| q.norm() - 1.0;
        let moved = move |q: Vec3| sphere(r.conjugate().rotate(q - t));

        let v = vec3(0.97, 0.0, 0.0);
        let n = vec3(1.0, 0.0, 0.0);
        let obs_a = single_observer(v, n);
        let obs_b = single_observer(r.rotate(v) + t, r.rotate(n));
        let p = HeightParams::default();
        let ha = encode_heights_fn(sphere, &obs_a, &p, 0).unwrap();
        let hb = encode_heights_fn(moved, &obs_b, &p, 0).unwrap();
        assert!((ha.heights[0] - hb.heights[0]).abs() < 1e-9);
    }

    #[test]
    fn capsule_and_torus_secant_residuals() {
        let p = HeightParams::default();
        let capsule =
            |q: Vec3| crate::synth::capsule_sdf(q, vec3(0.0, -0.3, 0.0), vec3(0.0, 0.3, 0.0), 0.2);
        let torus = |q: Vec3| {
            let ring = ((q.x * q.x + q.z * q.z).sqrt() - 0.5, q.y);
            (ring.0 * ring.0 + ring.1 * ring.1).sqrt() - 0.15
        };
        // A few observers with assorted normals near each surface.
        let cases: Vec<(Vec3, Vec3, &dyn Fn(Vec3) -> f64)> = vec![
            (vec3(0.19, 0.1, 0.0), vec3(1.0, 0.0, 0.0), &capsule),
            (vec3(0.0, 0.52, 0.0), vec3(0.0, 1.0, 0.0), &capsule),
            (vec3(0.13, -0.2, 0.13), vec3(0.7, 0.0, 0.7), &capsule),
            (vec3(0.66, 0.0, 0.0), vec3(1.0, 0.0, 0.0), &torus),
            (vec3(0.5, 0.14, 0.0), vec3(0.0, 1.0, 0.0), &torus),
            (vec3(0.36, 0.02, 0.0), vec3(-1.0, 0.1, 0.0), &torus),
        ];
        for (v, n, f) in cases {
            let obs = single_observer(v, n);
            let h = encode_heights_fn(f, &obs, &p, 0).unwrap();
            if h.valid[0] {
                let root = obs.positions[0] + obs.normals[0] * h.heights[0];
                assert!(
                    f(root).abs() < 1e-6,
                    "residual {} at observer {v:?}",
                    f(root).abs()
                );
            }
            assert!(h.all_in_range(&p));
        }
    }

    #[test]
    fn ray_cast_gt_on_inflated_template() {
        use crate::pose::PoseState;
        use crate::skinning::pose_template;
        use crate::template::build_humanoid;
        let t = build_humanoid(96, 7).unwrap();
        let pose = PoseState::identity(t.joint_count());
        let (mesh, obs) = pose_template(&t, &pose).unwrap();
        let p = HeightParams::default();

        // Scan = the posed template surface itself: heights ~ 0.
        let scan_mesh = TriMesh {
            vertices: mesh.vertices.clone(),
            triangles: t.faces.clone(),
        };
        let h0 = ground_truth_heights_mesh(&scan_mesh, &obs, &p, 0).unwrap();
        for (i, (h, v)) in h0.heights.iter().zip(&h0.valid).enumerate() {
            assert!(*v, "observer {i} found no root on its own surface");
            assert!(h.abs() < 1e-6, "observer {i}: h = {h}");
        }

        // Scan inflated 1 cm along normals: heights ~ +0.01 for observers
        // whose inflated surface stays locally offset (convex regions).
        let inflated = TriMesh {
            vertices: mesh
                .vertices
                .iter()
                .zip(&mesh.normals)
                .map(|(v, n)| *v + *n * 0.01)
                .collect(),
            triangles: t.faces.clone(),
        };
        let h1 = ground_truth_heights_mesh(&inflated, &obs, &p, 0).unwrap();
        let mut close = 0;
        for (h, v) in h1.heights.iter().zip(&h1.valid) {
            if *v && (h - 0.01).abs() < 2e-3 {
                close += 1;
            }
        }
        assert!(
            close * 10 >= obs.len() * 8,
            "only {close}/{} observers near +1cm",
            obs.len()
        );
    }

    #[test]
    fn point_cloud_proxy_matches_sphere() {
        // Scan = dense samples of the unit sphere with outward normals.
        let mut rng = dynbody_ad::init::stream(3, "proxy");
        use rand::Rng;
        let mut scan = ScanData::default();
        for _ in 0..20000 {
            let v = vec3(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            if v.norm_sq() < 1e-6 || v.norm_sq() > 1.0 {
                continue;
            }
            let p = v.normalized();
            scan.points.push(p);
            scan.normals.push(p);
        }
        let obs = single_observer(vec3(0.97, 0.0, 0.0), vec3(1.0, 0.0, 0.0));
        let p = HeightParams::default();
        let h = ground_truth_heights_points(&scan, &obs, &p, 0).unwrap();
        assert!(h.valid[0]);
        assert!(
            (h.heights[0] - 0.03).abs() < 2e-3,
            "h = {} (proxy resolution limited)",
            h.heights[0]
        );
    }

    #[test]
    fn height_cache_round_trip() {
        let fields = vec![
            HeightField {
                heights: vec![0.01, -0.02, 0.08],
                valid: vec![true, false, true],
                frame: 0,
            },
            HeightField {
                heights: vec![0.0, 0.033, -0.001],
                valid: vec![true, true, true],
                frame: 1,
            },
        ];
        let dir = std::env::temp_dir().join("dynbody_hts_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("h.bin");
        save_height_sequence(&path, &fields).unwrap();
        let back = load_height_sequence(&path).unwrap();
        assert_eq!(back, fields);
        std::fs::remove_file(&path).unwrap();
    }
}
