//! Dataset formats: oriented point-cloud scans, indexed-triangle meshes,
//! pose tracks, and the dataset manifest.
//!
//! Geometry lives in plain text. Point clouds are `.pts` files with one
//! `x y z nx ny nz` line per point; meshes are OBJ-style `v`/`f` files.
//! Floats are written with shortest-round-trip formatting, so export/load
//! cycles are bit-identical.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::math::{vec3, Vec3};
use crate::pose::{PoseState, PoseTrack};
use crate::synth::OracleParams;
use crate::template::Template;

/// Oriented point cloud for one frame.
#[derive(Clone, Debug, Default)]
pub struct ScanData {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl ScanData {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box, optionally dilated.
    pub fn aabb(&self, margin: f64) -> (Vec3, Vec3) {
        let mut lo = vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = vec3(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.min_elem(*p);
            hi = hi.max_elem(*p);
        }
        (
            lo - vec3(margin, margin, margin),
            hi + vec3(margin, margin, margin),
        )
    }

    pub fn save_pts(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.points.len() * 48);
        for (p, n) in self.points.iter().zip(&self.normals) {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                p.x, p.y, p.z, n.x, n.y, n.z
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load a `.pts` file; normals are renormalized, zero normals rejected.
    pub fn load_pts(path: &Path) -> Result<ScanData> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Data(format!("cannot read scan {path:?}: {e}")))?;
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| CoreError::Data(format!("{path:?} line {}: {e}", ln + 1)))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 6 {
                return Err(CoreError::Data(format!(
                    "{path:?} line {}: expected 6 values, got {}",
                    ln + 1,
                    vals.len()
                )));
            }
            let n = vec3(vals[3], vals[4], vals[5]);
            if n.norm() == 0.0 {
                return Err(CoreError::Data(format!(
                    "{path:?} line {}: zero normal",
                    ln + 1
                )));
            }
            points.push(vec3(vals[0], vals[1], vals[2]));
            normals.push(n.normalized());
        }
        Ok(ScanData { points, normals })
    }
}

/// Indexed triangle mesh (OBJ-style text interchange).
#[derive(Clone, Debug, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.vertices.len() * 36);
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_obj(path: &Path) -> Result<TriMesh> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Data(format!("cannot read mesh {path:?}: {e}")))?;
        let mut mesh = TriMesh::default();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let mut f = || -> Result<f64> {
                        it.next()
                            .ok_or_else(|| {
                                CoreError::Data(format!("{path:?} line {}: short v", ln + 1))
                            })?
                            .parse()
                            .map_err(|e| CoreError::Data(format!("{path:?} line {}: {e}", ln + 1)))
                    };
                    let (x, y, z) = (f()?, f()?, f()?);
                    mesh.vertices.push(vec3(x, y, z));
                }
                Some("f") => {
                    let mut idx = || -> Result<usize> {
                        let tok = it.next().ok_or_else(|| {
                            CoreError::Data(format!("{path:?} line {}: short f", ln + 1))
                        })?;
                        let first = tok.split('/').next().unwrap();
                        let i: i64 = first.parse().map_err(|e| {
                            CoreError::Data(format!("{path:?} line {}: {e}", ln + 1))
                        })?;
                        Ok((i - 1) as usize)
                    };
                    mesh.triangles.push([idx()?, idx()?, idx()?]);
                }
                _ => {}
            }
        }
        Ok(mesh)
    }
}

/// Versioned dataset manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub frame_count: usize,
    pub fps: f64,
    pub pose_file: String,
    /// Pattern with `{}` replaced by the zero-padded frame index.
    pub geometry_pattern: String,
    /// "points" or "mesh".
    pub geometry_kind: String,
    /// Present when the dataset was generated synthetically; lets tools
    /// reconstruct the analytic oracle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<OracleParams>,
}

/// A loaded sequence: per-frame scans and poses at a declared frame rate.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub track: PoseTrack,
    pub scans: Vec<ScanData>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.scans.len()
    }

    pub fn pose(&self, frame: usize) -> &PoseState {
        &self.track.frames[frame]
    }
}

fn frame_path(dir: &Path, pattern: &str, frame: usize) -> PathBuf {
    dir.join(pattern.replace("{}", &format!("{frame:05}")))
}

/// Load a dataset directory: `manifest.json`, the pose file, and one geometry
/// file per frame. Meshes are converted to oriented point scans by taking
/// triangle vertices with area-weighted face normals.
pub fn load_scan_sequence(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| CoreError::Data(format!("cannot read {manifest_path:?}: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(CoreError::Data(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let track = PoseTrack::load(&dir.join(&manifest.pose_file))?;
    if track.frames.len() < manifest.frame_count {
        return Err(CoreError::Data(format!(
            "manifest declares {} frames but pose track has {} (missing pose)",
            manifest.frame_count,
            track.frames.len()
        )));
    }
    let mut scans = Vec::with_capacity(manifest.frame_count);
    for frame in 0..manifest.frame_count {
        let path = frame_path(dir, &manifest.geometry_pattern, frame);
        let scan = match manifest.geometry_kind.as_str() {
            "points" => ScanData::load_pts(&path)?,
            "mesh" => {
                let mesh = TriMesh::load_obj(&path)?;
                mesh_to_scan(&mesh)
            }
            other => {
                return Err(CoreError::Data(format!(
                    "unknown geometry kind `{other}`"
                )))
            }
        };
        if scan.is_empty() {
            return Err(CoreError::Data(format!("frame {frame}: empty scan")));
        }
        scans.push(scan);
    }
    Ok(Dataset {
        manifest,
        track,
        scans,
    })
}

/// Write a dataset directory in the documented layout.
pub fn save_scan_sequence(
    dir: &Path,
    manifest: &Manifest,
    track: &PoseTrack,
    scans: &[ScanData],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    track.save(&dir.join(&manifest.pose_file))?;
    for (frame, scan) in scans.iter().enumerate() {
        scan.save_pts(&frame_path(dir, &manifest.geometry_pattern, frame))?;
    }
    Ok(())
}

/// Per-vertex pseudo-normals from area-weighted incident face normals.
pub fn mesh_to_scan(mesh: &TriMesh) -> ScanData {
    let mut normals = vec![Vec3::ZERO; mesh.vertices.len()];
    for t in &mesh.triangles {
        let (a, b, c) = (
            mesh.vertices[t[0]],
            mesh.vertices[t[1]],
            mesh.vertices[t[2]],
        );
        let n = (b - a).cross(c - a); // area-weighted
        for &i in t {
            normals[i] = normals[i] + n;
        }
    }
    ScanData {
        points: mesh.vertices.clone(),
        normals: normals.into_iter().map(|n| n.normalized()).collect(),
    }
}

/// Remove scan points farther than `max_dist` from the nearest posed template
/// vertex (outlier rule used before evaluation).
pub fn filter_outliers(scan: &ScanData, posed_vertices: &[Vec3], max_dist: f64) -> ScanData {
    let hash = crate::knn::SpatialHash::build(posed_vertices, max_dist.max(1e-3));
    let mut out = ScanData::default();
    for (p, n) in scan.points.iter().zip(&scan.normals) {
        let nearest = hash.knn(*p, 1).expect("non-empty template");
        if nearest[0].1 <= max_dist {
            out.points.push(*p);
            out.normals.push(*n);
        }
    }
    out
}

pub use crate::template::Template as TemplateRef;

/// Convenience for callers that keep the template beside the dataset.
pub fn load_template_or_builtin(
    path: Option<&Path>,
    m_observers: usize,
    seed: u64,
) -> Result<Template> {
    match path {
        Some(p) => Template::load(p),
        None => crate::template::build_humanoid(m_observers, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pts_round_trip_is_bit_identical() {
        let scan = ScanData {
            points: vec![vec3(0.1 + 0.2, -1.5, 2.0), vec3(1e-17, 3.0, -0.25)],
            normals: vec![vec3(1.0, 0.0, 0.0), vec3(0.0, 0.0, -1.0)],
        };
        let dir = std::env::temp_dir().join("dynbody_scanio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.pts");
        scan.save_pts(&path).unwrap();
        let back = ScanData::load_pts(&path).unwrap();
        assert_eq!(scan.points, back.points);
        assert_eq!(scan.normals, back.normals);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn non_unit_normals_are_renormalized() {
        let dir = std::env::temp_dir().join("dynbody_scanio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("n.pts");
        std::fs::write(&path, "0 0 0 0 0 2\n").unwrap();
        let back = ScanData::load_pts(&path).unwrap();
        assert!((back.normals[0].norm() - 1.0).abs() < 1e-15);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn missing_pose_for_frame_is_an_error() {
        let dir = std::env::temp_dir().join("dynbody_manifest_test");
        std::fs::create_dir_all(&dir).unwrap();
        let manifest = Manifest {
            version: 1,
            frame_count: 3,
            fps: 30.0,
            pose_file: "poses.txt".into(),
            geometry_pattern: "frame_{}.pts".into(),
            geometry_kind: "points".into(),
            synthetic: None,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        // Only 2 poses for 3 frames.
        let track = PoseTrack {
            fps: 30.0,
            frames: vec![PoseState::identity(1), PoseState::identity(1)],
        };
        track.save(&dir.join("poses.txt")).unwrap();
        for f in 0..3 {
            std::fs::write(dir.join(format!("frame_{f:05}.pts")), "0 0 0 0 1 0\n").unwrap();
        }
        let err = load_scan_sequence(&dir).unwrap_err();
        assert!(matches!(err, CoreError::Data(_)));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn obj_round_trip() {
        let mesh = TriMesh {
            vertices: vec![vec3(0.0, 0.0, 0.0), vec3(1.0, 0.0, 0.0), vec3(0.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2]],
        };
        let dir = std::env::temp_dir().join("dynbody_obj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.obj");
        mesh.save_obj(&path).unwrap();
        let back = TriMesh::load_obj(&path).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);
        std::fs::remove_file(&path).unwrap();
    }
}
