//! Linear blend skinning and the posed observer set.

use crate::error::Result;
use crate::math::{Rigid, Vec3};
use crate::pose::PoseState;
use crate::template::{Region, Template};

/// Posed observer points: positions, unit normals, and the static
/// per-observer attributes (UVs, regions, template indices).
#[derive(Clone, Debug)]
pub struct ObserverSet {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub regions: Vec<Region>,
    /// Indices into the template vertex list.
    pub template_indices: Vec<usize>,
}

impl ObserverSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

/// World transform of every joint: forward kinematics then the root rigid
/// transform.
pub fn joint_transforms(template: &Template, pose: &PoseState) -> Result<Vec<Rigid>> {
    pose.validate()?;
    let j = template.joint_count();
    assert_eq!(pose.joints.len(), j, "pose has wrong joint count");
    let root = Rigid::new(pose.root_rot.to_matrix(), pose.root_trans);
    let mut world: Vec<Rigid> = Vec::with_capacity(j);
    for (i, joint) in template.joints.iter().enumerate() {
        let local_rot = Rigid::new(pose.joints[i].to_matrix(), Vec3::ZERO);
        let g = if joint.parent < 0 {
            // Rotate about the root joint position.
            Rigid::new(crate::math::Mat3::IDENTITY, joint.rest_pos)
                .compose(&local_rot)
                .compose(&Rigid::new(
                    crate::math::Mat3::IDENTITY,
                    -joint.rest_pos,
                ))
        } else {
            let p = joint.parent as usize;
            debug_assert!(p < i, "joints must be parent-ordered");
            world[p]
                .compose(&Rigid::new(crate::math::Mat3::IDENTITY, joint.rest_pos))
                .compose(&local_rot)
                .compose(&Rigid::new(
                    crate::math::Mat3::IDENTITY,
                    -joint.rest_pos,
                ))
        };
        world.push(g);
    }
    // Root rigid transform applies on top of everything.
    for g in &mut world {
        *g = root.compose(g);
    }
    Ok(world)
}

/// Linear blend skinning: vertices by blended joint transforms, normals by
/// the same blended rotations, renormalized.
pub fn pose_template(template: &Template, pose: &PoseState) -> Result<(PosedMesh, ObserverSet)> {
    let world = joint_transforms(template, pose)?;
    let v = template.vertex_count();
    let mut vertices = Vec::with_capacity(v);
    let mut normals = Vec::with_capacity(v);
    for i in 0..v {
        let mut p = Vec3::ZERO;
        let mut n = Vec3::ZERO;
        for (j, &w) in template.weights[i].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            p = p + world[j].apply(template.vertices[i]) * w;
            n = n + world[j].apply_dir(template.normals[i]) * w;
        }
        vertices.push(p);
        normals.push(n.normalized());
    }
    let observers = ObserverSet {
        positions: template.observers.iter().map(|&o| vertices[o]).collect(),
        normals: template.observers.iter().map(|&o| normals[o]).collect(),
        uvs: template.observers.iter().map(|&o| template.uvs[o]).collect(),
        regions: template
            .observers
            .iter()
            .map(|&o| template.regions[o])
            .collect(),
        template_indices: template.observers.clone(),
    };
    Ok((PosedMesh { vertices, normals }, observers))
}
