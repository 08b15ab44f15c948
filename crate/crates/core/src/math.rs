//! Small fixed-size linear algebra: vectors, unit quaternions, rigid
//! transforms. Quaternions are stored (w, x, y, z) and canonicalized to a
//! non-negative scalar part everywhere, which removes double-cover sign
//! flips from derivative channels.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            Vec3::ZERO
        } else {
            self * (1.0 / n)
        }
    }

    pub fn min_elem(self, o: Vec3) -> Vec3 {
        vec3(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_elem(self, o: Vec3) -> Vec3 {
        vec3(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [f64; 9]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        vec3(
            m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let a = &self.0;
        let b = &o.0;
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = self.0;
        for v in &mut out {
            *v *= s;
        }
        Mat3(out)
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut out = self.0;
        for (a, b) in out.iter_mut().zip(&o.0) {
            *a += b;
        }
        Mat3(out)
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        self.0
            .iter()
            .zip(&o.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Unit quaternion (w, x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let a = axis.normalized();
        let (s, c) = (angle / 2.0).sin_cos();
        Quat {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
        .canonicalized()
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Quat {
        let n = self.norm();
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    /// Flip sign so the scalar part is non-negative.
    pub fn canonicalized(self) -> Quat {
        if self.w < 0.0 {
            Quat {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    pub fn is_unit(self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn to_matrix(self) -> Mat3 {
        let Quat { w, x, y, z } = self;
        Mat3([
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ])
    }

    /// Shepperd's method; result is canonicalized.
    pub fn from_matrix(m: &Mat3) -> Quat {
        let t = m.0[0] + m.0[4] + m.0[8];
        let q = if t > 0.0 {
            let s = (t + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m.0[7] - m.0[5]) / s,
                y: (m.0[2] - m.0[6]) / s,
                z: (m.0[3] - m.0[1]) / s,
            }
        } else if m.0[0] > m.0[4] && m.0[0] > m.0[8] {
            let s = (1.0 + m.0[0] - m.0[4] - m.0[8]).sqrt() * 2.0;
            Quat {
                w: (m.0[7] - m.0[5]) / s,
                x: 0.25 * s,
                y: (m.0[1] + m.0[3]) / s,
                z: (m.0[2] + m.0[6]) / s,
            }
        } else if m.0[4] > m.0[8] {
            let s = (1.0 + m.0[4] - m.0[0] - m.0[8]).sqrt() * 2.0;
            Quat {
                w: (m.0[2] - m.0[6]) / s,
                x: (m.0[1] + m.0[3]) / s,
                y: 0.25 * s,
                z: (m.0[5] + m.0[7]) / s,
            }
        } else {
            let s = (1.0 + m.0[8] - m.0[0] - m.0[4]).sqrt() * 2.0;
            Quat {
                w: (m.0[3] - m.0[1]) / s,
                x: (m.0[2] + m.0[6]) / s,
                y: (m.0[5] + m.0[7]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized().canonicalized()
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        self.to_matrix().mul_vec(v)
    }

    pub fn mul(self, o: Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Rigid transform: rotation then translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        rot: Mat3::IDENTITY,
        trans: Vec3::ZERO,
    };

    pub fn new(rot: Mat3, trans: Vec3) -> Rigid {
        Rigid { rot, trans }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rot.mul_vec(p) + self.trans
    }

    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        self.rot.mul_vec(d)
    }

    /// self ∘ other (apply `other` first).
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rot: self.rot.mul_mat(&other.rot),
            trans: self.rot.mul_vec(other.trans) + self.trans,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rot.transpose();
        Rigid {
            rot: rt,
            trans: rt.mul_vec(-self.trans),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quat_matrix_round_trip() {
        let q = Quat::from_axis_angle(vec3(1.0, 2.0, -0.5), 1.1);
        let back = Quat::from_matrix(&q.to_matrix());
        assert!((q.w - back.w).abs() < 1e-12);
        assert!((q.x - back.x).abs() < 1e-12);
    }

    #[test]
    fn double_cover_collapses_through_matrices() {
        let q = Quat::from_axis_angle(vec3(0.0, 0.0, 1.0), 2.0);
        let neg = Quat::new(-q.w, -q.x, -q.y, -q.z);
        assert!(q.to_matrix().max_abs_diff(&neg.to_matrix()) < 1e-15);
    }

    #[test]
    fn rotation_composes() {
        let a = Quat::from_axis_angle(vec3(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let v = a.rotate(vec3(1.0, 0.0, 0.0));
        assert!((v - vec3(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rigid_inverse() {
        let t = Rigid::new(
            Quat::from_axis_angle(vec3(0.3, 1.0, 0.2), 0.8).to_matrix(),
            vec3(1.0, -2.0, 0.5),
        );
        let p = vec3(0.2, 0.4, -0.9);
        let back = t.inverse().apply(t.apply(p));
        assert!((back - p).norm() < 1e-14);
    }
}
