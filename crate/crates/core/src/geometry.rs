//! Agent poses, rigid transforms between agent frames, and pose noise.
//!
//! Rotations are intrinsic yaw-pitch-roll: `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
//! A pose maps points from the agent frame into the world frame.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;

/// Wrap an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(position: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> Self {
        Self {
            position,
            yaw: normalize_angle(yaw),
            pitch: normalize_angle(pitch),
            roll: normalize_angle(roll),
        }
    }

    pub fn identity() -> Self {
        Self::new([0.0; 3], 0.0, 0.0, 0.0)
    }

    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self::new([x, y, 0.0], yaw, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.pitch.is_finite()
            && self.roll.is_finite()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw).into_inner()
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation(),
            translation: Vector3::from(self.position),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.to_transform().to_matrix()
    }

    /// Recover a pose from a homogeneous matrix. Pitch comes back in
    /// `[-π/2, π/2]`, so the round trip is exact only for poses in that band.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r = m.fixed_view::<3, 3>(0, 0);
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        Self::new([m[(0, 3)], m[(1, 3)], m[(2, 3)]], yaw, pitch, roll)
    }

    /// Wire form: x, y, z, yaw, pitch, roll as 32-bit floats.
    pub fn to_wire(&self) -> [f32; 6] {
        [
            self.position[0] as f32,
            self.position[1] as f32,
            self.position[2] as f32,
            self.yaw as f32,
            self.pitch as f32,
            self.roll as f32,
        ]
    }

    pub fn from_wire(v: [f32; 6]) -> Self {
        Self::new(
            [f64::from(v[0]), f64::from(v[1]), f64::from(v[2])],
            f64::from(v[3]),
            f64::from(v[4]),
            f64::from(v[5]),
        )
    }
}

/// `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(p) + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Checks `RᵀR = I` and `det R = 1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).amax() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Transform taking points in the neighbor frame into the ego frame.
pub fn relative_transform(ego: &Pose, neighbor: &Pose) -> Result<RigidTransform> {
    if !ego.is_finite() || !neighbor.is_finite() {
        return Err(invalid("relative_transform: non-finite pose field"));
    }
    Ok(ego.to_transform().inverse().compose(&neighbor.to_transform()))
}

pub fn apply_transform(points: &[[f64; 3]], t: &RigidTransform) -> Result<Vec<[f64; 3]>> {
    if !t.is_valid(1e-10) {
        return Err(invalid("apply_transform: rotation is not orthonormal"));
    }
    Ok(points.iter().map(|&p| t.apply(p)).collect())
}

/// Gaussian localization noise. Planar mode perturbs x, y and yaw only;
/// `full_6dof` also perturbs z, pitch and roll.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub pos_std: f64,
    pub rot_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub full_6dof: bool,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            pos_std: 0.0,
            rot_std: 0.0,
            seed: 0,
            full_6dof: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pos_std >= 0.0 && self.rot_std >= 0.0) {
            return Err(invalid("noise standard deviations must be non-negative"));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.pos_std == 0.0 && self.rot_std == 0.0
    }
}

pub fn perturb_pose(pose: &Pose, noise: &NoiseSpec) -> Result<Pose> {
    noise.validate()?;
    if noise.is_zero() {
        return Ok(*pose);
    }
    let mut rng = rng::stream(noise.seed, rng::stream_id("pose-noise", 0));
    let pos = Normal::new(0.0, noise.pos_std).map_err(|e| invalid(e.to_string()))?;
    let rot = Normal::new(0.0, noise.rot_std).map_err(|e| invalid(e.to_string()))?;
    let mut p = *pose;
    p.position[0] += pos.sample(&mut rng);
    p.position[1] += pos.sample(&mut rng);
    let yaw = p.yaw + rot.sample(&mut rng);
    let (mut pitch, mut roll) = (p.pitch, p.roll);
    if noise.full_6dof {
        p.position[2] += pos.sample(&mut rng);
        pitch += rot.sample(&mut rng);
        roll += rot.sample(&mut rng);
    }
    Ok(Pose::new(p.position, yaw, pitch, roll))
}

/// Box with `size = [length, width, height]` along its local x, y, z and a
/// yaw about +z through `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl OrientedBox {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("box size must be positive, got {:?}", self.size)));
        }
        if !(self.center.iter().all(|c| c.is_finite()) && self.yaw.is_finite()) {
            return Err(invalid("box center and yaw must be finite"));
        }
        Ok(())
    }

    /// `p` in the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Boundary-inclusive membership.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= 0.5 * self.size[a])
    }

    /// Same center and yaw, each extent grown by `2 * margin[a]`.
    pub fn expanded(&self, margin: [f64; 3]) -> Self {
        Self { size: [0, 1, 2].map(|a| self.size[a] + 2.0 * margin[a]), ..*self }
    }

    /// Box in the frame reached by `t` (yaw taken from the rotated x axis).
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        let center = t.apply(self.center);
        let axis = t.rotation * Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0);
        Self { center, size: self.size, yaw: normalize_angle(axis[1].atan2(axis[0])) }
    }
}
