//! Rotation algebra, camera extrinsics and pinhole projection.
//!
//! Extrinsics are stored camera-to-world: a pose holds the camera centre in
//! world coordinates and the orientation whose columns are the camera axes
//! expressed in the world frame. The camera looks along its local `+z` and
//! its local `+y` maps to image rows growing downward.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum norm accepted while orthogonalizing a 6D rotation.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Rotation matrix with `RᵀR = I` and `det R = 1`.
pub type RotationMatrix = Rotation3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeomError {
    #[error("degenerate 6D rotation: rows are zero or parallel")]
    DegenerateRotation,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// First two rows of a rotation matrix, flattened row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub fn rows(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = &self.0;
        (
            Vector3::new(r[0], r[1], r[2]),
            Vector3::new(r[3], r[4], r[5]),
        )
    }
}

/// Gram-Schmidt the two stored rows and complete the frame with their cross
/// product.
pub fn orthogonalize_6d(r: &Rotation6D) -> Result<RotationMatrix, GeomError> {
    if r.0.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::DegenerateRotation);
    }
    let (a, b) = r.rows();
    let na = a.norm();
    if na < DEGENERATE_EPS {
        return Err(GeomError::DegenerateRotation);
    }
    let row1 = a / na;
    let b_perp = b - row1 * row1.dot(&b);
    let nb = b_perp.norm();
    if nb < DEGENERATE_EPS {
        return Err(GeomError::DegenerateRotation);
    }
    let row2 = b_perp / nb;
    let row3 = row1.cross(&row2);
    let m = Matrix3::from_rows(&[row1.transpose(), row2.transpose(), row3.transpose()]);
    Ok(Rotation3::from_matrix_unchecked(m))
}

pub fn rotmat_to_6d(r: &RotationMatrix) -> Rotation6D {
    let m = r.matrix();
    Rotation6D([
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
    ])
}

/// Angle of the relative rotation between `a` and `b`, in radians.
pub fn geodesic_angle(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    let rel = a.inverse() * b;
    let c = ((rel.matrix().trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near zero; the skew part gives the sine directly.
    let m = rel.matrix();
    let s = 0.5
        * Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        )
        .norm();
    s.atan2(c)
}

/// Camera-to-world extrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Camera centre in world coordinates, meters.
    pub position: Vector3<f64>,
    /// Camera-to-world orientation.
    pub rotation: RotationMatrix,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: RotationMatrix::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, rotation: RotationMatrix) -> Self {
        Self { position, rotation }
    }

    /// Pose at `position` looking at `target` with no roll (image rows point
    /// toward world `-y`).
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> Self {
        let forward = (target - position).normalize();
        let down = Vector3::new(0.0, -1.0, 0.0);
        let mut right = down.cross(&forward);
        if right.norm() < 1e-9 {
            // Looking straight up or down; pick any horizontal right axis.
            right = Vector3::x();
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let m = Matrix3::from_columns(&[right, down, forward]);
        Self {
            position,
            rotation: Rotation3::from_matrix_unchecked(m),
        }
    }

    /// Viewing direction (camera `+z`) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.position)
    }

    /// `self ∘ other`: interpret `other` as expressed in this pose's frame.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            position: self.rotation * other.position + self.position,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let inv = self.rotation.inverse();
        CameraPose {
            position: -(inv * self.position),
            rotation: inv,
        }
    }

    /// Flattened 9D layout: translation then the two 6D rows.
    pub fn to_9d(&self) -> [f64; 9] {
        let r6 = rotmat_to_6d(&self.rotation).0;
        [
            self.position.x,
            self.position.y,
            self.position.z,
            r6[0],
            r6[1],
            r6[2],
            r6[3],
            r6[4],
            r6[5],
        ]
    }

    pub fn from_9d(v: &[f64; 9]) -> Result<Self, GeomError> {
        let rot = orthogonalize_6d(&Rotation6D([v[3], v[4], v[5], v[6], v[7], v[8]]))?;
        Ok(Self {
            position: Vector3::new(v[0], v[1], v[2]),
            rotation: rot,
        })
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let m = self.rotation.matrix();
        self.position.iter().all(|v| v.is_finite())
            && (m.transpose() * m - Matrix3::identity()).norm() < tol
            && (m.determinant() - 1.0).abs() < tol
    }
}

/// `b` expressed in the frame of `a`.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> CameraPose {
    a.inverse().compose(b)
}

/// Spherical/linear blend between two poses; `alpha = 0` gives `a`.
pub fn interpolate_pose(a: &CameraPose, b: &CameraPose, alpha: f64) -> CameraPose {
    let qa = nalgebra::UnitQuaternion::from_rotation_matrix(&a.rotation);
    let qb = nalgebra::UnitQuaternion::from_rotation_matrix(&b.rotation);
    let q = qa
        .try_slerp(&qb, alpha, 1e-12)
        .unwrap_or(if alpha < 0.5 { qa } else { qb });
    CameraPose {
        position: a.position.lerp(&b.position, alpha),
        rotation: q.to_rotation_matrix(),
    }
}

/// Axis-angle vector of a rotation (log map).
pub fn rotation_log(r: &RotationMatrix) -> Vector3<f64> {
    let m = r.matrix();
    let v = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let s = 0.5 * v.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let angle = s.atan2(c);
    if angle < 1e-6 {
        // sin(a)/a ~ 1 - a^2/6
        return 0.5 * v * (1.0 + angle * angle / 6.0);
    }
    if angle > std::f64::consts::PI - 1e-4 {
        return r.scaled_axis();
    }
    v * (0.5 * angle / s)
}

/// Rotation from an axis-angle vector (exp map).
pub fn rotation_exp(w: &Vector3<f64>) -> RotationMatrix {
    let angle = w.norm();
    if angle < 1e-300 {
        return RotationMatrix::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_unchecked(w / angle), angle)
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width_px: f64,
    pub height_px: f64,
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::centered(672.0, 384.0, 384.0)
    }
}

impl Intrinsics {
    pub fn centered(width_px: f64, height_px: f64, focal_px: f64) -> Self {
        Self {
            width_px,
            height_px,
            focal_px,
            cx: width_px * 0.5,
            cy: height_px * 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let all = [
            self.width_px,
            self.height_px,
            self.focal_px,
            self.cx,
            self.cy,
        ];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(GeomError::InvalidIntrinsics("values must be positive"));
        }
        if self.cx >= self.width_px || self.cy >= self.height_px {
            return Err(GeomError::InvalidIntrinsics(
                "principal point outside image",
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal_px,
            0.0,
            self.cx,
            0.0,
            self.focal_px,
            self.cy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-frame point; returns `None` behind the camera.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if p.z <= MIN_DEPTH {
            return None;
        }
        Some([
            self.cx + self.focal_px * p.x / p.z,
            self.cy + self.focal_px * p.y / p.z,
        ])
    }

    pub fn contains(&self, uv: &[f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[0] < self.width_px && uv[1] >= 0.0 && uv[1] < self.height_px
    }
}

/// One projected point. Points behind the camera carry `NaN` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: [f64; 2],
    pub visible: bool,
}

pub fn project_point(point: &Vector3<f64>, pose: &CameraPose, k: &Intrinsics) -> Projection {
    let pc = pose.world_to_camera(point);
    match k.project_camera_point(&pc) {
        Some(uv) => Projection {
            uv,
            visible: k.contains(&uv),
        },
        None => Projection {
            uv: [f64::NAN, f64::NAN],
            visible: false,
        },
    }
}

pub fn project_points(
    points: &[Vector3<f64>],
    pose: &CameraPose,
    k: &Intrinsics,
) -> Vec<Projection> {
    points.iter().map(|p| project_point(p, pose, k)).collect()
}

/// Per-frame camera poses sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub poses: Vec<CameraPose>,
    pub fps: f64,
}

impl CameraTrajectory {
    pub fn new(poses: Vec<CameraPose>, fps: f64) -> Self {
        Self { poses, fps }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn to_9d(&self) -> Vec<[f64; 9]> {
        self.poses.iter().map(CameraPose::to_9d).collect()
    }

    pub fn from_9d(rows: &[[f64; 9]], fps: f64) -> Result<Self, GeomError> {
        let poses = rows
            .iter()
            .map(CameraPose::from_9d)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { poses, fps })
    }

    /// Applies a world-frame rigid transform `x ↦ rot·x + trans` to every pose.
    pub fn transformed(&self, rot: &RotationMatrix, trans: &Vector3<f64>) -> Self {
        let poses = self
            .poses
            .iter()
            .map(|p| CameraPose {
                position: rot * p.position + trans,
                rotation: rot * p.rotation,
            })
            .collect();
        Self {
            poses,
            fps: self.fps,
        }
    }
}
