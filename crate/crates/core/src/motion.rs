//! Human-motion sequences and canonical-space normalization.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::RotationMatrix;

/// Number of body joints in a motion frame.
pub const NUM_JOINTS: usize = 22;

/// The first 22 body joints of the SMPL-X skeleton, in storage order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

/// Kinematic parent of every joint; the pelvis is the root.
pub const JOINT_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
];

pub const PELVIS: usize = 0;
pub const LEFT_HIP: usize = 1;
pub const RIGHT_HIP: usize = 2;
pub const LEFT_SHOULDER: usize = 16;
pub const RIGHT_SHOULDER: usize = 17;

/// Largest pelvis displacement allowed between consecutive frames, meters.
pub const MAX_PELVIS_STEP: f64 = 1.0;

/// Minimum frame count: third differences need four samples.
pub const MIN_FRAMES: usize = 4;

pub type Frame = [Vector3<f64>; NUM_JOINTS];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error("degenerate pose: hips coincide or are vertically aligned")]
    DegeneratePose,
    #[error("invalid motion: {0}")]
    Invalid(String),
}

/// Joint positions in meters, world frame, `y` up.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<Frame>,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self, MotionError> {
        let m = Self { frames, fps };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if self.frames.len() < MIN_FRAMES {
            return Err(MotionError::Invalid(format!(
                "need at least {MIN_FRAMES} frames, got {}",
                self.frames.len()
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(MotionError::Invalid("fps must be positive".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.iter().any(|j| j.iter().any(|v| !v.is_finite())) {
                return Err(MotionError::Invalid(format!(
                    "non-finite joint in frame {i}"
                )));
            }
        }
        for (i, w) in self.frames.windows(2).enumerate() {
            let step = (w[1][PELVIS] - w[0][PELVIS]).norm();
            if step >= MAX_PELVIS_STEP {
                return Err(MotionError::Invalid(format!(
                    "pelvis jumps {step:.3} m between frames {i} and {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pelvis(&self, frame: usize) -> Vector3<f64> {
        self.frames[frame][PELVIS]
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.map(|j| t.apply(&j))).collect(),
            fps: self.fps,
        }
    }
}

/// Motion expressed in canonical space: frame-0 pelvis at the origin and
/// frame-0 forward direction along `+z`.
pub type CanonicalMotion = MotionSequence;

/// `x ↦ rotation·x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: RotationMatrix::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self {
            rotation: r,
            translation: -(r * self.translation),
        }
    }

    /// `self ∘ other`.
    pub fn then_after(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Horizontal facing direction of a frame: `up × (left_hip − right_hip)`
/// with the hip axis projected onto the ground plane.
pub fn forward_direction(frame: &Frame) -> Result<Vector3<f64>, MotionError> {
    let d = frame[LEFT_HIP] - frame[RIGHT_HIP];
    let r = Vector3::new(d.x, 0.0, d.z);
    let n = r.norm();
    if n < 1e-9 {
        return Err(MotionError::DegeneratePose);
    }
    let r = r / n;
    Ok(Vector3::y().cross(&r))
}

/// Yaw angle (about `+y`) of a horizontal direction, zero along `+z`.
pub fn heading(dir: &Vector3<f64>) -> f64 {
    dir.x.atan2(dir.z)
}

/// Moves a y-up motion into canonical space. Returns the canonical motion and
/// the rigid transform that was applied to every frame.
pub fn canonicalize(m: &MotionSequence) -> Result<(CanonicalMotion, RigidTransform), MotionError> {
    let first = m
        .frames
        .first()
        .ok_or(MotionError::Invalid("empty motion".into()))?;
    let fwd = forward_direction(first)?;
    // Rotate about y by -heading so the forward direction lands on +z.
    let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), -heading(&fwd));
    let translation = -(rot * first[PELVIS]);
    let t = RigidTransform {
        rotation: rot,
        translation,
    };
    Ok((m.transformed(&t), t))
}

/// Window-mean temporal downsampling to `ceil(f / factor)` frames.
pub fn temporal_resample(m: &MotionSequence, factor: usize) -> MotionSequence {
    let factor = factor.max(1);
    let frames = m
        .frames
        .chunks(factor)
        .map(|w| {
            let n = w.len() as f64;
            std::array::from_fn(|j| w.iter().map(|f| f[j]).sum::<Vector3<f64>>() / n)
        })
        .collect();
    MotionSequence {
        frames,
        fps: m.fps / factor as f64,
    }
}

/// Portable motion file record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub version: u32,
    pub fps: f64,
    pub joint_names: Vec<String>,
    pub joints: Vec<Vec<[f64; 3]>>,
}

impl From<&MotionSequence> for MotionRecord {
    fn from(m: &MotionSequence) -> Self {
        Self {
            version: 1,
            fps: m.fps,
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            joints: m
                .frames
                .iter()
                .map(|f| f.iter().map(|j| [j.x, j.y, j.z]).collect())
                .collect(),
        }
    }
}

impl TryFrom<&MotionRecord> for MotionSequence {
    type Error = MotionError;

    fn try_from(r: &MotionRecord) -> Result<Self, MotionError> {
        if r.version != 1 {
            return Err(MotionError::Invalid(format!(
                "unsupported version {}",
                r.version
            )));
        }
        if r.joint_names.len() != NUM_JOINTS
            || r.joint_names.iter().zip(JOINT_NAMES).any(|(a, b)| a != b)
        {
            return Err(MotionError::Invalid("joint names do not match".into()));
        }
        let frames = r
            .joints
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if f.len() != NUM_JOINTS {
                    return Err(MotionError::Invalid(format!(
                        "frame {i} has {} joints",
                        f.len()
                    )));
                }
                Ok(std::array::from_fn(|j| Vector3::from(f[j])))
            })
            .collect::<Result<Vec<Frame>, _>>()?;
        MotionSequence::new(frames, r.fps)
    }
}
