//! Procedural paired motion, camera and 2D-observation samples covering the
//! shot taxonomy (movement × viewpoint × distance).
//!
//! The "video" of a sample is the set of projected 2D joints plus a
//! visibility flag per joint, which is exactly the geometric information a
//! rendered frame exposes about the camera.

use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{project_points, CameraPose, CameraTrajectory, Intrinsics};
use crate::motion::{
    canonicalize, forward_direction, heading, CanonicalMotion, Frame, MotionError, MotionRecord,
    MotionSequence, JOINT_PARENTS, NUM_JOINTS,
};

/// Dataset record schema version.
pub const DATASET_VERSION: u32 = 1;

/// Default frame rate of generated motion.
pub const DEFAULT_FPS: f64 = 8.0;

/// Minimum frames in a shot.
pub const MIN_SHOT_FRAMES: usize = 8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible shot spec: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

macro_rules! label_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn index(&self) -> usize {
                Self::ALL.iter().position(|v| v == self).unwrap()
            }

            pub fn parse(s: &str) -> Option<Self> {
                let s = s.trim().to_ascii_lowercase();
                Self::ALL.iter().copied().find(|v| v.as_str() == s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

label_enum!(
    /// Camera movement type.
    Movement {
        PushIn => "push-in",
        PullOut => "pull-out",
        Orbit => "orbit",
        Static => "static",
        Rotation => "rotation",
        Tracking => "tracking",
        Crane => "crane",
    }
);

label_enum!(
    /// Horizontal side of the subject the camera sits on.
    Facing {
        Front => "front",
        Side => "side",
        Back => "back",
    }
);

label_enum!(
    Elevation {
        EyeLevel => "eye-level",
        HighAngle => "high-angle",
        LowAngle => "low-angle",
    }
);

label_enum!(
    DistanceClass {
        CloseUp => "close-up",
        Medium => "medium",
        Long => "long",
    }
);

label_enum!(
    MotionKind {
        Idle => "idle",
        Walk => "walk",
        Turn => "turn",
    }
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Viewpoint {
    pub facing: Facing,
    pub elevation: Elevation,
}

impl Viewpoint {
    pub const COUNT: usize = 9;

    pub fn all() -> impl Iterator<Item = Viewpoint> {
        Facing::ALL.iter().flat_map(|&facing| {
            Elevation::ALL
                .iter()
                .map(move |&elevation| Viewpoint { facing, elevation })
        })
    }

    pub fn index(&self) -> usize {
        self.facing.index() * Elevation::ALL.len() + self.elevation.index()
    }
}

impl fmt::Display for Viewpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.facing, self.elevation)
    }
}

/// Categorical shot description shared by the generator and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShotLabels {
    pub viewpoint: Viewpoint,
    pub distance: DistanceClass,
    pub movement: Movement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSpec {
    pub movement: Movement,
    pub viewpoint: Viewpoint,
    pub distance: DistanceClass,
    pub frames: usize,
    /// Seed for the camera's free parameters.
    pub seed: u64,
}

impl ShotSpec {
    pub fn labels(&self) -> ShotLabels {
        ShotLabels {
            viewpoint: self.viewpoint,
            distance: self.distance,
            movement: self.movement,
        }
    }
}

/// SplitMix64 finalizer used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Motion

/// Rest offsets of every joint relative to its parent, body facing `+z`.
/// Left-side joints sit at `-x` so that `up × (left_hip − right_hip)` is `+z`.
const REST_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.95, 0.0],
    [-0.09, -0.06, 0.0],
    [0.09, -0.06, 0.0],
    [0.0, 0.11, -0.02],
    [-0.01, -0.40, 0.02],
    [0.01, -0.40, 0.02],
    [0.0, 0.13, 0.01],
    [0.0, -0.41, -0.04],
    [0.0, -0.41, -0.04],
    [0.0, 0.06, 0.02],
    [-0.01, -0.05, 0.12],
    [0.01, -0.05, 0.12],
    [0.0, 0.21, -0.03],
    [-0.07, 0.12, -0.01],
    [0.07, 0.12, -0.01],
    [0.0, 0.09, 0.05],
    [-0.11, 0.04, -0.01],
    [0.11, 0.04, -0.01],
    [-0.03, -0.26, -0.01],
    [0.03, -0.26, -0.01],
    [0.0, -0.25, 0.03],
    [0.0, -0.25, 0.03],
];

fn forward_kinematics(root_pos: Vector3<f64>, local: &[Rotation3<f64>; NUM_JOINTS]) -> Frame {
    let mut global = [Rotation3::identity(); NUM_JOINTS];
    let mut pos = [Vector3::zeros(); NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        match JOINT_PARENTS[j] {
            None => {
                global[j] = local[j];
                pos[j] = root_pos;
            }
            Some(p) => {
                global[j] = global[p] * local[j];
                pos[j] = pos[p] + global[p] * Vector3::from(REST_OFFSETS[j]);
            }
        }
    }
    pos
}

fn rot_x(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn rot_y(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn rot_z(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

/// Generates a canonical motion clip. Bone lengths are constant because every
/// frame is produced by forward kinematics over fixed rest offsets.
pub fn gen_motion(
    kind: MotionKind,
    frames: usize,
    fps: f64,
    seed: u64,
) -> Result<CanonicalMotion, SynthError> {
    if frames < MIN_SHOT_FRAMES {
        return Err(SynthError::InfeasibleSpec(format!(
            "motion needs at least {MIN_SHOT_FRAMES} frames"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6d6f74));
    let phase = rng.random_range(0.0..2.0 * PI);
    let arm_out = rng.random_range(0.08..0.25);
    let elbow_bend = rng.random_range(0.1..0.5);
    let knee_bend = rng.random_range(0.02..0.12);
    let speed = rng.random_range(0.7..1.3);
    let cadence = rng.random_range(1.6..2.0);
    let turn = rng.random_range(25f64.to_radians()..40f64.to_radians())
        * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let sway = rng.random_range(0.004..0.012);

    let duration = (frames - 1) as f64 / fps;
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let tau = i as f64 / fps;
        let mut local = [Rotation3::identity(); NUM_JOINTS];
        let mut root = Vector3::from(REST_OFFSETS[0]);
        let mut yaw = 0.0;
        let (hip_swing, arm_swing, bob) = match kind {
            MotionKind::Idle => {
                root.x += sway * (1.3 * tau + phase).sin();
                root.z += 0.5 * sway * (0.9 * tau + phase).cos();
                (0.03 * (tau + phase).sin(), 0.05 * (1.1 * tau).sin(), 0.0)
            }
            MotionKind::Walk => {
                let s = (2.0 * PI * cadence * 0.5 * tau + phase).sin();
                root.z += speed * tau;
                (
                    0.35 * s,
                    0.3 * s,
                    0.02 * (2.0 * PI * cadence * tau + phase).cos(),
                )
            }
            MotionKind::Turn => {
                yaw = turn * tau / duration;
                let s = (2.0 * PI * 1.2 * tau + phase).sin();
                (0.1 * s, 0.08 * s, 0.005 * s.abs())
            }
        };
        root.y += bob;
        local[0] = rot_y(yaw);
        // Legs: opposite hip flexion, knees bend on the backswing.
        local[1] = rot_x(-hip_swing);
        local[2] = rot_x(hip_swing);
        local[4] = rot_x(knee_bend + 0.5 * hip_swing.max(0.0));
        local[5] = rot_x(knee_bend + 0.5 * (-hip_swing).max(0.0));
        local[7] = rot_x(-0.5 * knee_bend);
        local[8] = rot_x(-0.5 * knee_bend);
        // Spine and head.
        local[3] = rot_x(0.03 * (0.7 * tau + phase).sin());
        local[6] = rot_z(0.02 * (0.5 * tau).cos());
        local[15] = rot_y(0.1 * (0.4 * tau + phase).sin());
        // Arms swing against the legs.
        local[16] = rot_z(-arm_out) * rot_x(arm_swing);
        local[17] = rot_z(arm_out) * rot_x(-arm_swing);
        local[18] = rot_x(-elbow_bend);
        local[19] = rot_x(-elbow_bend);
        out.push(forward_kinematics(root, &local));
    }
    let m = MotionSequence::new(out, fps)?;
    Ok(canonicalize(&m)?.0)
}

// ---------------------------------------------------------------------------
// Camera

/// Range of 3D camera-to-pelvis distance used for a distance class.
fn distance_range(d: DistanceClass) -> (f64, f64) {
    match d {
        DistanceClass::CloseUp => (1.5, 1.8),
        DistanceClass::Medium => (2.6, 3.4),
        DistanceClass::Long => (5.0, 6.5),
    }
}

/// Range of the final distance of a push-in (start of a pull-out); the far
/// end is 1.5× this, so the clip mean is 1.25× of it.
fn near_distance_range(d: DistanceClass) -> (f64, f64) {
    match d {
        DistanceClass::CloseUp => (1.4, 1.5),
        DistanceClass::Medium => (2.0, 2.8),
        DistanceClass::Long => (4.0, 5.0),
    }
}

/// Camera height relative to the pelvis for an elevation class.
fn height_range(e: Elevation) -> (f64, f64) {
    match e {
        Elevation::EyeLevel => (-0.15, 0.3),
        Elevation::HighAngle => (1.1, 1.25),
        Elevation::LowAngle => (-0.6, -0.45),
    }
}

/// Smallest horizontal camera-to-subject radius allowed.
const MIN_RADIUS: f64 = 0.5;
const PUSH_RATIO: f64 = 1.5;

fn facing_azimuth(f: Facing, rng: &mut ChaCha8Rng) -> f64 {
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let base = match f {
        Facing::Front => 0.0,
        Facing::Side => side * PI / 2.0,
        Facing::Back => PI,
    };
    base + rng.random_range(-10f64..10.0).to_radians()
}

fn circular_mean(angles: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = angles.fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    s.atan2(c)
}

/// Camera offset from the subject for a world azimuth (zero along `+z`),
/// horizontal radius and height.
fn offset(azimuth: f64, radius: f64, height: f64) -> Vector3<f64> {
    Vector3::new(radius * azimuth.sin(), height, radius * azimuth.cos())
}

/// Builds a camera trajectory that realizes `spec` around `motion`.
pub fn gen_camera(
    spec: &ShotSpec,
    motion: &CanonicalMotion,
) -> Result<CameraTrajectory, SynthError> {
    let f = motion.len();
    if f < MIN_SHOT_FRAMES || spec.frames != f {
        return Err(SynthError::InfeasibleSpec(format!(
            "spec wants {} frames, motion has {f}",
            spec.frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x63616d));
    let headings = motion
        .frames
        .iter()
        .map(|fr| forward_direction(fr).map(|d| heading(&d)))
        .collect::<Result<Vec<_>, _>>()?;
    let mean_heading = circular_mean(headings.iter().copied());
    let azimuth = mean_heading + facing_azimuth(spec.viewpoint.facing, &mut rng);
    let (h_lo, h_hi) = height_range(spec.viewpoint.elevation);
    let height = rng.random_range(h_lo..h_hi);
    let (d_lo, d_hi) = distance_range(spec.distance);
    let dist = rng.random_range(d_lo..d_hi);

    let mean_pelvis = motion.frames.iter().map(|fr| fr[0]).sum::<Vector3<f64>>() / f as f64;
    let s = |i: usize| i as f64 / (f - 1) as f64;
    let radius_for = |d: f64, h: f64| -> Result<f64, SynthError> {
        let r2 = d * d - h * h;
        if r2 < MIN_RADIUS * MIN_RADIUS {
            return Err(SynthError::InfeasibleSpec(format!(
                "distance {d:.2} m too short for height {h:.2} m"
            )));
        }
        Ok(r2.sqrt())
    };

    let poses: Vec<CameraPose> = match spec.movement {
        Movement::Static => {
            let pos = mean_pelvis + offset(azimuth, radius_for(dist, height)?, height);
            vec![CameraPose::look_at(pos, mean_pelvis); f]
        }
        Movement::Rotation => {
            let pos = mean_pelvis + offset(azimuth, radius_for(dist, height)?, height);
            let pan = rng.random_range(12f64..14.0).to_radians();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let base = CameraPose::look_at(pos, mean_pelvis);
            (0..f)
                .map(|i| {
                    let a = sign * pan * (2.0 * s(i) - 1.0);
                    CameraPose::new(pos, base.rotation * rot_y(a))
                })
                .collect()
        }
        Movement::Orbit => {
            let sweep = rng.random_range(70f64..100.0).to_radians();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let r = radius_for(dist, height)?;
            (0..f)
                .map(|i| {
                    let p = motion.pelvis(i);
                    let a = azimuth + sign * sweep * (s(i) - 0.5);
                    CameraPose::look_at(p + offset(a, r, height), p)
                })
                .collect()
        }
        Movement::PushIn | Movement::PullOut => {
            let (n_lo, n_hi) = near_distance_range(spec.distance);
            let near = rng.random_range(n_lo..n_hi);
            let far = near * PUSH_RATIO;
            let (d0, d1) = if spec.movement == Movement::PushIn {
                (far, near)
            } else {
                (near, far)
            };
            (0..f)
                .map(|i| {
                    let p = motion.pelvis(i);
                    let d = d0 + (d1 - d0) * s(i);
                    Ok(CameraPose::look_at(
                        p + offset(azimuth, radius_for(d, height)?, height),
                        p,
                    ))
                })
                .collect::<Result<_, SynthError>>()?
        }
        Movement::Tracking => {
            let r = radius_for(dist, height)?;
            (0..f)
                .map(|i| {
                    let p = motion.pelvis(i);
                    CameraPose::look_at(p + offset(azimuth, r, height), p)
                })
                .collect()
        }
        Movement::Crane => {
            let travel = if spec.distance == DistanceClass::CloseUp {
                0.4
            } else {
                0.6
            };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let r = radius_for(dist, height)?;
            (0..f)
                .map(|i| {
                    let h = height + sign * travel * (s(i) - 0.5);
                    let pos = mean_pelvis + offset(azimuth, r, h);
                    CameraPose::look_at(pos, mean_pelvis)
                })
                .collect()
        }
    };
    Ok(CameraTrajectory::new(poses, motion.fps))
}

/// Motion kinds that can be framed by each movement while keeping the
/// subject in the central third of the image.
pub fn compatible_motions(m: Movement) -> &'static [MotionKind] {
    match m {
        Movement::Static | Movement::Rotation | Movement::Crane => {
            &[MotionKind::Idle, MotionKind::Turn]
        }
        Movement::Tracking => &[MotionKind::Walk],
        Movement::Orbit | Movement::PushIn | Movement::PullOut => {
            &[MotionKind::Idle, MotionKind::Walk, MotionKind::Turn]
        }
    }
}

// ---------------------------------------------------------------------------
// Samples

/// Per-frame 2D observations of every joint.
pub type Obs2d = [[f64; 2]; NUM_JOINTS];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub motion: CanonicalMotion,
    pub camera: CameraTrajectory,
    /// Projected pixels; `NaN` for joints behind the camera.
    pub obs2d: Vec<Obs2d>,
    pub vis: Vec<[bool; NUM_JOINTS]>,
    pub labels: ShotLabels,
    pub motion_kind: MotionKind,
    pub prompt: String,
}

impl SceneSample {
    pub fn frames(&self) -> usize {
        self.motion.len()
    }
}

/// Projects every joint of every frame.
pub fn observe(
    motion: &MotionSequence,
    camera: &CameraTrajectory,
    k: &Intrinsics,
) -> (Vec<Obs2d>, Vec<[bool; NUM_JOINTS]>) {
    motion
        .frames
        .iter()
        .zip(&camera.poses)
        .map(|(fr, pose)| {
            let proj = project_points(fr, pose, k);
            (
                std::array::from_fn(|j| proj[j].uv),
                std::array::from_fn(|j| proj[j].visible),
            )
        })
        .unzip()
}

fn kind_phrase(k: MotionKind) -> &'static str {
    match k {
        MotionKind::Idle => "stands idle",
        MotionKind::Walk => "walks forward",
        MotionKind::Turn => "turns in place",
    }
}

fn movement_phrase(m: Movement) -> &'static str {
    match m {
        Movement::PushIn => "pushes in",
        Movement::PullOut => "pulls out",
        Movement::Orbit => "orbits",
        Movement::Static => "holds static",
        Movement::Rotation => "rotates",
        Movement::Tracking => "tracks",
        Movement::Crane => "cranes",
    }
}

fn distance_phrase(d: DistanceClass) -> &'static str {
    match d {
        DistanceClass::CloseUp => "close-up",
        DistanceClass::Medium => "medium shot",
        DistanceClass::Long => "long shot",
    }
}

pub fn render_prompt(kind: MotionKind, labels: &ShotLabels) -> String {
    format!(
        "A person {}; the camera {} from a {} {} {}.",
        kind_phrase(kind),
        movement_phrase(labels.movement),
        labels.viewpoint.facing,
        labels.viewpoint.elevation,
        distance_phrase(labels.distance)
    )
}

/// Generates one sample; `seed` picks the motion, `spec.seed` the camera.
pub fn make_sample(spec: &ShotSpec, seed: u64) -> Result<SceneSample, SynthError> {
    let kinds = compatible_motions(spec.movement);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6b696e64));
    let kind = kinds[rng.random_range(0..kinds.len())];
    let motion = gen_motion(kind, spec.frames, DEFAULT_FPS, seed)?;
    let camera = gen_camera(spec, &motion)?;
    let (obs2d, vis) = observe(&motion, &camera, &Intrinsics::default());
    let labels = spec.labels();
    Ok(SceneSample {
        prompt: render_prompt(kind, &labels),
        motion,
        camera,
        obs2d,
        vis,
        labels,
        motion_kind: kind,
    })
}

/// Shot spec `i` of a dataset: movement cycles through all seven types, the
/// other attributes are drawn uniformly.
pub fn dataset_spec(global_seed: u64, index: u64, frames: usize) -> ShotSpec {
    let seed = mix_seed(global_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let movement = Movement::ALL[(index % Movement::ALL.len() as u64) as usize];
    let facing = Facing::ALL[rng.random_range(0..Facing::ALL.len())];
    let elevation = Elevation::ALL[rng.random_range(0..Elevation::ALL.len())];
    let distance = DistanceClass::ALL[rng.random_range(0..DistanceClass::ALL.len())];
    ShotSpec {
        movement,
        viewpoint: Viewpoint { facing, elevation },
        distance,
        frames,
        seed: mix_seed(seed, 0x73706563),
    }
}

/// Sample `index` of the dataset identified by `global_seed`. Independent of
/// generation order.
pub fn dataset_sample(
    global_seed: u64,
    index: u64,
    frames: usize,
) -> Result<SceneSample, SynthError> {
    let spec = dataset_spec(global_seed, index, frames);
    make_sample(
        &spec,
        mix_seed(mix_seed(global_seed, index), 0x6d6f74696f6e),
    )
}

pub fn generate_dataset(
    global_seed: u64,
    count: usize,
    frames: usize,
) -> Result<Vec<SceneSample>, SynthError> {
    (0..count as u64)
        .map(|i| dataset_sample(global_seed, i, frames))
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset IO

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelsRecord {
    movement: Movement,
    facing: Facing,
    elevation: Elevation,
    distance: DistanceClass,
    motion_kind: MotionKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRecord {
    version: u32,
    fps: f64,
    joint_names: Vec<String>,
    joints: Vec<Vec<[f64; 3]>>,
    camera: Vec<[f64; 9]>,
    obs2d: Vec<Vec<Option<[f64; 2]>>>,
    vis: Vec<Vec<bool>>,
    labels: LabelsRecord,
    prompt: String,
}

/// Provenance header written as the first line of generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format: String,
    pub version: u32,
    pub seed: u64,
}

impl Provenance {
    pub fn new(format: &str, seed: u64) -> Self {
        Self {
            format: format.to_string(),
            version: DATASET_VERSION,
            seed,
        }
    }
}

fn to_record(s: &SceneSample) -> SampleRecord {
    let m = MotionRecord::from(&s.motion);
    SampleRecord {
        version: DATASET_VERSION,
        fps: m.fps,
        joint_names: m.joint_names,
        joints: m.joints,
        camera: s.camera.to_9d(),
        obs2d: s
            .obs2d
            .iter()
            .map(|fr| {
                fr.iter()
                    .map(|uv| uv[0].is_finite().then_some(*uv))
                    .collect()
            })
            .collect(),
        vis: s.vis.iter().map(|v| v.to_vec()).collect(),
        labels: LabelsRecord {
            movement: s.labels.movement,
            facing: s.labels.viewpoint.facing,
            elevation: s.labels.viewpoint.elevation,
            distance: s.labels.distance,
            motion_kind: s.motion_kind,
        },
        prompt: s.prompt.clone(),
    }
}

fn from_record(r: SampleRecord) -> Result<SceneSample, String> {
    if r.version != DATASET_VERSION {
        return Err(format!("unsupported version {}", r.version));
    }
    let motion = MotionSequence::try_from(&MotionRecord {
        version: 1,
        fps: r.fps,
        joint_names: r.joint_names,
        joints: r.joints,
    })
    .map_err(|e| e.to_string())?;
    let f = motion.len();
    if r.camera.len() != f || r.obs2d.len() != f || r.vis.len() != f {
        return Err("camera/obs2d/vis frame counts differ from motion".into());
    }
    let camera = CameraTrajectory::from_9d(&r.camera, r.fps).map_err(|e| e.to_string())?;
    let mut obs2d = Vec::with_capacity(f);
    let mut vis = Vec::with_capacity(f);
    for (o, v) in r.obs2d.iter().zip(&r.vis) {
        if o.len() != NUM_JOINTS || v.len() != NUM_JOINTS {
            return Err("obs2d/vis must hold one entry per joint".into());
        }
        obs2d.push(std::array::from_fn(|j| {
            o[j].unwrap_or([f64::NAN, f64::NAN])
        }));
        vis.push(std::array::from_fn(|j| v[j]));
    }
    Ok(SceneSample {
        motion,
        camera,
        obs2d,
        vis,
        labels: ShotLabels {
            viewpoint: Viewpoint {
                facing: r.labels.facing,
                elevation: r.labels.elevation,
            },
            distance: r.labels.distance,
            movement: r.labels.movement,
        },
        motion_kind: r.labels.motion_kind,
        prompt: r.prompt,
    })
}

pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<(), SynthError> {
    write_dataset_with(samples, path, None)
}

/// Writes one JSON record per line, optionally preceded by a provenance line.
pub fn write_dataset_with(
    samples: &[SceneSample],
    path: &Path,
    provenance: Option<&Provenance>,
) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(p) = provenance {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    for s in samples {
        serde_json::to_writer(&mut w, &to_record(s)).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Returns `true` for a provenance header line.
pub(crate) fn is_header(line: &str) -> bool {
    serde_json::from_str::<Provenance>(line).is_ok()
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>, SynthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() || is_header(&line) {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| SynthError::MalformedRecord {
                line: lineno,
                reason: e.to_string(),
            })?;
        out.push(
            from_record(rec).map_err(|reason| SynthError::MalformedRecord {
                line: lineno,
                reason,
            })?,
        );
    }
    Ok(out)
}
