//! Camera trajectory planning for human-motion scenes.
//!
//! Geometry and canonical motion space, a procedural shot generator, an
//! analytic pose oracle, a small flow-matching camera denoiser, rule-based
//! evaluation, tri-view visualization and an evaluator client.

pub mod camflow;
pub mod evalclient;
pub mod geom;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod pnp;
pub mod synth;
pub mod viz;

pub use geom::{CameraPose, CameraTrajectory, Intrinsics, Rotation6D, RotationMatrix};
pub use metrics::EvalReport;
pub use motion::{CanonicalMotion, MotionSequence};
pub use synth::{SceneSample, ShotLabels, ShotSpec};
