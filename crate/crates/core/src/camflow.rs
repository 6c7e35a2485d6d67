//! Camera flow-matching denoiser at toy scale.
//!
//! Three token streams per latent frame: one video-surrogate token per joint
//! (projected 2D joints + visibility), one motion token per joint and a
//! single camera token. Every block normalizes and projects each stream with
//! its own weights, runs joint attention over the concatenated tokens of a
//! latent frame, then applies a per-stream feed-forward. Only the camera
//! stream is timestep-modulated and only camera tokens are decoded.
//!
//! Stage I mechanisms (motion-to-video attention with truncation and the
//! optional camera-guidance tokens) are provided as standalone operations.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{CameraPose, CameraTrajectory, GeomError, Intrinsics};
use crate::motion::{CanonicalMotion, NUM_JOINTS};
use crate::nn::{
    adam_step, attention, gemm, grouped_attention, grouped_attention_backward,
    rmsnorm_backward_into, rmsnorm_into, silu, silu_grad, AdamState, AttentionParams, Checkpoint,
    NnError, RopeTable, Scalar, Tensor,
};
use crate::synth::{mix_seed, SceneSample};

pub const K: usize = NUM_JOINTS;
pub const POSE_DIM: usize = 9;
/// Normalized image x, y and a visibility flag.
pub const OBS_FEATS: usize = 3;
pub const MOTION_FEATS: usize = 3;
/// Camera translations are divided by this before noising.
pub const TRANSLATION_SCALE: f64 = 3.0;
/// Joint coordinates are multiplied by this and rounded for rotary positions.
pub const POSITION_QUANT: f64 = 10.0;
/// Rotary coordinate on all three axes for camera tokens, far outside the
/// quantized joint range.
pub const CAMERA_SENTINEL: i64 = 1000;
const TIME_FREQ_SCALE: f64 = 1000.0;
const TOKENS: usize = 2 * K + 1;
const VIDEO: usize = 0;
const MOTION: usize = 1;
const CAMERA: usize = 2;
const STREAMS: [&str; 3] = ["video", "motion", "camera"];

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("degenerate rotation at frame {frame}")]
    DegenerateRotation { frame: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn cfg_err(msg: impl Into<String>) -> FlowError {
    FlowError::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Frames per clip.
    pub frames: usize,
    /// Temporal downsampling from frames to latent frames.
    pub factor: usize,
    pub ffn_mult: usize,
    pub lr: f64,
    pub batch: usize,
    /// Total optimizer steps.
    pub steps: u64,
    pub seed: u64,
    pub shift: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d: 64,
            blocks: 4,
            heads: 4,
            frames: 16,
            factor: 4,
            ffn_mult: 4,
            lr: 5e-5,
            batch: 16,
            steps: 1000,
            seed: 0,
            shift: 1.0,
            grad_clip: 1.0,
            cosine_decay: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        for (name, v) in [
            ("d", self.d),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("frames", self.frames),
            ("factor", self.factor),
            ("ffn_mult", self.ffn_mult),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return Err(cfg_err(format!("{name} must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(cfg_err(format!(
                "d={} not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if !self.d.is_multiple_of(2) {
            return Err(cfg_err("d must be even"));
        }
        if self.head_width() < 6 {
            return Err(cfg_err(
                "head width must be at least 6 for three rotary axes",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err("lr must be positive"));
        }
        if !(self.shift >= 1.0 && self.shift.is_finite()) {
            return Err(cfg_err("shift must be >= 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(cfg_err("grad_clip must be >= 0"));
        }
        Ok(())
    }

    pub fn latent_frames(&self) -> usize {
        self.frames.div_ceil(self.factor)
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    /// Channels per head that receive rotary encoding: the largest multiple
    /// of six (two per pair, three axes) that fits in a head.
    pub fn rotary_width(&self) -> usize {
        6 * (self.head_width() / 6)
    }
}

// ---------------------------------------------------------------------------
// Timestep shift and flow path

/// `t = s·u / (1 + (s−1)·u)`.
pub fn shift_timestep(u: f64, s: f64) -> f64 {
    s * u / (1.0 + (s - 1.0) * u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub shift: f64,
    /// Noisy normalized camera parameters, one row per frame.
    pub x_t: Vec<[f64; POSE_DIM]>,
}

impl FlowState {
    /// `x_t = (1−t)·clean + t·noise`.
    pub fn interpolate(
        clean: &[[f64; POSE_DIM]],
        noise: &[[f64; POSE_DIM]],
        t: f64,
        shift: f64,
    ) -> Self {
        let x_t = clean
            .iter()
            .zip(noise)
            .map(|(c, n)| std::array::from_fn(|i| (1.0 - t) * c[i] + t * n[i]))
            .collect();
        Self { t, shift, x_t }
    }
}

/// Target velocity `noise − clean`.
pub fn flow_target(clean: &[[f64; POSE_DIM]], noise: &[[f64; POSE_DIM]]) -> Vec<[f64; POSE_DIM]> {
    clean
        .iter()
        .zip(noise)
        .map(|(c, n)| std::array::from_fn(|i| n[i] - c[i]))
        .collect()
}

pub fn normalize_pose(p: &[f64; POSE_DIM]) -> [f64; POSE_DIM] {
    let mut o = *p;
    for v in &mut o[..3] {
        *v /= TRANSLATION_SCALE;
    }
    o
}

pub fn denormalize_pose(p: &[f64; POSE_DIM]) -> [f64; POSE_DIM] {
    let mut o = *p;
    for v in &mut o[..3] {
        *v *= TRANSLATION_SCALE;
    }
    o
}

pub fn normalized_trajectory(c: &CameraTrajectory) -> Vec<[f64; POSE_DIM]> {
    c.to_9d().iter().map(normalize_pose).collect()
}

/// Decodes normalized rows into valid poses, reporting the first frame whose
/// rotation cannot be recovered.
pub fn decode_trajectory(
    rows: &[[f64; POSE_DIM]],
    fps: f64,
) -> Result<CameraTrajectory, FlowError> {
    let poses = rows
        .iter()
        .enumerate()
        .map(|(frame, r)| {
            CameraPose::from_9d(&denormalize_pose(r)).map_err(|e| match e {
                GeomError::DegenerateRotation => FlowError::DegenerateRotation { frame },
                other => cfg_err(other.to_string()),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CameraTrajectory::new(poses, fps))
}

// ---------------------------------------------------------------------------
// Sampling

/// A velocity field over normalized camera rows.
pub trait VelocityField {
    fn velocity(&self, x: &[[f64; POSE_DIM]], t: f64) -> Result<Vec<[f64; POSE_DIM]>, FlowError>;
}

/// Euler integration from `t = 1` to `t = 0` over the shifted schedule.
pub fn euler_integrate(
    field: &dyn VelocityField,
    noise: &[[f64; POSE_DIM]],
    steps: usize,
    shift: f64,
) -> Result<Vec<[f64; POSE_DIM]>, FlowError> {
    if steps == 0 {
        return Err(cfg_err("steps must be >= 1"));
    }
    let mut x = noise.to_vec();
    for i in 0..steps {
        let t0 = shift_timestep(1.0 - i as f64 / steps as f64, shift);
        let t1 = shift_timestep(1.0 - (i + 1) as f64 / steps as f64, shift);
        let v = field.velocity(&x, t0)?;
        if v.len() != x.len() {
            return Err(NnError::ShapeMismatch(format!(
                "velocity has {} rows for {}",
                v.len(),
                x.len()
            ))
            .into());
        }
        let dt = t0 - t1;
        for (row, vr) in x.iter_mut().zip(&v) {
            for c in 0..POSE_DIM {
                row[c] -= dt * vr[c];
            }
        }
    }
    Ok(x)
}

pub fn draw_noise(frames: usize, rng: &mut impl Rng) -> Vec<[f64; POSE_DIM]> {
    (0..frames)
        .map(|_| std::array::from_fn(|_| rng.sample(StandardNormal)))
        .collect()
}

/// Draws noise, integrates and decodes into a camera trajectory.
pub fn euler_sample(
    field: &dyn VelocityField,
    frames: usize,
    steps: usize,
    shift: f64,
    fps: f64,
    rng: &mut impl Rng,
) -> Result<CameraTrajectory, FlowError> {
    let noise = draw_noise(frames, rng);
    let x = euler_integrate(field, &noise, steps, shift)?;
    decode_trajectory(&x, fps)
}

// ---------------------------------------------------------------------------
// Conditions

/// Per-frame Stage II conditions of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions {
    pub frames: usize,
    /// `frames × K` normalized image coordinates plus visibility; zeros for
    /// hidden joints.
    pub video: Vec<[f64; OBS_FEATS]>,
    /// `frames × K` canonical joint positions.
    pub motion: Vec<[f64; MOTION_FEATS]>,
}

impl Conditions {
    pub fn new(
        motion: &CanonicalMotion,
        obs2d: &[[[f64; 2]; K]],
        vis: &[[bool; K]],
        k: &Intrinsics,
    ) -> Result<Self, FlowError> {
        let f = motion.len();
        if obs2d.len() != f || vis.len() != f {
            return Err(NnError::ShapeMismatch(format!(
                "{} motion frames, {} observation frames, {} visibility frames",
                f,
                obs2d.len(),
                vis.len()
            ))
            .into());
        }
        let mut video = Vec::with_capacity(f * K);
        let mut mot = Vec::with_capacity(f * K);
        for i in 0..f {
            for j in 0..K {
                let uv = obs2d[i][j];
                if vis[i][j] && uv[0].is_finite() && uv[1].is_finite() {
                    video.push([
                        (uv[0] - k.cx) / k.focal_px,
                        (uv[1] - k.cy) / k.focal_px,
                        1.0,
                    ]);
                } else {
                    video.push([0.0; 3]);
                }
                let p = motion.frames[i][j];
                mot.push([p.x, p.y, p.z]);
            }
        }
        Ok(Self {
            frames: f,
            video,
            motion: mot,
        })
    }

    pub fn from_sample(s: &SceneSample, k: &Intrinsics) -> Result<Self, FlowError> {
        Self::new(&s.motion, &s.obs2d, &s.vis, k)
    }

    /// Rotary coordinates of the motion tokens: window-mean joint positions,
    /// quantized. `latent × K` entries.
    pub fn motion_positions(&self, factor: usize) -> Vec<[i64; 3]> {
        let latent = self.frames.div_ceil(factor);
        let mut out = Vec::with_capacity(latent * K);
        for l in 0..latent {
            let lo = l * factor;
            let hi = ((l + 1) * factor).min(self.frames);
            for j in 0..K {
                let mut acc = [0.0; 3];
                for i in lo..hi {
                    for a in 0..3 {
                        acc[a] += self.motion[i * K + j][a];
                    }
                }
                out.push(std::array::from_fn(|a| {
                    (acc[a] / (hi - lo) as f64 * POSITION_QUANT).round() as i64
                }));
            }
        }
        out
    }
}

/// Per-joint temporal patches `[latent·K, feats·factor]`, zero-padded past
/// the last frame.
fn joint_patches<S: Scalar, const F: usize>(
    rows: &[[f64; F]],
    frames: usize,
    factor: usize,
) -> Vec<S> {
    let latent = frames.div_ceil(factor);
    let width = F * factor;
    let mut out = vec![S::ZERO; latent * K * width];
    for i in 0..frames {
        let (l, slot) = (i / factor, i % factor);
        for j in 0..K {
            let dst = &mut out[(l * K + j) * width + slot * F..][..F];
            for (o, v) in dst.iter_mut().zip(&rows[i * K + j]) {
                *o = S::from_f64(*v);
            }
        }
    }
    out
}

fn camera_patches<S: Scalar>(rows: &[[f64; POSE_DIM]], factor: usize) -> Vec<S> {
    let latent = rows.len().div_ceil(factor);
    let width = POSE_DIM * factor;
    let mut out = vec![S::ZERO; latent * width];
    for (i, r) in rows.iter().enumerate() {
        for (c, v) in r.iter().enumerate() {
            out[(i / factor) * width + (i % factor) * POSE_DIM + c] = S::from_f64(*v);
        }
    }
    out
}

fn timestep_features<S: Scalar>(t: &[f64], d: usize) -> Vec<S> {
    let half = d / 2;
    let mut out = Vec::with_capacity(t.len() * d);
    for &tv in t {
        let x = tv * TIME_FREQ_SCALE;
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            out.push(S::from_f64((x * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            out.push(S::from_f64((x * freq).sin()));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq)]
struct BranchIx {
    norm1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIx {
    br: [BranchIx; 3],
    mod_w: usize,
    mod_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    vid_w: usize,
    vid_b: usize,
    mot_w: usize,
    mot_b: usize,
    joint: usize,
    cam_w: usize,
    cam_b: usize,
    t_w1: usize,
    t_b1: usize,
    t_w2: usize,
    t_b2: usize,
    blocks: Vec<BlockIx>,
    out_norm: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Spec {
    fn push(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn weight(&mut self, name: String, din: usize, dout: usize) -> usize {
        self.push(name, &[din, dout], Init::Normal(1.0 / (din as f64).sqrt()))
    }
}

fn layout(cfg: &DenoiserConfig) -> (Layout, Spec) {
    let d = cfg.d;
    let hidden = cfg.ffn_mult * d;
    let mut s = Spec {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let vid_w = s.weight("enc.video.w".into(), OBS_FEATS * cfg.factor, d);
    let vid_b = s.push("enc.video.b".into(), &[d], Init::Zeros);
    let mot_w = s.weight("enc.motion.w".into(), MOTION_FEATS * cfg.factor, d);
    let mot_b = s.push("enc.motion.b".into(), &[d], Init::Zeros);
    let joint = s.push("enc.joint".into(), &[K, d], Init::Normal(0.5));
    let cam_w = s.weight("enc.camera.w".into(), POSE_DIM * cfg.factor, d);
    let cam_b = s.push("enc.camera.b".into(), &[d], Init::Zeros);
    let t_w1 = s.weight("time.w1".into(), d, d);
    let t_b1 = s.push("time.b1".into(), &[d], Init::Zeros);
    let t_w2 = s.weight("time.w2".into(), d, d);
    let t_b2 = s.push("time.b2".into(), &[d], Init::Zeros);
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let br = STREAMS.map(|st| {
            let p = format!("block{b}.{st}");
            BranchIx {
                norm1: s.push(format!("{p}.norm1"), &[d], Init::Ones),
                wq: s.weight(format!("{p}.wq"), d, d),
                wk: s.weight(format!("{p}.wk"), d, d),
                wv: s.weight(format!("{p}.wv"), d, d),
                wo: s.weight(format!("{p}.wo"), d, d),
                norm2: s.push(format!("{p}.norm2"), &[d], Init::Ones),
                w1: s.weight(format!("{p}.w1"), d, hidden),
                b1: s.push(format!("{p}.b1"), &[hidden], Init::Zeros),
                w2: s.weight(format!("{p}.w2"), hidden, d),
                b2: s.push(format!("{p}.b2"), &[d], Init::Zeros),
            }
        });
        let mod_w = s.push(format!("block{b}.mod.w"), &[d, 2 * d], Init::Zeros);
        let mod_b = s.push(format!("block{b}.mod.b"), &[2 * d], Init::Zeros);
        blocks.push(BlockIx { br, mod_w, mod_b });
    }
    let out_norm = s.push("head.norm".into(), &[d], Init::Ones);
    let out_w = s.push("head.w".into(), &[d, POSE_DIM * cfg.factor], Init::Zeros);
    let out_b = s.push("head.b".into(), &[POSE_DIM * cfg.factor], Init::Zeros);
    (
        Layout {
            vid_w,
            vid_b,
            mot_w,
            mot_b,
            joint,
            cam_w,
            cam_b,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            blocks,
            out_norm,
            out_w,
            out_b,
        },
        s,
    )
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<S: Scalar = f32> {
    pub cfg: DenoiserConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<S>>,
    ix: Layout,
}

/// One minibatch in model layout.
#[derive(Debug, Clone)]
pub struct Batch<S: Scalar> {
    pub size: usize,
    vid: Vec<S>,
    mot: Vec<S>,
    cam: Vec<S>,
    t: Vec<f64>,
    rope: RopeTable<S>,
}

#[derive(Debug, Clone, Default)]
struct BranchCache<S: Scalar> {
    x: Vec<S>,
    n1: Vec<S>,
    inv1: Vec<S>,
    a1: Option<Vec<S>>,
    o: Vec<S>,
    xm: Vec<S>,
    n2: Vec<S>,
    inv2: Vec<S>,
    a2: Option<Vec<S>>,
    h: Vec<S>,
    u: Vec<S>,
}

#[derive(Debug, Clone)]
struct BlockCache<S: Scalar> {
    br: Vec<BranchCache<S>>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    probs: Vec<S>,
    modv: Vec<S>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S: Scalar> {
    sin: Vec<S>,
    te1: Vec<S>,
    te1s: Vec<S>,
    temb: Vec<S>,
    stemb: Vec<S>,
    blocks: Vec<BlockCache<S>>,
    zc: Vec<S>,
    nout: Vec<S>,
    inv_out: Vec<S>,
}

fn map<S: Scalar>(x: &[S], f: impl Fn(S) -> S) -> Vec<S> {
    x.iter().map(|v| f(*v)).collect()
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self, FlowError> {
        cfg.validate()?;
        let (ix, spec) = layout(cfg);
        let params = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .map(|(shape, init)| match *init {
                Init::Normal(std) => Tensor::randn(shape, std, rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::from_fn(shape, |_| S::ONE),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            names: spec.names,
            params,
            ix,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            cfg: self.cfg.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            ix: self.ix.clone(),
        }
    }

    fn p(&self, i: usize) -> &[S] {
        self.params[i].data()
    }

    fn lin(&self, x: &[S], rows: usize, w: usize, b: Option<usize>) -> Vec<S> {
        let shape = self.params[w].shape();
        let (din, dout) = (shape[0], shape[1]);
        let mut y = vec![S::ZERO; rows * dout];
        if let Some(b) = b {
            for r in 0..rows {
                y[r * dout..(r + 1) * dout].copy_from_slice(self.p(b));
            }
        }
        gemm(
            rows,
            din,
            dout,
            x,
            false,
            self.p(w),
            false,
            &mut y,
            b.is_some(),
        );
        y
    }

    /// Accumulates weight and bias gradients; writes or accumulates `dx`.
    #[allow(clippy::too_many_arguments)]
    fn lin_back(
        &self,
        grads: &mut [Tensor<S>],
        x: &[S],
        rows: usize,
        w: usize,
        b: Option<usize>,
        dy: &[S],
        dx: Option<(&mut [S], bool)>,
    ) {
        let shape = self.params[w].shape();
        let (din, dout) = (shape[0], shape[1]);
        gemm(
            din,
            rows,
            dout,
            x,
            true,
            dy,
            false,
            grads[w].data_mut(),
            true,
        );
        if let Some(b) = b {
            let db = grads[b].data_mut();
            for r in 0..rows {
                for (a, g) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                    *a += *g;
                }
            }
        }
        if let Some((dx, acc)) = dx {
            gemm(rows, dout, din, dy, false, self.p(w), true, dx, acc);
        }
    }

    fn rms(&self, x: &[S], gain: usize) -> (Vec<S>, Vec<S>) {
        let mut y = vec![S::ZERO; x.len()];
        let inv = rmsnorm_into(x, self.p(gain), self.cfg.d, &mut y);
        (y, inv)
    }

    /// Builds a minibatch from conditions, noisy rows and timesteps.
    pub fn make_batch(
        &self,
        conds: &[&Conditions],
        x_t: &[&[[f64; POSE_DIM]]],
        t: &[f64],
    ) -> Result<Batch<S>, FlowError> {
        let cfg = &self.cfg;
        if conds.len() != x_t.len() || conds.len() != t.len() || conds.is_empty() {
            return Err(NnError::ShapeMismatch("batch parts differ in length".into()).into());
        }
        let fl = cfg.latent_frames();
        let mut vid = Vec::new();
        let mut mot = Vec::new();
        let mut cam = Vec::new();
        let mut pos = Vec::with_capacity(conds.len() * fl * TOKENS);
        for (c, x) in conds.iter().zip(x_t) {
            if c.frames != cfg.frames || x.len() != cfg.frames {
                return Err(NnError::ShapeMismatch(format!(
                    "clip has {} frames and {} camera rows, model expects {}",
                    c.frames,
                    x.len(),
                    cfg.frames
                ))
                .into());
            }
            vid.extend(joint_patches::<S, OBS_FEATS>(
                &c.video, c.frames, cfg.factor,
            ));
            mot.extend(joint_patches::<S, MOTION_FEATS>(
                &c.motion, c.frames, cfg.factor,
            ));
            cam.extend(camera_patches::<S>(x, cfg.factor));
            let mp = c.motion_positions(cfg.factor);
            for l in 0..fl {
                pos.extend(std::iter::repeat_n([0i64; 3], K));
                pos.extend_from_slice(&mp[l * K..(l + 1) * K]);
                pos.push([CAMERA_SENTINEL; 3]);
            }
        }
        Ok(Batch {
            size: conds.len(),
            vid,
            mot,
            cam,
            t: t.to_vec(),
            rope: RopeTable::new(cfg.rotary_width(), 3, &pos)?,
        })
    }

    fn gather(&self, parts: [&[S]; 3], groups: usize) -> Vec<S> {
        let d = self.cfg.d;
        let mut out = vec![S::ZERO; groups * TOKENS * d];
        for g in 0..groups {
            let base = g * TOKENS * d;
            out[base..base + K * d].copy_from_slice(&parts[VIDEO][g * K * d..(g + 1) * K * d]);
            out[base + K * d..base + 2 * K * d]
                .copy_from_slice(&parts[MOTION][g * K * d..(g + 1) * K * d]);
            out[base + 2 * K * d..base + TOKENS * d]
                .copy_from_slice(&parts[CAMERA][g * d..(g + 1) * d]);
        }
        out
    }

    fn scatter(&self, comb: &[S], groups: usize) -> [Vec<S>; 3] {
        let d = self.cfg.d;
        let mut v = Vec::with_capacity(groups * K * d);
        let mut m = Vec::with_capacity(groups * K * d);
        let mut c = Vec::with_capacity(groups * d);
        for g in 0..groups {
            let base = g * TOKENS * d;
            v.extend_from_slice(&comb[base..base + K * d]);
            m.extend_from_slice(&comb[base + K * d..base + 2 * K * d]);
            c.extend_from_slice(&comb[base + 2 * K * d..base + TOKENS * d]);
        }
        [v, m, c]
    }

    /// Camera rows scaled by `1 + mod[sample, offset..offset+d]`.
    fn modulate(&self, x: &[S], modv: &[S], offset: usize) -> Vec<S> {
        let d = self.cfg.d;
        let fl = self.cfg.latent_frames();
        let mut out = x.to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let m = &modv[(r / fl) * 2 * d + offset..][..d];
            for (o, s) in row.iter_mut().zip(m) {
                *o *= S::ONE + *s;
            }
        }
        out
    }

    /// Backward of [`Self::modulate`]: returns `dx` and accumulates `dmod`.
    fn demodulate(&self, dy: &[S], x: &[S], modv: &[S], offset: usize, dmod: &mut [S]) -> Vec<S> {
        let d = self.cfg.d;
        let fl = self.cfg.latent_frames();
        let mut dx = dy.to_vec();
        for (r, row) in dx.chunks_mut(d).enumerate() {
            let s = (r / fl) * 2 * d + offset;
            for c in 0..d {
                dmod[s + c] += row[c] * x[r * d + c];
                row[c] *= S::ONE + modv[s + c];
            }
        }
        dx
    }

    /// Predicted velocities `[batch, frames, 9]` in normalized units.
    pub fn forward(&self, batch: &Batch<S>) -> (Vec<S>, ForwardCache<S>) {
        let cfg = &self.cfg;
        let ix = &self.ix;
        let d = cfg.d;
        let fl = cfg.latent_frames();
        let b = batch.size;
        let groups = b * fl;
        let rows = [groups * K, groups * K, groups];

        let sin = timestep_features::<S>(&batch.t, d);
        let te1 = self.lin(&sin, b, ix.t_w1, Some(ix.t_b1));
        let te1s = map(&te1, silu);
        let temb = self.lin(&te1s, b, ix.t_w2, Some(ix.t_b2));
        let stemb = map(&temb, silu);

        let mut zv = self.lin(&batch.vid, rows[VIDEO], ix.vid_w, Some(ix.vid_b));
        let mut zm = self.lin(&batch.mot, rows[MOTION], ix.mot_w, Some(ix.mot_b));
        let joint = self.p(ix.joint);
        for z in [&mut zv, &mut zm] {
            for (r, row) in z.chunks_mut(d).enumerate() {
                for (o, e) in row.iter_mut().zip(&joint[(r % K) * d..(r % K + 1) * d]) {
                    *o += *e;
                }
            }
        }
        let zc = self.lin(&batch.cam, rows[CAMERA], ix.cam_w, Some(ix.cam_b));
        let mut z = [zv, zm, zc];

        let mut blocks = Vec::with_capacity(cfg.blocks);
        for blk in &ix.blocks {
            let modv = self.lin(&stemb, b, blk.mod_w, Some(blk.mod_b));
            let mut br: Vec<BranchCache<S>> = vec![
                BranchCache::default(),
                BranchCache::default(),
                BranchCache::default(),
            ];
            let mut qs: [Vec<S>; 3] = Default::default();
            let mut ks: [Vec<S>; 3] = Default::default();
            let mut vs: [Vec<S>; 3] = Default::default();
            for s in 0..3 {
                let bi = &blk.br[s];
                let x = std::mem::take(&mut z[s]);
                let (n1, inv1) = self.rms(&x, bi.norm1);
                let a1 = (s == CAMERA).then(|| self.modulate(&n1, &modv, 0));
                let a = a1.as_deref().unwrap_or(&n1);
                qs[s] = self.lin(a, rows[s], bi.wq, None);
                ks[s] = self.lin(a, rows[s], bi.wk, None);
                vs[s] = self.lin(a, rows[s], bi.wv, None);
                br[s] = BranchCache {
                    x,
                    n1,
                    inv1,
                    a1,
                    ..Default::default()
                };
            }
            let mut q = self.gather([&qs[0], &qs[1], &qs[2]], groups);
            let mut k = self.gather([&ks[0], &ks[1], &ks[2]], groups);
            let v = self.gather([&vs[0], &vs[1], &vs[2]], groups);
            batch.rope.apply(&mut q, d, cfg.head_width(), false);
            batch.rope.apply(&mut k, d, cfg.head_width(), false);
            let (o, probs) = grouped_attention(&q, &k, &v, d, TOKENS, cfg.heads);
            let os = self.scatter(&o, groups);
            for (s, o_s) in os.into_iter().enumerate() {
                let bi = &blk.br[s];
                let c = &mut br[s];
                let mut xm = self.lin(&o_s, rows[s], bi.wo, None);
                for (a, x) in xm.iter_mut().zip(&c.x) {
                    *a += *x;
                }
                let (n2, inv2) = self.rms(&xm, bi.norm2);
                let a2 = (s == CAMERA).then(|| self.modulate(&n2, &modv, d));
                let h = self.lin(a2.as_deref().unwrap_or(&n2), rows[s], bi.w1, Some(bi.b1));
                let u = map(&h, silu);
                let mut out = self.lin(&u, rows[s], bi.w2, Some(bi.b2));
                for (a, x) in out.iter_mut().zip(&xm) {
                    *a += *x;
                }
                z[s] = out;
                c.o = o_s;
                c.xm = xm;
                c.n2 = n2;
                c.inv2 = inv2;
                c.a2 = a2;
                c.h = h;
                c.u = u;
            }
            blocks.push(BlockCache {
                br,
                q,
                k,
                v,
                probs,
                modv,
            });
        }

        let [_, _, zc] = z;
        let (nout, inv_out) = self.rms(&zc, ix.out_norm);
        let y = self.lin(&nout, groups, ix.out_w, Some(ix.out_b));
        let mut pred = Vec::with_capacity(b * cfg.frames * POSE_DIM);
        let width = POSE_DIM * cfg.factor;
        for bi in 0..b {
            for f in 0..cfg.frames {
                let row = (bi * fl + f / cfg.factor) * width + (f % cfg.factor) * POSE_DIM;
                pred.extend_from_slice(&y[row..row + POSE_DIM]);
            }
        }
        (
            pred,
            ForwardCache {
                sin,
                te1,
                te1s,
                temb,
                stemb,
                blocks,
                zc,
                nout,
                inv_out,
            },
        )
    }

    /// Parameter gradients given `dL/dpred`.
    pub fn backward(
        &self,
        batch: &Batch<S>,
        cache: &ForwardCache<S>,
        dpred: &[S],
    ) -> Vec<Tensor<S>> {
        let cfg = &self.cfg;
        let ix = &self.ix;
        let d = cfg.d;
        let fl = cfg.latent_frames();
        let b = batch.size;
        let groups = b * fl;
        let rows = [groups * K, groups * K, groups];
        let mut grads: Vec<Tensor<S>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();

        let width = POSE_DIM * cfg.factor;
        let mut dy = vec![S::ZERO; groups * width];
        for bi in 0..b {
            for f in 0..cfg.frames {
                let row = (bi * fl + f / cfg.factor) * width + (f % cfg.factor) * POSE_DIM;
                dy[row..row + POSE_DIM]
                    .copy_from_slice(&dpred[(bi * cfg.frames + f) * POSE_DIM..][..POSE_DIM]);
            }
        }
        let mut dnout = vec![S::ZERO; groups * d];
        self.lin_back(
            &mut grads,
            &cache.nout,
            groups,
            ix.out_w,
            Some(ix.out_b),
            &dy,
            Some((&mut dnout, false)),
        );
        let mut dz: [Vec<S>; 3] = [
            vec![S::ZERO; rows[0] * d],
            vec![S::ZERO; rows[1] * d],
            vec![S::ZERO; rows[2] * d],
        ];
        rmsnorm_backward_into(
            &cache.zc,
            self.p(ix.out_norm),
            &cache.inv_out,
            &dnout,
            d,
            &mut dz[CAMERA],
            grads[ix.out_norm].data_mut(),
        );

        let mut dstemb = vec![S::ZERO; b * d];
        for (blk, bc) in ix.blocks.iter().zip(&cache.blocks).rev() {
            let mut dmod = vec![S::ZERO; b * 2 * d];
            let mut dxm: [Vec<S>; 3] = Default::default();
            let mut dos: [Vec<S>; 3] = Default::default();
            for s in 0..3 {
                let bi = &blk.br[s];
                let c = &bc.br[s];
                let dout = &dz[s];
                let mut du = vec![S::ZERO; rows[s] * cfg.ffn_mult * d];
                self.lin_back(
                    &mut grads,
                    &c.u,
                    rows[s],
                    bi.w2,
                    Some(bi.b2),
                    dout,
                    Some((&mut du, false)),
                );
                for (g, h) in du.iter_mut().zip(&c.h) {
                    *g *= silu_grad(*h);
                }
                let mut da2 = vec![S::ZERO; rows[s] * d];
                let a2 = c.a2.as_deref().unwrap_or(&c.n2);
                self.lin_back(
                    &mut grads,
                    a2,
                    rows[s],
                    bi.w1,
                    Some(bi.b1),
                    &du,
                    Some((&mut da2, false)),
                );
                let dn2 = if s == CAMERA {
                    self.demodulate(&da2, &c.n2, &bc.modv, d, &mut dmod)
                } else {
                    da2
                };
                let mut dx = dout.clone();
                rmsnorm_backward_into(
                    &c.xm,
                    self.p(bi.norm2),
                    &c.inv2,
                    &dn2,
                    d,
                    &mut dx,
                    grads[bi.norm2].data_mut(),
                );
                let mut d_o = vec![S::ZERO; rows[s] * d];
                self.lin_back(
                    &mut grads,
                    &c.o,
                    rows[s],
                    bi.wo,
                    None,
                    &dx,
                    Some((&mut d_o, false)),
                );
                dxm[s] = dx;
                dos[s] = d_o;
            }
            let d_o = self.gather([&dos[0], &dos[1], &dos[2]], groups);
            let (mut dq, mut dk, dv) = grouped_attention_backward(
                &bc.q, &bc.k, &bc.v, &bc.probs, &d_o, d, TOKENS, cfg.heads,
            );
            batch.rope.apply(&mut dq, d, cfg.head_width(), true);
            batch.rope.apply(&mut dk, d, cfg.head_width(), true);
            let dqs = self.scatter(&dq, groups);
            let dks = self.scatter(&dk, groups);
            let dvs = self.scatter(&dv, groups);
            for s in 0..3 {
                let bi = &blk.br[s];
                let c = &bc.br[s];
                let a1 = c.a1.as_deref().unwrap_or(&c.n1);
                let mut da1 = vec![S::ZERO; rows[s] * d];
                self.lin_back(
                    &mut grads,
                    a1,
                    rows[s],
                    bi.wq,
                    None,
                    &dqs[s],
                    Some((&mut da1, false)),
                );
                self.lin_back(
                    &mut grads,
                    a1,
                    rows[s],
                    bi.wk,
                    None,
                    &dks[s],
                    Some((&mut da1, true)),
                );
                self.lin_back(
                    &mut grads,
                    a1,
                    rows[s],
                    bi.wv,
                    None,
                    &dvs[s],
                    Some((&mut da1, true)),
                );
                let dn1 = if s == CAMERA {
                    self.demodulate(&da1, &c.n1, &bc.modv, 0, &mut dmod)
                } else {
                    da1
                };
                let mut dx = std::mem::take(&mut dxm[s]);
                rmsnorm_backward_into(
                    &c.x,
                    self.p(bi.norm1),
                    &c.inv1,
                    &dn1,
                    d,
                    &mut dx,
                    grads[bi.norm1].data_mut(),
                );
                dz[s] = dx;
            }
            self.lin_back(
                &mut grads,
                &cache.stemb,
                b,
                blk.mod_w,
                Some(blk.mod_b),
                &dmod,
                Some((&mut dstemb, true)),
            );
        }

        let mut dtemb = dstemb;
        for (g, x) in dtemb.iter_mut().zip(&cache.temb) {
            *g *= silu_grad(*x);
        }
        let mut dte1 = vec![S::ZERO; b * d];
        self.lin_back(
            &mut grads,
            &cache.te1s,
            b,
            ix.t_w2,
            Some(ix.t_b2),
            &dtemb,
            Some((&mut dte1, false)),
        );
        for (g, x) in dte1.iter_mut().zip(&cache.te1) {
            *g *= silu_grad(*x);
        }
        self.lin_back(
            &mut grads,
            &cache.sin,
            b,
            ix.t_w1,
            Some(ix.t_b1),
            &dte1,
            None,
        );

        self.lin_back(
            &mut grads,
            &batch.vid,
            rows[VIDEO],
            ix.vid_w,
            Some(ix.vid_b),
            &dz[VIDEO],
            None,
        );
        self.lin_back(
            &mut grads,
            &batch.mot,
            rows[MOTION],
            ix.mot_w,
            Some(ix.mot_b),
            &dz[MOTION],
            None,
        );
        self.lin_back(
            &mut grads,
            &batch.cam,
            rows[CAMERA],
            ix.cam_w,
            Some(ix.cam_b),
            &dz[CAMERA],
            None,
        );
        let dj = grads[ix.joint].data_mut();
        for z in [&dz[VIDEO], &dz[MOTION]] {
            for (r, row) in z.chunks(d).enumerate() {
                for (a, g) in dj[(r % K) * d..(r % K + 1) * d].iter_mut().zip(row) {
                    *a += *g;
                }
            }
        }
        grads
    }

    /// Motion-stream tokens `[latent, K, d]` before rotary encoding, with the
    /// rotary coordinates of each token.
    pub fn encode_motion(
        &self,
        motion: &CanonicalMotion,
    ) -> Result<(Tensor<S>, Vec<[i64; 3]>), FlowError> {
        let rows: Vec<[f64; 3]> = motion
            .frames
            .iter()
            .flat_map(|f| f.iter().map(|p| [p.x, p.y, p.z]))
            .collect();
        let c = Conditions {
            frames: motion.len(),
            video: vec![[0.0; 3]; rows.len()],
            motion: rows,
        };
        let fl = motion.len().div_ceil(self.cfg.factor);
        let x = joint_patches::<S, MOTION_FEATS>(&c.motion, c.frames, self.cfg.factor);
        let mut z = self.lin(&x, fl * K, self.ix.mot_w, Some(self.ix.mot_b));
        let joint = self.p(self.ix.joint);
        for (r, row) in z.chunks_mut(self.cfg.d).enumerate() {
            for (o, e) in row.iter_mut().zip(&joint[(r % K) * self.cfg.d..]) {
                *o += *e;
            }
        }
        Ok((
            Tensor::new(vec![fl, K, self.cfg.d], z)?,
            c.motion_positions(self.cfg.factor),
        ))
    }

    /// Camera-stream tokens `[latent, 1, d]` from normalized camera rows.
    pub fn encode_camera(&self, rows: &[[f64; POSE_DIM]]) -> Result<Tensor<S>, FlowError> {
        let fl = rows.len().div_ceil(self.cfg.factor);
        let x = camera_patches::<S>(rows, self.cfg.factor);
        let z = self.lin(&x, fl, self.ix.cam_w, Some(self.ix.cam_b));
        Ok(Tensor::new(vec![fl, 1, self.cfg.d], z)?)
    }

    /// Flow-matching loss and parameter gradients for one minibatch.
    pub fn fm_loss(
        &self,
        conds: &[&Conditions],
        clean: &[&[[f64; POSE_DIM]]],
        noise: &[&[[f64; POSE_DIM]]],
        t: &[f64],
    ) -> Result<(f64, Vec<Tensor<S>>), FlowError> {
        let states: Vec<FlowState> = clean
            .iter()
            .zip(noise)
            .zip(t)
            .map(|((c, n), &t)| FlowState::interpolate(c, n, t, self.cfg.shift))
            .collect();
        let xs: Vec<&[[f64; POSE_DIM]]> = states.iter().map(|s| s.x_t.as_slice()).collect();
        let batch = self.make_batch(conds, &xs, t)?;
        let (pred, cache) = self.forward(&batch);
        let mut dpred = vec![S::ZERO; pred.len()];
        let n = pred.len() as f64;
        let mut loss = 0.0;
        let mut i = 0;
        for (c, nz) in clean.iter().zip(noise) {
            for target in flow_target(c, nz) {
                for v in target {
                    let e = pred[i].to_f64() - v;
                    loss += e * e;
                    dpred[i] = S::from_f64(2.0 * e / n);
                    i += 1;
                }
            }
        }
        let grads = self.backward(&batch, &cache, &dpred);
        Ok((loss / n, grads))
    }

    /// Velocity predictions for a batch of clips at a shared timestep.
    pub fn predict(
        &self,
        conds: &[&Conditions],
        x_t: &[&[[f64; POSE_DIM]]],
        t: f64,
    ) -> Result<Vec<Vec<[f64; POSE_DIM]>>, FlowError> {
        let ts = vec![t; conds.len()];
        let batch = self.make_batch(conds, x_t, &ts)?;
        let (pred, _) = self.forward(&batch);
        Ok(pred
            .chunks(self.cfg.frames * POSE_DIM)
            .map(|clip| {
                clip.chunks(POSE_DIM)
                    .map(|r| std::array::from_fn(|c| r[c].to_f64()))
                    .collect()
            })
            .collect())
    }
}

/// A trained model bound to the conditions of one clip.
pub struct ConditionedField<'a, S: Scalar> {
    pub model: &'a Denoiser<S>,
    pub cond: &'a Conditions,
}

impl<S: Scalar> VelocityField for ConditionedField<'_, S> {
    fn velocity(&self, x: &[[f64; POSE_DIM]], t: f64) -> Result<Vec<[f64; POSE_DIM]>, FlowError> {
        Ok(self.model.predict(&[self.cond], &[x], t)?.remove(0))
    }
}

/// Samples many clips at once, integrating them in lockstep. Noise for clip
/// `i` comes from `rng` in order.
pub fn sample_batch<S: Scalar>(
    model: &Denoiser<S>,
    conds: &[&Conditions],
    steps: usize,
    shift: f64,
    fps: f64,
    rng: &mut impl Rng,
) -> Result<Vec<CameraTrajectory>, FlowError> {
    if steps == 0 {
        return Err(cfg_err("steps must be >= 1"));
    }
    let mut xs: Vec<Vec<[f64; POSE_DIM]>> =
        conds.iter().map(|c| draw_noise(c.frames, rng)).collect();
    for i in 0..steps {
        let t0 = shift_timestep(1.0 - i as f64 / steps as f64, shift);
        let t1 = shift_timestep(1.0 - (i + 1) as f64 / steps as f64, shift);
        let views: Vec<&[[f64; POSE_DIM]]> = xs.iter().map(|x| x.as_slice()).collect();
        let v = model.predict(conds, &views, t0)?;
        for (x, vel) in xs.iter_mut().zip(&v) {
            for (row, vr) in x.iter_mut().zip(vel) {
                for c in 0..POSE_DIM {
                    row[c] -= (t0 - t1) * vr[c];
                }
            }
        }
    }
    xs.iter().map(|x| decode_trajectory(x, fps)).collect()
}

// ---------------------------------------------------------------------------
// Training

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Denoiser<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: u64,
}

const ARCH_KEY: &str = "meta.arch";
const STEP_KEY: &str = "meta.step";

impl TrainState {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self, FlowError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1417));
        let model = Denoiser::new(cfg, &mut rng)?;
        let adam = AdamState::new(&model.params, cfg.lr);
        Ok(Self {
            model,
            adam,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = &self.model.cfg;
        let arch = [
            cfg.d,
            cfg.blocks,
            cfg.heads,
            cfg.frames,
            cfg.factor,
            cfg.ffn_mult,
        ];
        let mut arrays = vec![(
            ARCH_KEY.to_string(),
            Tensor::new(vec![arch.len()], arch.iter().map(|&v| v as f32).collect()).expect("sized"),
        )];
        // Step split into 24-bit halves so f32 stores it exactly.
        let st = self.step;
        arrays.push((
            STEP_KEY.to_string(),
            Tensor::new(vec![2], vec![(st >> 24) as f32, (st & 0xff_ffff) as f32]).expect("sized"),
        ));
        for (n, p) in self.model.names.iter().zip(&self.model.params) {
            arrays.push((n.clone(), p.clone()));
        }
        for (n, m) in self.model.names.iter().zip(&self.adam.m) {
            arrays.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in self.model.names.iter().zip(&self.adam.v) {
            arrays.push((format!("adam.v.{n}"), v.clone()));
        }
        Checkpoint {
            d: cfg.d as u32,
            blocks: cfg.blocks as u32,
            seed: cfg.seed,
            arrays,
        }
    }

    /// Restores a state; architecture fields come from the checkpoint and
    /// the optimization fields from `cfg`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &DenoiserConfig) -> Result<Self, FlowError> {
        let arch = ck
            .get(ARCH_KEY)
            .ok_or_else(|| FlowError::Checkpoint(format!("missing {ARCH_KEY}")))?
            .data();
        if arch.len() != 6 {
            return Err(FlowError::Checkpoint("bad architecture record".into()));
        }
        let mut full = cfg.clone();
        full.d = arch[0] as usize;
        full.blocks = arch[1] as usize;
        full.heads = arch[2] as usize;
        full.frames = arch[3] as usize;
        full.factor = arch[4] as usize;
        full.ffn_mult = arch[5] as usize;
        full.seed = ck.seed;
        if full.d != ck.d as usize || full.blocks != ck.blocks as usize {
            return Err(FlowError::Checkpoint(
                "header disagrees with architecture record".into(),
            ));
        }
        full.validate()?;
        let (ix, spec) = layout(&full);
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<f32>, FlowError> {
            let t = ck
                .get(name)
                .ok_or_else(|| FlowError::Checkpoint(format!("missing {name}")))?;
            if t.shape() != shape {
                return Err(FlowError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let params = spec
            .names
            .iter()
            .zip(&spec.shapes)
            .map(|(n, s)| fetch(n, s))
            .collect::<Result<Vec<_>, _>>()?;
        let mut adam = AdamState::new(&params, full.lr);
        let has_moments = ck.get(&format!("adam.m.{}", spec.names[0])).is_some();
        if has_moments {
            for (i, (n, s)) in spec.names.iter().zip(&spec.shapes).enumerate() {
                adam.m[i] = fetch(&format!("adam.m.{n}"), s)?;
                adam.v[i] = fetch(&format!("adam.v.{n}"), s)?;
            }
        }
        let step = match ck.get(STEP_KEY) {
            Some(t) if t.len() == 2 => ((t.data()[0] as u64) << 24) | t.data()[1] as u64,
            _ => 0,
        };
        adam.step = if has_moments { step } else { 0 };
        Ok(Self {
            model: Denoiser {
                cfg: full,
                names: spec.names,
                params,
                ix,
            },
            adam,
            step,
        })
    }
}

pub fn learning_rate(cfg: &DenoiserConfig, step: u64) -> f64 {
    if cfg.cosine_decay && cfg.steps > 0 {
        let x = (step as f64 / cfg.steps as f64).min(1.0);
        0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * x).cos())
    } else {
        cfg.lr
    }
}

/// Precomputed per-clip training inputs.
pub struct TrainItem {
    pub cond: Conditions,
    pub clean: Vec<[f64; POSE_DIM]>,
}

pub fn prepare(data: &[SceneSample], k: &Intrinsics) -> Result<Vec<TrainItem>, FlowError> {
    data.iter()
        .map(|s| {
            Ok(TrainItem {
                cond: Conditions::from_sample(s, k)?,
                clean: normalized_trajectory(&s.camera),
            })
        })
        .collect()
}

/// Index of the sample at global position `pos` in a per-epoch shuffle.
fn epoch_order(seed: u64, n: usize, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
        seed,
        0xE90C ^ epoch,
    )));
    order
}

/// Trains until `state.step == cfg.steps`, starting from `state` or from a
/// fresh initialization. Minibatch order, timesteps and noise depend only on
/// the seed and the step index, so a resumed run follows the same stream.
pub fn train_stage2(
    data: &[TrainItem],
    cfg: &DenoiserConfig,
    state: Option<TrainState>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainState, FlowError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    state.adam.lr = cfg.lr;
    let model_cfg = state.model.cfg.clone();
    let n = data.len();
    let start = Instant::now();
    let mut order = epoch_order(model_cfg.seed, n, 0);
    let mut order_epoch = 0u64;
    while state.step < cfg.steps {
        let step = state.step;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(model_cfg.seed, 0x5_7E90 ^ step));
        let mut idx = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch as u64 {
            let pos = step * cfg.batch as u64 + i;
            let epoch = pos / n as u64;
            if epoch != order_epoch {
                order = epoch_order(model_cfg.seed, n, epoch);
                order_epoch = epoch;
            }
            idx.push(order[(pos % n as u64) as usize]);
        }
        let conds: Vec<&Conditions> = idx.iter().map(|&i| &data[i].cond).collect();
        let clean: Vec<&[[f64; POSE_DIM]]> =
            idx.iter().map(|&i| data[i].clean.as_slice()).collect();
        let noise: Vec<Vec<[f64; POSE_DIM]>> = idx
            .iter()
            .map(|&i| draw_noise(data[i].clean.len(), &mut rng))
            .collect();
        let noise_refs: Vec<&[[f64; POSE_DIM]]> = noise.iter().map(|v| v.as_slice()).collect();
        let t: Vec<f64> = (0..cfg.batch)
            .map(|_| shift_timestep(rng.random::<f64>(), cfg.shift))
            .collect();
        let (loss, mut grads) = state.model.fm_loss(&conds, &clean, &noise_refs, &t)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(FlowError::NonFiniteLoss { step });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|v| (*v as f64) * (*v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let scale = (cfg.grad_clip / norm) as f32;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        state.adam.lr = learning_rate(cfg, step);
        adam_step(&mut state.model.params, &grads, &mut state.adam)?;
        state.step += 1;
        if let Some(w) = log.as_deref_mut() {
            let line = LogLine {
                step,
                loss,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("plain struct"))?;
        }
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Stage I mechanisms

/// Token streams of one clip, each `[latent, tokens, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle<S: Scalar = f32> {
    pub z_v: Tensor<S>,
    pub z_m: Tensor<S>,
    pub z_c: Tensor<S>,
}

impl<S: Scalar> TokenBundle<S> {
    pub fn new(z_v: Tensor<S>, z_m: Tensor<S>, z_c: Tensor<S>) -> Result<Self, FlowError> {
        let ok = |t: &Tensor<S>| t.shape().len() == 3;
        if !ok(&z_v) || !ok(&z_m) || !ok(&z_c) {
            return Err(NnError::ShapeMismatch("token streams must be rank 3".into()).into());
        }
        let (f, d) = (z_v.shape()[0], z_v.shape()[2]);
        if z_m.shape()[0] != f || z_c.shape()[0] != f || z_m.shape()[2] != d || z_c.shape()[2] != d
        {
            return Err(NnError::ShapeMismatch(
                "streams disagree on latent frames or width".into(),
            )
            .into());
        }
        if z_c.shape()[1] != 1 {
            return Err(
                NnError::ShapeMismatch("exactly one camera token per latent frame".into()).into(),
            );
        }
        Ok(Self { z_v, z_m, z_c })
    }

    pub fn latent_frames(&self) -> usize {
        self.z_v.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.z_v.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub p: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { p: 0.5 }
    }
}

impl GuidanceConfig {
    pub fn new(p: f64) -> Result<Self, FlowError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(cfg_err(format!("guidance probability {p} outside [0, 1]")));
        }
        Ok(Self { p })
    }
}

/// Concatenates `[z_v; z_m]` per latent frame, appending the camera token
/// with probability `p`. One draw per clip. Returns the tokens
/// `[latent, n, d]` and whether camera guidance was included.
pub fn guided_token_assembly<S: Scalar>(
    bundle: &TokenBundle<S>,
    cfg: &GuidanceConfig,
    rng: &mut impl Rng,
) -> (Tensor<S>, bool) {
    let guided = rng.random::<f64>() < cfg.p;
    let f = bundle.latent_frames();
    let d = bundle.width();
    let nv = bundle.z_v.shape()[1];
    let nm = bundle.z_m.shape()[1];
    let n = nv + nm + usize::from(guided);
    let mut data = Vec::with_capacity(f * n * d);
    for l in 0..f {
        data.extend_from_slice(&bundle.z_v.data()[l * nv * d..(l + 1) * nv * d]);
        data.extend_from_slice(&bundle.z_m.data()[l * nm * d..(l + 1) * nm * d]);
        if guided {
            data.extend_from_slice(&bundle.z_c.data()[l * d..(l + 1) * d]);
        }
    }
    (Tensor::new(vec![f, n, d], data).expect("sized"), guided)
}

/// Joint attention over `[z_v; z_m]` per latent frame, keeping only the
/// video rows of the output and adding them onto `z_v`.
pub fn spatial_motion_attention<S: Scalar>(
    z_v: &Tensor<S>,
    z_m: &Tensor<S>,
    params: &AttentionParams<S>,
) -> Result<Tensor<S>, FlowError> {
    if z_v.shape().len() != 3 || z_m.shape().len() != 3 || z_v.shape()[0] != z_m.shape()[0] {
        return Err(NnError::ShapeMismatch(format!(
            "z_v {:?}, z_m {:?}",
            z_v.shape(),
            z_m.shape()
        ))
        .into());
    }
    let (f, nv, d) = (z_v.shape()[0], z_v.shape()[1], z_v.shape()[2]);
    let nm = z_m.shape()[1];
    if z_m.shape()[2] != d {
        return Err(NnError::ShapeMismatch("stream widths differ".into()).into());
    }
    let mut out = z_v.data().to_vec();
    for l in 0..f {
        let mut tokens = Vec::with_capacity((nv + nm) * d);
        tokens.extend_from_slice(&z_v.data()[l * nv * d..(l + 1) * nv * d]);
        tokens.extend_from_slice(&z_m.data()[l * nm * d..(l + 1) * nm * d]);
        let t = Tensor::new(vec![nv + nm, d], tokens)?;
        let (y, _) = attention(&t, &t, params)?;
        for (o, v) in out[l * nv * d..(l + 1) * nv * d]
            .iter_mut()
            .zip(&y.data()[..nv * d])
        {
            *o += *v;
        }
    }
    Ok(Tensor::new(vec![f, nv, d], out)?)
}
