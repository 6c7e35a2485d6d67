//! Rule-based trajectory evaluation: human missing rate, jerk, shot
//! diversity, reprojection accuracy, geometric shot classification and
//! categorical style entropy.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{geodesic_angle, project_points, rotation_log, CameraTrajectory, Intrinsics};
use crate::motion::{forward_direction, heading, MotionSequence, NUM_JOINTS, PELVIS};
use crate::synth::{DistanceClass, Elevation, Facing, Movement, ShotLabels, Viewpoint};

/// A frame is missing when fewer than this fraction of joints are visible.
pub const MISSING_VISIBLE_FRACTION: f64 = 0.5;

pub const CLOSE_UP_MAX_M: f64 = 2.0;
pub const LONG_MIN_M: f64 = 4.0;
pub const HIGH_ANGLE_MIN_M: f64 = 1.0;
pub const LOW_ANGLE_MIN_M: f64 = 0.3;
pub const EYE_LEVEL_MAX_M: f64 = 0.5;

pub const FRONT_MAX_DEG: f64 = 45.0;
pub const BACK_MIN_DEG: f64 = 135.0;

pub const STATIC_MAX_DISP_M: f64 = 0.1;
pub const STATIC_MAX_ROT_DEG: f64 = 2.0;
pub const ORBIT_MIN_SWEEP_DEG: f64 = 30.0;
pub const ORBIT_MAX_DIST_VARIATION: f64 = 0.2;
pub const PUSH_IN_MIN_RATIO: f64 = 1.33;
pub const PULL_OUT_MAX_RATIO: f64 = 0.75;
pub const CRANE_MIN_VERTICAL_FRACTION: f64 = 0.6;
pub const ROTATION_MIN_SWEEP_DEG: f64 = 20.0;
pub const ROTATION_MAX_DISP_M: f64 = 0.3;

/// Default reprojection raster (1/8 of the default image).
pub const RASTER_W: usize = 84;
pub const RASTER_H: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("trajectory too short: need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },
}

fn wrap_angle(mut a: f64) -> f64 {
    while a > PI {
        a -= 2.0 * PI;
    }
    while a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Fraction of frames in which fewer than half the joints project visibly.
pub fn hmr(camera: &CameraTrajectory, motion: &MotionSequence, k: &Intrinsics) -> f64 {
    let f = camera.len().min(motion.len());
    if f == 0 {
        return 0.0;
    }
    let missing = (0..f)
        .filter(|&i| {
            let visible = project_points(&motion.frames[i], &camera.poses[i], k)
                .iter()
                .filter(|p| p.visible)
                .count();
            (visible as f64) < MISSING_VISIBLE_FRACTION * NUM_JOINTS as f64
        })
        .count();
    missing as f64 / f as f64
}

/// Mean translational jerk (m/frame³) and rotational jerk (rad/frame³).
///
/// Rotational jerk is the second difference of the body-frame angular
/// velocity `log(R_iᵀ R_{i+1})`, so uniform rotation scores zero.
pub fn jerk(camera: &CameraTrajectory) -> Result<(f64, f64), MetricsError> {
    let f = camera.len();
    if f < 4 {
        return Err(MetricsError::TooShort { need: 4, got: f });
    }
    let p: Vec<_> = camera.poses.iter().map(|p| p.position).collect();
    let jt = (0..f - 3)
        .map(|i| (p[i + 3] - 3.0 * p[i + 2] + 3.0 * p[i + 1] - p[i]).norm())
        .sum::<f64>()
        / (f - 3) as f64;
    let w: Vec<Vector3<f64>> = camera
        .poses
        .windows(2)
        .map(|w| rotation_log(&(w[0].rotation.inverse() * w[1].rotation)))
        .collect();
    let jr = (0..f - 3)
        .map(|i| (w[i + 2] - 2.0 * w[i + 1] + w[i]).norm())
        .sum::<f64>()
        / (f - 3) as f64;
    Ok((jt, jr))
}

/// Per-frame facing directions; degenerate frames reuse the previous one.
fn facings(motion: &MotionSequence) -> Vec<Vector3<f64>> {
    let mut last = Vector3::z();
    motion
        .frames
        .iter()
        .map(|fr| {
            if let Ok(d) = forward_direction(fr) {
                last = d;
            }
            last
        })
        .collect()
}

/// Camera distance to the pelvis and its azimuth in the character's frame
/// (zero straight in front), per frame.
pub fn subject_relative(camera: &CameraTrajectory, motion: &MotionSequence) -> Vec<(f64, f64)> {
    let fwd = facings(motion);
    camera
        .poses
        .iter()
        .zip(&motion.frames)
        .zip(&fwd)
        .map(|((pose, fr), fw)| {
            let off = pose.position - fr[PELVIS];
            let az = wrap_angle(heading(&off) - heading(fw));
            (off.norm(), az)
        })
        .collect()
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let dev: Vec<f64> = v.iter().map(|x| x - v[0]).collect();
    let mean = dev.iter().sum::<f64>() / n;
    (dev.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean resultant length of a set of angles.
fn resultant_length(a: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (s, c) = a
        .iter()
        .fold((0.0, 0.0), |(s, c), x| (s + x.sin(), c + x.cos()));
    ((s / n).powi(2) + (c / n).powi(2)).sqrt()
}

pub fn circular_std(a: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let r = resultant_length(a);
    if r <= 0.0 {
        return f64::INFINITY;
    }
    // 1 - R computed as a sum of half-angle squares avoids cancellation when
    // the angles are nearly identical. Centring on the first angle makes
    // identical inputs give exactly zero.
    let dev: Vec<f64> = a.iter().map(|x| x - a[0]).collect();
    let mu = circular_mean(&dev);
    let one_minus_r = dev
        .iter()
        .map(|x| 2.0 * ((x - mu) / 2.0).sin().powi(2))
        .sum::<f64>()
        / a.len() as f64;
    (-2.0 * (-one_minus_r).ln_1p()).max(0.0).sqrt()
}

pub fn circular_mean(a: &[f64]) -> f64 {
    let (s, c) = a
        .iter()
        .fold((0.0, 0.0), |(s, c), x| (s + x.sin(), c + x.cos()));
    s.atan2(c)
}

/// `(dist_t, dist_r)`: standard deviation of camera-subject distance and
/// circular standard deviation of the subject-relative azimuth.
pub fn shot_diversity(camera: &CameraTrajectory, motion: &MotionSequence) -> (f64, f64) {
    let rel = subject_relative(camera, motion);
    if rel.is_empty() {
        return (0.0, 0.0);
    }
    let d: Vec<f64> = rel.iter().map(|r| r.0).collect();
    let a: Vec<f64> = rel.iter().map(|r| r.1).collect();
    (std_dev(&d), circular_std(&a))
}

// ---------------------------------------------------------------------------
// Reprojection accuracy

type P2 = [f64; 2];

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; returns the hull counter-clockwise without
/// collinear points.
pub fn convex_hull(points: &[P2]) -> Vec<P2> {
    let mut pts: Vec<P2> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<P2> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Binary mask of the filled convex hull, sampled at pixel centres.
pub fn rasterize_hull(points: &[P2], width: usize, height: usize) -> Vec<bool> {
    let hull = convex_hull(points);
    let mut mask = vec![false; width * height];
    if hull.len() < 3 {
        return mask;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &hull {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let col_lo = (x0 - 0.5).ceil().max(0.0) as usize;
    let row_lo = (y0 - 0.5).ceil().max(0.0) as usize;
    let col_hi = ((x1 - 0.5).floor().min(width as f64 - 1.0)).max(-1.0);
    let row_hi = ((y1 - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
    if col_hi < 0.0 || row_hi < 0.0 {
        return mask;
    }
    for row in row_lo..=row_hi as usize {
        for col in col_lo..=col_hi as usize {
            let c = [col as f64 + 0.5, row as f64 + 0.5];
            let inside =
                (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], c) >= 0.0);
            mask[row * width + col] = inside;
        }
    }
    mask
}

/// Visible projected joints of one frame, scaled to the raster grid.
fn raster_points(
    frame: &[Vector3<f64>; NUM_JOINTS],
    pose: &crate::geom::CameraPose,
    k: &Intrinsics,
    sx: f64,
    sy: f64,
) -> Vec<P2> {
    project_points(frame, pose, k)
        .iter()
        .filter(|p| p.visible)
        .map(|p| [p.uv[0] * sx, p.uv[1] * sy])
        .collect()
}

/// Mean squared mask difference and mean IoU of reprojected human regions.
pub fn reproject_acc(
    estimated: &CameraTrajectory,
    truth: &CameraTrajectory,
    motion: &MotionSequence,
    k: &Intrinsics,
    raster: (usize, usize),
) -> (f64, f64) {
    let (w, h) = raster;
    let f = estimated.len().min(truth.len()).min(motion.len());
    if f == 0 {
        return (0.0, 1.0);
    }
    let sx = w as f64 / k.width_px;
    let sy = h as f64 / k.height_px;
    let mut sq = 0.0;
    let mut iou_sum = 0.0;
    let mut iou_frames = 0usize;
    for i in 0..f {
        let fr = &motion.frames[i];
        let a = rasterize_hull(&raster_points(fr, &estimated.poses[i], k, sx, sy), w, h);
        let b = rasterize_hull(&raster_points(fr, &truth.poses[i], k, sx, sy), w, h);
        let mut inter = 0usize;
        let mut uni = 0usize;
        let mut diff = 0usize;
        for (x, y) in a.iter().zip(&b) {
            inter += (*x && *y) as usize;
            uni += (*x || *y) as usize;
            diff += (x != y) as usize;
        }
        sq += diff as f64 / (w * h) as f64;
        if uni > 0 {
            iou_sum += inter as f64 / uni as f64;
            iou_frames += 1;
        }
    }
    let iou = if iou_frames == 0 {
        1.0
    } else {
        iou_sum / iou_frames as f64
    };
    (sq / f as f64, iou)
}

// ---------------------------------------------------------------------------
// Shot classification

pub fn classify_distance(mean_distance: f64) -> DistanceClass {
    if mean_distance < CLOSE_UP_MAX_M {
        DistanceClass::CloseUp
    } else if mean_distance > LONG_MIN_M {
        DistanceClass::Long
    } else {
        DistanceClass::Medium
    }
}

/// Elevation from the mean camera height above the pelvis; eye-level when
/// neither the high nor the low rule fires.
pub fn classify_elevation(mean_height: f64) -> Elevation {
    if mean_height > HIGH_ANGLE_MIN_M {
        Elevation::HighAngle
    } else if mean_height < -LOW_ANGLE_MIN_M {
        Elevation::LowAngle
    } else {
        Elevation::EyeLevel
    }
}

pub fn classify_facing(mean_azimuth: f64) -> Facing {
    let a = wrap_angle(mean_azimuth).abs().to_degrees();
    if a < FRONT_MAX_DEG {
        Facing::Front
    } else if a > BACK_MIN_DEG {
        Facing::Back
    } else {
        Facing::Side
    }
}

/// Movement type by priority rules over the whole clip.
pub fn classify_movement(camera: &CameraTrajectory, motion: &MotionSequence) -> Movement {
    let poses = &camera.poses;
    let f = poses.len().min(motion.len());
    if f < 2 {
        return Movement::Static;
    }
    let p0 = poses[0];
    let max_disp = poses[..f]
        .iter()
        .map(|p| (p.position - p0.position).norm())
        .fold(0.0, f64::max);
    let max_rot = poses[..f]
        .iter()
        .map(|p| geodesic_angle(&p0.rotation, &p.rotation))
        .fold(0.0, f64::max)
        .to_degrees();
    if max_disp < STATIC_MAX_DISP_M && max_rot < STATIC_MAX_ROT_DEG {
        return Movement::Static;
    }

    let offsets: Vec<Vector3<f64>> = (0..f)
        .map(|i| poses[i].position - motion.frames[i][PELVIS])
        .collect();
    let dist: Vec<f64> = offsets.iter().map(|o| o.norm()).collect();
    let mut unwrapped = Vec::with_capacity(f);
    let mut acc = heading(&offsets[0]);
    unwrapped.push(acc);
    for w in offsets.windows(2) {
        acc += wrap_angle(heading(&w[1]) - heading(&w[0]));
        unwrapped.push(acc);
    }
    let sweep = (unwrapped.iter().cloned().fold(f64::MIN, f64::max)
        - unwrapped.iter().cloned().fold(f64::MAX, f64::min))
    .to_degrees();
    let d_mean = dist.iter().sum::<f64>() / f as f64;
    let d_range = dist.iter().cloned().fold(f64::MIN, f64::max)
        - dist.iter().cloned().fold(f64::MAX, f64::min);
    if sweep > ORBIT_MIN_SWEEP_DEG && d_range / d_mean < ORBIT_MAX_DIST_VARIATION {
        return Movement::Orbit;
    }

    let ratio = dist[0] / dist[f - 1];
    if ratio > PUSH_IN_MIN_RATIO {
        return Movement::PushIn;
    }
    if ratio < PULL_OUT_MAX_RATIO {
        return Movement::PullOut;
    }

    let path: f64 = poses[..f]
        .windows(2)
        .map(|w| (w[1].position - w[0].position).norm())
        .sum();
    let (y_lo, y_hi) = poses[..f].iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.position.y), hi.max(p.position.y))
    });
    if path > 1e-9 && (y_hi - y_lo) > CRANE_MIN_VERTICAL_FRACTION * path {
        return Movement::Crane;
    }

    if max_rot > ROTATION_MIN_SWEEP_DEG && max_disp < ROTATION_MAX_DISP_M {
        return Movement::Rotation;
    }
    Movement::Tracking
}

/// Geometric shot classification: viewpoint, distance class and movement.
pub fn classify_shot(camera: &CameraTrajectory, motion: &MotionSequence) -> ShotLabels {
    let rel = subject_relative(camera, motion);
    let n = rel.len().max(1) as f64;
    let mean_d = rel.iter().map(|r| r.0).sum::<f64>() / n;
    let az: Vec<f64> = rel.iter().map(|r| r.1).collect();
    let mean_h = camera
        .poses
        .iter()
        .zip(&motion.frames)
        .map(|(p, fr)| p.position.y - fr[PELVIS].y)
        .sum::<f64>()
        / n;
    ShotLabels {
        viewpoint: Viewpoint {
            facing: classify_facing(circular_mean(&az)),
            elevation: classify_elevation(mean_h),
        },
        distance: classify_distance(mean_d),
        movement: classify_movement(camera, motion),
    }
}

// ---------------------------------------------------------------------------
// Style diversity

/// Entropy of a histogram normalized by the log of its category count.
pub fn normalized_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    (h / (counts.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Mean normalized entropy over attribute histograms.
pub fn csd_from_histograms(hists: &[&[usize]]) -> f64 {
    if hists.is_empty() {
        return 0.0;
    }
    hists.iter().map(|h| normalized_entropy(h)).sum::<f64>() / hists.len() as f64
}

/// Categorical style diversity over viewpoint (9 classes), distance (3) and
/// movement (7).
pub fn csd_entropy(labels: &[ShotLabels]) -> f64 {
    let mut vp = [0usize; Viewpoint::COUNT];
    let mut dist = [0usize; 3];
    let mut mv = [0usize; 7];
    for l in labels {
        vp[l.viewpoint.index()] += 1;
        dist[l.distance.index()] += 1;
        mv[l.movement.index()] += 1;
    }
    csd_from_histograms(&[&vp, &dist, &mv])
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hmr: f64,
    pub jerk_t: f64,
    pub jerk_r: f64,
    pub dist_t: f64,
    pub dist_r: f64,
    pub reproj_mse: f64,
    pub reproj_iou: f64,
    /// Style diversity of the set the report belongs to.
    pub csd: f64,
    pub labels: ShotLabels,
}

/// All per-trajectory metrics. `csd` is that of the singleton set (zero).
pub fn evaluate(
    predicted: &CameraTrajectory,
    truth: &CameraTrajectory,
    motion: &MotionSequence,
    k: &Intrinsics,
) -> Result<EvalReport, MetricsError> {
    let (jerk_t, jerk_r) = jerk(predicted)?;
    let (dist_t, dist_r) = shot_diversity(predicted, motion);
    let (reproj_mse, reproj_iou) = reproject_acc(predicted, truth, motion, k, (RASTER_W, RASTER_H));
    let labels = classify_shot(predicted, motion);
    Ok(EvalReport {
        hmr: hmr(predicted, motion, k),
        jerk_t,
        jerk_r,
        dist_t,
        dist_r,
        reproj_mse,
        reproj_iou,
        csd: csd_entropy(&[labels]),
        labels,
    })
}

/// Evaluates a set and fills every report's `csd` with the set-level value.
pub fn evaluate_set<'a>(
    items: impl IntoIterator<
        Item = (
            &'a CameraTrajectory,
            &'a CameraTrajectory,
            &'a MotionSequence,
        ),
    >,
    k: &Intrinsics,
) -> Result<Vec<EvalReport>, (usize, MetricsError)> {
    let mut reports = items
        .into_iter()
        .enumerate()
        .map(|(i, (p, t, m))| evaluate(p, t, m, k).map_err(|e| (i, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<ShotLabels> = reports.iter().map(|r| r.labels).collect();
    let csd = csd_entropy(&labels);
    for r in &mut reports {
        r.csd = csd;
    }
    Ok(reports)
}

/// Column-wise means of a set of reports (labels dropped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub hmr: f64,
    pub jerk_t: f64,
    pub jerk_r: f64,
    pub dist_t: f64,
    pub dist_r: f64,
    pub reproj_mse: f64,
    pub reproj_iou: f64,
    pub csd: f64,
}

pub fn summarize(reports: &[EvalReport]) -> EvalSummary {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    EvalSummary {
        count: reports.len(),
        hmr: mean(|r| r.hmr),
        jerk_t: mean(|r| r.jerk_t),
        jerk_r: mean(|r| r.jerk_r),
        dist_t: mean(|r| r.dist_t),
        dist_r: mean(|r| r.dist_r),
        reproj_mse: mean(|r| r.reproj_mse),
        reproj_iou: mean(|r| r.reproj_iou),
        csd: csd_entropy(&reports.iter().map(|r| r.labels).collect::<Vec<_>>()),
    }
}

/// Fixed-column table with one row per report plus a mean row.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:>6} {:>8} {:>10} {:>10} {:>8} {:>8} {:>10} {:>8} {:>6}  {}\n",
        "idx", "HMR", "Jerk_t", "Jerk_r", "Dist_t", "Dist_r", "MSE", "IoU", "CSD", "shot"
    );
    let row = |idx: &str,
               hmr: f64,
               jt: f64,
               jr: f64,
               dt: f64,
               dr: f64,
               mse: f64,
               iou: f64,
               csd: f64,
               shot: &str| {
        format!(
            "{idx:>6} {hmr:>8.4} {jt:>10.5} {jr:>10.5} {dt:>8.4} {dr:>8.4} {mse:>10.6} {iou:>8.4} {csd:>6.3}  {shot}\n"
        )
    };
    for (i, r) in reports.iter().enumerate() {
        let shot = format!(
            "{}/{}/{}",
            r.labels.viewpoint, r.labels.distance, r.labels.movement
        );
        out += &row(
            &i.to_string(),
            r.hmr,
            r.jerk_t,
            r.jerk_r,
            r.dist_t,
            r.dist_r,
            r.reproj_mse,
            r.reproj_iou,
            r.csd,
            &shot,
        );
    }
    let s = summarize(reports);
    out += &row(
        "mean",
        s.hmr,
        s.jerk_t,
        s.jerk_r,
        s.dist_t,
        s.dist_r,
        s.reproj_mse,
        s.reproj_iou,
        s.csd,
        "",
    );
    out
}
