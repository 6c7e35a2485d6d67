//! Orthographic tri-view plots and skeleton overlays as SVG.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::{project_point, CameraTrajectory, Intrinsics};
use crate::motion::{forward_direction, MotionSequence, JOINT_PARENTS, NUM_JOINTS, PELVIS};

pub const PANEL_PX: f64 = 320.0;
pub const PADDING: f64 = 0.1;
pub const CAMERA_COLOR: &str = "#1f77b4";
pub const SUBJECT_COLOR: &str = "#ff7f0e";
pub const START_COLOR: &str = "#2ca02c";
pub const END_COLOR: &str = "#d62728";
/// Arrow length as a fraction of the panel.
const ARROW_FRAC: f64 = 0.08;
const STATIC_EPS_M: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame {frame} out of range for {frames} frames")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("camera has {camera} frames, motion has {motion}")]
    Mismatch { camera: usize, motion: usize },
}

/// One orthographic panel: world axes shown horizontally and vertically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Panel {
    pub id: &'static str,
    pub horizontal: usize,
    pub vertical: usize,
}

pub const PANELS: [Panel; 3] = [
    Panel {
        id: "top",
        horizontal: 2,
        vertical: 0,
    },
    Panel {
        id: "front",
        horizontal: 0,
        vertical: 1,
    },
    Panel {
        id: "side",
        horizontal: 2,
        vertical: 1,
    },
];

const AXIS_NAMES: [&str; 3] = ["X", "Y", "Z"];

/// Uniform world-to-pixel mapping of one panel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelTransform {
    pub panel: Panel,
    pub px_per_m: f64,
    pub center: [f64; 2],
}

impl PanelTransform {
    pub fn fit(panel: Panel, points: &[Vector3<f64>]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for (a, axis) in [panel.horizontal, panel.vertical].into_iter().enumerate() {
                lo[a] = lo[a].min(p[axis]);
                hi[a] = hi[a].max(p[axis]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-3);
        Self {
            panel,
            px_per_m: PANEL_PX / (span * (1.0 + 2.0 * PADDING)),
            center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
        }
    }

    /// Pixel coordinates; vertical world axis points up on screen.
    pub fn to_px(&self, p: &Vector3<f64>) -> [f64; 2] {
        let h = p[self.panel.horizontal] - self.center[0];
        let v = p[self.panel.vertical] - self.center[1];
        [
            0.5 * PANEL_PX + h * self.px_per_m,
            0.5 * PANEL_PX - v * self.px_per_m,
        ]
    }

    /// Screen direction of a world vector, not normalized.
    pub fn dir_px(&self, d: &Vector3<f64>) -> [f64; 2] {
        [d[self.panel.horizontal], -d[self.panel.vertical]]
    }
}

fn fmt(v: f64) -> String {
    // Avoid "-0.000" so equal geometry gives equal bytes.
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn points_attr(pts: &[[f64; 2]]) -> String {
    pts.iter()
        .map(|p| format!("{},{}", fmt(p[0]), fmt(p[1])))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Largest 1-2-5 length that fits in a quarter of the panel.
fn scale_bar_m(px_per_m: f64) -> f64 {
    let max_m = 0.25 * PANEL_PX / px_per_m;
    let mut best = 1e-3;
    for exp in -3..=4 {
        for m in [1.0, 2.0, 5.0] {
            let v = m * 10f64.powi(exp);
            if v <= max_m {
                best = v;
            }
        }
    }
    best
}

fn arrow(out: &mut String, from: [f64; 2], dir: [f64; 2], class: &str, color: &str, marker: &str) {
    let n = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    let len = ARROW_FRAC * PANEL_PX;
    let (dx, dy) = if n > 1e-12 {
        (dir[0] / n * len, dir[1] / n * len)
    } else {
        (0.0, 0.0)
    };
    let _ = writeln!(
        out,
        r#"    <line class="arrow {class}" x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2" marker-end="url(#{marker})"/>"#,
        fmt(from[0]),
        fmt(from[1]),
        fmt(from[0] + dx),
        fmt(from[1] + dy)
    );
}

/// Tri-view SVG of a camera path and the subject's pelvis path.
pub fn render_triview(
    camera: &CameraTrajectory,
    motion: &MotionSequence,
) -> Result<String, VizError> {
    let f = camera.len();
    if f != motion.len() || f == 0 {
        return Err(VizError::Mismatch {
            camera: f,
            motion: motion.len(),
        });
    }
    let cam: Vec<Vector3<f64>> = camera.poses.iter().map(|p| p.position).collect();
    let subj: Vec<Vector3<f64>> = motion.frames.iter().map(|fr| fr[PELVIS]).collect();
    let cam_dir = [camera.poses[0].forward(), camera.poses[f - 1].forward()];
    let subj_dir =
        [0, f - 1].map(|i| forward_direction(&motion.frames[i]).unwrap_or_else(|_| Vector3::z()));
    let is_static = cam.iter().all(|p| (p - cam[0]).norm() < STATIC_EPS_M);
    let all: Vec<Vector3<f64>> = cam.iter().chain(&subj).copied().collect();

    let width = PANEL_PX * PANELS.len() as f64;
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        fmt(width),
        fmt(PANEL_PX + 24.0),
        fmt(width),
        fmt(PANEL_PX + 24.0)
    );
    let _ = writeln!(out, "  <defs>");
    for (id, color) in [("head-start", START_COLOR), ("head-end", END_COLOR)] {
        let _ = writeln!(
            out,
            r#"    <marker id="{id}" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="{color}"/></marker>"#
        );
    }
    let _ = writeln!(out, "  </defs>");
    for (i, panel) in PANELS.iter().enumerate() {
        let t = PanelTransform::fit(*panel, &all);
        let _ = writeln!(
            out,
            r#"  <g id="{}" transform="translate({},0)" data-px-per-m="{:.6}" data-axes="{}-{}">"#,
            panel.id,
            fmt(i as f64 * PANEL_PX),
            t.px_per_m,
            AXIS_NAMES[panel.horizontal],
            AXIS_NAMES[panel.vertical]
        );
        let _ = writeln!(
            out,
            r##"    <rect x="0" y="0" width="{0}" height="{0}" fill="none" stroke="#999999"/>"##,
            fmt(PANEL_PX)
        );
        let cpx: Vec<[f64; 2]> = cam.iter().map(|p| t.to_px(p)).collect();
        let spx: Vec<[f64; 2]> = subj.iter().map(|p| t.to_px(p)).collect();
        let _ = writeln!(
            out,
            r#"    <polyline class="camera" points="{}" fill="none" stroke="{CAMERA_COLOR}" stroke-width="2"/>"#,
            points_attr(&cpx)
        );
        if is_static {
            let _ = writeln!(
                out,
                r#"    <circle class="camera-marker" cx="{}" cy="{}" r="4" fill="{CAMERA_COLOR}"/>"#,
                fmt(cpx[0][0]),
                fmt(cpx[0][1])
            );
        }
        let _ = writeln!(
            out,
            r#"    <polyline class="subject" points="{}" fill="none" stroke="{SUBJECT_COLOR}" stroke-width="2"/>"#,
            points_attr(&spx)
        );
        arrow(
            &mut out,
            cpx[0],
            t.dir_px(&cam_dir[0]),
            "start camera",
            START_COLOR,
            "head-start",
        );
        arrow(
            &mut out,
            spx[0],
            t.dir_px(&subj_dir[0]),
            "start subject",
            START_COLOR,
            "head-start",
        );
        arrow(
            &mut out,
            cpx[f - 1],
            t.dir_px(&cam_dir[1]),
            "end camera",
            END_COLOR,
            "head-end",
        );
        arrow(
            &mut out,
            spx[f - 1],
            t.dir_px(&subj_dir[1]),
            "end subject",
            END_COLOR,
            "head-end",
        );
        let bar = scale_bar_m(t.px_per_m);
        let y = PANEL_PX - 10.0;
        let _ = writeln!(
            out,
            r##"    <line class="scale-bar" x1="10.000" y1="{}" x2="{}" y2="{}" stroke="#000000" stroke-width="2"/>"##,
            fmt(y),
            fmt(10.0 + bar * t.px_per_m),
            fmt(y)
        );
        let _ = writeln!(
            out,
            r#"    <text x="10.000" y="{}" font-size="10">{} m</text>"#,
            fmt(y - 4.0),
            bar
        );
        let _ = writeln!(
            out,
            r#"    <text x="{}" y="{}" font-size="12" text-anchor="middle">{} ({}-{})</text>"#,
            fmt(0.5 * PANEL_PX),
            fmt(PANEL_PX + 16.0),
            panel.id,
            AXIS_NAMES[panel.horizontal],
            AXIS_NAMES[panel.vertical]
        );
        let _ = writeln!(out, "  </g>");
    }
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

/// Projected skeleton of one frame in image coordinates. Joints outside the
/// image or behind the camera are left out along with their bones.
pub fn render_overlay(
    camera: &CameraTrajectory,
    motion: &MotionSequence,
    k: &Intrinsics,
    frame: usize,
) -> Result<String, VizError> {
    if camera.len() != motion.len() {
        return Err(VizError::Mismatch {
            camera: camera.len(),
            motion: motion.len(),
        });
    }
    if frame >= camera.len() {
        return Err(VizError::FrameOutOfRange {
            frame,
            frames: camera.len(),
        });
    }
    let pose = &camera.poses[frame];
    let proj: Vec<Option<[f64; 2]>> = motion.frames[frame]
        .iter()
        .map(|p| {
            let pr = project_point(p, pose, k);
            pr.visible.then_some(pr.uv)
        })
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{0}" height="{1}" viewBox="0 0 {0} {1}">"#,
        fmt(k.width_px),
        fmt(k.height_px)
    );
    let _ = writeln!(
        out,
        r##"  <rect x="0" y="0" width="{}" height="{}" fill="#202020"/>"##,
        fmt(k.width_px),
        fmt(k.height_px)
    );
    for (j, parent) in JOINT_PARENTS.iter().enumerate() {
        if let (Some(p), Some(a), Some(b)) = (parent, proj[j], parent.and_then(|p| proj[p])) {
            let _ = writeln!(
                out,
                r#"  <line class="bone" data-joints="{p}-{j}" x1="{}" y1="{}" x2="{}" y2="{}" stroke="{SUBJECT_COLOR}" stroke-width="2"/>"#,
                fmt(b[0]),
                fmt(b[1]),
                fmt(a[0]),
                fmt(a[1])
            );
        }
    }
    for (j, uv) in proj.iter().enumerate().take(NUM_JOINTS) {
        if let Some(uv) = uv {
            let _ = writeln!(
                out,
                r##"  <circle class="joint" data-joint="{j}" cx="{}" cy="{}" r="3" fill="#ffffff"/>"##,
                fmt(uv[0]),
                fmt(uv[1])
            );
        }
    }
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

pub fn write_svg(path: &Path, doc: &str) -> Result<(), VizError> {
    std::fs::write(path, doc)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::CameraPose;
    use crate::motion::{LEFT_SHOULDER, RIGHT_SHOULDER};
    use crate::synth::dataset_sample;

    fn attr(tag: &str, name: &str) -> String {
        let key = format!(" {name}=\"");
        let start = tag.find(&key).unwrap() + key.len();
        tag[start..start + tag[start..].find('"').unwrap()].to_string()
    }

    fn group<'a>(doc: &'a str, id: &str) -> &'a str {
        let start = doc.find(&format!("<g id=\"{id}\"")).unwrap();
        &doc[start..start + doc[start..].find("</g>").unwrap()]
    }

    fn parse_points(s: &str) -> Vec<[f64; 2]> {
        s.split(' ')
            .map(|p| {
                let (a, b) = p.split_once(',').unwrap();
                [a.parse().unwrap(), b.parse().unwrap()]
            })
            .collect()
    }

    fn static_subject(f: usize) -> MotionSequence {
        let s = dataset_sample(4, 0, 16).unwrap();
        MotionSequence::new(vec![s.motion.frames[0]; f], 8.0).unwrap()
    }

    #[test]
    fn structure_and_determinism() {
        let s = dataset_sample(4, 1, 16).unwrap();
        let a = render_triview(&s.camera, &s.motion).unwrap();
        let b = render_triview(&s.camera, &s.motion).unwrap();
        assert_eq!(a, b);
        for id in ["top", "front", "side"] {
            let g = group(&a, id);
            assert_eq!(g.matches("<polyline class=\"camera\"").count(), 1);
            assert_eq!(g.matches("<polyline class=\"subject\"").count(), 1);
            assert_eq!(g.matches("class=\"arrow start").count(), 2);
            assert_eq!(g.matches("class=\"arrow end").count(), 2);
            assert!(g.contains(START_COLOR) && g.contains(END_COLOR));
            assert!(g.contains("scale-bar"));
        }
    }

    #[test]
    fn static_camera_gets_marker() {
        let m = static_subject(8);
        let pose = CameraPose::look_at(Vector3::new(0.0, 1.5, 3.0), m.frames[0][PELVIS]);
        let cam = CameraTrajectory::new(vec![pose; 8], 8.0);
        let doc = render_triview(&cam, &m).unwrap();
        assert_eq!(doc.matches("camera-marker").count(), 3);
        assert_eq!(doc.matches("class=\"arrow").count(), 12);
    }

    #[test]
    fn orbit_arc_matches_radius() {
        let m = static_subject(64);
        let c = m.frames[0][PELVIS];
        let r = 3.0;
        let poses = (0..64)
            .map(|i| {
                let a = i as f64 / 64.0 * std::f64::consts::TAU;
                CameraPose::look_at(c + Vector3::new(r * a.sin(), 0.3, r * a.cos()), c)
            })
            .collect();
        let cam = CameraTrajectory::new(poses, 8.0);
        let doc = render_triview(&cam, &m).unwrap();
        let g = group(&doc, "top");
        let scale: f64 = attr(g, "data-px-per-m").parse().unwrap();
        let line = g.lines().find(|l| l.contains("class=\"camera\"")).unwrap();
        let pts = parse_points(&attr(line, "points"));
        let w = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max)
            - pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let h = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max)
            - pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        assert!(
            (w / scale / 2.0 - r).abs() / r < 0.01,
            "{}",
            w / scale / 2.0
        );
        assert!((h / scale / 2.0 - r).abs() / r < 0.01);
    }

    #[test]
    fn panels_are_axis_true() {
        let pts = [Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 0.0)];
        for panel in PANELS {
            let t = PanelTransform::fit(panel, &pts);
            let a = t.to_px(&pts[0]);
            let b = t.to_px(&pts[1]);
            let dh = pts[0][panel.horizontal] - pts[1][panel.horizontal];
            let dv = pts[0][panel.vertical] - pts[1][panel.vertical];
            assert!(((a[0] - b[0]) - dh * t.px_per_m).abs() < 1e-9);
            assert!(((a[1] - b[1]) + dv * t.px_per_m).abs() < 1e-9);
            // Moving along the hidden axis changes nothing.
            let hidden = 3 - panel.horizontal - panel.vertical;
            let mut q = pts[0];
            q[hidden] += 5.0;
            assert_eq!(t.to_px(&q), a);
            for p in [a, b] {
                assert!(p[0] >= 0.0 && p[0] <= PANEL_PX && p[1] >= 0.0 && p[1] <= PANEL_PX);
            }
        }
        assert_eq!(
            PANELS.map(|p| (AXIS_NAMES[p.horizontal], AXIS_NAMES[p.vertical])),
            [("Z", "X"), ("X", "Y"), ("Z", "Y")]
        );
    }

    #[test]
    fn overlay_shows_all_joints_and_mirrors_from_behind() {
        let m = static_subject(4);
        let c = m.frames[0][PELVIS];
        let fwd = forward_direction(&m.frames[0]).unwrap();
        let k = Intrinsics::default();
        let shoulder_x = |doc: &str, j: usize| -> f64 {
            let line = doc
                .lines()
                .find(|l| l.contains(&format!("data-joint=\"{j}\"")))
                .unwrap();
            attr(line, "cx").parse().unwrap()
        };
        let front = CameraTrajectory::new(vec![CameraPose::look_at(c + fwd * 4.0, c); 4], 8.0);
        let back = CameraTrajectory::new(vec![CameraPose::look_at(c - fwd * 4.0, c); 4], 8.0);
        let a = render_overlay(&front, &m, &k, 1).unwrap();
        assert_eq!(a.matches("class=\"joint\"").count(), NUM_JOINTS);
        assert_eq!(a.matches("class=\"bone\"").count(), NUM_JOINTS - 1);
        let b = render_overlay(&back, &m, &k, 0).unwrap();
        let sa = shoulder_x(&a, LEFT_SHOULDER) - shoulder_x(&a, RIGHT_SHOULDER);
        let sb = shoulder_x(&b, LEFT_SHOULDER) - shoulder_x(&b, RIGHT_SHOULDER);
        assert!(sa * sb < 0.0, "{sa} {sb}");
        assert!(matches!(
            render_overlay(&front, &m, &k, 4),
            Err(VizError::FrameOutOfRange {
                frame: 4,
                frames: 4
            })
        ));
    }

    #[test]
    fn scale_bar_is_one_two_five() {
        assert_eq!(scale_bar_m(PANEL_PX / 10.0), 2.0);
        assert_eq!(scale_bar_m(PANEL_PX / 1.0), 0.2);
        assert_eq!(scale_bar_m(PANEL_PX / 30.0), 5.0);
    }
}
