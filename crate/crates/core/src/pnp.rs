//! Absolute camera pose from 2D-3D joint correspondences with known
//! intrinsics: linear DLT followed by Gauss-Newton on pixel reprojection
//! error. Used as the analytic reference for the learned denoiser.

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use thiserror::Error;

use crate::geom::{
    interpolate_pose, rotation_exp, CameraPose, CameraTrajectory, Intrinsics, MIN_DEPTH,
};
use crate::synth::SceneSample;

pub const MIN_CORRESPONDENCES: usize = 6;
/// RMS distance from the best-fit plane below which points count as coplanar.
pub const COPLANAR_EPS: f64 = 1e-6;
/// Minimum ratio of the second-smallest to the largest design-matrix singular
/// value; the smallest one spans the solution and is ~0 for exact data.
pub const CONDITION_EPS: f64 = 1e-12;
/// Diagonal damping tried when the normal equations are singular.
pub const FALLBACK_DAMPING: f64 = 1e-6;
/// Minimum depth, in units of the point-cloud RMS radius, enforced on the
/// linear estimate.
const DLT_DEPTH_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PnpError {
    #[error("need at least {MIN_CORRESPONDENCES} correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("3D points are coplanar")]
    Coplanar,
    #[error("DLT design matrix is ill-conditioned")]
    IllConditioned,
    #[error("singular normal equations")]
    SingularNormalEquations,
    #[error("only {solved} of {total} frames have enough visible joints")]
    TooFewVisible { solved: usize, total: usize },
    #[error("mismatched correspondence counts: {0} 3D vs {1} 2D")]
    Mismatch(usize, usize),
}

#[derive(Debug, Clone)]
pub struct Correspondences {
    pub points3d: Vec<Vector3<f64>>,
    pub points2d: Vec<[f64; 2]>,
    pub k: Intrinsics,
}

impl Correspondences {
    pub fn validate(&self) -> Result<(), PnpError> {
        if self.points3d.len() != self.points2d.len() {
            return Err(PnpError::Mismatch(self.points3d.len(), self.points2d.len()));
        }
        if self.points3d.len() < MIN_CORRESPONDENCES {
            return Err(PnpError::TooFewPoints(self.points3d.len()));
        }
        let n = self.points3d.len() as f64;
        let c = self.points3d.iter().sum::<Vector3<f64>>() / n;
        let centered = DMatrix::from_fn(self.points3d.len(), 3, |i, j| self.points3d[i][j] - c[j]);
        let sv = centered.singular_values();
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min / n.sqrt() < COPLANAR_EPS {
            return Err(PnpError::Coplanar);
        }
        Ok(())
    }

    fn normalized_2d(&self) -> Vec<[f64; 2]> {
        self.points2d
            .iter()
            .map(|p| {
                [
                    (p[0] - self.k.cx) / self.k.focal_px,
                    (p[1] - self.k.cy) / self.k.focal_px,
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DltSolution {
    pub pose: CameraPose,
    /// Mean pixel reprojection error of the returned pose.
    pub mean_reproj_error: f64,
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Linear pose estimate. The world points are centred and scaled before
/// building the design matrix; the calibrated projection is then split into
/// rotation and translation with the scale fixed by `det = 1`.
pub fn solve_frame_dlt(c: &Correspondences) -> Result<DltSolution, PnpError> {
    c.validate()?;
    let n = c.points3d.len();
    let centroid = c.points3d.iter().sum::<Vector3<f64>>() / n as f64;
    let scale = (c
        .points3d
        .iter()
        .map(|p| (p - centroid).norm_squared())
        .sum::<f64>()
        / n as f64)
        .sqrt()
        .max(1e-300);
    let xs = c.normalized_2d();

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (p, x)) in c.points3d.iter().zip(&xs).enumerate() {
        let q = (p - centroid) / scale;
        let h = [q.x, q.y, q.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -x[0] * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -x[1] * h[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(PnpError::IllConditioned)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smax = svd.singular_values[order[order.len() - 1]];
    let second = svd.singular_values[order[1]];
    if !(smax > 0.0) || second / smax < CONDITION_EPS {
        return Err(PnpError::IllConditioned);
    }
    let p = v_t.row(order[0]);
    let m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let b = Vector3::new(p[3], p[7], p[11]);
    let det = m.determinant();
    if det.abs() < 1e-300 {
        return Err(PnpError::IllConditioned);
    }
    // m = λ·s·R, b = λ·(R·c + t). With noise the sign of det(m) can disagree
    // with the depth sign, so both scale signs are tried. The candidate with
    // the most points in front of the camera wins, ties broken by cost.
    let mag = det.abs().cbrt();
    let (r_wc, mut t_wc, _) = [det.signum() * mag, -det.signum() * mag]
        .into_iter()
        .map(|lambda_s| {
            let r_wc = nearest_rotation(&(m / lambda_s));
            let lambda = lambda_s / scale;
            let t_wc = b / lambda - r_wc * centroid;
            let front = c
                .points3d
                .iter()
                .filter(|p| (r_wc * *p + t_wc).z > MIN_DEPTH)
                .count();
            let cost = reprojection_cost(&pose_from_world_to_camera(&r_wc, &t_wc), c);
            (r_wc, t_wc, (front, cost))
        })
        .min_by(|a, b| b.2 .0.cmp(&a.2 .0).then(a.2 .1.total_cmp(&b.2 .1)))
        .expect("two candidates");
    // Very noisy input can leave a few points behind the camera; back the
    // camera off along its optical axis so refinement starts from a finite cost.
    let min_z = c
        .points3d
        .iter()
        .map(|p| (r_wc * p + t_wc).z)
        .fold(f64::INFINITY, f64::min);
    if min_z <= DLT_DEPTH_MARGIN * scale {
        t_wc.z += DLT_DEPTH_MARGIN * scale - min_z;
    }
    let pose = pose_from_world_to_camera(&r_wc, &t_wc);
    let cost = reprojection_cost(&pose, c);
    if !cost.is_finite() {
        return Err(PnpError::IllConditioned);
    }
    Ok(DltSolution {
        pose,
        mean_reproj_error: (cost / n as f64).sqrt(),
    })
}

fn pose_from_world_to_camera(r_wc: &Matrix3<f64>, t_wc: &Vector3<f64>) -> CameraPose {
    let r_cw = r_wc.transpose();
    CameraPose::new(-(r_cw * t_wc), Rotation3::from_matrix_unchecked(r_cw))
}

/// Sum of squared pixel residuals; infinite if any point is behind the camera.
pub fn reprojection_cost(pose: &CameraPose, c: &Correspondences) -> f64 {
    let mut cost = 0.0;
    for (p, uv) in c.points3d.iter().zip(&c.points2d) {
        let pc = pose.world_to_camera(p);
        match c.k.project_camera_point(&pc) {
            Some(q) => cost += (q[0] - uv[0]).powi(2) + (q[1] - uv[1]).powi(2),
            None => return f64::INFINITY,
        }
    }
    cost
}

#[derive(Debug, Clone, Copy)]
pub struct Refinement {
    pub pose: CameraPose,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

/// Gauss-Newton over a world-to-camera translation and a left-multiplied
/// axis-angle rotation increment. Steps that raise the cost are halved; the
/// returned cost never exceeds the initial one.
pub fn refine_gauss_newton(
    initial: &CameraPose,
    c: &Correspondences,
    max_iters: usize,
    tol: f64,
) -> Result<Refinement, PnpError> {
    let mut r_wc = *initial.rotation.inverse().matrix();
    let mut t_wc = -(r_wc * initial.position);
    let mut pose = *initial;
    let initial_cost = reprojection_cost(&pose, c);
    let mut cost = initial_cost;
    let f = c.k.focal_px;
    let mut iterations = 0;

    while iterations < max_iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (p, uv) in c.points3d.iter().zip(&c.points2d) {
            let rp = r_wc * p;
            let pc = rp + t_wc;
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let iz = 1.0 / pc.z;
            let res = [
                c.k.cx + f * pc.x * iz - uv[0],
                c.k.cy + f * pc.y * iz - uv[1],
            ];
            // d(u,v)/d(pc)
            let dp = [
                [f * iz, 0.0, -f * pc.x * iz * iz],
                [0.0, f * iz, -f * pc.y * iz * iz],
            ];
            // d(pc)/d(ω) = -[rp]×, d(pc)/d(t) = I
            let skew = Matrix3::new(0.0, -rp.z, rp.y, rp.z, 0.0, -rp.x, -rp.y, rp.x, 0.0);
            for row in 0..2 {
                let d = Vector3::new(dp[row][0], dp[row][1], dp[row][2]);
                let dw = -(skew.transpose() * d);
                let j = Vector6::new(dw.x, dw.y, dw.z, d.x, d.y, d.z);
                h += j * j.transpose();
                g += j * res[row];
            }
        }
        let step = match h.cholesky() {
            Some(ch) => ch.solve(&(-g)),
            None => (h + Matrix6::identity() * FALLBACK_DAMPING)
                .cholesky()
                .ok_or(PnpError::SingularNormalEquations)?
                .solve(&(-g)),
        };
        iterations += 1;
        if step.norm() < tol {
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let dw = Vector3::new(step[0], step[1], step[2]) * alpha;
            let dt = Vector3::new(step[3], step[4], step[5]) * alpha;
            let r_new = *rotation_exp(&dw).matrix() * r_wc;
            let t_new = t_wc + dt;
            let cand = pose_from_world_to_camera(&r_new, &t_new);
            let cand_cost = reprojection_cost(&cand, c);
            if cand_cost <= cost {
                r_wc = r_new;
                t_wc = t_new;
                pose = cand;
                cost = cand_cost;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(Refinement {
        pose,
        iterations,
        initial_cost,
        final_cost: cost,
    })
}

pub const REFINE_MAX_ITERS: usize = 20;
pub const REFINE_TOL: f64 = 1e-12;

/// DLT followed by refinement for one set of correspondences.
pub fn solve_frame(c: &Correspondences) -> Result<CameraPose, PnpError> {
    let dlt = solve_frame_dlt(c)?;
    Ok(refine_gauss_newton(&dlt.pose, c, REFINE_MAX_ITERS, REFINE_TOL)?.pose)
}

#[derive(Debug, Clone)]
pub struct OracleTrajectory {
    pub trajectory: CameraTrajectory,
    /// Frames filled by interpolation instead of being solved.
    pub interpolated: Vec<bool>,
}

/// Visible correspondences of one frame of a sample.
pub fn frame_correspondences(
    sample: &SceneSample,
    frame: usize,
    k: &Intrinsics,
) -> Correspondences {
    let mut points3d = Vec::new();
    let mut points2d = Vec::new();
    for (j, &v) in sample.vis[frame].iter().enumerate() {
        if v {
            points3d.push(sample.motion.frames[frame][j]);
            points2d.push(sample.obs2d[frame][j]);
        }
    }
    Correspondences {
        points3d,
        points2d,
        k: *k,
    }
}

/// Solves every frame from its visible joints and fills unsolvable frames by
/// interpolating between the nearest solved neighbours.
pub fn solve_trajectory(
    sample: &SceneSample,
    k: &Intrinsics,
) -> Result<OracleTrajectory, PnpError> {
    let f = sample.frames();
    let solved: Vec<Option<CameraPose>> = (0..f)
        .map(|i| solve_frame(&frame_correspondences(sample, i, k)).ok())
        .collect();
    let count = solved.iter().filter(|s| s.is_some()).count();
    if count * 2 < f || count == 0 {
        return Err(PnpError::TooFewVisible {
            solved: count,
            total: f,
        });
    }
    let mut poses = Vec::with_capacity(f);
    let mut interpolated = Vec::with_capacity(f);
    for i in 0..f {
        if let Some(p) = solved[i] {
            poses.push(p);
            interpolated.push(false);
            continue;
        }
        let prev = (0..i).rev().find_map(|j| solved[j].map(|p| (j, p)));
        let next = (i + 1..f).find_map(|j| solved[j].map(|p| (j, p)));
        let pose = match (prev, next) {
            (Some((a, pa)), Some((b, pb))) => {
                interpolate_pose(&pa, &pb, (i - a) as f64 / (b - a) as f64)
            }
            (Some((_, p)), None) | (None, Some((_, p))) => p,
            (None, None) => unreachable!("at least one frame is solved"),
        };
        poses.push(pose);
        interpolated.push(true);
    }
    Ok(OracleTrajectory {
        trajectory: CameraTrajectory::new(poses, sample.camera.fps),
        interpolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{geodesic_angle, project_points};
    use crate::synth::dataset_sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn corr_for(sample: &SceneSample, frame: usize) -> Correspondences {
        frame_correspondences(sample, frame, &Intrinsics::default())
    }

    #[test]
    fn dlt_recovers_noiseless_frame() {
        let s = dataset_sample(2, 4, 16).unwrap();
        for i in 0..16 {
            let sol = solve_frame_dlt(&corr_for(&s, i)).unwrap();
            let gt = s.camera.poses[i];
            assert!((sol.pose.position - gt.position).norm() < 1e-6);
            assert!(geodesic_angle(&sol.pose.rotation, &gt.rotation) < 1e-6);
            assert!(sol.mean_reproj_error < 1e-6);
        }
    }

    #[test]
    fn five_points_rejected() {
        let s = dataset_sample(2, 4, 16).unwrap();
        let mut c = corr_for(&s, 0);
        c.points3d.truncate(5);
        c.points2d.truncate(5);
        assert_eq!(solve_frame_dlt(&c).unwrap_err(), PnpError::TooFewPoints(5));
    }

    #[test]
    fn coplanar_rejected() {
        let k = Intrinsics::default();
        let pose = CameraPose::look_at(Vector3::new(0.5, 1.0, 4.0), Vector3::zeros());
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new((i % 4) as f64 * 0.2, (i / 4) as f64 * 0.3, 0.0))
            .collect();
        let uv = project_points(&pts, &pose, &k)
            .iter()
            .map(|p| p.uv)
            .collect();
        let c = Correspondences {
            points3d: pts,
            points2d: uv,
            k,
        };
        assert_eq!(solve_frame_dlt(&c).unwrap_err(), PnpError::Coplanar);
    }

    #[test]
    fn refine_fixed_point() {
        let s = dataset_sample(2, 8, 16).unwrap();
        let c = corr_for(&s, 3);
        let r = refine_gauss_newton(&s.camera.poses[3], &c, 20, 1e-12).unwrap();
        assert_eq!(r.pose, s.camera.poses[3]);
        assert_eq!(r.final_cost, r.initial_cost);
    }

    #[test]
    fn refine_converges_from_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for idx in 0..10 {
            let s = dataset_sample(3, idx, 16).unwrap();
            let c = corr_for(&s, 5);
            let gt = s.camera.poses[5];
            let axis = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            )
            .normalize();
            let dir = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            )
            .normalize();
            let init = CameraPose::new(
                gt.position + dir * 0.1,
                rotation_exp(&(axis * 5f64.to_radians())) * gt.rotation,
            );
            let r = refine_gauss_newton(&init, &c, 20, 1e-12).unwrap();
            assert!(r.iterations <= 20);
            assert!(r.final_cost <= r.initial_cost);
            assert!((r.pose.position - gt.position).norm() < 1e-8, "idx {idx}");
        }
    }

    #[test]
    fn refinement_beats_dlt_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 0.005 * 384.0).unwrap();
        let mut dlt_total = 0.0;
        let mut gn_total = 0.0;
        for idx in 0..20 {
            let s = dataset_sample(5, idx, 16).unwrap();
            let mut c = corr_for(&s, 0);
            for uv in &mut c.points2d {
                uv[0] += normal.sample(&mut rng);
                uv[1] += normal.sample(&mut rng);
            }
            let d = solve_frame_dlt(&c).unwrap();
            let r = refine_gauss_newton(&d.pose, &c, 20, 1e-12).unwrap();
            assert!(r.final_cost <= reprojection_cost(&d.pose, &c));
            dlt_total += reprojection_cost(&d.pose, &c);
            gn_total += r.final_cost;
        }
        assert!(gn_total < dlt_total, "{gn_total} {dlt_total}");
    }

    #[test]
    fn trajectory_round_trip_and_occlusion() {
        let k = Intrinsics::default();
        let s = dataset_sample(6, 2, 16).unwrap();
        let sol = solve_trajectory(&s, &k).unwrap();
        assert!(sol.interpolated.iter().all(|v| !v));
        for (a, b) in sol.trajectory.poses.iter().zip(&s.camera.poses) {
            assert!((a.position - b.position).norm() < 1e-6);
        }

        let mut occluded = s.clone();
        occluded.vis[7] = [false; crate::motion::NUM_JOINTS];
        let sol = solve_trajectory(&occluded, &k).unwrap();
        assert!(sol.interpolated[7]);
        let expected = interpolate_pose(&sol.trajectory.poses[6], &sol.trajectory.poses[8], 0.5);
        assert!((sol.trajectory.poses[7].position - expected.position).norm() < 1e-12);

        let mut blind = s.clone();
        for v in &mut blind.vis {
            *v = [false; crate::motion::NUM_JOINTS];
        }
        assert!(matches!(
            solve_trajectory(&blind, &k),
            Err(PnpError::TooFewVisible { .. })
        ));
    }

    #[test]
    fn error_grows_with_noise() {
        let levels = [0.0, 0.5, 1.0, 2.0, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mean_err = Vec::new();
        for &sigma in &levels {
            let mut total = 0.0;
            for trial in 0..50u64 {
                let s = dataset_sample(8, trial, 16).unwrap();
                let mut c = corr_for(&s, 0);
                if sigma > 0.0 {
                    let n = Normal::new(0.0, sigma).unwrap();
                    for uv in &mut c.points2d {
                        uv[0] += n.sample(&mut rng);
                        uv[1] += n.sample(&mut rng);
                    }
                }
                let p = solve_frame(&c).unwrap();
                total += (p.position - s.camera.poses[0].position).norm();
            }
            mean_err.push(total / 50.0);
        }
        for w in mean_err.windows(2) {
            assert!(w[1] >= w[0], "{mean_err:?}");
        }
    }
}
