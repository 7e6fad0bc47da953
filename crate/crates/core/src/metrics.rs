//! Image, depth, flow and pose error measures.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{compose, invert, unproject, CameraIntrinsics, DepthMap, FlowField, RigidTransform};
use crate::image::Image;
use crate::warp::sample_plane;

fn check_same(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        })
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_image(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b, "l1_image")?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// Mean absolute difference over pixels where `mask` is set.
pub fn l1_image_masked(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    check_same(a, b, "l1_image_masked")?;
    if mask.len() != a.width * a.height {
        return Err(Error::ShapeMismatch {
            op: "l1_image_masked",
            lhs: vec![a.height, a.width],
            rhs: vec![mask.len()],
        });
    }
    let c = a.channels;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for i in p * c..(p + 1) * c {
            sum += (a.data[i] - b.data[i]).abs() as f64;
        }
        n += c;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian-weighted mean over every fully contained window.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1),
/// averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let (w, h, c) = (a.width, a.height, a.channels);
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..w * h).map(|p| a.data[p * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..w * h).map(|p| b.data[p * c + ch] as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let aa = filter_valid(&prod(&pa, &pa), w, h, &k);
        let bb = filter_valid(&prod(&pb, &pb), w, h, &k);
        let ab = filter_valid(&prod(&pa, &pb), w, h, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Fraction of entries with `max(p / t, t / p) < delta`.
pub fn acc_threshold(pred: &[f32], truth: &[f32], delta: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "acc_threshold",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("acc_threshold of no values".into()));
    }
    let mut hits = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if !(p > 0.0 && t > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "acc_threshold needs positive values, got {p} and {t}"
            )));
        }
        let (p, t) = (p as f64, t as f64);
        if (p / t).max(t / p) < delta {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    RigidTransform::new(*r, Vector3::zeros()).map(|_| ())
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_error(r_est: &Matrix3<f64>, r_true: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r_est)?;
    check_rotation(r_true)?;
    let c = ((r_est * r_true.transpose()).trace() - 1.0) / 2.0;
    Ok(c.clamp(-1.0, 1.0).acos())
}

/// Angle between two translation directions, radians.
pub fn translation_error(t_est: &Vector3<f64>, t_true: &Vector3<f64>) -> Result<f64> {
    let (na, nb) = (t_est.norm(), t_true.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "translation error is undefined for a zero vector".into(),
        ));
    }
    Ok((t_est.dot(t_true) / (na * nb)).clamp(-1.0, 1.0).acos())
}

/// Least-squares rigid motion taking `from[i]` to `to[i]`.
pub fn fit_rigid(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Result<RigidTransform> {
    if from.len() != to.len() || from.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rigid fit needs at least 3 matched points, got {} and {}",
            from.len(),
            to.len()
        )));
    }
    let n = from.len() as f64;
    let ca = from.iter().sum::<Vector3<f64>>() / n;
    let cb = to.iter().sum::<Vector3<f64>>() / n;
    let mut hm = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        hm += (a - ca) * (b - cb).transpose();
    }
    let svd = hm.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform { r, t: cb - r * ca })
}

/// Gauss-Newton refinement of `init` minimizing the reprojection error of
/// `points` onto `pixels` under `k`. Stops when a step no longer lowers the
/// cost.
pub fn refine_reprojection(
    init: &RigidTransform,
    points: &[Vector3<f64>],
    pixels: &[[f64; 2]],
    k: &CameraIntrinsics,
) -> RigidTransform {
    let cost = |t: &RigidTransform| -> f64 {
        points
            .iter()
            .zip(pixels)
            .map(|(p, px)| {
                let q = t.apply(p);
                if q.z <= 1e-9 {
                    return 1e6;
                }
                let (u, v) = (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
                (u - px[0]).powi(2) + (v - px[1]).powi(2)
            })
            .sum()
    };
    let mut best = *init;
    let mut best_cost = cost(&best);
    for _ in 0..20 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, px) in points.iter().zip(pixels) {
            let q = best.apply(p);
            if q.z <= 1e-9 {
                continue;
            }
            let iz = 1.0 / q.z;
            let ru = k.fx * q.x * iz + k.cx - px[0];
            let rv = k.fy * q.y * iz + k.cy - px[1];
            let du = Vector3::new(k.fx * iz, 0.0, -k.fx * q.x * iz * iz);
            let dv = Vector3::new(0.0, k.fy * iz, -k.fy * q.y * iz * iz);
            // left perturbation: dq/dw = -[q]x, dq/dv = I
            let row = |d: Vector3<f64>| {
                Vector6::new(
                    q.y * d.z - q.z * d.y,
                    q.z * d.x - q.x * d.z,
                    q.x * d.y - q.y * d.x,
                    d.x,
                    d.y,
                    d.z,
                )
            };
            let (ju, jv) = (row(du), row(dv));
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let Some(step) = jtj.lu().solve(&-jtr) else { break };
        let w = Vector3::new(step[0], step[1], step[2]);
        let angle = w.norm();
        let rot = if angle > 0.0 {
            RigidTransform::axis_angle(w / angle, angle)
        } else {
            RigidTransform::identity()
        };
        let delta = RigidTransform {
            r: rot.r,
            t: Vector3::new(step[3], step[4], step[5]),
        };
        let next = compose(&delta, &best);
        let c = cost(&next);
        if !(c < best_cost) {
            break;
        }
        best = next;
        best_cost = c;
    }
    best
}

/// Translation and rotation error of the motion realized by a flow field.
///
/// Target pixels selected by `mask` (and valid in `flow`) are unprojected
/// with `target_depth`; their flow coordinates are unprojected with the
/// bilinearly sampled `source_depth`. The rigid fit of target to source
/// points seeds a reprojection refinement against the flow coordinates, so
/// interpolated source depth does not bias the result. The fit is inverted
/// and compared with the requested source-to-target transform. Returns
/// `(TE, RE)` in radians.
pub fn pose_error_direct(
    flow: &FlowField,
    target_depth: &DepthMap,
    source_depth: &DepthMap,
    k: &CameraIntrinsics,
    mask: &[bool],
    requested_t_st: &RigidTransform,
) -> Result<(f64, f64)> {
    let (w, h) = (k.width, k.height);
    for (dw, dh) in [
        (flow.width, flow.height),
        (target_depth.width, target_depth.height),
        (source_depth.width, source_depth.height),
    ] {
        if (dw, dh) != (w, h) {
            return Err(Error::ShapeMismatch {
                op: "pose_error_direct",
                lhs: vec![h, w],
                rhs: vec![dh, dw],
            });
        }
    }
    if mask.len() != w * h {
        return Err(Error::ShapeMismatch {
            op: "pose_error_direct",
            lhs: vec![h, w],
            rhs: vec![mask.len()],
        });
    }
    let (mut pts_t, mut pts_s, mut pix) = (Vec::new(), Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !(mask[i] && flow.valid[i]) {
                continue;
            }
            let [u, v] = flow.coords[i];
            let ds = sample_plane(&source_depth.values, w, h, u, v) as f64;
            if ds <= 0.0 {
                continue;
            }
            pts_t.push(unproject(k, x as f64, y as f64, target_depth.get(x, y) as f64)?);
            pts_s.push(unproject(k, u as f64, v as f64, ds)?);
            pix.push([u as f64, v as f64]);
        }
    }
    let t_ts = refine_reprojection(&fit_rigid(&pts_t, &pts_s)?, &pts_t, &pix, k);
    let t_st = invert(&t_ts);
    Ok((
        translation_error(&t_st.t, &requested_t_st.t)?,
        rotation_error(&t_st.r, &requested_t_st.r)?,
    ))
}

/// Mean endpoint component error over masked pixels, divided by the image
/// width.
pub fn flow_l1(pred: &FlowField, truth: &FlowField, mask: &[bool]) -> Result<f64> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in selected(pred, truth, mask)? {
        let (p, t) = (pred.coords[i], truth.coords[i]);
        sum += ((p[0] - t[0]).abs() + (p[1] - t[1]).abs()) as f64;
        n += 2;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    Ok(sum / n as f64 / truth.width as f64)
}

/// Thresholded accuracy on 1-based correspondence coordinates, per
/// component. Predicted coordinates left of or above the frame count as
/// misses.
pub fn flow_acc(pred: &FlowField, truth: &FlowField, mask: &[bool], delta: f64) -> Result<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    for i in selected(pred, truth, mask)? {
        for c in 0..2 {
            let p = pred.coords[i][c] as f64 + 1.0;
            let t = truth.coords[i][c] as f64 + 1.0;
            n += 1;
            if p > 0.0 && t > 0.0 && (p / t).max(t / p) < delta {
                hits += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    Ok(hits as f64 / n as f64)
}

fn selected(pred: &FlowField, truth: &FlowField, mask: &[bool]) -> Result<Vec<usize>> {
    if pred.coords.len() != truth.coords.len() || mask.len() != truth.coords.len() {
        return Err(Error::ShapeMismatch {
            op: "flow metric",
            lhs: vec![pred.coords.len(), truth.coords.len()],
            rhs: vec![mask.len()],
        });
    }
    Ok((0..mask.len()).filter(|&i| mask[i] && truth.valid[i]).collect())
}
