//! Pinhole cameras, rigid transforms and the depth-to-correspondence
//! projection used to pull source pixels into a target view.
//!
//! Conventions: camera x points right, y down, z forward. Pixel `(x, y)`
//! addresses column `x` and row `y`, with pixel centers on integer
//! coordinates. Poses are stored camera-to-world; the transform relating
//! two cameras is `T_{t->s} = world_to_cam(source) * cam_to_world(target)`.

pub use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const ROTATION_TOL: f64 = 1e-6;

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square camera with `fx = fy = size` and the principal point at the
    /// image center (about 53 degrees field of view).
    pub fn square(size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        CameraIntrinsics {
            fx: size as f64,
            fy: size as f64,
            cx: c,
            cy: c,
            width: size,
            height: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid intrinsics {self:?}: need fx, fy > 0 and principal point inside the image"
            )))
        }
    }

    /// Same field of view at a different resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    /// Ray direction through pixel `(x, y)` with unit z component.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

/// Rigid motion `p -> r * p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Builds a transform after checking that `r` is a proper rotation.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let tr = RigidTransform { r, t };
        tr.validate()?;
        Ok(tr)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform {
            r: Matrix3::identity(),
            t,
        }
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        RigidTransform { r, t: Vector3::zeros() }
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation about a unit axis (Rodrigues).
    pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::from_rotation(*r.matrix())
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`, with
    /// `up` as the world up direction (image y points against it).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        RigidTransform {
            r: Matrix3::from_columns(&[right, down, forward]),
            t: eye,
        }
    }

    /// Camera on a sphere of `radius` around the origin looking at it.
    /// Azimuth rotates about world +y starting from +z, elevation lifts the
    /// camera towards +y. Angles in radians.
    pub fn orbit(azimuth: f64, elevation: f64, radius: f64) -> Self {
        let (sa, ca) = azimuth.sin_cos();
        let (se, ce) = elevation.sin_cos();
        let eye = Vector3::new(radius * ce * sa, radius * se, radius * ce * ca);
        Self::look_at(eye, Vector3::zeros(), Vector3::y())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.r.iter().chain(self.t.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        let dev = (self.r.transpose() * self.r - Matrix3::identity()).abs().max();
        if dev > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!(
                "r^T r deviates from identity by {dev:e}"
            )));
        }
        let det = self.r.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// Row-major `[R|t]` as 12 numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for row in 0..3 {
            for col in 0..3 {
                out[row * 4 + col] = self.r[(row, col)];
            }
            out[row * 4 + 3] = self.t[row];
        }
        out
    }

    /// Inverse of [`RigidTransform::to_row_major`]; validates the rotation.
    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        Self::new(r, t)
    }

    /// Largest absolute entry difference in `[R|t]`.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.r - other.r).abs().max().max((self.t - other.t).abs().max())
    }
}

/// `a * b`: applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        r: a.r * b.r,
        t: a.r * b.t + a.t,
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.r.transpose();
    RigidTransform { r: rt, t: -(rt * t.t) }
}

/// Transform taking target-camera coordinates to source-camera coordinates,
/// from camera-to-world poses.
pub fn relative_target_to_source(source_pose: &RigidTransform, target_pose: &RigidTransform) -> RigidTransform {
    compose(&invert(source_pose), target_pose)
}

/// Back-projects a pixel at the given z-depth into camera coordinates.
pub fn unproject(k: &CameraIntrinsics, x: f64, y: f64, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(k.ray(x, y) * depth)
}

/// Perspective projection. The camera-frame depth is always returned; when it
/// is not positive the pixel coordinates are meaningless.
#[inline]
pub fn project(k: &CameraIntrinsics, p: &Vector3<f64>) -> (f64, f64, f64) {
    let z = p.z;
    (k.fx * p.x / z + k.cx, k.fy * p.y / z + k.cy, z)
}

/// Dense z-depth map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch {
                op: "depth_map",
                lhs: vec![height, width],
                rhs: vec![values.len()],
            });
        }
        Ok(DepthMap { width, height, values })
    }

    pub fn filled(width: usize, height: usize, depth: f32) -> Self {
        DepthMap {
            width,
            height,
            values: vec![depth; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn check_range(&self, d_min: f32, d_max: f32) -> Result<()> {
        match self.values.iter().find(|&&v| !(v >= d_min && v <= d_max)) {
            None => Ok(()),
            Some(v) => Err(Error::InvalidArgument(format!("depth {v} outside [{d_min}, {d_max}]"))),
        }
    }
}

/// Backward correspondences: for every target pixel, a continuous source
/// pixel coordinate plus a validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[f32; 2]>,
    pub valid: Vec<bool>,
}

/// Coordinate written for pixels whose reprojection lies behind the source
/// camera; far enough outside the frame that bilinear sampling returns zero.
pub const BEHIND_CAMERA: [f32; 2] = [-2.0, -2.0];

impl FlowField {
    pub fn identity(width: usize, height: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| [x as f32, y as f32]))
            .collect();
        FlowField {
            width,
            height,
            coords,
            valid: vec![true; width * height],
        }
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }
}

/// Reprojects one target pixel with the given depth into the source camera.
/// Returns the source pixel coordinate, the source-camera z and validity.
#[inline]
pub(crate) fn reproject_pixel(
    k: &CameraIntrinsics,
    t_ts: &RigidTransform,
    x: usize,
    y: usize,
    depth: f64,
) -> ([f32; 2], f64, bool) {
    let p = t_ts.apply(&(k.ray(x as f64, y as f64) * depth));
    let (u, v, z) = project(k, &p);
    if z <= 0.0 {
        return (BEHIND_CAMERA, z, false);
    }
    let inside = u >= 0.0 && u <= (k.width - 1) as f64 && v >= 0.0 && v <= (k.height - 1) as f64;
    ([u as f32, v as f32], z, inside)
}

/// Converts a target-view depth map into backward flow towards the source
/// view. `t_ts` maps target-camera coordinates to source-camera coordinates.
pub fn depth_to_flow(d: &DepthMap, k: &CameraIntrinsics, t_ts: &RigidTransform) -> Result<FlowField> {
    if d.width != k.width || d.height != k.height {
        return Err(Error::ShapeMismatch {
            op: "depth_to_flow",
            lhs: vec![d.height, d.width],
            rhs: vec![k.height, k.width],
        });
    }
    let n = d.width * d.height;
    let mut coords = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for y in 0..d.height {
        for x in 0..d.width {
            let (c, _, ok) = reproject_pixel(k, t_ts, x, y, d.get(x, y) as f64);
            coords.push(c);
            valid.push(ok);
        }
    }
    Ok(FlowField {
        width: d.width,
        height: d.height,
        coords,
        valid,
    })
}
