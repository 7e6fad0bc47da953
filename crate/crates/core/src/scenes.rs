//! Procedural raycast scenes with exact depth, used as the training data
//! source and as ground truth for every geometric check.
//!
//! Shading is Lambertian under a directional light fixed in the world, so a
//! surface point has the same color from every viewpoint.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    compose, invert, relative_target_to_source, reproject_pixel, CameraIntrinsics, DepthMap, RigidTransform,
};
use crate::image::Image;

const HIT_EPS: f64 = 1e-9;
const AMBIENT: f32 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Plane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Checker,
    Stripes,
    Gradient,
}

/// Solid texture evaluated in object coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub kind: TextureKind,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    /// cell / stripe width in object units, or gradient extent
    pub scale: f64,
}

impl Texture {
    pub fn albedo(&self, p: &Vector3<f64>) -> [f32; 3] {
        let s = self.scale;
        match self.kind {
            TextureKind::Checker => {
                let parity = (p.x / s).floor() + (p.y / s).floor() + (p.z / s).floor();
                if parity.rem_euclid(2.0) < 0.5 {
                    self.color_a
                } else {
                    self.color_b
                }
            }
            TextureKind::Stripes => {
                if (p.y / s).floor().rem_euclid(2.0) < 0.5 {
                    self.color_a
                } else {
                    self.color_b
                }
            }
            TextureKind::Gradient => {
                let t = ((p.y / s + 1.0) * 0.5).clamp(0.0, 1.0) as f32;
                std::array::from_fn(|c| self.color_a[c] * (1.0 - t) + self.color_b[c] * t)
            }
        }
    }
}

/// A textured primitive. `pose` maps object coordinates to world.
/// Sizes: sphere radius in `size.x`; box half-extents; plane half-extents in
/// x and y with the normal along object z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub kind: ShapeKind,
    pub pose: RigidTransform,
    pub size: Vector3<f64>,
    pub texture: Texture,
}

struct Hit {
    t: f64,
    normal_local: Vector3<f64>,
    local: Vector3<f64>,
}

impl Primitive {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let inv_r = self.pose.r.transpose();
        let o = inv_r * (origin - self.pose.t);
        let d = inv_r * dir;
        match self.kind {
            ShapeKind::Sphere => {
                let r = self.size.x;
                let a = d.dot(&d);
                let b = o.dot(&d);
                let c = o.dot(&o) - r * r;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > HIT_EPS)?;
                let p = o + d * t;
                Some(Hit {
                    t,
                    normal_local: p / r,
                    local: p,
                })
            }
            ShapeKind::Box => {
                let h = self.size;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vector3::zeros(), Vector3::zeros());
                for axis in 0..3 {
                    if d[axis].abs() < 1e-15 {
                        if o[axis].abs() > h[axis] {
                            return None;
                        }
                        continue;
                    }
                    let mut ta = (-h[axis] - o[axis]) / d[axis];
                    let mut tb = (h[axis] - o[axis]) / d[axis];
                    let mut na = Vector3::zeros();
                    na[axis] = -1.0;
                    let mut nb = -na;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        n0 = na;
                    }
                    if tb < t1 {
                        t1 = tb;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, n) = if t0 > HIT_EPS {
                    (t0, n0)
                } else if t1 > HIT_EPS {
                    (t1, n1)
                } else {
                    return None;
                };
                // exact face coordinate so the texture parity cannot flip on rounding
                let mut p = o + d * t;
                let axis = n.iamax();
                p[axis] = n[axis] * h[axis];
                Some(Hit {
                    t,
                    normal_local: n,
                    local: p,
                })
            }
            ShapeKind::Plane => {
                if d.z.abs() < 1e-15 {
                    return None;
                }
                let t = -o.z / d.z;
                if t <= HIT_EPS {
                    return None;
                }
                let mut p = o + d * t;
                p.z = 0.0;
                if p.x.abs() > self.size.x || p.y.abs() > self.size.y {
                    return None;
                }
                // two-sided: face the incoming ray
                let n = if d.z > 0.0 { -Vector3::z() } else { Vector3::z() };
                Some(Hit {
                    t,
                    normal_local: n,
                    local: p,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub background: [f32; 3],
}

/// Render-time constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub d_min: f32,
    pub d_max: f32,
    /// color samples per pixel along each axis (box filter)
    pub supersample: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            d_min: 0.5,
            d_max: 6.0,
            supersample: 3,
        }
    }
}

/// Rendered view with exact depth. `pose` is camera-to-world.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub scene_seed: u64,
    pub image: Image,
    pub depth: DepthMap,
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

fn light_dir() -> Vector3<f64> {
    Vector3::new(-0.4, 0.8, 0.45).normalize()
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    let kind = match rng.random_range(0..3) {
        0 => TextureKind::Checker,
        1 => TextureKind::Stripes,
        _ => TextureKind::Gradient,
    };
    Texture {
        kind,
        color_a: random_color(rng, 0.35, 1.0),
        color_b: random_color(rng, 0.05, 0.6),
        scale: match kind {
            TextureKind::Gradient => rng.random_range(0.4..0.9),
            _ => rng.random_range(0.3..0.55),
        },
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-3 { Vector3::y() } else { axis };
    RigidTransform::axis_angle(axis, rng.random_range(0.0..std::f64::consts::PI))
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidArgument("scene has no primitives".into()));
        }
        for p in &self.primitives {
            let dims = match p.kind {
                ShapeKind::Sphere => 1,
                ShapeKind::Plane => 2,
                ShapeKind::Box => 3,
            };
            if !(0..dims).all(|i| p.size[i] > 0.0) || !(p.texture.scale > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "non-positive primitive size {:?}",
                    p.size
                )));
            }
            p.pose.validate()?;
        }
        Ok(())
    }

    /// A few textured primitives clustered around the origin, optionally on a
    /// ground panel, against a near-black background. The main object fills
    /// most of an orbit view at radius 3; everything stays within radius 1.5
    /// of the origin.
    pub fn random_objects(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b1e_c75);
        let mut primitives = Vec::new();
        let count = rng.random_range(1..=3);
        for i in 0..count {
            let scale = if i == 0 { 1.0 } else { 0.5 };
            let center = if i == 0 {
                Vector3::new(
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                )
            } else {
                Vector3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.6..0.6),
                )
            };
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Sphere
            } else {
                ShapeKind::Box
            };
            let size = match kind {
                ShapeKind::Sphere => Vector3::repeat(scale * rng.random_range(0.8..1.1)),
                _ => Vector3::new(
                    scale * rng.random_range(0.5..0.8),
                    scale * rng.random_range(0.5..0.8),
                    scale * rng.random_range(0.5..0.8),
                ),
            };
            let mut pose = random_rotation(&mut rng);
            pose.t = center;
            primitives.push(Primitive {
                kind,
                pose,
                size,
                texture: random_texture(&mut rng),
            });
        }
        if rng.random_bool(0.5) {
            // ground panel, normal pointing up
            let mut pose = RigidTransform::rot_x(-std::f64::consts::FRAC_PI_2);
            pose.t = Vector3::new(0.0, -0.9, 0.0);
            primitives.push(Primitive {
                kind: ShapeKind::Plane,
                pose,
                size: Vector3::new(1.2, 1.2, 0.0),
                texture: random_texture(&mut rng),
            });
        }
        SceneSpec {
            seed,
            primitives,
            background: random_color(&mut rng, 0.0, 0.04),
        }
    }

    /// Textured corridor along world +z: floor, two walls and an end wall.
    pub fn corridor(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_441d_0e);
        let panel = |pose: RigidTransform, hx: f64, hy: f64, rng: &mut ChaCha8Rng| Primitive {
            kind: ShapeKind::Plane,
            pose,
            size: Vector3::new(hx, hy, 0.0),
            texture: Texture {
                kind: if rng.random_bool(0.5) {
                    TextureKind::Checker
                } else {
                    TextureKind::Stripes
                },
                color_a: random_color(rng, 0.4, 1.0),
                color_b: random_color(rng, 0.05, 0.4),
                scale: rng.random_range(0.25..0.45),
            },
        };
        let at = |r: RigidTransform, t: [f64; 3]| {
            let mut p = r;
            p.t = Vector3::from(t);
            p
        };
        let half = std::f64::consts::FRAC_PI_2;
        let primitives = vec![
            panel(at(RigidTransform::rot_x(-half), [0.0, -1.0, 3.0]), 1.5, 3.5, &mut rng),
            panel(at(RigidTransform::rot_y(half), [-1.5, 0.0, 3.0]), 3.5, 1.0, &mut rng),
            panel(at(RigidTransform::rot_y(-half), [1.5, 0.0, 3.0]), 3.5, 1.0, &mut rng),
            panel(at(RigidTransform::identity(), [0.0, 0.0, 5.5]), 1.5, 1.0, &mut rng),
        ];
        SceneSpec {
            seed,
            primitives,
            background: random_color(&mut rng, 0.5, 0.8),
        }
    }

    /// Nearest hit along `origin + t * dir`, returning `(t, color)`.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, [f32; 3])> {
        let mut best: Option<(f64, &Primitive, Hit)> = None;
        for prim in &self.primitives {
            if let Some(hit) = prim.intersect(origin, dir) {
                if best.as_ref().is_none_or(|(t, _, _)| hit.t < *t) {
                    best = Some((hit.t, prim, hit));
                }
            }
        }
        let (t, prim, hit) = best?;
        let n = prim.pose.r * hit.normal_local;
        let lambert = n.dot(&light_dir()).max(0.0) as f32;
        let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
        let albedo = prim.texture.albedo(&hit.local);
        Some((t, albedo.map(|a| a * shade)))
    }

    /// Point-samples the ray through continuous pixel `(x, y)`: returns the
    /// camera z-depth (clamped to background at `d_max`) and color.
    pub fn shade_pixel(
        &self,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
        settings: &RenderSettings,
        x: f64,
        y: f64,
    ) -> (f32, [f32; 3]) {
        // unit-z camera ray: the hit parameter is the camera z-depth
        let dir = pose.r * k.ray(x, y);
        match self.trace(&pose.t, &dir) {
            Some((t, c)) if t < settings.d_max as f64 => ((t as f32).max(settings.d_min), c),
            _ => (settings.d_max, self.background),
        }
    }
}

/// Renders color (box-filtered over `supersample^2` rays) and center-ray
/// depth for a camera-to-world `pose`.
pub fn raycast(spec: &SceneSpec, pose: &RigidTransform, k: &CameraIntrinsics, settings: &RenderSettings) -> ViewSample {
    let (w, h) = (k.width, k.height);
    let ss = settings.supersample.max(1);
    let inv = 1.0 / (ss * ss) as f32;
    let mut color = vec![0.0f32; w * h * 3];
    let mut depth = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (d, c) = spec.shade_pixel(pose, k, settings, x as f64, y as f64);
            depth[y * w + x] = d;
            let px = &mut color[(y * w + x) * 3..(y * w + x + 1) * 3];
            if ss == 1 {
                px.copy_from_slice(&c);
                continue;
            }
            for sy in 0..ss {
                for sx in 0..ss {
                    let ox = (sx as f64 + 0.5) / ss as f64 - 0.5;
                    let oy = (sy as f64 + 0.5) / ss as f64 - 0.5;
                    let (_, c) = spec.shade_pixel(pose, k, settings, x as f64 + ox, y as f64 + oy);
                    for ch in 0..3 {
                        px[ch] += c[ch] * inv;
                    }
                }
            }
        }
    }
    ViewSample {
        scene_seed: spec.seed,
        image: Image::new(w, h, 3, color).expect("sized"),
        depth: DepthMap::new(w, h, depth).expect("sized"),
        pose: *pose,
        intrinsics: *k,
    }
}

/// View grid and pairing rule for orbit data.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitProtocol {
    pub azimuths_deg: Vec<f64>,
    pub elevations_deg: Vec<f64>,
    /// largest absolute azimuth difference (wrapped) between paired views
    pub max_separation_deg: f64,
    pub radius: f64,
    pub image_size: usize,
    pub render: RenderSettings,
}

impl Default for OrbitProtocol {
    fn default() -> Self {
        Self::grid(20.0, 10.0, 30.0, 40.0, 32)
    }
}

impl OrbitProtocol {
    /// Azimuths `0, step, ..` below 360 and elevations `0..=el_max` in
    /// `el_step` increments.
    pub fn grid(az_step: f64, el_step: f64, el_max: f64, max_sep: f64, image_size: usize) -> Self {
        let n_az = (360.0 / az_step).round() as usize;
        let n_el = (el_max / el_step).round() as usize + 1;
        OrbitProtocol {
            azimuths_deg: (0..n_az).map(|i| i as f64 * az_step).collect(),
            elevations_deg: (0..n_el).map(|i| i as f64 * el_step).collect(),
            max_separation_deg: max_sep,
            radius: 3.0,
            image_size,
            render: RenderSettings::default(),
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::square(self.image_size)
    }

    /// Camera-to-world poses of the grid, azimuth-major.
    pub fn views(&self) -> Vec<(f64, f64, RigidTransform)> {
        let mut out = Vec::new();
        for &az in &self.azimuths_deg {
            for &el in &self.elevations_deg {
                out.push((
                    az,
                    el,
                    RigidTransform::orbit(az.to_radians(), el.to_radians(), self.radius),
                ));
            }
        }
        out
    }

    /// Index pairs `(source, target)` whose wrapped azimuth difference is
    /// within the separation limit.
    pub fn pair_indices(&self) -> Vec<(usize, usize)> {
        let views = self.views();
        let mut out = Vec::new();
        for (i, (az_s, _, _)) in views.iter().enumerate() {
            for (j, (az_t, _, _)) in views.iter().enumerate() {
                if wrapped_deg(az_t - az_s).abs() <= self.max_separation_deg + 1e-9 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Angle difference wrapped to `(-180, 180]`.
pub fn wrapped_deg(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Source-to-target transform of two camera-to-world poses.
pub fn relative_source_to_target(source_pose: &RigidTransform, target_pose: &RigidTransform) -> RigidTransform {
    compose(&invert(target_pose), source_pose)
}

/// A training or evaluation pair. `t_st` maps source-camera coordinates to
/// target-camera coordinates.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub source: ViewSample,
    pub target: ViewSample,
    pub t_st: RigidTransform,
}

/// All orbit pairs of one scene; each grid view is rendered once.
pub fn orbit_pairs(spec: &SceneSpec, protocol: &OrbitProtocol) -> impl Iterator<Item = ViewPair> {
    let k = protocol.intrinsics();
    let samples: Vec<ViewSample> = protocol
        .views()
        .iter()
        .map(|(_, _, pose)| raycast(spec, pose, &k, &protocol.render))
        .collect();
    protocol.pair_indices().into_iter().map(move |(i, j)| ViewPair {
        t_st: relative_source_to_target(&samples[i].pose, &samples[j].pose),
        source: samples[i].clone(),
        target: samples[j].clone(),
    })
}

/// Renders one random orbit pair of a scene.
pub fn sample_orbit_pair(spec: &SceneSpec, protocol: &OrbitProtocol, rng: &mut impl Rng) -> ViewPair {
    let views = protocol.views();
    let pairs = protocol.pair_indices();
    let (i, j) = pairs[rng.random_range(0..pairs.len())];
    let k = protocol.intrinsics();
    let source = raycast(spec, &views[i].2, &k, &protocol.render);
    let target = if i == j {
        source.clone()
    } else {
        raycast(spec, &views[j].2, &k, &protocol.render)
    };
    ViewPair {
        t_st: relative_source_to_target(&source.pose, &target.pose),
        source,
        target,
    }
}

/// Pairs `(view 0, view k)` for `k = 1..=count` with the camera advancing
/// `step` scene units per view along its optical axis.
pub fn forward_track_pairs(
    spec: &SceneSpec,
    start: &RigidTransform,
    step: f64,
    count: usize,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<Vec<ViewPair>> {
    if !(step >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "forward step must be non-negative, got {step}"
        )));
    }
    let source = raycast(spec, start, k, settings);
    Ok((1..=count)
        .map(|i| {
            let advance = RigidTransform::from_translation(Vector3::new(0.0, 0.0, step * i as f64));
            let pose = compose(start, &advance);
            let target = raycast(spec, &pose, k, settings);
            ViewPair {
                t_st: relative_source_to_target(&source.pose, &target.pose),
                source: source.clone(),
                target,
            }
        })
        .collect())
}

/// Default camera for [`SceneSpec::corridor`]: at the corridor entrance
/// looking down +z.
pub fn corridor_start() -> RigidTransform {
    RigidTransform::look_at(Vector3::zeros(), Vector3::z(), Vector3::y())
}

fn bilinear_taps(w: usize, h: usize, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

/// Pixels of the target view whose surface point is also seen, unoccluded,
/// by the source view.
///
/// The target point must reproject into the source frame at a camera depth
/// within 1% of the bilinearly interpolated source depth, and within 5% of
/// every contributing source sample. Background is a far
/// plane at `d_max`, so background pixels pass wherever they land on
/// background in the source.
pub fn visibility_mask(source: &ViewSample, target: &ViewSample) -> Result<Vec<bool>> {
    if source.scene_seed != target.scene_seed {
        return Err(Error::InvalidArgument(format!(
            "views come from different scenes ({} vs {})",
            source.scene_seed, target.scene_seed
        )));
    }
    let k = &target.intrinsics;
    if source.intrinsics != *k {
        return Err(Error::InvalidArgument("views have different intrinsics".into()));
    }
    let (w, h) = (k.width, k.height);
    let t_ts = relative_target_to_source(&source.pose, &target.pose);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (c, z, inside) = reproject_pixel(k, &t_ts, x, y, target.depth.get(x, y) as f64);
            if !inside {
                continue;
            }
            let Some(taps) = bilinear_taps(w, h, c[0] as f64, c[1] as f64) else {
                continue;
            };
            let sd: f64 = taps.iter().map(|&(i, wgt)| wgt * source.depth.values[i] as f64).sum();
            // interpolation across a depth edge can land near z by accident
            let taps_agree = taps
                .iter()
                .all(|&(i, wgt)| wgt < 1e-3 || (source.depth.values[i] as f64 - z).abs() <= 0.05 * z);
            mask[y * w + x] = taps_agree && (sd - z).abs() <= 0.01 * z;
        }
    }
    Ok(mask)
}
