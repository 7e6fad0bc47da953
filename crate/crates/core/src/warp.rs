//! Depth-guided warping: target depth -> backward flow -> bilinear pull of
//! source colors.
//!
//! Samples outside the source frame read zero. Flow coordinates that fall
//! outside the frame receive no gradient, while the source image still does.

use crate::autodiff::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{depth_to_flow, invert, reproject_pixel, CameraIntrinsics, DepthMap, FlowField, RigidTransform};
use crate::image::Image;
use crate::tae::{batch_images, bind_constants, forward_variant, Model, Params, Prediction, TaeConfig};

#[inline]
fn tap(plane: &[f32], w: usize, h: usize, x: i64, y: i64) -> f32 {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// Tent-kernel interpolation of one plane at `(x, y)` with zero padding.
/// Integer coordinates return the stored value bit-exactly.
#[inline]
pub fn sample_plane(plane: &[f32], w: usize, h: usize, x: f32, y: f32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    tap(plane, w, h, xi, yi) * (1.0 - fx) * (1.0 - fy)
        + tap(plane, w, h, xi + 1, yi) * fx * (1.0 - fy)
        + tap(plane, w, h, xi, yi + 1) * (1.0 - fx) * fy
        + tap(plane, w, h, xi + 1, yi + 1) * fx * fy
}

#[inline]
fn in_frame(w: usize, h: usize, x: f32, y: f32) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f32 && y <= (h - 1) as f32
}

struct DepthToFlow {
    /// d(x_s)/dD and d(y_s)/dD per pixel; zero behind the source camera
    dx: Vec<f32>,
    dy: Vec<f32>,
    plane: usize,
}

impl Op for DepthToFlow {
    fn name(&self) -> &'static str {
        "depth_to_flow"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let Some(gd) = grads[0].as_mut() else { return };
        let p = self.plane;
        for (i, acc) in gd.iter_mut().enumerate() {
            let (b, j) = (i / p, i % p);
            let base = b * 2 * p + j;
            *acc += g[base] * self.dx[i] + g[base + p] * self.dy[i];
        }
    }
}

/// Differentiable twin of [`depth_to_flow`]: depth `[B, 1, H, W]` and one
/// target-to-source transform per entry give coordinates `[B, 2, H, W]`
/// (x plane, then y plane) and the flat validity mask.
pub fn depth_to_flow_diff<'t>(
    depth: Var<'t>,
    k: &CameraIntrinsics,
    t_ts: &[RigidTransform],
) -> Result<(Var<'t>, Vec<bool>)> {
    let (out, op, valid) = {
        let d = depth.value();
        let s = d.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != k.height || s[3] != k.width || s[0] != t_ts.len() {
            return Err(Error::ShapeMismatch {
                op: "depth_to_flow",
                lhs: vec![t_ts.len(), 1, k.height, k.width],
                rhs: s.to_vec(),
            });
        }
        let (w, h) = (k.width, k.height);
        let plane = w * h;
        let mut coords = vec![0.0f32; s[0] * 2 * plane];
        let mut dx = vec![0.0f32; s[0] * plane];
        let mut dy = vec![0.0f32; s[0] * plane];
        let mut valid = vec![false; s[0] * plane];
        for (b, t) in t_ts.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let j = y * w + x;
                    let i = b * plane + j;
                    let depth = d.data()[i] as f64;
                    let (c, z, ok) = reproject_pixel(k, t, x, y, depth);
                    coords[b * 2 * plane + j] = c[0];
                    coords[b * 2 * plane + plane + j] = c[1];
                    valid[i] = ok;
                    if z > 0.0 {
                        // P = a D + t with a = R K^-1 [x, y, 1]
                        let a = t.r * k.ray(x as f64, y as f64);
                        let (tx, ty, tz) = (t.t.x, t.t.y, t.t.z);
                        let z2 = z * z;
                        dx[i] = (k.fx * (a.x * tz - tx * a.z) / z2) as f32;
                        dy[i] = (k.fy * (a.y * tz - ty * a.z) / z2) as f32;
                    }
                }
            }
        }
        (
            Tensor::new([s[0], 2, h, w], coords)?,
            DepthToFlow { dx, dy, plane },
            valid,
        )
    };
    Ok((depth.tape().record(Box::new(op), &[depth], out), valid))
}

struct BilinearSample {
    batch: usize,
    channels: usize,
    src: (usize, usize),
    out: (usize, usize),
}

impl Op for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (source, flow) = (inputs[0].data(), inputs[1].data());
        let (w, h) = self.src;
        let plane_in = w * h;
        let plane_out = self.out.0 * self.out.1;
        let (gs, gf) = grads.split_at_mut(1);
        let (mut gs, mut gf) = (gs[0].as_mut(), gf[0].as_mut());
        for b in 0..self.batch {
            for j in 0..plane_out {
                let fi = b * 2 * plane_out + j;
                let (x, y) = (flow[fi], flow[fi + plane_out]);
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let (xi, yi) = (x0 as i64, y0 as i64);
                let weights = [
                    (xi, yi, (1.0 - fx) * (1.0 - fy)),
                    (xi + 1, yi, fx * (1.0 - fy)),
                    (xi, yi + 1, (1.0 - fx) * fy),
                    (xi + 1, yi + 1, fx * fy),
                ];
                let flow_live = in_frame(w, h, x, y);
                let (mut gx, mut gy) = (0.0f32, 0.0f32);
                for c in 0..self.channels {
                    let go = g[(b * self.channels + c) * plane_out + j];
                    if go == 0.0 {
                        continue;
                    }
                    let base = (b * self.channels + c) * plane_in;
                    if let Some(gs) = gs.as_deref_mut() {
                        for &(tx, ty, wt) in &weights {
                            if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                                gs[base + ty as usize * w + tx as usize] += go * wt;
                            }
                        }
                    }
                    if flow_live {
                        let src = &source[base..base + plane_in];
                        let v00 = tap(src, w, h, xi, yi);
                        let v10 = tap(src, w, h, xi + 1, yi);
                        let v01 = tap(src, w, h, xi, yi + 1);
                        let v11 = tap(src, w, h, xi + 1, yi + 1);
                        gx += go * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                        gy += go * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                    }
                }
                if let Some(gf) = gf.as_deref_mut() {
                    gf[fi] += gx;
                    gf[fi + plane_out] += gy;
                }
            }
        }
    }
}

/// Pulls `source [B, C, H, W]` through `flow [B, 2, Ho, Wo]`.
pub fn bilinear_sample<'t>(source: Var<'t>, flow: Var<'t>) -> Result<Var<'t>> {
    let (out, op) = {
        let (s, f) = (source.value(), flow.value());
        let (ss, fs) = (s.shape(), f.shape());
        if ss.len() != 4 || fs.len() != 4 || fs[1] != 2 || ss[0] != fs[0] {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                lhs: ss.to_vec(),
                rhs: fs.to_vec(),
            });
        }
        let (batch, channels, h, w) = (ss[0], ss[1], ss[2], ss[3]);
        let (ho, wo) = (fs[2], fs[3]);
        let plane_out = ho * wo;
        let mut data = vec![0.0f32; batch * channels * plane_out];
        for b in 0..batch {
            for c in 0..channels {
                let src = &s.data()[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                let dst = &mut data[(b * channels + c) * plane_out..(b * channels + c + 1) * plane_out];
                for (j, v) in dst.iter_mut().enumerate() {
                    let fi = b * 2 * plane_out + j;
                    *v = sample_plane(src, w, h, f.data()[fi], f.data()[fi + plane_out]);
                }
            }
        }
        (
            Tensor::new([batch, channels, ho, wo], data)?,
            BilinearSample {
                batch,
                channels,
                src: (w, h),
                out: (wo, ho),
            },
        )
    };
    Ok(source.tape().record(Box::new(op), &[source, flow], out))
}

/// Warps an image through a flow field (non-differentiable).
pub fn warp_image(source: &Image, flow: &FlowField) -> Result<Image> {
    let chw = source.to_chw();
    let (w, h) = (source.width, source.height);
    let plane_out = flow.width * flow.height;
    let mut out = vec![0.0f32; plane_out * source.channels];
    for c in 0..source.channels {
        let src = &chw[c * w * h..(c + 1) * w * h];
        for (j, xy) in flow.coords.iter().enumerate() {
            out[c * plane_out + j] = sample_plane(src, w, h, xy[0], xy[1]);
        }
    }
    Image::from_chw(flow.width, flow.height, source.channels, &out)
}

/// Tape outputs of the full mapping for a batch.
pub struct PipelineOutput<'t> {
    pub image: Var<'t>,
    /// `None` for the direct-flow variant
    pub depth: Option<Var<'t>>,
    pub flow: Var<'t>,
    pub valid: Vec<bool>,
}

/// Encode, transform, decode, project and sample for source images
/// `[B, 3, H, W]` and one source-to-target transform per entry.
pub fn forward_pipeline<'t>(
    cfg: &TaeConfig,
    p: &Params<'t>,
    source: Var<'t>,
    t_st: &[RigidTransform],
    k: &CameraIntrinsics,
) -> Result<PipelineOutput<'t>> {
    if k.width != cfg.image_size || k.height != cfg.image_size {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are {}x{}, model works at {}",
            k.width, k.height, cfg.image_size
        )));
    }
    let (depth, flow, valid) = match forward_variant(cfg, p, source, t_st)? {
        Prediction::Depth(d) => {
            let t_ts: Vec<RigidTransform> = t_st.iter().map(invert).collect();
            let (flow, valid) = depth_to_flow_diff(d, k, &t_ts)?;
            (Some(d), flow, valid)
        }
        Prediction::Flow(f) => {
            let valid = {
                let v = f.value();
                let plane = k.width * k.height;
                (0..t_st.len() * plane)
                    .map(|i| {
                        let (b, j) = (i / plane, i % plane);
                        in_frame(
                            k.width,
                            k.height,
                            v.data()[b * 2 * plane + j],
                            v.data()[b * 2 * plane + plane + j],
                        )
                    })
                    .collect()
            };
            (None, f, valid)
        }
    };
    Ok(PipelineOutput {
        image: bilinear_sample(source, flow)?,
        depth,
        flow,
        valid,
    })
}

/// Synthesized view with its intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub image: Image,
    pub depth: Option<DepthMap>,
    pub flow: FlowField,
}

fn flow_from_tensor(t: &Tensor, valid: Vec<bool>) -> FlowField {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let plane = w * h;
    FlowField {
        width: w,
        height: h,
        coords: (0..plane).map(|j| [t.data()[j], t.data()[plane + j]]).collect(),
        valid,
    }
}

/// Runs the learned mapping on one source image. `t_st` maps source-camera
/// coordinates to target-camera coordinates.
pub fn synthesize(source: &Image, t_st: &RigidTransform, k: &CameraIntrinsics, model: &Model) -> Result<Synthesis> {
    let size = model.config.image_size;
    if source.width != size || source.height != size || source.channels != 3 {
        return Err(Error::ShapeMismatch {
            op: "synthesize",
            lhs: vec![size, size, 3],
            rhs: source.shape(),
        });
    }
    let tape = Tape::new();
    let p = bind_constants(&tape, &model.params);
    let src = tape.constant(batch_images(&[source])?);
    let out = forward_pipeline(&model.config, &p, src, &[*t_st], k)?;
    let image = Image::from_chw(size, size, 3, out.image.value().data())?;
    let depth = match out.depth {
        Some(d) => Some(DepthMap::new(size, size, d.to_tensor().into_data())?),
        None => None,
    };
    let flow = flow_from_tensor(&out.flow.to_tensor(), out.valid);
    Ok(Synthesis { image, depth, flow })
}

/// Purely geometric warp using a known target-view depth.
pub fn synthesize_oracle(
    source: &Image,
    target_depth: &DepthMap,
    t_st: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<Image> {
    if source.width != k.width || source.height != k.height {
        return Err(Error::ShapeMismatch {
            op: "synthesize_oracle",
            lhs: vec![k.height, k.width],
            rhs: vec![source.height, source.width],
        });
    }
    warp_image(source, &depth_to_flow(target_depth, k, &invert(t_st))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, gradcheck_coords};
    use crate::geometry::relative_target_to_source;
    use crate::scenes::{
        raycast, relative_source_to_target, visibility_mask, Primitive, RenderSettings, SceneSpec, ShapeKind, Texture,
        TextureKind,
    };
    use crate::tae::{bind, Variant};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k_small() -> CameraIntrinsics {
        CameraIntrinsics::new(12.0, 11.0, 3.5, 2.5, 8, 6).unwrap()
    }

    fn random_transform(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let mut t = RigidTransform::axis_angle(axis, rng.random_range(-rot..rot));
        t.t = Vector3::new(
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
        );
        t
    }

    #[test]
    fn diff_flow_identity_has_zero_depth_gradient() {
        let k = k_small();
        let tape = Tape::new();
        let d = tape.var(Tensor::full([1, 1, 6, 8], 2.5));
        let (flow, valid) = depth_to_flow_diff(d, &k, &[RigidTransform::identity()]).unwrap();
        assert!(valid.iter().all(|&v| v));
        let f = flow.to_tensor();
        for y in 0..6 {
            for x in 0..8 {
                assert!((f.data()[y * 8 + x] - x as f32).abs() < 1e-6);
                assert!((f.data()[48 + y * 8 + x] - y as f32).abs() < 1e-6);
            }
        }
        let grads = tape.backward(flow.mean()).unwrap();
        assert!(grads.wrt(d).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn diff_flow_matches_plain_twin() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = random_transform(&mut rng, 0.6, 0.8);
            let values: Vec<f32> = (0..48).map(|_| rng.random_range(0.5f32..6.0)).collect();
            let plain = depth_to_flow(&DepthMap::new(8, 6, values.clone()).unwrap(), &k, &t).unwrap();
            let tape = Tape::new();
            let (flow, valid) =
                depth_to_flow_diff(tape.constant(Tensor::new([1, 1, 6, 8], values).unwrap()), &k, &[t]).unwrap();
            let f = flow.to_tensor();
            assert_eq!(valid, plain.valid);
            for (j, c) in plain.coords.iter().enumerate() {
                assert!((f.data()[j] - c[0]).abs() <= 1e-6 * c[0].abs().max(1.0));
                assert!((f.data()[48 + j] - c[1]).abs() <= 1e-6 * c[1].abs().max(1.0));
            }
        }
    }

    #[test]
    fn diff_flow_gradcheck() {
        let k = k_small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ts = [
            random_transform(&mut rng, 0.3, 0.5),
            random_transform(&mut rng, 0.3, 0.5),
        ];
        let x = Tensor::new([2, 1, 6, 8], (0..96).map(|_| rng.random_range(1.0f32..5.0)).collect()).unwrap();
        let w = Tensor::new([2, 2, 6, 8], (0..192).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let err = gradcheck(
            |t, v| Ok(depth_to_flow_diff(v, &k, &ts)?.0.mul(t.constant(w.clone()))?.mean()),
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn sampling_examples() {
        let tape = Tape::new();
        let src = tape.constant(Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let at = |x: f32, y: f32| {
            let f = tape.constant(Tensor::new([1, 2, 1, 1], vec![x, y]).unwrap());
            bilinear_sample(src, f).unwrap().item().unwrap()
        };
        assert_eq!(at(0.5, 0.5), 1.5);
        assert_eq!(at(-5.0, -5.0), 0.0);
        assert_eq!(at(1.0, 0.0), 1.0);
        // half a pixel outside: one tap in frame
        assert_eq!(at(-0.5, 0.0), 0.0 * 0.5);
        assert_eq!(at(1.5, 1.0), 1.5);
    }

    #[test]
    fn identity_flow_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::new(7, 5, 3, (0..105).map(|_| rng.random::<f32>()).collect()).unwrap();
        let out = warp_image(&img, &FlowField::identity(7, 5)).unwrap();
        assert_eq!(out, img);
    }

    /// In-frame coordinate at least 0.02 from the integer grid.
    fn off_grid(rng: &mut ChaCha8Rng, hi: f32) -> f32 {
        loop {
            let v: f32 = rng.random_range(0.0..hi);
            if (v - v.round()).abs() > 0.02 {
                return v;
            }
        }
    }

    #[test]
    fn bilinear_gradcheck_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = Tensor::new([2, 3, 5, 6], (0..180).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
        let mut flow = Vec::new();
        for _ in 0..2 {
            flow.extend((0..16).map(|_| off_grid(&mut rng, 5.0)));
            flow.extend((0..16).map(|_| off_grid(&mut rng, 4.0)));
        }
        let flow = Tensor::new([2, 2, 4, 4], flow).unwrap();
        let w = Tensor::new([2, 3, 4, 4], (0..96).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let err = gradcheck(
            |t, v| {
                Ok(bilinear_sample(v, t.constant(flow.clone()))?
                    .mul(t.constant(w.clone()))?
                    .mean())
            },
            &src,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "source {err}");
        let err = gradcheck(
            |t, v| {
                Ok(bilinear_sample(t.constant(src.clone()), v)?
                    .mul(t.constant(w.clone()))?
                    .mean())
            },
            &flow,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "flow {err}");
    }

    #[test]
    fn out_of_frame_flow_gets_no_gradient() {
        let tape = Tape::new();
        let src = tape.var(Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let flow = tape.var(Tensor::new([1, 2, 1, 1], vec![-0.5, 0.5]).unwrap());
        let out = bilinear_sample(src, flow).unwrap();
        let g = tape.backward(out.mean()).unwrap();
        assert_eq!(g.wrt(flow).unwrap(), &[0.0, 0.0]);
        // the in-frame taps still get the source gradient
        assert_eq!(g.wrt(src).unwrap(), &[0.25, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn appearance_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::new(6, 6, 3, (0..108).map(|_| rng.random::<f32>()).collect()).unwrap();
        let flow = FlowField {
            width: 6,
            height: 6,
            coords: (0..36)
                .map(|_| [rng.random_range(-1.0..6.0), rng.random_range(-1.0..6.0)])
                .collect(),
            valid: vec![true; 36],
        };
        let base = warp_image(&img, &flow).unwrap();
        for s in [2.0f32, 0.5, 0.25] {
            let scaled = warp_image(&img.map(|v| v * s), &flow).unwrap();
            assert_eq!(scaled, base.map(|v| v * s));
        }
        let scaled = warp_image(&img.map(|v| v * 0.3), &flow).unwrap();
        for (a, b) in scaled.data.iter().zip(&base.data) {
            assert!((a - b * 0.3).abs() <= 1e-6);
        }
    }

    fn textured_plane(z: f64, kind: TextureKind) -> SceneSpec {
        let mut pose = RigidTransform::identity();
        pose.t = Vector3::new(0.0, 0.0, z);
        SceneSpec {
            seed: 21,
            primitives: vec![Primitive {
                kind: ShapeKind::Plane,
                pose,
                size: Vector3::new(20.0, 20.0, 0.0),
                texture: Texture {
                    kind,
                    color_a: [0.9, 0.6, 0.2],
                    color_b: [0.1, 0.3, 0.8],
                    scale: 0.25,
                },
            }],
            background: [0.0; 3],
        }
    }

    #[test]
    fn oracle_identity_reproduces_source() {
        let spec = SceneSpec::random_objects(8);
        let k = CameraIntrinsics::square(32);
        let s = raycast(
            &spec,
            &RigidTransform::orbit(0.4, 0.2, 3.0),
            &k,
            &RenderSettings::default(),
        );
        let out = synthesize_oracle(&s.image, &s.depth, &RigidTransform::identity(), &k).unwrap();
        assert_eq!(out, s.image);
    }

    #[test]
    fn oracle_plane_translation() {
        // the source camera sits 2 px of disparity to the right of the
        // target, so the warp shifts by an exact pixel count
        let spec = textured_plane(2.0, TextureKind::Checker);
        let k = CameraIntrinsics::square(32);
        let settings = RenderSettings::default();
        let target_pose = RigidTransform::identity();
        let source_pose = RigidTransform::from_translation(Vector3::new(2.0 * 2.0 / 32.0, 0.0, 0.0));
        let s = raycast(&spec, &source_pose, &k, &settings);
        let t = raycast(&spec, &target_pose, &k, &settings);
        let t_st = relative_source_to_target(&s.pose, &t.pose);
        let out = synthesize_oracle(&s.image, &t.depth, &t_st, &k).unwrap();
        let flow = depth_to_flow(&t.depth, &k, &relative_target_to_source(&s.pose, &t.pose)).unwrap();
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (i, ok) in flow.valid.iter().enumerate() {
            if *ok {
                for c in 0..3 {
                    sum += (out.data[i * 3 + c] - t.image.data[i * 3 + c]).abs() as f64;
                    n += 1;
                }
            }
        }
        assert!(n > 0 && sum / (n as f64) < 1e-3, "{}", sum / n as f64);
    }

    #[test]
    fn oracle_orbit_step_on_sphere() {
        let spec = SceneSpec {
            seed: 22,
            primitives: vec![Primitive {
                kind: ShapeKind::Sphere,
                pose: RigidTransform::rot_x(0.3),
                size: Vector3::repeat(1.0),
                texture: Texture {
                    kind: TextureKind::Checker,
                    color_a: [0.9, 0.8, 0.3],
                    color_b: [0.2, 0.3, 0.7],
                    scale: 0.35,
                },
            }],
            background: [0.1, 0.1, 0.1],
        };
        let k = CameraIntrinsics::square(64);
        let settings = RenderSettings::default();
        let s = raycast(&spec, &RigidTransform::orbit(0.0, 0.1, 3.0), &k, &settings);
        let t = raycast(
            &spec,
            &RigidTransform::orbit(5f64.to_radians(), 0.1, 3.0),
            &k,
            &settings,
        );
        let out = synthesize_oracle(&s.image, &t.depth, &relative_source_to_target(&s.pose, &t.pose), &k).unwrap();
        let mask = visibility_mask(&s, &t).unwrap();
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (i, ok) in mask.iter().enumerate() {
            if *ok {
                for c in 0..3 {
                    sum += (out.data[i * 3 + c] - t.image.data[i * 3 + c]).abs() as f64;
                    n += 1;
                }
            }
        }
        let l1 = sum / n as f64;
        assert!(l1 < 0.02, "{l1}");
    }

    fn tiny(variant: Variant) -> TaeConfig {
        TaeConfig {
            n: 8,
            image_size: 16,
            enc_channels: vec![4, 4],
            dec_channels: vec![4, 4],
            variant,
            ..TaeConfig::default()
        }
    }

    #[test]
    fn synthesize_matches_stagewise() {
        let model = Model::init(tiny(Variant::Full), 7).unwrap();
        let spec = SceneSpec::random_objects(1);
        let k = CameraIntrinsics::square(16);
        let src = raycast(
            &spec,
            &RigidTransform::orbit(0.0, 0.2, 3.0),
            &k,
            &RenderSettings::default(),
        );
        let t_st = RigidTransform::rot_y(0.2);
        let syn = synthesize(&src.image, &t_st, &k, &model).unwrap();
        let z = model.encode(&src.image).unwrap().transform(&t_st);
        let depth = model.decode_depth(&z).unwrap();
        let flow = depth_to_flow(&depth, &k, &invert(&t_st)).unwrap();
        let image = warp_image(&src.image, &flow).unwrap();
        assert_eq!(syn.depth.as_ref(), Some(&depth));
        assert_eq!(syn.flow, flow);
        assert_eq!(syn.image, image);
        assert!(syn.image.data.iter().all(|v| v.is_finite()));

        let direct = Model::init(tiny(Variant::NoDepth), 7).unwrap();
        let syn = synthesize(&src.image, &t_st, &k, &direct).unwrap();
        assert!(syn.depth.is_none());
        assert_eq!(syn.flow.coords.len(), 256);
        assert!(synthesize(&src.image, &t_st, &CameraIntrinsics::square(32), &model).is_err());
    }

    #[test]
    fn oracle_depth_identity_through_pipeline_warp() {
        let spec = SceneSpec::random_objects(2);
        let k = CameraIntrinsics::square(16);
        let s = raycast(
            &spec,
            &RigidTransform::orbit(1.0, 0.0, 3.0),
            &k,
            &RenderSettings::default(),
        );
        let tape = Tape::new();
        let d = tape.constant(Tensor::new([1, 1, 16, 16], s.depth.values.clone()).unwrap());
        let (flow, _) = depth_to_flow_diff(d, &k, &[RigidTransform::identity()]).unwrap();
        let out = bilinear_sample(tape.constant(batch_images(&[&s.image]).unwrap()), flow).unwrap();
        let img = Image::from_chw(16, 16, 3, out.value().data()).unwrap();
        for (a, b) in img.data.iter().zip(&s.image.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn end_to_end_decoder_gradcheck() {
        let cfg = tiny(Variant::Full);
        let store = cfg.init_params(9).unwrap();
        let spec = SceneSpec::random_objects(5);
        let k = CameraIntrinsics::square(16);
        let r = RenderSettings::default();
        let s = raycast(&spec, &RigidTransform::orbit(0.0, 0.1, 3.0), &k, &r);
        let t = raycast(&spec, &RigidTransform::orbit(0.35, 0.1, 3.0), &k, &r);
        let t_st = relative_source_to_target(&s.pose, &t.pose);
        let src = batch_images(&[&s.image]).unwrap();
        let tgt = batch_images(&[&t.image]).unwrap();
        let name = "dec.deconv0.w";
        let x = store.value(name).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coords: Vec<usize> = (0..50).map(|_| rng.random_range(0..x.len())).collect();
        let err = gradcheck_coords(
            |tape, v| {
                let mut p = bind_constants(tape, &store);
                p.insert(name.to_string(), v);
                let out = forward_pipeline(&cfg, &p, tape.constant(src.clone()), &[t_st], &k)?;
                out.image.l1_loss(tape.constant(tgt.clone()))
            },
            &x,
            1e-3,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
        // bind() exposes the same parameter as a gradient leaf
        let tape = Tape::new();
        let p = bind(&tape, &store).unwrap();
        assert_eq!(p.len(), store.len());
    }
}
