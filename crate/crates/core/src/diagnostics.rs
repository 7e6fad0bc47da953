//! Central-difference checks of every differentiable operation and of the
//! full synthesis loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, gradcheck_coords, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::scenes::{raycast, relative_source_to_target, RenderSettings, SceneSpec};
use crate::tae::{batch_images, bind_constants, depth_from_raw, transform_latent, TaeConfig, Variant};
use crate::warp::{bilinear_sample, depth_to_flow_diff, forward_pipeline};

/// Checks pass below this worst relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Weighted mean with fixed non-uniform weights, so every output coordinate
/// reaches the scalar with its own sensitivity.
fn probe(y: Var<'_>) -> Result<Var<'_>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f32) * 0.7 + 0.3).sin()).collect())?;
    Ok(y.mul(y.tape().constant(w))?.mean())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values at least `margin` away from zero in `[-1, 1]`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
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

fn record<F>(out: &mut Vec<GradCheck>, name: &str, x: &Tensor, f: F) -> Result<()>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    out.push(GradCheck {
        name: name.to_string(),
        max_rel_error: gradcheck(f, x, EPS)?,
    });
    Ok(())
}

/// Runs every check; inputs are drawn from `seed` and kept away from kinks.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    record(&mut out, "add", &a, |t, v| probe(v.add(t.constant(b.clone()))?))?;
    record(&mut out, "mul", &a, |t, v| probe(v.mul(t.constant(b.clone()))?))?;
    record(&mut out, "affine", &a, |_, v| probe(v.affine(-1.7, 0.4)))?;
    record(&mut out, "mean", &a, |_, v| Ok(v.mean()))?;
    record(&mut out, "sigmoid", &a, |_, v| probe(v.sigmoid()))?;
    let kinked = away_from_zero(&mut rng, &[3, 4], 0.05);
    record(&mut out, "leaky_relu", &kinked, |_, v| probe(v.leaky_relu(0.2)))?;
    record(&mut out, "reshape", &a, |_, v| probe(v.reshape(&[2, 6])?))?;
    let c = uniform(&mut rng, &[3, 2], -1.0, 1.0);
    record(&mut out, "concat", &a, |t, v| {
        probe(Var::concat(&[v, t.constant(c.clone())], 1)?)
    })?;
    let offset = away_from_zero(&mut rng, &[3, 4], 0.05);
    let target = Tensor::new([3, 4], a.data().iter().zip(offset.data()).map(|(x, o)| x + o).collect())?;
    record(&mut out, "l1_loss", &a, |t, v| v.l1_loss(t.constant(target.clone())))?;

    let m = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let bias5 = uniform(&mut rng, &[5], -1.0, 1.0);
    record(&mut out, "matmul.lhs", &a, |t, v| {
        probe(v.matmul(t.constant(m.clone()))?)
    })?;
    record(&mut out, "matmul.rhs", &m, |t, v| {
        probe(t.constant(a.clone()).matmul(v)?)
    })?;
    record(&mut out, "linear.bias", &bias5, |t, v| {
        probe(t.constant(a.clone()).linear(t.constant(m.clone()), v)?)
    })?;
    let bias4 = uniform(&mut rng, &[4], -1.0, 1.0);
    record(&mut out, "add_bias", &bias4, |t, v| {
        probe(t.constant(a.clone()).add_bias(v)?)
    })?;

    let img = uniform(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    let kc = uniform(&mut rng, &[3, 2, 4, 4], -0.5, 0.5);
    let bc = uniform(&mut rng, &[3], -0.5, 0.5);
    record(&mut out, "conv2d.input", &img, |t, v| {
        probe(v.conv2d(t.constant(kc.clone()), Some(t.constant(bc.clone())), 2, 1)?)
    })?;
    record(&mut out, "conv2d.weight", &kc, |t, v| {
        probe(t.constant(img.clone()).conv2d(v, Some(t.constant(bc.clone())), 2, 1)?)
    })?;
    record(&mut out, "conv2d.bias", &bc, |t, v| {
        probe(t.constant(img.clone()).conv2d(t.constant(kc.clone()), Some(v), 2, 1)?)
    })?;
    let small = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let kt = uniform(&mut rng, &[3, 2, 4, 4], -0.5, 0.5);
    let bt = uniform(&mut rng, &[2], -0.5, 0.5);
    record(&mut out, "transposed_conv2d.input", &small, |t, v| {
        probe(v.transposed_conv2d(t.constant(kt.clone()), Some(t.constant(bt.clone())), 2, 1)?)
    })?;
    record(&mut out, "transposed_conv2d.weight", &kt, |t, v| {
        probe(
            t.constant(small.clone())
                .transposed_conv2d(v, Some(t.constant(bt.clone())), 2, 1)?,
        )
    })?;
    record(&mut out, "transposed_conv2d.bias", &bt, |t, v| {
        probe(
            t.constant(small.clone())
                .transposed_conv2d(t.constant(kt.clone()), Some(v), 2, 1)?,
        )
    })?;

    let z = uniform(&mut rng, &[2, 5, 3], -1.0, 1.0);
    let transforms = [
        RigidTransform::axis_angle(crate::geometry::Vector3::new(0.3, 1.0, -0.2), 0.4),
        RigidTransform::rot_x(-0.7),
    ];
    record(&mut out, "transform_latent", &z, |_, v| {
        probe(transform_latent(v, &transforms)?)
    })?;
    let raw = uniform(&mut rng, &[1, 1, 3, 3], -3.0, 3.0);
    record(&mut out, "depth_decode", &raw, |_, v| {
        probe(depth_from_raw(&TaeConfig::default(), v))
    })?;

    let src = uniform(&mut rng, &[2, 3, 5, 6], 0.0, 1.0);
    let mut flow = Vec::new();
    for _ in 0..2 {
        flow.extend((0..16).map(|_| off_grid(&mut rng, 5.0)));
        flow.extend((0..16).map(|_| off_grid(&mut rng, 4.0)));
    }
    let flow = Tensor::new([2, 2, 4, 4], flow)?;
    record(&mut out, "bilinear_sample.source", &src, |t, v| {
        probe(bilinear_sample(v, t.constant(flow.clone()))?)
    })?;
    record(&mut out, "bilinear_sample.flow", &flow, |t, v| {
        probe(bilinear_sample(t.constant(src.clone()), v)?)
    })?;

    let k = CameraIntrinsics::square(8);
    let depth = uniform(&mut rng, &[1, 1, 8, 8], 2.0, 4.0);
    let mut t_ts = RigidTransform::rot_y(0.15);
    t_ts.t = crate::geometry::Vector3::new(0.2, -0.1, 0.05);
    record(&mut out, "depth_to_flow", &depth, |_, v| {
        probe(depth_to_flow_diff(v, &k, &[t_ts])?.0)
    })?;

    for variant in [Variant::Full, Variant::NoTae, Variant::NoDepth] {
        out.push(GradCheck {
            name: format!("end_to_end_loss.{variant}"),
            max_rel_error: end_to_end(variant, &mut rng)?,
        });
    }
    Ok(out)
}

/// Synthesis L1 against a raycast target, differentiated with respect to a
/// sample of encoder and decoder weights of a small model.
fn end_to_end(variant: Variant, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = TaeConfig {
        n: 8,
        image_size: 16,
        enc_channels: vec![4, 4],
        dec_channels: vec![4, 4],
        variant,
        ..TaeConfig::default()
    };
    let store = cfg.init_params(rng.random())?;
    let spec = SceneSpec::random_objects(rng.random());
    let k = cfg.intrinsics();
    let r = RenderSettings::default();
    let s = raycast(&spec, &RigidTransform::orbit(0.0, 0.1, 3.0), &k, &r);
    let t = raycast(&spec, &RigidTransform::orbit(0.35, 0.1, 3.0), &k, &r);
    let t_st = relative_source_to_target(&s.pose, &t.pose);
    let src = batch_images(&[&s.image])?;
    let tgt = batch_images(&[&t.image])?;
    let mut worst = 0.0f64;
    for name in ["enc.conv0.w", "dec.deconv0.w"] {
        let x = store.value(name).expect("model parameter").clone();
        let coords: Vec<usize> = (0..25).map(|_| rng.random_range(0..x.len())).collect();
        let err = gradcheck_coords(
            |tape, v| {
                let mut p = bind_constants(tape, &store);
                p.insert(name.to_string(), v);
                let out = forward_pipeline(&cfg, &p, tape.constant(src.clone()), &[t_st], &k)?;
                out.image.l1_loss(tape.constant(tgt.clone()))
            },
            &x,
            EPS,
            &coords,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
