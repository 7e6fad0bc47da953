//! Transforming auto-encoder: image -> latent point set -> rigid motion ->
//! target-view depth.
//!
//! Graph-building functions take a [`Params`] map of tape variables so a
//! caller can substitute any single parameter (used by gradient checks).
//! [`Model`] wraps an immutable parameter snapshot for inference.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::{checkpoint, Initializer, Op, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, RigidTransform};
use crate::image::Image;
use crate::io::{parse_value, KeyValues};

const LEAK: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// latent points rigidly transformed, decoder emits depth
    Full,
    /// flat latent concatenated with view parameters, decoder emits depth
    NoTae,
    /// latent points transformed, decoder emits correspondences directly
    NoDepth,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoTae => "no_tae",
            Variant::NoDepth => "no_depth",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_tae" => Ok(Variant::NoTae),
            "no_depth" => Ok(Variant::NoDepth),
            _ => Err(Error::InvalidArgument(format!(
                "unknown variant {s:?} (full, no_tae, no_depth)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaeConfig {
    /// latent point count
    pub n: usize,
    pub image_size: usize,
    /// output channels of the stride-2 encoder convolutions
    pub enc_channels: Vec<usize>,
    /// input channels of the stride-2 decoder transposed convolutions
    pub dec_channels: Vec<usize>,
    pub d_min: f32,
    pub d_max: f32,
    pub variant: Variant,
}

impl Default for TaeConfig {
    fn default() -> Self {
        TaeConfig {
            n: 128,
            image_size: 32,
            enc_channels: vec![16, 32, 64, 64],
            dec_channels: vec![64, 64, 32, 16],
            d_min: 0.5,
            d_max: 6.0,
            variant: Variant::Full,
        }
    }
}

/// Number of view parameters appended to the flat latent of [`Variant::NoTae`].
pub const VIEW_PARAMS: usize = 7;

fn format_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse_value(line, key, s.trim())).collect()
}

impl TaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return bad(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            ));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return bad(format!("need 0 < d_min < d_max, got {} and {}", self.d_min, self.d_max));
        }
        if self.n < 4 {
            return bad(format!("latent point count must be >= 4, got {}", self.n));
        }
        let depth = self.enc_channels.len();
        if depth == 0 || self.image_size >> depth == 0 {
            return bad(format!(
                "{depth} encoder stages do not fit image_size {}",
                self.image_size
            ));
        }
        if self.dec_channels.len() != depth {
            return bad(format!(
                "decoder needs {depth} stages to mirror the encoder, got {}",
                self.dec_channels.len()
            ));
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    /// Side length of the bottleneck grid.
    pub fn grid(&self) -> usize {
        self.image_size >> self.enc_channels.len()
    }

    pub fn out_channels(&self) -> usize {
        match self.variant {
            Variant::NoDepth => 2,
            _ => 1,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::square(self.image_size)
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "variant = {}\nn = {}\nimage_size = {}\nenc_channels = {}\ndec_channels = {}\nd_min = {}\nd_max = {}\n",
            self.variant,
            self.n,
            self.image_size,
            format_list(&self.enc_channels),
            format_list(&self.dec_channels),
            self.d_min,
            self.d_max
        )
    }

    /// Sets one key; returns `false` for keys this config does not own.
    pub fn set_key(&mut self, line: usize, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => {
                self.variant = value.parse().map_err(|e: Error| Error::Config {
                    line,
                    msg: e.to_string(),
                })?
            }
            "n" => self.n = parse_value(line, key, value)?,
            "image_size" => self.image_size = parse_value(line, key, value)?,
            "enc_channels" => self.enc_channels = parse_list(line, key, value)?,
            "dec_channels" => self.dec_channels = parse_list(line, key, value)?,
            "d_min" => self.d_min = parse_value(line, key, value)?,
            "d_max" => self.d_max = parse_value(line, key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Reads the keys above; missing keys keep their defaults and unknown
    /// keys are errors.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = TaeConfig::default();
        for (line, key, value) in &kv.entries {
            if !c.set_key(*line, key, value)? {
                return Err(Error::Config {
                    line: *line,
                    msg: format!("unknown key `{key}`"),
                });
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Parameter names and shapes, in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, &c) in self.enc_channels.iter().enumerate() {
            out.push((format!("enc.conv{i}.w"), vec![c, c_in, 4, 4]));
            out.push((format!("enc.conv{i}.b"), vec![c]));
            c_in = c;
        }
        let g = self.grid();
        out.push(("enc.fc.w".into(), vec![c_in * g * g, 3 * self.n]));
        out.push(("enc.fc.b".into(), vec![3 * self.n]));
        let latent = 3 * self.n + if self.variant == Variant::NoTae { VIEW_PARAMS } else { 0 };
        out.push(("dec.fc.w".into(), vec![latent, self.dec_channels[0] * g * g]));
        out.push(("dec.fc.b".into(), vec![self.dec_channels[0] * g * g]));
        for (i, &c) in self.dec_channels.iter().enumerate() {
            let o = self.dec_channels.get(i + 1).copied().unwrap_or(self.out_channels());
            out.push((format!("dec.deconv{i}.w"), vec![c, o, 4, 4]));
            out.push((format!("dec.deconv{i}.b"), vec![o]));
        }
        out
    }

    /// Kaiming-uniform weights and zero biases. The output layer is scaled
    /// down so initial depths sit near the middle of the range.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        self.validate()?;
        let mut init = Initializer::new(seed);
        let mut store = ParameterStore::new();
        let shapes = self.parameter_shapes();
        let last = format!("dec.deconv{}.w", self.dec_channels.len() - 1);
        for (name, shape) in &shapes {
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape.clone())
            } else if name.starts_with("enc.conv") {
                init.kaiming_uniform(shape, shape[1] * 16)
            } else if name.starts_with("dec.deconv") {
                // each output sees (k / stride)^2 taps per input channel
                let t = init.kaiming_uniform(shape, shape[0] * 4);
                if *name == last {
                    Tensor::new(shape.clone(), t.into_data().into_iter().map(|v| v * 0.1).collect())?
                } else {
                    t
                }
            } else {
                init.kaiming_uniform(shape, shape[0])
            };
            store.insert(name.clone(), t)?;
        }
        Ok(store)
    }

    fn check_store(&self, store: &ParameterStore) -> Result<()> {
        let shapes = self.parameter_shapes();
        if store.len() != shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} parameters, config expects {}",
                store.len(),
                shapes.len()
            )));
        }
        for (name, shape) in shapes {
            let v = store
                .value(&name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if v.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: shape,
                    rhs: v.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Tape variables for every model parameter, keyed by name.
pub type Params<'t> = BTreeMap<String, Var<'t>>;

/// Loads every parameter as a gradient-receiving tape leaf.
pub fn bind<'t>(tape: &'t Tape, store: &ParameterStore) -> Result<Params<'t>> {
    store
        .names()
        .map(|n| Ok((n.to_string(), tape.param(store, n)?)))
        .collect()
}

/// Loads every parameter as a constant (inference).
pub fn bind_constants<'t>(tape: &'t Tape, store: &ParameterStore) -> Params<'t> {
    store
        .iter()
        .map(|(n, v)| (n.to_string(), tape.constant(v.clone())))
        .collect()
}

fn get<'t>(p: &Params<'t>, name: &str) -> Result<Var<'t>> {
    p.get(name)
        .copied()
        .ok_or_else(|| Error::UnknownParameter(name.to_string()))
}

/// Latent code: `n` points in 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPointSet {
    pub points: Tensor,
}

impl LatentPointSet {
    pub fn new(points: Tensor) -> Result<Self> {
        let s = points.shape();
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "latent",
                lhs: vec![0, 3],
                rhs: s.to_vec(),
            });
        }
        if !points.all_finite() {
            return Err(Error::InvalidArgument("latent points must be finite".into()));
        }
        Ok(LatentPointSet { points })
    }

    pub fn from_points(points: &[[f32; 3]]) -> Result<Self> {
        Self::new(Tensor::new(
            [points.len(), 3],
            points.iter().flatten().copied().collect(),
        )?)
    }

    pub fn n(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn point(&self, i: usize) -> [f32; 3] {
        let d = &self.points.data()[i * 3..i * 3 + 3];
        [d[0], d[1], d[2]]
    }

    /// `p -> R p + t` for every point.
    pub fn transform(&self, t: &RigidTransform) -> LatentPointSet {
        let (r, tr) = rigid_f32(t);
        let mut data = self.points.data().to_vec();
        for p in data.chunks_exact_mut(3) {
            let q = apply_f32(&r, &tr, [p[0], p[1], p[2]]);
            p.copy_from_slice(&q);
        }
        LatentPointSet {
            points: Tensor::new(self.points.shape(), data).expect("same shape"),
        }
    }
}

/// `(1 - alpha) a + alpha b`, pointwise.
pub fn interpolate_latents(a: &LatentPointSet, b: &LatentPointSet, alpha: f32) -> Result<LatentPointSet> {
    if a.points.shape() != b.points.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate_latents",
            lhs: a.points.shape().to_vec(),
            rhs: b.points.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    // endpoints are returned exactly
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let data = a
        .points
        .data()
        .iter()
        .zip(b.points.data())
        .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
        .collect();
    LatentPointSet::new(Tensor::new(a.points.shape(), data)?)
}

fn rigid_f32(t: &RigidTransform) -> ([[f32; 3]; 3], [f32; 3]) {
    let r = std::array::from_fn(|i| std::array::from_fn(|j| t.r[(i, j)] as f32));
    (r, std::array::from_fn(|i| t.t[i] as f32))
}

#[inline]
fn apply_f32(r: &[[f32; 3]; 3], t: &[f32; 3], p: [f32; 3]) -> [f32; 3] {
    std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i])
}

struct TransformLatent {
    /// per-sample rotations
    rotations: Vec<[[f32; 3]; 3]>,
}

impl Op for TransformLatent {
    fn name(&self) -> &'static str {
        "transform_latent"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let Some(gz) = grads[0].as_mut() else { return };
        let per = inputs[0].len() / self.rotations.len();
        for (b, r) in self.rotations.iter().enumerate() {
            for i in (b * per..(b + 1) * per).step_by(3) {
                for c in 0..3 {
                    // R^T g
                    gz[i + c] += r[0][c] * g[i] + r[1][c] * g[i + 1] + r[2][c] * g[i + 2];
                }
            }
        }
    }
}

/// Applies one rigid transform per batch entry to latent points `[B, n, 3]`.
pub fn transform_latent<'t>(z: Var<'t>, transforms: &[RigidTransform]) -> Result<Var<'t>> {
    let (out, rotations) = {
        let v = z.value();
        let s = v.shape();
        if s.len() != 3 || s[2] != 3 || s[0] != transforms.len() {
            return Err(Error::ShapeMismatch {
                op: "transform_latent",
                lhs: s.to_vec(),
                rhs: vec![transforms.len(), 0, 3],
            });
        }
        let per = s[1] * 3;
        let mut data = v.data().to_vec();
        let mut rotations = Vec::with_capacity(transforms.len());
        for (b, t) in transforms.iter().enumerate() {
            let (r, tr) = rigid_f32(t);
            for p in data[b * per..(b + 1) * per].chunks_exact_mut(3) {
                let q = apply_f32(&r, &tr, [p[0], p[1], p[2]]);
                p.copy_from_slice(&q);
            }
            rotations.push(r);
        }
        (Tensor::new(s, data)?, rotations)
    };
    Ok(z.tape().record(Box::new(TransformLatent { rotations }), &[z], out))
}

/// View encoding for [`Variant::NoTae`], read off a relative transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    /// rotation about the camera y axis, radians
    pub azimuth: f64,
    /// rotation about the camera x axis, radians
    pub elevation: f64,
    pub translation: [f64; 3],
}

impl ViewParams {
    /// Yaw and pitch of the decomposition `R = Ry(az) Rx(el) Rz(roll)`.
    pub fn from_transform(t: &RigidTransform) -> Self {
        let r = &t.r;
        ViewParams {
            azimuth: r[(0, 2)].atan2(r[(2, 2)]),
            elevation: (-r[(1, 2)]).clamp(-1.0, 1.0).asin(),
            translation: [t.t.x, t.t.y, t.t.z],
        }
    }

    /// `(cos az, sin az, cos el, sin el, tx, ty, tz)`.
    pub fn encode(&self) -> [f32; VIEW_PARAMS] {
        let [tx, ty, tz] = self.translation;
        [
            self.azimuth.cos(),
            self.azimuth.sin(),
            self.elevation.cos(),
            self.elevation.sin(),
            tx,
            ty,
            tz,
        ]
        .map(|v| v as f32)
    }
}

/// Stacks images into a `[B, C, H, W]` tensor.
pub fn batch_images(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::ShapeMismatch {
                op: "batch_images",
                lhs: first.shape(),
                rhs: img.shape(),
            });
        }
        data.extend(img.to_chw());
    }
    Tensor::new([images.len(), first.channels, first.height, first.width], data)
}

/// Raw model output for a batch.
pub enum Prediction<'t> {
    /// `[B, 1, H, W]`, inside `(d_min, d_max)`
    Depth(Var<'t>),
    /// `[B, 2, H, W]` source-pixel coordinates
    Flow(Var<'t>),
}

/// Encoder: `[B, 3, H, W]` images to `[B, n, 3]` latent points.
pub fn encode<'t>(cfg: &TaeConfig, p: &Params<'t>, images: Var<'t>) -> Result<Var<'t>> {
    let s = images.shape();
    let size = cfg.image_size;
    if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: vec![0, 3, size, size],
            rhs: s,
        });
    }
    let batch = s[0];
    let mut x = images.affine(1.0, -0.5);
    for i in 0..cfg.enc_channels.len() {
        let w = get(p, &format!("enc.conv{i}.w"))?;
        let b = get(p, &format!("enc.conv{i}.b"))?;
        x = x.conv2d(w, Some(b), 2, 1)?.leaky_relu(LEAK);
    }
    let features = x.value().len() / batch;
    let flat = x.reshape(&[batch, features])?;
    let z = flat.linear(get(p, "enc.fc.w")?, get(p, "enc.fc.b")?)?;
    z.reshape(&[batch, cfg.n, 3])
}

/// Decoder trunk: `[B, latent]` to raw `[B, out_channels, H, W]`.
pub fn decode_raw<'t>(cfg: &TaeConfig, p: &Params<'t>, latent: Var<'t>) -> Result<Var<'t>> {
    let batch = latent.shape()[0];
    let g = cfg.grid();
    let mut x = latent
        .linear(get(p, "dec.fc.w")?, get(p, "dec.fc.b")?)?
        .leaky_relu(LEAK)
        .reshape(&[batch, cfg.dec_channels[0], g, g])?;
    let last = cfg.dec_channels.len() - 1;
    for i in 0..=last {
        let w = get(p, &format!("dec.deconv{i}.w"))?;
        let b = get(p, &format!("dec.deconv{i}.b"))?;
        x = x.transposed_conv2d(w, Some(b), 2, 1)?;
        if i != last {
            x = x.leaky_relu(LEAK);
        }
    }
    Ok(x)
}

/// Raw values are clamped here so f32 sigmoid never rounds to 0 or 1.
const RAW_LIMIT: f32 = 15.0;

struct DepthDecode {
    range: f32,
}

impl Op for DepthDecode {
    fn name(&self) -> &'static str {
        "depth_decode"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let Some(gr) = grads[0].as_mut() else { return };
        for ((acc, &raw), &go) in gr.iter_mut().zip(inputs[0].data()).zip(g) {
            let s = sigmoid(raw.clamp(-RAW_LIMIT, RAW_LIMIT));
            *acc += go * self.range * s * (1.0 - s);
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `d_min + (d_max - d_min) * sigmoid(raw)`, strictly inside the range.
pub fn depth_from_raw<'t>(cfg: &TaeConfig, raw: Var<'t>) -> Var<'t> {
    let range = cfg.d_max - cfg.d_min;
    let out = {
        let v = raw.value();
        let data = v
            .data()
            .iter()
            .map(|&r| cfg.d_min + range * sigmoid(r.clamp(-RAW_LIMIT, RAW_LIMIT)))
            .collect();
        Tensor::new(v.shape(), data).expect("same shape")
    };
    raw.tape().record(Box::new(DepthDecode { range }), &[raw], out)
}

/// Decodes transformed latent points `[B, n, 3]` to depth `[B, 1, H, W]`.
pub fn decode_depth<'t>(cfg: &TaeConfig, p: &Params<'t>, z: Var<'t>) -> Result<Var<'t>> {
    if cfg.variant != Variant::Full {
        return Err(Error::InvalidArgument(format!(
            "decode_depth needs the full variant, model is {}",
            cfg.variant
        )));
    }
    let batch = z.shape()[0];
    let raw = decode_raw(cfg, p, z.reshape(&[batch, 3 * cfg.n])?)?;
    Ok(depth_from_raw(cfg, raw))
}

/// Pixel-grid offsets are scaled so a raw output of 1 moves an eighth of the
/// image.
pub fn flow_scale(cfg: &TaeConfig) -> f32 {
    cfg.image_size as f32 / 8.0
}

/// Runs the configured variant on source images `[B, 3, H, W]` with one
/// source-to-target transform per entry.
pub fn forward_variant<'t>(
    cfg: &TaeConfig,
    p: &Params<'t>,
    images: Var<'t>,
    transforms: &[RigidTransform],
) -> Result<Prediction<'t>> {
    let batch = images.shape()[0];
    if transforms.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} transforms for a batch of {batch}",
            transforms.len()
        )));
    }
    let z = encode(cfg, p, images)?;
    let tape = images.tape();
    match cfg.variant {
        Variant::Full => Ok(Prediction::Depth(decode_depth(
            cfg,
            p,
            transform_latent(z, transforms)?,
        )?)),
        Variant::NoTae => {
            let views: Vec<f32> = transforms
                .iter()
                .flat_map(|t| ViewParams::from_transform(t).encode())
                .collect();
            let views = tape.constant(Tensor::new([batch, VIEW_PARAMS], views)?);
            let latent = Var::concat(&[z.reshape(&[batch, 3 * cfg.n])?, views], 1)?;
            Ok(Prediction::Depth(depth_from_raw(cfg, decode_raw(cfg, p, latent)?)))
        }
        Variant::NoDepth => {
            let zt = transform_latent(z, transforms)?;
            let raw = decode_raw(cfg, p, zt.reshape(&[batch, 3 * cfg.n])?)?;
            let size = cfg.image_size;
            let mut grid = Vec::with_capacity(batch * 2 * size * size);
            for _ in 0..batch {
                grid.extend((0..size * size).map(|i| (i % size) as f32));
                grid.extend((0..size * size).map(|i| (i / size) as f32));
            }
            let grid = tape.constant(Tensor::new([batch, 2, size, size], grid)?);
            Ok(Prediction::Flow(raw.affine(flow_scale(cfg), 0.0).add(grid)?))
        }
    }
}

/// Immutable model snapshot for inference; cheap to clone and share across
/// threads.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TaeConfig,
    pub params: Arc<ParameterStore>,
}

/// Sidecar path holding the config of a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

impl Model {
    pub fn new(config: TaeConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        config.check_store(&params)?;
        Ok(Model {
            config,
            params: Arc::new(params),
        })
    }

    pub fn init(config: TaeConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Self::new(config, params)
    }

    /// Writes the checkpoint and its `.cfg` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)?;
        let cfg = config_path(path);
        std::fs::write(&cfg, self.config.to_key_values()).map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config = TaeConfig::from_key_values(&KeyValues::load(&config_path(path))?)?;
        Self::new(config, checkpoint::load(path)?)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.width != s || image.height != s || image.channels != 3 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![s, s, 3],
                rhs: image.shape(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, image: &Image) -> Result<LatentPointSet> {
        self.check_image(image)?;
        let tape = Tape::new();
        let p = bind_constants(&tape, &self.params);
        let z = encode(&self.config, &p, tape.constant(batch_images(&[image])?))?;
        let t = z.to_tensor();
        LatentPointSet::new(t.reshaped([self.config.n, 3])?)
    }

    pub fn decode_depth(&self, z: &LatentPointSet) -> Result<DepthMap> {
        if z.n() != self.config.n {
            return Err(Error::ShapeMismatch {
                op: "decode_depth",
                lhs: vec![self.config.n, 3],
                rhs: z.points.shape().to_vec(),
            });
        }
        let tape = Tape::new();
        let p = bind_constants(&tape, &self.params);
        let zt = tape.constant(z.points.clone().reshaped([1, z.n(), 3])?);
        let d = decode_depth(&self.config, &p, zt)?;
        let s = self.config.image_size;
        DepthMap::new(s, s, d.to_tensor().into_data())
    }

    /// Runs the variant for one image; returns a `[1, C, H, W]` tensor of
    /// depth (`C = 1`) or coordinates (`C = 2`).
    pub fn forward_variant(&self, image: &Image, t_st: &RigidTransform) -> Result<Tensor> {
        self.check_image(image)?;
        let tape = Tape::new();
        let p = bind_constants(&tape, &self.params);
        let out = forward_variant(&self.config, &p, tape.constant(batch_images(&[image])?), &[*t_st])?;
        Ok(match out {
            Prediction::Depth(v) | Prediction::Flow(v) => v.to_tensor(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::geometry::compose;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn small(variant: Variant) -> TaeConfig {
        TaeConfig {
            n: 8,
            image_size: 16,
            enc_channels: vec![4, 4],
            dec_channels: vec![4, 4],
            variant,
            ..TaeConfig::default()
        }
    }

    fn noise_image(size: usize, seed: u32) -> Image {
        let data = (0..size * size * 3)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed * 97) % 1000) as f32 / 1000.0)
            .collect();
        Image::new(size, size, 3, data).unwrap()
    }

    #[test]
    fn latent_transform_examples() {
        let z = LatentPointSet::from_points(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(z.transform(&RigidTransform::identity()), z);
        let rz = RigidTransform::rot_z(90f64.to_radians());
        let p = z.transform(&rz).point(0);
        assert!((p[0]).abs() < 1e-7 && (p[1] - 1.0).abs() < 1e-7 && p[2] == 0.0);
        let mut t = rz;
        t.t = Vector3::new(0.0, 0.0, 1.0);
        let p = z.transform(&t).point(0);
        assert!(p[0].abs() < 1e-7 && (p[1] - 1.0).abs() < 1e-7 && (p[2] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn tape_transform_matches_plain() {
        let tape = Tape::new();
        let pts: Vec<f32> = (0..12).map(|i| i as f32 * 0.3 - 1.0).collect();
        let ts = [
            RigidTransform::rot_y(0.3),
            RigidTransform::axis_angle(Vector3::new(1.0, 2.0, 0.5), 1.1),
        ];
        let z = tape.var(Tensor::new([2, 2, 3], pts.clone()).unwrap());
        let out = transform_latent(z, &ts).unwrap().to_tensor();
        for b in 0..2 {
            let plain = LatentPointSet::new(Tensor::new([2, 3], pts[b * 6..b * 6 + 6].to_vec()).unwrap())
                .unwrap()
                .transform(&ts[b]);
            assert_eq!(&out.data()[b * 6..b * 6 + 6], plain.points.data());
        }
        assert!(transform_latent(z, &ts[..1]).is_err());
    }

    #[test]
    fn transform_latent_gradcheck() {
        let x = Tensor::new([2, 3, 3], (0..18).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let ts = [
            RigidTransform::axis_angle(Vector3::new(0.2, 1.0, -0.3), 0.7),
            RigidTransform::rot_x(2.0),
        ];
        let w = Tensor::new([2, 3, 3], (0..18).map(|i| (i as f32 * 0.91).cos()).collect()).unwrap();
        let err = gradcheck(
            |t, v| Ok(transform_latent(v, &ts)?.mul(t.constant(w.clone()))?.mean()),
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = LatentPointSet::from_points(&[[0.0; 3], [0.1, 0.7, -3.3]]).unwrap();
        let b = LatentPointSet::from_points(&[[2.0; 3], [1e-7, 5.0, 0.3]]).unwrap();
        assert_eq!(interpolate_latents(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_latents(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate_latents(&a, &b, 0.5).unwrap().point(0), [1.0; 3]);
        let c = LatentPointSet::from_points(&[[0.0; 3]]).unwrap();
        assert!(interpolate_latents(&a, &c, 0.5).is_err());
        assert!(interpolate_latents(&a, &b, 1.5).is_err());
    }

    #[test]
    fn view_params_recover_yaw_and_pitch() {
        let t = compose(&RigidTransform::rot_y(0.4), &RigidTransform::rot_x(-0.2));
        let v = ViewParams::from_transform(&t);
        assert!((v.azimuth - 0.4).abs() < 1e-12);
        assert!((v.elevation + 0.2).abs() < 1e-12);
        let e = ViewParams::from_transform(&RigidTransform::identity()).encode();
        assert_eq!(e, [1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        TaeConfig::default().validate().unwrap();
        for bad in [
            TaeConfig {
                image_size: 24,
                ..TaeConfig::default()
            },
            TaeConfig {
                image_size: 8,
                ..TaeConfig::default()
            },
            TaeConfig {
                n: 3,
                ..TaeConfig::default()
            },
            TaeConfig {
                d_min: 6.0,
                ..TaeConfig::default()
            },
            TaeConfig {
                dec_channels: vec![8],
                ..TaeConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn config_key_values_round_trip() {
        let c = TaeConfig {
            variant: Variant::NoTae,
            n: 32,
            ..TaeConfig::default()
        };
        let back = TaeConfig::from_key_values(&KeyValues::parse(&c.to_key_values()).unwrap()).unwrap();
        assert_eq!(back, c);
        let err = TaeConfig::from_key_values(&KeyValues::parse("n = 8\nwidth = 3").unwrap()).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn shapes_per_variant() {
        let img = noise_image(16, 1);
        let t = RigidTransform::rot_y(0.2);
        for (variant, channels) in [(Variant::Full, 1), (Variant::NoTae, 1), (Variant::NoDepth, 2)] {
            let m = Model::init(small(variant), 3).unwrap();
            let out = m.forward_variant(&img, &t).unwrap();
            assert_eq!(out.shape(), &[1, channels, 16, 16]);
            assert!(out.all_finite());
            if channels == 1 {
                assert!(out.data().iter().all(|&d| d > 0.5 && d < 6.0));
            }
        }
        let m = Model::init(small(Variant::Full), 3).unwrap();
        assert!(m.forward_variant(&noise_image(32, 1), &t).is_err());
        let z = m.encode(&img).unwrap();
        assert_eq!(z.points.shape(), &[8, 3]);
        assert_eq!(m.encode(&img).unwrap(), z);
        assert_ne!(m.encode(&noise_image(16, 2)).unwrap(), z);
        let no_tae = Model::init(small(Variant::NoTae), 3).unwrap();
        assert!(no_tae.decode_depth(&no_tae.encode(&img).unwrap()).is_err());
    }

    #[test]
    fn zero_raw_decodes_to_mid_range() {
        let cfg = small(Variant::Full);
        let tape = Tape::new();
        let raw = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let d = depth_from_raw(&cfg, raw).to_tensor();
        assert!(d.data().iter().all(|&v| (v - 3.25).abs() < 1e-6));
    }

    #[test]
    fn depth_decode_strict_range_and_gradient() {
        let cfg = small(Variant::Full);
        let tape = Tape::new();
        let d = depth_from_raw(
            &cfg,
            tape.constant(Tensor::new([4], vec![-1e4, -40.0, 40.0, 1e4]).unwrap()),
        )
        .to_tensor();
        assert!(d.data().iter().all(|&v| v > 0.5 && v < 6.0), "{:?}", d.data());
        let x = Tensor::new([5], vec![-2.0, -0.3, 0.0, 0.8, 3.0]).unwrap();
        let err = gradcheck(|_, v| Ok(depth_from_raw(&cfg, v).mean()), &x, 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn untrained_decoder_fixture() {
        // regression fixture for the seeded initializer and decoder stack
        let m = Model::init(small(Variant::Full), 11).unwrap();
        let z = LatentPointSet::from_points(&(0..8).map(|i| [i as f32 * 0.1, -0.2, 0.3]).collect::<Vec<_>>()).unwrap();
        let d = m.decode_depth(&z).unwrap();
        let again = Model::init(small(Variant::Full), 11).unwrap().decode_depth(&z).unwrap();
        assert_eq!(d, again);
        let mean = d.values.iter().map(|&v| v as f64).sum::<f64>() / d.values.len() as f64;
        assert!((mean - 3.25).abs() < 0.5, "{mean}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nvsc");
        let m = Model::init(small(Variant::NoDepth), 5).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        let img = noise_image(16, 4);
        let t = RigidTransform::rot_x(0.1);
        assert_eq!(
            back.forward_variant(&img, &t).unwrap(),
            m.forward_variant(&img, &t).unwrap()
        );
        // config and checkpoint disagreeing is rejected
        std::fs::write(config_path(&path), small(Variant::Full).to_key_values()).unwrap();
        assert!(Model::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn decoded_depth_in_range(seed in 0u64..1000, scale in 0.0f32..50.0) {
            let m = Model::init(small(Variant::Full), 1).unwrap();
            let pts: Vec<[f32; 3]> = (0..8)
                .map(|i| {
                    let h = (seed.wrapping_mul(6364136223846793005).wrapping_add(i * 1442695040888963407) >> 33) as f32;
                    [(h % 97.0) / 48.5 - 1.0, (h % 89.0) / 44.5 - 1.0, (h % 83.0) / 41.5 - 1.0].map(|v| v * scale)
                })
                .collect();
            let d = m.decode_depth(&LatentPointSet::from_points(&pts).unwrap()).unwrap();
            prop_assert!(d.values.iter().all(|&v| v > 0.5 && v < 6.0));
        }
    }
}
