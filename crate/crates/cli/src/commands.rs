use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nvs_core::diagnostics::{gradient_suite, GRADCHECK_TOLERANCE};
use nvs_core::geometry::{compose, invert, Vector3};
use nvs_core::image::colorize_depth;
use nvs_core::io::{format_intrinsics, format_poses, parse_intrinsics, read_poses, write_depth_pfm};
use nvs_core::metrics::{pose_error_direct, ssim};
use nvs_core::scenes::{
    corridor_start, raycast, relative_source_to_target, visibility_mask, RenderSettings, SceneSpec, ViewSample,
};
use nvs_core::tae::interpolate_latents;
use nvs_core::train::{
    average_sweeps, copy_source_l1, evaluate_depth_flow, evaluate_sweep, sweep_csv, train as run_training, TrainConfig,
    VALIDATION_SCENE_BASE,
};
use nvs_core::warp::{synthesize, synthesize_oracle};
use nvs_core::{CameraIntrinsics, DepthMap, Error, Image, Model, RigidTransform, Variant};

use crate::{Common, SourceArgs};

/// One-line failure: `error: <kind>: <msg>`.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub msg: String,
}

impl CliError {
    fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        CliError { kind, msg: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io { .. } => "io",
            Error::Format { .. } | Error::Image(_) => "format",
            Error::Config { .. } => "config",
            Error::NonFiniteLoss { .. } => "training",
            Error::ShapeMismatch { .. }
            | Error::InvalidArgument(_)
            | Error::InvalidRotation(_)
            | Error::NonPositiveDepth(_) => "invalid",
            _ => "internal",
        };
        CliError::new(kind, e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn unused(common: &Common, command: &str, config: bool, checkpoint: bool) -> CliResult {
    if config && common.config.is_some() {
        return Err(CliError::new("usage", format!("{command} does not take --config")));
    }
    if checkpoint && common.checkpoint.is_some() {
        return Err(CliError::new("usage", format!("{command} does not take --checkpoint")));
    }
    Ok(())
}

fn load_config(common: &Common) -> CliResult<TrainConfig> {
    let Some(path) = &common.config else {
        return Ok(TrainConfig::default());
    };
    if !path.is_file() {
        return Err(CliError::new("io", format!("config not found: {}", path.display())));
    }
    TrainConfig::load(path).map_err(|e| match e {
        Error::Config { line, msg } => CliError::new("config", format!("{}:{line}: {msg}", path.display())),
        Error::InvalidArgument(msg) => CliError::new("config", format!("{}: {msg}", path.display())),
        other => other.into(),
    })
}

fn load_model(common: &Common) -> CliResult<Option<Model>> {
    let Some(path) = &common.checkpoint else {
        return Ok(None);
    };
    if !path.is_file() {
        return Err(CliError::new("io", format!("checkpoint not found: {}", path.display())));
    }
    Ok(Some(Model::load(path)?))
}

fn require_model(common: &Common, command: &str) -> CliResult<Model> {
    load_model(common)?.ok_or_else(|| CliError::new("usage", format!("{command} requires --checkpoint")))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

pub fn train(common: &Common, out: &Path, epochs: Option<usize>) -> CliResult {
    unused(common, "train", false, true)?;
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    create_dir(out)?;
    let report = run_training(&cfg, Some(out), |s| {
        eprintln!(
            "epoch {:>3}  train_l1 {:.5}  val_l1 {:.5}",
            s.epoch, s.train_l1, s.val_l1
        );
    })?;
    eprintln!(
        "copy-source baseline {:.5}, final validation {:.5}",
        report.baseline_l1,
        report.final_val_l1()
    );
    Ok(())
}

/// Validation config aligned with the model's resolution.
fn eval_config(common: &Common, model: &Model) -> CliResult<TrainConfig> {
    let mut cfg = load_config(common)?;
    cfg.model = model.config.clone();
    cfg.protocol.image_size = model.config.image_size;
    Ok(cfg)
}

pub fn eval(common: &Common, out: Option<&Path>) -> CliResult {
    let model = require_model(common, "eval")?;
    let cfg = eval_config(common, &model)?;
    let pairs = cfg.validation_set();
    let k = model.config.intrinsics();
    let (mut l1, mut s, mut te, mut re, mut posed) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for pair in &pairs {
        let syn = synthesize(&pair.source.image, &pair.t_st, &k, &model)?;
        l1 += nvs_core::metrics::l1_image(&syn.image, &pair.target.image)?;
        s += ssim(&syn.image, &pair.target.image)?;
        if let Some(depth) = &syn.depth {
            let mask = visibility_mask(&pair.source, &pair.target)?;
            if let Ok((t, r)) = pose_error_direct(&syn.flow, depth, &pair.source.depth, &k, &mask, &pair.t_st) {
                te += t;
                re += r;
                posed += 1;
            }
        }
    }
    let n = pairs.len() as f64;
    let df = evaluate_depth_flow(&model, &pairs)?;
    let mut csv = String::from("metric,value\n");
    let mut row = |name: &str, v: f64| writeln!(csv, "{name},{v:.6}").unwrap();
    row("pairs", n);
    row("copy_source_l1", copy_source_l1(&pairs)?);
    row("l1", l1 / n);
    row("ssim", s / n);
    row("flow_l1", df.flow_l1);
    row("flow_acc", df.flow_acc);
    if let (Some(dl), Some(da)) = (df.depth_l1, df.depth_acc) {
        row("depth_l1", dl);
        row("depth_acc", da);
    }
    if posed > 0 {
        row("pose_te", te / posed as f64);
        row("pose_re", re / posed as f64);
    }
    match out {
        Some(path) => write_file(path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn sweep(common: &Common, range: f64, step: f64, scenes: u64, elevation: f64, out: &Path) -> CliResult {
    let model = require_model(common, "sweep")?;
    if scenes == 0 {
        return Err(CliError::new("usage", "--scenes must be positive"));
    }
    let cfg = eval_config(common, &model)?;
    let seed = common.seed.unwrap_or(0);
    let sweeps = (0..scenes)
        .map(|i| {
            let scene = SceneSpec::random_objects(VALIDATION_SCENE_BASE + seed + i);
            evaluate_sweep(&model, &scene, &cfg.protocol, 0.0, elevation, range, step)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_file(out, sweep_csv(&average_sweeps(&sweeps)?).as_bytes())
}

/// Source view plus, for procedural scenes, what is needed to raycast
/// targets.
struct Source {
    image: Image,
    k: CameraIntrinsics,
    scene: Option<(SceneSpec, RigidTransform)>,
}

const ORBIT_RADIUS: f64 = 3.0;

fn build_source(args: &SourceArgs, seed: u64, model: Option<&Model>) -> CliResult<Source> {
    let size = model.map_or(args.size, |m| m.config.image_size);
    if let Some(path) = &args.image {
        let Some(model) = model else {
            return Err(CliError::new(
                "usage",
                "--image needs --checkpoint; the oracle requires a procedural scene",
            ));
        };
        let image = Image::load_png(path)?;
        let k = match &args.intrinsics {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
                parse_intrinsics(&text).map_err(|e| CliError::new("format", format!("{}: {e}", p.display())))?
            }
            None => model.config.intrinsics(),
        };
        if (image.width, image.height) != (size, size) || (k.width, k.height) != (size, size) {
            return Err(CliError::new(
                "invalid",
                format!(
                    "{}: model works at {size}x{size}, got {}x{}",
                    path.display(),
                    image.width,
                    image.height
                ),
            ));
        }
        return Ok(Source { image, k, scene: None });
    }
    if size == 0 {
        return Err(CliError::new("usage", "--size must be positive"));
    }
    let (spec, pose) = match args.scene.as_str() {
        "corridor" => (SceneSpec::corridor(seed), corridor_start()),
        _ => (
            SceneSpec::random_objects(seed),
            RigidTransform::orbit(args.azimuth.to_radians(), args.elevation.to_radians(), ORBIT_RADIUS),
        ),
    };
    let k = CameraIntrinsics::square(size);
    let view = raycast(&spec, &pose, &k, &RenderSettings::default());
    Ok(Source {
        image: view.image,
        k,
        scene: Some((spec, pose)),
    })
}

/// Frame for a target camera given in the source camera frame.
fn render_relative(src: &Source, model: Option<&Model>, rel: &RigidTransform) -> CliResult<(Image, Option<DepthMap>)> {
    let t_st = invert(rel);
    match (model, &src.scene) {
        (Some(m), _) => {
            let out = synthesize(&src.image, &t_st, &src.k, m)?;
            Ok((out.image, out.depth))
        }
        (None, Some((spec, pose))) => {
            let settings = RenderSettings {
                supersample: 1,
                ..RenderSettings::default()
            };
            let target: ViewSample = raycast(spec, &compose(pose, rel), &src.k, &settings);
            let image = synthesize_oracle(&src.image, &target.depth, &t_st, &src.k)?;
            Ok((image, Some(target.depth)))
        }
        (None, None) => Err(CliError::new("usage", "oracle mode needs a procedural scene")),
    }
}

fn write_frame(dir: &Path, i: usize, image: &Image, depth: Option<&DepthMap>) -> CliResult {
    image.save_png(&dir.join(format!("{i:06}.png")))?;
    if let Some(d) = depth {
        write_depth_pfm(d, &dir.join(format!("{i:06}.pfm")))?;
    }
    Ok(())
}

pub fn render(common: &Common, args: &SourceArgs, poses: &Path, out: &Path) -> CliResult {
    unused(common, "render", true, false)?;
    let model = load_model(common)?;
    if !poses.is_file() {
        return Err(CliError::new("io", format!("pose file not found: {}", poses.display())));
    }
    let poses = read_poses(poses)?;
    let src = build_source(args, common.seed.unwrap_or(0), model.as_ref())?;
    create_dir(out)?;
    for (i, rel) in poses.iter().enumerate() {
        let (image, depth) = render_relative(&src, model.as_ref(), rel)?;
        write_frame(out, i, &image, depth.as_ref())?;
    }
    Ok(())
}

/// Yaw about a point `radius` ahead of the camera, in the camera frame.
fn turn_about_ahead(deg: f64, radius: f64) -> RigidTransform {
    let pivot = Vector3::new(0.0, 0.0, radius);
    let r = RigidTransform::rot_y(deg.to_radians()).r;
    RigidTransform {
        r,
        t: pivot - r * pivot,
    }
}

pub fn orbit(
    common: &Common,
    args: &SourceArgs,
    views: usize,
    step: f64,
    overlay: &Path,
    frames: Option<&Path>,
) -> CliResult {
    unused(common, "orbit", true, false)?;
    if views == 0 {
        return Err(CliError::new("usage", "--views must be positive"));
    }
    if args.scene != "objects" && args.image.is_none() {
        return Err(CliError::new("usage", "orbit needs --scene objects or --image"));
    }
    let model = load_model(common)?;
    let src = build_source(args, common.seed.unwrap_or(0), model.as_ref())?;
    if let Some(dir) = frames {
        create_dir(dir)?;
    }
    let mut sum = vec![0.0f64; src.image.data.len()];
    for i in 0..views {
        let offset = i as f64 * step;
        let rel = match &src.scene {
            Some((_, pose)) => {
                let target = RigidTransform::orbit(
                    (args.azimuth + offset).to_radians(),
                    args.elevation.to_radians(),
                    ORBIT_RADIUS,
                );
                invert(&relative_source_to_target(pose, &target))
            }
            None => turn_about_ahead(-offset, ORBIT_RADIUS),
        };
        let (image, depth) = render_relative(&src, model.as_ref(), &rel)?;
        for (acc, v) in sum.iter_mut().zip(&image.data) {
            *acc += *v as f64;
        }
        if let Some(dir) = frames {
            write_frame(dir, i, &image, depth.as_ref())?;
        }
    }
    let mean = sum.iter().map(|v| (v / views as f64) as f32).collect();
    Image::new(src.image.width, src.image.height, src.image.channels, mean)?.save_png(overlay)?;
    Ok(())
}

pub fn serve(common: &Common, bind: Option<&str>) -> CliResult {
    unused(common, "serve", true, false)?;
    let model = load_model(common)?;
    let addr = nvs_service::bind_address(bind);
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new("internal", e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::new("io", format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::new("io", e.to_string()))?;
        eprintln!("listening on {local}");
        nvs_service::serve(listener, Arc::new(nvs_service::SessionStore::new(model)))
            .await
            .map_err(|e| CliError::new("io", e.to_string()))
    })
}

pub fn gradcheck(common: &Common) -> CliResult {
    unused(common, "gradcheck", true, true)?;
    let results = gradient_suite(common.seed.unwrap_or(0))?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:.3e} {verdict}", r.name, r.max_rel_error);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            "gradcheck",
            format!("relative error >= {GRADCHECK_TOLERANCE:e} in {}", failed.join(", ")),
        ))
    }
}

pub fn interpolate(common: &Common, seed_b: u64, steps: usize, out: &Path) -> CliResult {
    unused(common, "interpolate", true, false)?;
    let model = require_model(common, "interpolate")?;
    if model.config.variant != Variant::Full {
        return Err(CliError::new(
            "invalid",
            format!(
                "interpolation needs a full-variant model, checkpoint is {}",
                model.config.variant
            ),
        ));
    }
    if steps < 2 {
        return Err(CliError::new("usage", "--steps must be at least 2"));
    }
    let k = model.config.intrinsics();
    let pose = RigidTransform::orbit(0.0, 10f64.to_radians(), ORBIT_RADIUS);
    let encode = |seed: u64| {
        model.encode(&raycast(&SceneSpec::random_objects(seed), &pose, &k, &RenderSettings::default()).image)
    };
    let (za, zb) = (encode(common.seed.unwrap_or(0))?, encode(seed_b)?);
    create_dir(out)?;
    let c = &model.config;
    for i in 0..steps {
        let alpha = i as f32 / (steps - 1) as f32;
        let depth = model.decode_depth(&interpolate_latents(&za, &zb, alpha)?)?;
        colorize_depth(&depth.values, depth.width, depth.height, c.d_min, c.d_max)
            .save_png(&out.join(format!("{i:03}.png")))?;
        write_depth_pfm(&depth, &out.join(format!("{i:03}.pfm")))?;
    }
    Ok(())
}

pub fn gen_data(common: &Common, scenes: u64, out: &Path) -> CliResult {
    unused(common, "gen-data", false, true)?;
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(0);
    let protocol = &cfg.protocol;
    let k = protocol.intrinsics();
    let (images, depths): (PathBuf, PathBuf) = (out.join("images"), out.join("depths"));
    create_dir(&images)?;
    create_dir(&depths)?;
    let mut poses = Vec::new();
    let mut views_csv = String::from("index,scene,azimuth,elevation\n");
    let mut pairs = String::new();
    for scene in seed..seed + scenes {
        let spec = SceneSpec::random_objects(scene);
        let base = poses.len();
        for (az, el, pose) in protocol.views() {
            let i = poses.len();
            let view = raycast(&spec, &pose, &k, &protocol.render);
            view.image.save_png(&images.join(format!("{i:06}.png")))?;
            write_depth_pfm(&view.depth, &depths.join(format!("{i:06}.pfm")))?;
            writeln!(views_csv, "{i},{scene},{az},{el}").unwrap();
            poses.push(pose);
        }
        for (s, t) in protocol.pair_indices() {
            writeln!(pairs, "{} {}", base + s, base + t).unwrap();
        }
    }
    write_file(&out.join("poses.txt"), format_poses(&poses).as_bytes())?;
    write_file(&out.join("intrinsics.txt"), format_intrinsics(&k).as_bytes())?;
    write_file(&out.join("views.csv"), views_csv.as_bytes())?;
    write_file(&out.join("pairs.txt"), pairs.as_bytes())
}
