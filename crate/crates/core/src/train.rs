//! Training on procedural orbit pairs with an L1 reconstruction loss, plus
//! the evaluation protocols that run on trained models.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{depth_to_flow, relative_target_to_source, DepthMap, FlowField, RigidTransform};
use crate::image::Image;
use crate::io::{parse_value, KeyValues};
use crate::metrics::{acc_threshold, flow_acc, flow_l1, l1_image, ssim};
use crate::scenes::{
    raycast, relative_source_to_target, sample_orbit_pair, visibility_mask, OrbitProtocol, SceneSpec, ViewPair,
};
use crate::tae::{batch_images, bind, bind_constants, Model, TaeConfig};
use crate::warp::{forward_pipeline, synthesize};

/// Validation scene ids start here; training ids stay below it.
pub const VALIDATION_SCENE_BASE: u64 = 1 << 40;
const VALIDATION_SAMPLER_SEED: u64 = 0x7a1d_a7e5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: TaeConfig,
    pub train_scenes: u64,
    pub val_scenes: u64,
    /// fixed validation pairs drawn once from the validation scenes
    pub val_pairs: usize,
    pub pairs_per_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// write a checkpoint every this many epochs; 0 keeps only the final one
    pub checkpoint_every: usize,
    pub protocol: OrbitProtocol,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The toy setting: 32x32 images on the 20 degree orbit grid.
    fn default() -> Self {
        TrainConfig {
            model: TaeConfig::default(),
            train_scenes: 100_000,
            val_scenes: 16,
            val_pairs: 64,
            pairs_per_epoch: 2048,
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            protocol: OrbitProtocol::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let counts = [
            ("train_scenes", self.train_scenes as usize),
            ("val_scenes", self.val_scenes as usize),
            ("val_pairs", self.val_pairs),
            ("pairs_per_epoch", self.pairs_per_epoch),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.train_scenes > VALIDATION_SCENE_BASE {
            return Err(Error::InvalidArgument(format!(
                "train_scenes must not exceed {VALIDATION_SCENE_BASE} so validation scenes stay disjoint"
            )));
        }
        if self.protocol.image_size != self.model.image_size {
            return Err(Error::InvalidArgument(format!(
                "protocol renders {}px but the model works at {}px",
                self.protocol.image_size, self.model.image_size
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        Ok(())
    }

    /// Flat `key = value` config. Unknown keys are errors; missing keys keep
    /// the defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        let (mut az_step, mut el_step, mut el_max, mut max_sep) = (20.0, 10.0, 30.0, c.protocol.max_separation_deg);
        let mut supersample = c.protocol.render.supersample;
        for (line, key, value) in &kv.entries {
            let (line, key, value) = (*line, key.as_str(), value.as_str());
            if c.model.set_key(line, key, value)? {
                continue;
            }
            match key {
                "train_scenes" => c.train_scenes = parse_value(line, key, value)?,
                "val_scenes" => c.val_scenes = parse_value(line, key, value)?,
                "val_pairs" => c.val_pairs = parse_value(line, key, value)?,
                "pairs_per_epoch" => c.pairs_per_epoch = parse_value(line, key, value)?,
                "epochs" => c.epochs = parse_value(line, key, value)?,
                "batch_size" => c.batch_size = parse_value(line, key, value)?,
                "lr" => c.adam.lr = parse_value(line, key, value)?,
                "beta1" => c.adam.beta1 = parse_value(line, key, value)?,
                "beta2" => c.adam.beta2 = parse_value(line, key, value)?,
                "adam_eps" => c.adam.eps = parse_value(line, key, value)?,
                "checkpoint_every" => c.checkpoint_every = parse_value(line, key, value)?,
                "azimuth_step" => az_step = parse_value(line, key, value)?,
                "elevation_step" => el_step = parse_value(line, key, value)?,
                "elevation_max" => el_max = parse_value(line, key, value)?,
                "max_separation" => max_sep = parse_value(line, key, value)?,
                "supersample" => supersample = parse_value(line, key, value)?,
                "seed" => c.seed = parse_value(line, key, value)?,
                _ => {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        if !(az_step > 0.0 && el_step > 0.0 && el_max >= 0.0) {
            return Err(Error::InvalidArgument("orbit grid steps must be positive".into()));
        }
        c.protocol = OrbitProtocol::grid(az_step, el_step, el_max, max_sep, c.model.image_size);
        c.protocol.render.supersample = supersample;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn validation_scene(&self, i: u64) -> SceneSpec {
        SceneSpec::random_objects(VALIDATION_SCENE_BASE + i % self.val_scenes)
    }

    /// The fixed validation pairs (independent of the training seed).
    pub fn validation_set(&self) -> Vec<ViewPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_SAMPLER_SEED);
        (0..self.val_pairs as u64)
            .map(|i| sample_orbit_pair(&self.validation_scene(i), &self.protocol, &mut rng))
            .collect()
    }
}

/// Draws training pairs from random training scenes.
pub struct PairSampler {
    rng: ChaCha8Rng,
    scenes: u64,
    protocol: OrbitProtocol,
}

impl PairSampler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PairSampler {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a_5eed),
            scenes: cfg.train_scenes,
            protocol: cfg.protocol.clone(),
        }
    }

    pub fn next_pair(&mut self) -> ViewPair {
        let scene = SceneSpec::random_objects(self.rng.random_range(0..self.scenes));
        sample_orbit_pair(&scene, &self.protocol, &mut self.rng)
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<ViewPair> {
        (0..n).map(|_| self.next_pair()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// mean loss over the epoch's optimizer steps
    pub train_l1: f64,
    pub val_l1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// copy-source L1 on the validation pairs
    pub baseline_l1: f64,
    /// validation L1 of the freshly initialized model
    pub initial_val_l1: f64,
    pub first_batch_loss: f32,
    /// every optimizer step's loss, in order
    pub losses: Vec<f32>,
    pub model: Model,
}

impl TrainReport {
    pub fn final_val_l1(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_l1, |e| e.val_l1)
    }

    /// `epoch,train_l1,val_l1,baseline_l1` with epoch 0 the untrained model.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_l1,val_l1,baseline_l1\n");
        writeln!(s, "0,,{:.6},{:.6}", self.initial_val_l1, self.baseline_l1).unwrap();
        for e in &self.epochs {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                e.epoch, e.train_l1, e.val_l1, self.baseline_l1
            )
            .unwrap();
        }
        s
    }
}

/// Mean `L1(source, target)` over pairs.
pub fn copy_source_l1(pairs: &[ViewPair]) -> Result<f64> {
    let mut sum = 0.0;
    for p in pairs {
        sum += l1_image(&p.source.image, &p.target.image)?;
    }
    Ok(sum / pairs.len().max(1) as f64)
}

/// Mean synthesis L1 over pairs, evaluated in batches.
pub fn validation_l1(model: &Model, pairs: &[ViewPair], batch: usize) -> Result<f64> {
    let k = model.config.intrinsics();
    let mut sum = 0.0;
    for chunk in pairs.chunks(batch.max(1)) {
        let tape = Tape::new();
        let p = bind_constants(&tape, &model.params);
        let (src, tgt, ts) = stack(chunk)?;
        let out = forward_pipeline(&model.config, &p, tape.constant(src), &ts, &k)?;
        let per = tgt.len() / chunk.len();
        let pred = out.image.value();
        for b in 0..chunk.len() {
            let r = b * per..(b + 1) * per;
            let s: f64 = pred.data()[r.clone()]
                .iter()
                .zip(&tgt.data()[r])
                .map(|(a, b)| (a - b).abs() as f64)
                .sum();
            sum += s / per as f64;
        }
    }
    Ok(sum / pairs.len().max(1) as f64)
}

fn stack(pairs: &[ViewPair]) -> Result<(Tensor, Tensor, Vec<RigidTransform>)> {
    let src: Vec<&Image> = pairs.iter().map(|p| &p.source.image).collect();
    let tgt: Vec<&Image> = pairs.iter().map(|p| &p.target.image).collect();
    Ok((
        batch_images(&src)?,
        batch_images(&tgt)?,
        pairs.iter().map(|p| p.t_st).collect(),
    ))
}

/// Runs the training loop. With `out_dir`, writes `metrics.csv`, periodic
/// `epoch_<n>.nvsc` checkpoints and `final.nvsc`. `progress` sees each
/// epoch as it completes.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>, mut progress: impl FnMut(&EpochStats)) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut store = cfg.model.init_params(cfg.seed)?;
    let val = cfg.validation_set();
    let baseline_l1 = copy_source_l1(&val)?;
    let initial_val_l1 = validation_l1(&Model::new(cfg.model.clone(), store.clone())?, &val, cfg.batch_size)?;
    let k = cfg.model.intrinsics();
    let mut sampler = PairSampler::new(cfg);
    let steps = cfg.pairs_per_epoch.div_ceil(cfg.batch_size);
    let mut losses = Vec::with_capacity(steps * cfg.epochs);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0f64;
        for _ in 0..steps {
            let batch = sampler.next_batch(cfg.batch_size);
            let (src, tgt, ts) = stack(&batch)?;
            let tape = Tape::new();
            let p = bind(&tape, &store)?;
            let out = forward_pipeline(&cfg.model, &p, tape.constant(src), &ts, &k)?;
            let loss = out.image.l1_loss(tape.constant(tgt))?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value,
                    step: losses.len(),
                });
            }
            losses.push(value);
            sum += value as f64;
            tape.backward(loss)?.apply_to(&mut store);
            store.adam_step(&cfg.adam)?;
        }
        let snapshot = Model::new(cfg.model.clone(), store.clone())?;
        let stats = EpochStats {
            epoch,
            train_l1: sum / steps as f64,
            val_l1: validation_l1(&snapshot, &val, cfg.batch_size)?,
        };
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                snapshot.save(&dir.join(format!("epoch_{epoch}.nvsc")))?;
            }
        }
        progress(&stats);
        epochs.push(stats);
    }
    let model = Model::new(cfg.model.clone(), store)?;
    let report = TrainReport {
        epochs,
        baseline_l1,
        initial_val_l1,
        first_batch_loss: losses[0],
        losses,
        model,
    };
    if let Some(dir) = out_dir {
        report.model.save(&dir.join("final.nvsc"))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub angle_deg: f64,
    pub l1: f64,
    pub ssim: f64,
}

/// Azimuth offsets `-range..=range` in `step` increments, in degrees.
pub fn sweep_angles(range_deg: f64, step_deg: f64) -> Result<Vec<f64>> {
    if !(step_deg > 0.0 && range_deg >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bad sweep range {range_deg} / step {step_deg}"
        )));
    }
    let n = (range_deg / step_deg + 1e-9).floor() as i64;
    Ok((-n..=n).map(|i| i as f64 * step_deg).collect())
}

/// Synthesizes views at azimuth offsets around a source orbit view and scores
/// them against the raycast ground truth. Offset 0 still runs the model.
pub fn evaluate_sweep(
    model: &Model,
    scene: &SceneSpec,
    protocol: &OrbitProtocol,
    source_az_deg: f64,
    source_el_deg: f64,
    range_deg: f64,
    step_deg: f64,
) -> Result<Vec<SweepRow>> {
    let k = model.config.intrinsics();
    let pose = |az: f64| RigidTransform::orbit(az.to_radians(), source_el_deg.to_radians(), protocol.radius);
    let source = raycast(scene, &pose(source_az_deg), &k, &protocol.render);
    sweep_angles(range_deg, step_deg)?
        .into_iter()
        .map(|angle| {
            let target = raycast(scene, &pose(source_az_deg + angle), &k, &protocol.render);
            let t_st = relative_source_to_target(&source.pose, &target.pose);
            let out = synthesize(&source.image, &t_st, &k, model)?;
            Ok(SweepRow {
                angle_deg: angle,
                l1: l1_image(&out.image, &target.image)?,
                ssim: ssim(&out.image, &target.image)?,
            })
        })
        .collect()
}

/// Per-angle mean of sweeps taken over the same angles.
pub fn average_sweeps(sweeps: &[Vec<SweepRow>]) -> Result<Vec<SweepRow>> {
    let first = sweeps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no sweeps to average".into()))?;
    if sweeps
        .iter()
        .any(|s| s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.angle_deg != b.angle_deg))
    {
        return Err(Error::InvalidArgument("sweeps cover different angles".into()));
    }
    let n = sweeps.len() as f64;
    Ok((0..first.len())
        .map(|i| SweepRow {
            angle_deg: first[i].angle_deg,
            l1: sweeps.iter().map(|s| s[i].l1).sum::<f64>() / n,
            ssim: sweeps.iter().map(|s| s[i].ssim).sum::<f64>() / n,
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("angle,l1,ssim\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6}", r.angle_deg, r.l1, r.ssim).unwrap();
    }
    s
}

/// Mean L1 at off-grid angles divided by mean L1 at angles that are
/// multiples of `grid_step_deg`.
pub fn snapping_ratio(rows: &[SweepRow], grid_step_deg: f64) -> Result<f64> {
    let on_grid = |a: f64| {
        let r = a / grid_step_deg;
        (r - r.round()).abs() < 1e-9
    };
    let mean = |grid: bool| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| on_grid(r.angle_deg) == grid)
            .map(|r| r.l1)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    match (mean(false), mean(true)) {
        (Some(off), Some(on)) if on > 0.0 => Ok(off / on),
        _ => Err(Error::InvalidArgument(
            "sweep needs both grid and off-grid angles".into(),
        )),
    }
}

/// Depth and correspondence accuracy against the scene oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthFlowReport {
    pub flow_l1: f64,
    pub flow_acc: f64,
    /// `None` for the direct-flow variant
    pub depth_l1: Option<f64>,
    pub depth_acc: Option<f64>,
}

pub const ACC_DELTA: f64 = 1.05;

/// Scores one prediction on the pair's mutually visible foreground.
pub fn depth_flow_metrics(depth: Option<&DepthMap>, flow: &FlowField, pair: &ViewPair) -> Result<DepthFlowReport> {
    let k = &pair.target.intrinsics;
    let truth = depth_to_flow(
        &pair.target.depth,
        k,
        &relative_target_to_source(&pair.source.pose, &pair.target.pose),
    )?;
    let far = pair.target.depth.values.iter().copied().fold(f32::MIN, f32::max);
    let mask: Vec<bool> = visibility_mask(&pair.source, &pair.target)?
        .into_iter()
        .zip(&pair.target.depth.values)
        .map(|(m, &d)| m && d < far)
        .collect();
    let (depth_l1, depth_acc) = match depth {
        Some(d) => {
            let (mut p, mut t) = (Vec::new(), Vec::new());
            for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                p.push(d.values[i]);
                t.push(pair.target.depth.values[i]);
            }
            if p.is_empty() {
                return Err(Error::InvalidArgument("pair has no mutually visible foreground".into()));
            }
            let l1 = p.iter().zip(&t).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / p.len() as f64;
            (Some(l1), Some(acc_threshold(&p, &t, ACC_DELTA)?))
        }
        None => (None, None),
    };
    Ok(DepthFlowReport {
        flow_l1: flow_l1(flow, &truth, &mask)?,
        flow_acc: flow_acc(flow, &truth, &mask, ACC_DELTA)?,
        depth_l1,
        depth_acc,
    })
}

/// Averages [`depth_flow_metrics`] over pairs, skipping pairs without
/// visible foreground.
pub fn evaluate_depth_flow(model: &Model, pairs: &[ViewPair]) -> Result<DepthFlowReport> {
    let k = model.config.intrinsics();
    let mut reports = Vec::new();
    for pair in pairs {
        let out = synthesize(&pair.source.image, &pair.t_st, &k, model)?;
        match depth_flow_metrics(out.depth.as_ref(), &out.flow, pair) {
            Ok(r) => reports.push(r),
            Err(Error::InvalidArgument(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no pair has oracle-visible foreground".into()));
    }
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&DepthFlowReport) -> Option<f64>| reports.iter().map(f).sum::<Option<f64>>().map(|s| s / n);
    Ok(DepthFlowReport {
        flow_l1: avg(&|r| Some(r.flow_l1)).unwrap(),
        flow_acc: avg(&|r| Some(r.flow_acc)).unwrap(),
        depth_l1: avg(&|r| r.depth_l1),
        depth_acc: avg(&|r| r.depth_acc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tae::Variant;

    pub(crate) fn smoke_config() -> TrainConfig {
        let model = TaeConfig {
            n: 8,
            image_size: 16,
            enc_channels: vec![4, 4],
            dec_channels: vec![4, 4],
            ..TaeConfig::default()
        };
        TrainConfig {
            protocol: OrbitProtocol::grid(20.0, 10.0, 30.0, 40.0, 16),
            model,
            train_scenes: 1,
            val_scenes: 1,
            val_pairs: 2,
            pairs_per_epoch: 2,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_run_writes_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 1,
            ..smoke_config()
        };
        let report = train(&cfg, Some(dir.path()), |_| {}).unwrap();
        assert!(report.first_batch_loss.is_finite());
        assert!(dir.path().join("epoch_1.nvsc").exists());
        let back = Model::load(&dir.path().join("final.nvsc")).unwrap();
        let val = cfg.validation_set();
        assert_eq!(
            validation_l1(&back, &val, 2).unwrap(),
            validation_l1(&report.model, &val, 2).unwrap()
        );
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("epoch,train_l1,val_l1,baseline_l1\n0,,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn first_batch_loss_matches_independent_forward() {
        let cfg = smoke_config();
        let report = train(&cfg, None, |_| {}).unwrap();
        let model = Model::init(cfg.model.clone(), cfg.seed).unwrap();
        let batch = PairSampler::new(&cfg).next_batch(cfg.batch_size);
        let k = cfg.model.intrinsics();
        let mut sum = 0.0;
        for pair in &batch {
            let out = synthesize(&pair.source.image, &pair.t_st, &k, &model).unwrap();
            sum += l1_image(&out.image, &pair.target.image).unwrap();
        }
        let hand = sum / batch.len() as f64;
        assert!(
            (report.first_batch_loss as f64 - hand).abs() < 1e-5,
            "{} vs {hand}",
            report.first_batch_loss
        );
    }

    #[test]
    fn config_parsing() {
        let kv =
            KeyValues::parse("variant = no_tae\nepochs = 3\nimage_size = 16\nlr = 0.01\nazimuth_step = 30\n").unwrap();
        let c = TrainConfig::from_key_values(&kv).unwrap();
        assert_eq!(c.model.variant, Variant::NoTae);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.adam.lr, 0.01);
        assert_eq!(c.protocol.views().len(), 12 * 4);
        assert_eq!(c.protocol.image_size, 16);
        let err =
            TrainConfig::from_key_values(&KeyValues::parse("epochs = 1\nlearning_rate = 3").unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        assert!(TrainConfig::from_key_values(&KeyValues::parse("epochs = 0").unwrap()).is_err());
        assert!(TrainConfig::from_key_values(&KeyValues::parse("epochs = many").unwrap()).is_err());
    }

    #[test]
    fn validation_scenes_are_disjoint() {
        let cfg = TrainConfig::default();
        assert!(cfg.train_scenes <= VALIDATION_SCENE_BASE);
        assert!(cfg.validation_scene(0).seed >= VALIDATION_SCENE_BASE);
        assert_eq!(cfg.validation_set().len(), cfg.val_pairs);
    }

    #[test]
    fn sweep_angle_grid() {
        let a = sweep_angles(40.0, 1.0).unwrap();
        assert_eq!(a.len(), 81);
        assert_eq!((a[0], a[40], a[80]), (-40.0, 0.0, 40.0));
        assert!(sweep_angles(40.0, 0.0).is_err());
        let rows: Vec<SweepRow> = a
            .iter()
            .map(|&angle_deg| SweepRow {
                angle_deg,
                l1: if angle_deg % 20.0 == 0.0 { 0.1 } else { 0.3 },
                ssim: 0.0,
            })
            .collect();
        assert!((snapping_ratio(&rows, 20.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_zero_angle_is_self_reconstruction() {
        let cfg = smoke_config();
        let model = Model::init(cfg.model.clone(), 5).unwrap();
        let scene = cfg.validation_scene(0);
        let rows = evaluate_sweep(&model, &scene, &cfg.protocol, 20.0, 10.0, 2.0, 1.0).unwrap();
        assert_eq!(rows.len(), 5);
        let k = cfg.model.intrinsics();
        let pose = RigidTransform::orbit(20f64.to_radians(), 10f64.to_radians(), cfg.protocol.radius);
        let view = raycast(&scene, &pose, &k, &cfg.protocol.render);
        let own = synthesize(&view.image, &RigidTransform::identity(), &k, &model).unwrap();
        assert_eq!(rows[2].l1, l1_image(&own.image, &view.image).unwrap());
        let avg = average_sweeps(&[rows.clone(), rows.clone()]).unwrap();
        assert_eq!(avg, rows);
        assert!(average_sweeps(&[rows.clone(), rows[1..].to_vec()]).is_err());
        assert!(sweep_csv(&rows).starts_with("angle,l1,ssim\n-2,"));
    }

    #[test]
    fn oracle_prediction_scores_perfectly() {
        let cfg = smoke_config();
        let pair = &cfg.validation_set()[0];
        let k = &pair.target.intrinsics;
        let flow = depth_to_flow(
            &pair.target.depth,
            k,
            &relative_target_to_source(&pair.source.pose, &pair.target.pose),
        )
        .unwrap();
        match depth_flow_metrics(Some(&pair.target.depth), &flow, pair) {
            Ok(r) => {
                assert_eq!(r.depth_acc, Some(1.0));
                assert_eq!(r.depth_l1, Some(0.0));
                assert_eq!(r.flow_l1, 0.0);
                assert_eq!(r.flow_acc, 1.0);
            }
            Err(e) => panic!("{e}"),
        }
    }
}
