//! Session registry and per-request frame synthesis, independent of HTTP.

use std::collections::hash_map::RandomState;
use std::collections::HashMap;
use std::hash::BuildHasher;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use base64::Engine;
use serde::{Deserialize, Serialize};

use nvs_core::geometry::{compose, invert};
use nvs_core::image::colorize_depth;
use nvs_core::scenes::{corridor_start, raycast, RenderSettings, SceneSpec};
use nvs_core::warp::{synthesize, synthesize_oracle};
use nvs_core::{CameraIntrinsics, Image, Model, RigidTransform};

use crate::protocol::FrameKind;
use crate::ServiceError;

/// Oracle sessions render at this size unless the request says otherwise.
pub const DEFAULT_ORACLE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Oracle,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    #[default]
    Objects,
    Corridor,
}

/// Body of `POST /session`. Exactly one of `seed` and `image_png` is
/// required; oracle mode needs `seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub scene: SceneKind,
    pub image_size: Option<usize>,
    /// source camera on the orbit rig, degrees; defaults 0 and 10
    pub azimuth_deg: Option<f64>,
    pub elevation_deg: Option<f64>,
    pub radius: Option<f64>,
    /// camera-to-world source pose, row-major `[R|t]`; overrides the rig
    pub source_pose: Option<Vec<f64>>,
    /// checkpoint path for learned mode; the server default is used if absent
    pub checkpoint: Option<String>,
    /// base64 PNG for learned mode
    pub image_png: Option<String>,
    /// `[fx, fy, cx, cy, width, height]` for an uploaded image
    pub intrinsics: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: String,
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
}

pub struct Session {
    pub id: String,
    pub mode: Mode,
    pub source: Image,
    pub intrinsics: CameraIntrinsics,
    /// camera-to-world pose of the source view when it comes from a scene
    pub source_pose: RigidTransform,
    scene: Option<SceneSpec>,
    render: RenderSettings,
    model: Option<Arc<Model>>,
    busy: Mutex<()>,
}

/// One encoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub png: Vec<u8>,
}

impl Session {
    /// Synthesizes the view at `pose`, the target camera expressed in the
    /// source camera frame. At most one synthesis runs per session.
    pub fn render(&self, pose: &RigidTransform, kind: FrameKind) -> Result<Frame, ServiceError> {
        pose.validate()
            .map_err(|e| ServiceError::BadRequest(format!("invalid pose: {e}")))?;
        let _guard = self.busy.lock().unwrap_or_else(|p| p.into_inner());
        let started = Instant::now();
        let t_st = invert(pose);
        let k = &self.intrinsics;
        let image = match (self.mode, kind) {
            (Mode::Oracle, _) => {
                let scene = self.scene.as_ref().expect("oracle sessions hold a scene");
                let depth_only = RenderSettings {
                    supersample: 1,
                    ..self.render
                };
                let target = raycast(scene, &compose(&self.source_pose, pose), k, &depth_only);
                if kind == FrameKind::Depth {
                    colorize_depth(
                        &target.depth.values,
                        k.width,
                        k.height,
                        self.render.d_min,
                        self.render.d_max,
                    )
                } else {
                    synthesize_oracle(&self.source, &target.depth, &t_st, k)?
                }
            }
            (Mode::Learned, _) => {
                let model = self.model.as_ref().expect("learned sessions hold a model");
                let out = synthesize(&self.source, &t_st, k, model)?;
                if kind == FrameKind::Depth {
                    let d = out
                        .depth
                        .ok_or_else(|| ServiceError::BadRequest("this model variant predicts no depth".into()))?;
                    colorize_depth(&d.values, d.width, d.height, model.config.d_min, model.config.d_max)
                } else {
                    out.image
                }
            }
        };
        let png = image.encode_png()?;
        tracing::debug!(session = %self.id, ?kind, ms = started.elapsed().as_secs_f64() * 1e3, "frame");
        Ok(Frame { kind, png })
    }
}

pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    default_model: Option<Arc<Model>>,
    models: Mutex<HashMap<PathBuf, Arc<Model>>>,
    ids: AtomicU64,
    salt: RandomState,
}

impl SessionStore {
    pub fn new(default_model: Option<Model>) -> Self {
        SessionStore {
            sessions: RwLock::new(HashMap::new()),
            default_model: default_model.map(Arc::new),
            models: Mutex::new(HashMap::new()),
            ids: AtomicU64::new(0),
            salt: RandomState::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {id}")))
    }

    pub fn remove(&self, id: &str) -> Result<(), ServiceError> {
        self.sessions
            .write()
            .unwrap()
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {id}")))
    }

    fn load_model(&self, path: &Path) -> Result<Arc<Model>, ServiceError> {
        let mut cache = self.models.lock().unwrap();
        if let Some(m) = cache.get(path) {
            return Ok(m.clone());
        }
        let model = Model::load(path)
            .map_err(|e| ServiceError::BadRequest(format!("unknown checkpoint {}: {e}", path.display())))?;
        let model = Arc::new(model);
        cache.insert(path.to_path_buf(), model.clone());
        Ok(model)
    }

    fn next_id(&self) -> String {
        let n = self.ids.fetch_add(1, Ordering::Relaxed);
        format!("{:016x}{:04x}", self.salt.hash_one(n), n & 0xffff)
    }

    pub fn create(&self, req: &CreateRequest) -> Result<CreateResponse, ServiceError> {
        let bad = |m: &str| Err(ServiceError::BadRequest(m.into()));
        let mode = req.mode.unwrap_or(Mode::Oracle);
        let model = match mode {
            Mode::Oracle => {
                if req.checkpoint.is_some() {
                    return bad("oracle sessions take no checkpoint");
                }
                None
            }
            Mode::Learned => Some(match &req.checkpoint {
                Some(p) => self.load_model(Path::new(p))?,
                None => match &self.default_model {
                    Some(m) => m.clone(),
                    None => return bad("learned mode needs a checkpoint and the server has no default model"),
                },
            }),
        };
        let render = RenderSettings::default();
        let (source, intrinsics, source_pose, scene) = match (req.seed, &req.image_png) {
            (Some(_), Some(_)) => return bad("give either seed or image_png, not both"),
            (None, None) => return bad("give seed or image_png"),
            (Some(seed), None) => {
                let size = match (&model, req.image_size) {
                    (Some(m), Some(s)) if s != m.config.image_size => {
                        return Err(ServiceError::BadRequest(format!(
                            "model works at {}px, requested {s}px",
                            m.config.image_size
                        )))
                    }
                    (Some(m), _) => m.config.image_size,
                    (None, s) => s.unwrap_or(DEFAULT_ORACLE_SIZE),
                };
                if !(8..=1024).contains(&size) {
                    return bad("image_size must be within 8..=1024");
                }
                let spec = match req.scene {
                    SceneKind::Objects => SceneSpec::random_objects(seed),
                    SceneKind::Corridor => SceneSpec::corridor(seed),
                };
                let pose = self.source_pose(req)?;
                let k = CameraIntrinsics::square(size);
                let view = raycast(&spec, &pose, &k, &render);
                (view.image, k, pose, Some(spec))
            }
            (None, Some(b64)) => {
                if mode == Mode::Oracle {
                    return bad("oracle mode renders a procedural scene and needs a seed");
                }
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| ServiceError::BadRequest(format!("image_png is not base64: {e}")))?;
                let image = Image::decode_png(&bytes)?;
                let k = match &req.intrinsics {
                    Some(v) => parse_intrinsics(v)?,
                    None => CameraIntrinsics::square(image.width),
                };
                if (k.width, k.height) != (image.width, image.height) {
                    return bad("intrinsics size does not match the image");
                }
                let m = model.as_ref().expect("learned mode");
                if image.width != m.config.image_size || image.height != m.config.image_size {
                    return Err(ServiceError::BadRequest(format!(
                        "model works at {}px, image is {}x{}",
                        m.config.image_size, image.width, image.height
                    )));
                }
                (image, k, RigidTransform::identity(), None)
            }
        };
        let id = self.next_id();
        let resp = CreateResponse {
            id: id.clone(),
            mode,
            width: intrinsics.width,
            height: intrinsics.height,
        };
        let session = Session {
            id: id.clone(),
            mode,
            source,
            intrinsics,
            source_pose,
            scene,
            render,
            model,
            busy: Mutex::new(()),
        };
        self.sessions.write().unwrap().insert(id, Arc::new(session));
        Ok(resp)
    }

    fn source_pose(&self, req: &CreateRequest) -> Result<RigidTransform, ServiceError> {
        if let Some(v) = &req.source_pose {
            let arr: [f64; 12] = v
                .as_slice()
                .try_into()
                .map_err(|_| ServiceError::BadRequest(format!("source_pose needs 12 numbers, got {}", v.len())))?;
            return RigidTransform::from_row_major(&arr)
                .map_err(|e| ServiceError::BadRequest(format!("invalid source_pose: {e}")));
        }
        if req.scene == SceneKind::Corridor && req.azimuth_deg.is_none() && req.elevation_deg.is_none() {
            return Ok(corridor_start());
        }
        let radius = req.radius.unwrap_or(3.0);
        if !(radius > 0.0) {
            return Err(ServiceError::BadRequest("radius must be positive".into()));
        }
        Ok(RigidTransform::orbit(
            req.azimuth_deg.unwrap_or(0.0).to_radians(),
            req.elevation_deg.unwrap_or(10.0).to_radians(),
            radius,
        ))
    }
}

fn parse_intrinsics(v: &[f64]) -> Result<CameraIntrinsics, ServiceError> {
    let bad = || ServiceError::BadRequest("intrinsics must be [fx, fy, cx, cy, width, height]".into());
    if v.len() != 6 || v[4].fract() != 0.0 || v[5].fract() != 0.0 || v[4] < 1.0 || v[5] < 1.0 {
        return Err(bad());
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
        .map_err(|e| ServiceError::BadRequest(e.to_string()))
}
