//! HTTP editing service over a trained model.
//!
//! JSON in and out, except `POST /decode`, which answers with the raw mesh
//! payload (`application/x-deform-mesh`: u32 vertex count, u32 face count,
//! f32 positions, u32 indices, little-endian). JSON responses carry the same
//! payload base64-encoded in their `mesh` field.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `GET /model/info` | | dims, template counts, direction labels |
//! | `POST /decode` | `{z? \| latent? \| sample:true, seed?, subdiv?}` | mesh payload |
//! | `POST /session` | `{z? \| latent?, subdiv?}` | `{session_id, z, mesh}` |
//! | `GET /session/{id}` | | `{session_id, z0, z, mesh}` |
//! | `DELETE /session/{id}` | | 204 |
//! | `POST /session/{id}/handles` | `{handles:[{vertex,dx,dy,dz}], commit?}` | `{z, mesh, residuals_*}` |
//! | `POST /session/{id}/semantic` | `{label, alpha, commit?}` | `{z, mesh}` |
//! | `POST /fit/landmarks` | `{landmarks:[{vertex,x,y}], subdiv?}` | `{z, pose, mesh, rmse}` |
//!
//! Errors: 400 malformed request, 404 unknown session or label, 409 session
//! busy, 422 numerical failure.

pub mod error;
pub mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use deform_core::fitting::{
    edit_point_handles, reconstruct_from_landmarks, EditConfig, HandleConstraint, Landmark, LandmarkSpec, Pose,
    ReconstructConfig,
};
use deform_core::model::HyperDecoder;
use deform_core::semantics::{apply_semantic, SemanticDirection};
use deform_core::{LatentCode, TriMesh, PAYLOAD_CONTENT_TYPE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::ApiError;
pub use session::{EditSession, SessionStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub session_ttl_secs: u64,
    /// Largest `subdiv` a request may ask for.
    pub max_subdiv: usize,
    pub edit: EditConfig,
    pub reconstruct: ReconstructConfig,
    /// Seed for `sample: true` decodes that don't pass their own.
    pub seed: u64,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_ttl_secs: 30 * 60,
            max_subdiv: 3,
            edit: EditConfig::default(),
            reconstruct: ReconstructConfig::default(),
            seed: 0,
            cors_origin: None,
        }
    }
}

/// Shared, read-only model plus the mutable session table.
pub struct AppState {
    model: HyperDecoder,
    directions: BTreeMap<String, SemanticDirection>,
    config: ServiceConfig,
    sessions: SessionStore,
    sampler: Mutex<ChaCha8Rng>,
}

impl AppState {
    pub fn new(model: HyperDecoder, directions: Vec<SemanticDirection>, config: ServiceConfig) -> Result<Self, String> {
        let m = model.latent_dim();
        let mut map = BTreeMap::new();
        for d in directions {
            if d.n.len() != m {
                return Err(format!("direction {:?} has dimension {}, model latent is {m}", d.label, d.n.len()));
            }
            if map.insert(d.label.clone(), d).is_some() {
                return Err("duplicate direction label".into());
            }
        }
        Ok(Self {
            sessions: SessionStore::new(Duration::from_secs(config.session_ttl_secs)),
            sampler: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            model,
            directions: map,
            config,
        })
    }

    pub fn model(&self) -> &HyperDecoder {
        &self.model
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    fn check_subdiv(&self, subdiv: usize) -> Result<(), ApiError> {
        if subdiv > self.config.max_subdiv {
            return Err(ApiError::bad_request(format!(
                "subdiv {subdiv} exceeds the limit of {}",
                self.config.max_subdiv
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<LatentCode, ApiError> {
        if z.len() != self.model.latent_dim() {
            return Err(ApiError::bad_request(format!(
                "latent has dimension {}, model expects {}",
                z.len(),
                self.model.latent_dim()
            )));
        }
        Ok(LatentCode(z.to_vec()))
    }

    fn decode(&self, z: &LatentCode, subdiv: usize) -> Result<TriMesh, ApiError> {
        let mesh = self.model.decode_mesh(z, subdiv)?;
        // The wire format is f32; anything outside its range would arrive as inf.
        if mesh.vertices().iter().flatten().any(|v| !(v.abs() <= f32::MAX as f64)) {
            return Err(ApiError::numerical("decoded mesh has coordinates outside the float32 range"));
        }
        Ok(mesh)
    }
}

pub type SharedState = Arc<AppState>;

pub fn router(state: SharedState) -> Router {
    let cors = match &state.config.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(AllowOrigin::any()),
    }
    .allow_methods([axum::http::Method::GET, axum::http::Method::POST, axum::http::Method::DELETE])
    .allow_headers([header::CONTENT_TYPE]);

    Router::new()
        .route("/model/info", get(model_info))
        .route("/decode", post(decode))
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session).delete(delete_session))
        .route("/session/{id}/handles", post(edit_handles))
        .route("/session/{id}/semantic", post(edit_semantic))
        .route("/fit/landmarks", post(fit_landmarks))
        .layer(cors)
        .with_state(state)
}

/// Serve until the listener fails, sweeping idle sessions once a minute.
pub async fn serve(listener: tokio::net::TcpListener, state: SharedState) -> std::io::Result<()> {
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            sweeper.sessions.evict_expired();
        }
    });
    axum::serve(listener, router(state)).await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

pub fn encode_mesh(mesh: &TriMesh) -> String {
    base64::engine::general_purpose::STANDARD.encode(mesh.to_payload())
}

pub fn decode_mesh(b64: &str) -> Result<TriMesh, String> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).map_err(|e| e.to_string())?;
    TriMesh::from_payload(&bytes).map_err(|e| e.to_string())
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionInfo {
    pub label: String,
    pub train_accuracy: f64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInfo {
    pub latent_dim: usize,
    pub latent_count: usize,
    pub vertex_count: usize,
    pub face_count: usize,
    pub param_count: usize,
    pub max_subdiv: usize,
    pub directions: Vec<DirectionInfo>,
    pub mesh_content_type: String,
}

async fn model_info(State(state): State<SharedState>) -> Json<ModelInfo> {
    let m = &state.model;
    Json(ModelInfo {
        latent_dim: m.latent_dim(),
        latent_count: m.latent_count(),
        vertex_count: m.template.vertex_count(),
        face_count: m.template.face_count(),
        param_count: deform_core::Decoder::param_count(&m.decoder),
        max_subdiv: state.config.max_subdiv,
        directions: state
            .directions
            .values()
            .map(|d| DirectionInfo {
                label: d.label.clone(),
                train_accuracy: d.train_accuracy,
                low_confidence: d.low_confidence,
            })
            .collect(),
        mesh_content_type: PAYLOAD_CONTENT_TYPE.into(),
    })
}

/// Which latent to use. At most one of `z`, `latent` and `sample` may be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LatentChoice {
    #[serde(default)]
    pub z: Option<Vec<f64>>,
    /// Index into the trained latent table.
    #[serde(default)]
    pub latent: Option<usize>,
    #[serde(default)]
    pub sample: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl LatentChoice {
    fn resolve(&self, state: &AppState, default_mean: bool) -> Result<LatentCode, ApiError> {
        let set = self.z.is_some() as u8 + self.latent.is_some() as u8 + self.sample as u8;
        if set > 1 {
            return Err(ApiError::bad_request("give at most one of z, latent and sample"));
        }
        if let Some(z) = &self.z {
            return state.check_latent(z);
        }
        if let Some(i) = self.latent {
            return Ok(state.model.latent(i)?);
        }
        if self.sample {
            let z = match self.seed {
                Some(s) => state.model.sample_latent(&mut ChaCha8Rng::seed_from_u64(s))?,
                None => state.model.sample_latent(&mut *state.sampler.lock().expect("sampler poisoned"))?,
            };
            return Ok(z);
        }
        if default_mean {
            return Ok(state.model.mean_latent()?);
        }
        Err(ApiError::bad_request("one of z, latent or sample is required"))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecodeRequest {
    #[serde(flatten)]
    pub latent: LatentChoice,
    #[serde(default)]
    pub subdiv: usize,
}

async fn decode(
    State(state): State<SharedState>,
    body: Result<Json<DecodeRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    state.check_subdiv(req.subdiv)?;
    let payload = blocking(move || {
        let z = req.latent.resolve(&state, false)?;
        Ok(state.decode(&z, req.subdiv)?.to_payload())
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, PAYLOAD_CONTENT_TYPE)], payload).into_response())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SessionRequest {
    #[serde(flatten)]
    pub latent: LatentChoice,
    #[serde(default)]
    pub subdiv: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionReply {
    pub session_id: String,
    pub z0: LatentCode,
    pub z: LatentCode,
    pub subdiv: usize,
    pub mesh: String,
}

async fn create_session(
    State(state): State<SharedState>,
    body: Result<Json<SessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionReply>), ApiError> {
    let Json(req) = body?;
    state.check_subdiv(req.subdiv)?;
    let reply = blocking(move || {
        let z = req.latent.resolve(&state, true)?;
        let mesh = state.decode(&z, req.subdiv)?;
        let s = state.sessions.create(z, req.subdiv);
        Ok(SessionReply { session_id: s.id, z0: s.z0, z: s.current, subdiv: s.subdiv, mesh: encode_mesh(&mesh) })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(reply)))
}

async fn get_session(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<SessionReply>, ApiError> {
    let handle = state.sessions.get(&id)?;
    blocking(move || {
        let s = session::with_session(&handle, |s| Ok(s.clone()))?;
        let mesh = state.decode(&s.current, s.subdiv)?;
        Ok(Json(SessionReply { session_id: s.id, z0: s.z0, z: s.current, subdiv: s.subdiv, mesh: encode_mesh(&mesh) }))
    })
    .await
}

async fn delete_session(State(state): State<SharedState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if state.sessions.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("unknown session {id}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandlesRequest {
    pub handles: Vec<HandleConstraint>,
    /// Make the result the session's new base latent.
    #[serde(default)]
    pub commit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandlesReply {
    pub z: LatentCode,
    pub mesh: String,
    pub loss: f64,
    pub residuals_before: Vec<f64>,
    pub residuals_after: Vec<f64>,
}

async fn edit_handles(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    body: Result<Json<HandlesRequest>, JsonRejection>,
) -> Result<Json<HandlesReply>, ApiError> {
    let Json(req) = body?;
    let handle = state.sessions.get(&id)?;
    blocking(move || {
        session::with_session(&handle, |s| {
            let r = edit_point_handles(&state.model, &s.z0, &req.handles, &state.config.edit)?;
            if !r.z.is_finite() || !r.loss.is_finite() {
                return Err(ApiError::numerical("handle edit produced a non-finite latent"));
            }
            let mesh = state.decode(&r.z, s.subdiv)?;
            s.current = r.z.clone();
            if req.commit {
                s.z0 = r.z.clone();
            }
            Ok(Json(HandlesReply {
                z: r.z,
                mesh: encode_mesh(&mesh),
                loss: r.loss,
                residuals_before: r.residuals_before,
                residuals_after: r.residuals_after,
            }))
        })
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticRequest {
    pub label: String,
    pub alpha: f64,
    #[serde(default)]
    pub commit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentReply {
    pub z: LatentCode,
    pub mesh: String,
}

/// Moves the session's current latent by `alpha` along the direction, so
/// `alpha` followed by `-alpha` returns to the starting shape.
async fn edit_semantic(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    body: Result<Json<SemanticRequest>, JsonRejection>,
) -> Result<Json<LatentReply>, ApiError> {
    let Json(req) = body?;
    if !req.alpha.is_finite() {
        return Err(ApiError::bad_request("alpha must be finite"));
    }
    let handle = state.sessions.get(&id)?;
    let dir = state
        .directions
        .get(&req.label)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown direction {:?}", req.label)))?;
    blocking(move || {
        session::with_session(&handle, |s| {
            let z = apply_semantic(&s.current, &dir, req.alpha)?;
            let mesh = state.decode(&z, s.subdiv)?;
            s.current = z.clone();
            if req.commit {
                s.z0 = z.clone();
            }
            Ok(Json(LatentReply { z, mesh: encode_mesh(&mesh) }))
        })
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarksRequest {
    pub landmarks: Vec<Landmark>,
    #[serde(default)]
    pub subdiv: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarksReply {
    pub z: LatentCode,
    pub pose: Pose,
    pub mesh: String,
    pub loss: f64,
    pub rmse: f64,
    pub hit_step_cap: bool,
}

async fn fit_landmarks(
    State(state): State<SharedState>,
    body: Result<Json<LandmarksRequest>, JsonRejection>,
) -> Result<Json<LandmarksReply>, ApiError> {
    let Json(req) = body?;
    state.check_subdiv(req.subdiv)?;
    blocking(move || {
        let spec = LandmarkSpec(req.landmarks);
        let r = reconstruct_from_landmarks(&state.model, &spec, &state.config.reconstruct)?;
        if !r.z.is_finite() || !r.loss.is_finite() {
            return Err(ApiError::numerical("reconstruction produced a non-finite latent"));
        }
        let mesh = state.decode(&r.z, req.subdiv)?;
        Ok(Json(LandmarksReply {
            z: r.z,
            pose: r.pose,
            mesh: encode_mesh(&mesh),
            loss: r.loss,
            rmse: r.rmse,
            hit_step_cap: r.hit_step_cap,
        }))
    })
    .await
}
