//! JSON-over-HTTP session service for playing blicket tasks.
//!
//! Routes:
//! - `GET /conditions`
//! - `POST /sessions`
//! - `GET /sessions/{id}`
//! - `POST /sessions/{id}/interventions`
//! - `GET /sessions/{id}/beliefs`
//! - `POST /sessions/{id}/finish`

pub mod error;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use blicket_core::io::{builtin_conditions, write_atomic};
use blicket_core::{Condition, Experiment, TaskRole};
use serde::{Deserialize, Serialize};

pub use error::ApiError;
pub use session::{
    BeliefsResponse, CreateRequest, FinishResponse, InterventionResponse, Session, SessionView,
};

type Shared<T> = Arc<Mutex<T>>;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Shared<HashMap<String, Shared<Session>>>,
    conditions: Arc<Vec<Condition>>,
    checkpoint_dir: Option<Arc<PathBuf>>,
}

impl AppState {
    pub fn new(conditions: Vec<Condition>, checkpoint_dir: Option<PathBuf>) -> Self {
        AppState {
            sessions: Arc::default(),
            conditions: Arc::new(conditions),
            checkpoint_dir: checkpoint_dir.map(Arc::new),
        }
    }

    /// Built-in conditions of both experiments, no checkpointing.
    pub fn builtin() -> Self {
        AppState::new(builtin_conditions(), None)
    }

    fn session(&self, id: &str) -> Result<Shared<Session>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    fn checkpoint(&self, session: &Session) -> Result<(), ApiError> {
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join(format!("{}.jsonl", session.id()));
            write_atomic(&path, session.export().as_bytes())?;
        }
        Ok(())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/conditions", get(list_conditions))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/interventions", post(intervene))
        .route("/sessions/{id}/beliefs", get(beliefs))
        .route("/sessions/{id}/finish", post(finish))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskShape {
    pub task_role: TaskRole,
    pub n_blocks: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub experiment: Experiment,
    pub condition_id: String,
    pub tasks: Vec<TaskShape>,
}

async fn list_conditions(State(state): State<AppState>) -> Json<Vec<ConditionSummary>> {
    Json(
        state
            .conditions
            .iter()
            .map(|c| ConditionSummary {
                experiment: c.experiment,
                condition_id: c.id.clone(),
                tasks: c
                    .tasks
                    .iter()
                    .map(|t| TaskShape {
                        task_role: t.role,
                        n_blocks: t.n_blocks,
                        limit: t.intervention_limit,
                    })
                    .collect(),
            })
            .collect(),
    )
}

async fn create_session(
    State(state): State<AppState>,
    Json(request): Json<CreateRequest>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let condition = state
        .conditions
        .iter()
        .find(|c| c.id == request.condition_id)
        .cloned()
        .ok_or_else(|| ApiError::BadRequest(format!("unknown condition `{}`", request.condition_id)))?;
    let id = uuid::Uuid::new_v4().to_string();
    let seed = request.seed.unwrap_or_else(rand::random);
    let session = Session::new(id.clone(), condition, &request, seed)?;
    let view = session.view();
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id)?;
    let view = session.lock().expect("session poisoned").view();
    Ok(Json(view))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub intervention: Vec<usize>,
}

async fn intervene(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<InterventionRequest>,
) -> Result<Json<InterventionResponse>, ApiError> {
    let session = state.session(&id)?;
    let mut session = session.lock().expect("session poisoned");
    let response = session.intervene(&request.intervention)?;
    state.checkpoint(&session)?;
    Ok(Json(response))
}

async fn beliefs(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<BeliefsResponse>, ApiError> {
    let session = state.session(&id)?;
    let response = session.lock().expect("session poisoned").beliefs()?;
    Ok(Json(response))
}

async fn finish(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<FinishResponse>, ApiError> {
    let session = state
        .sessions
        .lock()
        .expect("session table poisoned")
        .remove(&id)
        .ok_or_else(|| ApiError::UnknownSession(id.clone()))?;
    let session = session.lock().expect("session poisoned");
    state.checkpoint(&session)?;
    Ok(Json(session.finish()))
}
