//! HTTP API for the listening test.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fac_core::evaluation::{Axis, RatingRecord};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::sessions::{ListeningSession, SampleEntry, SampleManifest};
use crate::store::{RatingStore, StoreError};

pub struct AppState {
    sessions: HashMap<String, ListeningSession>,
    samples: HashMap<String, SampleEntry>,
    store: Arc<RatingStore>,
}

impl AppState {
    pub fn new(
        manifest: SampleManifest,
        sessions: Vec<ListeningSession>,
        store: Arc<RatingStore>,
    ) -> Result<Self> {
        let samples: HashMap<String, SampleEntry> = manifest
            .samples
            .into_iter()
            .map(|s| (s.sample_id.clone(), s))
            .collect();
        for s in &sessions {
            for t in &s.tasks {
                anyhow::ensure!(
                    samples.contains_key(&t.sample_id),
                    "session {} references unknown sample {}",
                    s.listener_id,
                    t.sample_id
                );
            }
        }
        Ok(Self {
            sessions: sessions
                .into_iter()
                .map(|s| (s.listener_id.clone(), s))
                .collect(),
            samples,
            store,
        })
    }

    pub fn store(&self) -> &RatingStore {
        &self.store
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Scale {
    pub min: i64,
    pub max: i64,
}

/// Task as presented to the client: no system identity.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TaskView {
    pub index: usize,
    pub sample_id: String,
    pub axis: Axis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_sample_id: Option<String>,
    pub scale: Scale,
    pub completed: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SessionView {
    pub listener_id: String,
    pub tasks: Vec<TaskView>,
    pub completed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RatingRequest {
    pub listener_id: String,
    pub sample_id: String,
    pub axis: Axis,
    pub value: i64,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn session(State(st): State<Arc<AppState>>, Path(listener_id): Path<String>) -> Response {
    let Some(s) = st.sessions.get(&listener_id) else {
        return error(
            StatusCode::NOT_FOUND,
            format!("unknown listener {listener_id}"),
        );
    };
    let tasks: Vec<TaskView> = s
        .tasks
        .iter()
        .map(|t| {
            let (min, max) = t.axis.scale();
            TaskView {
                index: t.index,
                sample_id: t.sample_id.clone(),
                axis: t.axis,
                pair_sample_id: t.pair_sample_id.clone(),
                scale: Scale { min, max },
                completed: st.store.contains(&listener_id, &t.sample_id, t.axis),
            }
        })
        .collect();
    let completed = tasks.iter().filter(|t| t.completed).count();
    Json(SessionView {
        listener_id,
        tasks,
        completed,
    })
    .into_response()
}

async fn audio(State(st): State<Arc<AppState>>, Path(sample_id): Path<String>) -> Response {
    let Some(s) = st.samples.get(&sample_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown sample {sample_id}"));
    };
    match tokio::fs::read(&s.path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response(),
        Err(e) => {
            tracing::error!(sample = %sample_id, "cannot read audio: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "audio unavailable")
        }
    }
}

async fn rating(State(st): State<Arc<AppState>>, Json(req): Json<RatingRequest>) -> Response {
    let Some(session) = st.sessions.get(&req.listener_id) else {
        return error(
            StatusCode::NOT_FOUND,
            format!("unknown listener {}", req.listener_id),
        );
    };
    if session.task(&req.sample_id, req.axis).is_none() {
        return error(
            StatusCode::NOT_FOUND,
            format!(
                "no {} task for sample {} in this session",
                req.axis, req.sample_id
            ),
        );
    }
    let system_id = st.samples[&req.sample_id].system_id.clone();
    let rec = RatingRecord {
        listener_id: req.listener_id,
        sample_id: req.sample_id,
        system_id,
        axis: req.axis,
        value: req.value,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
    };
    match st.store.append(rec) {
        Ok(()) => Json(json!({ "status": "stored" })).into_response(),
        Err(StoreError::Duplicate) => {
            error(StatusCode::CONFLICT, StoreError::Duplicate.to_string())
        }
        Err(e @ StoreError::Invalid(_)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e @ StoreError::Io(_)) => {
            tracing::error!("{e}");
            error(
                StatusCode::INTERNAL_SERVER_ERROR,
                "could not persist rating",
            )
        }
    }
}

async fn export(State(st): State<Arc<AppState>>) -> Response {
    ([(header::CONTENT_TYPE, "text/csv")], st.store.export_csv()).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session/{listener_id}", get(session))
        .route("/api/audio/{sample_id}", get(audio))
        .route("/api/rating", post(rating))
        .route("/api/export.csv", get(export))
        .with_state(state)
}

/// Binds first so that an address in use is reported before serving starts.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot listen on {addr}"))
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> Result<()> {
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
