//! HTTP ranking service over an immutable model snapshot.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use docrec::corpus::{split_dataset, Corpus};
use docrec::embed::{DocumentBank, VectorStore};
use docrec::ranker::{DoctorTable, RankContext, Recommender};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::manifest::sha256_hex;

/// Everything needed to answer a query, built once at startup.
pub struct Snapshot {
    pub model_id: String,
    model: Recommender,
    table: DoctorTable,
    /// Tokenizer settings only; holds no documents.
    tokenizer: DocumentBank,
    departments: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub doctor_id: String,
    pub score: f64,
    pub department: String,
}

impl Snapshot {
    /// `pool_size` overrides the pool the model was trained with.
    pub fn build(
        corpus: &Corpus,
        checkpoint: &[u8],
        vectors: Option<Arc<VectorStore>>,
        pool_size: Option<usize>,
    ) -> docrec::Result<Self> {
        let loaded = Recommender::load(checkpoint, vectors)?;
        let mut model = loaded.model;
        if let Some(p) = pool_size {
            model.config.pool_size = p;
        }
        let split = split_dataset(corpus, loaded.split_seed);
        let bank = DocumentBank::build(corpus, &loaded.stoplist, model.config.encoder.hash_buckets);
        let ctx = RankContext::for_model(corpus, &split, &bank, &model.config);
        let table = model.doctor_table(&ctx)?;
        let departments = corpus
            .doctors()
            .iter()
            .map(|d| (d.doctor_id.clone(), d.department.clone()))
            .collect();
        Ok(Self {
            model_id: sha256_hex(checkpoint)[..16].to_string(),
            model,
            table,
            tokenizer: DocumentBank {
                buckets: bank.buckets,
                stoplist: bank.stoplist,
                profiles: Vec::new(),
                dialogues: Vec::new(),
                queries: Vec::new(),
            },
            departments,
        })
    }

    pub fn recommend(&self, query: &str, top_k: usize) -> docrec::Result<Vec<Recommendation>> {
        let doc = self.tokenizer.adhoc_query("query:adhoc", query);
        let ranked = self.model.rank(&self.table, &doc)?;
        Ok(ranked
            .top(top_k)
            .iter()
            .map(|(id, score)| Recommendation {
                doctor_id: id.clone(),
                score: *score,
                department: self.departments.get(id).cloned().unwrap_or_default(),
            })
            .collect())
    }
}

/// Empty until the snapshot finishes loading; never replaced afterwards.
pub type AppState = Arc<OnceLock<Snapshot>>;

#[derive(Debug, Deserialize)]
pub struct RecommendRequest {
    pub query: String,
    pub top_k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub results: Vec<Recommendation>,
    pub model_id: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn loading() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "model is still loading")
}

async fn health(State(state): State<AppState>) -> Response {
    match state.get() {
        Some(s) => Json(json!({ "status": "ok", "model_id": s.model_id })).into_response(),
        None => loading(),
    }
}

async fn recommend(State(state): State<AppState>, body: Result<Json<RecommendRequest>, JsonRejection>) -> Response {
    let Some(snapshot) = state.get() else {
        return loading();
    };
    let req = match body {
        Ok(Json(req)) => req,
        Err(rejection) => return error(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    if req.top_k == 0 {
        return error(StatusCode::BAD_REQUEST, "top_k must be at least 1");
    }
    if req.query.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "query is empty");
    }
    match snapshot.recommend(&req.query, req.top_k) {
        Ok(results) => Json(RecommendResponse {
            results,
            model_id: snapshot.model_id.clone(),
        })
        .into_response(),
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/recommend", post(recommend))
        .with_state(state)
}

/// Serves on `listener` while `load` builds the snapshot in the background.
/// A failed load shuts the server down and returns the load error.
pub async fn run<F>(listener: TcpListener, load: F) -> anyhow::Result<()>
where
    F: FnOnce() -> anyhow::Result<Snapshot> + Send + 'static,
{
    let state = AppState::default();
    let (fail_tx, fail_rx) = oneshot::channel::<anyhow::Error>();
    let target = state.clone();
    tokio::task::spawn_blocking(move || match load() {
        Ok(snapshot) => {
            eprintln!("model {} loaded", snapshot.model_id);
            let _ = target.set(snapshot);
        }
        Err(e) => {
            let _ = fail_tx.send(e);
        }
    });
    let failure = Arc::new(Mutex::new(None));
    let slot = failure.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            tokio::select! {
                Ok(e) = fail_rx => *slot.lock().expect("lock") = Some(e),
                _ = tokio::signal::ctrl_c() => {}
            }
        })
        .await?;
    let failed = failure.lock().expect("lock").take();
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
