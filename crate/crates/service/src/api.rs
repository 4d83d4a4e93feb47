//! HTTP endpoints.
//!
//! Every handler is a pure function of the request and the shared, immutable
//! engine. Monte Carlo work runs on a bounded rayon pool off the async runtime.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Query, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dtraj_core::document::{to_document, trajectory_from_records, EventRecord, TrajectoryDocument};
use dtraj_core::generator::CodeOrTrajectoryError;
use dtraj_core::{
    Engine, GenerateError, GenerationParams, Mask, TokenId, Trajectory, VocabError, Vocabulary,
};

/// Seeds generated by the server stay below 2^53 so browser clients can
/// echo them back without precision loss.
const MAX_SERVER_SEED: u64 = (1 << 53) - 1;
const DEFAULT_TOP_K: usize = 10;
const DEFAULT_RISK_SAMPLES: usize = 100;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub pool: Arc<rayon::ThreadPool>,
    pub max_samples_per_request: usize,
}

pub fn router(state: AppState, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/vocab", get(vocab))
        .route("/generate", post(generate))
        .route("/risk", post(risk))
        .route("/distribution", post(distribution))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        %method,
        path,
        status = resp.status().as_u16(),
        elapsed_ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    resp
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    fn unknown_code(code: &str) -> Self {
        Self::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "unknown_code",
            format!("unknown code {code:?}"),
        )
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, message = %self.message, "request failed");
        }
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<VocabError> for ApiError {
    fn from(e: VocabError) -> Self {
        match e {
            VocabError::UnknownCode(c) => Self::unknown_code(&c),
            other => Self::bad_request(other.to_string()),
        }
    }
}

impl From<CodeOrTrajectoryError> for ApiError {
    fn from(e: CodeOrTrajectoryError) -> Self {
        match e {
            CodeOrTrajectoryError::Code(c) => c.into(),
            CodeOrTrajectoryError::Trajectory(t) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_trajectory", t.to_string())
            }
        }
    }
}

impl From<GenerateError> for ApiError {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::Model(_) | GenerateError::Sample(_) => Self::internal(e.to_string()),
            other => Self::new(StatusCode::BAD_REQUEST, "validation", other.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let bytes = body.map_err(|r| {
        let status = r.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE {
            "body_too_large"
        } else {
            "invalid_request"
        };
        ApiError::new(status, code, r.body_text())
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsBody {
    pub seed: Option<u64>,
    pub max_age_years: Option<f64>,
    pub termination_codes: Option<Vec<String>>,
    pub max_steps: Option<usize>,
    /// Replaces the default mask (padding and static tokens).
    pub mask_codes: Option<Vec<String>>,
}

impl ParamsBody {
    fn resolve(&self, vocab: &Vocabulary) -> Result<GenerationParams, ApiError> {
        let seed = self
            .seed
            .unwrap_or_else(|| rand::random::<u64>() & MAX_SERVER_SEED);
        let mut p = GenerationParams::defaults(vocab, seed);
        if let Some(a) = self.max_age_years {
            p.max_age_years = a;
        }
        if let Some(s) = self.max_steps {
            p.max_steps = s;
        }
        if let Some(codes) = &self.termination_codes {
            p.termination_tokens = encode_all(codes, vocab)?;
        }
        if let Some(codes) = &self.mask_codes {
            p.mask = encode_all(codes, vocab)?;
        }
        p.validate(vocab)?;
        Ok(p)
    }
}

fn encode_all(codes: &[String], vocab: &Vocabulary) -> Result<BTreeSet<TokenId>, ApiError> {
    codes.iter().map(|c| Ok(vocab.encode(c)?)).collect()
}

fn check_samples(n: usize, limit: usize) -> Result<(), ApiError> {
    if n == 0 {
        return Err(ApiError::bad_request("n_samples must be at least 1"));
    }
    if n > limit {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "too_many_samples",
            format!("n_samples {n} exceeds the per-request limit {limit}"),
        ));
    }
    Ok(())
}

async fn run_blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, GenerateError> + Send + 'static,
{
    let engine = state.engine.clone();
    let pool = state.pool.clone();
    tokio::task::spawn_blocking(move || pool.install(|| f(&engine)))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map_err(ApiError::from)
}

#[derive(Serialize)]
struct ModelInfo {
    vocab_size: usize,
    n_layer: usize,
    n_head: usize,
    n_embd: usize,
    max_seq: usize,
    age_scale: f64,
}

#[derive(Serialize)]
pub struct HealthResponse {
    status: &'static str,
    model: ModelInfo,
    vocab_size: usize,
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    let c = state.engine.model().config();
    Json(HealthResponse {
        status: "ok",
        model: ModelInfo {
            vocab_size: c.vocab_size,
            n_layer: c.n_layer,
            n_head: c.n_head,
            n_embd: c.n_embd,
            max_seq: c.max_seq,
            age_scale: c.age_scale,
        },
        vocab_size: state.engine.vocab().len(),
    })
}

#[derive(Deserialize)]
pub struct VocabQuery {
    q: Option<String>,
}

#[derive(Serialize)]
struct VocabEntry<'a> {
    id: TokenId,
    code: &'a str,
    kind: &'static str,
    label: &'a str,
}

async fn vocab(
    State(state): State<AppState>,
    query: Result<Query<VocabQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(query) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let v = state.engine.vocab();
    let tokens: Vec<VocabEntry> = v
        .search(query.q.as_deref().unwrap_or(""))
        .map(|t| VocabEntry {
            id: t.id,
            code: &t.code,
            kind: t.kind.as_str(),
            label: &t.label,
        })
        .collect();
    Ok(Json(json!({ "size": v.len(), "tokens": tokens })).into_response())
}

fn default_one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    events: Vec<EventRecord>,
    #[serde(default)]
    params: ParamsBody,
    #[serde(default = "default_one")]
    n_samples: usize,
}

#[derive(Serialize)]
pub struct GenerateResponse {
    seed: u64,
    n_samples: usize,
    samples: Vec<TrajectoryDocument>,
}

fn input_trajectory(events: &[EventRecord], vocab: &Vocabulary) -> Result<Trajectory, ApiError> {
    Ok(trajectory_from_records(events, vocab)?)
}

async fn generate(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<GenerateResponse> {
    let req: GenerateRequest = parse_body(body)?;
    check_samples(req.n_samples, state.max_samples_per_request)?;
    let vocab = state.engine.vocab();
    let input = input_trajectory(&req.events, vocab)?;
    let params = req.params.resolve(vocab)?;
    let n = req.n_samples;
    let seed = params.seed;

    let samples = run_blocking(&state, move |engine| {
        let out = engine.generate_samples(&input, &params, n)?;
        Ok(out
            .iter()
            .enumerate()
            .map(|(k, t)| {
                to_document(t, input.len(), dtraj_core::derive_seed(seed, k as u64), engine.vocab())
            })
            .collect())
    })
    .await?;
    Ok(Json(GenerateResponse {
        seed,
        n_samples: n,
        samples,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskRequest {
    events: Vec<EventRecord>,
    targets: Vec<String>,
    horizon_age_years: f64,
    #[serde(default)]
    params: ParamsBody,
    n_samples: Option<usize>,
}

#[derive(Serialize)]
struct RiskRow {
    target: String,
    label: String,
    probability: f64,
    std_error: f64,
    n_samples: usize,
}

#[derive(Serialize)]
pub struct RiskResponse {
    seed: u64,
    n_samples: usize,
    horizon_age_years: f64,
    estimates: Vec<RiskRow>,
}

async fn risk(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<RiskResponse> {
    let req: RiskRequest = parse_body(body)?;
    let n = req.n_samples.unwrap_or(DEFAULT_RISK_SAMPLES);
    check_samples(n, state.max_samples_per_request)?;
    let vocab = state.engine.vocab();
    if req.targets.is_empty() {
        return Err(ApiError::bad_request("targets must not be empty"));
    }
    let targets: Vec<TokenId> = req
        .targets
        .iter()
        .map(|c| vocab.encode(c))
        .collect::<Result<_, _>>()?;
    let input = input_trajectory(&req.events, vocab)?;
    let params = req.params.resolve(vocab)?;
    let seed = params.seed;
    let horizon = req.horizon_age_years;

    let estimates = run_blocking(&state, move |engine| {
        engine.estimate_risk(&input, &targets, horizon, &params, n)
    })
    .await?;
    let estimates = estimates
        .into_iter()
        .map(|r| {
            let tok = vocab.decode(r.target).expect("target ids were encoded");
            RiskRow {
                target: tok.code.clone(),
                label: tok.label.clone(),
                probability: r.probability,
                std_error: r.std_error,
                n_samples: r.n_samples,
            }
        })
        .collect();
    Ok(Json(RiskResponse {
        seed,
        n_samples: n,
        horizon_age_years: horizon,
        estimates,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionRequest {
    events: Vec<EventRecord>,
    top_k: Option<usize>,
    mask_codes: Option<Vec<String>>,
}

#[derive(Serialize)]
struct DistributionRow {
    code: String,
    label: String,
    probability: f64,
}

#[derive(Serialize)]
pub struct DistributionResponse {
    truncated: bool,
    distribution: Vec<DistributionRow>,
}

async fn distribution(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<DistributionResponse> {
    let req: DistributionRequest = parse_body(body)?;
    let vocab = state.engine.vocab();
    let input = input_trajectory(&req.events, vocab)?;
    if input.is_empty() {
        return Err(ApiError::bad_request("events must not be empty"));
    }
    let mask: Mask = match &req.mask_codes {
        Some(codes) => encode_all(codes, vocab)?,
        None => GenerationParams::defaults(vocab, 0).mask,
    };
    let top_k = req.top_k.unwrap_or(DEFAULT_TOP_K);
    let max_seq = state.engine.model().config().max_seq;
    let truncated = input.len() > max_seq;

    let probs = run_blocking(&state, move |engine| {
        engine.next_event_distribution(&input, &mask)
    })
    .await?;
    let mut ranked: Vec<(TokenId, f64)> = probs
        .into_iter()
        .enumerate()
        .filter(|&(_, p)| p > 0.0)
        .collect();
    // descending probability, ascending id on ties
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let distribution = ranked
        .into_iter()
        .take(top_k)
        .map(|(id, probability)| {
            let t = vocab.decode(id).expect("id from distribution");
            DistributionRow {
                code: t.code.clone(),
                label: t.label.clone(),
                probability,
            }
        })
        .collect();
    Ok(Json(DistributionResponse {
        truncated,
        distribution,
    }))
}

async fn not_found(req: Request) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "not_found",
        format!("no route for {} {}", req.method(), req.uri().path()),
    )
}
