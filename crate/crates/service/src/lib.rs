//! HTTP/JSON rewriting service.
//!
//! Routes live under `/v1`. Request and response bodies follow the JSON
//! schemas in `schemas/`. Model state is immutable after [`AppState::load`];
//! every request builds its own RNG from the request seed.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use unirewrite::inference::{DecodeConfig, Engine, Mode, RewriteRequest, Strategy, DEFAULT_MAX_LEN, MAX_LAMBDA};
use unirewrite::synthlang::World;
use unirewrite::tokenizer::lang_token_name;
use unirewrite::Error;

pub const MAX_EXEMPLARS: usize = 32;
pub const DIGEST_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStrategy {
    Greedy,
    Beam,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiDecode {
    pub strategy: ApiStrategy,
    /// Beam width for `beam`; defaults to 5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam: Option<usize>,
    /// Temperature for `sample`; defaults to 1.0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ApiDecode {
    pub fn to_config(&self) -> DecodeConfig {
        let strategy = match self.strategy {
            ApiStrategy::Greedy => Strategy::Greedy,
            ApiStrategy::Beam => Strategy::Beam { k: self.beam.unwrap_or(5) },
            ApiStrategy::Sample => Strategy::Sample { temperature: self.temperature.unwrap_or(1.0) },
        };
        DecodeConfig { strategy, max_len: self.max_len.unwrap_or(DEFAULT_MAX_LEN), seed: self.seed.unwrap_or(0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiRewriteRequest {
    pub input_text: String,
    pub target_lang: String,
    #[serde(default)]
    pub exemplars_a: Vec<String>,
    #[serde(default)]
    pub exemplars_b: Vec<String>,
    pub lambda: f64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<ApiDecode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiRewriteResponse {
    pub output_text: String,
    pub attribute_delta_norm: f64,
    pub timing_ms: f64,
    pub model_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiTranslateRequest {
    pub input_text: String,
    pub target_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<ApiDecode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiTranslateResponse {
    pub output_text: String,
    pub timing_ms: f64,
    pub model_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiExtractRequest {
    pub exemplars: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiExtractResponse {
    pub dim: usize,
    pub norm: f64,
    /// First components of the mean attribute vector.
    pub head: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub lang_id: String,
    pub is_pivot: bool,
    pub lang_token: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiLanguagesResponse {
    pub pivot: String,
    pub languages: Vec<LanguageInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiHealthResponse {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<String>>,
}

/// Error response: a status plus a JSON [`ApiError`] body.
#[derive(Debug)]
pub struct Failure {
    pub status: StatusCode,
    pub body: ApiError,
}

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Failure { status, body: ApiError { code: code.into(), message: message.into(), languages: None } }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Failure::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// A loaded model with its language table.
pub struct Loaded {
    pub engine: Engine,
    pub pivot: String,
    pub languages: Vec<LanguageInfo>,
}

impl Loaded {
    pub fn new(engine: Engine, world: &World) -> unirewrite::Result<Self> {
        let pivot = world.pivot()?.lang_id.clone();
        let languages = world
            .languages
            .iter()
            .map(|l| LanguageInfo { lang_id: l.lang_id.clone(), is_pivot: l.is_pivot, lang_token: lang_token_name(&l.lang_id) })
            .collect();
        Ok(Loaded { engine, pivot, languages })
    }

    fn lang_ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.lang_id.clone()).collect()
    }

    fn check_language(&self, lang: &str) -> Result<(), Failure> {
        if self.languages.iter().any(|l| l.lang_id == lang) {
            return Ok(());
        }
        let mut f = Failure::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_language", format!("unknown language `{lang}`"));
        f.body.languages = Some(self.lang_ids());
        Err(f)
    }

    fn map_error(&self, e: Error) -> Failure {
        match e {
            Error::UnknownLanguage(lang) => {
                let mut f = Failure::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_language", format!("unknown language `{lang}`"));
                f.body.languages = Some(self.lang_ids());
                f
            }
            Error::TooLong { .. } => Failure::new(StatusCode::PAYLOAD_TOO_LARGE, "too_long", e.to_string()),
            Error::InvalidArgument(_) | Error::UnknownWord { .. } | Error::Config(_) => Failure::bad_request(e.to_string()),
            other => Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

struct Inner {
    model: OnceLock<Arc<Loaded>>,
    limiter: Arc<Semaphore>,
}

/// Shared service state: the model slot and the concurrency limiter.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Empty state; health reports 503 until [`AppState::load`].
    pub fn new(max_concurrent: usize) -> Self {
        AppState { inner: Arc::new(Inner { model: OnceLock::new(), limiter: Arc::new(Semaphore::new(max_concurrent)) }) }
    }

    /// Installs the model. A second load is rejected.
    pub fn load(&self, loaded: Loaded) -> Result<(), Loaded> {
        self.inner.model.set(Arc::new(loaded)).map_err(|a| Arc::into_inner(a).expect("sole owner"))
    }

    pub fn limiter(&self) -> Arc<Semaphore> {
        self.inner.limiter.clone()
    }

    fn loaded(&self) -> Result<Arc<Loaded>, Failure> {
        self.inner
            .model
            .get()
            .cloned()
            .ok_or_else(|| Failure::new(StatusCode::SERVICE_UNAVAILABLE, "not_ready", "model is not loaded yet"))
    }

    fn permit(&self) -> Result<OwnedSemaphorePermit, Failure> {
        self.inner
            .limiter
            .clone()
            .try_acquire_owned()
            .map_err(|_| Failure::new(StatusCode::TOO_MANY_REQUESTS, "busy", "too many concurrent requests"))
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| Failure::bad_request(format!("invalid request body: {e}")))
}

fn check_exemplars(loaded: &Loaded, name: &str, exemplars: &[String]) -> Result<(), Failure> {
    if exemplars.len() > MAX_EXEMPLARS {
        return Err(Failure::bad_request(format!("{name} has {} items; at most {MAX_EXEMPLARS} allowed", exemplars.len())));
    }
    for e in exemplars {
        loaded.engine.tokenize(e).map_err(|err| loaded.map_error(err))?;
    }
    Ok(())
}

async fn blocking<T: Send + 'static>(
    loaded: Arc<Loaded>,
    f: impl FnOnce(&Loaded) -> unirewrite::Result<T> + Send + 'static,
) -> Result<T, Failure> {
    let l = loaded.clone();
    tokio::task::spawn_blocking(move || f(&l))
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| loaded.map_error(e))
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

async fn rewrite(State(state): State<AppState>, body: Bytes) -> Result<Json<ApiRewriteResponse>, Failure> {
    let t = Instant::now();
    let loaded = state.loaded()?;
    let _permit = state.permit()?;
    let req: ApiRewriteRequest = parse(&body)?;
    if !(0.0..=MAX_LAMBDA).contains(&req.lambda) {
        return Err(Failure::bad_request(format!("lambda must lie in [0, {MAX_LAMBDA}]")));
    }
    loaded.check_language(&req.target_lang)?;
    loaded.engine.tokenize(&req.input_text).map_err(|e| loaded.map_error(e))?;
    check_exemplars(&loaded, "exemplars_a", &req.exemplars_a)?;
    check_exemplars(&loaded, "exemplars_b", &req.exemplars_b)?;
    let core = RewriteRequest {
        input_text: req.input_text,
        target_lang: req.target_lang,
        exemplars_a: req.exemplars_a,
        exemplars_b: req.exemplars_b,
        lambda: req.lambda,
        mode: req.mode,
        decode: req.decode.as_ref().map(ApiDecode::to_config),
    };
    let result = blocking(loaded.clone(), move |l| l.engine.rewrite(&core)).await?;
    Ok(Json(ApiRewriteResponse {
        output_text: result.output_text,
        attribute_delta_norm: result.attribute_delta_norm,
        timing_ms: elapsed_ms(t),
        model_id: loaded.engine.model_id.clone(),
    }))
}

async fn translate(State(state): State<AppState>, body: Bytes) -> Result<Json<ApiTranslateResponse>, Failure> {
    let t = Instant::now();
    let loaded = state.loaded()?;
    let _permit = state.permit()?;
    let req: ApiTranslateRequest = parse(&body)?;
    loaded.check_language(&req.target_lang)?;
    loaded.engine.tokenize(&req.input_text).map_err(|e| loaded.map_error(e))?;
    let decode = req.decode.as_ref().map(ApiDecode::to_config);
    let output = blocking(loaded.clone(), move |l| l.engine.translate(&req.input_text, &req.target_lang, decode)).await?;
    Ok(Json(ApiTranslateResponse { output_text: output, timing_ms: elapsed_ms(t), model_id: loaded.engine.model_id.clone() }))
}

async fn extract(State(state): State<AppState>, body: Bytes) -> Result<Json<ApiExtractResponse>, Failure> {
    let loaded = state.loaded()?;
    let _permit = state.permit()?;
    let req: ApiExtractRequest = parse(&body)?;
    if req.exemplars.is_empty() {
        return Err(Failure::bad_request("exemplars must not be empty"));
    }
    check_exemplars(&loaded, "exemplars", &req.exemplars)?;
    let v = blocking(loaded, move |l| l.engine.attribute(&req.exemplars)).await?;
    Ok(Json(ApiExtractResponse {
        dim: v.dim(),
        norm: v.norm() as f64,
        head: v.as_slice().iter().take(DIGEST_LEN).map(|&x| x as f64).collect(),
    }))
}

async fn languages(State(state): State<AppState>) -> Result<Json<ApiLanguagesResponse>, Failure> {
    let loaded = state.loaded()?;
    Ok(Json(ApiLanguagesResponse { pivot: loaded.pivot.clone(), languages: loaded.languages.clone() }))
}

async fn health(State(state): State<AppState>) -> Response {
    match state.loaded() {
        Ok(l) => Json(ApiHealthResponse {
            status: "ok".into(),
            model_id: Some(l.engine.model_id.clone()),
            vocab_hash: Some(l.engine.vocab.hash()),
        })
        .into_response(),
        Err(_) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(ApiHealthResponse { status: "loading".into(), model_id: None, vocab_hash: None }),
        )
            .into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/rewrite", post(rewrite))
        .route("/v1/translate", post(translate))
        .route("/v1/extract", post(extract))
        .route("/v1/languages", get(languages))
        .route("/v1/health", get(health))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
