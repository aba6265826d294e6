use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use rand::SeedableRng;
use serde_json::{json, Value};
use sheetcoder_cli::service::{router, AppState, ErrorBody, PredictResponse, ServiceConfig, REQUEST_ID_HEADER};
use sheetcoder_core::a1::{parse_a1, A1Ref};
use sheetcoder_core::dataset::build_vocab;
use sheetcoder_core::formula::{parse_formula, to_ir, FormulaIR};
use sheetcoder_core::grid::render_grid;
use sheetcoder_core::toy::{toy_examples, toy_sheet, ToySpec};
use sheetcoder_model::train::{train, TrainConfig};
use sheetcoder_model::{Model, ModelConfig};
use tower::ServiceExt;

const D: u32 = 4;

fn model() -> Model {
    let ex = toy_examples(40, &ToySpec::default(), D, 1);
    let mut m = Model::new(ModelConfig::tiny(D, 3, 12), build_vocab(&ex, 1, D).unwrap()).unwrap();
    let data: Vec<_> = ex.iter().map(|e| m.prepare_example(e).unwrap()).collect();
    let tc = TrainConfig { steps: 60, batch_size: 8, lr: 3e-3, eval_every: 60, valid_limit: 0, ..Default::default() };
    train(&mut m, &data, &[], &tc, None, |_| {}).unwrap();
    m
}

fn state(config: ServiceConfig) -> AppState {
    AppState::new(model(), config).unwrap()
}

fn app() -> Router {
    router(state(ServiceConfig { beam: 8, top_k: 3, ..Default::default() }))
}

fn toy_grid() -> (Value, String) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let (sheet, target) = toy_sheet("Scores", &ToySpec::default(), &mut rng);
    (serde_json::from_str(&render_grid(&[sheet])).unwrap(), target.to_string())
}

async fn call(app: Router, req: Request<Body>) -> (StatusCode, String, Value) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let id = resp.headers().get(REQUEST_ID_HEADER).expect("request id header").to_str().unwrap().to_string();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, id, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

fn post(body: impl Into<Body>) -> Request<Body> {
    Request::post("/v1/predict").header("content-type", "application/json").body(body.into()).unwrap()
}

#[tokio::test]
async fn health_and_config() {
    let app = app();
    let (status, id, body) = call(app.clone(), Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["request_id"], id.as_str());

    let (status, _, body) = call(app, Request::get("/v1/config").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["radius"], D);
    assert_eq!(body["beam_size"], 8);
    assert_eq!(body["default_top_k"], 3);
}

#[tokio::test]
async fn valid_request_returns_ranked_suggestions() {
    let (grid, target) = toy_grid();
    let req = json!({ "grid": grid, "target": target, "top_k": 2 });
    let (status, id, body) = call(app(), post(req.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: PredictResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.request_id, id);
    assert!(!resp.suggestions.is_empty() && resp.suggestions.len() <= 2);
    assert!(resp.suggestions.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    assert_eq!(resp.diagnostics.sheet, "Scores");
    assert!(resp.diagnostics.latency_ms > 0.0);

    let Ok(A1Ref::Single(addr)) = parse_a1(&target) else { panic!("bad target") };
    for s in &resp.suggestions {
        // The formula text re-parses to the IR sent alongside it.
        let ir = to_ir(&parse_formula(&s.formula).unwrap(), addr, D).unwrap();
        assert_eq!(ir, FormulaIR::parse_stream(&s.stream).unwrap());
        assert_eq!(ir.sketch_tokens(), s.sketch);
        assert_eq!(ir.ranges().len(), s.ranges.len());
    }
}

#[tokio::test]
async fn default_top_k_and_grid_as_text() {
    let (grid, target) = toy_grid();
    let req = json!({ "grid": grid.to_string(), "sheet": "Scores", "target": target });
    let (status, _, body) = call(app(), post(req.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(body["suggestions"].as_array().unwrap().len() <= 3);
}

#[tokio::test]
async fn bad_requests_are_400() {
    let app = app();
    let (grid, _) = toy_grid();
    let cases = [
        (json!({ "grid": grid, "target": "Z999" }).to_string(), "Z999"),
        (json!({ "grid": grid, "target": "$A$1" }).to_string(), "$A$1"),
        (json!({ "grid": grid, "target": "B2", "sheet": "Nope" }).to_string(), "Nope"),
        (json!({ "grid": grid, "target": "B2", "top_k": 9 }).to_string(), "top_k"),
        (json!({ "grid": {"sheets": 3}, "target": "B2" }).to_string(), "malformed grid"),
        ("{not json".to_string(), "malformed request"),
        (json!({ "grid": grid, "target": "B2", "extra": 1 }).to_string(), "malformed request"),
    ];
    for (body, needle) in cases {
        let (status, id, body) = call(app.clone(), post(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{needle}");
        let err: ErrorBody = serde_json::from_value(body).unwrap();
        assert_eq!(err.request_id, id);
        assert!(err.error.contains(needle), "{} lacks {needle}", err.error);
    }
}

#[tokio::test]
async fn oversize_body_is_413() {
    let app = router(state(ServiceConfig { beam: 8, top_k: 3, max_body_bytes: 256, ..Default::default() }));
    let (grid, target) = toy_grid();
    let (status, id, body) = call(app, post(json!({ "grid": grid, "target": target }).to_string())).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(body["request_id"], id.as_str());
}

#[tokio::test]
async fn saturation_is_503() {
    let st = state(ServiceConfig { beam: 8, top_k: 3, max_in_flight: 1, ..Default::default() });
    let _held = st.slots().try_acquire_owned().unwrap();
    let (grid, target) = toy_grid();
    let (status, _, body) = call(router(st), post(json!({ "grid": grid, "target": target }).to_string())).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["error"].as_str().unwrap().contains("in flight"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let app = router(state(ServiceConfig { beam: 8, top_k: 3, max_in_flight: 8, ..Default::default() }));
    let (grid, target) = toy_grid();
    let body = json!({ "grid": grid, "target": target }).to_string();
    let calls = (0..6).map(|_| tokio::spawn(call(app.clone(), post(body.clone()))));
    let mut seen = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for c in calls {
        let (status, id, body) = c.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert!(ids.insert(id));
        let resp: PredictResponse = serde_json::from_value(body).unwrap();
        seen.push((resp.suggestions, resp.diagnostics.dropped_off_sheet));
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn unknown_route_still_carries_request_id() {
    let resp = app().oneshot(Request::get("/v2/nothing").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    assert!(resp.headers().contains_key(REQUEST_ID_HEADER));
}
