use std::path::Path;

use act_cli::server::{router, AppState};
use act_core::backends::{BackendConfig, CriticCalibration, CriticismStrategy, SimulatorConfig};
use act_core::data::{self, AnnotationStrategy, Dataset, Item, ItemContent, ReviewRecord};
use act_core::pipeline::config::{AnnotatorConfig, CriticizerConfig, MetricToggles, ReviewConfig, SamplingConfig};
use act_core::pipeline::{run_pipeline, PipelineConfig, ReviewMode, Run, Stage};
use act_core::sampling::{Budget, DrawMode, SamplingRule};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn write_dataset(path: &Path, n: usize) {
    let labels: Vec<String> = ["red", "green", "blue"].iter().map(|s| s.to_string()).collect();
    let items = (0..n)
        .map(|id| Item {
            id,
            content: ItemContent::Text {
                text: format!("text of item {id}"),
            },
            hidden_truth: Some(id % 3),
            label_space: labels.clone(),
            features: None,
        })
        .collect();
    Dataset::new(items).unwrap().save(path).unwrap();
}

fn interactive_config(root: &Path, n: usize, budget: usize) -> PipelineConfig {
    let dataset = root.join("data.jsonl");
    write_dataset(&dataset, n);
    let sim = SimulatorConfig {
        annotator_accuracy: 0.7,
        calibration: CriticCalibration::Beta {
            error: act_core::backends::BetaParams::new(9.0, 1.0),
            correct: act_core::backends::BetaParams::new(1.0, 9.0),
        },
        seed: 4,
    };
    PipelineConfig {
        dataset,
        output_dir: root.join("runs"),
        annotator: AnnotatorConfig {
            strategy: AnnotationStrategy::Naive,
            backend: BackendConfig::simulated(sim),
        },
        criticizer: CriticizerConfig {
            strategy: CriticismStrategy::Naive,
            backend: BackendConfig::simulated(sim),
        },
        sampling: SamplingConfig {
            rule: SamplingRule::Threshold,
            budget: Budget::Count(budget),
            mode: DrawMode::HardCap,
            seed: 2,
        },
        review: ReviewConfig {
            mode: ReviewMode::Interactive,
            file: None,
        },
        metrics: MetricToggles::default(),
        train: None,
        parallelism: 2,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

#[tokio::test]
async fn console_round_trip_confirm_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = interactive_config(dir.path(), 60, 10);
    let state = run_pipeline(&cfg).unwrap();
    assert_eq!(state.stage, Stage::Reviewing);
    let id = state.run_id.clone();
    let app = router(AppState::new(&cfg.output_dir), None);

    let (status, runs) = call(&app, "GET", "/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(runs[0]["run_id"], json!(id));
    assert_eq!(runs[0]["stage"], json!("reviewing"));
    assert_eq!(runs[0]["pending"], json!(10));

    let mut queue = Vec::new();
    for page in 0..3 {
        let (status, body) = call(&app, "GET", &format!("/runs/{id}/queue?page={page}&page_size=4"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["total"], json!(10));
        queue.extend(body["items"].as_array().unwrap().clone());
    }
    assert_eq!(queue.len(), 10);
    let eps: Vec<f64> = queue.iter().map(|q| q["error_probability"].as_f64().unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[0] >= w[1]), "server order is descending suspicion");
    let first = &queue[0];
    for key in ["item_id", "content", "machine_label", "machine_label_name", "label_space"] {
        assert!(first.get(key).is_some(), "queue item carries {key}");
    }

    let item0 = first["item_id"].as_u64().unwrap();
    let (status, text) = call(&app, "GET", &format!("/items/{item0}/content?run={id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(text, json!(format!("text of item {item0}")));

    let mut expected_labels = Vec::new();
    for (k, q) in queue.iter().enumerate() {
        let item = q["item_id"].as_u64().unwrap();
        let machine = q["machine_label"].as_u64().unwrap();
        let label = if k < 6 { machine } else { 0 };
        expected_labels.push((item as usize, label as usize));
        let (status, body) = call(
            &app,
            "POST",
            &format!("/runs/{id}/reviews"),
            Some(json!({"item_id": item, "label": label, "reviewer": "r1"})),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["budget_consumed"], json!(k + 1));
        if k == 0 {
            let (status, body) = call(
                &app,
                "POST",
                &format!("/runs/{id}/reviews"),
                Some(json!({"item_id": item, "label": label, "reviewer": "r1"})),
            )
            .await;
            assert_eq!(status, StatusCode::CONFLICT);
            assert_eq!(body["kind"], json!("conflict"));
        }
    }

    let run = Run::open_id(&cfg.output_dir, &id).unwrap();
    let reviews = run.reviews().unwrap();
    assert_eq!(reviews.len(), 10);
    let recorded: Vec<(usize, usize)> = reviews.iter().map(|r| (r.item_id, r.human_label)).collect();
    assert_eq!(recorded, expected_labels);
    let state = run.state().unwrap();
    assert_eq!(state.stage, Stage::Corrected);
    assert_eq!(state.budget_consumed, 10);

    let annotations = run.annotations().unwrap();
    let plan = run.plan().unwrap();
    let manual = data::apply_correction(&annotations, &plan.delta, &reviews).unwrap();
    assert_eq!(run.corrected().unwrap().final_labels(), manual.final_labels());

    let (status, export) = call(&app, "GET", &format!("/runs/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(export["metrics"]["budget_used"], json!(10));
    assert_eq!(export["corrected"].as_array().unwrap().len(), 60);

    let (status, body) = call(&app, "GET", &format!("/runs/{id}/queue"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["items"], json!([]));
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = interactive_config(dir.path(), 30, 5);
    let id = run_pipeline(&cfg).unwrap().run_id;
    let app = router(AppState::new(&cfg.output_dir), None);

    let (status, body) = call(&app, "GET", "/runs/nope/queue", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["kind"], json!("unknown_run"));

    let (status, _) = call(&app, "GET", "/runs/..%2F..%2Fetc/queue", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(&app, "GET", &format!("/runs/{id}/export"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, page) = call(&app, "GET", &format!("/runs/{id}/queue"), None).await;
    let item = page["items"][0]["item_id"].as_u64().unwrap();
    let (status, body) = call(
        &app,
        "POST",
        &format!("/runs/{id}/reviews"),
        Some(json!({"item_id": item, "label": 7})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["kind"], json!("validation"));

    let run = Run::open_id(&cfg.output_dir, &id).unwrap();
    let outside = run.plan().unwrap().delta.iter().position(|d| !d).unwrap();
    let (status, body) = call(
        &app,
        "POST",
        &format!("/runs/{id}/reviews"),
        Some(json!({"item_id": outside, "label": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["kind"], json!("not_pending"));
    assert!(Run::open_id(&cfg.output_dir, &id).unwrap().reviews().unwrap().is_empty());
}

#[tokio::test]
async fn static_assets_are_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let assets = dir.path().join("www");
    std::fs::create_dir_all(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<h1>console</h1>").unwrap();
    let app = router(AppState::new(dir.path().join("runs")), Some(&assets));
    let (status, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!("<h1>console</h1>"));
    let (status, runs) = call(&app, "GET", "/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(runs, json!([]));
}

#[test]
fn import_file_mode_completes_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = interactive_config(dir.path(), 40, 8);
    let state = run_pipeline(&cfg).unwrap();
    let reviews: Vec<ReviewRecord> = state
        .pending
        .iter()
        .map(|p| ReviewRecord {
            item_id: p.item_id,
            human_label: 1,
            reviewer_id: "elsewhere".into(),
            timestamp: 1_700_000_000,
        })
        .collect();
    let file = dir.path().join("reviews.jsonl");
    data::write_jsonl(&file, &reviews).unwrap();
    let state = act_cli::import_reviews(&cfg.output_dir, &state.run_id, &file).unwrap();
    assert_eq!(state.stage, Stage::Corrected);
    assert_eq!(state.budget_consumed, 8);
}
