use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use blicket_core::evaluation::{predictive_likelihood, ScoringOptions};
use blicket_core::io::{builtin_conditions, ingest_str};
use blicket_core::tasks::find_condition;
use blicket_core::{AgentSpec, AgentState, BlockSet, Event};
use blicket_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn create(app: &Router, body: Value) -> String {
    let (status, view) = call(app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{view}");
    view["session_id"].as_str().unwrap().to_string()
}

async fn intervene(app: &Router, id: &str, blocks: &[usize]) -> (StatusCode, Value) {
    call(
        app,
        Method::POST,
        &format!("/sessions/{id}/interventions"),
        Some(json!({ "intervention": blocks })),
    )
    .await
}

/// A fixed play script: cycles through small subsets.
fn script(n_blocks: usize, i: usize) -> Vec<usize> {
    let bits = (i * 5 + 3) % (1 << n_blocks);
    (0..n_blocks).filter(|b| bits & (1 << b) != 0).collect()
}

#[tokio::test]
async fn deterministic_blicket_alone_leaves_conjunctive_machine_off() {
    let app = router(AppState::builtin());
    let mut off = 0;
    for seed in 0..200 {
        let id = create(&app, json!({ "condition_id": "conj", "seed": seed })).await;
        let (status, r) = intervene(&app, &id, &[0]).await;
        assert_eq!(status, StatusCode::OK);
        off += usize::from(r["outcome"] == 0);
    }
    assert_eq!(off, 200);
}

#[tokio::test]
async fn fresh_lens_is_uniform_over_blickets() {
    let app = router(AppState::builtin());
    let id = create(
        &app,
        json!({ "condition_id": "noisy-conj", "seed": 1, "lens": { "kind": "hbm", "prior_index": 4, "w": 0.5, "t": 1.0 } }),
    )
    .await;
    let (status, b) = call(&app, Method::GET, &format!("/sessions/{id}/beliefs"), None).await;
    assert_eq!(status, StatusCode::OK);
    let probs = b["blicket_probability"].as_array().unwrap();
    assert_eq!(probs.len(), 3);
    for p in probs {
        assert!((p.as_f64().unwrap() - 0.5).abs() < 1e-12);
    }
    assert_eq!(b["form_marginal"]["probs"].as_array().unwrap().len(), 400);
    assert_eq!(b["suggestions"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn lens_matches_offline_replay() {
    let app = router(AppState::builtin());
    let spec = AgentSpec::hbm(9, 0.3, 1.0).unwrap();
    let id = create(
        &app,
        json!({ "condition_id": "disj", "seed": 11, "lens": spec, "top_k": 3 }),
    )
    .await;
    let condition = find_condition("disj", None).unwrap();
    let mut offline =
        AgentState::with_belief_tracking(spec, 3, Some(condition.tasks[0].intervention_limit)).unwrap();
    for i in 0..16 {
        let task = if i < 12 { &condition.tasks[0] } else { &condition.tasks[1] };
        let blocks = script(task.n_blocks, i);
        let (_, r) = intervene(&app, &id, &blocks).await;
        let q = BlockSet::from_indices(blocks.iter().copied()).unwrap();
        offline.observe(Event::new(q, r["outcome"] == 1)).unwrap();
        if i == 11 {
            offline
                .begin_task(condition.tasks[1].n_blocks, Some(condition.tasks[1].intervention_limit))
                .unwrap();
        }

        let (_, b) = call(&app, Method::GET, &format!("/sessions/{id}/beliefs"), None).await;
        let belief = offline.belief().unwrap();
        let served: Vec<f64> = serde_json::from_value(b["blicket_probability"].clone()).unwrap();
        for (s, o) in served.iter().zip(belief.blicket_probabilities()) {
            assert!((s - o).abs() <= 1e-12);
        }
        let served: Vec<f64> = serde_json::from_value(b["form_marginal"]["probs"].clone()).unwrap();
        for (s, o) in served.iter().zip(belief.form_marginal().weights()) {
            assert!((s - o).abs() <= 1e-12);
        }
        let table = blicket_core::EigTable::compute(belief);
        let combined = table.combined(0.3);
        let best = combined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let top = b["suggestions"][0]["combined_eig"].as_f64().unwrap();
        assert!((top - best).abs() <= 1e-12);
    }
}

#[tokio::test]
async fn seeded_sessions_replay_identically() {
    let app = router(AppState::builtin());
    let mut runs = Vec::new();
    for _ in 0..2 {
        let id = create(&app, json!({ "condition_id": "noisy-disj", "seed": 42 })).await;
        let mut outcomes = Vec::new();
        for i in 0..32 {
            let n = if i < 12 { 3 } else { 6 };
            let (_, r) = intervene(&app, &id, &script(n, i)).await;
            outcomes.push(r["outcome"].as_u64().unwrap());
        }
        runs.push(outcomes);
    }
    assert_eq!(runs[0], runs[1]);
}

#[tokio::test]
async fn full_session_exports_a_scorable_log() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(builtin_conditions(), Some(dir.path().to_path_buf())));
    let id = create(
        &app,
        json!({ "condition_id": "3conj", "seed": 5, "reveal": true, "participant_id": "p1" }),
    )
    .await;
    for i in 0..32 {
        let n = if i < 12 { 3 } else { 6 };
        let (status, r) = intervene(&app, &id, &script(n, i)).await;
        assert_eq!(status, StatusCode::OK);
        if i == 11 {
            assert_eq!(r["remaining"], 0);
            assert_eq!(r["next_task"]["task_role"], "transfer");
            assert_eq!(r["next_task"]["n_blocks"], 6);
        }
        if i == 31 {
            assert_eq!(r["complete"], true);
        }
    }
    let (status, _) = intervene(&app, &id, &[0]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let checkpoint = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(checkpoint.lines().count(), 32);

    let (status, done) = call(&app, Method::POST, &format!("/sessions/{id}/finish"), None).await;
    assert_eq!(status, StatusCode::OK);
    let jsonl = done["jsonl"].as_str().unwrap();
    assert_eq!(done["n_records"], 32);
    assert_eq!(done["ground_truth"][0]["blickets"], json!([0, 1, 2]));
    assert_eq!(jsonl, checkpoint);

    let logs = ingest_str(jsonl, &builtin_conditions(), false).unwrap().logs;
    assert_eq!(logs[0].participant_id, "p1");
    let condition = find_condition("3conj", None).unwrap();
    let probs = predictive_likelihood(
        &AgentSpec::hbm(1, 0.5, 1.0).unwrap(),
        &logs[0],
        &condition,
        &ScoringOptions::default(),
    )
    .unwrap();
    assert_eq!(probs.len(), 20);

    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ground_truth_stays_hidden() {
    let app = router(AppState::builtin());
    let id = create(&app, json!({ "condition_id": "conj", "seed": 2 })).await;
    let (_, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let (_, conditions) = call(&app, Method::GET, "/conditions", None).await;
    let (_, r) = intervene(&app, &id, &[1]).await;
    for body in [&view, &conditions, &r] {
        assert!(!body.to_string().contains("blickets"), "{body}");
    }
    let (_, done) = call(&app, Method::POST, &format!("/sessions/{id}/finish"), None).await;
    assert!(done.get("ground_truth").is_none());
    assert_eq!(conditions.as_array().unwrap().len(), 14);
}

#[tokio::test]
async fn error_statuses() {
    let app = router(AppState::builtin());
    let (status, _) = intervene(&app, "missing", &[0]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, "/sessions/missing/beliefs", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(&app, Method::POST, "/sessions", Some(json!({ "condition_id": "nope" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let id = create(&app, json!({ "condition_id": "conj", "seed": 3 })).await;
    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}/beliefs"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("lens"));

    let (status, _) = intervene(&app, &id, &[3]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = intervene(&app, &id, &[1, 1]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut short = find_condition("conj", None).unwrap();
    short.id = "short".into();
    for t in &mut short.tasks {
        t.intervention_limit = 1;
    }
    let app = router(AppState::new(vec![short], None));
    let id = create(&app, json!({ "condition_id": "short", "seed": 0 })).await;
    assert_eq!(intervene(&app, &id, &[0]).await.0, StatusCode::OK);
    assert_eq!(intervene(&app, &id, &[0]).await.0, StatusCode::OK);
    assert_eq!(intervene(&app, &id, &[0]).await.0, StatusCode::CONFLICT);
}
