use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use freetumor_core::grid::Grid;
use freetumor_core::volume::Volume;
use freetumor_turing::api::{router, AppState, Clock};
use freetumor_turing::cases::{build_case_set, save_case_set, CaseSet, PoolCase};
use freetumor_turing::reference::REFERENCE_READERS;
use freetumor_turing::render::decode_png;
use freetumor_turing::report::{full_report, to_csv};
use freetumor_turing::store::{read_events, Event, SessionStore};
use freetumor_turing::{Truth, TumorType, TuringDesign};

fn pool(truth: Truth, per_type: usize) -> Vec<PoolCase> {
    let mut out = Vec::new();
    for ty in TumorType::ALL {
        for i in 0..per_type {
            let s = [8, 10, 12];
            let mut mask = Grid::filled(s, 0u8);
            mask.set([3 + i % 2, 4, 5], 1);
            let img = Grid::from_fn(s, |[z, y, x]| ((z + 2 * y + 3 * x + i) % 17) as f32 / 16.0);
            out.push(PoolCase {
                source_id: format!("src-{truth}-{ty}-{i}"),
                tumor_type: ty,
                image: Volume::new("v", img, [1.0; 3]).unwrap(),
                mask,
            });
        }
    }
    out
}

fn case_dir(dir: &Path) -> CaseSet {
    let d = TuringDesign::default();
    let built = build_case_set(&pool(Truth::Real, 10), &pool(Truth::Synthetic, 10), &d, 3).unwrap();
    save_case_set(dir, &d, 3, &built).unwrap();
    CaseSet::load(dir).unwrap()
}

fn ticking_clock() -> Clock {
    let t = Arc::new(AtomicU64::new(1_000));
    Arc::new(move || t.fetch_add(1, Ordering::Relaxed))
}

fn app(root: &Path) -> Router {
    let cases = CaseSet::load(&root.join("cases")).unwrap();
    let store = SessionStore::open(&root.join("sessions")).unwrap();
    router(AppState::new(store, cases, 11, ticking_clock()))
}

fn setup() -> (tempfile::TempDir, CaseSet) {
    let tmp = tempfile::tempdir().unwrap();
    let cs = case_dir(&tmp.path().join("cases"));
    (tmp, cs)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create(app: &Router, reader: &str, level: &str) -> String {
    let (s, v) = call_json(app, "POST", "/api/sessions", Some(json!({"reader_id": reader, "level": level}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

#[tokio::test]
async fn scripted_study_reproduces_reference_totals_and_persists_each_verdict_once() {
    let (tmp, cs) = setup();
    let app = app(tmp.path());
    for rc in REFERENCE_READERS {
        let id = create(&app, rc.reader, rc.level.as_str()).await;
        // Per type and truth, the first `correct` cases in case-set order
        // are called correctly.
        let mut seen = std::collections::BTreeMap::new();
        loop {
            let (s, v) = call_json(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
            assert_eq!(s, StatusCode::OK);
            if v["done"].as_bool().unwrap() {
                break;
            }
            let cid = v["next"]["case"]["case_id"].as_str().unwrap().to_string();
            let case = cs.get(&cid).unwrap();
            let ti = TumorType::ALL.iter().position(|t| *t == case.tumor_type).unwrap();
            let rank = cs
                .cases
                .iter()
                .filter(|c| c.tumor_type == case.tumor_type && c.truth == case.truth)
                .position(|c| c.id == cid)
                .unwrap();
            let (correct, right, wrong) = match case.truth {
                Truth::Synthetic => (rc.correct[ti][0], "synthetic", "real"),
                Truth::Real => (rc.correct[ti][1], "real", "synthetic"),
            };
            let verdict = if rank < correct as usize { right } else { wrong };
            let (s, v) = call_json(
                &app,
                "POST",
                &format!("/api/sessions/{id}/verdicts"),
                Some(json!({"case_id": cid, "verdict": verdict})),
            )
            .await;
            assert_eq!(s, StatusCode::OK, "{v}");
            assert_eq!(v["outcome"], "stored");
            assert!(seen.insert(cid, ()).is_none(), "next returned an answered case");
        }
        assert_eq!(seen.len(), 90);
        let (s, v) = call_json(&app, "POST", &format!("/api/sessions/{id}/close"), None).await;
        assert_eq!((s, v["closed"].as_bool()), (StatusCode::OK, Some(true)));
    }

    let (s, v) = call_json(&app, "GET", "/api/report?grouping=total", None).await;
    assert_eq!(s, StatusCode::OK);
    let row = &v["rows"][0];
    assert_eq!((row["counts"]["tp"].as_u64(), row["counts"]["tn"].as_u64()), (Some(299), Some(412)));
    assert!((row["sensitivity"].as_f64().unwrap() - 51.1).abs() <= 0.1);
    assert!((row["accuracy"].as_f64().unwrap() - 60.8).abs() <= 0.1);

    let (_, v) = call_json(&app, "GET", "/api/report?grouping=reader", None).await;
    assert_eq!(v["rows"].as_array().unwrap().len(), 13);
    let (_, v) = call_json(&app, "GET", "/api/report?grouping=level", None).await;
    let groups: Vec<&str> = v["rows"].as_array().unwrap().iter().map(|r| r["group"].as_str().unwrap()).collect();
    assert_eq!(groups, ["junior", "mid", "senior"]);

    // Each verdict is logged exactly once, and a fresh replay of the logs
    // yields the same CSV the server returns.
    let sdir = tmp.path().join("sessions");
    for e in std::fs::read_dir(&sdir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "jsonl") {
            let evs = read_events(&p).unwrap();
            let n = evs.iter().filter(|e| matches!(e, Event::Verdict { .. })).count();
            assert_eq!(n, 90, "{}", p.display());
        }
    }
    let (s, csv) = call(&app, "GET", "/api/report?format=csv", None).await;
    assert_eq!(s, StatusCode::OK);
    let store = SessionStore::open(&sdir).unwrap();
    let sessions: Vec<_> = store.sessions().collect();
    assert_eq!(String::from_utf8(csv).unwrap(), to_csv(&full_report(&sessions, &cs.cases).unwrap()));
}

#[tokio::test]
async fn case_payloads_are_blinded() {
    let (tmp, cs) = setup();
    let app = app(tmp.path());
    let id = create(&app, "r1", "senior").await;
    for c in &cs.cases {
        let (s, b) = call(&app, "GET", &format!("/api/sessions/{id}/cases/{}", c.id), None).await;
        assert_eq!(s, StatusCode::OK);
        let text = String::from_utf8(b).unwrap();
        assert!(!text.contains("truth") && !text.contains("source") && !text.contains(&c.source_id));
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(keys(&v), ["case", "position", "total", "verdict"]);
        assert_eq!(keys(&v["case"]), ["case_id", "slices", "tumor_type"]);
        for sl in v["case"]["slices"].as_array().unwrap() {
            assert_eq!(keys(sl), ["axis", "height", "marker", "url", "width"]);
        }
    }
    let (_, b) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    let text = String::from_utf8(b).unwrap();
    assert!(!text.contains("truth") && !text.contains("synthetic"));
}

#[tokio::test]
async fn images_are_lossless_pngs_matching_the_view() {
    let (tmp, cs) = setup();
    let app = app(tmp.path());
    let id = create(&app, "r1", "junior").await;
    let c = &cs.cases[0];
    let (_, v) = call_json(&app, "GET", &format!("/api/sessions/{id}/cases/{}", c.id), None).await;
    for sl in v["case"]["slices"].as_array().unwrap() {
        let (s, png) = call(&app, "GET", sl["url"].as_str().unwrap(), None).await;
        assert_eq!(s, StatusCode::OK);
        let (w, h, px) = decode_png(&png).unwrap();
        assert_eq!((w as u64, h as u64), (sl["width"].as_u64().unwrap(), sl["height"].as_u64().unwrap()));
        assert_eq!(png, std::fs::read(tmp.path().join("cases/images").join(format!("{}_{}.png", c.id, sl["axis"].as_str().unwrap()))).unwrap());
        assert_eq!(px.len(), w * h);
    }
    let (s, _) = call(&app, "GET", &format!("/api/images/{}/oblique.png", c.id), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/api/images/case-999/axial.png", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn resubmits_are_idempotent_and_overwrites_are_audited() {
    let (tmp, cs) = setup();
    let app = app(tmp.path());
    let id = create(&app, "r1", "mid").await;
    let cid = &cs.cases[5].id;
    let uri = format!("/api/sessions/{id}/verdicts");
    let log = tmp.path().join(format!("sessions/{id}.jsonl"));
    for (verdict, outcome, events) in [("real", "stored", 2), ("real", "unchanged", 2), ("synthetic", "overwritten", 3)] {
        let (s, v) = call_json(&app, "POST", &uri, Some(json!({"case_id": cid, "verdict": verdict}))).await;
        assert_eq!((s, v["outcome"].as_str()), (StatusCode::OK, Some(outcome)));
        assert_eq!(read_events(&log).unwrap().len(), events);
    }
    let store = SessionStore::open(&tmp.path().join("sessions")).unwrap();
    let s = store.get(&id).unwrap();
    assert_eq!(s.audit.len(), 1);
    assert_eq!((s.audit[0].case_id.as_str(), s.answered()), (cid.as_str(), 1));
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let (tmp, cs) = setup();
    let app = app(tmp.path());
    let (s, v) = call_json(&app, "GET", "/api/sessions/nope", None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));
    let (s, _) = call_json(&app, "POST", "/api/sessions", Some(json!({"reader_id": "r", "level": "expert"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call_json(&app, "POST", "/api/sessions", Some(json!({"reader_id": "r", "level": "mid", "truth": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("truth"));

    let id = create(&app, "r1", "mid").await;
    let uri = format!("/api/sessions/{id}/verdicts");
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({"case_id": "case-999", "verdict": "real"}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_case")));
    let (s, v) = call_json(&app, "GET", "/api/report", None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("no_completed_sessions")));
    let (s, _) = call_json(&app, "GET", "/api/report?grouping=site", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    call(&app, "POST", &format!("/api/sessions/{id}/close"), None).await;
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({"case_id": cs.cases[0].id, "verdict": "real"}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("session_closed")));
    let (s, _) = call_json(&app, "GET", "/api/report?format=xml", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // A closed session with no verdicts reports every case as unanswered.
    let (s, v) = call_json(&app, "GET", "/api/report?grouping=total", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["rows"][0]["unanswered"], 90);
    assert_eq!(v["rows"][0]["counts"]["n_total"], 0);
}

#[tokio::test]
async fn sessions_resume_after_restart_and_allow_revisits() {
    let (tmp, _) = setup();
    let first = app(tmp.path());
    let id = create(&first, "r1", "junior").await;
    let (_, v) = call_json(&first, "GET", &format!("/api/sessions/{id}"), None).await;
    let order: Vec<String> = serde_json::from_value(v["case_order"].clone()).unwrap();
    for cid in &order[..30] {
        call(&first, "POST", &format!("/api/sessions/{id}/verdicts"), Some(json!({"case_id": cid, "verdict": "real"}))).await;
    }
    drop(first);

    let second = app(tmp.path());
    let (_, v) = call_json(&second, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!((v["answered"].as_u64(), v["next"]["position"].as_u64()), (Some(30), Some(30)));
    assert_eq!(v["next"]["case"]["case_id"].as_str(), Some(order[30].as_str()));
    let (_, v) = call_json(&second, "GET", &format!("/api/sessions/{id}/cases/{}", order[3]), None).await;
    assert_eq!((v["position"].as_u64(), v["verdict"].as_str()), (Some(3), Some("real")));

    // A second reader gets a different, but reproducible, order.
    let other = create(&second, "r2", "junior").await;
    let (_, v) = call_json(&second, "GET", &format!("/api/sessions/{other}"), None).await;
    let order2: Vec<String> = serde_json::from_value(v["case_order"].clone()).unwrap();
    assert_ne!(order, order2);
    let fresh = tempfile::tempdir().unwrap();
    case_dir(&fresh.path().join("cases"));
    let third = app(fresh.path());
    let again = create(&third, "r1", "junior").await;
    let (_, v) = call_json(&third, "GET", &format!("/api/sessions/{again}"), None).await;
    assert_eq!(serde_json::from_value::<Vec<String>>(v["case_order"].clone()).unwrap(), order);
}
