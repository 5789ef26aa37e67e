use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use rigfit_cli::service::{self, AppState};
use rigfit_core::fit_single::{FitConfig, Observation2D};
use rigfit_core::synth::{self, PoseSampler, LEFT_WRIST};
use rigfit_core::{camera, rig, Camera, RigParams};

fn app(dir: &std::path::Path) -> Router {
    let state = Arc::new(AppState::open(Some(dir)).unwrap());
    service::router(state, service::cors(None).unwrap())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

struct Fixture {
    camera: Camera,
    params: RigParams,
    keypoints: Vec<Observation2D>,
}

/// Ground-truth pose seen by one camera, with every joint as a keypoint.
fn fixture(seed: u64) -> Fixture {
    let rig = synth::make_default_rig(0);
    let k = camera::intrinsics_from_fov(50.0, 1024, 1024).unwrap();
    let camera = camera::camera_ring(1, 3.5, [0.0, 0.9, 0.0], &k).remove(0);
    let mut params = synth::sample_params(&rig, &PoseSampler::Natural { spread: 0.25 }, seed);
    params.pose[0][1] = 0.3;
    let fk = rig::forward_kinematics(&rig, &params).unwrap();
    let keypoints = fk
        .positions
        .iter()
        .enumerate()
        .map(|(j, p)| Observation2D::new(j, camera.project(*p).unwrap()))
        .collect();
    Fixture {
        camera,
        params,
        keypoints,
    }
}

fn create_body(f: &Fixture) -> Value {
    json!({
        "image_ref": "frames/0001.png",
        "width": 1024,
        "height": 1024,
        "rig_id": "default",
        "camera": f.camera,
        "init_params": f.params,
        "keypoints": f.keypoints,
    })
}

async fn create(app: &Router, f: &Fixture) -> String {
    let (st, v) = call(app, Method::POST, "/v1/sessions", Some(create_body(f))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_and_rigs() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (st, v) = call(&app, Method::GET, "/v1/health", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (st, v) = call(&app, Method::GET, "/v1/rigs", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["rigs"][0]["id"], "default");
    assert_eq!(v["rigs"][0]["joints"].as_array().unwrap().len(), 54);
}

#[tokio::test]
async fn create_then_get_echoes_the_payload() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let f = fixture(1);
    let id = create(&app, &f).await;
    let (st, s) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(s["id"], id.as_str());
    assert_eq!(s["image"]["reference"], "frames/0001.png");
    assert_eq!(s["image"]["width"], 1024);
    assert_eq!(s["rig_id"], "default");
    assert_eq!(s["camera"], serde_json::to_value(&f.camera).unwrap());
    assert_eq!(s["params"], serde_json::to_value(&f.params).unwrap());
    assert_eq!(s["keypoints"], serde_json::to_value(&f.keypoints).unwrap());
    assert_eq!(s["history"], json!([]));
    assert_eq!(s["dirty"], false);
    let (_, again) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(again, s);
}

#[tokio::test]
async fn defaults_fill_in_camera_and_pose() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (st, v) = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"image_ref": "https://example.org/a.jpg", "width": 640, "height": 480})),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    let s = &v["session"];
    assert_eq!(s["rig_id"], "default");
    assert_eq!(s["keypoints"], json!([]));
    let id = v["session_id"].as_str().unwrap();
    let (st, o) = call(&app, Method::GET, &format!("/v1/sessions/{id}/overlay"), None).await;
    assert_eq!(st, StatusCode::OK);
    // The rest pose is in front of the default camera and inside the image.
    let joints = o["joints2d"].as_array().unwrap();
    assert_eq!(joints.len(), 54);
    for j in joints {
        let (u, v) = (j["u"].as_f64().unwrap(), j["v"].as_f64().unwrap());
        assert!((0.0..640.0).contains(&u) && (0.0..480.0).contains(&v), "{j}");
    }
}

#[tokio::test]
async fn errors_have_the_documented_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (st, v) = call(&app, Method::GET, "/v1/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], 404);
    let (st, _) = call(&app, Method::POST, "/v1/sessions/nope/fit", Some(json!({}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, Method::GET, "/v1/nothing", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (st, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({"image_ref": "a", "width": "wide", "height": 4}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "width");
    let (st, _) = call(&app, Method::POST, "/v1/sessions", Some(json!({"image_ref": "a", "width": 4, "height": 4, "extra": 1}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, Method::POST, "/v1/sessions", Some(json!({"image_ref": "a", "width": 4, "height": 4, "rig_id": "zzz"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let f = fixture(2);
    let id = create(&app, &f).await;
    let (st, v) = call(
        &app,
        Method::PUT,
        &format!("/v1/sessions/{id}/keypoints"),
        Some(json!({"keypoints": [{"id": 100000, "u": 1.0, "v": 2.0}]})),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "keypoints[0]");
    let (st, v) = call(&app, Method::POST, &format!("/v1/sessions/{id}/fit"), Some(json!({"mode": "sideways"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "mode");
}

#[tokio::test]
async fn put_merges_over_prior_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let f = fixture(3);
    let id = create(&app, &f).await;
    let edit = json!({"keypoints": [
        {"id": 5, "u": 10.0, "v": 20.0, "visible": false, "prompt": false},
        {"id": 60, "u": 11.0, "v": 21.0, "visible": true, "prompt": true},
    ]});
    let (st, put) = call(&app, Method::PUT, &format!("/v1/sessions/{id}/keypoints"), Some(edit)).await;
    assert_eq!(st, StatusCode::OK);
    let (_, got) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(put, got);
    let mut expect = f.keypoints.clone();
    expect[5] = Observation2D {
        visible: false,
        ..Observation2D::new(5, [10.0, 20.0])
    };
    expect.push(Observation2D {
        prompt: true,
        ..Observation2D::new(60, [11.0, 21.0])
    });
    assert_eq!(got["keypoints"], serde_json::to_value(&expect).unwrap());
    assert_eq!(got["dirty"], true);
}

#[tokio::test]
async fn all_invisible_is_unprocessable() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let f = fixture(4);
    let id = create(&app, &f).await;
    let hidden: Vec<Value> = f
        .keypoints
        .iter()
        .map(|k| json!({"id": k.id, "u": k.u, "v": k.v, "visible": false}))
        .collect();
    call(&app, Method::PUT, &format!("/v1/sessions/{id}/keypoints"), Some(json!({ "keypoints": hidden }))).await;
    let (st, v) = call(&app, Method::POST, &format!("/v1/sessions/{id}/fit"), Some(json!({"mode": "full"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let (st, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/fit"), Some(json!({"mode": "prompted"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, s) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s["history"], json!([]));
}

#[tokio::test]
async fn prompted_edit_moves_the_overlay_joint() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let f = fixture(5);
    let id = create(&app, &f).await;
    let k = &f.keypoints[LEFT_WRIST];
    let target = [k.u + 30.0, k.v];
    let edit = json!({"keypoints": [{"id": LEFT_WRIST, "u": target[0], "v": target[1], "visible": true, "prompt": true}]});
    call(&app, Method::PUT, &format!("/v1/sessions/{id}/keypoints"), Some(edit)).await;
    let (st, r) = call(&app, Method::POST, &format!("/v1/sessions/{id}/fit"), Some(json!({"mode": "prompted"}))).await;
    assert_eq!(st, StatusCode::OK, "{r}");
    assert!(r["losses"]["kp2d"].is_number());
    assert_eq!(r["session"]["history"].as_array().unwrap().len(), 1);
    assert_eq!(r["session"]["dirty"], false);
    let (_, o) = call(&app, Method::GET, &format!("/v1/sessions/{id}/overlay"), None).await;
    let j = o["joints2d"].as_array().unwrap().iter().find(|j| j["id"] == LEFT_WRIST).unwrap();
    let d = (j["u"].as_f64().unwrap() - target[0]).hypot(j["v"].as_f64().unwrap() - target[1]);
    assert!(d < 2.0, "overlay wrist is {d} px from the edit");
    assert_eq!(o["bones"].as_array().unwrap().len(), 53);
    assert!(!o["vertices2d_sample"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn hiding_a_keypoint_drops_one_residual_pair() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let f = fixture(6);
    let id = create(&app, &f).await;
    let (_, a) = call(&app, Method::POST, &format!("/v1/sessions/{id}/fit"), Some(json!({}))).await;
    let k = &f.keypoints[7];
    let edit = json!({"keypoints": [{"id": 7, "u": k.u, "v": k.v, "visible": false}]});
    call(&app, Method::PUT, &format!("/v1/sessions/{id}/keypoints"), Some(edit)).await;
    let (_, b) = call(&app, Method::POST, &format!("/v1/sessions/{id}/fit"), Some(json!({}))).await;
    assert_eq!(a["residual_count"].as_u64().unwrap() - b["residual_count"].as_u64().unwrap(), 2);
    assert_eq!(b["session"]["history"].as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_fits_on_one_session_conflict_once() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let f = fixture(7);
    let mut perturbed = f.params.clone();
    for p in perturbed.pose.iter_mut().skip(1) {
        p[0] += 0.05;
    }
    let mut body = create_body(&f);
    body["init_params"] = serde_json::to_value(&perturbed).unwrap();
    let (_, v) = call(&app, Method::POST, "/v1/sessions", Some(body)).await;
    let id = v["session_id"].as_str().unwrap().to_string();
    let uri = format!("/v1/sessions/{id}/fit");
    let (a, b) = tokio::join!(
        call(&app, Method::POST, &uri, Some(json!({"mode": "full"}))),
        call(&app, Method::POST, &uri, Some(json!({"mode": "full"}))),
    );
    let codes = [a.0, b.0];
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::CONFLICT).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::OK).count(), 1, "{codes:?}");
    let (_, s) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s["history"].as_array().unwrap().len(), 1);
    // The flag is released: a later fit runs.
    let (st, _) = call(&app, Method::POST, &uri, Some(json!({"mode": "full"}))).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sessions_fit_independently() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let fixtures = [fixture(8), fixture(9), fixture(10)];
    let mut ids = Vec::new();
    for f in &fixtures {
        let mut body = create_body(f);
        let mut p = f.params.clone();
        p.pose[3][0] += 0.1;
        body["init_params"] = serde_json::to_value(&p).unwrap();
        let (_, v) = call(&app, Method::POST, "/v1/sessions", Some(body)).await;
        ids.push(v["session_id"].as_str().unwrap().to_string());
    }
    let uris: Vec<String> = ids.iter().map(|id| format!("/v1/sessions/{id}/fit")).collect();
    let (a, b, c) = tokio::join!(
        call(&app, Method::POST, &uris[0], Some(json!({}))),
        call(&app, Method::POST, &uris[1], Some(json!({}))),
        call(&app, Method::POST, &uris[2], Some(json!({}))),
    );
    let rig = synth::make_default_rig(0);
    for ((st, v), id) in [a, b, c].into_iter().zip(&ids) {
        assert_eq!(st, StatusCode::OK);
        let i = ids.iter().position(|x| x == id).unwrap();
        let mut init = fixtures[i].params.clone();
        init.pose[3][0] += 0.1;
        let snapshot = service::Session {
            id: id.clone(),
            image: service::ImageRef {
                reference: "frames/0001.png".into(),
                width: 1024,
                height: 1024,
            },
            rig_id: "default".into(),
            camera: fixtures[i].camera.clone(),
            keypoints: fixtures[i].keypoints.clone(),
            params: init,
            history: vec![],
            dirty: false,
        };
        let serial = service::run_fit(&rig, &snapshot, service::FitMode::Full, &FitConfig::default()).unwrap();
        assert_eq!(v["params"], serde_json::to_value(&serial.params).unwrap());
    }
}

#[tokio::test]
async fn journal_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(11);
    let (id, state) = {
        let app = app(dir.path());
        let id = create(&app, &f).await;
        let edit = json!({"keypoints": [{"id": 3, "u": 1.0, "v": 2.0}]});
        call(&app, Method::PUT, &format!("/v1/sessions/{id}/keypoints"), Some(edit)).await;
        call(&app, Method::POST, &format!("/v1/sessions/{id}/fit"), Some(json!({}))).await;
        let (_, s) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
        (id, s)
    };
    let files: Vec<_> = std::fs::read_dir(dir.path().join("sessions")).unwrap().collect();
    assert_eq!(files.len(), 1);
    let app = app(dir.path());
    let (st, s) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(s, state);
    assert_eq!(s["history"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState::open(Some(dir.path())).unwrap());
    let app = service::router(state, service::cors(Some("http://localhost:5173")).unwrap());
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/v1/sessions")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    let h = resp.headers();
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");
    assert!(h[header::ACCESS_CONTROL_ALLOW_METHODS].to_str().unwrap().contains("PUT"));

    let req = Request::builder()
        .uri("/v1/health")
        .header(header::ORIGIN, "http://elsewhere.test")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    // A foreign origin is never echoed back.
    let allowed = resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN);
    assert!(allowed.is_none_or(|v| v == "http://localhost:5173"));
}
