use std::collections::BTreeMap;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use sketchstyle::data::components::Category;
use sketchstyle::data::raster::{decode_gray_png, decode_rgb_png, encode_gray_png, encode_labels_png, encode_sketch_png};
use sketchstyle::data::components::extract_map_contour;
use sketchstyle::data::{generate_procedural_corpus, ColorImage, LabelSchema, SegmenterTraining};
use sketchstyle::model::{EncoderConfig, Generator, GeneratorConfig, ScModel};
use sketchstyle::pipeline::{corpus_components, global_items, procedural_dataset, train_segmenter};
use sketchstyle::retrieval::{component_items, EmbedderConfig, RetrievalIndex, SketchEmbedder};
use sketchstyle::service::{router, AppState, Artifacts, IndexBundle};

fn artifacts(with_model: bool) -> Artifacts {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Generator::new(&GeneratorConfig::desk(), &mut rng, &dev).unwrap();
    let styles = g
        .sample_styles(&mut rng, 3)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("s{i}"), s))
        .collect();
    let model = ScModel::new(g, &EncoderConfig::desk(), &mut rng).unwrap();

    let corpus = procedural_dataset(30, 30, 1, 64).unwrap();
    let ge = SketchEmbedder::new(EmbedderConfig::global(), &dev).unwrap();
    let global = RetrievalIndex::build("global", &ge, global_items(&corpus).unwrap()).unwrap();
    let comps = corpus_components(&corpus).unwrap();
    let ce = SketchEmbedder::new(EmbedderConfig::component("nose"), &dev).unwrap();
    let nose = RetrievalIndex::build("nose", &ce, component_items(&comps, Category::Nose, 32)).unwrap();
    let mut components = BTreeMap::new();
    components.insert(Category::Nose, IndexBundle { index: nose, embedder: ce });
    Artifacts {
        model: with_model.then_some(model),
        styles,
        segmenter: None,
        global: Some(IndexBundle { index: global, embedder: ge }),
        components,
    }
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).expect("every response is JSON"))
}

async fn post(app: &axum::Router, uri: &str, v: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(v.to_string())).await
}

fn b64(bytes: Vec<u8>) -> String {
    B64.encode(bytes)
}

fn condition_pngs(res: usize) -> (String, String) {
    let s = generate_procedural_corpus(1, 9, res).pop().unwrap();
    let sketch = sketchstyle::data::extract_sketch(&s.image);
    (
        b64(encode_sketch_png(&sketch, res).unwrap()),
        b64(encode_labels_png(&s.labels, res, &LabelSchema::desk()).unwrap()),
    )
}

fn assert_error(status: StatusCode, body: &Value, want: StatusCode, code: &str) {
    assert_eq!(status, want, "{body}");
    assert_eq!(body["code"], code);
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[tokio::test]
async fn health_and_styles() {
    let app = router(AppState::new(artifacts(true)).unwrap());
    let (st, h) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(h, json!({"status": "ok", "model_loaded": true, "index_loaded": true}));
    let (st, s) = call(&app, Method::GET, "/styles", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(s["default"], "s0");
    let list = s["styles"].as_array().unwrap();
    assert_eq!(list.len(), 3);
    let thumb = decode_rgb_png(&B64.decode(list[1]["thumbnail_png"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(thumb.res, 64);
}

#[tokio::test]
async fn generate_is_deterministic_and_validates() {
    let app = router(AppState::new(artifacts(true)).unwrap());
    let (sk, lb) = condition_pngs(64);
    let req = json!({"sketch_png": sk, "labels_png": lb, "style_ref": "s2"});
    let (st, a) = post(&app, "/generate", req.clone()).await;
    assert_eq!(st, StatusCode::OK, "{a}");
    let (_, b) = post(&app, "/generate", req).await;
    assert_eq!(a["image_png"], b["image_png"]);
    let img = decode_rgb_png(&B64.decode(a["image_png"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(img.res, 64);

    let low = GeneratorConfig::desk().low_style_count();
    let rows = vec![vec![0.1f32; 64]; low];
    let (st, _) = post(&app, "/generate", json!({"sketch_png": sk, "labels_png": lb, "style_ref": rows})).await;
    assert_eq!(st, StatusCode::OK);
    let bad_rows = vec![vec![0.1f32; 63]; low];
    let (st, e) = post(&app, "/generate", json!({"sketch_png": sk, "labels_png": lb, "style_ref": bad_rows})).await;
    assert_error(st, &e, StatusCode::UNPROCESSABLE_ENTITY, "unprocessable");

    let (st, e) = post(&app, "/generate", json!({"sketch_png": sk, "labels_png": lb, "style_ref": "nope"})).await;
    assert_error(st, &e, StatusCode::UNPROCESSABLE_ENTITY, "unprocessable");

    let (sk32, lb32) = condition_pngs(32);
    let (st, e) = post(&app, "/generate", json!({"sketch_png": sk32, "labels_png": lb32})).await;
    assert_error(st, &e, StatusCode::UNPROCESSABLE_ENTITY, "unprocessable");

    let (st, e) = post(&app, "/generate", json!({"sketch_png": "%%%", "labels_png": lb})).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");

    let (st, e) = post(&app, "/generate", json!({"sketch_png": b64(vec![1, 2, 3]), "labels_png": lb})).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");

    let (st, e) = call(&app, Method::POST, "/generate", Some("{not json".into())).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");
}

#[tokio::test]
async fn missing_artifacts_are_unavailable() {
    let mut a = artifacts(false);
    a.global = None;
    let app = router(AppState::new(a).unwrap());
    let (sk, lb) = condition_pngs(64);
    let (st, e) = post(&app, "/generate", json!({"sketch_png": sk, "labels_png": lb})).await;
    assert_error(st, &e, StatusCode::SERVICE_UNAVAILABLE, "unavailable");
    let (st, e) = post(&app, "/retrieve/global", json!({"pose": {"yaw": 0.0, "pitch": 0.0, "roll": 0.0}})).await;
    assert_error(st, &e, StatusCode::SERVICE_UNAVAILABLE, "unavailable");
    let img = generate_procedural_corpus(1, 2, 64).pop().unwrap().image;
    let png = b64(sketchstyle::data::raster::encode_rgb_png(&img).unwrap());
    let (st, e) = post(&app, "/extract", json!({"image_png": png})).await;
    assert_error(st, &e, StatusCode::SERVICE_UNAVAILABLE, "unavailable");
    let (st, h) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(h["model_loaded"], false);
}

#[tokio::test]
async fn global_retrieval() {
    let app = router(AppState::new(artifacts(false)).unwrap());
    let pose = json!({"yaw": 10.0, "pitch": -5.0, "roll": 0.0});
    let (st, r) = post(&app, "/retrieve/global", json!({"pose": pose, "k": 5})).await;
    assert_eq!(st, StatusCode::OK, "{r}");
    assert_eq!(r["candidate_ids"].as_array().unwrap().len(), 5);
    let (shadow, w, h) = decode_gray_png(&B64.decode(r["shadow_png"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!((w, h), (64, 64));
    assert!(shadow.iter().any(|&v| v > 0.0));

    let strokes = b64(encode_gray_png(&vec![0.0; 48 * 48], 48, 48).unwrap());
    let (st, r2) = post(&app, "/retrieve/global", json!({"pose": pose, "k": 5, "strokes_png": strokes})).await;
    assert_eq!(st, StatusCode::OK, "{r2}");
    let mut a: Vec<_> = r["candidate_ids"].as_array().unwrap().clone().into_iter().map(|v| v.to_string()).collect();
    let mut b: Vec<_> = r2["candidate_ids"].as_array().unwrap().clone().into_iter().map(|v| v.to_string()).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b, "reranking only reorders");

    let (_, d) = post(&app, "/retrieve/global", json!({"pose": pose})).await;
    assert_eq!(d["candidate_ids"].as_array().unwrap().len(), 20);

    let (st, e) = post(&app, "/retrieve/global", json!({"pose": {"yaw": 60.0, "pitch": 0.0, "roll": 0.0}})).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");
    let (st, e) = post(&app, "/retrieve/global", json!({"pose": pose, "k": 0})).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");
    let (st, e) = post(&app, "/retrieve/global", json!({"pose": pose, "k": 201})).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");
    let (st, e) = post(&app, "/retrieve/global", json!({"pose": pose, "extra": 1})).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");
}

#[tokio::test]
async fn component_retrieval() {
    let app = router(AppState::new(artifacts(false)).unwrap());
    let patch = b64(encode_gray_png(&vec![0.0; 20 * 12], 20, 12).unwrap());
    let (st, r) = post(&app, "/retrieve/component", json!({"category": "nose", "patch_png": patch, "k": 4})).await;
    assert_eq!(st, StatusCode::OK, "{r}");
    let c = r["candidates"].as_array().unwrap();
    assert_eq!(c.len(), 4);
    for cand in c {
        assert!(cand["id"].as_str().unwrap().ends_with(":nose"));
        let (_, w, h) = decode_gray_png(&B64.decode(cand["patch_png"].as_str().unwrap()).unwrap()).unwrap();
        assert_eq!((w, h), (32, 32));
        assert!(cand["rect"]["w"].as_u64().unwrap() > 0);
    }
    let (_, again) = post(&app, "/retrieve/component", json!({"category": "nose", "patch_png": patch, "k": 4})).await;
    assert_eq!(r, again);

    let (st, e) = post(&app, "/retrieve/component", json!({"category": "tail", "patch_png": patch})).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");
    let (st, e) = post(&app, "/retrieve/component", json!({"category": "mouth", "patch_png": patch})).await;
    assert_error(st, &e, StatusCode::SERVICE_UNAVAILABLE, "unavailable");
}

#[tokio::test]
async fn unknown_routes_and_methods_are_json() {
    let app = router(AppState::new(artifacts(false)).unwrap());
    let (st, e) = call(&app, Method::GET, "/nope", None).await;
    assert_error(st, &e, StatusCode::NOT_FOUND, "not_found");
    let (st, e) = call(&app, Method::GET, "/generate", None).await;
    assert_error(st, &e, StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed");
}

#[tokio::test]
async fn styles_and_blank_conditions() {
    let app = router(AppState::new(artifacts(true)).unwrap());
    let (sk, lb) = condition_pngs(64);
    let (_, a) = post(&app, "/generate", json!({"sketch_png": sk, "labels_png": lb, "style_ref": "s0"})).await;
    let (_, b) = post(&app, "/generate", json!({"sketch_png": sk, "labels_png": lb, "style_ref": "s1"})).await;
    assert_ne!(a["image_png"], b["image_png"]);
    let (_, d) = post(&app, "/generate", json!({"sketch_png": sk, "labels_png": lb})).await;
    assert_eq!(a["image_png"], d["image_png"], "the first catalog style is the default");

    let blank = b64(encode_sketch_png(&vec![0.0; 64 * 64], 64).unwrap());
    let bg = b64(encode_labels_png(&vec![0; 64 * 64], 64, &LabelSchema::desk()).unwrap());
    let (st, r) = post(&app, "/generate", json!({"sketch_png": blank, "labels_png": bg})).await;
    assert_eq!(st, StatusCode::OK, "{r}");
}

#[tokio::test]
async fn concurrent_generation_matches_serial() {
    let app = router(AppState::new(artifacts(true)).unwrap());
    let (sk, lb) = condition_pngs(64);
    let reqs: Vec<Value> = ["s0", "s1", "s2", "s1"]
        .iter()
        .map(|id| json!({"sketch_png": sk, "labels_png": lb, "style_ref": id}))
        .collect();
    let mut serial = Vec::new();
    for r in &reqs {
        serial.push(post(&app, "/generate", r.clone()).await.1);
    }
    let handles: Vec<_> = reqs
        .into_iter()
        .map(|r| {
            let app = app.clone();
            tokio::spawn(async move { post(&app, "/generate", r).await.1 })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(serial) {
        assert_eq!(h.await.unwrap(), want);
    }
}

#[tokio::test]
async fn stored_contour_reranks_first() {
    let app = router(AppState::new(artifacts(false)).unwrap());
    let corpus = procedural_dataset(30, 30, 1, 64).unwrap();
    let target = &corpus[17];
    let strokes = b64(encode_gray_png(&extract_map_contour(&target.labels, 64), 64, 64).unwrap());
    let pose = json!({"yaw": 0.0, "pitch": 0.0, "roll": 0.0});
    let (st, r) = post(&app, "/retrieve/global", json!({"pose": pose, "k": 30, "strokes_png": strokes})).await;
    assert_eq!(st, StatusCode::OK, "{r}");
    assert_eq!(r["candidate_ids"][0], target.id.as_str());
}

#[tokio::test]
async fn extraction_uses_the_segmenter() {
    let corpus = generate_procedural_corpus(24, 5, 64);
    let (seg, _) = train_segmenter(
        &corpus,
        20,
        SegmenterTraining {
            steps: 10,
            ..Default::default()
        },
        &Device::Cpu,
    )
    .unwrap();
    let mut a = artifacts(false);
    a.segmenter = Some(seg);
    let app = router(AppState::new(a).unwrap());

    let flat = ColorImage::filled(64, [0.4, 0.5, 0.6]);
    let png = b64(sketchstyle::data::raster::encode_rgb_png(&flat).unwrap());
    let (st, r) = post(&app, "/extract", json!({"image_png": png})).await;
    assert_eq!(st, StatusCode::OK, "{r}");
    let (sketch, w, h) = decode_gray_png(&B64.decode(r["sketch_png"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!((w, h), (64, 64));
    assert!(sketch.iter().all(|&v| v == 0.0));
    let (labels, res) =
        sketchstyle::data::raster::decode_labels_png(&B64.decode(r["labels_png"].as_str().unwrap()).unwrap(), &LabelSchema::desk())
            .unwrap();
    assert_eq!((labels.len(), res), (64 * 64, 64));

    let face = b64(sketchstyle::data::raster::encode_rgb_png(&corpus[0].image).unwrap());
    let (st, r) = post(&app, "/extract", json!({"image_png": face})).await;
    assert_eq!(st, StatusCode::OK);
    let (sketch, _, _) = decode_gray_png(&B64.decode(r["sketch_png"].as_str().unwrap()).unwrap()).unwrap();
    assert!(sketch.contains(&1.0));
    let (st, e) = post(&app, "/extract", json!({"image_png": b64(vec![0; 8])})).await;
    assert_error(st, &e, StatusCode::BAD_REQUEST, "bad_request");
}
