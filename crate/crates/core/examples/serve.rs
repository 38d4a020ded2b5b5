//! Starts the HTTP service on a free port with a random generator and a
//! small global index, then acts as a client for each endpoint.
//!
//! `cargo run --release --example serve`

use std::io::{Read, Write};
use std::net::TcpStream;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sketchstyle::data::raster::{encode_labels_png, encode_sketch_png};
use sketchstyle::data::LabelSchema;
use sketchstyle::model::{EncoderConfig, Generator, GeneratorConfig, ScModel};
use sketchstyle::pipeline::{global_bundle, procedural_dataset};
use sketchstyle::service::{serve_on, AppState, Artifacts};

fn request(addr: &str, method: &str, path: &str, body: Option<&Value>) -> Value {
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let (head, payload) = raw.split_once("\r\n\r\n").unwrap();
    println!("{method} {path} -> {}", head.lines().next().unwrap());
    serde_json::from_str(payload).unwrap()
}

fn main() -> sketchstyle::Result<()> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Generator::new(&GeneratorConfig::desk(), &mut rng, &dev)?;
    let styles = g
        .sample_styles(&mut rng, 2)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("style{i}"), s))
        .collect();
    let model = ScModel::new(g, &EncoderConfig::desk(), &mut rng)?;
    let corpus = procedural_dataset(120, 120, 3, 64)?;
    let (global, _) = global_bundle(&corpus, Default::default(), &dev)?;
    let artifacts = Artifacts {
        model: Some(model),
        styles,
        segmenter: None,
        global: Some(global),
        components: Default::default(),
    };
    let state = AppState::new(artifacts)?;

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?.to_string();
    rt.spawn(serve_on(listener, state));

    println!("{}", request(&addr, "GET", "/health", None));
    let styles = request(&addr, "GET", "/styles", None);
    println!("default style {}", styles["default"]);

    let s = &corpus[0];
    let req = json!({
        "sketch_png": B64.encode(encode_sketch_png(&s.sketch, 64)?),
        "labels_png": B64.encode(encode_labels_png(&s.labels, 64, &LabelSchema::desk())?),
        "style_ref": "style1",
    });
    let a = request(&addr, "POST", "/generate", Some(&req));
    let b = request(&addr, "POST", "/generate", Some(&req));
    println!("generated {} base64 chars, repeatable: {}", a["image_png"].as_str().unwrap().len(), a == b);

    let r = request(&addr, "POST", "/retrieve/global", Some(&json!({"pose": {"yaw": 0.0, "pitch": 0.0, "roll": 0.0}, "k": 4})));
    println!("candidates {}", r["candidate_ids"]);
    println!("{}", request(&addr, "POST", "/extract", Some(&json!({"image_png": ""}))));
    Ok(())
}
