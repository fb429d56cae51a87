#![allow(dead_code)]

//! A scriptable HTTP/1.1 server standing in for the model service.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub headers: HashMap<String, String>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(name).map(String::as_str)
    }
}

pub enum Reply {
    Json(u16, Value),
    Raw(u16, String),
    /// Close the connection without answering.
    Drop,
    /// Sleep, then answer.
    Delay(Duration, Box<Reply>),
}

type Handler = dyn Fn(&Request, usize) -> Reply + Send + Sync;

pub struct FixtureServer {
    pub url: String,
    log: Arc<Mutex<Vec<Request>>>,
    stop: Arc<AtomicBool>,
}

impl FixtureServer {
    /// `handler` receives each request and the number of earlier requests.
    pub fn start(handler: impl Fn(&Request, usize) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log: Arc<Mutex<Vec<Request>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        {
            let log = log.clone();
            let stop = stop.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let log = log.clone();
                    let handler = handler.clone();
                    thread::spawn(move || serve(stream, &*handler, &log));
                }
            });
        }
        FixtureServer { url, log, stop }
    }

    pub fn requests(&self) -> Vec<Request> {
        self.log.lock().unwrap().clone()
    }

    pub fn count(&self, path: &str) -> usize {
        self.requests().iter().filter(|r| r.path == path).count()
    }
}

impl Drop for FixtureServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = TcpStream::connect(self.url.trim_start_matches("http://"));
    }
}

fn read_request(stream: &TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = HashMap::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        method,
        path,
        headers,
        body,
    })
}

fn serve(mut stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Request>>) {
    let Some(req) = read_request(&stream) else { return };
    let seen = {
        let mut log = log.lock().unwrap();
        log.push(req.clone());
        log.len() - 1
    };
    let mut reply = handler(&req, seen);
    loop {
        match reply {
            Reply::Delay(d, inner) => {
                thread::sleep(d);
                reply = *inner;
            }
            Reply::Drop => return,
            Reply::Json(status, v) => return respond(&mut stream, status, &v.to_string()),
            Reply::Raw(status, body) => return respond(&mut stream, status, &body),
        }
    }
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let head = format!(
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body.as_bytes());
    let _ = stream.flush();
}

pub const DIM: usize = 3;

fn hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

/// Vector the fixture's default embedder ("clip") assigns to content.
pub fn clip_vector(content: &[u8]) -> Vec<f64> {
    let h = hash(content);
    vec![1.0 + (h % 97) as f64, 1.0 + ((h >> 8) % 89) as f64, 1.0 + ((h >> 16) % 83) as f64]
}

/// Vector of the secondary embedder ("dino", 4 dimensions).
pub fn dino_vector(content: &[u8]) -> Vec<f64> {
    let h = hash(content);
    vec![
        2.0 + (h % 13) as f64,
        1.0 + ((h >> 4) % 11) as f64,
        3.0 + ((h >> 12) % 7) as f64,
        1.0 + ((h >> 20) % 5) as f64,
    ]
}

pub fn content_for(prompt: &str, seed: u64, i: usize) -> Vec<u8> {
    format!("{prompt}|{seed}|{i}").into_bytes()
}

/// A conforming service: deterministic generate, embed for "clip" and "dino".
pub fn echo(req: &Request) -> Reply {
    let b64 = base64::engine::general_purpose::STANDARD;
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/v1/health") => Reply::Json(
            200,
            json!({"status": "ok", "dim": DIM, "model": "fixture-gen", "embedders": ["clip", "dino"]}),
        ),
        ("POST", "/v1/generate") => {
            let body = req.json();
            let prompt = body["prompt"].as_str().unwrap_or_default().to_string();
            let seed = body["seed"].as_u64().unwrap_or_default();
            let count = body["count"].as_u64().unwrap_or_default() as usize;
            let with_content = body["return_content"].as_bool().unwrap_or(false);
            if count == 0 {
                return Reply::Json(400, json!({"error": "count must be positive"}));
            }
            let items: Vec<Value> = (0..count)
                .map(|i| {
                    let c = content_for(&prompt, seed, i);
                    json!({
                        "id": format!("img-{seed:x}-{i}"),
                        "embedding": clip_vector(&c),
                        "content_b64": if with_content { Value::from(b64.encode(&c)) } else { Value::Null },
                    })
                })
                .collect();
            Reply::Json(200, json!({"items": items, "dim": DIM, "model": "fixture-gen"}))
        }
        ("POST", "/v1/embed") => {
            let body = req.json();
            let embedder = body["embedder"].as_str().unwrap_or_default().to_string();
            let f: fn(&[u8]) -> Vec<f64> = match embedder.as_str() {
                "clip" => clip_vector,
                "dino" => dino_vector,
                _ => return Reply::Json(400, json!({"error": "unknown embedder"})),
            };
            let mut dim = 0;
            let embeddings: Vec<Value> = body["items"]
                .as_array()
                .cloned()
                .unwrap_or_default()
                .iter()
                .map(|it| {
                    let bytes = b64.decode(it["content_b64"].as_str().unwrap_or_default()).unwrap_or_default();
                    let v = f(&bytes);
                    dim = v.len();
                    json!({"id": it["id"], "values": v})
                })
                .collect();
            Reply::Json(200, json!({"embeddings": embeddings, "dim": dim, "embedder": embedder}))
        }
        _ => Reply::Json(404, json!({"error": "not found"})),
    }
}
