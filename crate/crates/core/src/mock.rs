//! In-process HTTP stand-ins for the gloss model and the audio feature
//! service, used by tests and local experiments.

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use tiny_http::{Header, Response, Server};

#[derive(Debug, Clone, Default)]
pub struct RecordedRequest {
    pub text: String,
    pub prompt: String,
    pub authorization: Option<String>,
    pub body_len: usize,
}

struct MockServer {
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    url: String,
}

impl MockServer {
    fn start(path: &str, reply: String) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind mock server"));
        let port = server
            .server_addr()
            .to_ip()
            .expect("tcp listener")
            .port();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let (srv, log) = (server.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = Vec::new();
                let _ = req.as_reader().read_to_end(&mut body);
                let mut rec = RecordedRequest {
                    body_len: body.len(),
                    authorization: req
                        .headers()
                        .iter()
                        .find(|h| h.field.equiv("Authorization"))
                        .map(|h| h.value.to_string()),
                    ..Default::default()
                };
                if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&body) {
                    rec.text = v["text"].as_str().unwrap_or_default().to_string();
                    rec.prompt = v["prompt"].as_str().unwrap_or_default().to_string();
                }
                log.lock().unwrap().push(rec);
                let header = Header::from_bytes("Content-Type", "application/json").unwrap();
                let _ = req.respond(Response::from_string(reply.clone()).with_header(header));
            }
        });
        Self {
            server,
            handle: Some(handle),
            requests,
            url: format!("http://127.0.0.1:{port}{path}"),
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Answers every request with a fixed gloss.
pub struct MockLlmServer(MockServer);

impl MockLlmServer {
    pub fn start(gloss: &str) -> Self {
        Self::start_raw(&serde_json::json!({ "gloss": gloss }).to_string())
    }

    /// Replies with an arbitrary body, for malformed-response tests.
    pub fn start_raw(body: &str) -> Self {
        Self(MockServer::start("/gloss", body.to_string()))
    }

    pub fn url(&self) -> &str {
        &self.0.url
    }

    pub fn last_request(&self) -> Option<RecordedRequest> {
        self.0.requests.lock().unwrap().last().cloned()
    }
}

/// Answers every request with a fixed feature matrix.
pub struct MockFeatureServer(MockServer);

impl MockFeatureServer {
    pub fn start(frames: &[Vec<f64>], hop: f64) -> Self {
        Self::start_raw(&serde_json::json!({ "frames": frames, "hop": hop }).to_string())
    }

    pub fn start_raw(body: &str) -> Self {
        Self(MockServer::start("/features", body.to_string()))
    }

    pub fn url(&self) -> &str {
        &self.0.url
    }

    pub fn request_count(&self) -> usize {
        self.0.requests.lock().unwrap().len()
    }

    pub fn last_request(&self) -> Option<RecordedRequest> {
        self.0.requests.lock().unwrap().last().cloned()
    }
}
