//! Read-only HTTP service over an index: `/search`, `/agg` and `/stats`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::json;

use crate::error::{Error, Result};
use crate::index::{AggField, Index};

/// How often a request may trigger a refresh to pick up new segments.
const REFRESH_EVERY: Duration = Duration::from_secs(1);

pub struct ServeHandle {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

impl ServeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServeHandle {
    fn drop(&mut self) {
        self.server.unblock();
    }
}

/// Serves `index`. A disk-backed index is refreshed at most once a second so
/// readers see newly committed batches.
pub fn serve_index(index: Index, addr: &str) -> Result<ServeHandle> {
    let server = tiny_http::Server::http(addr).map_err(|e| Error::Connection(format!("bind {addr}: {e}")))?;
    let local = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Connection("server has no IP address".into()))?;
    let server = Arc::new(server);
    let srv = server.clone();
    let state = Mutex::new((index, Instant::now()));
    let thread = thread::Builder::new().name("serve".into()).spawn(move || {
        for request in srv.incoming_requests() {
            let (code, body) = {
                let mut guard = state.lock().expect("index lock");
                let (index, refreshed) = &mut *guard;
                if index.dir().is_some() && refreshed.elapsed() >= REFRESH_EVERY {
                    let _ = index.refresh();
                    *refreshed = Instant::now();
                }
                respond(index, request.url())
            };
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
            let _ = request.respond(
                tiny_http::Response::from_string(body)
                    .with_status_code(code)
                    .with_header(header),
            );
        }
    })?;
    Ok(ServeHandle {
        addr: local,
        server,
        thread: Some(thread),
    })
}

fn query_params(url: &str) -> (String, HashMap<String, String>) {
    let parsed = url::Url::parse(&format!("http://localhost{url}"));
    match parsed {
        Ok(u) => (u.path().to_owned(), u.query_pairs().into_owned().collect()),
        Err(_) => (url.to_owned(), HashMap::new()),
    }
}

fn bad(message: impl std::fmt::Display) -> (u16, String) {
    (400, json!({ "error": message.to_string() }).to_string())
}

fn respond(index: &Index, url: &str) -> (u16, String) {
    let (path, params) = query_params(url);
    let count = |name: &str, default: usize| -> std::result::Result<usize, String> {
        match params.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("{name} must be a positive integer")),
        }
    };
    match path.as_str() {
        "/search" => {
            let q = params.get("q").map(String::as_str).unwrap_or("");
            let limit = match count("limit", 10) {
                Ok(l) => l,
                Err(e) => return bad(e),
            };
            match index.search(q, limit) {
                Ok(hits) => (200, serde_json::to_string(&hits).unwrap_or_default()),
                Err(e) => bad(e),
            }
        }
        "/agg" => {
            let field: AggField = match params.get("field").map(|f| f.parse()) {
                Some(Ok(f)) => f,
                Some(Err(e)) => return bad(e),
                None => return bad("field is required"),
            };
            let top = match count("top", 10) {
                Ok(t) => t,
                Err(e) => return bad(e),
            };
            (
                200,
                serde_json::to_string(&index.aggregate(field, top)).unwrap_or_default(),
            )
        }
        "/stats" => (200, json!({ "doc_count": index.doc_count() }).to_string()),
        _ => (404, json!({ "error": "not found" }).to_string()),
    }
}
