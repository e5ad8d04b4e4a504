//! Scoring service: newline-delimited JSON over TCP.
//!
//! Each request is one JSON object per line and receives one JSON object
//! back. The service answers from precomputed stores when ids are known;
//! with a model loaded, unknown ids (and explicit `qtext`/`ptext` fields)
//! are encoded on the fly through the same code paths the batch tools use,
//! so served scores never drift from offline ones. All request handling is
//! funneled through [`handle_request`], which is pure and socket-free.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::bow::{truncate, SparseBoW};
use crate::model::DeepBowModel;
use crate::scoring::{explain, score_q_synonym, score_q_weight, ScoreMode};
use crate::store::{truncate_sparse, BoWStore, Side};
use crate::vocab::Vocabulary;
use crate::{DeepBowError, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Everything a running service answers from. Stores and model are each
/// optional, but every loaded component must agree on its hashes.
pub struct ServiceState {
    queries: Option<BoWStore>,
    products: Option<BoWStore>,
    model: Option<(DeepBowModel, Vocabulary)>,
    threshold: f64,
}

impl ServiceState {
    pub fn new(
        queries: Option<BoWStore>,
        products: Option<BoWStore>,
        model: Option<(DeepBowModel, Vocabulary)>,
        threshold: f64,
    ) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(DeepBowError::Config("threshold must be finite".into()));
        }
        if let Some((model, vocab)) = &model {
            if model.vocab_hash != vocab.content_hash() {
                return Err(DeepBowError::Mismatch(
                    "model was built against a different vocabulary".into(),
                ));
            }
        }
        for (name, store) in [("query", &queries), ("product", &products)] {
            let Some(store) = store else { continue };
            if let Some((model, _)) = &model {
                if store.metadata.model_hash != model.content_hash() {
                    return Err(DeepBowError::Mismatch(format!(
                        "{name} store was precomputed with a different model checkpoint"
                    )));
                }
            }
        }
        if let (Some(q), Some(p)) = (&queries, &products) {
            if q.metadata.vocab_hash != p.metadata.vocab_hash {
                return Err(DeepBowError::Mismatch(
                    "query and product stores use different vocabularies".into(),
                ));
            }
        }
        Ok(ServiceState {
            queries,
            products,
            model,
            threshold,
        })
    }
}

#[derive(Deserialize)]
struct Request {
    op: String,
    mode: Option<String>,
    qid: Option<String>,
    qtext: Option<String>,
    pid: Option<String>,
    ptext: Option<String>,
    text: Option<String>,
    side: Option<String>,
}

enum ServeError {
    Protocol(String),
    NotFound(String),
    Config(String),
    Input(String),
}

impl ServeError {
    fn response(&self) -> Value {
        let (kind, message) = match self {
            ServeError::Protocol(m) => ("protocol", m),
            ServeError::NotFound(m) => ("not_found", m),
            ServeError::Config(m) => ("config", m),
            ServeError::Input(m) => ("input", m),
        };
        json!({"error": kind, "message": message})
    }
}

impl From<DeepBowError> for ServeError {
    fn from(e: DeepBowError) -> Self {
        match e {
            DeepBowError::NotFound(m) => ServeError::NotFound(m),
            DeepBowError::Input(m) => ServeError::Input(m),
            DeepBowError::Config(m) => ServeError::Config(m),
            other => ServeError::Input(other.to_string()),
        }
    }
}

/// Answers one request line with one response line (no trailing newline).
pub fn handle_request(state: &ServiceState, line: &str) -> String {
    let value = match dispatch(state, line) {
        Ok(v) => v,
        Err(e) => e.response(),
    };
    value.to_string()
}

fn dispatch(state: &ServiceState, line: &str) -> std::result::Result<Value, ServeError> {
    let request: Request = serde_json::from_str(line)
        .map_err(|e| ServeError::Protocol(format!("bad request JSON: {e}")))?;
    match request.op.as_str() {
        "score" => score_op(state, &request),
        "explain" => explain_op(state, &request),
        "encode" => encode_op(state, &request),
        other => Err(ServeError::Protocol(format!("unknown op `{other}`"))),
    }
}

fn parse_mode(mode: &Option<String>) -> std::result::Result<ScoreMode, ServeError> {
    match mode.as_deref() {
        None => Ok(ScoreMode::QSynonym),
        Some(s) => s
            .parse()
            .map_err(|_| ServeError::Protocol(format!("unknown mode `{s}`"))),
    }
}

/// Resolves one side of a pair to a representation: explicit text encodes
/// directly; an id hits the store first and falls back to encoding the id
/// string itself when a model is loaded.
fn resolve(
    state: &ServiceState,
    side: Side,
    mode: ScoreMode,
    id: &Option<String>,
    text: &Option<String>,
) -> std::result::Result<SparseBoW, ServeError> {
    let (label, store) = match side {
        Side::Query => ("q", &state.queries),
        Side::Product => ("p", &state.products),
    };
    match (id, text) {
        (None, Some(text)) => encode_side(state, side, mode, text),
        (Some(id), None) => {
            if let Some(bow) = store.as_ref().and_then(|s| s.get(id)) {
                return Ok(bow.clone());
            }
            if state.model.is_some() {
                return encode_side(state, side, mode, id);
            }
            Err(ServeError::NotFound(format!(
                "id `{id}` not in {side} store and no model loaded"
            )))
        }
        _ => Err(ServeError::Protocol(format!(
            "exactly one of `{label}id`/`{label}text` is required"
        ))),
    }
}

fn encode_side(
    state: &ServiceState,
    side: Side,
    mode: ScoreMode,
    text: &str,
) -> std::result::Result<SparseBoW, ServeError> {
    let Some((model, vocab)) = &state.model else {
        return Err(ServeError::Config(
            "encoding requires a loaded model".into(),
        ));
    };
    let enc = model.encode_text(vocab, text)?;
    let store = match side {
        Side::Query => &state.queries,
        Side::Product => &state.products,
    };
    let policy = store.as_ref().map(|s| s.metadata.truncation);
    let bow = match (side, mode) {
        (Side::Query, ScoreMode::QWeight) => {
            let tw = model.tw_bow(&enc)?;
            match &policy {
                Some(p) => truncate_sparse(&tw, p),
                None => tw,
            }
        }
        _ => {
            let dense = model.se_dense(&enc)?;
            match &policy {
                Some(p) => truncate(&dense, p),
                None => truncate(&dense, &crate::config::TruncationConfig::Threshold { tau: 0.0 }),
            }
        }
    };
    Ok(bow)
}

fn score_pair(
    q: &SparseBoW,
    d: &SparseBoW,
    mode: ScoreMode,
) -> std::result::Result<f64, ServeError> {
    Ok(match mode {
        ScoreMode::QWeight => score_q_weight(q, d)?,
        ScoreMode::QSynonym => score_q_synonym(q, d)?.score,
    })
}

fn score_op(state: &ServiceState, request: &Request) -> std::result::Result<Value, ServeError> {
    let mode = parse_mode(&request.mode)?;
    let q = resolve(state, Side::Query, mode, &request.qid, &request.qtext)?;
    let d = resolve(state, Side::Product, mode, &request.pid, &request.ptext)?;
    let score = score_pair(&q, &d, mode)?;
    let decision = if score >= state.threshold { "good" } else { "bad" };
    Ok(json!({"score": score, "decision": decision}))
}

fn explain_op(state: &ServiceState, request: &Request) -> std::result::Result<Value, ServeError> {
    let Some((_, vocab)) = &state.model else {
        return Err(ServeError::Config(
            "explain requires a loaded model and vocabulary".into(),
        ));
    };
    let mode = parse_mode(&request.mode)?;
    let q = resolve(state, Side::Query, mode, &request.qid, &request.qtext)?;
    let d = resolve(state, Side::Product, mode, &request.pid, &request.ptext)?;
    let explanation = explain(&q, &d, vocab, mode)?;
    let matches: Vec<Value> = explanation
        .matches
        .iter()
        .map(|row| json!({"term": row.term, "p": row.p, "g": row.g, "pg": row.pg}))
        .collect();
    Ok(json!({"matches": matches, "total": explanation.total}))
}

fn encode_op(state: &ServiceState, request: &Request) -> std::result::Result<Value, ServeError> {
    let side = match request.side.as_deref() {
        Some("query") => Side::Query,
        Some("product") => Side::Product,
        Some(other) => {
            return Err(ServeError::Protocol(format!(
                "side must be `query` or `product`, got `{other}`"
            )))
        }
        None => return Err(ServeError::Protocol("`side` is required".into())),
    };
    let mode = parse_mode(&request.mode)?;
    let Some(text) = &request.text else {
        return Err(ServeError::Protocol("`text` is required".into()));
    };
    let bow = encode_side(state, side, mode, text)?;
    let entries: Vec<Value> = bow
        .entries()
        .iter()
        .map(|&(t, w)| json!([t, w]))
        .collect();
    Ok(json!({"side": side.to_string(), "entries": entries}))
}

/// A listening service; dropping it (or calling [`Service::shutdown`])
/// stops the accept loop.
pub struct Service {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl Service {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop with a throwaway connection.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        if self.accept_thread.is_some() {
            self.stop_now();
        }
    }
}

/// Binds 127.0.0.1:`port` (0 = ephemeral) and serves requests, one thread
/// per connection over the shared read-only state.
pub fn serve(state: ServiceState, port: u16) -> Result<Service> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Arc::new(state);
    let accept_stop = Arc::clone(&stop);
    let accept_thread = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if accept_stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let state = Arc::clone(&shared);
            std::thread::spawn(move || handle_connection(&state, stream));
        }
    });
    Ok(Service {
        addr,
        stop,
        accept_thread: Some(accept_thread),
    })
}

fn handle_connection(state: &ServiceState, stream: TcpStream) {
    let Ok(peer) = stream.try_clone() else { return };
    let reader = BufReader::new(peer);
    let mut writer = stream;
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_request(state, &line);
        if writer
            .write_all(format!("{response}\n").as_bytes())
            .is_err()
        {
            break;
        }
    }
}
