//! Out-of-process adapters over a JSON-lines pipe.
//!
//! The harness spawns the adapter command and writes one request per line:
//! `{"id": 7, "op": "generate", "params": {...}}`. The adapter answers with
//! `{"id": 7, "ok": true, "result": {...}}` or
//! `{"id": 7, "ok": false, "error": "..."}`. Ops: `capabilities` (which
//! may declare `attention_extraction`), `generate`, `edit`,
//! `verifier_info`, `classify`, `answer`, `embed`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, Capabilities, CetAdapter, EditWire, EditWireResponse, GenerateRequest, GenerateResponse, ImageRecord};
use crate::distance::TextEmbedder;
use crate::error::{Result, SeeError};
use crate::verifier::{Verifier, VerifierFamily};

/// Environment variable holding the adapter command when the config has none.
pub const ENDPOINT_ENV: &str = "SEE_ADAPTER_ENDPOINT";

#[derive(Debug, Deserialize)]
struct Reply {
    id: u64,
    #[serde(default)]
    ok: bool,
    #[serde(default)]
    result: Value,
    #[serde(default)]
    error: Option<String>,
}

struct Pipe {
    stdin: ChildStdin,
    replies: Receiver<std::io::Result<String>>,
    stash: HashMap<u64, Reply>,
}

/// A running adapter process. Calls are serialized over one pipe.
pub struct AdapterProcess {
    child: Mutex<Child>,
    pipe: Mutex<Pipe>,
    next_id: AtomicU64,
    timeout: Duration,
    command: Vec<String>,
}

impl AdapterProcess {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Arc<Self>> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| SeeError::Transport("adapter command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SeeError::Transport(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Arc::new(Self {
            child: Mutex::new(child),
            pipe: Mutex::new(Pipe {
                stdin,
                replies: rx,
                stash: HashMap::new(),
            }),
            next_id: AtomicU64::new(1),
            timeout,
            command: command.to_vec(),
        }))
    }

    /// Command from the config, else `sh -c $SEE_ADAPTER_ENDPOINT`.
    pub fn resolve_command(configured: Option<&[String]>) -> Result<Vec<String>> {
        if let Some(cmd) = configured.filter(|c| !c.is_empty()) {
            return Ok(cmd.to_vec());
        }
        match std::env::var(ENDPOINT_ENV) {
            Ok(s) if !s.trim().is_empty() => Ok(vec!["sh".into(), "-c".into(), s]),
            _ => Err(SeeError::Config {
                key: "backend.command".into(),
                message: format!("no adapter command configured and {ENDPOINT_ENV} is unset"),
            }),
        }
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    pub fn call<T: DeserializeOwned>(&self, op: &str, params: Value) -> Result<T> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut pipe = self.pipe.lock().expect("adapter pipe poisoned");
        let line = serde_json::to_string(&json!({"id": id, "op": op, "params": params}))?;
        writeln!(pipe.stdin, "{line}")
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| SeeError::Transport(format!("write to adapter failed: {e}")))?;
        let reply = loop {
            if let Some(r) = pipe.stash.remove(&id) {
                break r;
            }
            let line = match pipe.replies.recv_timeout(self.timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(SeeError::Transport(format!("read from adapter failed: {e}"))),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(SeeError::Transport(format!("`{op}` timed out after {:?}", self.timeout)))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(SeeError::Transport("adapter closed its output".into()))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let reply: Reply = serde_json::from_str(&line)
                .map_err(|e| SeeError::Transport(format!("malformed adapter reply `{line}`: {e}")))?;
            pipe.stash.insert(reply.id, reply);
        };
        if !reply.ok {
            return Err(SeeError::Transport(
                reply.error.unwrap_or_else(|| format!("`{op}` failed without a message")),
            ));
        }
        serde_json::from_value(reply.result)
            .map_err(|e| SeeError::Transport(format!("unexpected `{op}` result: {e}")))
    }
}

impl Drop for AdapterProcess {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

pub struct ExternalBackend {
    process: Arc<AdapterProcess>,
    capabilities: Capabilities,
    attention_extraction: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CapabilitiesReply {
    #[serde(flatten)]
    capabilities: Capabilities,
    #[serde(default)]
    attention_extraction: Option<String>,
}

impl ExternalBackend {
    /// Asks the adapter for its capabilities once, at construction.
    pub fn new(process: Arc<AdapterProcess>) -> Result<Self> {
        let reply: CapabilitiesReply = process.call("capabilities", json!({}))?;
        let capabilities = reply.capabilities;
        Ok(Self {
            process,
            capabilities: Capabilities {
                max_concurrent_requests: capabilities.max_concurrent_requests.max(1),
                ..capabilities
            },
            attention_extraction: reply.attention_extraction,
        })
    }
}

impl Backend for ExternalBackend {
    fn name(&self) -> &str {
        "external"
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse> {
        self.process.call("generate", serde_json::to_value(request)?)
    }

    fn attention_extraction(&self) -> Option<String> {
        self.attention_extraction.clone()
    }
}

pub struct ExternalCet {
    name: String,
    process: Arc<AdapterProcess>,
    settings: Value,
}

impl ExternalCet {
    /// `settings` are forwarded with every edit and logged in the manifest.
    pub fn new(name: impl Into<String>, process: Arc<AdapterProcess>, settings: Value) -> Self {
        Self {
            name: name.into(),
            process,
            settings,
        }
    }
}

impl CetAdapter for ExternalCet {
    fn cet_name(&self) -> &str {
        &self.name
    }

    fn edit(&self, request: &EditWire) -> Result<EditWireResponse> {
        let mut params = serde_json::to_value(request)?;
        params["settings"] = self.settings.clone();
        self.process.call("edit", params)
    }

    fn settings(&self) -> Value {
        self.settings.clone()
    }
}

#[derive(Debug, Deserialize)]
struct ScoresReply {
    scores: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct AnswerReply {
    answer: String,
}

#[derive(Debug, Deserialize)]
struct EmbedReply {
    vector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifierInfo {
    pub version: String,
    #[serde(default = "one")]
    pub capacity: usize,
}

fn one() -> usize {
    1
}

pub struct ExternalVerifier {
    id: String,
    family: VerifierFamily,
    info: VerifierInfo,
    process: Arc<AdapterProcess>,
}

impl ExternalVerifier {
    pub fn new(id: impl Into<String>, family: VerifierFamily, process: Arc<AdapterProcess>) -> Result<Self> {
        let id = id.into();
        let info: VerifierInfo = process.call("verifier_info", json!({ "verifier": id }))?;
        Ok(Self {
            id,
            family,
            info,
            process,
        })
    }
}

impl Verifier for ExternalVerifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> &str {
        &self.info.version
    }

    fn family(&self) -> VerifierFamily {
        self.family
    }

    fn capacity(&self) -> usize {
        self.info.capacity.max(1)
    }

    fn scores(&self, image: &ImageRecord, labels: &[String]) -> Result<Vec<f64>> {
        let r: ScoresReply = self.process.call(
            "classify",
            json!({"verifier": self.id, "payload": image.payload, "labels": labels}),
        )?;
        Ok(r.scores)
    }

    fn answer(&self, image: &ImageRecord, question: &str) -> Result<String> {
        let r: AnswerReply = self.process.call(
            "answer",
            json!({"verifier": self.id, "payload": image.payload, "question": question}),
        )?;
        Ok(r.answer)
    }
}

pub struct ExternalEmbedder {
    model_id: String,
    process: Arc<AdapterProcess>,
}

impl ExternalEmbedder {
    pub fn new(model_id: impl Into<String>, process: Arc<AdapterProcess>) -> Self {
        Self {
            model_id: model_id.into(),
            process,
        }
    }
}

impl TextEmbedder for ExternalEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let r: EmbedReply = self
            .process
            .call("embed", json!({"model": self.model_id, "text": text}))?;
        Ok(r.vector)
    }
}
