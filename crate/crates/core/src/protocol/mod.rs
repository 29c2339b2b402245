//! The engine side of the editing protocol.
//!
//! A dedicated reader consumes framed chunk messages and runs each handler
//! to completion with interrupts blocked. Handlers are total: failures are
//! reported as protocol-kind error messages. A dedicated writer serializes
//! every outgoing frame, whether it comes from a handler or a worker.
//!
//! Incoming messages (first chunk is the name):
//!
//! ```text
//! define_command    id name source
//! update            old_version new_version yxml(edits)
//! remove_versions   yxml(version list)
//! set_perspective   version node yxml(interval list)
//! cancel_execution
//! register_function name
//! function_reply    call_id ("ok" | "error") result
//! stats
//! shutdown
//! ```
//!
//! Outgoing messages are `[kind, exec_id, yxml body]`, with an empty exec
//! id for protocol-kind messages.

mod framing;
mod raw;

pub use framing::{read_chunks, write_chunks, FramingError};
pub use raw::{capture_raw_output, RawCapture};

use crate::document::{
    Assignment, CommandId, CommandStatus, Document, DocumentError, Edit, EngineStats, ExecId, Interval,
    Observer, Splice, VersionId,
};
use crate::eval::{uninterruptible, RemoteRegistry, Scheduler, DEFAULT_REMOTE_TIMEOUT};
use crate::markup::codec::{self, tagged, untag, Decode, DecodeError, Encode};
use crate::markup::{yxml, Body, Tree};
use crate::message::{Message, MessageKind};
use crate::syntax::TokenKind;
use crate::toy;
use parking_lot::Mutex;
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufWriter, Write};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;
use thiserror::Error;

/// The fixed protocol vocabulary.
pub const VOCABULARY: &[&str] = &[
    "define_command",
    "update",
    "remove_versions",
    "set_perspective",
    "cancel_execution",
    "register_function",
    "function_reply",
    "stats",
    "shutdown",
];

/// Hash of the vocabulary, exchanged at connection start.
pub fn vocabulary_hash() -> u64 {
    let mut h = DefaultHasher::new();
    VOCABULARY.hash(&mut h);
    h.finish()
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error("bad message: {0}")]
    BadMessage(String),
}

impl From<DecodeError> for ProtocolError {
    fn from(e: DecodeError) -> Self {
        ProtocolError::BadMessage(e.to_string())
    }
}

impl From<yxml::YxmlError> for ProtocolError {
    fn from(e: yxml::YxmlError) -> Self {
        ProtocolError::BadMessage(e.to_string())
    }
}

/// Replaces the two reserved markup bytes, so arbitrary text can travel
/// inside a YXML body.
pub fn clean_text(text: &[u8]) -> Vec<u8> {
    text.iter()
        .map(|b| if *b == yxml::X || *b == yxml::Y { b'?' } else { *b })
        .collect()
}

impl Encode for Splice {
    fn encode(&self) -> Body {
        (&self.after, &self.inserted, &self.removed).encode()
    }
}

impl Decode for Splice {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        let (after, inserted, removed) = Decode::decode(body)?;
        Ok(Splice {
            after,
            inserted,
            removed,
        })
    }
}

impl Encode for Edit {
    fn encode(&self) -> Body {
        match self {
            Edit::Edits { node, splices } => tagged(0, (node, splices).encode()),
            Edit::Deps { node, imports } => tagged(1, (node, imports).encode()),
            Edit::Perspective { node, visible } => tagged(2, (node, visible).encode()),
        }
    }
}

impl Decode for Edit {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        let (tag, inner) = untag(body)?;
        Ok(match tag {
            0 => {
                let (node, splices) = Decode::decode(inner)?;
                Edit::Edits { node, splices }
            }
            1 => {
                let (node, imports) = Decode::decode(inner)?;
                Edit::Deps { node, imports }
            }
            2 => {
                let (node, visible) = Decode::decode(inner)?;
                Edit::Perspective { node, visible }
            }
            _ => return Err(DecodeError::new("edit tag 0..2", body)),
        })
    }
}

/// An incoming protocol command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    DefineCommand { id: CommandId, name: String, source: String },
    Update { old: VersionId, new: VersionId, edits: Vec<Edit> },
    RemoveVersions(Vec<VersionId>),
    SetPerspective { version: VersionId, node: String, visible: Vec<Interval> },
    CancelExecution,
    RegisterFunction(String),
    FunctionReply { id: u64, result: Result<String, String> },
    /// Asks for a statistics report.
    Stats,
    Shutdown,
}

fn yxml_of<T: Encode + ?Sized>(value: &T) -> Vec<u8> {
    yxml::encode_body(&codec::encode(value)).expect("codec output is well-formed")
}

fn from_yxml<T: Decode>(bytes: &[u8]) -> Result<T, ProtocolError> {
    Ok(codec::decode(&yxml::decode(bytes)?)?)
}

fn utf8(bytes: &[u8]) -> Result<String, ProtocolError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| ProtocolError::BadMessage("invalid UTF-8".into()))
}

fn number<T: std::str::FromStr>(bytes: &[u8]) -> Result<T, ProtocolError> {
    std::str::from_utf8(bytes)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ProtocolError::BadMessage(format!("bad number {:?}", String::from_utf8_lossy(bytes))))
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::DefineCommand { .. } => "define_command",
            Request::Update { .. } => "update",
            Request::RemoveVersions(_) => "remove_versions",
            Request::SetPerspective { .. } => "set_perspective",
            Request::CancelExecution => "cancel_execution",
            Request::RegisterFunction(_) => "register_function",
            Request::FunctionReply { .. } => "function_reply",
            Request::Stats => "stats",
            Request::Shutdown => "shutdown",
        }
    }

    pub fn to_chunks(&self) -> Vec<Vec<u8>> {
        let mut chunks = vec![self.name().as_bytes().to_vec()];
        match self {
            Request::DefineCommand { id, name, source } => {
                chunks.extend([id.to_string().into_bytes(), name.clone().into_bytes(), source.clone().into_bytes()])
            }
            Request::Update { old, new, edits } => {
                chunks.extend([old.to_string().into_bytes(), new.to_string().into_bytes(), yxml_of(edits)])
            }
            Request::RemoveVersions(ids) => chunks.push(yxml_of(ids)),
            Request::SetPerspective { version, node, visible } => chunks.extend([
                version.to_string().into_bytes(),
                node.clone().into_bytes(),
                yxml_of(visible),
            ]),
            Request::RegisterFunction(name) => chunks.push(name.clone().into_bytes()),
            Request::FunctionReply { id, result } => {
                let (tag, text) = match result {
                    Ok(s) => ("ok", s),
                    Err(s) => ("error", s),
                };
                chunks.extend([id.to_string().into_bytes(), tag.into(), text.clone().into_bytes()])
            }
            Request::CancelExecution | Request::Stats | Request::Shutdown => {}
        }
        chunks
    }

    pub fn parse(chunks: &[Vec<u8>]) -> Result<Request, ProtocolError> {
        let name = chunks.first().map(|c| String::from_utf8_lossy(c).into_owned()).unwrap_or_default();
        let args = chunks.get(1..).unwrap_or(&[]);
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(ProtocolError::BadMessage(format!("{name} takes {n} arguments, got {}", args.len())))
            }
        };
        Ok(match name.as_str() {
            "define_command" => {
                arity(3)?;
                Request::DefineCommand {
                    id: number(&args[0])?,
                    name: utf8(&args[1])?,
                    source: utf8(&args[2])?,
                }
            }
            "update" => {
                arity(3)?;
                Request::Update {
                    old: number(&args[0])?,
                    new: number(&args[1])?,
                    edits: from_yxml(&args[2])?,
                }
            }
            "remove_versions" => {
                arity(1)?;
                Request::RemoveVersions(from_yxml(&args[0])?)
            }
            "set_perspective" => {
                arity(3)?;
                Request::SetPerspective {
                    version: number(&args[0])?,
                    node: utf8(&args[1])?,
                    visible: from_yxml(&args[2])?,
                }
            }
            "cancel_execution" => {
                arity(0)?;
                Request::CancelExecution
            }
            "register_function" => {
                arity(1)?;
                Request::RegisterFunction(utf8(&args[0])?)
            }
            "function_reply" => {
                arity(3)?;
                let text = utf8(&args[2])?;
                Request::FunctionReply {
                    id: number(&args[0])?,
                    result: match &args[1][..] {
                        b"ok" => Ok(text),
                        b"error" => Err(text),
                        _ => return Err(ProtocolError::BadMessage("reply must be ok or error".into())),
                    },
                }
            }
            "stats" => {
                arity(0)?;
                Request::Stats
            }
            "shutdown" => {
                arity(0)?;
                Request::Shutdown
            }
            _ => return Err(ProtocolError::BadMessage(format!("unknown command {name:?}"))),
        })
    }
}

/// Engine statistics as reported to the front-end.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StatsReport {
    pub stats: EngineStats,
    pub latest: VersionId,
    pub interrupted: usize,
}

/// An outgoing message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Message { exec: ExecId, message: Message },
    Status { exec: ExecId, status: CommandStatus },
    Markup { exec: ExecId, ranges: Vec<(TokenKind, usize, usize)> },
    /// The print of a command has produced all its output.
    Printed { exec: ExecId },
    Hello { vocabulary: u64 },
    Assignment { version: VersionId, nodes: BTreeMap<String, Vec<(CommandId, ExecId)>> },
    Stats(StatsReport),
    RemoteCall { id: u64, function: String, argument: String },
    Error(String),
    Raw(Vec<u8>),
}

fn attrs(pairs: &[(&str, String)]) -> Vec<(String, Vec<u8>)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone().into_bytes())).collect()
}

fn token_kind(name: &str) -> Option<TokenKind> {
    use TokenKind::*;
    [Command, Keyword, Ident, Number, String, Comment, Space, Error]
        .into_iter()
        .find(|k| k.name() == name)
}

fn attr_num<T: std::str::FromStr>(tree: &Tree, key: &str) -> Result<T, ProtocolError> {
    tree.attribute_str(key)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ProtocolError::BadMessage(format!("missing attribute {key}")))
}

const STAT_KEYS: [&str; 9] = [
    "commands", "versions", "eval_runs", "print_activations", "prints_forked", "proofs_forked", "restarts",
    "latest", "interrupted",
];

impl Output {
    pub fn kind(&self) -> &'static str {
        match self {
            Output::Message { message, .. } => message.kind.as_str(),
            Output::Status { .. } => "status",
            Output::Markup { .. } | Output::Printed { .. } => "report",
            _ => "protocol",
        }
    }

    pub fn exec_id(&self) -> Option<ExecId> {
        match self {
            Output::Message { exec, .. }
            | Output::Status { exec, .. }
            | Output::Markup { exec, .. }
            | Output::Printed { exec } => Some(*exec),
            _ => None,
        }
    }

    fn body(&self) -> Body {
        match self {
            Output::Message { message, .. } => vec![Tree::elem_with(
                "message",
                attrs(&[("serial", message.serial.to_string()), ("position", message.position.to_string())]),
                text_body(message.text.as_bytes()),
            )],
            Output::Status { status, .. } => vec![Tree::text(status.as_str())],
            Output::Markup { ranges, .. } => ranges
                .iter()
                .map(|(k, s, e)| {
                    Tree::elem_with(
                        "markup",
                        attrs(&[("kind", k.name().to_string()), ("start", s.to_string()), ("end", e.to_string())]),
                        vec![],
                    )
                })
                .collect(),
            Output::Printed { .. } => vec![Tree::elem("printed", vec![])],
            Output::Hello { vocabulary } => {
                vec![Tree::elem_with("hello", attrs(&[("vocabulary", vocabulary.to_string())]), vec![])]
            }
            Output::Assignment { version, nodes } => {
                let list: Vec<(&String, &Vec<(u64, u64)>)> = nodes.iter().collect();
                vec![Tree::elem_with("assignment", attrs(&[("version", version.to_string())]), list.encode())]
            }
            Output::Stats(r) => {
                let s = &r.stats;
                let values = [
                    s.commands,
                    s.versions,
                    s.eval_runs,
                    s.print_activations,
                    s.prints_forked,
                    s.proofs_forked,
                    s.restarts,
                    r.latest as usize,
                    r.interrupted,
                ];
                let pairs: Vec<(&str, String)> =
                    STAT_KEYS.iter().zip(values).map(|(k, v)| (*k, v.to_string())).collect();
                vec![Tree::elem_with("stats", attrs(&pairs), vec![])]
            }
            Output::RemoteCall { id, function, argument } => vec![Tree::elem_with(
                "remote_call",
                attrs(&[("id", id.to_string()), ("function", function.clone())]),
                text_body(argument.as_bytes()),
            )],
            Output::Error(text) => vec![Tree::elem("error", text_body(text.as_bytes()))],
            Output::Raw(bytes) => vec![Tree::elem("raw", text_body(bytes))],
        }
    }

    pub fn to_chunks(&self) -> Vec<Vec<u8>> {
        let exec = self.exec_id().map(|e| e.to_string()).unwrap_or_default();
        let body = yxml::encode_body(&self.body()).expect("output bodies are well-formed");
        vec![self.kind().as_bytes().to_vec(), exec.into_bytes(), body]
    }

    pub fn parse(chunks: &[Vec<u8>]) -> Result<Output, ProtocolError> {
        let [kind, exec, body] = chunks else {
            return Err(ProtocolError::BadMessage(format!("expected 3 chunks, got {}", chunks.len())));
        };
        let kind = utf8(kind)?;
        let exec: Option<ExecId> = if exec.is_empty() { None } else { Some(number(exec)?) };
        let body = yxml::decode(body)?;
        let need_exec = || exec.ok_or_else(|| ProtocolError::BadMessage(format!("{kind} without exec id")));
        let first = body.first();
        let bad = |what: &str| ProtocolError::BadMessage(format!("bad {what} body"));
        if let Some(mk) = MessageKind::parse(&kind) {
            let tree = first.filter(|t| t.name() == Some("message")).ok_or_else(|| bad("message"))?;
            let message = Message {
                kind: mk,
                text: String::from_utf8_lossy(&tree.content()).into_owned(),
                position: attr_num(tree, "position")?,
                serial: attr_num(tree, "serial")?,
            };
            return Ok(Output::Message { exec: need_exec()?, message });
        }
        match kind.as_str() {
            "status" => {
                let text = String::from_utf8_lossy(&body.iter().flat_map(Tree::content).collect::<Vec<_>>()).into_owned();
                let status = CommandStatus::parse(&text).ok_or_else(|| bad("status"))?;
                Ok(Output::Status { exec: need_exec()?, status })
            }
            "report" => {
                let exec = need_exec()?;
                if first.and_then(Tree::name) == Some("printed") {
                    return Ok(Output::Printed { exec });
                }
                let ranges = body
                    .iter()
                    .map(|t| {
                        let kind = t.attribute_str("kind").and_then(token_kind).ok_or_else(|| bad("markup"))?;
                        Ok((kind, attr_num(t, "start")?, attr_num(t, "end")?))
                    })
                    .collect::<Result<_, ProtocolError>>()?;
                Ok(Output::Markup { exec, ranges })
            }
            "protocol" => {
                let tree = first.ok_or_else(|| bad("protocol"))?;
                let text = || String::from_utf8_lossy(&tree.content()).into_owned();
                Ok(match tree.name() {
                    Some("hello") => Output::Hello { vocabulary: attr_num(tree, "vocabulary")? },
                    Some("assignment") => {
                        let list: Vec<(String, Vec<(u64, u64)>)> = codec::decode(tree.body())?;
                        Output::Assignment {
                            version: attr_num(tree, "version")?,
                            nodes: list.into_iter().collect(),
                        }
                    }
                    Some("stats") => {
                        let v = STAT_KEYS
                            .iter()
                            .map(|k| attr_num::<usize>(tree, k))
                            .collect::<Result<Vec<_>, _>>()?;
                        Output::Stats(StatsReport {
                            stats: EngineStats {
                                commands: v[0],
                                versions: v[1],
                                eval_runs: v[2],
                                print_activations: v[3],
                                prints_forked: v[4],
                                proofs_forked: v[5],
                                restarts: v[6],
                            },
                            latest: v[7] as VersionId,
                            interrupted: v[8],
                        })
                    }
                    Some("remote_call") => Output::RemoteCall {
                        id: attr_num(tree, "id")?,
                        function: tree.attribute_str("function").unwrap_or_default().to_string(),
                        argument: text(),
                    },
                    Some("error") => Output::Error(text()),
                    Some("raw") => Output::Raw(tree.content()),
                    _ => return Err(bad("protocol")),
                })
            }
            _ => Err(ProtocolError::BadMessage(format!("unknown output kind {kind:?}"))),
        }
    }
}

fn text_body(bytes: &[u8]) -> Body {
    if bytes.is_empty() {
        vec![]
    } else {
        vec![Tree::text(clean_text(bytes))]
    }
}

/// Queue of outgoing frames; `None` stops the writer.
type Outbox = mpsc::Sender<Option<Output>>;

struct QueueObserver(Mutex<Outbox>);

impl Observer for QueueObserver {
    fn status(&self, exec: ExecId, status: CommandStatus) {
        let _ = self.0.lock().send(Some(Output::Status { exec, status }));
    }

    fn messages(&self, exec: ExecId, messages: &[Message]) {
        let out = self.0.lock();
        for m in messages {
            let _ = out.send(Some(Output::Message { exec, message: m.clone() }));
        }
    }

    fn printed(&self, exec: ExecId) {
        let _ = self.0.lock().send(Some(Output::Printed { exec }));
    }
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub remote_timeout: Duration,
    /// Read commands on the worker pool as soon as they are defined.
    pub forked_read: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            remote_timeout: DEFAULT_REMOTE_TIMEOUT,
            forked_read: false,
        }
    }
}

/// Document state plus protocol handlers. Output goes to the queue that
/// [`Engine::new`] returns alongside the engine.
pub struct Engine {
    document: Document,
    registry: Arc<RemoteRegistry>,
    out: Mutex<Outbox>,
}

/// Receiving side of an engine's output queue.
pub type OutputQueue = mpsc::Receiver<Option<Output>>;

impl Engine {
    pub fn new(scheduler: Scheduler, config: EngineConfig) -> (Engine, OutputQueue) {
        let (tx, rx) = mpsc::channel();
        let calls = Mutex::new(tx.clone());
        let registry = Arc::new(RemoteRegistry::new(config.remote_timeout, move |id, function, argument| {
            let _ = calls.lock().send(Some(Output::RemoteCall {
                id,
                function: function.to_string(),
                argument: argument.to_string(),
            }));
        }));
        let observer = Arc::new(QueueObserver(Mutex::new(tx.clone())));
        let context = toy::Context {
            remote: Some(registry.clone()),
        };
        let document = Document::with_observer(scheduler, observer, context);
        document.set_forked_read(config.forked_read);
        (
            Engine {
                document,
                registry,
                out: Mutex::new(tx),
            },
            rx,
        )
    }

    pub fn document(&self) -> &Document {
        &self.document
    }

    pub fn emit(&self, output: Output) {
        let _ = self.out.lock().send(Some(output));
    }

    /// A sink that forwards captured process output as `Raw` messages.
    pub fn raw_sink(&self) -> impl FnMut(Vec<u8>) + Send + 'static {
        let tx = self.out.lock().clone();
        move |bytes| {
            let _ = tx.send(Some(Output::Raw(bytes)));
        }
    }

    fn report_error(&self, text: String) {
        log::warn!("protocol error: {text}");
        self.emit(Output::Error(text));
    }

    fn emit_stats(&self) {
        let latest = self.document.latest_version();
        self.emit(Output::Stats(StatsReport {
            stats: self.document.stats(),
            latest,
            interrupted: self.document.interrupted(latest),
        }));
    }

    /// Runs one protocol command. Never fails and never sees an interrupt;
    /// returns `false` after `shutdown`.
    pub fn handle(&self, chunks: &[Vec<u8>]) -> bool {
        uninterruptible(|| match Request::parse(chunks) {
            Ok(Request::Shutdown) => false,
            Ok(request) => {
                if let Err(e) = self.dispatch(request) {
                    self.report_error(e.to_string());
                }
                true
            }
            Err(e) => {
                self.report_error(e.to_string());
                true
            }
        })
    }

    fn dispatch(&self, request: Request) -> Result<(), DocumentError> {
        let doc = &self.document;
        match request {
            Request::DefineCommand { id, name, source } => doc.define_command(id, &name, &source)?,
            Request::Update { old, new, edits } => {
                let Assignment { version, nodes, fresh, .. } = doc.update(old, new, &edits)?;
                self.emit(Output::Assignment { version, nodes });
                for (command, exec) in fresh {
                    if let Some(def) = doc.command(command) {
                        let ranges = def.markup();
                        if !ranges.is_empty() {
                            self.emit(Output::Markup { exec, ranges });
                        }
                    }
                }
                doc.execute(new)?;
                self.emit_stats();
            }
            Request::RemoveVersions(ids) => {
                doc.remove_versions(&ids)?;
                self.emit_stats();
            }
            Request::SetPerspective { version, node, visible } => doc.set_perspective(version, &node, &visible)?,
            Request::CancelExecution => {
                doc.cancel_execution();
                self.emit_stats();
            }
            Request::RegisterFunction(name) => self.registry.register(&name),
            Request::FunctionReply { id, result } => {
                if !self.registry.reply(id, result) {
                    self.report_error(format!("reply to unknown call {id}"));
                }
            }
            Request::Stats => self.emit_stats(),
            Request::Shutdown => {}
        }
        Ok(())
    }

    /// Stops running work and interrupts pending remote calls.
    pub fn stop(&self) {
        self.registry.close();
        self.document.cancel_execution();
    }
}

/// Serves one session: reads requests from `input` until `shutdown` or end
/// of stream, while a writer thread frames all output onto `output`.
/// A framing error ends the session with an error.
pub fn serve(
    engine: &Engine,
    queue: OutputQueue,
    mut input: impl BufRead,
    output: impl Write + Send + 'static,
) -> Result<(), ProtocolError> {
    let writer = thread::spawn(move || write_outputs(queue, output));
    engine.emit(Output::Hello {
        vocabulary: vocabulary_hash(),
    });
    let result = loop {
        match read_chunks(&mut input) {
            Ok(Some(chunks)) => {
                if !engine.handle(&chunks) {
                    break Ok(());
                }
            }
            Ok(None) => break Ok(()),
            Err(e) => {
                log::error!("session terminated: {e}");
                break Err(e.into());
            }
        }
    };
    engine.stop();
    let _ = engine.out.lock().send(None);
    let _ = writer.join();
    result
}

fn write_outputs(queue: OutputQueue, output: impl Write) {
    let mut out = BufWriter::new(output);
    while let Ok(Some(first)) = queue.recv() {
        let mut next = Some(first);
        let mut stop = false;
        while let Some(o) = next.take() {
            if write_chunks(&mut out, &o.to_chunks()).is_err() {
                return;
            }
            match queue.try_recv() {
                Ok(Some(o)) => next = Some(o),
                Ok(None) => stop = true,
                Err(_) => {}
            }
        }
        if out.flush().is_err() || stop {
            break;
        }
    }
    let _ = out.flush();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::Splice;
    use crate::eval::SchedulerConfig;
    use std::io::Cursor;

    fn engine() -> (Engine, OutputQueue) {
        Engine::new(Scheduler::new(SchedulerConfig::with_workers(2)), EngineConfig::default())
    }

    fn drain(q: &OutputQueue) -> Vec<Output> {
        q.try_iter().flatten().collect()
    }

    #[test]
    fn requests_round_trip() {
        let reqs = [
            Request::DefineCommand { id: 3, name: "def".into(), source: "def x = 1\n\x05".into() },
            Request::Update {
                old: 0,
                new: 1,
                edits: vec![
                    Edit::Edits {
                        node: "A".into(),
                        splices: vec![Splice { after: None, inserted: vec![1, 2], removed: vec![] }],
                    },
                    Edit::Deps { node: "A".into(), imports: vec!["B".into()] },
                    Edit::Perspective { node: "A".into(), visible: vec![(1, 2)] },
                ],
            },
            Request::RemoveVersions(vec![1, 2]),
            Request::SetPerspective { version: 1, node: "A".into(), visible: vec![] },
            Request::CancelExecution,
            Request::RegisterFunction("f".into()),
            Request::FunctionReply { id: 9, result: Err("no".into()) },
            Request::Stats,
            Request::Shutdown,
        ];
        for r in reqs {
            assert_eq!(Request::parse(&r.to_chunks()).unwrap(), r);
        }
    }

    #[test]
    fn outputs_round_trip() {
        let outs = [
            Output::Message { exec: 7, message: Message::writeln("hi").at(2) },
            Output::Status { exec: 7, status: CommandStatus::Running },
            Output::Markup { exec: 7, ranges: vec![(TokenKind::Command, 0, 3)] },
            Output::Printed { exec: 1 },
            Output::Hello { vocabulary: vocabulary_hash() },
            Output::Assignment { version: 2, nodes: BTreeMap::from([("A".into(), vec![(1, 2)])]) },
            Output::Stats(StatsReport::default()),
            Output::RemoteCall { id: 1, function: "f".into(), argument: "x".into() },
            Output::Error("oops".into()),
            Output::Raw(b"raw\n".to_vec()),
        ];
        for o in outs {
            assert_eq!(Output::parse(&o.to_chunks()).unwrap(), o);
        }
    }

    #[test]
    fn writeln_is_tagged_with_exec() {
        let chunks = Output::Message { exec: 7, message: Message::writeln("hi") }.to_chunks();
        assert_eq!(chunks[0], b"writeln");
        assert_eq!(chunks[1], b"7");
        let body = yxml::decode(&chunks[2]).unwrap();
        assert_eq!(body[0].content(), b"hi");
        let err = Output::Error("x".into()).to_chunks();
        assert_eq!(err[0], b"protocol");
        assert!(err[1].is_empty());
    }

    #[test]
    fn unknown_command_is_reported_and_serving_continues() {
        let (e, q) = engine();
        assert!(e.handle(&[b"nonsense".to_vec()]));
        assert!(matches!(&drain(&q)[..], [Output::Error(m)] if m.contains("nonsense")));
        assert!(e.handle(&Request::DefineCommand { id: 1, name: "def".into(), source: "def x = 1".into() }.to_chunks()));
        assert!(e.handle(&Request::DefineCommand { id: 1, name: "def".into(), source: "def x = 1".into() }.to_chunks()));
        assert!(matches!(&drain(&q)[..], [Output::Error(m)] if m.contains("duplicate")));
        assert!(!e.handle(&Request::Shutdown.to_chunks()));
    }

    #[test]
    fn update_emits_assignment_without_prompt() {
        let (e, q) = engine();
        e.handle(&Request::DefineCommand { id: 1, name: "def".into(), source: "def x = 1".into() }.to_chunks());
        let edit = Edit::Edits { node: "A".into(), splices: vec![Splice { after: None, inserted: vec![1], removed: vec![] }] };
        e.handle(&Request::Update { old: 0, new: 1, edits: vec![edit] }.to_chunks());
        assert!(e.document().wait_quiescent(1, Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(20));
        let outs = drain(&q);
        assert!(matches!(&outs[0], Output::Assignment { version: 1, nodes } if nodes["A"].len() == 1));
        assert!(outs.iter().any(|o| matches!(o, Output::Markup { .. })));
        assert!(outs.iter().any(|o| matches!(o, Output::Status { status: CommandStatus::Finished, .. })));
    }

    #[test]
    fn serve_over_buffers() {
        let (e, q) = engine();
        let mut input = Vec::new();
        write_chunks(&mut input, &Request::DefineCommand { id: 1, name: "print".into(), source: "print 1".into() }.to_chunks()).unwrap();
        write_chunks(&mut input, &[b"bogus"]).unwrap();
        write_chunks(&mut input, &Request::Shutdown.to_chunks()).unwrap();
        let sink = Arc::new(Mutex::new(Vec::new()));
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        serve(&e, q, Cursor::new(input), Shared(sink.clone())).unwrap();
        let bytes = sink.lock().clone();
        let mut c = Cursor::new(bytes);
        let mut outs = Vec::new();
        while let Some(chunks) = read_chunks(&mut c).unwrap() {
            outs.push(Output::parse(&chunks).unwrap());
        }
        assert_eq!(outs[0], Output::Hello { vocabulary: vocabulary_hash() });
        assert!(matches!(&outs[1], Output::Error(m) if m.contains("bogus")));
    }

    #[test]
    fn framing_error_ends_session() {
        let (e, q) = engine();
        let r = serve(&e, q, Cursor::new(b"zz\n".to_vec()), std::io::sink());
        assert!(matches!(r, Err(ProtocolError::Framing(_))));
    }

    #[test]
    fn remote_call_through_engine() {
        let (e, q) = engine();
        let e = Arc::new(e);
        e.handle(&Request::RegisterFunction("upper".into()).to_chunks());
        let e2 = e.clone();
        let front = thread::spawn(move || {
            for o in q.iter().flatten() {
                if let Output::RemoteCall { id, argument, .. } = o {
                    e2.handle(&Request::FunctionReply { id, result: Ok(argument.to_uppercase()) }.to_chunks());
                    return;
                }
            }
        });
        e.handle(&Request::DefineCommand { id: 1, name: "remote".into(), source: "remote upper \"abc\"".into() }.to_chunks());
        let edits = vec![
            Edit::Edits { node: "A".into(), splices: vec![Splice { after: None, inserted: vec![1], removed: vec![] }] },
            Edit::Perspective { node: "A".into(), visible: vec![(1, 1)] },
        ];
        e.handle(&Request::Update { old: 0, new: 1, edits }.to_chunks());
        assert!(e.document().wait_quiescent(1, Duration::from_secs(5)));
        front.join().unwrap();
        assert_eq!(e.document().snapshot(1, "A")[0].messages[0].text, "ABC");
    }
}
