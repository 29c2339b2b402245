//! Front-end session: owns the editor texts, turns edits into debounced
//! `define_command` + `update` requests, allocates version ids, folds
//! engine output into a per-command view, and prunes old versions.

use crate::document::{CommandId, CommandStatus, ExecId, Interval, NodeVersion, VersionId, ROOT_VERSION};
use crate::eval::{Scheduler, SchedulerConfig, DEFAULT_REMOTE_TIMEOUT};
use crate::message::Message;
use crate::protocol::{
    self, read_chunks, vocabulary_hash, write_chunks, Engine, EngineConfig, Output, Request, StatsReport,
};
use crate::document::{Document, Edit, Splice};
use crate::syntax::TokenKind;
use crate::toy;
use parking_lot::{Condvar, Mutex};
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("cannot connect to {address}: {source}")]
    Connect { address: String, source: io::Error },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("session closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("offset {offset} out of range for node {node}")]
    Range { node: String, offset: usize },
}

/// Time source for debounce and prune timers.
#[derive(Clone, Debug)]
pub enum Clock {
    Real(Instant),
    /// Milliseconds, advanced explicitly.
    Virtual(Arc<AtomicU64>),
}

impl Clock {
    pub fn real() -> Self {
        Clock::Real(Instant::now())
    }

    pub fn virtual_clock() -> Self {
        Clock::Virtual(Arc::new(AtomicU64::new(0)))
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn now_ms(&self) -> u64 {
        match self {
            Clock::Real(start) => start.elapsed().as_millis() as u64,
            Clock::Virtual(t) => t.load(Ordering::SeqCst),
        }
    }

    fn set(&self, ms: u64) {
        if let Clock::Virtual(t) = self {
            t.fetch_max(ms, Ordering::SeqCst);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    /// Engine to connect to; `None` starts an engine inside this process.
    pub address: Option<String>,
    /// Workers of an in-process engine.
    pub workers: usize,
    pub debounce: Duration,
    pub prune_interval: Duration,
    /// Versions kept by a prune, the latest included.
    pub retention: usize,
    pub clock: Clock,
    pub remote_timeout: Duration,
    /// Forked READ in an in-process engine.
    pub forked_read: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            address: None,
            workers: SchedulerConfig::default().workers,
            debounce: Duration::from_millis(300),
            prune_interval: Duration::from_secs(60),
            retention: 5,
            clock: Clock::real(),
            remote_timeout: DEFAULT_REMOTE_TIMEOUT,
            forked_read: false,
        }
    }
}

/// Primitive editor events. Offsets and lengths count characters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EditorEvent {
    Open { node: String, text: String },
    /// Closes every view of the node; its text stays in the document.
    Close { node: String },
    Insert { node: String, offset: usize, text: String },
    Delete { node: String, offset: usize, len: usize },
    Viewport { node: String, view: String, start: usize, end: usize },
    CloseView { node: String, view: String },
}

impl EditorEvent {
    pub fn node(&self) -> &str {
        match self {
            EditorEvent::Open { node, .. }
            | EditorEvent::Close { node }
            | EditorEvent::Insert { node, .. }
            | EditorEvent::Delete { node, .. }
            | EditorEvent::Viewport { node, .. }
            | EditorEvent::CloseView { node, .. } => node,
        }
    }
}

/// A span as last sent to the engine.
#[derive(Clone, Debug)]
struct SentSpan {
    id: CommandId,
    hash: u64,
    start: usize,
    end: usize,
}

#[derive(Clone, Debug, Default)]
struct SentNode {
    spans: Vec<SentSpan>,
    imports: Vec<String>,
    perspective: Vec<Interval>,
}

#[derive(Default)]
struct EditState {
    texts: BTreeMap<String, String>,
    views: BTreeMap<String, BTreeMap<String, (usize, usize)>>,
    sent: BTreeMap<String, SentNode>,
    defs: HashMap<CommandId, (String, String)>,
    dirty: BTreeSet<String>,
    first_pending: Option<u64>,
    last_prune: u64,
    latest: VersionId,
    next_version: VersionId,
    next_command: CommandId,
    history: VecDeque<VersionId>,
    created: usize,
    expected_responses: u64,
}

#[derive(Clone, Debug, Default)]
struct ExecView {
    status: Option<CommandStatus>,
    messages: BTreeMap<(usize, u64), Message>,
    markup: Vec<(TokenKind, usize, usize)>,
    printed: bool,
}

#[derive(Default)]
struct ViewState {
    assignments: BTreeMap<VersionId, BTreeMap<String, Vec<(CommandId, ExecId)>>>,
    execs: HashMap<ExecId, ExecView>,
    stats: Option<StatsReport>,
    responses: u64,
    errors: Vec<String>,
    raw: Vec<u8>,
    disconnected: bool,
}

type RemoteFn = Arc<dyn Fn(&str) -> Result<String, String> + Send + Sync>;

struct Inner {
    config: SessionConfig,
    writer: Mutex<BufWriter<TcpStream>>,
    edit: Mutex<EditState>,
    view: Mutex<ViewState>,
    changed: Condvar,
    functions: Mutex<HashMap<String, RemoteFn>>,
    closed: AtomicBool,
}

/// Rendering model of one command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandView {
    pub id: CommandId,
    pub exec_id: ExecId,
    pub name: String,
    pub source: String,
    pub status: CommandStatus,
    pub messages: Vec<Message>,
    pub markup: Vec<(TokenKind, usize, usize)>,
}

impl CommandView {
    pub fn has_warning(&self) -> bool {
        self.messages.iter().any(|m| m.kind == crate::message::MessageKind::Warning)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeView {
    pub version: Option<VersionId>,
    pub commands: Vec<CommandView>,
}

pub struct Session {
    inner: Arc<Inner>,
    reader: Option<JoinHandle<()>>,
    timer: Option<JoinHandle<()>>,
    engine: Option<JoinHandle<()>>,
    document: Option<Document>,
}

fn hash_of(s: &str) -> u64 {
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

fn byte_offset(text: &str, chars: usize) -> Option<usize> {
    if chars == 0 {
        return Some(0);
    }
    text.char_indices().map(|(i, _)| i).chain([text.len()]).nth(chars)
}

impl Session {
    pub fn start(config: SessionConfig) -> Result<Session, SessionError> {
        let (stream, engine, document) = match &config.address {
            Some(address) => {
                let stream = connect(address)?;
                (stream, None, None)
            }
            None => {
                let scheduler = Scheduler::new(SchedulerConfig::with_workers(config.workers));
                let (engine, queue) = Engine::new(
                    scheduler,
                    EngineConfig {
                        remote_timeout: config.remote_timeout,
                        forked_read: config.forked_read,
                    },
                );
                let document = engine.document().clone();
                let listener = TcpListener::bind("127.0.0.1:0")?;
                let address = listener.local_addr()?;
                let handle = thread::spawn(move || {
                    if let Ok((stream, _)) = listener.accept() {
                        let _ = serve_stream(&engine, queue, stream);
                    }
                });
                let stream = connect(&address.to_string())?;
                (stream, Some(handle), Some(document))
            }
        };
        stream.set_nodelay(true)?;
        let mut input = BufReader::new(stream.try_clone()?);
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        let hello = read_chunks(&mut input)
            .map_err(|e| SessionError::Handshake(e.to_string()))?
            .ok_or_else(|| SessionError::Handshake("connection closed".into()))?;
        match Output::parse(&hello) {
            Ok(Output::Hello { vocabulary }) if vocabulary == vocabulary_hash() => {}
            Ok(Output::Hello { .. }) => return Err(SessionError::Handshake("vocabulary mismatch".into())),
            _ => return Err(SessionError::Handshake("expected hello".into())),
        }
        stream.set_read_timeout(None)?;

        let now = config.clock.now_ms();
        let inner = Arc::new(Inner {
            writer: Mutex::new(BufWriter::new(stream)),
            edit: Mutex::new(EditState {
                latest: ROOT_VERSION,
                next_version: ROOT_VERSION + 1,
                next_command: 1,
                history: VecDeque::from([ROOT_VERSION]),
                last_prune: now,
                ..EditState::default()
            }),
            view: Mutex::new(ViewState::default()),
            changed: Condvar::new(),
            functions: Mutex::new(HashMap::new()),
            closed: AtomicBool::new(false),
            config,
        });
        let reader = {
            let inner = inner.clone();
            thread::spawn(move || read_loop(&inner, input))
        };
        let timer = (!inner.config.clock.is_virtual()).then(|| {
            let weak = Arc::downgrade(&inner);
            thread::spawn(move || timer_loop(weak))
        });
        Ok(Session {
            inner,
            reader: Some(reader),
            timer,
            engine,
            document,
        })
    }

    /// The engine's document, when the engine runs in this process.
    pub fn engine_document(&self) -> Option<&Document> {
        self.document.as_ref()
    }

    pub fn clock(&self) -> &Clock {
        &self.inner.config.clock
    }

    pub fn latest_version(&self) -> VersionId {
        self.inner.edit.lock().latest
    }

    /// Versions created by flushes so far.
    pub fn versions_created(&self) -> usize {
        self.inner.edit.lock().created
    }

    pub fn text(&self, node: &str) -> Option<String> {
        self.inner.edit.lock().texts.get(node).cloned()
    }

    fn check_open(&self) -> Result<(), SessionError> {
        if self.inner.closed.load(Ordering::SeqCst) || self.inner.view.lock().disconnected {
            Err(SessionError::Closed)
        } else {
            Ok(())
        }
    }

    /// Buffers editor events until the next flush.
    pub fn edit(&self, events: impl IntoIterator<Item = EditorEvent>) -> Result<(), SessionError> {
        self.check_open()?;
        let now = self.inner.config.clock.now_ms();
        let mut st = self.inner.edit.lock();
        for event in events {
            apply_event(&mut st, event)?;
            st.first_pending.get_or_insert(now);
        }
        Ok(())
    }

    pub fn viewport(&self, node: &str, view: &str, start: usize, end: usize) -> Result<(), SessionError> {
        self.edit([EditorEvent::Viewport {
            node: node.into(),
            view: view.into(),
            start,
            end,
        }])
    }

    /// Sends buffered edits as one new version. Returns `None` when there
    /// was nothing to send.
    pub fn flush(&self) -> Result<Option<VersionId>, SessionError> {
        self.check_open()?;
        let mut st = self.inner.edit.lock();
        self.inner.flush_locked(&mut st)
    }

    /// Removes all but the latest `retention` versions.
    pub fn prune(&self) -> Result<usize, SessionError> {
        self.check_open()?;
        let mut st = self.inner.edit.lock();
        self.inner.prune_locked(&mut st)
    }

    /// Runs due timers: debounce flush and periodic prune.
    pub fn poll(&self) -> Result<Option<VersionId>, SessionError> {
        self.check_open()?;
        self.inner.poll()
    }

    /// Moves a virtual clock to `ms`, firing every timer that falls due on
    /// the way at its exact time. With a real clock this sleeps until `ms`.
    pub fn advance_to(&self, ms: u64) -> Result<(), SessionError> {
        let clock = &self.inner.config.clock;
        if !clock.is_virtual() {
            let now = clock.now_ms();
            if ms > now {
                thread::sleep(Duration::from_millis(ms - now));
            }
            return Ok(());
        }
        loop {
            let next = self.inner.next_deadline();
            match next {
                Some(d) if d <= ms => {
                    clock.set(d);
                    self.poll()?;
                }
                _ => break,
            }
        }
        clock.set(ms);
        Ok(())
    }

    pub fn cancel_execution(&self) -> Result<(), SessionError> {
        self.check_open()?;
        let mut st = self.inner.edit.lock();
        st.expected_responses += 1;
        self.inner.send(&[Request::CancelExecution])
    }

    /// Makes `f` callable from prover commands as `remote name "arg"`.
    pub fn register_function(
        &self,
        name: &str,
        f: impl Fn(&str) -> Result<String, String> + Send + Sync + 'static,
    ) -> Result<(), SessionError> {
        self.check_open()?;
        self.inner.functions.lock().insert(name.to_string(), Arc::new(f));
        self.inner.send(&[Request::RegisterFunction(name.to_string())])
    }

    /// Fresh engine statistics, reflecting every request sent before.
    pub fn engine_stats(&self, timeout: Duration) -> Option<StatsReport> {
        let expected = {
            let mut st = self.inner.edit.lock();
            self.inner.send(&[Request::Stats]).ok()?;
            st.expected_responses += 1;
            st.expected_responses
        };
        let deadline = Instant::now() + timeout;
        let mut view = self.inner.view.lock();
        while view.responses < expected && !view.disconnected {
            if self.inner.changed.wait_until(&mut view, deadline).timed_out() {
                return None;
            }
        }
        view.stats
    }

    pub fn errors(&self) -> Vec<String> {
        self.inner.view.lock().errors.clone()
    }

    pub fn raw_output(&self) -> Vec<u8> {
        self.inner.view.lock().raw.clone()
    }

    pub fn nodes(&self) -> Vec<String> {
        self.inner.edit.lock().sent.keys().cloned().collect()
    }

    /// Per-command view of `node` in the newest version the engine has
    /// assigned.
    pub fn snapshot(&self, node: &str) -> NodeView {
        let defs = self.inner.edit.lock().defs.clone();
        let view = self.inner.view.lock();
        let Some((version, nodes)) = view.assignments.iter().next_back() else {
            return NodeView::default();
        };
        let Some(list) = nodes.get(node) else {
            return NodeView {
                version: Some(*version),
                commands: Vec::new(),
            };
        };
        let commands = list
            .iter()
            .map(|(id, exec)| {
                let (name, source) = defs.get(id).cloned().unwrap_or_default();
                let ev = view.execs.get(exec).cloned().unwrap_or_default();
                CommandView {
                    id: *id,
                    exec_id: *exec,
                    name,
                    source,
                    status: ev.status.unwrap_or(CommandStatus::Scheduled),
                    messages: ev.messages.into_values().collect(),
                    markup: ev.markup,
                }
            })
            .collect();
        NodeView {
            version: Some(*version),
            commands,
        }
    }

    /// True when the latest flushed version is assigned, every command has
    /// finished or failed, and every visible finished command is printed.
    pub fn is_converged(&self) -> bool {
        let (latest, visible) = {
            let st = self.inner.edit.lock();
            let visible: HashMap<String, Vec<bool>> = st
                .sent
                .iter()
                .map(|(node, sent)| {
                    let nv = NodeVersion {
                        imports: vec![],
                        commands: sent.spans.iter().map(|s| s.id).collect(),
                        perspective: sent.perspective.clone(),
                    };
                    (node.clone(), nv.visible())
                })
                .collect();
            (st.latest, visible)
        };
        let view = self.inner.view.lock();
        let Some(nodes) = view.assignments.get(&latest) else {
            return latest == ROOT_VERSION;
        };
        nodes.iter().all(|(node, list)| {
            let mask = visible.get(node);
            list.iter().enumerate().all(|(i, (_, exec))| {
                let Some(ev) = view.execs.get(exec) else {
                    return false;
                };
                match ev.status {
                    Some(CommandStatus::Failed) => true,
                    Some(CommandStatus::Finished) => {
                        ev.printed || !mask.and_then(|m| m.get(i)).copied().unwrap_or(false)
                    }
                    _ => false,
                }
            })
        })
    }

    pub fn wait_converged(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.is_converged() {
                return true;
            }
            let mut view = self.inner.view.lock();
            if view.disconnected {
                return false;
            }
            if self
                .inner
                .changed
                .wait_until(&mut view, deadline.min(Instant::now() + Duration::from_millis(20)))
                .timed_out()
                && Instant::now() >= deadline
            {
                drop(view);
                return self.is_converged();
            }
        }
    }

    /// Asks the engine to shut down and waits for the connection to close.
    pub fn close(mut self) -> Result<(), SessionError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), SessionError> {
        if self.inner.closed.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        let sent = self.inner.send(&[Request::Shutdown]);
        for h in [self.reader.take(), self.timer.take(), self.engine.take()].into_iter().flatten() {
            let _ = h.join();
        }
        sent
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

fn connect(address: &str) -> Result<TcpStream, SessionError> {
    let err = |source| SessionError::Connect {
        address: address.to_string(),
        source,
    };
    let addrs: Vec<_> = address.to_socket_addrs().map_err(err)?.collect();
    let mut last = io::Error::new(io::ErrorKind::InvalidInput, "no address");
    for a in addrs {
        match TcpStream::connect_timeout(&a, Duration::from_secs(5)) {
            Ok(s) => return Ok(s),
            Err(e) => last = e,
        }
    }
    Err(err(last))
}

/// Serves one protocol session over a TCP stream.
pub fn serve_stream(engine: &Engine, queue: protocol::OutputQueue, stream: TcpStream) -> Result<(), protocol::ProtocolError> {
    stream.set_nodelay(true).ok();
    let input = BufReader::new(stream.try_clone().map_err(protocol::FramingError::from)?);
    protocol::serve(engine, queue, input, stream)
}

fn apply_event(st: &mut EditState, event: EditorEvent) -> Result<(), SessionError> {
    let node = event.node().to_string();
    match event {
        EditorEvent::Open { text, .. } => {
            st.texts.insert(node.clone(), text);
        }
        EditorEvent::Close { .. } => {
            st.views.remove(&node);
        }
        EditorEvent::Insert { offset, text, .. } => {
            let buffer = st.texts.get_mut(&node).ok_or_else(|| SessionError::UnknownNode(node.clone()))?;
            let at = byte_offset(buffer, offset).ok_or_else(|| SessionError::Range { node: node.clone(), offset })?;
            buffer.insert_str(at, &text);
        }
        EditorEvent::Delete { offset, len, .. } => {
            let buffer = st.texts.get_mut(&node).ok_or_else(|| SessionError::UnknownNode(node.clone()))?;
            let range = byte_offset(buffer, offset).zip(byte_offset(buffer, offset + len));
            let (a, b) = range.ok_or_else(|| SessionError::Range { node: node.clone(), offset })?;
            buffer.replace_range(a..b, "");
        }
        EditorEvent::Viewport { view, start, end, .. } => {
            st.views.entry(node.clone()).or_default().insert(view, (start, end));
        }
        EditorEvent::CloseView { view, .. } => {
            if let Some(views) = st.views.get_mut(&node) {
                views.remove(&view);
            }
        }
    }
    st.dirty.insert(node);
    Ok(())
}

/// Command intervals covered by the views, merged into maximal runs.
fn perspective(spans: &[SentSpan], views: Option<&BTreeMap<String, (usize, usize)>>) -> Vec<Interval> {
    let Some(views) = views else {
        return Vec::new();
    };
    let visible: Vec<bool> = spans
        .iter()
        .map(|s| {
            views.values().any(|&(a, b)| {
                let (a, b) = (a.min(b), a.max(b));
                if a == b {
                    s.start <= a && a < s.end.max(s.start + 1)
                } else {
                    s.start < b && a < s.end
                }
            })
        })
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < spans.len() {
        if visible[i] {
            let j = (i..spans.len()).take_while(|&k| visible[k]).last().unwrap();
            out.push((spans[i].id, spans[j].id));
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

impl Inner {
    fn send(&self, requests: &[Request]) -> Result<(), SessionError> {
        let mut w = self.writer.lock();
        for r in requests {
            write_chunks(&mut *w, &r.to_chunks()).map_err(|e| match e {
                protocol::FramingError::Io(e) => SessionError::Io(e),
                other => SessionError::Handshake(other.to_string()),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    fn next_deadline(&self) -> Option<u64> {
        let st = self.edit.lock();
        let flush = st.first_pending.map(|t| t + self.config.debounce.as_millis() as u64);
        let prune = st.last_prune + self.config.prune_interval.as_millis() as u64;
        Some(flush.map_or(prune, |f| f.min(prune)))
    }

    fn poll(&self) -> Result<Option<VersionId>, SessionError> {
        let now = self.config.clock.now_ms();
        let mut st = self.edit.lock();
        let mut flushed = None;
        if st
            .first_pending
            .is_some_and(|t| now >= t + self.config.debounce.as_millis() as u64)
        {
            flushed = self.flush_locked(&mut st)?;
        }
        if now >= st.last_prune + self.config.prune_interval.as_millis() as u64 {
            st.last_prune = now;
            self.prune_locked(&mut st)?;
        }
        Ok(flushed)
    }

    fn flush_locked(&self, st: &mut EditState) -> Result<Option<VersionId>, SessionError> {
        st.first_pending = None;
        let dirty = std::mem::take(&mut st.dirty);
        let mut requests = Vec::new();
        let mut edits = Vec::new();
        for node in dirty {
            let text = st.texts.get(&node).cloned().unwrap_or_default();
            let spans = toy::parse_theory(&text);
            let old = st.sent.get(&node).cloned().unwrap_or_default();
            let hashes: Vec<u64> = spans.iter().map(|s| hash_of(&s.source)).collect();
            let prefix = old.spans.iter().zip(&hashes).take_while(|(o, h)| o.hash == **h).count();
            let max_suffix = old.spans.len().min(spans.len()) - prefix;
            let suffix = old
                .spans
                .iter()
                .rev()
                .zip(hashes.iter().rev())
                .take(max_suffix)
                .take_while(|(o, h)| o.hash == **h)
                .count();
            let mut new_spans = Vec::with_capacity(spans.len());
            let mut pos = 0;
            let mut inserted = Vec::new();
            for (i, span) in spans.iter().enumerate() {
                let len = span.source.chars().count();
                let id = if i < prefix {
                    old.spans[i].id
                } else if i >= spans.len() - suffix {
                    old.spans[old.spans.len() - (spans.len() - i)].id
                } else {
                    let id = st.next_command;
                    st.next_command += 1;
                    st.defs.insert(id, (span.name.clone(), span.source.clone()));
                    requests.push(Request::DefineCommand {
                        id,
                        name: span.name.clone(),
                        source: span.source.clone(),
                    });
                    inserted.push(id);
                    id
                };
                new_spans.push(SentSpan {
                    id,
                    hash: hashes[i],
                    start: pos,
                    end: pos + len,
                });
                pos += len;
            }
            let removed: Vec<CommandId> = old.spans[prefix..old.spans.len() - suffix].iter().map(|s| s.id).collect();
            if !removed.is_empty() || !inserted.is_empty() || !st.sent.contains_key(&node) {
                edits.push(Edit::Edits {
                    node: node.clone(),
                    splices: vec![Splice {
                        after: prefix.checked_sub(1).map(|i| old.spans[i].id),
                        inserted,
                        removed,
                    }],
                });
            }
            let imports = toy::theory_header(&spans).map(|(_, i)| i).unwrap_or_default();
            if imports != old.imports {
                edits.push(Edit::Deps {
                    node: node.clone(),
                    imports: imports.clone(),
                });
            }
            let visible = perspective(&new_spans, st.views.get(&node));
            if visible != old.perspective {
                edits.push(Edit::Perspective {
                    node: node.clone(),
                    visible: visible.clone(),
                });
            }
            st.sent.insert(
                node,
                SentNode {
                    spans: new_spans,
                    imports,
                    perspective: visible,
                },
            );
        }
        if edits.is_empty() {
            return Ok(None);
        }
        let (old, new) = (st.latest, st.next_version);
        st.next_version += 1;
        requests.push(Request::Update { old, new, edits });
        self.send(&requests)?;
        st.latest = new;
        st.history.push_back(new);
        st.created += 1;
        st.expected_responses += 1;
        Ok(Some(new))
    }

    fn prune_locked(&self, st: &mut EditState) -> Result<usize, SessionError> {
        let keep = self.config.retention.max(1);
        if st.history.len() <= keep {
            return Ok(0);
        }
        let drop: Vec<VersionId> = st.history.drain(..st.history.len() - keep).collect();
        self.send(&[Request::RemoveVersions(drop.clone())])?;
        st.expected_responses += 1;
        Ok(drop.len())
    }

    fn fold(self: &Arc<Self>, output: Output) {
        let mut view = self.view.lock();
        match output {
            Output::Assignment { version, nodes } => {
                for (_, exec) in nodes.values().flatten() {
                    view.execs.entry(*exec).or_default();
                }
                view.assignments.insert(version, nodes);
                let retained: BTreeSet<VersionId> = self.edit.lock().history.iter().copied().collect();
                let newest = view.assignments.keys().next_back().copied();
                view.assignments
                    .retain(|v, _| retained.contains(v) || Some(*v) == newest);
            }
            Output::Status { exec, status } => {
                let ev = view.execs.entry(exec).or_default();
                let restarted = matches!(status, CommandStatus::Running | CommandStatus::Scheduled)
                    && !matches!(ev.status, Some(CommandStatus::Running));
                if restarted {
                    ev.messages.clear();
                    ev.printed = false;
                }
                ev.status = Some(status);
            }
            Output::Message { exec, message } => {
                view.execs
                    .entry(exec)
                    .or_default()
                    .messages
                    .insert(message.order_key(), message);
            }
            Output::Markup { exec, ranges } => view.execs.entry(exec).or_default().markup = ranges,
            Output::Printed { exec } => view.execs.entry(exec).or_default().printed = true,
            Output::Stats(report) => {
                view.stats = Some(report);
                view.responses += 1;
            }
            Output::Error(text) => {
                log::warn!("engine error: {text}");
                view.errors.push(text);
                view.responses += 1;
            }
            Output::Raw(bytes) => view.raw.extend(bytes),
            Output::RemoteCall { id, function, argument } => {
                let f = self.functions.lock().get(&function).cloned();
                let inner = self.clone();
                thread::spawn(move || {
                    let result = match f {
                        Some(f) => f(&argument),
                        None => Err(format!("no front-end function {function:?}")),
                    };
                    let _ = inner.send(&[Request::FunctionReply { id, result }]);
                });
            }
            Output::Hello { .. } => {}
        }
        drop(view);
        self.changed.notify_all();
    }
}

fn read_loop(inner: &Arc<Inner>, mut input: BufReader<TcpStream>) {
    while let Ok(Some(chunks)) = read_chunks(&mut input) {
        match Output::parse(&chunks) {
            Ok(output) => inner.fold(output),
            Err(e) => log::warn!("bad engine output: {e}"),
        }
    }
    inner.view.lock().disconnected = true;
    inner.changed.notify_all();
}

fn timer_loop(inner: Weak<Inner>) {
    loop {
        thread::sleep(Duration::from_millis(5));
        let Some(inner) = inner.upgrade() else {
            return;
        };
        if inner.closed.load(Ordering::SeqCst) || inner.view.lock().disconnected {
            return;
        }
        let _ = inner.poll();
    }
}

/// One line of an edit trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub t_ms: u64,
    pub action: TraceAction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceAction {
    Editor(EditorEvent),
    Flush,
    Prune,
    Cancel,
    /// Flush, then wait until the engine has converged.
    Wait,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct TraceError {
    pub line: usize,
    pub reason: String,
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

impl TraceEvent {
    /// Renders the event as a trace line.
    pub fn to_line(&self) -> String {
        let fields: Vec<String> = match &self.action {
            TraceAction::Editor(e) => match e {
                EditorEvent::Open { node, text } => vec!["open".into(), node.clone(), escape(text)],
                EditorEvent::Close { node } => vec!["close".into(), node.clone()],
                EditorEvent::Insert { node, offset, text } => {
                    vec!["insert".into(), node.clone(), offset.to_string(), escape(text)]
                }
                EditorEvent::Delete { node, offset, len } => {
                    vec!["delete".into(), node.clone(), offset.to_string(), len.to_string()]
                }
                EditorEvent::Viewport { node, view, start, end } => vec![
                    "viewport".into(),
                    node.clone(),
                    view.clone(),
                    start.to_string(),
                    end.to_string(),
                ],
                EditorEvent::CloseView { node, view } => vec!["close_view".into(), node.clone(), view.clone()],
            },
            TraceAction::Flush => vec!["flush".into()],
            TraceAction::Prune => vec!["prune".into()],
            TraceAction::Cancel => vec!["cancel".into()],
            TraceAction::Wait => vec!["wait".into()],
        };
        format!("{}\t{}", self.t_ms, fields.join("\t"))
    }
}

/// Parses an edit trace: `t_ms<TAB>event<TAB>args`, one per line. Blank
/// lines and lines starting with `#` are skipped. Times must not decrease.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events = Vec::new();
    let mut last = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| TraceError { line: line_no, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        let t_ms: u64 = fields[0].trim().parse().map_err(|_| err(format!("bad time {:?}", fields[0])))?;
        if t_ms < last {
            return Err(err("time goes backwards".into()));
        }
        last = t_ms;
        let event = fields.get(1).copied().unwrap_or("");
        let args = fields.get(2..).unwrap_or(&[]);
        let arity = |n: std::ops::RangeInclusive<usize>| {
            if n.contains(&args.len()) {
                Ok(())
            } else {
                Err(err(format!("{event} takes {n:?} arguments, got {}", args.len())))
            }
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad number {s:?}")));
        let node = || args[0].to_string();
        let action = match event {
            "open" => {
                arity(1..=2)?;
                TraceAction::Editor(EditorEvent::Open {
                    node: node(),
                    text: args.get(1).map(|t| unescape(t)).unwrap_or_default(),
                })
            }
            "close" => {
                arity(1..=1)?;
                TraceAction::Editor(EditorEvent::Close { node: node() })
            }
            "insert" => {
                arity(3..=3)?;
                TraceAction::Editor(EditorEvent::Insert {
                    node: node(),
                    offset: num(args[1])?,
                    text: unescape(args[2]),
                })
            }
            "delete" => {
                arity(3..=3)?;
                TraceAction::Editor(EditorEvent::Delete {
                    node: node(),
                    offset: num(args[1])?,
                    len: num(args[2])?,
                })
            }
            "viewport" => {
                arity(4..=4)?;
                TraceAction::Editor(EditorEvent::Viewport {
                    node: node(),
                    view: args[1].to_string(),
                    start: num(args[2])?,
                    end: num(args[3])?,
                })
            }
            "close_view" => {
                arity(2..=2)?;
                TraceAction::Editor(EditorEvent::CloseView {
                    node: node(),
                    view: args[1].to_string(),
                })
            }
            "flush" | "prune" | "cancel" | "wait" => {
                arity(0..=0)?;
                match event {
                    "flush" => TraceAction::Flush,
                    "prune" => TraceAction::Prune,
                    "cancel" => TraceAction::Cancel,
                    _ => TraceAction::Wait,
                }
            }
            other => return Err(err(format!("unknown event {other:?}"))),
        };
        events.push(TraceEvent { t_ms, action });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WAIT: Duration = Duration::from_secs(10);

    fn session(debounce_ms: u64) -> Session {
        Session::start(SessionConfig {
            workers: 2,
            debounce: Duration::from_millis(debounce_ms),
            clock: Clock::virtual_clock(),
            ..SessionConfig::default()
        })
        .unwrap()
    }

    fn open(node: &str, text: &str) -> EditorEvent {
        EditorEvent::Open {
            node: node.into(),
            text: text.into(),
        }
    }

    /// Types `n` characters, one every 10 ms, then idles.
    fn keystrokes(s: &Session, n: u64) {
        s.edit([open("A", "")]).unwrap();
        for i in 0..n {
            s.advance_to(i * 10).unwrap();
            s.edit([EditorEvent::Insert {
                node: "A".into(),
                offset: i as usize,
                text: "x".into(),
            }])
            .unwrap();
        }
        s.advance_to(n * 10 + 2000).unwrap();
    }

    #[test]
    fn start_with_defaults() {
        let s = Session::start(SessionConfig {
            workers: 1,
            ..SessionConfig::default()
        })
        .unwrap();
        assert_eq!(s.latest_version(), ROOT_VERSION);
        assert_eq!(s.flush().unwrap(), None);
        s.close().unwrap();
    }

    #[test]
    fn bad_address_fails() {
        let r = Session::start(SessionConfig {
            address: Some("127.0.0.1:1".into()),
            ..SessionConfig::default()
        });
        assert!(matches!(r, Err(SessionError::Connect { .. })));
    }

    #[test]
    fn debounce_groups_keystrokes() {
        let s = session(300);
        keystrokes(&s, 50);
        assert!(s.versions_created() <= 3, "{}", s.versions_created());
        let s = session(50);
        keystrokes(&s, 50);
        assert!(s.versions_created() >= 5, "{}", s.versions_created());
    }

    #[test]
    fn single_keystroke_single_version() {
        let s = session(300);
        s.edit([open("A", "def x = 1")]).unwrap();
        s.advance_to(400).unwrap();
        assert_eq!(s.versions_created(), 1);
        s.advance_to(2000).unwrap();
        assert_eq!(s.versions_created(), 1);
    }

    #[test]
    fn def_thm_print_converges_with_markup() {
        let s = session(300);
        let text = "theory A begin\ndef x = 2\nthm t : x * 3 = 6\nshell \"true\"\nprint x\nend\n";
        s.edit([open("A", text)]).unwrap();
        s.viewport("A", "main", 0, 1000).unwrap();
        s.flush().unwrap();
        assert!(s.wait_converged(WAIT));
        let v = s.snapshot("A");
        assert_eq!(v.commands.len(), 6);
        assert!(v.commands.iter().all(|c| c.status == CommandStatus::Finished), "{v:?}");
        assert_eq!(v.commands[4].messages[0].text, "2");
        assert!(v.commands[1].markup.iter().any(|m| m.0 == TokenKind::Command));
        assert!(v.commands[3].markup.iter().any(|m| m.0 == TokenKind::String));
    }

    #[test]
    fn superseded_messages_disappear() {
        let s = session(300);
        s.edit([open("A", "def x = 1\nfail boom\n")]).unwrap();
        s.flush().unwrap();
        assert!(s.wait_converged(WAIT));
        assert_eq!(s.snapshot("A").commands[1].status, CommandStatus::Failed);
        s.edit([EditorEvent::Delete { node: "A".into(), offset: 10, len: 10 }]).unwrap();
        assert_eq!(s.text("A").unwrap(), "def x = 1\n");
        s.flush().unwrap();
        assert!(s.wait_converged(WAIT));
        let v = s.snapshot("A");
        assert_eq!(v.commands.len(), 1);
        assert!(v.commands.iter().all(|c| c.messages.iter().all(|m| m.text != "boom")));
    }

    #[test]
    fn splices_reuse_unchanged_spans() {
        let s = session(300);
        s.edit([open("A", "def a = 1\ndef b = 2\ndef c = 3\n")]).unwrap();
        s.flush().unwrap();
        assert!(s.wait_converged(WAIT));
        let before = s.snapshot("A");
        s.edit([EditorEvent::Insert { node: "A".into(), offset: 19, text: "0".into() }]).unwrap();
        s.flush().unwrap();
        assert!(s.wait_converged(WAIT));
        let after = s.snapshot("A");
        assert_eq!(after.commands[0].exec_id, before.commands[0].exec_id);
        assert_eq!(after.commands[1].source, "def b = 20\n");
        assert_ne!(after.commands[1].id, before.commands[1].id);
        assert_eq!(after.commands[2].id, before.commands[2].id);
        assert_ne!(after.commands[2].exec_id, before.commands[2].exec_id);
    }

    #[test]
    fn imports_from_header() {
        let s = session(300);
        s.edit([open("A", "theory A begin def x = 1 end"), open("B", "theory B imports A begin print x end")])
            .unwrap();
        s.viewport("B", "v", 0, 100).unwrap();
        s.flush().unwrap();
        assert!(s.wait_converged(WAIT));
        let b = s.snapshot("B");
        assert_eq!(b.commands[1].messages[0].text, "1");
    }

    #[test]
    fn viewports_union_and_close() {
        let spans: Vec<SentSpan> = (0..10)
            .map(|i| SentSpan { id: i + 1, hash: 0, start: i as usize * 10, end: i as usize * 10 + 10 })
            .collect();
        let mut views = BTreeMap::new();
        views.insert("a".to_string(), (0, 15));
        views.insert("b".to_string(), (75, 100));
        assert_eq!(perspective(&spans, Some(&views)), vec![(1, 2), (8, 10)]);
        assert_eq!(perspective(&spans, None), vec![]);
    }

    #[test]
    fn prune_keeps_latest_window() {
        let s = session(300);
        assert_eq!(s.prune().unwrap(), 0);
        s.edit([open("A", "")]).unwrap();
        for i in 0..20 {
            s.edit([EditorEvent::Insert { node: "A".into(), offset: 0, text: format!("def v{i} = {i}\n") }])
                .unwrap();
            s.flush().unwrap();
        }
        s.prune().unwrap();
        let stats = s.engine_stats(WAIT).unwrap();
        assert!(stats.stats.versions <= 5, "{stats:?}");
        assert_eq!(stats.latest, s.latest_version());
        s.edit([EditorEvent::Insert { node: "A".into(), offset: 0, text: "def z = 0\n".into() }]).unwrap();
        s.flush().unwrap();
        assert!(s.wait_converged(WAIT));
        assert!(s.errors().is_empty(), "{:?}", s.errors());
    }

    #[test]
    fn remote_function_from_front_end() {
        let s = session(300);
        s.register_function("upper", |x| Ok(x.to_uppercase())).unwrap();
        s.edit([open("A", "remote upper \"abc\"")]).unwrap();
        s.viewport("A", "v", 0, 100).unwrap();
        s.flush().unwrap();
        assert!(s.wait_converged(WAIT));
        assert_eq!(s.snapshot("A").commands[0].messages[0].text, "ABC");
    }

    #[test]
    fn closed_session_rejects_edits() {
        let s = session(300);
        s.inner.closed.store(true, Ordering::SeqCst);
        assert!(matches!(s.edit([open("A", "")]), Err(SessionError::Closed)));
        s.inner.closed.store(false, Ordering::SeqCst);
    }

    #[test]
    fn trace_round_trip() {
        let text = "# comment\n0\topen\tA\tdef x = 1\\n\n10\tinsert\tA\t0\tz\\tq\n20\tdelete\tA\t0\t1\n\
                    30\tviewport\tA\tv\t0\t10\n40\tclose_view\tA\tv\n50\tclose\tA\n60\tflush\n70\tprune\n80\tcancel\n90\twait\n";
        let events = parse_trace(text).unwrap();
        assert_eq!(events.len(), 10);
        assert_eq!(
            events[0].action,
            TraceAction::Editor(EditorEvent::Open { node: "A".into(), text: "def x = 1\n".into() })
        );
        let again: String = events.iter().map(|e| e.to_line() + "\n").collect();
        assert_eq!(parse_trace(&again).unwrap(), events);
    }

    #[test]
    fn trace_errors_name_the_line() {
        assert_eq!(parse_trace("0\tflush\nx\tflush").unwrap_err().line, 2);
        assert_eq!(parse_trace("5\tflush\n3\tflush").unwrap_err().line, 2);
        assert_eq!(parse_trace("0\tjump").unwrap_err().line, 1);
        assert_eq!(parse_trace("0\tinsert\tA\tq\tx").unwrap_err().line, 1);
    }
}
