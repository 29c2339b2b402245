//! The document state: command definitions, version history, and the
//! incremental execution that chains eval cells and forks print cells.
//!
//! Each node's commands are chained through [`Memo`] cells, one per
//! command; cell `i` consumes the post-state of cell `i - 1`, and the first
//! cell consumes the merged final states of the node's imports. A single
//! task per node walks the chain. Prints and forked proofs never block the
//! chain.

use crate::eval::{
    checkpoint, Failure, Future, FutureState, Lazy, Memo, MemoState, Res, Scheduler, TaskGroup,
};
use crate::message::{Message, MessageKind};
use crate::syntax::{self, Token, TokenKind};
use crate::toy::{self, Command, ToplevelState, Transition};
use parking_lot::{Mutex, RwLock};
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::time::{Duration, Instant};
use thiserror::Error;

pub type CommandId = u64;
pub type VersionId = u64;
pub type ExecId = u64;

/// The empty version every document starts with.
pub const ROOT_VERSION: VersionId = 0;

pub const VISIBLE_EVAL: i32 = 3;
pub const VISIBLE_PRINT: i32 = 2;
pub const HIDDEN_EVAL: i32 = 1;
pub const HIDDEN_PRINT: i32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DocumentError {
    #[error("unknown version {0}")]
    UnknownVersion(VersionId),
    #[error("version {0} already exists")]
    DuplicateVersion(VersionId),
    #[error("unknown command {0}")]
    UnknownCommand(CommandId),
    #[error("duplicate command {0}")]
    DuplicateCommand(CommandId),
    #[error("command {command} is not in node {node}")]
    NotInNode { node: String, command: CommandId },
    #[error("command {0} is already in a node")]
    AlreadyPlaced(CommandId),
    #[error("import cycle through node {0}")]
    Cycle(String),
    #[error("cannot remove latest version {0}")]
    RemoveLatest(VersionId),
}

/// Removes `removed`, then inserts `inserted` after `after` (at the start
/// when `after` is `None`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splice {
    pub after: Option<CommandId>,
    pub inserted: Vec<CommandId>,
    pub removed: Vec<CommandId>,
}

/// Inclusive range of commands, by id.
pub type Interval = (CommandId, CommandId);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Edit {
    Edits { node: String, splices: Vec<Splice> },
    Deps { node: String, imports: Vec<String> },
    Perspective { node: String, visible: Vec<Interval> },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeVersion {
    pub imports: Vec<String>,
    pub commands: Vec<CommandId>,
    pub perspective: Vec<Interval>,
}

impl NodeVersion {
    /// Which commands the perspective covers. Endpoints outside the node
    /// are clipped away.
    pub fn visible(&self) -> Vec<bool> {
        let index: HashMap<CommandId, usize> =
            self.commands.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let mut mask = vec![false; self.commands.len()];
        for (a, b) in &self.perspective {
            let (lo, hi) = match (index.get(a), index.get(b)) {
                (Some(&i), Some(&j)) => (i.min(j), i.max(j)),
                (Some(&i), None) | (None, Some(&i)) => (i, i),
                (None, None) => continue,
            };
            mask[lo..=hi].iter_mut().for_each(|v| *v = true);
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Version {
    pub id: VersionId,
    pub nodes: BTreeMap<String, NodeVersion>,
}

impl Version {
    /// Topological order of nodes, lexicographic among independent ones.
    pub fn linearize(&self) -> Result<Vec<String>, DocumentError> {
        linearize(&self.nodes)
    }
}

fn linearize(nodes: &BTreeMap<String, NodeVersion>) -> Result<Vec<String>, DocumentError> {
    let mut indegree: BTreeMap<&str, usize> = nodes.keys().map(|k| (k.as_str(), 0)).collect();
    let mut users: HashMap<&str, Vec<&str>> = HashMap::new();
    for (name, node) in nodes {
        for import in node.imports.iter().collect::<BTreeSet<_>>() {
            *indegree.get_mut(name.as_str()).unwrap() += 1;
            users.entry(import.as_str()).or_default().push(name);
        }
    }
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(n, _)| *n)
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(n) = ready.pop_first() {
        order.push(n.to_string());
        for user in users.get(n).into_iter().flatten() {
            let d = indegree.get_mut(user).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(user);
            }
        }
    }
    if order.len() < nodes.len() {
        let stuck = indegree
            .iter()
            .find(|(n, d)| **d > 0 && !order.iter().any(|o| o == *n))
            .map_or_else(String::new, |(n, _)| n.to_string());
        return Err(DocumentError::Cycle(stuck));
    }
    Ok(order)
}

/// Outcome of the state-independent read of a command.
#[derive(Debug)]
pub struct ReadResult {
    pub tokens: Vec<Token>,
    pub command: Command,
}

/// An immutable command definition. Reading happens on first use.
pub struct CommandDef {
    pub id: CommandId,
    pub name: String,
    pub source: String,
    hash: u64,
    read: OnceLock<ReadResult>,
}

impl CommandDef {
    pub fn new(id: CommandId, name: impl Into<String>, source: impl Into<String>) -> Self {
        let source = source.into();
        let mut h = DefaultHasher::new();
        source.hash(&mut h);
        CommandDef {
            id,
            name: name.into(),
            hash: h.finish(),
            source,
            read: OnceLock::new(),
        }
    }

    pub fn source_hash(&self) -> u64 {
        self.hash
    }

    pub fn read(&self) -> &ReadResult {
        self.read.get_or_init(|| {
            let table = toy::keywords();
            let tokens = syntax::tokenize(&table, &syntax::scan_symbols(&self.source));
            let command = toy::read_tokens(&table, &tokens);
            ReadResult { tokens, command }
        })
    }

    pub fn markup(&self) -> Vec<(TokenKind, usize, usize)> {
        toy::markup(&self.read().tokens)
    }

    pub fn is_read(&self) -> bool {
        self.read.get().is_some()
    }
}

impl fmt::Debug for CommandDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CommandDef")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("source", &self.source)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CommandStatus {
    Scheduled,
    Running,
    Finished,
    Failed,
    Cancelled,
}

impl CommandStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandStatus::Scheduled => "scheduled",
            CommandStatus::Running => "running",
            CommandStatus::Finished => "finished",
            CommandStatus::Failed => "failed",
            CommandStatus::Cancelled => "cancelled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "scheduled" => CommandStatus::Scheduled,
            "running" => CommandStatus::Running,
            "finished" => CommandStatus::Finished,
            "failed" => CommandStatus::Failed,
            "cancelled" => CommandStatus::Cancelled,
            _ => return None,
        })
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, CommandStatus::Finished | CommandStatus::Failed)
    }
}

impl fmt::Display for CommandStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Receives execution events as they happen, from worker threads.
/// Events of one command arrive in order.
pub trait Observer: Send + Sync {
    fn status(&self, _exec: ExecId, _status: CommandStatus) {}
    fn messages(&self, _exec: ExecId, _messages: &[Message]) {}
    /// The print of a command has produced all of its messages.
    fn printed(&self, _exec: ExecId) {}
}

struct Silent;

impl Observer for Silent {}

/// Result of an update: the exec ids assigned to each node's commands.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub version: VersionId,
    pub nodes: BTreeMap<String, Vec<(CommandId, ExecId)>>,
    pub reused: usize,
    pub fresh: Vec<(CommandId, ExecId)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandSnapshot {
    pub command: CommandId,
    pub exec_id: ExecId,
    pub name: String,
    pub status: CommandStatus,
    pub messages: Vec<Message>,
    /// Digest of the post-state once eval has produced it.
    pub state_digest: Option<u64>,
}

impl CommandSnapshot {
    pub fn has_warning(&self) -> bool {
        self.messages.iter().any(|m| m.kind == MessageKind::Warning)
    }

    pub fn finished_with_warning(&self) -> bool {
        self.status == CommandStatus::Finished && self.has_warning()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub commands: usize,
    pub versions: usize,
    pub eval_runs: usize,
    pub print_activations: usize,
    pub prints_forked: usize,
    pub proofs_forked: usize,
    pub restarts: usize,
}

#[derive(Default)]
struct Counters {
    eval_runs: AtomicUsize,
    print_activations: AtomicUsize,
    prints_forked: AtomicUsize,
    proofs_forked: AtomicUsize,
    restarts: AtomicUsize,
}

struct Shared {
    scheduler: Scheduler,
    observer: Arc<dyn Observer>,
    context: toy::Context,
    counters: Counters,
    exec_ids: AtomicU64,
    forked_read: AtomicBool,
}

#[derive(Clone, Debug)]
struct EvalRecord {
    transition: Transition,
}

struct ProofRun {
    future: Future<()>,
    result: Arc<Mutex<Option<Vec<Message>>>>,
}

impl ProofRun {
    fn is_lost(&self) -> bool {
        self.result.lock().is_none() && self.future.is_done()
    }
}

#[derive(Default)]
struct EntryControl {
    active: bool,
    print: Option<Future<()>>,
    proofs: Option<Vec<ProofRun>>,
    reported: Option<CommandStatus>,
}

/// Per-command execution cells, shared between executions that reuse it.
struct Entry {
    def: Arc<CommandDef>,
    exec_id: ExecId,
    eval: Memo<Arc<EvalRecord>>,
    print: Lazy<Arc<Vec<Message>>>,
    control: Mutex<EntryControl>,
}

type StateFn = Arc<dyn Fn() -> Res<Arc<ToplevelState>> + Send + Sync>;

impl Entry {
    fn new(shared: &Arc<Shared>, def: Arc<CommandDef>, input: StateFn) -> Arc<Entry> {
        let exec_id = shared.exec_ids.fetch_add(1, Ordering::SeqCst);
        Arc::new_cyclic(|weak: &Weak<Entry>| {
            let (weak, sh, d) = (weak.clone(), shared.clone(), def.clone());
            let eval = Memo::new(move || {
                sh.counters.eval_runs.fetch_add(1, Ordering::SeqCst);
                if let Some(entry) = weak.upgrade() {
                    entry.report(&sh, &[]);
                }
                let state = input()?;
                let transition = toy::transaction(&d.read().command, &state, &sh.context)?;
                Ok(Arc::new(EvalRecord { transition }))
            });
            let memo = eval.clone();
            let print = Lazy::new(move || {
                let record = memo.eval()?;
                let t = &record.transition;
                Ok(Arc::new(toy::print(&t.state, &t.output)))
            });
            Entry {
                def,
                exec_id,
                eval,
                print,
                control: Mutex::new(EntryControl::default()),
            }
        })
    }

    fn post_state(self: &Arc<Self>) -> StateFn {
        let entry = self.clone();
        Arc::new(move || Ok(entry.eval.eval()?.transition.state.clone()))
    }

    fn status_of(&self, control: &EntryControl) -> CommandStatus {
        match self.eval.state() {
            MemoState::Unevaluated => CommandStatus::Scheduled,
            MemoState::Running => CommandStatus::Running,
            MemoState::Interrupt => CommandStatus::Cancelled,
            MemoState::Error => CommandStatus::Failed,
            MemoState::Value => {
                let Some(Ok(record)) = self.eval.peek() else {
                    return CommandStatus::Running;
                };
                if record.transition.failed {
                    return CommandStatus::Failed;
                }
                if record.transition.proofs.is_empty() {
                    return CommandStatus::Finished;
                }
                match &control.proofs {
                    None => CommandStatus::Running,
                    Some(runs) if runs.iter().any(ProofRun::is_lost) => CommandStatus::Cancelled,
                    Some(runs) if runs.iter().all(|r| r.result.lock().is_some()) => {
                        CommandStatus::Finished
                    }
                    Some(_) => CommandStatus::Running,
                }
            }
        }
    }

    fn status(&self) -> CommandStatus {
        self.status_of(&self.control.lock())
    }

    /// Emits `messages` and, if it changed, the status.
    fn report(&self, shared: &Shared, messages: &[Message]) {
        let mut control = self.control.lock();
        if !messages.is_empty() {
            shared.observer.messages(self.exec_id, messages);
        }
        let status = self.status_of(&control);
        if control.reported != Some(status) {
            control.reported = Some(status);
            shared.observer.status(self.exec_id, status);
        }
    }

    fn messages(&self) -> Vec<Message> {
        let mut out = Vec::new();
        if let Some(Ok(record)) = self.eval.peek() {
            out.extend(record.transition.messages.iter().cloned());
        }
        if let Some(runs) = &self.control.lock().proofs {
            for run in runs {
                out.extend(run.result.lock().iter().flatten().cloned());
            }
        }
        if let Some(Ok(msgs)) = self.print.peek() {
            out.extend(msgs.iter().cloned());
        }
        out.sort_by_key(Message::order_key);
        out
    }

    fn is_quiescent(&self) -> bool {
        let control = self.control.lock();
        let status = self.status_of(&control);
        let print_done = !control.active
            || status == CommandStatus::Failed
            || self.print.is_evaluated();
        status.is_terminal() && print_done
    }

    /// Marks the print as visible; counts each cell once.
    fn activate(self: &Arc<Self>, shared: &Arc<Shared>, group: &TaskGroup) {
        let mut control = self.control.lock();
        if !control.active {
            control.active = true;
            shared.counters.print_activations.fetch_add(1, Ordering::SeqCst);
        }
        self.fork_print(&mut control, shared, group);
    }

    fn fork_print(self: &Arc<Self>, control: &mut EntryControl, shared: &Arc<Shared>, group: &TaskGroup) {
        let evaluated = matches!(self.eval.peek(), Some(Ok(_)));
        let live = control
            .print
            .as_ref()
            .is_some_and(|f| !matches!(f.state(), FutureState::Cancelled));
        if !control.active || !evaluated || live || self.print.is_evaluated() {
            return;
        }
        shared.counters.prints_forked.fetch_add(1, Ordering::SeqCst);
        let (entry, sh) = (Arc::downgrade(self), shared.clone());
        control.print = Some(shared.scheduler.fork(group, VISIBLE_PRINT, move || {
            let Some(entry) = entry.upgrade() else {
                return Err(Failure::Interrupt);
            };
            let messages = entry.print.force()?;
            entry.report(&sh, &messages);
            sh.observer.printed(entry.exec_id);
            Ok(())
        }));
    }

    fn fork_proofs(self: &Arc<Self>, control: &mut EntryControl, shared: &Arc<Shared>, group: &TaskGroup, priority: i32) {
        let Some(Ok(record)) = self.eval.peek() else {
            return;
        };
        let tasks = &record.transition.proofs;
        let lost = control
            .proofs
            .as_ref()
            .is_some_and(|runs| runs.iter().any(ProofRun::is_lost));
        if tasks.is_empty() || (control.proofs.is_some() && !lost) {
            return;
        }
        let runs = tasks
            .iter()
            .map(|task| {
                shared.counters.proofs_forked.fetch_add(1, Ordering::SeqCst);
                let result = Arc::new(Mutex::new(None));
                let (slot, task, entry, sh) = (result.clone(), task.clone(), Arc::downgrade(self), shared.clone());
                let future = shared.scheduler.fork(&group.new_child(), priority, move || {
                    let messages = task.run()?;
                    *slot.lock() = Some(messages.clone());
                    if let Some(entry) = entry.upgrade() {
                        entry.report(&sh, &messages);
                    }
                    Ok(())
                });
                ProofRun { future, result }
            })
            .collect();
        control.proofs = Some(runs);
    }

    /// Work that follows a completed eval: proofs, print, status.
    fn after_eval(self: &Arc<Self>, shared: &Arc<Shared>, group: &TaskGroup, priority: i32) {
        let messages = {
            let mut control = self.control.lock();
            self.fork_proofs(&mut control, shared, group, priority);
            self.fork_print(&mut control, shared, group);
            match (&control.reported, self.eval.peek()) {
                (Some(CommandStatus::Running), Some(Ok(record))) => record.transition.messages.clone(),
                _ => Vec::new(),
            }
        };
        self.report(shared, &messages);
    }
}

struct NodeExec {
    imports: Vec<String>,
    entries: Vec<Arc<Entry>>,
    final_state: StateFn,
    fully_reused: bool,
    group: TaskGroup,
    chain: Mutex<Option<Future<()>>>,
}

struct Execution {
    group: TaskGroup,
    order: Vec<String>,
    nodes: BTreeMap<String, NodeExec>,
    started: AtomicBool,
}

impl Execution {
    fn entries(&self) -> impl Iterator<Item = &Arc<Entry>> {
        self.nodes.values().flat_map(|n| n.entries.iter())
    }
}

fn run_chain(shared: &Arc<Shared>, exec: &Weak<Execution>, node: &str, priority: i32) -> Res<()> {
    let entries = {
        let exec = exec.upgrade().ok_or(Failure::Interrupt)?;
        exec.nodes[node].entries.clone()
    };
    let group = exec
        .upgrade()
        .map(|e| e.nodes[node].group.clone())
        .ok_or(Failure::Interrupt)?;
    for entry in &entries {
        loop {
            checkpoint()?;
            match entry.eval.eval() {
                Ok(_) => break,
                Err(Failure::Program(_)) => break,
                Err(Failure::Interrupt) => {
                    if group.is_cancelled() {
                        entry.report(shared, &[]);
                        return Err(Failure::Interrupt);
                    }
                    if entry.eval.restart().is_ok() {
                        shared.counters.restarts.fetch_add(1, Ordering::SeqCst);
                    } else {
                        std::thread::yield_now();
                    }
                }
            }
        }
        entry.after_eval(shared, &group, priority);
    }
    Ok(())
}

struct DocState {
    commands: HashMap<CommandId, Arc<CommandDef>>,
    versions: BTreeMap<VersionId, Arc<Version>>,
    executions: HashMap<VersionId, Arc<Execution>>,
    latest: VersionId,
}

/// Handle to the document state. Mutations are expected from a single
/// writer; snapshots may be taken concurrently with execution.
#[derive(Clone)]
pub struct Document {
    shared: Arc<Shared>,
    state: Arc<RwLock<DocState>>,
}

impl Document {
    pub fn new(scheduler: Scheduler) -> Self {
        Self::with_observer(scheduler, Arc::new(Silent), toy::Context::default())
    }

    pub fn with_observer(scheduler: Scheduler, observer: Arc<dyn Observer>, context: toy::Context) -> Self {
        let root = Arc::new(Version {
            id: ROOT_VERSION,
            nodes: BTreeMap::new(),
        });
        let exec = Arc::new(Execution {
            group: TaskGroup::new_root(),
            order: Vec::new(),
            nodes: BTreeMap::new(),
            started: AtomicBool::new(true),
        });
        Document {
            shared: Arc::new(Shared {
                scheduler,
                observer,
                context,
                counters: Counters::default(),
                exec_ids: AtomicU64::new(1),
                forked_read: AtomicBool::new(false),
            }),
            state: Arc::new(RwLock::new(DocState {
                commands: HashMap::new(),
                versions: BTreeMap::from([(ROOT_VERSION, root)]),
                executions: HashMap::from([(ROOT_VERSION, exec)]),
                latest: ROOT_VERSION,
            })),
        }
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.shared.scheduler
    }

    /// With forked READ, `define_command` starts reading each command on
    /// the worker pool right away; otherwise reading waits for first use.
    pub fn set_forked_read(&self, on: bool) {
        self.shared.forked_read.store(on, Ordering::SeqCst);
    }

    pub fn define_command(&self, id: CommandId, name: &str, source: &str) -> Result<(), DocumentError> {
        let mut state = self.state.write();
        if state.commands.contains_key(&id) {
            return Err(DocumentError::DuplicateCommand(id));
        }
        let def = Arc::new(CommandDef::new(id, name, source));
        state.commands.insert(id, def.clone());
        if self.shared.forked_read.load(Ordering::SeqCst) {
            self.shared.scheduler.fork(&TaskGroup::new_root(), HIDDEN_PRINT, move || {
                def.read();
                Ok(())
            });
        }
        Ok(())
    }

    pub fn command(&self, id: CommandId) -> Option<Arc<CommandDef>> {
        self.state.read().commands.get(&id).cloned()
    }

    pub fn command_count(&self) -> usize {
        self.state.read().commands.len()
    }

    pub fn latest_version(&self) -> VersionId {
        self.state.read().latest
    }

    pub fn versions(&self) -> Vec<VersionId> {
        self.state.read().versions.keys().copied().collect()
    }

    pub fn version(&self, id: VersionId) -> Option<Arc<Version>> {
        self.state.read().versions.get(&id).cloned()
    }

    /// Derives version `v2` from `v1` and sets up its execution, reusing
    /// the longest unchanged prefix of every node whose imports are
    /// themselves fully reused. Older executions are cancelled and
    /// interrupted cells reachable from `v2` are restarted.
    pub fn update(&self, v1: VersionId, v2: VersionId, edits: &[Edit]) -> Result<Assignment, DocumentError> {
        let mut state = self.state.write();
        let base = state.versions.get(&v1).ok_or(DocumentError::UnknownVersion(v1))?;
        if state.versions.contains_key(&v2) {
            return Err(DocumentError::DuplicateVersion(v2));
        }
        let mut nodes = base.nodes.clone();
        for edit in edits {
            apply_edit(&mut nodes, &state.commands, edit)?;
        }
        let order = linearize(&nodes)?;
        let old = state.executions.get(&v1).cloned();

        let mut assignment = Assignment {
            version: v2,
            ..Assignment::default()
        };
        let group = TaskGroup::new_root();
        let mut execs: BTreeMap<String, NodeExec> = BTreeMap::new();
        for name in &order {
            let node = &nodes[name];
            let old_node = old.as_ref().and_then(|o| o.nodes.get(name));
            let imports_kept = old_node.is_some_and(|o| {
                o.imports == node.imports && node.imports.iter().all(|i| execs[i].fully_reused)
            });
            let finals: Vec<StateFn> = node.imports.iter().map(|i| execs[i].final_state.clone()).collect();
            let initial: StateFn = Arc::new(move || {
                let states = finals.iter().map(|f| f()).collect::<Res<Vec<_>>>()?;
                Ok(Arc::new(ToplevelState::merge(states.iter().map(|s| s.as_ref()))))
            });
            let mut entries: Vec<Arc<Entry>> = Vec::with_capacity(node.commands.len());
            let mut reusing = imports_kept;
            let mut pairs = Vec::with_capacity(node.commands.len());
            for (i, id) in node.commands.iter().enumerate() {
                let def = &state.commands[id];
                let previous = old_node
                    .and_then(|o| o.entries.get(i))
                    .filter(|e| reusing && e.def.id == *id && e.def.source_hash() == def.source_hash());
                let entry = match previous {
                    Some(e) => {
                        assignment.reused += 1;
                        e.clone()
                    }
                    None => {
                        reusing = false;
                        let input = entries.last().map_or_else(|| initial.clone(), |e| e.post_state());
                        let e = Entry::new(&self.shared, def.clone(), input);
                        assignment.fresh.push((*id, e.exec_id));
                        e
                    }
                };
                pairs.push((*id, entry.exec_id));
                entries.push(entry);
            }
            let fully_reused = reusing && old_node.is_some_and(|o| o.entries.len() == entries.len());
            let final_state = entries.last().map_or_else(|| initial.clone(), |e| e.post_state());
            assignment.nodes.insert(name.clone(), pairs);
            execs.insert(
                name.clone(),
                NodeExec {
                    imports: node.imports.clone(),
                    entries,
                    final_state,
                    fully_reused,
                    group: group.new_child(),
                    chain: Mutex::new(None),
                },
            );
        }

        for exec in state.executions.values() {
            exec.group.cancel();
        }
        let exec = Arc::new(Execution {
            group,
            order,
            nodes: execs,
            started: AtomicBool::new(false),
        });
        for entry in exec.entries() {
            if entry.eval.restart().is_ok() {
                self.shared.counters.restarts.fetch_add(1, Ordering::SeqCst);
            }
        }
        state.versions.insert(v2, Arc::new(Version { id: v2, nodes }));
        state.executions.insert(v2, exec);
        state.latest = v2;
        Ok(assignment)
    }

    /// Starts the execution of `v`: one chain task per node, forked after
    /// the chains of its imports. Idempotent.
    pub fn execute(&self, v: VersionId) -> Result<(), DocumentError> {
        let (version, exec) = self.lookup(v)?;
        if exec.started.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        for name in &exec.order {
            let node = &exec.nodes[name];
            let visible = version.nodes[name].visible();
            for (entry, _) in node.entries.iter().zip(&visible).filter(|(_, v)| **v) {
                entry.activate(&self.shared, &node.group);
            }
            let priority = if visible.contains(&true) { VISIBLE_EVAL } else { HIDDEN_EVAL };
            let deps = node
                .imports
                .iter()
                .filter_map(|i| exec.nodes[i].chain.lock().as_ref().map(Future::dependency))
                .collect();
            let (shared, weak, node_name) = (self.shared.clone(), Arc::downgrade(&exec), name.clone());
            let future = self.shared.scheduler.fork_after(&node.group, priority, deps, move || {
                run_chain(&shared, &weak, &node_name, priority)
            });
            *node.chain.lock() = Some(future);
        }
        Ok(())
    }

    /// Replaces the perspective of `node` in version `v`. Newly visible
    /// prints are activated; priorities only ever go up.
    pub fn set_perspective(&self, v: VersionId, node: &str, visible: &[Interval]) -> Result<(), DocumentError> {
        let exec = {
            let mut state = self.state.write();
            let version = state.versions.get(&v).ok_or(DocumentError::UnknownVersion(v))?;
            let mut updated = (**version).clone();
            updated.nodes.entry(node.to_string()).or_default().perspective = visible.to_vec();
            state.versions.insert(v, Arc::new(updated));
            state.executions[&v].clone()
        };
        self.activate(v, &exec, node)
    }

    fn activate(&self, v: VersionId, exec: &Arc<Execution>, node: &str) -> Result<(), DocumentError> {
        let version = self.version(v).ok_or(DocumentError::UnknownVersion(v))?;
        let (Some(nv), Some(ne)) = (version.nodes.get(node), exec.nodes.get(node)) else {
            return Ok(());
        };
        let visible = nv.visible();
        if !exec.started.load(Ordering::SeqCst) || !visible.contains(&true) {
            return Ok(());
        }
        for (entry, _) in ne.entries.iter().zip(&visible).filter(|(_, v)| **v) {
            entry.activate(&self.shared, &ne.group);
        }
        if let Some(chain) = &*ne.chain.lock() {
            chain.raise_priority(VISIBLE_EVAL);
        }
        Ok(())
    }

    /// Cancels the running work of every execution.
    pub fn cancel_execution(&self) {
        for exec in self.state.read().executions.values() {
            exec.group.cancel();
        }
    }

    /// Drops versions and their executions, and the commands that only
    /// they referenced. The latest version cannot be removed.
    pub fn remove_versions(&self, ids: &[VersionId]) -> Result<(), DocumentError> {
        let mut state = self.state.write();
        if let Some(latest) = ids.iter().find(|v| **v == state.latest) {
            return Err(DocumentError::RemoveLatest(*latest));
        }
        let mut candidates = HashSet::new();
        for id in ids {
            if let Some(v) = state.versions.remove(id) {
                candidates.extend(v.nodes.values().flat_map(|n| n.commands.iter().copied()));
            }
            if let Some(exec) = state.executions.remove(id) {
                exec.group.cancel();
            }
        }
        for v in state.versions.values() {
            for n in v.nodes.values() {
                for c in &n.commands {
                    candidates.remove(c);
                }
            }
        }
        for c in candidates {
            state.commands.remove(&c);
        }
        Ok(())
    }

    fn lookup(&self, v: VersionId) -> Result<(Arc<Version>, Arc<Execution>), DocumentError> {
        let state = self.state.read();
        match (state.versions.get(&v), state.executions.get(&v)) {
            (Some(version), Some(exec)) => Ok((version.clone(), exec.clone())),
            _ => Err(DocumentError::UnknownVersion(v)),
        }
    }

    /// Per-command status and currently available messages, ordered by
    /// position and then serial. Unknown versions or nodes give an empty
    /// report.
    pub fn snapshot(&self, v: VersionId, node: &str) -> Vec<CommandSnapshot> {
        let Ok((_, exec)) = self.lookup(v) else {
            return Vec::new();
        };
        let Some(ne) = exec.nodes.get(node) else {
            return Vec::new();
        };
        ne.entries
            .iter()
            .map(|e| CommandSnapshot {
                command: e.def.id,
                exec_id: e.exec_id,
                name: e.def.name.clone(),
                status: e.status(),
                messages: e.messages(),
                state_digest: match e.eval.peek() {
                    Some(Ok(r)) => Some(r.transition.state.digest()),
                    _ => None,
                },
            })
            .collect()
    }

    /// Node names of version `v` in execution order.
    pub fn nodes(&self, v: VersionId) -> Vec<String> {
        self.lookup(v).map(|(_, e)| e.order.clone()).unwrap_or_default()
    }

    /// Eval cells of `v` currently holding an interrupt.
    pub fn interrupted(&self, v: VersionId) -> usize {
        self.lookup(v)
            .map(|(_, e)| e.entries().filter(|x| x.eval.has_interrupt()).count())
            .unwrap_or(0)
    }

    /// No cell of `v` is scheduled, running or cancelled, and every active
    /// print has produced its output.
    pub fn is_quiescent(&self, v: VersionId) -> bool {
        self.lookup(v)
            .map(|(_, e)| e.entries().all(|x| x.is_quiescent()))
            .unwrap_or(false)
    }

    pub fn wait_quiescent(&self, v: VersionId, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.is_quiescent(v) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    pub fn stats(&self) -> EngineStats {
        let state = self.state.read();
        let c = &self.shared.counters;
        EngineStats {
            commands: state.commands.len(),
            versions: state.versions.len(),
            eval_runs: c.eval_runs.load(Ordering::SeqCst),
            print_activations: c.print_activations.load(Ordering::SeqCst),
            prints_forked: c.prints_forked.load(Ordering::SeqCst),
            proofs_forked: c.proofs_forked.load(Ordering::SeqCst),
            restarts: c.restarts.load(Ordering::SeqCst),
        }
    }
}

fn apply_edit(
    nodes: &mut BTreeMap<String, NodeVersion>,
    commands: &HashMap<CommandId, Arc<CommandDef>>,
    edit: &Edit,
) -> Result<(), DocumentError> {
    match edit {
        Edit::Edits { node, splices } => {
            let mut list = nodes.get(node).map(|n| n.commands.clone()).unwrap_or_default();
            for splice in splices {
                for id in &splice.removed {
                    let at = list.iter().position(|c| c == id).ok_or_else(|| DocumentError::NotInNode {
                        node: node.clone(),
                        command: *id,
                    })?;
                    list.remove(at);
                }
                let at = match splice.after {
                    None => 0,
                    Some(after) => {
                        list.iter().position(|c| *c == after).ok_or_else(|| DocumentError::NotInNode {
                            node: node.clone(),
                            command: after,
                        })? + 1
                    }
                };
                for id in &splice.inserted {
                    if !commands.contains_key(id) {
                        return Err(DocumentError::UnknownCommand(*id));
                    }
                }
                list.splice(at..at, splice.inserted.iter().copied());
            }
            let placed: HashSet<CommandId> = nodes
                .iter()
                .filter(|(n, _)| *n != node)
                .flat_map(|(_, v)| v.commands.iter().copied())
                .collect();
            let mut seen = HashSet::new();
            if let Some(dup) = list.iter().find(|c| placed.contains(c) || !seen.insert(**c)) {
                return Err(DocumentError::AlreadyPlaced(*dup));
            }
            nodes.entry(node.clone()).or_default().commands = list;
        }
        Edit::Deps { node, imports } => {
            for import in imports {
                nodes.entry(import.clone()).or_default();
            }
            nodes.entry(node.clone()).or_default().imports = imports.clone();
        }
        Edit::Perspective { node, visible } => {
            nodes.entry(node.clone()).or_default().perspective = visible.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::SchedulerConfig;

    const WAIT: Duration = Duration::from_secs(10);

    fn doc(workers: usize) -> Document {
        Document::new(Scheduler::new(SchedulerConfig::with_workers(workers)))
    }

    /// Defines `sources` with ids from `first` and returns the ids.
    fn define(d: &Document, first: CommandId, sources: &[&str]) -> Vec<CommandId> {
        sources
            .iter()
            .enumerate()
            .map(|(i, src)| {
                let id = first + i as CommandId;
                let name = src.split_whitespace().next().unwrap_or("");
                d.define_command(id, name, src).unwrap();
                id
            })
            .collect()
    }

    fn insert(node: &str, after: Option<CommandId>, ids: &[CommandId]) -> Edit {
        Edit::Edits {
            node: node.into(),
            splices: vec![Splice {
                after,
                inserted: ids.to_vec(),
                removed: vec![],
            }],
        }
    }

    fn all_visible(node: &str, ids: &[CommandId]) -> Edit {
        Edit::Perspective {
            node: node.into(),
            visible: vec![(ids[0], *ids.last().unwrap())],
        }
    }

    fn run(d: &Document, v1: VersionId, v2: VersionId, edits: &[Edit]) -> Assignment {
        let a = d.update(v1, v2, edits).unwrap();
        d.execute(v2).unwrap();
        assert!(d.wait_quiescent(v2, WAIT), "{:?}", d.snapshot(v2, "A"));
        a
    }

    fn statuses(s: &[CommandSnapshot]) -> Vec<CommandStatus> {
        s.iter().map(|c| c.status).collect()
    }

    #[test]
    fn init_has_empty_root() {
        let d = doc(2);
        assert_eq!(d.command_count(), 0);
        assert_eq!(d.versions(), vec![ROOT_VERSION]);
        assert!(d.remove_versions(&[]).is_ok());
        assert_eq!(d.versions(), vec![ROOT_VERSION]);
        assert!(d.update(ROOT_VERSION, 1, &[]).is_ok());
    }

    #[test]
    fn define_is_total_and_fresh() {
        let d = doc(1);
        d.define_command(1, "def", "def = =").unwrap();
        assert_eq!(d.define_command(1, "def", "def x = 1"), Err(DocumentError::DuplicateCommand(1)));
        assert_eq!(d.command(1).unwrap().source, "def = =");
        assert!(matches!(d.command(1).unwrap().read().command, Command::Diagnosed { .. }));
    }

    #[test]
    fn update_errors_leave_state_unchanged() {
        let d = doc(1);
        assert_eq!(d.update(7, 8, &[]), Err(DocumentError::UnknownVersion(7)));
        assert_eq!(d.update(0, 1, &[insert("A", None, &[5])]), Err(DocumentError::UnknownCommand(5)));
        let cyc = [
            Edit::Deps { node: "A".into(), imports: vec!["B".into()] },
            Edit::Deps { node: "B".into(), imports: vec!["A".into()] },
        ];
        assert!(matches!(d.update(0, 1, &cyc), Err(DocumentError::Cycle(_))));
        assert_eq!(d.versions(), vec![ROOT_VERSION]);
        d.update(0, 1, &[]).unwrap();
        assert_eq!(d.update(0, 1, &[]), Err(DocumentError::DuplicateVersion(1)));
    }

    #[test]
    fn def_then_print() {
        let d = doc(2);
        let ids = define(&d, 1, &["def x = 1", "print x"]);
        run(&d, 0, 1, &[insert("A", None, &ids), all_visible("A", &ids)]);
        let snap = d.snapshot(1, "A");
        assert_eq!(statuses(&snap), [CommandStatus::Finished; 2]);
        assert_eq!(snap[0].messages[0].text, "x = 1; 1 definition");
        assert_eq!(snap[1].messages.len(), 1);
        assert_eq!(snap[1].messages[0].text, "1");
    }

    #[test]
    fn failure_passes_state_through() {
        let d = doc(2);
        let ids = define(&d, 1, &["def x = 1", "fail boom", "def y = x"]);
        run(&d, 0, 1, &[insert("A", None, &ids)]);
        let snap = d.snapshot(1, "A");
        assert_eq!(
            statuses(&snap),
            [CommandStatus::Finished, CommandStatus::Failed, CommandStatus::Finished]
        );
        assert_eq!(snap[1].messages.len(), 1);
        assert_eq!(snap[1].messages[0].text, "boom");
        assert_eq!(snap[1].state_digest, snap[0].state_digest);
    }

    #[test]
    fn before_execute_all_scheduled() {
        let d = doc(1);
        let ids = define(&d, 1, &["def x = 1", "def y = 2"]);
        d.update(0, 1, &[insert("A", None, &ids)]).unwrap();
        assert_eq!(statuses(&d.snapshot(1, "A")), [CommandStatus::Scheduled; 2]);
        assert!(d.snapshot(1, "nope").is_empty());
    }

    #[test]
    fn empty_update_reuses_everything() {
        let d = doc(2);
        let ids = define(&d, 1, &["def x = 1", "def y = 2", "def z = 3"]);
        let a1 = run(&d, 0, 1, &[insert("A", None, &ids)]);
        let a2 = run(&d, 1, 2, &[]);
        assert_eq!(a1.nodes, a2.nodes);
        assert_eq!(a2.reused, 3);
        assert!(a2.fresh.is_empty());
    }

    #[test]
    fn append_reuses_prefix() {
        let d = doc(2);
        let ids = define(&d, 1, &["def x = 1", "def y = 2", "def z = 3", "def w = 4"]);
        let a1 = run(&d, 0, 1, &[insert("A", None, &ids[..3])]);
        let runs = d.stats().eval_runs;
        let a2 = run(&d, 1, 2, &[insert("A", Some(ids[2]), &ids[3..])]);
        assert_eq!(a2.nodes["A"][..3], a1.nodes["A"][..]);
        assert_eq!(a2.fresh.len(), 1);
        assert_eq!(d.stats().eval_runs - runs, 1);
    }

    #[test]
    fn mid_edit_invalidates_suffix() {
        let d = doc(2);
        let ids = define(&d, 1, &["def a = 1", "def b = 2", "def c = 3", "def d = 4", "def e = 5"]);
        let a1 = run(&d, 0, 1, &[insert("A", None, &ids)]);
        define(&d, 10, &["def b = 20"]);
        let edit = Edit::Edits {
            node: "A".into(),
            splices: vec![Splice { after: Some(ids[0]), inserted: vec![10], removed: vec![ids[1]] }],
        };
        let a2 = run(&d, 1, 2, &[edit]);
        assert_eq!(a2.nodes["A"][0], a1.nodes["A"][0]);
        assert_eq!(a2.reused, 1);
        assert_eq!(a2.fresh.len(), 4);
        let s = d.snapshot(2, "A");
        assert!(s.iter().all(|c| c.status == CommandStatus::Finished));
    }

    #[test]
    fn imports_merge_and_invalidate() {
        let d = doc(2);
        let base = define(&d, 1, &["def x = 1"]);
        let user = define(&d, 10, &["def y = x + 1"]);
        run(
            &d,
            0,
            1,
            &[
                insert("A", None, &base),
                insert("B", None, &user),
                Edit::Deps { node: "B".into(), imports: vec!["A".into()] },
            ],
        );
        assert_eq!(d.nodes(1), ["A", "B"]);
        assert_eq!(d.snapshot(1, "B")[0].status, CommandStatus::Finished);
        define(&d, 2, &["def z = 3"]);
        let a = run(&d, 1, 2, &[insert("A", Some(1), &[2])]);
        assert_eq!(a.reused, 1);
        assert_eq!(a.fresh.len(), 2);
    }

    #[test]
    fn perspective_gates_prints() {
        let d = doc(4);
        let sources: Vec<String> = (0..100).map(|i| format!("def v{i} = {i}")).collect();
        let refs: Vec<&str> = sources.iter().map(String::as_str).collect();
        let ids = define(&d, 1, &refs);
        let edits = [
            insert("A", None, &ids),
            Edit::Perspective { node: "A".into(), visible: vec![(ids[0], ids[9])] },
        ];
        run(&d, 0, 1, &edits);
        assert_eq!(d.stats().print_activations, 10);
        d.set_perspective(1, "A", &[(ids[0], ids[29])]).unwrap();
        assert!(d.wait_quiescent(1, WAIT));
        assert_eq!(d.stats().print_activations, 30);
        d.set_perspective(1, "A", &[(ids[0], ids[4])]).unwrap();
        assert_eq!(d.stats().print_activations, 30);
        let snap = d.snapshot(1, "A");
        assert!(snap[..30].iter().all(|c| c.messages.len() == 1));
        assert!(snap[30..].iter().all(|c| c.messages.is_empty()));
    }

    #[test]
    fn perspective_clips_unknown_ids() {
        let n = NodeVersion {
            imports: vec![],
            commands: vec![1, 2, 3, 4],
            perspective: vec![(99, 98), (3, 2), (4, 77)],
        };
        assert_eq!(n.visible(), [false, true, true, true]);
    }

    #[test]
    fn sorry_is_finished_with_warning() {
        let d = doc(1);
        let ids = define(&d, 1, &["thm t : 1 = 2 sorry"]);
        run(&d, 0, 1, &[insert("A", None, &ids), all_visible("A", &ids)]);
        let s = &d.snapshot(1, "A")[0];
        assert!(s.finished_with_warning());
    }

    #[test]
    fn cancel_then_update_restarts() {
        let d = doc(2);
        let ids = define(&d, 1, &["slow 300", "def x = 1"]);
        d.update(0, 1, &[insert("A", None, &ids)]).unwrap();
        d.execute(1).unwrap();
        std::thread::sleep(Duration::from_millis(50));
        d.cancel_execution();
        std::thread::sleep(Duration::from_millis(50));
        assert_eq!(d.snapshot(1, "A")[0].status, CommandStatus::Cancelled);
        assert!(d.interrupted(1) >= 1);
        let other = define(&d, 10, &["def y = 2"]);
        let a = run(&d, 1, 2, &[insert("B", None, &other)]);
        assert_eq!(a.reused, 2);
        assert_eq!(d.interrupted(2), 0);
        assert!(d.stats().restarts >= 1);
        assert_eq!(statuses(&d.snapshot(2, "A")), [CommandStatus::Finished; 2]);
    }

    #[test]
    fn superseded_execution_is_cancelled() {
        let d = doc(2);
        let ids = define(&d, 1, &["slow 5000"]);
        d.update(0, 1, &[insert("A", None, &ids)]).unwrap();
        d.execute(1).unwrap();
        std::thread::sleep(Duration::from_millis(30));
        let start = Instant::now();
        let edit = Edit::Edits {
            node: "A".into(),
            splices: vec![Splice { after: None, inserted: vec![], removed: ids.clone() }],
        };
        run(&d, 1, 2, &[edit]);
        std::thread::sleep(Duration::from_millis(30));
        assert_eq!(d.snapshot(1, "A")[0].status, CommandStatus::Cancelled);
        assert!(start.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn forked_proofs_run_in_parallel() {
        let d = doc(4);
        let sources: Vec<String> = (0..8).map(|i| format!("thm t{i} : {i} = {i} by slow 200")).collect();
        let refs: Vec<&str> = sources.iter().map(String::as_str).collect();
        let ids = define(&d, 1, &refs);
        let start = Instant::now();
        run(&d, 0, 1, &[insert("A", None, &ids)]);
        let elapsed = start.elapsed();
        assert!(elapsed < Duration::from_millis(700), "{elapsed:?}");
        assert_eq!(d.stats().proofs_forked, 8);
        assert!(d.snapshot(1, "A").iter().all(|c| c.status == CommandStatus::Finished));
    }

    #[test]
    fn forked_read_runs_without_use() {
        let lazy = doc(2);
        lazy.define_command(1, "def", "def x = 1").unwrap();
        std::thread::sleep(Duration::from_millis(50));
        assert!(!lazy.command(1).unwrap().is_read());
        let eager = doc(2);
        eager.set_forked_read(true);
        eager.define_command(1, "def", "def x = 1").unwrap();
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while !eager.command(1).unwrap().is_read() {
            assert!(std::time::Instant::now() < deadline);
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    #[test]
    fn remove_versions_collects_commands() {
        let d = doc(2);
        for (v, i) in (0..10u64).enumerate() {
            let v = v as VersionId;
            define(&d, 100 + i, &["def x = 1"]);
            let splice = Splice {
                after: None,
                inserted: vec![100 + i],
                removed: if i == 0 { vec![] } else { vec![100 + i - 1] },
            };
            d.update(v, v + 1, &[Edit::Edits { node: "A".into(), splices: vec![splice] }]).unwrap();
        }
        assert_eq!(d.command_count(), 10);
        assert_eq!(d.remove_versions(&[10]), Err(DocumentError::RemoveLatest(10)));
        let old: Vec<VersionId> = (0..10).collect();
        d.remove_versions(&old).unwrap();
        assert_eq!(d.versions(), vec![10]);
        assert_eq!(d.command_count(), 1);
        assert!(d.snapshot(5, "A").is_empty());
        assert!(d.update(5, 11, &[]).is_err());
        assert!(d.update(10, 11, &[]).is_ok());
    }

    #[test]
    fn errors_at_one_position_order_by_serial() {
        let mut msgs = [Message::writeln("b").at(3), Message::writeln("a").at(3), Message::writeln("c").at(1)];
        msgs.sort_by_key(Message::order_key);
        assert_eq!(msgs.iter().map(|m| m.text.as_str()).collect::<Vec<_>>(), ["c", "b", "a"]);
    }

    #[test]
    fn keyword_extension_through_document() {
        let d = doc(2);
        let spans = toy::parse_theory("theory A begin keyword note note hi end");
        let ids: Vec<CommandId> = spans
            .iter()
            .enumerate()
            .map(|(i, s)| {
                d.define_command(i as CommandId + 1, &s.name, &s.source).unwrap();
                i as CommandId + 1
            })
            .collect();
        run(&d, 0, 1, &[insert("A", None, &ids), all_visible("A", &ids)]);
        let snap = d.snapshot(1, "A");
        assert!(snap.iter().all(|c| c.status == CommandStatus::Finished), "{snap:?}");
        assert_eq!(snap[2].messages[0].text, "note hi");
    }

    #[test]
    fn edit_order_equivalence() {
        let srcs = ["def a = 1", "def b = a + 1", "thm t : b = 2", "print b"];
        let one = doc(2);
        let ids = define(&one, 1, &srcs);
        run(&one, 0, 1, &[insert("A", None, &ids), all_visible("A", &ids)]);
        let split = doc(2);
        define(&split, 1, &srcs);
        run(&split, 0, 1, &[insert("A", None, &ids[..2])]);
        run(&split, 1, 2, &[insert("A", Some(ids[1]), &ids[2..]), all_visible("A", &ids)]);
        let texts = |s: Vec<CommandSnapshot>| {
            s.into_iter()
                .map(|c| (c.status, c.state_digest, c.messages.into_iter().map(|m| m.text).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(texts(one.snapshot(1, "A")), texts(split.snapshot(2, "A")));
    }
}
