//! Headless driver over the engine and the session library.

use anyhow::{bail, Context as _, Result};
use docserve::document::CommandStatus;
use docserve::eval::{Scheduler, SchedulerConfig};
use docserve::message::MessageKind;
use docserve::protocol::{capture_raw_output, Engine, EngineConfig};
use docserve::session::{
    self, parse_trace, Clock, EditorEvent, NodeView, Session, SessionConfig, TraceAction, TraceEvent,
};
use serde::Serialize;
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// How long `wait` events and final convergence may take.
pub const CONVERGENCE_TIMEOUT: Duration = Duration::from_secs(120);

/// Connection and timing options shared by `replay` and `check`.
#[derive(Clone, Debug)]
pub struct SessionOptions {
    pub address: Option<String>,
    pub workers: usize,
    pub debounce: Duration,
    pub prune_interval: Duration,
    pub virtual_clock: bool,
    pub forked_read: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        let d = SessionConfig::default();
        SessionOptions {
            address: None,
            workers: d.workers,
            debounce: d.debounce,
            prune_interval: d.prune_interval,
            virtual_clock: false,
            forked_read: false,
        }
    }
}

impl SessionOptions {
    pub fn start(&self) -> Result<Session> {
        let config = SessionConfig {
            address: self.address.clone(),
            workers: self.workers,
            debounce: self.debounce,
            prune_interval: self.prune_interval,
            forked_read: self.forked_read,
            clock: if self.virtual_clock {
                Clock::virtual_clock()
            } else {
                Clock::real()
            },
            ..SessionConfig::default()
        };
        Ok(Session::start(config)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ServeConfig {
    pub workers: usize,
    /// Forward anything written to raw stdout/stderr to the session.
    pub capture_raw: bool,
    pub forked_read: bool,
}

/// Binds `address`, serves exactly one session, and returns when it ends.
/// `on_bound` sees the actual address before the first accept.
pub fn serve(address: &str, config: ServeConfig, on_bound: impl FnOnce(&str)) -> Result<()> {
    let listener = TcpListener::bind(address).with_context(|| format!("cannot bind {address}"))?;
    let bound = listener.local_addr()?.to_string();
    on_bound(&bound);
    let (stream, peer) = listener.accept()?;
    log::info!("session from {peer}");
    let (engine, queue) = Engine::new(
        Scheduler::new(SchedulerConfig::with_workers(config.workers)),
        EngineConfig {
            forked_read: config.forked_read,
            ..EngineConfig::default()
        },
    );
    let capture = if config.capture_raw {
        Some(capture_raw_output(engine.raw_sink())?)
    } else {
        None
    };
    let result = session::serve_stream(&engine, queue, stream);
    drop(capture);
    result?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CommandReport {
    pub index: usize,
    pub id: u64,
    pub name: String,
    pub status: String,
    pub messages: usize,
    pub warnings: usize,
    /// Hash of message kinds and texts, in order.
    pub digest: String,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeReport {
    pub name: String,
    pub commands: Vec<CommandReport>,
}

impl NodeReport {
    fn count(&self, status: CommandStatus) -> usize {
        self.commands.iter().filter(|c| c.status == status.as_str()).count()
    }

    pub fn failed(&self) -> usize {
        self.count(CommandStatus::Failed)
    }

    pub fn finished(&self) -> usize {
        self.count(CommandStatus::Finished)
    }

    pub fn warnings(&self) -> usize {
        self.commands.iter().map(|c| c.warnings).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub converged: bool,
    pub versions_created: usize,
    pub latest_version: u64,
    pub eval_runs: usize,
    pub print_activations: usize,
    pub prints_forked: usize,
    pub proofs_forked: usize,
    pub restarts: usize,
    pub interrupted: usize,
    pub engine_errors: Vec<String>,
    pub nodes: Vec<NodeReport>,
    pub wall_ms: u64,
}

fn digest(view: &docserve::session::CommandView) -> String {
    let mut h = DefaultHasher::new();
    for m in &view.messages {
        m.kind.as_str().hash(&mut h);
        m.text.hash(&mut h);
    }
    format!("{:016x}", h.finish())
}

fn node_report(name: &str, view: &NodeView) -> NodeReport {
    let commands = view
        .commands
        .iter()
        .enumerate()
        .map(|(index, c)| CommandReport {
            index,
            id: c.id,
            name: c.name.clone(),
            status: c.status.as_str().to_string(),
            messages: c.messages.len(),
            warnings: c.messages.iter().filter(|m| m.kind == MessageKind::Warning).count(),
            digest: digest(c),
            errors: c
                .messages
                .iter()
                .filter(|m| m.kind == MessageKind::Error)
                .map(|m| m.text.clone())
                .collect(),
        })
        .collect();
    NodeReport {
        name: name.to_string(),
        commands,
    }
}

impl RunReport {
    /// Collects the final state of a session.
    pub fn collect(session: &Session, converged: bool, wall: Duration) -> RunReport {
        let stats = session.engine_stats(Duration::from_secs(10)).unwrap_or_default();
        let nodes = session
            .nodes()
            .iter()
            .map(|n| node_report(n, &session.snapshot(n)))
            .collect();
        RunReport {
            converged,
            versions_created: session.versions_created(),
            latest_version: session.latest_version(),
            eval_runs: stats.stats.eval_runs,
            print_activations: stats.stats.print_activations,
            prints_forked: stats.stats.prints_forked,
            proofs_forked: stats.stats.proofs_forked,
            restarts: stats.stats.restarts,
            interrupted: stats.interrupted,
            engine_errors: session.errors(),
            nodes,
            wall_ms: wall.as_millis() as u64,
        }
    }

    pub fn failed(&self) -> usize {
        self.nodes.iter().map(NodeReport::failed).sum()
    }

    pub fn warnings(&self) -> usize {
        self.nodes.iter().map(NodeReport::warnings).sum()
    }

    /// Line-oriented `key=value` rendering. Only the `wall_ms` line depends
    /// on timing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("converged", &self.converged);
        kv("versions_created", &self.versions_created);
        kv("latest_version", &self.latest_version);
        kv("eval_runs", &self.eval_runs);
        kv("print_activations", &self.print_activations);
        kv("prints_forked", &self.prints_forked);
        kv("proofs_forked", &self.proofs_forked);
        kv("restarts", &self.restarts);
        kv("interrupted", &self.interrupted);
        kv("failed", &self.failed());
        kv("warnings", &self.warnings());
        for e in &self.engine_errors {
            kv("engine_error", &format!("{e:?}"));
        }
        for node in &self.nodes {
            let _ = writeln!(
                out,
                "node={} commands={} finished={} failed={} warnings={}",
                node.name,
                node.commands.len(),
                node.finished(),
                node.failed(),
                node.warnings()
            );
            for c in &node.commands {
                let _ = writeln!(
                    out,
                    "command={}:{} id={} name={} status={} messages={} digest={}",
                    node.name, c.index, c.id, c.name, c.status, c.messages, c.digest
                );
                for e in &c.errors {
                    let _ = writeln!(out, "error={}:{} text={:?}", node.name, c.index, e);
                }
            }
        }
        let _ = writeln!(out, "wall_ms={}", self.wall_ms);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn node_name(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("no node name for {}", path.display()))
}

/// Reads theory files into `(node, text)` pairs named after their stems.
pub fn load_theories(files: &[PathBuf]) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    for f in files {
        let text = std::fs::read_to_string(f).with_context(|| format!("cannot read {}", f.display()))?;
        let name = node_name(f)?;
        if seen.insert(name.clone(), text).is_some() {
            bail!("duplicate node {name}");
        }
    }
    Ok(seen.into_iter().collect())
}

/// Opens each theory with a view over its whole text.
fn open_theories(session: &Session, theories: &[(String, String)]) -> Result<()> {
    for (node, text) in theories {
        session.edit([
            EditorEvent::Open {
                node: node.clone(),
                text: text.clone(),
            },
            EditorEvent::Viewport {
                node: node.clone(),
                view: "file".into(),
                start: 0,
                end: text.chars().count().max(1),
            },
        ])?;
    }
    Ok(())
}

/// Replays `events` after opening `theories`, then waits for convergence.
pub fn replay(options: &SessionOptions, events: &[TraceEvent], theories: &[(String, String)]) -> Result<RunReport> {
    let started = Instant::now();
    let session = options.start()?;
    open_theories(&session, theories)?;
    let mut t = 0;
    for event in events {
        session.advance_to(event.t_ms)?;
        t = event.t_ms;
        match &event.action {
            TraceAction::Editor(e) => session.edit([e.clone()])?,
            TraceAction::Flush => {
                session.flush()?;
            }
            TraceAction::Prune => {
                session.prune()?;
            }
            TraceAction::Cancel => session.cancel_execution()?,
            TraceAction::Wait => {
                session.flush()?;
                session.wait_converged(CONVERGENCE_TIMEOUT);
            }
        }
    }
    session.advance_to(t + options.debounce.as_millis() as u64)?;
    session.flush()?;
    let converged = session.wait_converged(CONVERGENCE_TIMEOUT);
    let report = RunReport::collect(&session, converged, started.elapsed());
    session.close()?;
    Ok(report)
}

/// Reads and parses a trace file.
pub fn load_trace(path: &Path) -> Result<Vec<TraceEvent>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_trace(&text).with_context(|| format!("malformed trace {}", path.display()))
}

/// One update over all theories with full perspective, then a global join.
pub fn check(options: &SessionOptions, theories: &[(String, String)]) -> Result<RunReport> {
    let started = Instant::now();
    let session = options.start()?;
    open_theories(&session, theories)?;
    session.flush()?;
    let converged = session.wait_converged(CONVERGENCE_TIMEOUT);
    let report = RunReport::collect(&session, converged, started.elapsed());
    session.close()?;
    Ok(report)
}

/// Per-node summaries followed by every failure, as printed by `check`.
pub fn check_summary(report: &RunReport) -> String {
    let mut out = String::new();
    for node in &report.nodes {
        let _ = writeln!(
            out,
            "{}: {} commands, {} finished, {} failed, {} warnings",
            node.name,
            node.commands.len(),
            node.finished(),
            node.failed(),
            node.warnings()
        );
    }
    for node in &report.nodes {
        for c in node.commands.iter().filter(|c| c.status == "failed") {
            let _ = writeln!(out, "{}:{} {} failed: {}", node.name, c.index, c.name, c.errors.join("; "));
        }
    }
    if !report.converged {
        out.push_str("did not converge\n");
    }
    let _ = writeln!(out, "checked {} nodes in {} ms", report.nodes.len(), report.wall_ms);
    out
}

/// Writes `text` to `path`, or to stdout without one.
pub fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SessionOptions {
        SessionOptions {
            workers: 2,
            virtual_clock: true,
            ..SessionOptions::default()
        }
    }

    #[test]
    fn check_empty_is_empty() {
        let r = check(&opts(), &[]).unwrap();
        assert!(r.converged);
        assert!(r.nodes.is_empty());
        assert_eq!(r.failed(), 0);
    }

    #[test]
    fn sorry_warns_but_passes() {
        let r = check(&opts(), &[("A".into(), "thm t : 1 = 1 sorry\n".into())]).unwrap();
        assert_eq!(r.failed(), 0);
        assert!(r.warnings() >= 1);
        assert!(check_summary(&r).starts_with("A: 1 commands, 1 finished, 0 failed, 1 warnings\n"));
    }

    #[test]
    fn failure_is_listed() {
        let r = check(&opts(), &[("A".into(), "def x = 1\nfail boom\n".into())]).unwrap();
        assert_eq!(r.failed(), 1);
        assert!(check_summary(&r).contains("A:1 fail failed: boom"));
    }

    #[test]
    fn text_report_shape() {
        let r = check(&opts(), &[("A".into(), "def x = 1\n".into())]).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("converged=true\n"));
        assert!(text.contains("node=A commands=1 finished=1 failed=0 warnings=0\n"));
        assert!(text.lines().last().unwrap().starts_with("wall_ms="));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["nodes"][0]["commands"][0]["status"], "finished");
    }

    #[test]
    fn duplicate_stems_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("A.thy");
        let sub = dir.path().join("x");
        std::fs::create_dir(&sub).unwrap();
        let b = sub.join("A.thy");
        std::fs::write(&a, "").unwrap();
        std::fs::write(&b, "").unwrap();
        assert!(load_theories(&[a, b]).is_err());
    }
}
