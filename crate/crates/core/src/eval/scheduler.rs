//! Worker pool with priority queue, futures and promises.

use super::group::{checkpoint, with_group, Cancellable, TaskGroup, POLL};
use super::{catch, Failure, ProgramError, Res};
use parking_lot::{Condvar, Mutex};
use std::cell::Cell;
use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;

#[derive(Clone, Debug)]
pub struct SchedulerConfig {
    pub workers: usize,
    /// A program error in a future cancels the rest of its group.
    pub cancel_peers_on_failure: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            workers: std::thread::available_parallelism().map_or(2, |n| n.get()),
            cancel_peers_on_failure: true,
        }
    }
}

impl SchedulerConfig {
    pub fn with_workers(workers: usize) -> Self {
        SchedulerConfig {
            workers,
            ..Self::default()
        }
    }
}

static SCHEDULER_IDS: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static WORKER_OF: Cell<u64> = const { Cell::new(0) };
}

trait Runnable: Send + Sync {
    fn run(self: Arc<Self>);
}

struct Entry {
    priority: i32,
    seq: u64,
    task: Arc<dyn Runnable>,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Max-heap: higher priority first, then FIFO.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.priority
            .cmp(&other.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Entry>,
    seq: u64,
    shutdown: bool,
}

struct Shared {
    id: u64,
    config: SchedulerConfig,
    queue: Mutex<Queue>,
    ready: Condvar,
}

impl Shared {
    fn enqueue(&self, priority: i32, task: Arc<dyn Runnable>) {
        let mut q = self.queue.lock();
        q.seq += 1;
        let seq = q.seq;
        q.heap.push(Entry {
            priority,
            seq,
            task,
        });
        drop(q);
        self.ready.notify_one();
    }

    fn worker_loop(&self) {
        WORKER_OF.with(|w| w.set(self.id));
        loop {
            let entry = {
                let mut q = self.queue.lock();
                loop {
                    if q.shutdown {
                        return;
                    }
                    if let Some(e) = q.heap.pop() {
                        break e;
                    }
                    self.ready.wait(&mut q);
                }
            };
            entry.task.run();
        }
    }
}

struct Handle {
    shared: Arc<Shared>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Drop for Handle {
    fn drop(&mut self) {
        self.shared.queue.lock().shutdown = true;
        self.shared.ready.notify_all();
        // Workers exit on their own once their current job returns.
        self.threads.lock().clear();
    }
}

/// A fixed pool of worker threads executing futures by priority.
#[derive(Clone)]
pub struct Scheduler {
    handle: Arc<Handle>,
}

impl fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scheduler")
            .field("workers", &self.workers())
            .finish()
    }
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        let workers = config.workers.max(1);
        let shared = Arc::new(Shared {
            id: SCHEDULER_IDS.fetch_add(1, Ordering::Relaxed),
            config,
            queue: Mutex::new(Queue::default()),
            ready: Condvar::new(),
        });
        let threads = (0..workers)
            .map(|i| {
                let shared = shared.clone();
                std::thread::Builder::new()
                    .name(format!("worker-{i}"))
                    .spawn(move || shared.worker_loop())
                    .expect("spawn worker thread")
            })
            .collect();
        Scheduler {
            handle: Arc::new(Handle {
                shared,
                threads: Mutex::new(threads),
            }),
        }
    }

    pub fn with_workers(workers: usize) -> Self {
        Self::new(SchedulerConfig::with_workers(workers))
    }

    pub fn workers(&self) -> usize {
        self.handle.shared.config.workers.max(1)
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.handle.shared.config
    }

    /// Number of queue entries not yet picked up (including stale ones).
    pub fn queued(&self) -> usize {
        self.handle.shared.queue.lock().heap.len()
    }

    /// Whether the calling thread is one of this pool's workers.
    pub fn is_worker_thread(&self) -> bool {
        WORKER_OF.with(|w| w.get()) == self.handle.shared.id
    }

    pub fn fork<T, F>(&self, group: &TaskGroup, priority: i32, f: F) -> Future<T>
    where
        T: Clone + Send + 'static,
        F: FnOnce() -> Res<T> + Send + 'static,
    {
        self.fork_after(group, priority, Vec::new(), f)
    }

    /// Forks a future that is queued only once all `deps` have completed
    /// (with any outcome).
    pub fn fork_after<T, F>(
        &self,
        group: &TaskGroup,
        priority: i32,
        deps: Vec<Dependency>,
        f: F,
    ) -> Future<T>
    where
        T: Clone + Send + 'static,
        F: FnOnce() -> Res<T> + Send + 'static,
    {
        let cell = FutureCell::create(
            group,
            Some(self.handle.shared.clone()),
            priority,
            Some(Box::new(f)),
        );
        if cell.is_terminal() {
            return Future { cell };
        }
        let remaining = Arc::new(AtomicUsize::new(deps.len() + 1));
        for dep in deps {
            let cell = cell.clone();
            let remaining = remaining.clone();
            dep.0.on_complete(Box::new(move || {
                if remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
                    cell.release();
                }
            }));
        }
        if remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            cell.release();
        }
        Future { cell }
    }
}

type Job<T> = Box<dyn FnOnce() -> Res<T> + Send>;
type Listener = Box<dyn FnOnce() + Send>;

/// Observable lifecycle of a future or promise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FutureState {
    /// Waiting for dependencies (or, for a promise, for fulfillment).
    Waiting,
    /// Queued for a worker.
    Pending,
    Running,
    Finished,
    Failed,
    Cancelled,
}

enum Slot<T> {
    Waiting,
    Pending,
    Running,
    Finished(Result<T, ProgramError>),
    Cancelled,
}

impl<T> Slot<T> {
    fn is_terminal(&self) -> bool {
        matches!(self, Slot::Finished(_) | Slot::Cancelled)
    }
}

struct Inner<T> {
    slot: Slot<T>,
    job: Option<Job<T>>,
    listeners: Vec<Listener>,
    priority: i32,
}

struct FutureCell<T> {
    group: TaskGroup,
    scheduler: Option<Arc<Shared>>,
    inner: Mutex<Inner<T>>,
    cond: Condvar,
}

impl<T: Clone + Send + 'static> FutureCell<T> {
    fn create(
        group: &TaskGroup,
        scheduler: Option<Arc<Shared>>,
        priority: i32,
        job: Option<Job<T>>,
    ) -> Arc<Self> {
        let cell = Arc::new(FutureCell {
            group: group.clone(),
            scheduler,
            inner: Mutex::new(Inner {
                slot: Slot::Waiting,
                job,
                listeners: Vec::new(),
                priority,
            }),
            cond: Condvar::new(),
        });
        let weak: Weak<dyn Cancellable> = Arc::downgrade(&cell) as Weak<dyn Cancellable>;
        group.register(weak);
        if group.is_cancelled() {
            cell.finish(Slot::Cancelled);
        }
        cell
    }

    fn is_terminal(&self) -> bool {
        self.inner.lock().slot.is_terminal()
    }

    /// Dependencies satisfied: move to the queue.
    fn release(self: &Arc<Self>) {
        let mut inner = self.inner.lock();
        if !matches!(inner.slot, Slot::Waiting) {
            return;
        }
        inner.slot = Slot::Pending;
        let priority = inner.priority;
        drop(inner);
        if let Some(s) = &self.scheduler {
            s.enqueue(priority, self.clone());
        }
    }

    fn run_now(&self) {
        let job = {
            let mut inner = self.inner.lock();
            if !matches!(inner.slot, Slot::Pending) {
                return;
            }
            if self.group.is_cancelled() {
                drop(inner);
                self.finish(Slot::Cancelled);
                return;
            }
            inner.slot = Slot::Running;
            inner.job.take()
        };
        let Some(job) = job else {
            self.finish(Slot::Cancelled);
            return;
        };
        let result = with_group(&self.group, || catch(job));
        self.complete(result);
    }

    fn complete(&self, result: Res<T>) {
        let slot = match result {
            Ok(v) if !self.group.is_cancelled() => Slot::Finished(Ok(v)),
            Ok(_) | Err(Failure::Interrupt) => Slot::Cancelled,
            Err(Failure::Program(e)) => Slot::Finished(Err(e)),
        };
        let failed = matches!(slot, Slot::Finished(Err(_)));
        self.finish(slot);
        let cancel_peers = self
            .scheduler
            .as_ref()
            .is_some_and(|s| s.config.cancel_peers_on_failure);
        if failed && cancel_peers {
            self.group.cancel();
        }
    }

    fn finish(&self, slot: Slot<T>) -> bool {
        let listeners = {
            let mut inner = self.inner.lock();
            if inner.slot.is_terminal() {
                return false;
            }
            inner.slot = slot;
            inner.job = None;
            std::mem::take(&mut inner.listeners)
        };
        self.cond.notify_all();
        for l in listeners {
            l();
        }
        true
    }

    fn helpable(&self) -> bool {
        self.scheduler
            .as_ref()
            .is_some_and(|s| WORKER_OF.with(|w| w.get()) == s.id)
    }
}

impl<T: Clone + Send + 'static> Cancellable for FutureCell<T> {
    fn group_cancelled(&self) {
        let waiting = matches!(self.inner.lock().slot, Slot::Waiting | Slot::Pending);
        if waiting {
            self.finish(Slot::Cancelled);
        }
    }
}

impl<T: Clone + Send + 'static> Runnable for FutureCell<T> {
    fn run(self: Arc<Self>) {
        self.run_now();
    }
}

trait Completion: Send + Sync {
    fn on_complete(&self, listener: Listener);
}

impl<T: Clone + Send + 'static> Completion for FutureCell<T> {
    fn on_complete(&self, listener: Listener) {
        let mut inner = self.inner.lock();
        if inner.slot.is_terminal() {
            drop(inner);
            listener();
        } else {
            inner.listeners.push(listener);
        }
    }
}

/// Handle for ordering a future after other futures or promises.
#[derive(Clone)]
pub struct Dependency(Arc<dyn Completion>);

/// Value-oriented parallel evaluation: the expression runs at most once,
/// eventually, unless its group is cancelled first.
pub struct Future<T> {
    cell: Arc<FutureCell<T>>,
}

impl<T> Clone for Future<T> {
    fn clone(&self) -> Self {
        Future {
            cell: self.cell.clone(),
        }
    }
}

impl<T: Clone + Send + 'static> Future<T> {
    /// An already finished future.
    pub fn value(group: &TaskGroup, value: T) -> Self {
        let cell = FutureCell::create(group, None, 0, None);
        cell.finish(Slot::Finished(Ok(value)));
        Future { cell }
    }

    pub fn group(&self) -> &TaskGroup {
        &self.cell.group
    }

    pub fn state(&self) -> FutureState {
        match &self.cell.inner.lock().slot {
            Slot::Waiting => FutureState::Waiting,
            Slot::Pending => FutureState::Pending,
            Slot::Running => FutureState::Running,
            Slot::Finished(Ok(_)) => FutureState::Finished,
            Slot::Finished(Err(_)) => FutureState::Failed,
            Slot::Cancelled => FutureState::Cancelled,
        }
    }

    pub fn is_done(&self) -> bool {
        self.cell.is_terminal()
    }

    /// The outcome, if already available.
    pub fn peek(&self) -> Option<Res<T>> {
        match &self.cell.inner.lock().slot {
            Slot::Finished(r) => Some(r.clone().map_err(Failure::Program)),
            Slot::Cancelled => Some(Err(Failure::Interrupt)),
            _ => None,
        }
    }

    /// Waits for the outcome. A worker thread that joins a queued future
    /// runs it itself instead of blocking.
    pub fn join(&self) -> Res<T> {
        loop {
            {
                let mut inner = self.cell.inner.lock();
                match &inner.slot {
                    Slot::Finished(r) => return r.clone().map_err(Failure::Program),
                    Slot::Cancelled => return Err(Failure::Interrupt),
                    Slot::Pending if self.cell.helpable() => {
                        drop(inner);
                        self.cell.run_now();
                        continue;
                    }
                    _ => {
                        self.cell.cond.wait_for(&mut inner, POLL);
                    }
                }
            }
            checkpoint()?;
        }
    }

    /// Like [`join`](Self::join) with a deadline; `None` on timeout.
    pub fn join_timeout(&self, timeout: std::time::Duration) -> Option<Res<T>> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if let Some(r) = self.peek() {
                return Some(r);
            }
            if let Err(e) = checkpoint() {
                return Some(Err(e));
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return None;
            }
            let mut inner = self.cell.inner.lock();
            if !inner.slot.is_terminal() {
                self.cell.cond.wait_for(&mut inner, (deadline - now).min(POLL));
            }
        }
    }

    /// Moves a queued or waiting future to a higher priority. Lowering is
    /// not supported.
    pub fn raise_priority(&self, priority: i32) {
        let mut inner = self.cell.inner.lock();
        if priority <= inner.priority {
            return;
        }
        inner.priority = priority;
        let requeue = matches!(inner.slot, Slot::Pending);
        drop(inner);
        if requeue {
            if let Some(s) = &self.cell.scheduler {
                s.enqueue(priority, self.cell.clone());
            }
        }
    }

    pub fn priority(&self) -> i32 {
        self.cell.inner.lock().priority
    }

    pub fn dependency(&self) -> Dependency {
        Dependency(self.cell.clone())
    }
}

impl<T: Clone + Send + 'static> fmt::Debug for Future<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Future").field("state", &self.state()).finish()
    }
}

/// A single-assignment cell fulfilled from outside; futures may depend on
/// it like on any other future.
pub struct Promise<T> {
    future: Future<T>,
}

impl<T> Clone for Promise<T> {
    fn clone(&self) -> Self {
        Promise {
            future: self.future.clone(),
        }
    }
}

impl<T: Clone + Send + 'static> Promise<T> {
    pub fn new(group: &TaskGroup) -> Self {
        Promise {
            future: Future {
                cell: FutureCell::create(group, None, 0, None),
            },
        }
    }

    pub fn fulfill(&self, value: T) -> Res<()> {
        let cell = &self.future.cell;
        {
            let inner = cell.inner.lock();
            match inner.slot {
                Slot::Cancelled => return Err(Failure::error("promise fulfilled after cancellation")),
                Slot::Finished(_) => return Err(Failure::error("promise fulfilled twice")),
                _ => {}
            }
        }
        if cell.group.is_cancelled() {
            cell.finish(Slot::Cancelled);
            return Err(Failure::error("promise fulfilled after cancellation"));
        }
        if cell.finish(Slot::Finished(Ok(value))) {
            Ok(())
        } else {
            Err(Failure::error("promise fulfilled concurrently"))
        }
    }

    /// Fails the promise with a program error.
    pub fn fail(&self, error: ProgramError) -> Res<()> {
        if self.future.cell.finish(Slot::Finished(Err(error))) {
            Ok(())
        } else {
            Err(Failure::error("promise already completed"))
        }
    }

    pub fn future(&self) -> Future<T> {
        self.future.clone()
    }

    pub fn join(&self) -> Res<T> {
        self.future.join()
    }

    pub fn state(&self) -> FutureState {
        self.future.state()
    }

    pub fn dependency(&self) -> Dependency {
        self.future.dependency()
    }
}
