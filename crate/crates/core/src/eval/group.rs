//! Hierarchic task groups and the per-thread interrupt context.

use super::{Failure, Res};
use parking_lot::Mutex;
use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

/// Granularity of cooperative interrupt polling.
pub(crate) const POLL: Duration = Duration::from_millis(5);

static GROUP_IDS: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub u64);

/// Something that must react when its group is cancelled, like a pending
/// future that should stop waiting for a worker.
pub(crate) trait Cancellable: Send + Sync {
    fn group_cancelled(&self);
}

struct GroupInner {
    id: GroupId,
    parent: Option<TaskGroup>,
    cancelled: AtomicBool,
    members: Mutex<Members>,
}

#[derive(Default)]
struct Members {
    cells: Vec<Weak<dyn Cancellable>>,
    children: Vec<Weak<GroupInner>>,
    high_water: usize,
}

impl Members {
    fn prune(&mut self) {
        if self.cells.len() + self.children.len() > self.high_water.max(64) {
            self.cells.retain(|w| w.strong_count() > 0);
            self.children.retain(|w| w.strong_count() > 0);
            self.high_water = 2 * (self.cells.len() + self.children.len());
        }
    }
}

/// A node in the task group tree. Cancellation is monotone and applies to
/// the whole subtree, including groups created after the fact.
#[derive(Clone)]
pub struct TaskGroup(Arc<GroupInner>);

impl TaskGroup {
    pub fn new_root() -> Self {
        Self::create(None)
    }

    pub fn new_child(&self) -> Self {
        let child = Self::create(Some(self.clone()));
        let mut members = self.0.members.lock();
        members.prune();
        members.children.push(Arc::downgrade(&child.0));
        child
    }

    fn create(parent: Option<TaskGroup>) -> Self {
        TaskGroup(Arc::new(GroupInner {
            id: GroupId(GROUP_IDS.fetch_add(1, Ordering::Relaxed)),
            parent,
            cancelled: AtomicBool::new(false),
            members: Mutex::new(Members::default()),
        }))
    }

    pub fn id(&self) -> GroupId {
        self.0.id
    }

    pub fn parent(&self) -> Option<&TaskGroup> {
        self.0.parent.as_ref()
    }

    pub fn is_cancelled(&self) -> bool {
        let mut g = Some(self);
        while let Some(group) = g {
            if group.0.cancelled.load(Ordering::Acquire) {
                return true;
            }
            g = group.0.parent.as_ref();
        }
        false
    }

    /// Marks this group and all its descendants cancelled. Pending members
    /// are cancelled at once; running members observe the interrupt at
    /// their next checkpoint. Idempotent.
    pub fn cancel(&self) {
        if self.0.cancelled.swap(true, Ordering::AcqRel) {
            return;
        }
        self.notify_subtree();
    }

    fn notify_subtree(&self) {
        let (cells, children) = {
            let m = self.0.members.lock();
            (m.cells.clone(), m.children.clone())
        };
        for cell in cells.iter().filter_map(Weak::upgrade) {
            cell.group_cancelled();
        }
        for child in children.iter().filter_map(Weak::upgrade) {
            child.cancelled.store(true, Ordering::Release);
            TaskGroup(child).notify_subtree();
        }
    }

    pub(crate) fn register(&self, cell: Weak<dyn Cancellable>) {
        let mut m = self.0.members.lock();
        m.prune();
        m.cells.push(cell);
    }

    pub fn is_ancestor_of(&self, other: &TaskGroup) -> bool {
        let mut g = Some(other);
        while let Some(group) = g {
            if Arc::ptr_eq(&group.0, &self.0) {
                return true;
            }
            g = group.0.parent.as_ref();
        }
        false
    }
}

impl PartialEq for TaskGroup {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl Eq for TaskGroup {}

impl fmt::Debug for TaskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskGroup")
            .field("id", &self.0.id.0)
            .field("cancelled", &self.is_cancelled())
            .finish()
    }
}

thread_local! {
    // `None` entries mark uninterruptible regions.
    static CONTEXT: RefCell<Vec<Option<TaskGroup>>> = const { RefCell::new(Vec::new()) };
}

struct ContextGuard;

impl Drop for ContextGuard {
    fn drop(&mut self) {
        CONTEXT.with(|c| {
            c.borrow_mut().pop();
        });
    }
}

fn enter<R>(entry: Option<TaskGroup>, f: impl FnOnce() -> R) -> R {
    CONTEXT.with(|c| c.borrow_mut().push(entry));
    let _guard = ContextGuard;
    f()
}

/// Runs `f` with `group` as the interrupt context of the current thread.
pub fn with_group<R>(group: &TaskGroup, f: impl FnOnce() -> R) -> R {
    enter(Some(group.clone()), f)
}

/// Runs `f` in a context where no interrupt can be observed.
pub fn uninterruptible<R>(f: impl FnOnce() -> R) -> R {
    enter(None, f)
}

/// The group of the innermost managed evaluation on this thread.
pub fn current_group() -> Option<TaskGroup> {
    CONTEXT.with(|c| c.borrow().last().cloned().flatten())
}

/// Cooperative interrupt check.
pub fn checkpoint() -> Res<()> {
    match current_group() {
        Some(g) if g.is_cancelled() => Err(Failure::Interrupt),
        _ => Ok(()),
    }
}

/// Sleeps for `duration` unless interrupted first.
pub fn interruptible_sleep(duration: Duration) -> Res<()> {
    let deadline = Instant::now() + duration;
    loop {
        checkpoint()?;
        let now = Instant::now();
        if now >= deadline {
            return Ok(());
        }
        std::thread::sleep((deadline - now).min(POLL));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cancellation_propagates_down_only() {
        let root = TaskGroup::new_root();
        let child = root.new_child();
        let grandchild = child.new_child();
        child.cancel();
        assert!(!root.is_cancelled());
        assert!(child.is_cancelled());
        assert!(grandchild.is_cancelled());
        assert!(child.new_child().is_cancelled());
        child.cancel();
        assert!(child.is_cancelled());
    }

    #[test]
    fn checkpoints_follow_context() {
        let g = TaskGroup::new_root();
        g.cancel();
        assert!(checkpoint().is_ok());
        with_group(&g, || {
            assert_eq!(checkpoint(), Err(Failure::Interrupt));
            uninterruptible(|| assert!(checkpoint().is_ok()));
            assert!(interruptible_sleep(Duration::from_secs(5)).is_err());
        });
        assert!(checkpoint().is_ok());
    }

    #[test]
    fn sleep_is_interrupted_promptly() {
        let g = TaskGroup::new_root();
        let g2 = g.clone();
        let start = Instant::now();
        let h = std::thread::spawn(move || with_group(&g2, || interruptible_sleep(Duration::from_secs(10))));
        std::thread::sleep(Duration::from_millis(30));
        g.cancel();
        assert_eq!(h.join().unwrap(), Err(Failure::Interrupt));
        assert!(start.elapsed() < Duration::from_millis(130));
    }
}
