//! Lazy and memo cells: synchronized, evaluated at most once by whoever
//! asks first. They differ only in what an interrupt leaves behind.

use super::group::{checkpoint, POLL};
use super::{catch, Failure, ProgramError, Res};
use parking_lot::{Condvar, Mutex};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

type Expr<T> = Box<dyn Fn() -> Res<T> + Send + Sync>;

enum LazySlot<T> {
    Unevaluated,
    Running,
    Done(Result<T, ProgramError>),
}

struct LazyInner<T> {
    expr: Expr<T>,
    slot: Mutex<(LazySlot<T>, u64)>,
    cond: Condvar,
    runs: AtomicUsize,
}

/// Memoizes values and program errors, but not interrupts: an interrupt
/// while forcing resets the cell, and every thread waiting on that attempt
/// sees the interrupt too.
pub struct Lazy<T> {
    inner: Arc<LazyInner<T>>,
}

impl<T> Clone for Lazy<T> {
    fn clone(&self) -> Self {
        Lazy {
            inner: self.inner.clone(),
        }
    }
}

impl<T: Clone> Lazy<T> {
    pub fn new(expr: impl Fn() -> Res<T> + Send + Sync + 'static) -> Self {
        Lazy {
            inner: Arc::new(LazyInner {
                expr: Box::new(expr),
                slot: Mutex::new((LazySlot::Unevaluated, 0)),
                cond: Condvar::new(),
                runs: AtomicUsize::new(0),
            }),
        }
    }

    pub fn value(value: T) -> Self
    where
        T: Send + Sync + 'static,
    {
        let lazy = Lazy::new(|| Err(Failure::error("unreachable lazy expression")));
        lazy.inner.slot.lock().0 = LazySlot::Done(Ok(value));
        lazy
    }

    pub fn force(&self) -> Res<T> {
        let mut guard = self.inner.slot.lock();
        loop {
            match &guard.0 {
                LazySlot::Done(r) => return r.clone().map_err(Failure::Program),
                LazySlot::Running => {
                    let epoch = guard.1;
                    self.inner.cond.wait_for(&mut guard, POLL);
                    if guard.1 != epoch {
                        return Err(Failure::Interrupt);
                    }
                    checkpoint()?;
                }
                LazySlot::Unevaluated => {
                    guard.0 = LazySlot::Running;
                    drop(guard);
                    self.inner.runs.fetch_add(1, Ordering::SeqCst);
                    let result = catch(&self.inner.expr);
                    guard = self.inner.slot.lock();
                    let out = match result {
                        Err(Failure::Interrupt) => {
                            guard.0 = LazySlot::Unevaluated;
                            guard.1 += 1;
                            Err(Failure::Interrupt)
                        }
                        Ok(v) => {
                            guard.0 = LazySlot::Done(Ok(v.clone()));
                            Ok(v)
                        }
                        Err(Failure::Program(e)) => {
                            guard.0 = LazySlot::Done(Err(e.clone()));
                            Err(Failure::Program(e))
                        }
                    };
                    drop(guard);
                    self.inner.cond.notify_all();
                    return out;
                }
            }
        }
    }

    pub fn is_evaluated(&self) -> bool {
        matches!(self.inner.slot.lock().0, LazySlot::Done(_))
    }

    pub fn is_running(&self) -> bool {
        matches!(self.inner.slot.lock().0, LazySlot::Running)
    }

    pub fn peek(&self) -> Option<Res<T>> {
        match &self.inner.slot.lock().0 {
            LazySlot::Done(r) => Some(r.clone().map_err(Failure::Program)),
            _ => None,
        }
    }

    /// Number of times the expression has been started.
    pub fn runs(&self) -> usize {
        self.inner.runs.load(Ordering::SeqCst)
    }
}

impl<T> fmt::Debug for Lazy<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state = match self.inner.slot.lock().0 {
            LazySlot::Unevaluated => "unevaluated",
            LazySlot::Running => "running",
            LazySlot::Done(Ok(_)) => "value",
            LazySlot::Done(Err(_)) => "error",
        };
        f.debug_struct("Lazy").field("state", &state).finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemoState {
    Unevaluated,
    Running,
    Value,
    Error,
    Interrupt,
}

enum MemoSlot<T> {
    Unevaluated,
    Running,
    Done(Res<T>),
}

struct MemoInner<T> {
    expr: Expr<T>,
    slot: Mutex<MemoSlot<T>>,
    cond: Condvar,
    runs: AtomicUsize,
}

/// Single-assignment cell that memoizes interrupts as well. An interrupted
/// cell stays interrupted until [`restart`](Memo::restart).
pub struct Memo<T> {
    inner: Arc<MemoInner<T>>,
}

impl<T> Clone for Memo<T> {
    fn clone(&self) -> Self {
        Memo {
            inner: self.inner.clone(),
        }
    }
}

impl<T: Clone> Memo<T> {
    pub fn new(expr: impl Fn() -> Res<T> + Send + Sync + 'static) -> Self {
        Memo {
            inner: Arc::new(MemoInner {
                expr: Box::new(expr),
                slot: Mutex::new(MemoSlot::Unevaluated),
                cond: Condvar::new(),
                runs: AtomicUsize::new(0),
            }),
        }
    }

    pub fn eval(&self) -> Res<T> {
        let mut guard = self.inner.slot.lock();
        loop {
            match &*guard {
                MemoSlot::Done(r) => return r.clone(),
                MemoSlot::Running => {
                    self.inner.cond.wait_for(&mut guard, POLL);
                    if !matches!(*guard, MemoSlot::Running) {
                        continue;
                    }
                    checkpoint()?;
                }
                MemoSlot::Unevaluated => {
                    *guard = MemoSlot::Running;
                    drop(guard);
                    self.inner.runs.fetch_add(1, Ordering::SeqCst);
                    let result = catch(&self.inner.expr);
                    *self.inner.slot.lock() = MemoSlot::Done(result.clone());
                    self.inner.cond.notify_all();
                    return result;
                }
            }
        }
    }

    pub fn state(&self) -> MemoState {
        match &*self.inner.slot.lock() {
            MemoSlot::Unevaluated => MemoState::Unevaluated,
            MemoSlot::Running => MemoState::Running,
            MemoSlot::Done(Ok(_)) => MemoState::Value,
            MemoSlot::Done(Err(Failure::Program(_))) => MemoState::Error,
            MemoSlot::Done(Err(Failure::Interrupt)) => MemoState::Interrupt,
        }
    }

    pub fn has_interrupt(&self) -> bool {
        self.state() == MemoState::Interrupt
    }

    pub fn peek(&self) -> Option<Res<T>> {
        match &*self.inner.slot.lock() {
            MemoSlot::Done(r) => Some(r.clone()),
            _ => None,
        }
    }

    /// Returns an interrupted cell to the unevaluated state. Cells holding
    /// a value or program error are stable and cannot be restarted.
    pub fn restart(&self) -> Res<()> {
        let mut guard = self.inner.slot.lock();
        match &*guard {
            MemoSlot::Done(Err(Failure::Interrupt)) => {
                *guard = MemoSlot::Unevaluated;
                Ok(())
            }
            _ => Err(Failure::error("restart of memo cell without interrupt")),
        }
    }

    /// Number of times the expression has been started.
    pub fn runs(&self) -> usize {
        self.inner.runs.load(Ordering::SeqCst)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl<T: Clone> fmt::Debug for Memo<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Memo").field("state", &self.state()).finish()
    }
}
