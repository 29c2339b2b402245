//! Managed evaluation.
//!
//! Results are reified as [`Outcome`]; program errors carry a global serial
//! number so that concurrent failures can be ordered. Interrupts are
//! environmental events and never carry a value.
//!
//! The cell types differ in who triggers evaluation and in how interrupts
//! are remembered:
//!
//! | cell      | started by            | interrupt                      |
//! |-----------|-----------------------|--------------------------------|
//! | [`Future`]  | scheduler (eventually) | cell becomes cancelled for good |
//! | [`Promise`] | external fulfill       | cell becomes cancelled for good |
//! | [`Lazy`]    | explicit force         | cell resets to unevaluated      |
//! | [`Memo`]    | explicit eval          | stored until [`Memo::restart`]  |

mod cells;
mod external;
mod group;
mod par;
mod remote;
mod scheduler;

use std::any::Any;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

pub use cells::{Lazy, Memo, MemoState};
pub use external::external_eval;
pub use group::{
    checkpoint, current_group, interruptible_sleep, uninterruptible, with_group, GroupId, TaskGroup,
};
pub use par::{parallel_exists, parallel_map};
pub use remote::{RemoteRegistry, DEFAULT_REMOTE_TIMEOUT};
pub use scheduler::{Dependency, Future, FutureState, Promise, Scheduler, SchedulerConfig};

static SERIAL: AtomicU64 = AtomicU64::new(1);

/// Allocates the next global serial number.
pub fn next_serial() -> u64 {
    SERIAL.fetch_add(1, Ordering::SeqCst)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Error)]
#[error("{message}")]
pub struct ProgramError {
    pub message: String,
    pub serial: u64,
}

impl ProgramError {
    pub fn new(message: impl Into<String>) -> Self {
        ProgramError {
            message: message.into(),
            serial: next_serial(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Error)]
pub enum Failure {
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("interrupt")]
    Interrupt,
}

impl Failure {
    /// A fresh program error.
    pub fn error(message: impl Into<String>) -> Self {
        Failure::Program(ProgramError::new(message))
    }

    pub fn is_interrupt(&self) -> bool {
        matches!(self, Failure::Interrupt)
    }

    pub fn program(&self) -> Option<&ProgramError> {
        match self {
            Failure::Program(e) => Some(e),
            Failure::Interrupt => None,
        }
    }
}

/// Evaluation result with the failure side made explicit.
pub type Res<T> = Result<T, Failure>;

/// A reified evaluation result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome<T> {
    Res(T),
    Exn(Failure),
}

impl<T> Outcome<T> {
    pub fn is_res(&self) -> bool {
        matches!(self, Outcome::Res(_))
    }
}

impl<T: fmt::Display> fmt::Display for Outcome<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Res(v) => write!(f, "Res {v}"),
            Outcome::Exn(e) => write!(f, "Exn {e}"),
        }
    }
}

/// Runs `f(x)` and reifies its result. Panics are turned into program
/// errors; interrupts stay interrupts.
pub fn capture<A, T>(f: impl FnOnce(A) -> Res<T>, x: A) -> Outcome<T> {
    match catch(|| f(x)) {
        Ok(v) => Outcome::Res(v),
        Err(e) => Outcome::Exn(e),
    }
}

/// Re-raises a reified result.
pub fn release<T>(r: Outcome<T>) -> Res<T> {
    match r {
        Outcome::Res(v) => Ok(v),
        Outcome::Exn(e) => Err(e),
    }
}

/// Runs `f`, converting a panic into a program error.
pub(crate) fn catch<T>(f: impl FnOnce() -> Res<T>) -> Res<T> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(payload) => Err(Failure::error(panic_message(payload.as_ref()))),
    }
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Calls a front-end function registered with `registry`.
pub fn remote_eval(registry: &RemoteRegistry, function: &str, argument: &str) -> Res<String> {
    registry.call(function, argument)
}

/// The first program error by serial order, if any.
pub fn first_error<'a>(errors: impl IntoIterator<Item = &'a ProgramError>) -> Option<&'a ProgramError> {
    errors.into_iter().min_by_key(|e| e.serial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn capture_identity() {
        assert_eq!(capture(|x: i32| Ok(x), 5), Outcome::Res(5));
    }

    #[test]
    fn capture_failures_get_fresh_serials() {
        let a = capture(|_: ()| Err::<(), _>(Failure::error("boom")), ());
        let b = capture(|_: ()| Err::<(), _>(Failure::error("boom")), ());
        let (Outcome::Exn(Failure::Program(a)), Outcome::Exn(Failure::Program(b))) = (a, b) else {
            panic!("expected program errors");
        };
        assert_eq!(a.message, "boom");
        assert!(a.serial < b.serial);
    }

    #[test]
    fn capture_turns_panics_into_errors() {
        let r = capture(|_: ()| -> Res<()> { panic!("kaput") }, ());
        match r {
            Outcome::Exn(Failure::Program(e)) => assert_eq!(e.message, "kaput"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interrupts_are_never_absorbed() {
        let r = capture(|_: ()| Err::<i32, _>(Failure::Interrupt), ());
        assert_eq!(r, Outcome::Exn(Failure::Interrupt));
        assert_eq!(release(r), Err(Failure::Interrupt));
    }

    proptest! {
        #[test]
        fn release_capture_is_application(x in -1000i64..1000, threshold in -1000i64..1000) {
            let f = |x: i64| if x < threshold { Ok(x * 2) } else { Err(Failure::error(format!("bad {x}"))) };
            match (release(capture(f, x)), f(x)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(Failure::Program(a)), Err(Failure::Program(b))) => {
                    prop_assert_eq!(a.message, b.message)
                }
                other => prop_assert!(false, "mismatch {:?}", other),
            }
        }
    }
}
