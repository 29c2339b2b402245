//! Remote evaluation: a worker hands a `String => String` call to the
//! front-end and suspends until the reply arrives.

use super::{Failure, Promise, Res, TaskGroup};
use parking_lot::Mutex;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(10);

type Outbox = Box<dyn Fn(u64, &str, &str) + Send + Sync>;

/// Engine-side registry of front-end functions and calls in flight.
pub struct RemoteRegistry {
    functions: Mutex<HashSet<String>>,
    pending: Mutex<HashMap<u64, Promise<Result<String, String>>>>,
    ids: AtomicU64,
    group: TaskGroup,
    timeout: Duration,
    outbox: Outbox,
}

impl RemoteRegistry {
    /// `outbox(call_id, function, argument)` delivers a call to the
    /// front-end.
    pub fn new(timeout: Duration, outbox: impl Fn(u64, &str, &str) + Send + Sync + 'static) -> Self {
        RemoteRegistry {
            functions: Mutex::new(HashSet::new()),
            pending: Mutex::new(HashMap::new()),
            ids: AtomicU64::new(1),
            group: TaskGroup::new_root(),
            timeout,
            outbox: Box::new(outbox),
        }
    }

    pub fn register(&self, function: &str) {
        self.functions.lock().insert(function.to_string());
    }

    pub fn is_registered(&self, function: &str) -> bool {
        self.functions.lock().contains(function)
    }

    /// Calls a registered front-end function and waits for its reply.
    pub fn call(&self, function: &str, argument: &str) -> Res<String> {
        if self.group.is_cancelled() {
            return Err(Failure::Interrupt);
        }
        if !self.is_registered(function) {
            return Err(Failure::error(format!("unknown remote function {function:?}")));
        }
        let id = self.ids.fetch_add(1, Ordering::Relaxed);
        let promise = Promise::new(&self.group);
        self.pending.lock().insert(id, promise.clone());
        (self.outbox)(id, function, argument);
        let outcome = promise.future().join_timeout(self.timeout);
        self.pending.lock().remove(&id);
        match outcome {
            Some(Ok(Ok(result))) => Ok(result),
            Some(Ok(Err(message))) => Err(Failure::error(message)),
            Some(Err(e)) => Err(e),
            None => Err(Failure::error(format!(
                "remote function {function:?} timed out after {:?}",
                self.timeout
            ))),
        }
    }

    /// Delivers a front-end reply. Unknown or stale ids are ignored.
    pub fn reply(&self, id: u64, result: Result<String, String>) -> bool {
        let promise = self.pending.lock().get(&id).cloned();
        promise.is_some_and(|p| p.fulfill(result).is_ok())
    }

    /// Session closed: every pending and future call is interrupted.
    pub fn close(&self) {
        self.group.cancel();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;
    use std::sync::Arc;

    /// Registry wired to a fake front-end thread that applies `f`.
    fn front_end(f: fn(&str) -> String) -> Arc<RemoteRegistry> {
        let (tx, rx) = mpsc::channel::<(u64, String)>();
        let tx = Mutex::new(tx);
        let reg = Arc::new(RemoteRegistry::new(Duration::from_secs(2), move |id, _, arg| {
            let _ = tx.lock().send((id, arg.to_string()));
        }));
        let r2 = Arc::downgrade(&reg);
        std::thread::spawn(move || {
            for (id, arg) in rx {
                if let Some(reg) = r2.upgrade() {
                    reg.reply(id, Ok(f(&arg)));
                }
            }
        });
        reg
    }

    #[test]
    fn identity_and_uppercase() {
        let reg = front_end(|s| s.to_string());
        reg.register("id");
        assert_eq!(reg.call("id", "x"), Ok("x".to_string()));
        let reg = front_end(|s| s.to_uppercase());
        reg.register("upper");
        assert_eq!(reg.call("upper", "abc"), Ok("ABC".to_string()));
    }

    #[test]
    fn unknown_function_is_program_error() {
        let reg = front_end(|s| s.to_string());
        match reg.call("nope", "x") {
            Err(Failure::Program(e)) => assert!(e.message.contains("nope")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn closing_interrupts_pending_calls() {
        let reg = Arc::new(RemoteRegistry::new(Duration::from_secs(5), |_, _, _| {}));
        reg.register("silent");
        let r2 = reg.clone();
        let h = std::thread::spawn(move || r2.call("silent", "x"));
        std::thread::sleep(Duration::from_millis(30));
        reg.close();
        assert_eq!(h.join().unwrap(), Err(Failure::Interrupt));
        assert_eq!(reg.call("silent", "y"), Err(Failure::Interrupt));
    }

    #[test]
    fn timeout_is_program_error() {
        let reg = RemoteRegistry::new(Duration::from_millis(30), |_, _, _| {});
        reg.register("silent");
        assert!(matches!(reg.call("silent", "x"), Err(Failure::Program(_))));
    }
}
