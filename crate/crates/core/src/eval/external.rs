//! Evaluation of external processes with interrupts in both directions:
//! an interrupt of the calling task terminates the child, and a timeout
//! takes the same path.

use super::group::{checkpoint, POLL};
use super::{Failure, Res};
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

const GRACE: Duration = Duration::from_millis(200);

/// Runs `command_line` through `sh -c` with `input` on stdin and returns
/// its stdout. A nonzero exit is a program error; cancellation or timeout
/// terminates the child's process group and yields an interrupt.
pub fn external_eval(command_line: &str, input: &str, timeout: Option<Duration>) -> Res<String> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command_line)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| Failure::error(format!("cannot run {command_line:?}: {e}")))?;

    let mut stdin = child.stdin.take();
    let input = input.as_bytes().to_vec();
    let writer = std::thread::spawn(move || {
        if let Some(stdin) = stdin.as_mut() {
            let _ = stdin.write_all(&input);
        }
    });
    let stdout = reader(child.stdout.take());
    let stderr = reader(child.stderr.take());

    let deadline = timeout.map(|t| Instant::now() + t);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {}
            Err(e) => return Err(Failure::error(format!("wait failed: {e}"))),
        }
        let timed_out = deadline.is_some_and(|d| Instant::now() >= d);
        if timed_out || checkpoint().is_err() {
            terminate(&mut child);
            return Err(Failure::Interrupt);
        }
        std::thread::sleep(POLL);
    };
    let _ = writer.join();
    let out = stdout.join().unwrap_or_default();
    let err = stderr.join().unwrap_or_default();
    if status.success() {
        Ok(String::from_utf8_lossy(&out).into_owned())
    } else {
        let code = status
            .code()
            .map_or_else(|| "signal".to_string(), |c| c.to_string());
        let err = String::from_utf8_lossy(&err);
        Err(Failure::error(
            format!("exit code {code}: {}", err.trim_end()).trim_end_matches(": ").to_string(),
        ))
    }
}

fn reader<R: Read + Send + 'static>(src: Option<R>) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut src) = src {
            let _ = src.read_to_end(&mut buf);
        }
        buf
    })
}

/// SIGTERM to the child's process group, then SIGKILL after a grace period.
fn terminate(child: &mut Child) {
    let pgid = child.id() as libc::pid_t;
    // SAFETY: signalling a process group we created; no memory is shared.
    unsafe {
        libc::kill(-pgid, libc::SIGTERM);
    }
    let deadline = Instant::now() + GRACE;
    while Instant::now() < deadline {
        if let Ok(Some(_)) = child.try_wait() {
            return;
        }
        std::thread::sleep(POLL);
    }
    // SAFETY: as above.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
    let _ = child.wait();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{with_group, TaskGroup};

    fn alive(pid: i32) -> bool {
        // SAFETY: signal 0 only probes for existence.
        unsafe { libc::kill(pid, 0) == 0 }
    }

    #[test]
    fn echo() {
        assert_eq!(external_eval("echo hi", "", None), Ok("hi\n".to_string()));
    }

    #[test]
    fn stdin_is_passed() {
        assert_eq!(external_eval("tr a-z A-Z", "abc", None), Ok("ABC".to_string()));
    }

    #[test]
    fn false_is_exit_code_one() {
        match external_eval("false", "", None) {
            Err(Failure::Program(e)) => assert!(e.message.contains("exit code 1"), "{}", e.message),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn timeout_kills_child() {
        let start = Instant::now();
        let r = external_eval("echo $$ > /dev/stderr; exec sleep 10", "", Some(Duration::from_millis(100)));
        assert_eq!(r, Err(Failure::Interrupt));
        assert!(start.elapsed() < Duration::from_millis(500));
    }

    #[test]
    fn cancellation_kills_child() {
        let g = TaskGroup::new_root();
        let g2 = g.clone();
        let pid_file = std::env::temp_dir().join(format!("docserve-ext-{}", std::process::id()));
        let cmd = format!("echo $$ > {}; exec sleep 10", pid_file.display());
        let h = std::thread::spawn(move || with_group(&g2, || external_eval(&cmd, "", None)));
        let mut pid = None;
        for _ in 0..200 {
            if let Some(p) = std::fs::read_to_string(&pid_file).ok().and_then(|s| s.trim().parse().ok()) {
                pid = Some(p);
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        let pid: i32 = pid.expect("child wrote its pid");
        assert!(alive(pid));
        let start = Instant::now();
        g.cancel();
        assert_eq!(h.join().unwrap(), Err(Failure::Interrupt));
        assert!(start.elapsed() < Duration::from_millis(500));
        assert!(!alive(pid));
        let _ = std::fs::remove_file(pid_file);
    }
}
