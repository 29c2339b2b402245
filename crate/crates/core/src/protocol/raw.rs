//! Capture of spurious output on the process's raw stdout and stderr.

use std::fs::File;
use std::io::{self, Read, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::thread::JoinHandle;

/// Active redirection of file descriptors 1 and 2 into a pipe. Dropping it
/// restores the original descriptors and waits for the reader to drain.
pub struct RawCapture {
    saved: Vec<(RawFd, OwnedFd)>,
    reader: Option<JoinHandle<()>>,
}

fn check(r: libc::c_int) -> io::Result<libc::c_int> {
    if r < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(r)
    }
}

/// Redirects raw stdout and stderr; everything written to them is handed
/// to `sink` in arbitrary slices.
pub fn capture_raw_output(mut sink: impl FnMut(Vec<u8>) + Send + 'static) -> io::Result<RawCapture> {
    let mut fds = [0; 2];
    // SAFETY: `fds` is a valid two-element array.
    check(unsafe { libc::pipe(fds.as_mut_ptr()) })?;
    // SAFETY: both descriptors were just created and are owned here.
    let (read_end, write_end) = unsafe { (File::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1])) };
    let _ = io::stdout().flush();
    let mut saved = Vec::new();
    for target in [1, 2] {
        // SAFETY: duplicating and replacing standard descriptors of this
        // process; the originals are kept in `saved`.
        unsafe {
            let copy = check(libc::dup(target))?;
            saved.push((target, OwnedFd::from_raw_fd(copy)));
            check(libc::dup2(write_end.as_raw_fd(), target))?;
        }
    }
    drop(write_end);
    let reader = std::thread::spawn(move || {
        let mut read_end = read_end;
        let mut buf = [0u8; 8192];
        loop {
            match read_end.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => sink(buf[..n].to_vec()),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => break,
            }
        }
    });
    Ok(RawCapture {
        saved,
        reader: Some(reader),
    })
}

impl Drop for RawCapture {
    fn drop(&mut self) {
        let _ = io::stdout().flush();
        let _ = io::stderr().flush();
        for (target, original) in self.saved.drain(..) {
            // SAFETY: restores a descriptor saved by `capture_raw_output`.
            unsafe {
                libc::dup2(original.as_raw_fd(), target);
            }
        }
        if let Some(reader) = self.reader.take() {
            let _ = reader.join();
        }
    }
}
