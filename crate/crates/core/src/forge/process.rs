//! Child processes with a hard deadline and bounded output capture.

use std::collections::VecDeque;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::{Arc, Mutex, PoisonError};
use std::thread;
use std::time::{Duration, Instant};

/// Keeps the first and last halves of a stream once it exceeds the cap.
#[derive(Debug)]
pub struct CapBuffer {
    cap: usize,
    head: Vec<u8>,
    tail: VecDeque<u8>,
    total: usize,
}

impl CapBuffer {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            head: Vec::new(),
            tail: VecDeque::new(),
            total: 0,
        }
    }

    pub fn push(&mut self, mut bytes: &[u8]) {
        self.total += bytes.len();
        let head_cap = self.cap / 2;
        if self.head.len() < head_cap {
            let n = bytes.len().min(head_cap - self.head.len());
            self.head.extend_from_slice(&bytes[..n]);
            bytes = &bytes[n..];
        }
        let tail_cap = self.cap - head_cap;
        self.tail.extend(bytes);
        while self.tail.len() > tail_cap {
            self.tail.pop_front();
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn dropped(&self) -> usize {
        self.total - self.head.len() - self.tail.len()
    }

    /// Captured text with a single marker where bytes were dropped.
    pub fn render(&self) -> String {
        let mut out = self.head.clone();
        let dropped = self.dropped();
        if dropped > 0 {
            out.extend_from_slice(truncation_marker(dropped).as_bytes());
        }
        out.extend(self.tail.iter());
        String::from_utf8_lossy(&out).into_owned()
    }
}

pub fn truncation_marker(dropped: usize) -> String {
    format!("\n[... {dropped} bytes truncated ...]\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Exited(i32),
    Signaled(i32),
    /// Killed by us at the deadline.
    Deadline,
}

#[derive(Debug)]
pub struct Finished {
    pub termination: Termination,
    pub output: String,
    pub output_bytes: usize,
    pub elapsed: Duration,
}

fn drain<R: Read + Send + 'static>(mut src: R, sink: Arc<Mutex<CapBuffer>>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            match src.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => sink.lock().unwrap_or_else(PoisonError::into_inner).push(&buf[..n]),
            }
        }
    })
}

fn kill_group(child: &mut Child) {
    // the child leads its own process group; take any grandchildren with it
    let pid = child.id() as libc::pid_t;
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
    let _ = child.kill();
}

fn termination(status: ExitStatus) -> Termination {
    match (status.code(), status.signal()) {
        (Some(c), _) => Termination::Exited(c),
        (None, Some(s)) => Termination::Signaled(s),
        (None, None) => Termination::Exited(-1),
    }
}

/// Spawns `cmd` in a new process group and waits at most `deadline`.
/// `capture_stdout` merges stdout into the captured stream; otherwise stdout
/// is discarded. stderr is always captured.
pub fn run_bounded(
    mut cmd: Command,
    deadline: Duration,
    cap: usize,
    capture_stdout: bool,
) -> std::io::Result<Finished> {
    cmd.stdin(Stdio::null())
        .stdout(if capture_stdout { Stdio::piped() } else { Stdio::null() })
        .stderr(Stdio::piped())
        .process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let sink = Arc::new(Mutex::new(CapBuffer::new(cap)));
    let mut readers = vec![drain(child.stderr.take().expect("piped"), sink.clone())];
    if let Some(out) = child.stdout.take() {
        readers.push(drain(out, sink.clone()));
    }
    let term = loop {
        if let Some(status) = child.try_wait()? {
            break termination(status);
        }
        let elapsed = start.elapsed();
        if elapsed >= deadline {
            kill_group(&mut child);
            let _ = child.wait();
            break Termination::Deadline;
        }
        thread::sleep((deadline - elapsed).min(Duration::from_millis(10)));
    };
    let elapsed = start.elapsed();
    // stray grandchildren could keep the pipes open after a normal exit
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    for r in readers {
        let _ = r.join();
    }
    let buf = sink.lock().unwrap_or_else(PoisonError::into_inner);
    Ok(Finished {
        termination: term,
        output: buf.render(),
        output_bytes: buf.total(),
        elapsed,
    })
}
