#![allow(dead_code)]

pub mod e2e;
pub mod gradients;
pub mod mini;

use std::io::Write;
use std::sync::{Mutex, MutexGuard};

/// Prints one result line per criterion and fails the test when `ok` is false.
/// Written straight to stderr so the line shows even when output is captured.
pub fn report(criterion: &str, ok: bool, detail: &str) {
    let line = format!("[{}] {criterion}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(ok, "{criterion} failed: {detail}");
}

/// Runs criteria one at a time so their runtimes are measured alone.
pub fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
