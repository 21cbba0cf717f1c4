//! Thread-local accounting of live tensor storage.
//!
//! Every [`Tensor`](crate::tensor::Tensor) reports its payload size on
//! creation and release. An [`AllocScope`] records the highest number of
//! concurrently live bytes observed while it is open, relative to the live
//! total at the moment it was opened. Scopes nest; an inner scope's peak is
//! folded into its parent when it ends.

use std::cell::RefCell;

use crate::error::{Error, Result};

#[derive(Debug)]
struct Frame {
    id: u64,
    baseline: usize,
    peak: usize,
}

#[derive(Debug, Default)]
struct Tracker {
    live: usize,
    next_id: u64,
    frames: Vec<Frame>,
}

thread_local! {
    static TRACKER: RefCell<Tracker> = RefCell::new(Tracker::default());
}

pub(crate) fn record_alloc(bytes: usize) {
    if bytes == 0 {
        return;
    }
    TRACKER.with(|t| {
        let mut t = t.borrow_mut();
        t.live += bytes;
        let live = t.live;
        if let Some(top) = t.frames.last_mut() {
            top.peak = top.peak.max(live);
        }
    });
}

pub(crate) fn record_free(bytes: usize) {
    if bytes == 0 {
        return;
    }
    TRACKER.with(|t| {
        let mut t = t.borrow_mut();
        t.live = t.live.saturating_sub(bytes);
    });
}

/// Raises glibc's mmap and trim thresholds once per process so that the
/// many short-lived tensor buffers are recycled from the heap instead of
/// being mapped and unmapped on every allocation. No-op elsewhere.
pub fn tune_malloc() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        extern "C" {
            fn mallopt(param: i32, value: i32) -> i32;
        }
        const M_TRIM_THRESHOLD: i32 = -1;
        const M_MMAP_THRESHOLD: i32 = -3;
        ONCE.call_once(|| unsafe {
            mallopt(M_MMAP_THRESHOLD, 1 << 30);
            mallopt(M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

/// Bytes of tensor payload currently alive on this thread.
pub fn live_bytes() -> usize {
    TRACKER.with(|t| t.borrow().live)
}

/// An open measurement window. Close it with [`AllocScope::end`].
#[derive(Debug)]
pub struct AllocScope {
    id: u64,
    ended: bool,
}

impl AllocScope {
    pub fn begin() -> Self {
        let id = TRACKER.with(|t| {
            let mut t = t.borrow_mut();
            let id = t.next_id;
            t.next_id += 1;
            let live = t.live;
            t.frames.push(Frame {
                id,
                baseline: live,
                peak: live,
            });
            id
        });
        AllocScope { id, ended: false }
    }

    /// Closes the scope and returns its peak in bytes above the opening
    /// baseline. Fails if an inner scope is still open.
    pub fn end(mut self) -> Result<usize> {
        self.ended = true;
        pop_frame(self.id)
    }
}

impl Drop for AllocScope {
    fn drop(&mut self) {
        if !self.ended {
            let _ = pop_frame(self.id);
        }
    }
}

fn pop_frame(id: u64) -> Result<usize> {
    TRACKER.with(|t| {
        let mut t = t.borrow_mut();
        match t.frames.last() {
            Some(top) if top.id == id => {}
            Some(top) => {
                return Err(Error::Instrumentation(format!(
                    "scope {id} closed while scope {} is still open",
                    top.id
                )))
            }
            None => {
                return Err(Error::Instrumentation(format!(
                    "scope {id} closed with no open scope"
                )))
            }
        }
        let frame = t.frames.pop().expect("checked above");
        if let Some(parent) = t.frames.last_mut() {
            parent.peak = parent.peak.max(frame.peak);
        }
        Ok(frame.peak - frame.baseline)
    })
}

/// Runs `f` inside a fresh scope and returns its result with the peak bytes.
pub fn track_allocations<T>(f: impl FnOnce() -> T) -> Result<(T, usize)> {
    let scope = AllocScope::begin();
    let out = f();
    let peak = scope.end()?;
    Ok((out, peak))
}
