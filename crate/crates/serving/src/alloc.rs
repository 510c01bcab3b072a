//! Heap allocation counting.
//!
//! Binaries and tests install [`CountingAllocator`] as the global allocator;
//! the serving workers then read their own thread's count around each batch.
//! Without it installed every reading is `None`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

pub struct CountingAllocator;

static INSTALLED: AtomicBool = AtomicBool::new(false);
static TOTAL: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static THREAD: Cell<u64> = const { Cell::new(0) };
}

#[inline]
fn note() {
    INSTALLED.store(true, Ordering::Relaxed);
    TOTAL.fetch_add(1, Ordering::Relaxed);
    // Const-initialized `Cell` needs no registration, so this never allocates;
    // `try_with` covers thread teardown.
    let _ = THREAD.try_with(|c| c.set(c.get() + 1));
}

// SAFETY: forwards to the system allocator unchanged.
unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note();
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note();
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note();
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

/// Whether the counting allocator has seen any allocation in this process.
pub fn installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Allocations (including reallocations) made by the calling thread.
pub fn thread_allocations() -> Option<u64> {
    installed().then(|| THREAD.with(Cell::get))
}

pub fn total_allocations() -> Option<u64> {
    installed().then(|| TOTAL.load(Ordering::Relaxed))
}

/// Counts allocations made by `f` on the calling thread.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, Option<u64>) {
    let before = thread_allocations();
    let r = f();
    let after = thread_allocations();
    (r, before.zip(after).map(|(b, a)| a - b))
}
