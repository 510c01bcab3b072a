//! Per-worker bump arena.
//!
//! One contiguous, 64-byte aligned block allocated up front. Batches take
//! slices by bumping an offset; [`Arena::reset`] rewinds it between batches.
//! Per-item workspace comes from a [`Frame`], which rewinds to its start mark
//! when dropped so the block holds one item's temporaries at a time.
//!
//! Requests that do not fit are served from individually heap-allocated
//! blocks (freed at the next reset) and counted as overflows.
//!
//! In debug builds freed bytes are overwritten with [`POISON`] and every fresh
//! slice is checked to contain only poison before it is handed out, so data
//! from an earlier batch can never be observed.

use std::alloc::{self, Layout};
use std::cell::{Cell, RefCell};
use std::ptr::NonNull;

use seqrank_core::scratch::Scratch;

pub const DEFAULT_CAPACITY: usize = 64 << 20;
pub const ALIGN: usize = 64;
pub const POISON: u8 = 0xA5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ArenaStats {
    pub capacity: usize,
    pub used: usize,
    pub high_water: usize,
    pub epoch: u64,
    pub overflows: u64,
    pub overflow_bytes: u64,
}

pub struct Arena {
    base: NonNull<u8>,
    capacity: usize,
    top: Cell<usize>,
    high_water: Cell<usize>,
    epoch: u64,
    in_frame: Cell<bool>,
    overflows: Cell<u64>,
    overflow_bytes: Cell<u64>,
    fallback: RefCell<Vec<(NonNull<u8>, Layout)>>,
}

// SAFETY: the arena exclusively owns its block and fallback allocations; the
// interior `Cell`s make it `!Sync`, so it is used by one thread at a time.
unsafe impl Send for Arena {}

impl Arena {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(ALIGN);
        let layout = Layout::from_size_align(capacity, ALIGN).expect("arena capacity overflow");
        // SAFETY: non-zero size.
        let ptr = unsafe { alloc::alloc(layout) };
        let Some(base) = NonNull::new(ptr) else {
            alloc::handle_alloc_error(layout)
        };
        if cfg!(debug_assertions) {
            // SAFETY: the block is `capacity` bytes long.
            unsafe { ptr.write_bytes(POISON, capacity) };
        }
        Arena {
            base,
            capacity,
            top: Cell::new(0),
            high_water: Cell::new(0),
            epoch: 0,
            in_frame: Cell::new(false),
            overflows: Cell::new(0),
            overflow_bytes: Cell::new(0),
            fallback: RefCell::new(Vec::new()),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used(&self) -> usize {
        self.top.get()
    }

    pub fn stats(&self) -> ArenaStats {
        ArenaStats {
            capacity: self.capacity,
            used: self.top.get(),
            high_water: self.high_water.get(),
            epoch: self.epoch,
            overflows: self.overflows.get(),
            overflow_bytes: self.overflow_bytes.get(),
        }
    }

    /// Rewinds to empty and frees overflow blocks. Needs `&mut`, so no slice
    /// handed out before can still be alive.
    pub fn reset(&mut self) {
        self.poison(0, self.top.get());
        self.top.set(0);
        for (ptr, layout) in self.fallback.get_mut().drain(..) {
            // SAFETY: allocated in `overflow` with this layout.
            unsafe { alloc::dealloc(ptr.as_ptr(), layout) }
        }
        self.epoch += 1;
    }

    /// Scratch for one item's temporaries, released when the frame drops.
    /// While a frame is open, allocations made directly on the arena go to
    /// the overflow path so the rewind cannot free them.
    pub fn frame(&self) -> Frame<'_> {
        assert!(!self.in_frame.replace(true), "arena frames do not nest");
        Frame {
            arena: self,
            mark: self.top.get(),
        }
    }

    /// Bytes `[0, len)` of the block as they currently are. Debug aid for
    /// checking the poison invariant; contents past `used()` are not data.
    #[cfg(debug_assertions)]
    pub fn raw_bytes(&mut self, len: usize) -> &[u8] {
        // SAFETY: in bounds; debug builds initialize the whole block, and `&mut`
        // rules out live slices.
        unsafe { std::slice::from_raw_parts(self.base.as_ptr(), len.min(self.capacity)) }
    }

    fn poison(&self, from: usize, to: usize) {
        if cfg!(debug_assertions) && to > from {
            // SAFETY: `from..to` lies inside the block and no live slice covers it.
            unsafe { self.base.as_ptr().add(from).write_bytes(POISON, to - from) };
        }
    }

    fn bump<T: Copy>(&self, n: usize, value: T) -> &mut [T] {
        let layout = Layout::array::<T>(n).expect("arena request overflow");
        if layout.size() == 0 {
            // SAFETY: zero-sized region; a dangling aligned pointer is valid.
            return unsafe { std::slice::from_raw_parts_mut(NonNull::<T>::dangling().as_ptr(), n) };
        }
        assert!(layout.align() <= ALIGN, "alignment above {ALIGN} not supported");
        let start = self.top.get().next_multiple_of(layout.align());
        let end = match start.checked_add(layout.size()) {
            Some(end) if end <= self.capacity => end,
            _ => return self.overflow(layout, n, value),
        };
        self.top.set(end);
        self.high_water.set(self.high_water.get().max(end));
        // SAFETY: `start..end` is inside the block, aligned for T, and beyond every
        // slice handed out since the last rewind, so the new slice is exclusive.
        unsafe {
            let ptr = self.base.as_ptr().add(start);
            if cfg!(debug_assertions) {
                let fresh = std::slice::from_raw_parts(ptr, end - start);
                debug_assert!(fresh.iter().all(|&b| b == POISON), "arena handed out stale bytes");
            }
            fill(ptr as *mut T, n, value)
        }
    }

    fn overflow<T: Copy>(&self, layout: Layout, n: usize, value: T) -> &mut [T] {
        self.overflows.set(self.overflows.get() + 1);
        self.overflow_bytes.set(self.overflow_bytes.get() + layout.size() as u64);
        // SAFETY: non-zero size; the block is owned by `fallback` until the next reset,
        // which needs `&mut self`.
        unsafe {
            let ptr = alloc::alloc(layout);
            let Some(nn) = NonNull::new(ptr) else {
                alloc::handle_alloc_error(layout)
            };
            self.fallback.borrow_mut().push((nn, layout));
            fill(ptr as *mut T, n, value)
        }
    }
}

/// # Safety
/// `ptr` must be valid for `n` writes of `T` and not aliased for the returned lifetime.
unsafe fn fill<'a, T: Copy>(ptr: *mut T, n: usize, value: T) -> &'a mut [T] {
    for i in 0..n {
        ptr.add(i).write(value);
    }
    std::slice::from_raw_parts_mut(ptr, n)
}

impl Scratch for Arena {
    fn alloc_fill<T: Copy>(&self, n: usize, value: T) -> &mut [T] {
        if self.in_frame.get() {
            let layout = Layout::array::<T>(n).expect("arena request overflow");
            if layout.size() > 0 {
                return self.overflow(layout, n, value);
            }
        }
        self.bump(n, value)
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        self.reset();
        // SAFETY: allocated in `new` with this layout.
        unsafe { alloc::dealloc(self.base.as_ptr(), Layout::from_size_align_unchecked(self.capacity, ALIGN)) }
    }
}

/// Item-scoped view of an [`Arena`].
pub struct Frame<'a> {
    arena: &'a Arena,
    mark: usize,
}

impl Scratch for Frame<'_> {
    fn alloc_fill<T: Copy>(&self, n: usize, value: T) -> &mut [T] {
        self.arena.bump(n, value)
    }
}

impl Drop for Frame<'_> {
    fn drop(&mut self) {
        self.arena.poison(self.mark, self.arena.top.get());
        self.arena.top.set(self.mark);
        self.arena.in_frame.set(false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bumps_aligned_and_resets() {
        let mut a = Arena::new(4096);
        let x = a.alloc_fill(3, 1u8);
        let y = a.alloc_fill(4, 2.0f64);
        assert_eq!(x, &[1, 1, 1]);
        assert_eq!(y.as_ptr() as usize % 8, 0);
        assert_eq!(a.used(), 8 + 32);
        a.reset();
        assert_eq!(a.used(), 0);
        assert_eq!(a.stats().epoch, 1);
        assert_eq!(a.stats().high_water, 40);
        assert_eq!(a.stats().overflows, 0);
    }

    #[test]
    fn base_is_64_byte_aligned() {
        let a = Arena::new(256);
        let s = a.alloc_fill(1, 0u8);
        assert_eq!(s.as_ptr() as usize % ALIGN, 0);
    }

    #[test]
    fn overflow_falls_back_to_heap() {
        let mut a = Arena::new(128);
        let big = a.alloc_fill(100, 7u32);
        assert_eq!(big.len(), 100);
        assert!(big.iter().all(|&v| v == 7));
        assert_eq!(a.used(), 0);
        let s = a.stats();
        assert_eq!((s.overflows, s.overflow_bytes), (1, 400));
        a.reset();
        assert_eq!(a.stats().overflows, 1);
    }

    #[test]
    fn frame_rewinds_and_blocks_outer_bumps() {
        let a = Arena::new(1024);
        let outer = a.alloc_fill(16, 1u8);
        {
            let f = a.frame();
            let inner = f.alloc_fill(64, 2u8);
            inner[0] = 3;
            assert_eq!(a.used(), 80);
            // Would be rewound under the live outer slice: goes to the heap instead.
            let side = a.alloc_fill(8, 4u8);
            assert_eq!(side, &[4; 8]);
            assert_eq!(a.stats().overflows, 1);
        }
        assert_eq!(a.used(), 16);
        assert_eq!(outer, &[1; 16]);
        let again = a.frame();
        assert_eq!(again.alloc_fill(4, 0u8).len(), 4);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn reset_poisons_previous_batch() {
        let mut a = Arena::new(1024);
        let s = a.alloc_fill(100, 0u8);
        s.copy_from_slice(&[42u8; 100]);
        a.reset();
        assert!(a.raw_bytes(100).iter().all(|&b| b == POISON));
        {
            let f = a.frame();
            f.alloc_fill(50, 9u8);
        }
        assert!(a.raw_bytes(100).iter().all(|&b| b == POISON));
    }

    #[test]
    fn zero_sized_requests() {
        let a = Arena::new(64);
        assert!(a.alloc_fill::<u32>(0, 0).is_empty());
        assert_eq!(a.alloc_fill(5, ()).len(), 5);
        assert_eq!(a.used(), 0);
    }
}
