//! Temporary buffers for inference kernels.
//!
//! Kernels request their workspace through [`Scratch`] so the same code runs
//! on plain heap allocations or on a per-worker bump arena that is reset
//! between batches.

use std::alloc::{self, Layout};
use std::cell::RefCell;
use std::ptr::NonNull;

/// Source of short-lived, exclusively owned slices. Slices live as long as the
/// borrow of the scratch; resetting requires `&mut`, so none can outlive it.
pub trait Scratch {
    #[allow(clippy::mut_from_ref)]
    fn alloc_fill<T: Copy>(&self, n: usize, value: T) -> &mut [T];

    #[allow(clippy::mut_from_ref)]
    fn alloc_copy<T: Copy>(&self, src: &[T]) -> &mut [T] {
        match src.first() {
            None => &mut [],
            Some(&first) => {
                let out = self.alloc_fill(src.len(), first);
                out.copy_from_slice(src);
                out
            }
        }
    }
}

/// Every request is a fresh heap allocation, freed on drop.
#[derive(Default)]
pub struct HeapScratch {
    blocks: RefCell<Vec<(NonNull<u8>, Layout)>>,
}

impl HeapScratch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocations(&self) -> usize {
        self.blocks.borrow().len()
    }
}

impl Scratch for HeapScratch {
    fn alloc_fill<T: Copy>(&self, n: usize, value: T) -> &mut [T] {
        let layout = Layout::array::<T>(n).expect("scratch size overflow");
        if layout.size() == 0 {
            return &mut [];
        }
        // SAFETY: non-zero size layout; the block is initialized before a slice is formed and
        // is only freed in `drop`, which needs exclusive access to `self`.
        unsafe {
            let ptr = alloc::alloc(layout);
            let Some(nn) = NonNull::new(ptr) else {
                alloc::handle_alloc_error(layout)
            };
            let typed = ptr as *mut T;
            for i in 0..n {
                typed.add(i).write(value);
            }
            self.blocks.borrow_mut().push((nn, layout));
            std::slice::from_raw_parts_mut(typed, n)
        }
    }
}

impl Drop for HeapScratch {
    fn drop(&mut self) {
        for (ptr, layout) in self.blocks.get_mut().drain(..) {
            // SAFETY: allocated in `alloc_fill` with this layout.
            unsafe { alloc::dealloc(ptr.as_ptr(), layout) }
        }
    }
}
