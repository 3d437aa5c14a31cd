//! Byte-counting allocator hooks for measuring what a code path allocates.
//!
//! Install [`CountingAllocator`] as the `#[global_allocator]` of a binary or test
//! target, then wrap the code of interest in [`measure`]. Counting is per thread,
//! so concurrently running tests do not disturb one another. Without the allocator
//! installed, [`is_installed`] is false and every measurement reads zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

pub struct CountingAllocator;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static CURRENT: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    static LARGEST: Cell<usize> = const { Cell::new(0) };
    static COUNT: Cell<usize> = const { Cell::new(0) };
}

fn on_alloc(size: usize) {
    let _ = ACTIVE.try_with(|active| {
        if !active.get() {
            return;
        }
        let cur = CURRENT.with(|c| {
            let v = c.get() + size as isize;
            c.set(v);
            v
        });
        PEAK.with(|p| p.set(p.get().max(cur)));
        LARGEST.with(|l| l.set(l.get().max(size)));
        COUNT.with(|c| c.set(c.get() + 1));
    });
}

fn on_dealloc(size: usize) {
    let _ = ACTIVE.try_with(|active| {
        if active.get() {
            CURRENT.with(|c| c.set(c.get() - size as isize));
        }
    });
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        on_dealloc(layout.size());
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            on_dealloc(layout.size());
            on_alloc(new_size);
        }
        p
    }
}

/// Allocation statistics of one [`measure`] scope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AllocStats {
    /// Highest live byte count above the level at scope entry.
    pub peak_bytes: usize,
    /// Largest single allocation.
    pub largest_bytes: usize,
    pub allocations: usize,
}

/// Run `f` with counting enabled on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    let was_active = ACTIVE.with(|a| a.replace(true));
    let saved = (
        CURRENT.with(|c| c.replace(0)),
        PEAK.with(|p| p.replace(0)),
        LARGEST.with(|l| l.replace(0)),
        COUNT.with(|c| c.replace(0)),
    );
    let out = f();
    let stats = AllocStats {
        peak_bytes: PEAK.with(Cell::get).max(0) as usize,
        largest_bytes: LARGEST.with(Cell::get),
        allocations: COUNT.with(Cell::get),
    };
    CURRENT.with(|c| c.set(saved.0));
    PEAK.with(|p| p.set(saved.1));
    LARGEST.with(|l| l.set(saved.2));
    COUNT.with(|c| c.set(saved.3));
    ACTIVE.with(|a| a.set(was_active));
    (out, stats)
}

/// Whether [`CountingAllocator`] is the process's global allocator.
pub fn is_installed() -> bool {
    let (_, stats) = measure(|| std::hint::black_box(Vec::<u8>::with_capacity(64)));
    stats.allocations > 0
}
