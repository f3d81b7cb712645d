//! Allocator for programs dominated by large, repeatedly allocated tensor
//! buffers. Freed blocks of at least [`MIN_CACHED`] bytes are kept for reuse
//! by an allocation of the same layout, and fresh large blocks are marked for
//! transparent huge pages on Linux. Everything else goes to [`System`].
//!
//! Opt in from a binary or test target:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: tagnet::alloc::TensorAlloc = tagnet::alloc::TensorAlloc;
//! ```

use std::alloc::{GlobalAlloc, Layout, System};
use std::ptr;
use std::sync::Mutex;

pub const MIN_CACHED: usize = 8 << 20;
/// Upper bound on bytes held in the cache.
pub const CACHE_BYTES: usize = 1 << 30;
const SLOTS: usize = 48;

#[derive(Clone, Copy)]
struct Slot {
    ptr: usize,
    size: usize,
    align: usize,
    /// Insertion stamp; the oldest block is evicted first.
    age: u64,
}

const EMPTY: Slot = Slot {
    ptr: 0,
    size: 0,
    align: 0,
    age: 0,
};

struct Cache {
    slots: [Slot; SLOTS],
    bytes: usize,
    clock: u64,
}

static CACHE: Mutex<Cache> = Mutex::new(Cache {
    slots: [EMPTY; SLOTS],
    bytes: 0,
    clock: 0,
});

pub struct TensorAlloc;

impl TensorAlloc {
    fn take(layout: Layout) -> Option<*mut u8> {
        let mut c = CACHE.lock().ok()?;
        let i = c
            .slots
            .iter()
            .position(|s| s.ptr != 0 && s.size == layout.size() && s.align == layout.align())?;
        let s = std::mem::replace(&mut c.slots[i], EMPTY);
        c.bytes -= s.size;
        Some(s.ptr as *mut u8)
    }

    /// Caches the block, evicting the oldest entries to make room. Returns
    /// false if the block should be released instead.
    unsafe fn put(p: *mut u8, layout: Layout) -> bool {
        if layout.size() > CACHE_BYTES {
            return false;
        }
        let Ok(mut c) = CACHE.lock() else { return false };
        while c.bytes + layout.size() > CACHE_BYTES || c.slots.iter().all(|s| s.ptr != 0) {
            let (i, _) = c
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.ptr != 0)
                .min_by_key(|(_, s)| s.age)
                .expect("cache is not empty");
            let s = std::mem::replace(&mut c.slots[i], EMPTY);
            c.bytes -= s.size;
            System.dealloc(s.ptr as *mut u8, Layout::from_size_align_unchecked(s.size, s.align));
        }
        c.clock += 1;
        let age = c.clock;
        let i = c.slots.iter().position(|s| s.ptr == 0).expect("free slot");
        c.slots[i] = Slot {
            ptr: p as usize,
            size: layout.size(),
            align: layout.align(),
            age,
        };
        c.bytes += layout.size();
        true
    }
}

#[cfg(target_os = "linux")]
fn advise_huge(p: *mut u8, size: usize) {
    const HUGE: usize = 2 << 20;
    let start = (p as usize + HUGE - 1) & !(HUGE - 1);
    let end = (p as usize + size) & !(HUGE - 1);
    if end > start {
        // SAFETY: the range lies inside a live allocation; the advice only
        // changes how the kernel backs it.
        unsafe {
            libc::madvise(start as *mut libc::c_void, end - start, libc::MADV_HUGEPAGE);
        }
    }
}

#[cfg(not(target_os = "linux"))]
fn advise_huge(_: *mut u8, _: usize) {}

unsafe impl GlobalAlloc for TensorAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if layout.size() < MIN_CACHED {
            return System.alloc(layout);
        }
        if let Some(p) = Self::take(layout) {
            return p;
        }
        let p = System.alloc(layout);
        if !p.is_null() {
            advise_huge(p, layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        if layout.size() < MIN_CACHED {
            return System.alloc_zeroed(layout);
        }
        if let Some(p) = Self::take(layout) {
            ptr::write_bytes(p, 0, layout.size());
            return p;
        }
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            advise_huge(p, layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, p: *mut u8, layout: Layout) {
        if layout.size() >= MIN_CACHED && Self::put(p, layout) {
            return;
        }
        System.dealloc(p, layout)
    }

    unsafe fn realloc(&self, p: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if layout.size() < MIN_CACHED && new_size < MIN_CACHED {
            return System.realloc(p, layout, new_size);
        }
        let new_layout = Layout::from_size_align_unchecked(new_size, layout.align());
        let q = self.alloc(new_layout);
        if !q.is_null() {
            ptr::copy_nonoverlapping(p, q, layout.size().min(new_size));
            self.dealloc(p, layout);
        }
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_blocks_are_reused_and_zeroed() {
        let a = TensorAlloc;
        let layout = Layout::from_size_align(MIN_CACHED + 64, 8).unwrap();
        unsafe {
            let p = a.alloc(layout);
            p.write_bytes(7, layout.size());
            a.dealloc(p, layout);
            let q = a.alloc_zeroed(layout);
            assert!(std::slice::from_raw_parts(q, layout.size()).iter().all(|&b| b == 0));
            let grown = a.realloc(q, layout, layout.size() * 2);
            assert!(std::slice::from_raw_parts(grown, layout.size()).iter().all(|&b| b == 0));
            a.dealloc(grown, Layout::from_size_align(layout.size() * 2, 8).unwrap());
            let small = Layout::from_size_align(64, 8).unwrap();
            let s = a.alloc(small);
            a.dealloc(s, small);
        }
        let c = CACHE.lock().unwrap();
        assert!(c.bytes <= CACHE_BYTES);
    }
}
