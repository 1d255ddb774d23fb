//! Global allocator that backs large blocks with transparent huge pages.
//!
//! Activations at full width run to hundreds of megabytes per tensor. With
//! 4 KiB pages the first touch of every page faults separately and the GEMM
//! packing loops miss the TLB constantly; 2 MiB pages remove most of both.
//! Binaries opt in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: dtrformer::alloc::HugePageAlloc = dtrformer::alloc::HugePageAlloc;
//! ```

use std::alloc::{GlobalAlloc, Layout, System};
use std::ptr;
use std::sync::Mutex;

/// Blocks at least this large are mapped directly and advised as huge.
pub const HUGE_THRESHOLD: usize = 4 << 20;

const PAGE: usize = 4096;

const CACHE_SLOTS: usize = 32;

/// Upper bound on the bytes parked in the free-block cache.
pub const CACHE_BYTES: usize = 1 << 30;

/// Recently freed mappings as `(len, address)`, reused on an exact length
/// match. Backward passes free activations and allocate gradients of the
/// same shapes, so most requests hit.
struct Cache {
    slots: [(usize, usize); CACHE_SLOTS],
    bytes: usize,
}

static CACHE: Mutex<Cache> = Mutex::new(Cache {
    slots: [(0, 0); CACHE_SLOTS],
    bytes: 0,
});

fn take_cached(len: usize) -> *mut u8 {
    let Ok(mut c) = CACHE.lock() else {
        return ptr::null_mut();
    };
    match c.slots.iter().position(|&(l, _)| l == len) {
        Some(i) => {
            let addr = c.slots[i].1;
            c.slots[i] = (0, 0);
            c.bytes -= len;
            addr as *mut u8
        }
        None => ptr::null_mut(),
    }
}

fn park(p: *mut u8, len: usize) -> bool {
    let Ok(mut c) = CACHE.lock() else { return false };
    if c.bytes + len > CACHE_BYTES {
        return false;
    }
    match c.slots.iter().position(|&(l, _)| l == 0) {
        Some(i) => {
            c.slots[i] = (len, p as usize);
            c.bytes += len;
            true
        }
        None => false,
    }
}

/// Forwards small blocks to the system allocator.
#[derive(Clone, Copy, Debug, Default)]
pub struct HugePageAlloc;

fn mapped(layout: &Layout) -> bool {
    layout.size() >= HUGE_THRESHOLD && layout.align() <= PAGE
}

fn map_len(size: usize) -> usize {
    size.div_ceil(PAGE) * PAGE
}

/// Returns the block and whether it was reused from the cache.
unsafe fn map(size: usize) -> (*mut u8, bool) {
    let len = map_len(size);
    let cached = take_cached(len);
    if !cached.is_null() {
        return (cached, true);
    }
    let p = libc::mmap(
        ptr::null_mut(),
        len,
        libc::PROT_READ | libc::PROT_WRITE,
        libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
        -1,
        0,
    );
    if p == libc::MAP_FAILED {
        return (ptr::null_mut(), false);
    }
    // advisory only; a kernel without THP simply ignores it
    libc::madvise(p, len, libc::MADV_HUGEPAGE);
    (p as *mut u8, false)
}

unsafe impl GlobalAlloc for HugePageAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if mapped(&layout) {
            map(layout.size()).0
        } else {
            System.alloc(layout)
        }
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        if mapped(&layout) {
            // fresh anonymous mappings are already zero-filled
            let (p, reused) = map(layout.size());
            if reused {
                ptr::write_bytes(p, 0, layout.size());
            }
            p
        } else {
            System.alloc_zeroed(layout)
        }
    }

    unsafe fn dealloc(&self, p: *mut u8, layout: Layout) {
        if mapped(&layout) {
            let len = map_len(layout.size());
            if !park(p, len) {
                libc::munmap(p as *mut libc::c_void, len);
            }
        } else {
            System.dealloc(p, layout)
        }
    }

    unsafe fn realloc(&self, p: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let new_layout = Layout::from_size_align_unchecked(new_size, layout.align());
        match (mapped(&layout), mapped(&new_layout)) {
            (false, false) => System.realloc(p, layout, new_size),
            (true, true) => {
                let q = libc::mremap(
                    p as *mut libc::c_void,
                    map_len(layout.size()),
                    map_len(new_size),
                    libc::MREMAP_MAYMOVE,
                );
                if q == libc::MAP_FAILED {
                    ptr::null_mut()
                } else {
                    q as *mut u8
                }
            }
            _ => {
                let q = self.alloc(new_layout);
                if !q.is_null() {
                    ptr::copy_nonoverlapping(p, q, layout.size().min(new_size));
                    self.dealloc(p, layout);
                }
                q
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_blocks_round_trip() {
        let a = HugePageAlloc;
        unsafe {
            let layout = Layout::from_size_align(HUGE_THRESHOLD + 10, 8).unwrap();
            let p = a.alloc_zeroed(layout) as *mut u64;
            assert!(!p.is_null());
            let n = layout.size() / 8;
            assert!((0..n).all(|i| *p.add(i) == 0));
            *p.add(n - 1) = 7;
            let q = a.realloc(p as *mut u8, layout, 3 * HUGE_THRESHOLD) as *mut u64;
            assert_eq!(*q.add(n - 1), 7);
            let grown = Layout::from_size_align(3 * HUGE_THRESHOLD, 8).unwrap();
            let r = a.realloc(q as *mut u8, grown, 64) as *mut u64;
            assert_eq!(*r, 0);
            a.dealloc(r as *mut u8, Layout::from_size_align(64, 8).unwrap());
        }
    }
}
