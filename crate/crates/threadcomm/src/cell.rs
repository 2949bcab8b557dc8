//! Fixed-size message cells and the per-receiver pools that own them.
//!
//! Every receiving thread gets a private slice of the communicator's cell
//! pool. A sender acquires a cell from the *destination's* sub-pool, fills
//! it, and enqueues it on the destination inbox; the receiver returns the
//! cell to that same sub-pool after draining it. Releases therefore go back
//! to the sub-pool the cell came from, and a thread that floods one receiver
//! can never starve traffic to a different receiver.

use std::cell::UnsafeCell;
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU32, AtomicU64, Ordering};

/// Sentinel sub-pool index for cells that do not belong to any pool
/// (queue stubs and heap-allocated overflow cells).
pub(crate) const NO_POOL: u32 = u32::MAX;

/// Sentinel free-list index meaning "empty".
const FREE_NONE: u32 = u32::MAX;

/// Pads a value out to its own cache line to keep hot atomics from false
/// sharing.
#[repr(align(64))]
pub(crate) struct CachePadded<T>(pub T);

/// Delivery metadata describing one message, as seen by the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    /// Global rank of the sender.
    pub src_rank: usize,
    /// User tag the message was sent with.
    pub tag: i32,
    /// Total length of the message in bytes.
    pub msg_len: usize,
    /// Per (source, destination) sequence number, assigned at send time.
    pub seq: u64,
}

/// What a cell sitting in an inbox carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CellKind {
    /// Full payload copied into the cell.
    Eager,
    /// No payload; `src_buf`/`src_done` point at the sender's buffer and
    /// completion flag for the 1-copy path.
    OneCopyHeader,
    /// One slice of a message streamed through several cells.
    PipelineChunk,
}

/// Message fields written by the holder of a cell between acquire and
/// enqueue, and read after dequeue. Publication/consumption ordering is
/// provided by the inbox queue, so plain (unsynchronized) access is fine
/// while a cell is exclusively held.
pub(crate) struct Msg {
    pub kind: CellKind,
    pub src_rank: u32,
    pub tag: i32,
    pub msg_len: u64,
    pub seq: u64,
    pub chunk_index: u32,
    pub chunk_total: u32,
    /// 1-copy only: the sender's buffer, valid until `src_done` is raised.
    pub src_buf: *const u8,
    /// 1-copy only: completion flag the receiver raises after copying.
    pub src_done: *const AtomicU32,
    /// Bytes valid in this cell's payload.
    pub payload_len: usize,
}

impl Msg {
    fn empty() -> Self {
        Msg {
            kind: CellKind::Eager,
            src_rank: 0,
            tag: 0,
            msg_len: 0,
            seq: 0,
            chunk_index: 0,
            chunk_total: 1,
            src_buf: ptr::null(),
            src_done: ptr::null(),
            payload_len: 0,
        }
    }
}

/// One pool cell: an intrusive queue link, message metadata, and a pointer
/// to a fixed-capacity payload region.
#[repr(align(64))]
pub(crate) struct Cell {
    /// Intrusive link used by the destination inbox.
    pub(crate) next: AtomicPtr<Cell>,
    /// Index of this cell within its pool, `NO_POOL` otherwise.
    pool_idx: u32,
    /// Sub-pool (receiver-local thread index) the cell returns to on
    /// release, `NO_POOL` for stubs and overflow cells.
    owner: u32,
    /// Payload storage; points into the pool slab, or at `heap_payload` for
    /// overflow cells, or is null for stubs.
    payload_ptr: *mut u8,
    payload_cap: usize,
    /// Overflow cells own their payload; pool cells borrow from the slab.
    heap_payload: Option<Box<[u8]>>,
    /// Double-release detector (debug builds only inspect it).
    in_free_list: AtomicBool,
    msg: UnsafeCell<Msg>,
}

impl Cell {
    fn new(pool_idx: u32, owner: u32, payload_ptr: *mut u8, payload_cap: usize) -> Self {
        Cell {
            next: AtomicPtr::new(ptr::null_mut()),
            pool_idx,
            owner,
            payload_ptr,
            payload_cap,
            heap_payload: None,
            in_free_list: AtomicBool::new(false),
            msg: UnsafeCell::new(Msg::empty()),
        }
    }

    /// Dedicated stub node for an inbox queue. Carries no payload.
    pub(crate) fn new_stub() -> Box<Cell> {
        Box::new(Cell::new(NO_POOL, NO_POOL, ptr::null_mut(), 0))
    }

    /// Heap-allocated cell used by the bridge agent when the destination
    /// sub-pool is momentarily empty. Released through
    /// [`CellPool::release`] like any other cell.
    pub(crate) fn new_overflow(cap: usize) -> NonNull<Cell> {
        let mut payload = vec![0u8; cap].into_boxed_slice();
        let payload_ptr = payload.as_mut_ptr();
        let mut cell = Box::new(Cell::new(NO_POOL, NO_POOL, payload_ptr, cap));
        cell.heap_payload = Some(payload);
        // SAFETY: Box::into_raw never returns null.
        unsafe { NonNull::new_unchecked(Box::into_raw(cell)) }
    }

    pub(crate) fn is_overflow(&self) -> bool {
        self.pool_idx == NO_POOL && self.heap_payload.is_some()
    }

    pub(crate) fn payload_cap(&self) -> usize {
        self.payload_cap
    }

    /// Message metadata. Callers must hold the cell exclusively (between
    /// acquire and enqueue, or between dequeue and release).
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn msg_mut(&self) -> &mut Msg {
        &mut *self.msg.get()
    }

    /// Copy `data` into the cell payload. Caller must hold the cell
    /// exclusively and respect `payload_cap`.
    pub(crate) unsafe fn write_payload(&self, data: &[u8]) {
        debug_assert!(data.len() <= self.payload_cap);
        ptr::copy_nonoverlapping(data.as_ptr(), self.payload_ptr, data.len());
    }

    /// The valid payload bytes of a dequeued cell.
    pub(crate) unsafe fn payload(&self) -> &[u8] {
        let len = (*self.msg.get()).payload_len;
        debug_assert!(len <= self.payload_cap);
        std::slice::from_raw_parts(self.payload_ptr, len)
    }

    /// Raw payload region for incremental fills (bridge agent reads a frame
    /// body straight into the cell).
    pub(crate) unsafe fn payload_mut_ptr(&self) -> *mut u8 {
        self.payload_ptr
    }
}

/// The communicator-wide cell pool, divided into one LIFO free list per
/// local receiving thread.
///
/// `acquire` may be called by any thread (multiple producers target the same
/// receiver), so the free lists are lock-free stacks with a version tag to
/// defeat ABA between a racing pop's head load and its CAS.
pub(crate) struct CellPool {
    cells: Box<[Cell]>,
    /// Backing storage for every pool cell payload. Must outlive `cells`,
    /// which hold raw pointers into it.
    _slab: Box<[u8]>,
    /// Per sub-pool packed head: high 32 bits version tag, low 32 bits cell
    /// index (or `FREE_NONE`).
    free_heads: Box<[CachePadded<AtomicU64>]>,
    /// Next-free links, indexed like `cells`.
    free_next: Box<[AtomicU32]>,
    cell_size: usize,
    sub_pools: usize,
}

// SAFETY: all shared mutation inside CellPool goes through atomics; the raw
// payload pointers target the slab owned by the same struct, and exclusive
// access to a cell's msg/payload is handed off through acquire/enqueue/
// dequeue/release ordering.
unsafe impl Send for CellPool {}
unsafe impl Sync for CellPool {}

impl CellPool {
    /// Build a pool of `sub_pools × cells_per_rank` cells, each with
    /// `cell_size` bytes of payload.
    pub(crate) fn new(sub_pools: usize, cells_per_rank: usize, cell_size: usize) -> CellPool {
        let total = sub_pools * cells_per_rank;
        let mut slab = vec![0u8; total * cell_size].into_boxed_slice();
        let slab_base = slab.as_mut_ptr();

        let mut cells = Vec::with_capacity(total);
        for s in 0..sub_pools {
            for k in 0..cells_per_rank {
                let idx = s * cells_per_rank + k;
                // SAFETY: idx < total, so the offset stays inside the slab.
                let payload = unsafe { slab_base.add(idx * cell_size) };
                let mut cell = Cell::new(idx as u32, s as u32, payload, cell_size);
                *cell.in_free_list.get_mut() = true;
                cells.push(cell);
            }
        }

        let free_next: Vec<AtomicU32> = (0..total)
            .map(|idx| {
                // Link each sub-pool's cells in index order; the last one
                // terminates the list.
                let next = if (idx + 1) % cells_per_rank == 0 {
                    FREE_NONE
                } else {
                    idx as u32 + 1
                };
                AtomicU32::new(next)
            })
            .collect();

        let free_heads: Vec<CachePadded<AtomicU64>> = (0..sub_pools)
            .map(|s| CachePadded(AtomicU64::new(pack(0, (s * cells_per_rank) as u32))))
            .collect();

        CellPool {
            cells: cells.into_boxed_slice(),
            _slab: slab,
            free_heads: free_heads.into_boxed_slice(),
            free_next: free_next.into_boxed_slice(),
            cell_size,
            sub_pools,
        }
    }

    pub(crate) fn cell_size(&self) -> usize {
        self.cell_size
    }

    #[cfg(test)]
    pub(crate) fn cells_per_rank(&self) -> usize {
        self.cells.len() / self.sub_pools
    }

    /// Pop a free cell from `sub_pool`'s list, or `None` if it is empty.
    pub(crate) fn acquire(&self, sub_pool: usize) -> Option<NonNull<Cell>> {
        debug_assert!(sub_pool < self.sub_pools);
        let head = &self.free_heads[sub_pool].0;
        loop {
            let cur = head.load(Ordering::Acquire);
            let (tag, idx) = unpack(cur);
            if idx == FREE_NONE {
                return None;
            }
            // A racing pop can free and re-push `idx` between this load and
            // the CAS; the stale next value is harmless because the version
            // tag will have moved and the CAS below will fail.
            let next = self.free_next[idx as usize].load(Ordering::Relaxed);
            let replacement = pack(tag.wrapping_add(1), next);
            if head
                .compare_exchange_weak(cur, replacement, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                let cell = &self.cells[idx as usize];
                debug_assert!(cell.in_free_list.swap(false, Ordering::Relaxed));
                cell.next.store(ptr::null_mut(), Ordering::Relaxed);
                return Some(NonNull::from(cell));
            }
        }
    }

    /// Return a cell to its owner's free list. Overflow cells are simply
    /// deallocated.
    pub(crate) fn release(&self, cell: NonNull<Cell>) {
        // SAFETY: the caller holds the cell exclusively (it was dequeued and
        // fully drained, or acquired and abandoned).
        let c = unsafe { cell.as_ref() };
        if c.is_overflow() {
            // SAFETY: overflow cells are created via Box::into_raw in
            // new_overflow and released exactly once.
            unsafe { drop(Box::from_raw(cell.as_ptr())) };
            return;
        }
        debug_assert!(c.pool_idx != NO_POOL, "released a queue stub");
        debug_assert!(
            !c.in_free_list.swap(true, Ordering::Relaxed),
            "cell released twice"
        );
        let idx = c.pool_idx;
        let head = &self.free_heads[c.owner as usize].0;
        loop {
            let cur = head.load(Ordering::Relaxed);
            let (tag, top) = unpack(cur);
            self.free_next[idx as usize].store(top, Ordering::Relaxed);
            let replacement = pack(tag.wrapping_add(1), idx);
            if head
                .compare_exchange_weak(cur, replacement, Ordering::Release, Ordering::Relaxed)
                .is_ok()
            {
                return;
            }
        }
    }

    /// Number of cells currently free in one sub-pool (test/diagnostic use;
    /// only meaningful at quiescent points).
    pub(crate) fn free_count(&self, sub_pool: usize) -> usize {
        let mut n = 0;
        let mut idx = unpack(self.free_heads[sub_pool].0.load(Ordering::Acquire)).1;
        while idx != FREE_NONE {
            n += 1;
            idx = self.free_next[idx as usize].load(Ordering::Relaxed);
        }
        n
    }

    /// Total free cells across all sub-pools (quiescent points only).
    pub(crate) fn free_total(&self) -> usize {
        (0..self.sub_pools).map(|s| self.free_count(s)).sum()
    }

    pub(crate) fn total_cells(&self) -> usize {
        self.cells.len()
    }
}

fn pack(tag: u32, idx: u32) -> u64 {
    ((tag as u64) << 32) | idx as u64
}

fn unpack(v: u64) -> (u32, u32) {
    ((v >> 32) as u32, v as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    #[test]
    fn pool_starts_full_and_partitioned() {
        let pool = CellPool::new(4, 8, 256);
        assert_eq!(pool.total_cells(), 32);
        assert_eq!(pool.free_total(), 32);
        for s in 0..4 {
            assert_eq!(pool.free_count(s), 8);
        }
    }

    #[test]
    fn acquire_exhausts_then_release_refills() {
        let pool = CellPool::new(2, 4, 64);
        let mut held = Vec::new();
        for _ in 0..4 {
            held.push(pool.acquire(1).expect("sub-pool 1 should have cells"));
        }
        assert!(pool.acquire(1).is_none(), "sub-pool 1 must be exhausted");
        // The other sub-pool is unaffected.
        assert_eq!(pool.free_count(0), 4);
        for cell in held.drain(..) {
            pool.release(cell);
        }
        assert_eq!(pool.free_count(1), 4);
    }

    #[test]
    fn cells_are_distinct_and_return_to_owner() {
        let pool = CellPool::new(3, 5, 64);
        let mut seen = HashSet::new();
        let mut held = Vec::new();
        for s in 0..3 {
            for _ in 0..5 {
                let c = pool.acquire(s).unwrap();
                assert!(seen.insert(c.as_ptr() as usize), "duplicate cell handed out");
                held.push(c);
            }
        }
        assert_eq!(pool.free_total(), 0);
        for c in held {
            pool.release(c);
        }
        assert_eq!(pool.free_total(), 15);
        for s in 0..3 {
            assert_eq!(pool.free_count(s), 5);
        }
    }

    #[test]
    fn overflow_cells_release_without_touching_pool() {
        let pool = CellPool::new(1, 2, 64);
        let c = Cell::new_overflow(128);
        unsafe {
            assert!(c.as_ref().is_overflow());
            assert_eq!(c.as_ref().payload_cap(), 128);
        }
        pool.release(c);
        assert_eq!(pool.free_total(), 2);
    }

    #[test]
    fn payload_roundtrip() {
        let pool = CellPool::new(1, 2, 64);
        let c = pool.acquire(0).unwrap();
        let data = [7u8, 13, 42];
        unsafe {
            c.as_ref().write_payload(&data);
            c.as_ref().msg_mut().payload_len = data.len();
            assert_eq!(c.as_ref().payload(), &data);
        }
        pool.release(c);
    }

    /// Concurrent acquire/release against a single sub-pool must neither
    /// lose nor duplicate cells.
    #[test]
    fn concurrent_acquire_release_conserves_cells() {
        let pool = Arc::new(CellPool::new(1, 16, 64));
        let mut handles = Vec::new();
        for _ in 0..4 {
            let pool = Arc::clone(&pool);
            handles.push(std::thread::spawn(move || {
                for _ in 0..10_000 {
                    if let Some(c) = pool.acquire(0) {
                        // Touch the payload so a duplicated handout would
                        // race visibly under sanitizers.
                        unsafe { c.as_ref().msg_mut().seq += 1 };
                        pool.release(c);
                    }
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(pool.free_total(), 16);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Pool conservation for arbitrary shapes: each sub-pool hands out
        /// exactly `cells_per_rank` distinct cells of the configured
        /// capacity, exhaustion of one sub-pool never drains another, and
        /// releasing restores every count.
        #[test]
        fn pool_conservation(
            sub_pools in 1usize..6,
            cells_per_rank in 1usize..48,
            cell_size in prop::sample::select(vec![64usize, 256, 1024]),
        ) {
            let pool = CellPool::new(sub_pools, cells_per_rank, cell_size);
            prop_assert_eq!(pool.cells_per_rank(), cells_per_rank);
            prop_assert_eq!(pool.cell_size(), cell_size);
            prop_assert_eq!(pool.total_cells(), sub_pools * cells_per_rank);

            let mut seen = HashSet::new();
            let mut held = Vec::new();
            for s in 0..sub_pools {
                for _ in 0..cells_per_rank {
                    let c = pool.acquire(s).expect("sub-pool underfull");
                    prop_assert!(seen.insert(c.as_ptr() as usize));
                    // SAFETY: freshly acquired, exclusively held.
                    unsafe { prop_assert_eq!(c.as_ref().payload_cap(), cell_size); }
                    held.push(c);
                }
                prop_assert!(pool.acquire(s).is_none());
                // Later sub-pools must still be untouched.
                if s + 1 < sub_pools {
                    prop_assert_eq!(pool.free_count(s + 1), cells_per_rank);
                }
            }
            prop_assert_eq!(pool.free_total(), 0);
            for c in held {
                pool.release(c);
            }
            prop_assert_eq!(pool.free_total(), pool.total_cells());
            for s in 0..sub_pools {
                prop_assert_eq!(pool.free_count(s), cells_per_rank);
            }
        }
    }
}
