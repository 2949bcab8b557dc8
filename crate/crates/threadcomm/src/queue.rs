//! Intrusive lock-free multi-producer single-consumer inbox.
//!
//! This is the classic two-pointer MPSC design: producers XCHG themselves
//! onto `head` and then link the previous node forward, so `enqueue` is a
//! single atomic swap regardless of contention. The consumer chases `tail`
//! through the `next` links. A dedicated stub node keeps the list non-empty
//! so neither side ever updates both ends.
//!
//! The queue is FIFO per producer; interleaving between producers is
//! unspecified. There is a short window after a producer's swap and before
//! its link store in which the consumer observes the queue as inconsistent;
//! `dequeue` returns `None` for that case and the caller simply retries on a
//! later poll.

use std::cell::UnsafeCell;
use std::ptr::{self, NonNull};
use std::sync::atomic::Ordering;

use crate::cell::Cell;

pub(crate) struct MpscQueue {
    /// Insertion end, swapped by producers.
    head: crate::cell::CachePadded<std::sync::atomic::AtomicPtr<Cell>>,
    /// Consumption end, touched only by the owning consumer.
    tail: UnsafeCell<*mut Cell>,
    /// Permanent stub node; never carries a message.
    stub: Box<Cell>,
}

// SAFETY: producers only touch `head` (atomic); `tail` is only touched by
// the single consumer, which callers guarantee by construction (each inbox
// is drained exclusively by the thread bound to that slot).
unsafe impl Send for MpscQueue {}
unsafe impl Sync for MpscQueue {}

impl MpscQueue {
    pub(crate) fn new() -> MpscQueue {
        let stub = Cell::new_stub();
        let stub_ptr = &*stub as *const Cell as *mut Cell;
        stub.next.store(ptr::null_mut(), Ordering::Relaxed);
        MpscQueue {
            head: crate::cell::CachePadded(std::sync::atomic::AtomicPtr::new(stub_ptr)),
            tail: UnsafeCell::new(stub_ptr),
            stub,
        }
    }

    fn stub_ptr(&self) -> *mut Cell {
        &*self.stub as *const Cell as *mut Cell
    }

    /// Publish a filled cell. Any thread may call this. The release swap
    /// orders the producer's writes to the cell before the consumer's
    /// acquire load of the link that exposes it.
    pub(crate) fn enqueue(&self, cell: NonNull<Cell>) {
        let cell_ptr = cell.as_ptr();
        // SAFETY: the producer holds the cell exclusively until the link
        // store below publishes it.
        unsafe { (*cell_ptr).next.store(ptr::null_mut(), Ordering::Relaxed) };
        let prev = self.head.0.swap(cell_ptr, Ordering::AcqRel);
        // SAFETY: `prev` is either the stub or a previously enqueued cell;
        // both stay alive at least until the consumer unlinks them.
        unsafe { (*prev).next.store(cell_ptr, Ordering::Release) };
    }

    /// Pop the oldest available cell. Must only be called by the owning
    /// consumer. Returns `None` when the queue is empty *or* momentarily
    /// inconsistent (a producer swapped but has not linked yet) — callers
    /// treat both as "nothing to do right now".
    pub(crate) fn dequeue(&self) -> Option<NonNull<Cell>> {
        // SAFETY: single consumer by contract.
        unsafe {
            let mut tail = *self.tail.get();
            let mut next = (*tail).next.load(Ordering::Acquire);

            if tail == self.stub_ptr() {
                match NonNull::new(next) {
                    // Empty (or a producer is mid-enqueue).
                    None => return None,
                    Some(n) => {
                        // Skip past the stub.
                        *self.tail.get() = n.as_ptr();
                        tail = n.as_ptr();
                        next = (*tail).next.load(Ordering::Acquire);
                    }
                }
            }

            if let Some(n) = NonNull::new(next) {
                // Interior node: hand `tail` out, advance to `next`.
                *self.tail.get() = n.as_ptr();
                return Some(NonNull::new_unchecked(tail));
            }

            // `tail` looks like the last node. Only believe it if `head`
            // agrees; otherwise a producer is mid-enqueue behind it.
            let head = self.head.0.load(Ordering::Acquire);
            if tail != head {
                return None;
            }

            // Re-insert the stub so the popped node is no longer needed as
            // an anchor, then re-check the link in case a producer slipped
            // in between the head check and the stub enqueue.
            self.push_stub();
            let next = (*tail).next.load(Ordering::Acquire);
            if let Some(n) = NonNull::new(next) {
                *self.tail.get() = n.as_ptr();
                return Some(NonNull::new_unchecked(tail));
            }
            None
        }
    }

    fn push_stub(&self) {
        let stub = self.stub_ptr();
        // SAFETY: the stub is only re-inserted by the consumer after it has
        // been skipped past, so no producer holds it.
        unsafe { (*stub).next.store(ptr::null_mut(), Ordering::Relaxed) };
        let prev = self.head.0.swap(stub, Ordering::AcqRel);
        unsafe { (*prev).next.store(stub, Ordering::Release) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::CellPool;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn drain(q: &MpscQueue, pool: &CellPool) -> Vec<u64> {
        let mut out = Vec::new();
        while let Some(c) = q.dequeue() {
            unsafe { out.push(c.as_ref().msg_mut().seq) };
            pool.release(c);
        }
        out
    }

    #[test]
    fn empty_queue_dequeues_none() {
        let q = MpscQueue::new();
        assert!(q.dequeue().is_none());
        assert!(q.dequeue().is_none());
    }

    #[test]
    fn single_producer_fifo() {
        let pool = CellPool::new(1, 16, 32);
        let q = MpscQueue::new();
        for seq in 0..16u64 {
            let c = pool.acquire(0).unwrap();
            unsafe { c.as_ref().msg_mut().seq = seq };
            q.enqueue(c);
        }
        assert_eq!(drain(&q, &pool), (0..16).collect::<Vec<_>>());
        assert!(q.dequeue().is_none());
        assert_eq!(pool.free_total(), 16);
    }

    #[test]
    fn interleaved_enqueue_dequeue_keeps_order() {
        let pool = CellPool::new(1, 4, 32);
        let q = MpscQueue::new();
        let mut expect = 0u64;
        for round in 0..50u64 {
            for k in 0..3 {
                let c = pool.acquire(0).unwrap();
                unsafe { c.as_ref().msg_mut().seq = round * 3 + k };
                q.enqueue(c);
            }
            for got in drain(&q, &pool) {
                assert_eq!(got, expect);
                expect += 1;
            }
        }
        assert_eq!(expect, 150);
    }

    /// Multi-producer stress: per-producer FIFO must hold and every cell
    /// must come out exactly once.
    #[test]
    fn multi_producer_per_source_fifo() {
        const PRODUCERS: usize = 4;
        const PER_PRODUCER: u64 = 20_000;
        let pool = Arc::new(CellPool::new(1, 64, 32));
        let q = Arc::new(MpscQueue::new());
        let done = Arc::new(AtomicUsize::new(0));

        let mut handles = Vec::new();
        for p in 0..PRODUCERS {
            let pool = Arc::clone(&pool);
            let q = Arc::clone(&q);
            let done = Arc::clone(&done);
            handles.push(std::thread::spawn(move || {
                for i in 0..PER_PRODUCER {
                    let c = loop {
                        match pool.acquire(0) {
                            Some(c) => break c,
                            None => std::thread::yield_now(),
                        }
                    };
                    unsafe {
                        let m = c.as_ref().msg_mut();
                        m.src_rank = p as u32;
                        m.seq = i;
                    }
                    q.enqueue(c);
                }
                done.fetch_add(1, Ordering::Release);
            }));
        }

        let mut next_expected = [0u64; PRODUCERS];
        let mut total = 0u64;
        loop {
            match q.dequeue() {
                Some(c) => {
                    let (src, seq) = unsafe {
                        let m = c.as_ref().msg_mut();
                        (m.src_rank as usize, m.seq)
                    };
                    assert_eq!(seq, next_expected[src], "producer {src} out of order");
                    next_expected[src] += 1;
                    total += 1;
                    pool.release(c);
                }
                None => {
                    if done.load(Ordering::Acquire) == PRODUCERS
                        && total == PRODUCERS as u64 * PER_PRODUCER
                    {
                        break;
                    }
                    std::hint::spin_loop();
                }
            }
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(q.dequeue().is_none());
        assert_eq!(pool.free_total(), 64);
    }
}
