//! Collectives over a communicator's ranks: barrier (two variants),
//! broadcast, reduce, and allreduce.
//!
//! Every collective call consumes one slot of the per-binding collective
//! sequence counter, which advances in lockstep on all ranks because
//! collectives are called in the same order everywhere. The sequence number
//! is folded into a reserved tag (above the user tag space), so collective
//! traffic can never match user receives and adjacent collectives cannot
//! bleed into each other.
//!
//! The barrier comes in a **message** variant — a dissemination barrier of
//! ⌈log₂ N⌉ rounds of zero-byte messages over the full communicator — and
//! an **atomic** variant that replaces intra-process rounds with shared
//! atomic flags and only sends messages between process leaders.

use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::cell::CachePadded;
use crate::comm::{CommInner, Threadcomm};
use crate::error::{Error, Result};
use crate::p2p::{self, Binding, MatchSpec};
use crate::util::{ceil_log2, SpinWait};

const KIND_BARRIER: u32 = 0;
const KIND_BCAST: u32 = 1;
const KIND_REDUCE: u32 = 2;

/// Build a collective tag: bit 30 marks collective traffic, bits 28..30 the
/// collective kind, bits 20..28 an auxiliary field (root rank or
/// dissemination round), bits 0..20 the collective sequence number.
fn coll_tag(kind: u32, aux: u32, seq: u64) -> i32 {
    debug_assert!(kind < 4);
    debug_assert!(aux < 256);
    (1 << 30) | ((kind as i32) << 28) | ((aux as i32) << 20) | ((seq & 0xF_FFFF) as i32)
}

/// Which barrier implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierVariant {
    /// Dissemination rounds of zero-byte messages between ranks.
    Message,
    /// Shared atomic flags between local threads; messages only between
    /// process leaders.
    Atomic,
}

/// Per-communicator state for the atomic barrier variant: one flag per
/// (local thread, round), written by that round's partner.
///
/// Flags carry monotonically increasing stamps derived from the activation
/// generation and the thread's barrier episode counter, so they never need
/// resetting — a stale value is always smaller than the stamp being waited
/// for, and an overwrite by a *newer* stamp still satisfies the wait.
pub(crate) struct BarrierState {
    flags: Box<[CachePadded<AtomicU64>]>,
    rounds: usize,
}

impl BarrierState {
    pub(crate) fn new(local_threads: usize) -> BarrierState {
        let rounds = ceil_log2(local_threads) as usize;
        let flags = (0..local_threads * rounds)
            .map(|_| CachePadded(AtomicU64::new(0)))
            .collect::<Vec<_>>()
            .into_boxed_slice();
        BarrierState { flags, rounds }
    }
}

/// Dissemination over the local threads using shared atomic flags.
fn atomic_dissemination(comm: &CommInner, b: &mut Binding) {
    let local = comm.local_count();
    let st = &comm.barrier;
    if local > 1 {
        let rounds = st.rounds;
        let episode = b.barrier_epoch;
        // Activation ordinal keeps stamps increasing across windows even
        // though each binding's episode counter restarts at zero.
        let activation = b.gen / 2;
        let me = b.local_tid;
        for k in 0..rounds {
            let stamp = (activation << 34) | (episode * rounds as u64 + k as u64 + 1);
            let partner = (me + (1 << k)) % local;
            st.flags[partner * rounds + k].0.store(stamp, Ordering::Release);
            let mine = &st.flags[me * rounds + k].0;
            let mut spin = SpinWait::new(comm.config.poll_yield_every);
            while mine.load(Ordering::Acquire) < stamp {
                spin.idle();
            }
        }
    }
    b.barrier_epoch += 1;
}

/// Dissemination over all N ranks with zero-byte messages.
fn barrier_message(comm: &CommInner, b: &mut Binding, seq: u64) -> Result<()> {
    let n = comm.table.total();
    let me = b.global_rank;
    for k in 0..ceil_log2(n) {
        let dist = 1usize << k;
        let dst = (me + dist) % n;
        let src = (me + n - dist) % n;
        let tag = coll_tag(KIND_BARRIER, k, seq);
        p2p::send_internal(comm, b, &[], dst, tag, None)?;
        p2p::recv_internal(comm, b, &mut [], MatchSpec::from_rank(src, tag))?;
    }
    Ok(())
}

fn barrier_atomic(comm: &CommInner, b: &mut Binding, seq: u64) -> Result<()> {
    atomic_dissemination(comm, b);
    if comm.proc_count > 1 {
        if b.local_tid == 0 {
            // Process leaders run a message dissemination among themselves;
            // every process's arrival is already implied by its local phase.
            let p = comm.proc_count;
            let i = comm.proc_rank;
            for k in 0..ceil_log2(p) {
                let dist = 1usize << k;
                let dst = comm.table.base((i + dist) % p);
                let src = comm.table.base((i + p - dist) % p);
                let tag = coll_tag(KIND_BARRIER, k, seq);
                p2p::send_internal(comm, b, &[], dst, tag, None)?;
                p2p::recv_internal(comm, b, &mut [], MatchSpec::from_rank(src, tag))?;
            }
        }
        // Release the non-leader threads only after the leaders agree.
        atomic_dissemination(comm, b);
    }
    Ok(())
}

/// Binomial-tree broadcast over ranks rotated so `root` maps to zero.
fn bcast_internal(comm: &CommInner, b: &mut Binding, buf: &mut [u8], root: usize, seq: u64) -> Result<()> {
    let n = comm.table.total();
    if n == 1 {
        return Ok(());
    }
    let me = b.global_rank;
    let v = (me + n - root) % n;
    let tag = coll_tag(KIND_BCAST, root as u32, seq);

    let mut mask = 1usize;
    while mask < n {
        if v & mask != 0 {
            let src = (v - mask + root) % n;
            p2p::recv_internal(comm, b, buf, MatchSpec::from_rank(src, tag))?;
            break;
        }
        mask <<= 1;
    }
    mask >>= 1;
    while mask > 0 {
        if v + mask < n {
            let dst = (v + mask + root) % n;
            p2p::send_internal(comm, b, buf, dst, tag, None)?;
        }
        mask >>= 1;
    }
    Ok(())
}

/// Binomial-tree reduction toward `root` (rotated ranks, commutative ops).
#[allow(clippy::too_many_arguments)]
fn reduce_internal(
    comm: &CommInner,
    b: &mut Binding,
    sendbuf: &[u8],
    recvbuf: &mut [u8],
    count: usize,
    op: ReduceOp,
    root: usize,
    seq: u64,
) -> Result<()> {
    let n = comm.table.total();
    let me = b.global_rank;
    let bytes = count * op.elem.size();
    let v = (me + n - root) % n;
    let tag = coll_tag(KIND_REDUCE, root as u32, seq);

    let mut acc = sendbuf.to_vec();
    let mut tmp = vec![0u8; bytes];
    let mut mask = 1usize;
    while mask < n {
        if v & mask == 0 {
            let src_rel = v | mask;
            if src_rel < n {
                let src = (src_rel + root) % n;
                p2p::recv_internal(comm, b, &mut tmp, MatchSpec::from_rank(src, tag))?;
                fold(&mut acc, &tmp, count, op);
            }
        } else {
            let dst = ((v & !mask) + root) % n;
            p2p::send_internal(comm, b, &acc, dst, tag, None)?;
            break;
        }
        mask <<= 1;
    }
    if me == root {
        recvbuf[..bytes].copy_from_slice(&acc);
    }
    Ok(())
}

/// Reduction operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Sum,
    Min,
    Max,
}

/// Element type a reduction operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Int32,
    Int64,
    Float64,
}

impl ElemKind {
    pub fn size(self) -> usize {
        match self {
            ElemKind::Int32 => 4,
            ElemKind::Int64 => 8,
            ElemKind::Float64 => 8,
        }
    }
}

/// An (operator, element type) pair for [`Threadcomm::reduce`] and
/// [`Threadcomm::allreduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReduceOp {
    pub op: OpKind,
    pub elem: ElemKind,
}

impl ReduceOp {
    pub fn new(op: OpKind, elem: ElemKind) -> ReduceOp {
        ReduceOp { op, elem }
    }
}

trait Element: Copy {
    fn combine(a: Self, b: Self, op: OpKind) -> Self;
}

impl Element for i32 {
    fn combine(a: Self, b: Self, op: OpKind) -> Self {
        match op {
            OpKind::Sum => a.wrapping_add(b),
            OpKind::Min => a.min(b),
            OpKind::Max => a.max(b),
        }
    }
}

impl Element for i64 {
    fn combine(a: Self, b: Self, op: OpKind) -> Self {
        match op {
            OpKind::Sum => a.wrapping_add(b),
            OpKind::Min => a.min(b),
            OpKind::Max => a.max(b),
        }
    }
}

impl Element for f64 {
    fn combine(a: Self, b: Self, op: OpKind) -> Self {
        match op {
            OpKind::Sum => a + b,
            OpKind::Min => a.min(b),
            OpKind::Max => a.max(b),
        }
    }
}

fn fold_typed<T: Element>(acc: &mut [u8], inc: &[u8], count: usize, op: OpKind) {
    let sz = std::mem::size_of::<T>();
    debug_assert!(acc.len() >= count * sz && inc.len() >= count * sz);
    for i in 0..count {
        // SAFETY: bounds asserted above; unaligned reads keep the byte
        // buffers free of alignment requirements.
        unsafe {
            let pa = acc.as_mut_ptr().add(i * sz) as *mut T;
            let pb = inc.as_ptr().add(i * sz) as *const T;
            let r = T::combine(ptr::read_unaligned(pa), ptr::read_unaligned(pb), op);
            ptr::write_unaligned(pa, r);
        }
    }
}

fn fold(acc: &mut [u8], inc: &[u8], count: usize, op: ReduceOp) {
    match op.elem {
        ElemKind::Int32 => fold_typed::<i32>(acc, inc, count, op.op),
        ElemKind::Int64 => fold_typed::<i64>(acc, inc, count, op.op),
        ElemKind::Float64 => fold_typed::<f64>(acc, inc, count, op.op),
    }
}

fn validate_root(comm: &CommInner, root: usize) -> Result<()> {
    if root >= comm.table.total() {
        return Err(Error::InvalidArgument(format!(
            "root rank {root} out of range (size {})",
            comm.table.total()
        )));
    }
    Ok(())
}

impl Threadcomm {
    /// Block until every rank of the communicator has entered the barrier.
    pub fn barrier(&self, variant: BarrierVariant) -> Result<()> {
        self.inner.with_binding(|c, b| {
            let seq = b.coll_seq;
            b.coll_seq += 1;
            match variant {
                BarrierVariant::Message => barrier_message(c, b, seq),
                BarrierVariant::Atomic => barrier_atomic(c, b, seq),
            }
        })
    }

    /// Broadcast `buf` from `root` to every rank. All ranks must pass
    /// buffers of the same length.
    pub fn bcast(&self, buf: &mut [u8], root: usize) -> Result<()> {
        self.inner.with_binding(|c, b| {
            validate_root(c, root)?;
            let seq = b.coll_seq;
            b.coll_seq += 1;
            bcast_internal(c, b, buf, root, seq)
        })
    }

    /// Reduce `count` elements from every rank's `sendbuf` into `root`'s
    /// `recvbuf` with `op`. Non-root ranks may pass an empty `recvbuf`.
    pub fn reduce(
        &self,
        sendbuf: &[u8],
        recvbuf: &mut [u8],
        count: usize,
        op: ReduceOp,
        root: usize,
    ) -> Result<()> {
        self.inner.with_binding(|c, b| {
            validate_root(c, root)?;
            let bytes = count * op.elem.size();
            if sendbuf.len() != bytes {
                return Err(Error::InvalidArgument(format!(
                    "reduce sendbuf is {} bytes; count {count} of {:?} needs {bytes}",
                    sendbuf.len(),
                    op.elem
                )));
            }
            if b.global_rank == root && recvbuf.len() < bytes {
                return Err(Error::InvalidArgument(format!(
                    "reduce recvbuf at root is {} bytes; needs {bytes}",
                    recvbuf.len()
                )));
            }
            let seq = b.coll_seq;
            b.coll_seq += 1;
            reduce_internal(c, b, sendbuf, recvbuf, count, op, root, seq)
        })
    }

    /// Reduce to rank 0 and broadcast the result, leaving it in every
    /// rank's `recvbuf`.
    pub fn allreduce(
        &self,
        sendbuf: &[u8],
        recvbuf: &mut [u8],
        count: usize,
        op: ReduceOp,
    ) -> Result<()> {
        self.inner.with_binding(|c, b| {
            let bytes = count * op.elem.size();
            if sendbuf.len() != bytes || recvbuf.len() < bytes {
                return Err(Error::InvalidArgument(format!(
                    "allreduce buffers ({} send / {} recv bytes) do not fit count {count} of {:?}",
                    sendbuf.len(),
                    recvbuf.len(),
                    op.elem
                )));
            }
            let seq = b.coll_seq;
            b.coll_seq += 1;
            reduce_internal(c, b, sendbuf, recvbuf, count, op, 0, seq)?;
            bcast_internal(c, b, &mut recvbuf[..bytes], 0, seq)
        })
    }

    /// Typed wrapper: reduce `i32` elements.
    pub fn reduce_i32(&self, send: &[i32], recv: &mut [i32], op: OpKind, root: usize) -> Result<()> {
        self.reduce(
            as_bytes(send),
            as_bytes_mut(recv),
            send.len(),
            ReduceOp::new(op, ElemKind::Int32),
            root,
        )
    }

    /// Typed wrapper: reduce `i64` elements.
    pub fn reduce_i64(&self, send: &[i64], recv: &mut [i64], op: OpKind, root: usize) -> Result<()> {
        self.reduce(
            as_bytes(send),
            as_bytes_mut(recv),
            send.len(),
            ReduceOp::new(op, ElemKind::Int64),
            root,
        )
    }

    /// Typed wrapper: reduce `f64` elements.
    pub fn reduce_f64(&self, send: &[f64], recv: &mut [f64], op: OpKind, root: usize) -> Result<()> {
        self.reduce(
            as_bytes(send),
            as_bytes_mut(recv),
            send.len(),
            ReduceOp::new(op, ElemKind::Float64),
            root,
        )
    }

    /// Typed wrapper: allreduce `i32` elements.
    pub fn allreduce_i32(&self, send: &[i32], recv: &mut [i32], op: OpKind) -> Result<()> {
        self.allreduce(
            as_bytes(send),
            as_bytes_mut(recv),
            send.len(),
            ReduceOp::new(op, ElemKind::Int32),
        )
    }

    /// Typed wrapper: allreduce `i64` elements.
    pub fn allreduce_i64(&self, send: &[i64], recv: &mut [i64], op: OpKind) -> Result<()> {
        self.allreduce(
            as_bytes(send),
            as_bytes_mut(recv),
            send.len(),
            ReduceOp::new(op, ElemKind::Int64),
        )
    }

    /// Typed wrapper: allreduce `f64` elements.
    pub fn allreduce_f64(&self, send: &[f64], recv: &mut [f64], op: OpKind) -> Result<()> {
        self.allreduce(
            as_bytes(send),
            as_bytes_mut(recv),
            send.len(),
            ReduceOp::new(op, ElemKind::Float64),
        )
    }
}

fn as_bytes<T: Copy>(s: &[T]) -> &[u8] {
    // SAFETY: T is a plain-old-data numeric type in all callers.
    unsafe { std::slice::from_raw_parts(s.as_ptr() as *const u8, std::mem::size_of_val(s)) }
}

fn as_bytes_mut<T: Copy>(s: &mut [T]) -> &mut [u8] {
    // SAFETY: same as as_bytes; all bit patterns are valid for the numeric
    // element types used here.
    unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr() as *mut u8, std::mem::size_of_val(s)) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coll_tags_stay_out_of_user_space_and_disambiguate() {
        let t1 = coll_tag(KIND_BARRIER, 0, 0);
        let t2 = coll_tag(KIND_BARRIER, 1, 0);
        let t3 = coll_tag(KIND_BARRIER, 0, 1);
        let t4 = coll_tag(KIND_BCAST, 0, 0);
        assert!(t1 > crate::p2p::MAX_TAG);
        let all = [t1, t2, t3, t4];
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                assert_eq!(a == b, i == j, "tags must be pairwise distinct");
            }
        }
    }

    #[test]
    fn fold_int_ops() {
        let mut acc = Vec::new();
        acc.extend_from_slice(&1i32.to_ne_bytes());
        acc.extend_from_slice(&(-7i32).to_ne_bytes());
        let mut inc = Vec::new();
        inc.extend_from_slice(&41i32.to_ne_bytes());
        inc.extend_from_slice(&3i32.to_ne_bytes());
        fold(&mut acc, &inc, 2, ReduceOp::new(OpKind::Sum, ElemKind::Int32));
        assert_eq!(i32::from_ne_bytes(acc[0..4].try_into().unwrap()), 42);
        assert_eq!(i32::from_ne_bytes(acc[4..8].try_into().unwrap()), -4);

        fold(&mut acc, &inc, 2, ReduceOp::new(OpKind::Min, ElemKind::Int32));
        assert_eq!(i32::from_ne_bytes(acc[0..4].try_into().unwrap()), 41);
        assert_eq!(i32::from_ne_bytes(acc[4..8].try_into().unwrap()), -4);

        fold(&mut acc, &inc, 2, ReduceOp::new(OpKind::Max, ElemKind::Int32));
        assert_eq!(i32::from_ne_bytes(acc[0..4].try_into().unwrap()), 41);
        assert_eq!(i32::from_ne_bytes(acc[4..8].try_into().unwrap()), 3);
    }

    #[test]
    fn fold_f64_sum() {
        let mut acc = 1.5f64.to_ne_bytes().to_vec();
        let inc = 2.25f64.to_ne_bytes().to_vec();
        fold(&mut acc, &inc, 1, ReduceOp::new(OpKind::Sum, ElemKind::Float64));
        assert_eq!(f64::from_ne_bytes(acc[..].try_into().unwrap()), 3.75);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// The collective tag encoding is reserved (above every user tag)
        /// and bijective over its domain: kind, auxiliary field, and
        /// sequence window all read back out of the packed tag.
        #[test]
        fn coll_tag_reserved_and_bijective(
            kind in 0u32..4,
            aux in 0u32..256,
            seq in 0u64..0x10_0000,
        ) {
            let tag = coll_tag(kind, aux, seq);
            prop_assert!(tag > crate::p2p::MAX_TAG);
            prop_assert_eq!(((tag >> 28) & 0x3) as u32, kind);
            prop_assert_eq!(((tag >> 20) & 0xFF) as u32, aux);
            prop_assert_eq!((tag & 0xF_FFFF) as u64, seq);
        }
    }
}
