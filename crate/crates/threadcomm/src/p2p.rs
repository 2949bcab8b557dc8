//! Point-to-point messaging between ranks.
//!
//! Three delivery paths exist between threads of one process:
//!
//! * **eager** — payload copied into a single pool cell (2 copies total);
//! * **1-copy** — a header cell carries a pointer to the sender's buffer
//!   and a completion flag; the receiver copies once, straight from the
//!   sender's memory, then raises the flag;
//! * **pipeline** — the payload streams through a bounded window of pool
//!   cells (2 copies, but overlapped and without a rendezvous stall).
//!
//! Between processes the payload travels as wire frames (the bridge agent
//! re-materializes them as cells on the receiving side), so 1-copy silently
//! degrades to the chunked path there.
//!
//! All matching state is thread-local: each rank owns a posted-receive list,
//! an unexpected-message list, and the partially assembled pipeline
//! messages addressed to it. A thread only ever touches its *own* inbox, so
//! none of this needs locks.

use std::collections::{HashMap, VecDeque};
use std::marker::PhantomData;
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Weak};

use crate::cell::{Cell, CellKind, Envelope};
use crate::comm::{CommInner, Stats, Threadcomm};
use crate::config::Protocol;
use crate::error::{Error, Result};
use crate::util::SpinWait;

/// Wildcard source for [`MatchSpec`].
pub const ANY_SOURCE: i32 = -1;
/// Wildcard tag for [`MatchSpec`].
pub const ANY_TAG: i32 = -1;
/// Largest user tag. Tags above this bound are reserved for collectives.
pub const MAX_TAG: i32 = (1 << 30) - 1;

/// Receive matching criteria: an exact source rank or [`ANY_SOURCE`], and
/// an exact tag or [`ANY_TAG`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchSpec {
    pub src: i32,
    pub tag: i32,
}

impl MatchSpec {
    pub fn new(src: i32, tag: i32) -> MatchSpec {
        MatchSpec { src, tag }
    }

    /// Match a specific source rank and tag.
    pub fn from_rank(src: usize, tag: i32) -> MatchSpec {
        MatchSpec {
            src: src as i32,
            tag,
        }
    }

    /// Match any source and any tag.
    pub fn any() -> MatchSpec {
        MatchSpec {
            src: ANY_SOURCE,
            tag: ANY_TAG,
        }
    }

    fn matches(&self, env: &Envelope) -> bool {
        (self.src == ANY_SOURCE || self.src == env.src_rank as i32)
            && (self.tag == ANY_TAG || self.tag == env.tag)
    }
}

/// Shared completion state behind an incomplete [`Request`].
pub(crate) struct RequestState {
    /// 0 = pending, 1 = complete. For 1-copy sends the *receiver* raises
    /// this through a raw pointer carried by the header cell.
    done: AtomicU32,
    /// Written by the completing side before `done` is raised (or preset by
    /// the poster for 1-copy sends, whose outcome is fixed at post time).
    result: std::cell::UnsafeCell<Option<Result<Envelope>>>,
}

// SAFETY: `result` is written exactly once before the Release store to
// `done` and read only after an Acquire load observes it set.
unsafe impl Send for RequestState {}
unsafe impl Sync for RequestState {}

impl RequestState {
    fn new() -> Arc<RequestState> {
        Arc::new(RequestState {
            done: AtomicU32::new(0),
            result: std::cell::UnsafeCell::new(None),
        })
    }

    pub(crate) fn is_complete(&self) -> bool {
        self.done.load(Ordering::Acquire) != 0
    }

    fn complete(&self, res: Result<Envelope>) {
        // SAFETY: single completer per request, ordered before the flag.
        unsafe { *self.result.get() = Some(res) };
        self.done.store(1, Ordering::Release);
    }

    /// Preset the outcome without raising the flag (1-copy sends: the
    /// receiver only knows about the flag, not the state).
    fn preset(&self, res: Result<Envelope>) {
        unsafe { *self.result.get() = Some(res) };
    }

    fn done_flag(&self) -> *const AtomicU32 {
        &self.done as *const AtomicU32
    }

    fn take_result(&self) -> Result<Envelope> {
        debug_assert!(self.is_complete());
        // SAFETY: completion ordering established by is_complete().
        unsafe { (*self.result.get()).take() }
            .unwrap_or(Err(Error::InvalidState("request consumed twice".into())))
    }
}

enum ReqState {
    Ready(Option<Result<Envelope>>),
    Shared(Arc<RequestState>),
    Consumed,
}

/// Handle to an in-flight nonblocking operation.
///
/// The request borrows the message buffer, so the buffer cannot be touched
/// or dropped until the request is waited, tested to completion, or
/// dropped (drop blocks until the operation completes). Requests must be
/// completed by the thread that created them: they carry that thread's
/// matching state.
pub struct Request<'buf> {
    comm: Arc<CommInner>,
    state: ReqState,
    /// Ties the request lifetime to the message buffer and keeps the type
    /// !Send/!Sync (completion must happen on the posting thread).
    _buf: PhantomData<(&'buf mut [u8], *const ())>,
}

impl<'buf> Request<'buf> {
    fn ready(comm: Arc<CommInner>, res: Result<Envelope>) -> Request<'buf> {
        Request {
            comm,
            state: ReqState::Ready(Some(res)),
            _buf: PhantomData,
        }
    }

    fn shared(comm: Arc<CommInner>, s: Arc<RequestState>) -> Request<'buf> {
        Request {
            comm,
            state: ReqState::Shared(s),
            _buf: PhantomData,
        }
    }

    /// Block until the operation completes and return its envelope.
    pub fn wait(mut self) -> Result<Envelope> {
        let st = std::mem::replace(&mut self.state, ReqState::Consumed);
        match st {
            ReqState::Ready(Some(res)) => res,
            ReqState::Ready(None) | ReqState::Consumed => {
                Err(Error::InvalidState("request already consumed".into()))
            }
            ReqState::Shared(s) => {
                let comm = Arc::clone(&self.comm);
                comm.with_binding(|c, b| {
                    let mut spin = SpinWait::new(c.config.poll_yield_every);
                    while !s.is_complete() {
                        if progress(c, b) == 0 {
                            spin.idle();
                        } else {
                            spin.reset();
                        }
                    }
                    s.take_result()
                })
            }
        }
    }

    /// Poll for completion: drives progress once, then returns the envelope
    /// if the operation has finished.
    pub fn test(&mut self) -> Result<Option<Envelope>> {
        match &self.state {
            ReqState::Ready(_) => {
                let st = std::mem::replace(&mut self.state, ReqState::Consumed);
                match st {
                    ReqState::Ready(Some(res)) => res.map(Some),
                    _ => unreachable!("guarded by match arm"),
                }
            }
            ReqState::Consumed => Err(Error::InvalidState("request already consumed".into())),
            ReqState::Shared(s) => {
                let s = Arc::clone(s);
                let comm = Arc::clone(&self.comm);
                let outcome = comm.with_binding(|c, b| {
                    progress(c, b);
                    if s.is_complete() {
                        Ok(Some(s.take_result()))
                    } else {
                        Ok(None)
                    }
                })?;
                match outcome {
                    None => Ok(None),
                    Some(res) => {
                        self.state = ReqState::Consumed;
                        res.map(Some)
                    }
                }
            }
        }
    }
}

impl Drop for Request<'_> {
    fn drop(&mut self) {
        if let ReqState::Shared(s) = &self.state {
            if !s.is_complete() {
                // The borrowed buffer is released when this drop returns, so
                // the operation must run to completion first.
                let s = Arc::clone(s);
                let _ = self.comm.with_binding(|c, b| {
                    let mut spin = SpinWait::new(c.config.poll_yield_every);
                    while !s.is_complete() {
                        if progress(c, b) == 0 {
                            spin.idle();
                        } else {
                            spin.reset();
                        }
                    }
                    Ok(())
                });
            }
        }
    }
}

/// A receive posted before its message arrived.
pub(crate) struct PostedRecv {
    spec: MatchSpec,
    buf: *mut u8,
    cap: usize,
    state: Arc<RequestState>,
}

/// Payload of a message that arrived before a matching receive.
pub(crate) enum UnexpData {
    /// Copied out of the cell so the cell could be returned to the pool
    /// immediately (pool cells must never idle in matching lists).
    Eager(Vec<u8>),
    /// Sender is parked on its completion flag; the copy happens at match
    /// time, straight out of the sender's buffer.
    OneCopy {
        src_buf: *const u8,
        done: *const AtomicU32,
    },
    /// Chunks are accumulating in `Binding::assemblies` under this key.
    Pipeline { key: (u32, u64) },
}

pub(crate) struct Unexpected {
    env: Envelope,
    data: UnexpData,
}

enum AsmDest {
    Heap(Vec<u8>),
    User { ptr: *mut u8 },
}

/// A pipelined message being reassembled from chunks.
pub(crate) struct Assembly {
    env: Envelope,
    received: usize,
    chunks_seen: u32,
    chunk_total: u32,
    dest: AsmDest,
    /// Request to complete when the last chunk lands (set when a receive
    /// matched the message mid-stream).
    pending: Option<Arc<RequestState>>,
    /// Consume without storing (receive matched but buffer was too small).
    discard: bool,
}

impl Assembly {
    fn is_complete(&self) -> bool {
        self.chunks_seen == self.chunk_total
    }
}

/// Everything a bound thread tracks between start and finish.
pub(crate) struct Binding {
    pub local_tid: usize,
    pub global_rank: usize,
    /// Generation of the activation window this binding belongs to (odd).
    pub gen: u64,
    /// Next sequence number per destination rank.
    send_seq: Box<[u64]>,
    pub(crate) posted: VecDeque<PostedRecv>,
    unexp: VecDeque<Unexpected>,
    assemblies: HashMap<(u32, u64), Assembly>,
    /// Incomplete 1-copy sends, for the quiescence check at finish.
    pub(crate) live_sends: Vec<Weak<RequestState>>,
    /// Collective call counter; advances in lockstep on every rank.
    pub(crate) coll_seq: u64,
    /// Atomic-barrier episode counter.
    pub(crate) barrier_epoch: u64,
    pub(crate) attrs: HashMap<u32, u64>,
    pub(crate) stats: Stats,
}

impl Binding {
    pub(crate) fn new(comm: &CommInner, local_tid: usize, gen: u64) -> Binding {
        Binding {
            local_tid,
            global_rank: comm.rank_base() + local_tid,
            gen,
            send_seq: vec![0u64; comm.table.total()].into_boxed_slice(),
            posted: VecDeque::new(),
            unexp: VecDeque::new(),
            assemblies: HashMap::new(),
            live_sends: Vec::new(),
            coll_seq: 0,
            barrier_epoch: 0,
            attrs: HashMap::new(),
            stats: Stats::default(),
        }
    }

    fn next_seq(&mut self, dst: usize) -> u64 {
        let s = self.send_seq[dst];
        self.send_seq[dst] = s + 1;
        s
    }
}

/// Returns an error naming whatever would make finish() unsafe: posted
/// receives, attached-but-incomplete receives, or in-flight 1-copy sends.
pub(crate) fn check_quiescent(b: &mut Binding) -> Result<()> {
    if !b.posted.is_empty() {
        return Err(Error::PendingOperations(format!(
            "{} receive(s) still posted",
            b.posted.len()
        )));
    }
    if b.assemblies.values().any(|a| a.pending.is_some()) {
        return Err(Error::PendingOperations(
            "a matched pipelined receive is still assembling".into(),
        ));
    }
    b.live_sends.retain(|w| match w.upgrade() {
        None => false,
        Some(s) => !s.is_complete(),
    });
    if !b.live_sends.is_empty() {
        return Err(Error::PendingOperations(format!(
            "{} send(s) still in flight",
            b.live_sends.len()
        )));
    }
    Ok(())
}

/// Dispose of everything the activation window left behind. Called by
/// finish() after all ranks have deactivated, so no new cells can arrive.
pub(crate) fn drain_at_finish(comm: &CommInner, b: &mut Binding) {
    let slot = &comm.slots[b.local_tid];
    while let Some(cell) = slot.inbox.dequeue() {
        // SAFETY: dequeued cells are exclusively ours.
        let msg = unsafe { cell.as_ref().msg_mut() };
        if msg.kind == CellKind::OneCopyHeader && !msg.src_done.is_null() {
            // Never strand a sender parked on its flag.
            unsafe { (*msg.src_done).store(1, Ordering::Release) };
        }
        comm.pool.release(cell);
    }
    for u in b.unexp.drain(..) {
        if let UnexpData::OneCopy { done, .. } = u.data {
            unsafe { (*done).store(1, Ordering::Release) };
        }
    }
    b.assemblies.clear();
    b.attrs.clear();
}

// ---------------------------------------------------------------------------
// Progress engine
// ---------------------------------------------------------------------------

/// Drain this thread's inbox, dispatching every cell. Returns the number of
/// cells handled.
pub(crate) fn progress(comm: &CommInner, b: &mut Binding) -> usize {
    let mut events = 0usize;
    loop {
        let cell = match comm.slots[b.local_tid].inbox.dequeue() {
            Some(c) => c,
            None => break,
        };
        events += 1;
        handle_cell(comm, b, cell);
    }
    b.stats.progress_events += events as u64;
    events
}

fn envelope_of(msg: &crate::cell::Msg) -> Envelope {
    Envelope {
        src_rank: msg.src_rank as usize,
        tag: msg.tag,
        msg_len: msg.msg_len as usize,
        seq: msg.seq,
    }
}

fn take_posted_match(b: &mut Binding, env: &Envelope) -> Option<PostedRecv> {
    let idx = b.posted.iter().position(|p| p.spec.matches(env))?;
    b.posted.remove(idx)
}

fn handle_cell(comm: &CommInner, b: &mut Binding, cell: NonNull<Cell>) {
    // SAFETY: a dequeued cell is exclusively ours until released.
    let (kind, env) = unsafe {
        let msg = cell.as_ref().msg_mut();
        (msg.kind, envelope_of(msg))
    };
    match kind {
        CellKind::Eager => {
            let payload = unsafe { cell.as_ref().payload() };
            debug_assert_eq!(payload.len(), env.msg_len);
            if let Some(p) = take_posted_match(b, &env) {
                complete_posted_copy(b, &p, env, payload);
            } else {
                // Copy out so the cell goes straight back to the pool; a
                // cell parked in the unexpected list could starve senders.
                let data = payload.to_vec();
                b.unexp.push_back(Unexpected {
                    env,
                    data: UnexpData::Eager(data),
                });
            }
            comm.pool.release(cell);
        }
        CellKind::OneCopyHeader => {
            let (src_buf, done) = unsafe {
                let msg = cell.as_ref().msg_mut();
                (msg.src_buf, msg.src_done)
            };
            comm.pool.release(cell);
            if let Some(p) = take_posted_match(b, &env) {
                complete_posted_onecopy(b, &p, env, src_buf, done);
            } else {
                b.unexp.push_back(Unexpected {
                    env,
                    data: UnexpData::OneCopy { src_buf, done },
                });
            }
        }
        CellKind::PipelineChunk => handle_chunk(comm, b, cell, env),
    }
}

fn complete_posted_copy(b: &mut Binding, p: &PostedRecv, env: Envelope, payload: &[u8]) {
    if env.msg_len > p.cap {
        p.state.complete(Err(Error::Truncation {
            received: env.msg_len,
            capacity: p.cap,
        }));
    } else {
        // SAFETY: the posted buffer outlives its request (borrow held by
        // the Request), and msg_len fits per the check above.
        unsafe { ptr::copy_nonoverlapping(payload.as_ptr(), p.buf, env.msg_len) };
        p.state.complete(Ok(env));
    }
    b.stats.recvs += 1;
}

fn complete_posted_onecopy(
    b: &mut Binding,
    p: &PostedRecv,
    env: Envelope,
    src_buf: *const u8,
    done: *const AtomicU32,
) {
    if env.msg_len > p.cap {
        // The message is consumed and the sender completes normally; only
        // the receiver learns about the truncation.
        unsafe { (*done).store(1, Ordering::Release) };
        p.state.complete(Err(Error::Truncation {
            received: env.msg_len,
            capacity: p.cap,
        }));
    } else {
        // SAFETY: the sender keeps src_buf alive until `done` is raised;
        // the copy therefore precedes the Release store below.
        unsafe {
            ptr::copy_nonoverlapping(src_buf, p.buf, env.msg_len);
            (*done).store(1, Ordering::Release);
        }
        p.state.complete(Ok(env));
    }
    b.stats.recvs += 1;
}

fn handle_chunk(comm: &CommInner, b: &mut Binding, cell: NonNull<Cell>, env: Envelope) {
    let (chunk_index, chunk_total) = unsafe {
        let msg = cell.as_ref().msg_mut();
        (msg.chunk_index, msg.chunk_total)
    };
    let key = (env.src_rank as u32, env.seq);

    if !b.assemblies.contains_key(&key) {
        // Chunks of one message arrive in order (per-producer FIFO inboxes,
        // per-connection FIFO streams), so the first sighting is chunk 0.
        debug_assert_eq!(chunk_index, 0, "pipeline chunks arrived out of order");
        let (dest, pending, discard) = match take_posted_match(b, &env) {
            Some(p) => {
                if env.msg_len > p.cap {
                    p.state.complete(Err(Error::Truncation {
                        received: env.msg_len,
                        capacity: p.cap,
                    }));
                    b.stats.recvs += 1;
                    (AsmDest::Heap(Vec::new()), None, true)
                } else {
                    (AsmDest::User { ptr: p.buf }, Some(p.state), false)
                }
            }
            None => (AsmDest::Heap(vec![0u8; env.msg_len]), None, false),
        };
        if pending.is_none() && !discard {
            b.unexp.push_back(Unexpected {
                env,
                data: UnexpData::Pipeline { key },
            });
        }
        b.assemblies.insert(
            key,
            Assembly {
                env,
                received: 0,
                chunks_seen: 0,
                chunk_total,
                dest,
                pending,
                discard,
            },
        );
    }

    let asm = b.assemblies.get_mut(&key).expect("assembly just ensured");
    debug_assert_eq!(asm.chunks_seen, chunk_index, "chunk sequence broken");
    let payload = unsafe { cell.as_ref().payload() };
    if !asm.discard {
        debug_assert!(asm.received + payload.len() <= asm.env.msg_len);
        match &mut asm.dest {
            AsmDest::Heap(v) => {
                v[asm.received..asm.received + payload.len()].copy_from_slice(payload)
            }
            // SAFETY: the user buffer was size-checked against msg_len when
            // the receive matched, and its borrow is held by the Request.
            AsmDest::User { ptr } => unsafe {
                ptr::copy_nonoverlapping(payload.as_ptr(), ptr.add(asm.received), payload.len())
            },
        }
    }
    asm.received += payload.len();
    asm.chunks_seen += 1;
    comm.pool.release(cell);

    if asm.is_complete() {
        debug_assert_eq!(asm.received, asm.env.msg_len);
        if asm.pending.is_some() || asm.discard {
            let asm = b.assemblies.remove(&key).expect("assembly present");
            if let Some(state) = asm.pending {
                state.complete(Ok(asm.env));
                b.stats.recvs += 1;
            }
            // Discarded assemblies were already counted at match time.
        }
        // Unmatched assemblies stay in the map; the unexpected-list entry
        // owns the key and a future receive consumes them there.
    }
}

// ---------------------------------------------------------------------------
// Send paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SendPath {
    EagerCell,
    Pipeline,
    OneCopy,
}

/// Protocol selection. Mirrored by the conformance harness to predict which
/// counters a given (size, config) combination must bump.
pub(crate) fn select_path(
    comm: &CommInner,
    len: usize,
    is_self: bool,
    force: Option<Protocol>,
) -> SendPath {
    let proto = force.unwrap_or(comm.config.protocol);
    let cell_cap = comm.pool.cell_size();
    let small = |len: usize| {
        if len <= cell_cap {
            SendPath::EagerCell
        } else {
            SendPath::Pipeline
        }
    };
    match proto {
        Protocol::Auto => {
            if len <= comm.config.eager_threshold {
                small(len)
            } else if is_self {
                // A thread cannot rendezvous with itself; stream instead.
                SendPath::Pipeline
            } else {
                SendPath::OneCopy
            }
        }
        Protocol::Eager => small(len),
        Protocol::OneCopy => {
            if is_self {
                // A thread cannot park on its own completion flag; fall
                // back to a buffered path of matching copy count.
                small(len)
            } else {
                SendPath::OneCopy
            }
        }
        Protocol::Pipeline => {
            if len <= comm.config.eager_threshold {
                small(len)
            } else {
                SendPath::Pipeline
            }
        }
    }
}

fn acquire_cell(comm: &CommInner, b: &mut Binding, dst_tid: usize) -> NonNull<Cell> {
    let mut spin = SpinWait::new(comm.config.poll_yield_every);
    loop {
        if let Some(c) = comm.pool.acquire(dst_tid) {
            return c;
        }
        // Keep draining our own inbox while the destination's pool refills;
        // this is what makes send cycles deadlock-free under exhaustion.
        if progress(comm, b) == 0 {
            spin.idle();
        } else {
            spin.reset();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fill_cell(
    cell: NonNull<Cell>,
    kind: CellKind,
    src_rank: usize,
    tag: i32,
    msg_len: usize,
    seq: u64,
    chunk_index: u32,
    chunk_total: u32,
    payload: &[u8],
) {
    // SAFETY: the cell was just acquired and is exclusively ours until
    // enqueue publishes it.
    unsafe {
        let c = cell.as_ref();
        let msg = c.msg_mut();
        msg.kind = kind;
        msg.src_rank = src_rank as u32;
        msg.tag = tag;
        msg.msg_len = msg_len as u64;
        msg.seq = seq;
        msg.chunk_index = chunk_index;
        msg.chunk_total = chunk_total;
        msg.src_buf = ptr::null();
        msg.src_done = ptr::null();
        msg.payload_len = payload.len();
        c.write_payload(payload);
    }
}

fn send_eager_cell(
    comm: &CommInner,
    b: &mut Binding,
    buf: &[u8],
    dst_tid: usize,
    tag: i32,
    seq: u64,
) {
    let cell = acquire_cell(comm, b, dst_tid);
    fill_cell(
        cell,
        CellKind::Eager,
        b.global_rank,
        tag,
        buf.len(),
        seq,
        0,
        1,
        buf,
    );
    comm.slots[dst_tid].inbox.enqueue(cell);
    b.stats.sends += 1;
    b.stats.eager_sends += 1;
}

fn send_chunks(comm: &CommInner, b: &mut Binding, buf: &[u8], dst_tid: usize, tag: i32, seq: u64) {
    let cap = comm.pool.cell_size();
    let total = buf.len().div_ceil(cap).max(1) as u32;
    // Chunks are evenly sized (last one may be short) so receivers can
    // derive boundaries from (msg_len, chunk_total) alone — the same rule
    // the wire format uses.
    let stride = crate::bridge::wire::chunk_stride(buf.len(), total);
    for (i, chunk) in buf.chunks(stride).enumerate() {
        let cell = acquire_cell(comm, b, dst_tid);
        fill_cell(
            cell,
            CellKind::PipelineChunk,
            b.global_rank,
            tag,
            buf.len(),
            seq,
            i as u32,
            total,
            chunk,
        );
        comm.slots[dst_tid].inbox.enqueue(cell);
    }
    b.stats.sends += 1;
    b.stats.pipeline_sends += 1;
}

/// Publish a 1-copy header pointing at (`buf`, `done`) to `dst_tid`.
fn post_onecopy_header(
    comm: &CommInner,
    b: &mut Binding,
    buf: &[u8],
    dst_tid: usize,
    tag: i32,
    seq: u64,
    done: *const AtomicU32,
) {
    let cell = acquire_cell(comm, b, dst_tid);
    fill_cell(
        cell,
        CellKind::OneCopyHeader,
        b.global_rank,
        tag,
        buf.len(),
        seq,
        0,
        1,
        &[],
    );
    // SAFETY: cell still exclusively ours until the enqueue below.
    unsafe {
        let msg = cell.as_ref().msg_mut();
        msg.src_buf = buf.as_ptr();
        msg.src_done = done;
    }
    comm.slots[dst_tid].inbox.enqueue(cell);
    b.stats.sends += 1;
    b.stats.onecopy_sends += 1;
}

fn wait_flag(comm: &CommInner, b: &mut Binding, done: &AtomicU32) {
    let mut spin = SpinWait::new(comm.config.poll_yield_every);
    while done.load(Ordering::Acquire) == 0 {
        if progress(comm, b) == 0 {
            spin.idle();
        } else {
            spin.reset();
        }
    }
}

/// Blocking send, all protocol paths.
pub(crate) fn send_internal(
    comm: &CommInner,
    b: &mut Binding,
    buf: &[u8],
    dst: usize,
    tag: i32,
    force: Option<Protocol>,
) -> Result<()> {
    let seq = b.next_seq(dst);
    let (proc_idx, dst_tid) = comm.table.route(dst);
    if proc_idx != comm.proc_rank {
        return crate::bridge::wire_send_msg(comm, b, buf, dst, tag, seq, force);
    }
    match select_path(comm, buf.len(), dst == b.global_rank, force) {
        SendPath::EagerCell => send_eager_cell(comm, b, buf, dst_tid, tag, seq),
        SendPath::Pipeline => send_chunks(comm, b, buf, dst_tid, tag, seq),
        SendPath::OneCopy => {
            let done = AtomicU32::new(0);
            post_onecopy_header(comm, b, buf, dst_tid, tag, seq, &done as *const AtomicU32);
            // `buf` and `done` stay valid for the receiver because we do
            // not return until the flag is raised.
            wait_flag(comm, b, &done);
        }
    }
    Ok(())
}

pub(crate) enum ReqOutcome {
    Ready(Result<Envelope>),
    Shared(Arc<RequestState>),
}

/// Nonblocking send. Buffered paths complete immediately; the 1-copy path
/// returns a pending request completed by the receiver.
pub(crate) fn isend_internal(
    comm: &CommInner,
    b: &mut Binding,
    buf: &[u8],
    dst: usize,
    tag: i32,
    force: Option<Protocol>,
) -> Result<ReqOutcome> {
    let env = Envelope {
        src_rank: b.global_rank,
        tag,
        msg_len: buf.len(),
        seq: b.send_seq[dst],
    };
    let (proc_idx, dst_tid) = comm.table.route(dst);
    if proc_idx != comm.proc_rank || !matches!(
        select_path(comm, buf.len(), dst == b.global_rank, force),
        SendPath::OneCopy
    ) {
        send_internal(comm, b, buf, dst, tag, force)?;
        return Ok(ReqOutcome::Ready(Ok(env)));
    }

    let seq = b.next_seq(dst);
    let state = RequestState::new();
    // The send's outcome is fixed now; the receiver just raises the flag.
    state.preset(Ok(env));
    post_onecopy_header(comm, b, buf, dst_tid, tag, seq, state.done_flag());
    if b.live_sends.len() >= 32 {
        b.live_sends.retain(|w| match w.upgrade() {
            None => false,
            Some(s) => !s.is_complete(),
        });
    }
    b.live_sends.push(Arc::downgrade(&state));
    Ok(ReqOutcome::Shared(state))
}

// ---------------------------------------------------------------------------
// Receive paths
// ---------------------------------------------------------------------------

fn find_unexp(b: &Binding, spec: &MatchSpec) -> Option<usize> {
    b.unexp.iter().position(|u| spec.matches(&u.env))
}

/// Pull one matched message out of the unexpected list into `buf`.
fn consume_unexpected(
    comm: &CommInner,
    b: &mut Binding,
    idx: usize,
    buf: *mut u8,
    cap: usize,
) -> Result<Envelope> {
    let u = b.unexp.remove(idx).expect("index from find_unexp");
    let env = u.env;
    match u.data {
        UnexpData::Eager(data) => {
            b.stats.recvs += 1;
            if env.msg_len > cap {
                return Err(Error::Truncation {
                    received: env.msg_len,
                    capacity: cap,
                });
            }
            // SAFETY: cap checked; caller guarantees buf points at cap bytes.
            unsafe { ptr::copy_nonoverlapping(data.as_ptr(), buf, env.msg_len) };
            Ok(env)
        }
        UnexpData::OneCopy { src_buf, done } => {
            b.stats.recvs += 1;
            if env.msg_len > cap {
                unsafe { (*done).store(1, Ordering::Release) };
                return Err(Error::Truncation {
                    received: env.msg_len,
                    capacity: cap,
                });
            }
            // SAFETY: sender keeps src_buf alive until the flag is raised.
            unsafe {
                ptr::copy_nonoverlapping(src_buf, buf, env.msg_len);
                (*done).store(1, Ordering::Release);
            }
            Ok(env)
        }
        UnexpData::Pipeline { key } => {
            // Chunks may still be streaming in; drive progress until the
            // assembly closes.
            let mut spin = SpinWait::new(comm.config.poll_yield_every);
            loop {
                let complete = b
                    .assemblies
                    .get(&key)
                    .expect("unexpected entry owns a live assembly")
                    .is_complete();
                if complete {
                    break;
                }
                if progress(comm, b) == 0 {
                    spin.idle();
                } else {
                    spin.reset();
                }
            }
            let asm = b.assemblies.remove(&key).expect("assembly present");
            b.stats.recvs += 1;
            if env.msg_len > cap {
                return Err(Error::Truncation {
                    received: env.msg_len,
                    capacity: cap,
                });
            }
            match asm.dest {
                AsmDest::Heap(data) => {
                    // SAFETY: cap checked above.
                    unsafe { ptr::copy_nonoverlapping(data.as_ptr(), buf, env.msg_len) };
                }
                AsmDest::User { .. } => unreachable!("unmatched assemblies are heap-backed"),
            }
            Ok(env)
        }
    }
}

/// Blocking receive.
pub(crate) fn recv_internal(
    comm: &CommInner,
    b: &mut Binding,
    buf: &mut [u8],
    spec: MatchSpec,
) -> Result<Envelope> {
    let mut spin = SpinWait::new(comm.config.poll_yield_every);
    loop {
        if let Some(idx) = find_unexp(b, &spec) {
            return consume_unexpected(comm, b, idx, buf.as_mut_ptr(), buf.len());
        }
        if progress(comm, b) == 0 {
            spin.idle();
        } else {
            spin.reset();
        }
    }
}

/// Nonblocking receive.
pub(crate) fn irecv_internal(
    comm: &CommInner,
    b: &mut Binding,
    buf: *mut u8,
    cap: usize,
    spec: MatchSpec,
) -> Result<ReqOutcome> {
    if let Some(idx) = find_unexp(b, &spec) {
        // For everything already complete, resolve on the spot. An
        // assembling pipeline message gets the user buffer attached so the
        // remaining chunks land directly in place.
        let is_streaming = matches!(
            b.unexp[idx].data,
            UnexpData::Pipeline { key } if !b.assemblies[&key].is_complete()
        );
        if !is_streaming {
            return Ok(ReqOutcome::Ready(consume_unexpected(comm, b, idx, buf, cap)));
        }
        let u = b.unexp.remove(idx).expect("index valid");
        let key = match u.data {
            UnexpData::Pipeline { key } => key,
            _ => unreachable!("guarded above"),
        };
        let asm = b.assemblies.get_mut(&key).expect("assembly present");
        if u.env.msg_len > cap {
            asm.discard = true;
            asm.dest = AsmDest::Heap(Vec::new());
            b.stats.recvs += 1;
            return Ok(ReqOutcome::Ready(Err(Error::Truncation {
                received: u.env.msg_len,
                capacity: cap,
            })));
        }
        let state = RequestState::new();
        match &asm.dest {
            AsmDest::Heap(data) => {
                // SAFETY: cap checked; the borrow of the user buffer is
                // held by the Request for the rest of the assembly.
                unsafe { ptr::copy_nonoverlapping(data.as_ptr(), buf, asm.received) };
            }
            AsmDest::User { .. } => unreachable!("unmatched assemblies are heap-backed"),
        }
        asm.dest = AsmDest::User { ptr: buf };
        asm.pending = Some(Arc::clone(&state));
        return Ok(ReqOutcome::Shared(state));
    }

    let state = RequestState::new();
    b.posted.push_back(PostedRecv {
        spec,
        buf,
        cap,
        state: Arc::clone(&state),
    });
    Ok(ReqOutcome::Shared(state))
}

// ---------------------------------------------------------------------------
// Public API surface
// ---------------------------------------------------------------------------

fn validate_dst(comm: &CommInner, dst: usize, tag: i32) -> Result<()> {
    if dst >= comm.table.total() {
        return Err(Error::InvalidArgument(format!(
            "destination rank {dst} out of range (size {})",
            comm.table.total()
        )));
    }
    if !(0..=MAX_TAG).contains(&tag) {
        return Err(Error::InvalidArgument(format!(
            "tag {tag} out of range [0, {MAX_TAG}]"
        )));
    }
    Ok(())
}

fn validate_spec(comm: &CommInner, spec: &MatchSpec) -> Result<()> {
    if spec.src != ANY_SOURCE && !(0..comm.table.total() as i32).contains(&spec.src) {
        return Err(Error::InvalidArgument(format!(
            "source rank {} out of range (size {})",
            spec.src,
            comm.table.total()
        )));
    }
    if spec.tag != ANY_TAG && !(0..=MAX_TAG).contains(&spec.tag) {
        return Err(Error::InvalidArgument(format!(
            "tag {} out of range [0, {MAX_TAG}]",
            spec.tag
        )));
    }
    Ok(())
}

impl Threadcomm {
    /// Blocking send of `buf` to rank `dst` with `tag`.
    ///
    /// The protocol is chosen by the communicator's [`Protocol`] policy;
    /// the call returns once `buf` may be reused (for the 1-copy path this
    /// means the receiver has copied it out).
    pub fn send(&self, buf: &[u8], dst: usize, tag: i32) -> Result<()> {
        self.inner.with_binding(|c, b| {
            validate_dst(c, dst, tag)?;
            send_internal(c, b, buf, dst, tag, None)
        })
    }

    /// Blocking send that always streams through pool cells, regardless of
    /// the configured protocol policy.
    pub fn send_pipelined(&self, buf: &[u8], dst: usize, tag: i32) -> Result<()> {
        self.inner.with_binding(|c, b| {
            validate_dst(c, dst, tag)?;
            send_internal(c, b, buf, dst, tag, Some(Protocol::Pipeline))
        })
    }

    /// Blocking receive into `buf` of the oldest message matching `spec`.
    ///
    /// An over-long message is consumed (and its sender completes) but the
    /// call reports [`Error::Truncation`].
    pub fn recv(&self, buf: &mut [u8], spec: MatchSpec) -> Result<Envelope> {
        self.inner.with_binding(|c, b| {
            validate_spec(c, &spec)?;
            recv_internal(c, b, buf, spec)
        })
    }

    /// Nonblocking send. The returned request borrows `buf` until it
    /// completes.
    pub fn isend<'b>(&self, buf: &'b [u8], dst: usize, tag: i32) -> Result<Request<'b>> {
        let outcome = self.inner.with_binding(|c, b| {
            validate_dst(c, dst, tag)?;
            isend_internal(c, b, buf, dst, tag, None)
        })?;
        Ok(match outcome {
            ReqOutcome::Ready(res) => Request::ready(Arc::clone(&self.inner), res),
            ReqOutcome::Shared(s) => Request::shared(Arc::clone(&self.inner), s),
        })
    }

    /// Nonblocking receive. The returned request borrows `buf` until it
    /// completes.
    pub fn irecv<'b>(&self, buf: &'b mut [u8], spec: MatchSpec) -> Result<Request<'b>> {
        let (ptr, cap) = (buf.as_mut_ptr(), buf.len());
        let outcome = self.inner.with_binding(|c, b| {
            validate_spec(c, &spec)?;
            irecv_internal(c, b, ptr, cap, spec)
        })?;
        Ok(match outcome {
            ReqOutcome::Ready(res) => Request::ready(Arc::clone(&self.inner), res),
            ReqOutcome::Shared(s) => Request::shared(Arc::clone(&self.inner), s),
        })
    }

    /// Drain this thread's inbox once; returns the number of messages,
    /// chunks, and headers processed. Useful for keeping progress flowing
    /// inside compute loops with outstanding requests.
    pub fn progress_poll(&self) -> Result<usize> {
        self.inner.with_binding(|c, b| Ok(progress(c, b)))
    }

    /// The path a send of `len` bytes to `dst` would take right now, under
    /// the communicator's protocol policy. The conformance harness uses
    /// this to predict the [`Stats`] counters independently of the send
    /// machinery itself.
    pub(crate) fn predict_send_path(&self, len: usize, dst: usize) -> Result<SendPath> {
        self.inner.with_binding(|c, b| {
            let (proc_idx, _) = c.table.route(dst);
            let mut path = select_path(c, len, dst == b.global_rank, None);
            if proc_idx != c.proc_rank {
                // Remote delivery degrades 1-copy; mirror wire_send_msg.
                path = match path {
                    SendPath::OneCopy if len <= c.pool.cell_size() => SendPath::EagerCell,
                    SendPath::OneCopy => SendPath::Pipeline,
                    p => p,
                };
            }
            Ok(path)
        })
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::{Config, ProcGroup, Threadcomm};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Path selection invariants, for arbitrary sizes, thresholds, and
        /// policies: the threshold splits Auto into eager-vs-rendezvous;
        /// a self-send never takes the 1-copy path (a thread cannot park on
        /// its own completion flag); forced eager/pipeline never take it
        /// either; and anything over the cell capacity that is not 1-copy
        /// must stream in chunks.
        #[test]
        fn select_path_respects_policy_and_self_sends(
            len in 0usize..(1 << 23),
            threshold in prop::sample::select(vec![0usize, 1, 4095, 4096, 4097, 65_536]),
            cell_size in prop::sample::select(vec![256usize, 4096, 8192]),
            is_self in any::<bool>(),
            policy in prop::sample::select(vec![
                Protocol::Auto,
                Protocol::Eager,
                Protocol::OneCopy,
                Protocol::Pipeline,
            ]),
            forced in any::<bool>(),
        ) {
            let mut cfg = Config::default();
            cfg.eager_threshold = threshold;
            cfg.cell_size = cell_size;
            cfg.cells_per_rank = 4;
            // The policy under test goes either into the config or into the
            // per-call override; both routes must agree.
            cfg.protocol = if forced { Protocol::Auto } else { policy };
            let force = if forced { Some(policy) } else { None };
            let comm = Threadcomm::init_with_config(&ProcGroup::single(), 1, cfg).unwrap();
            let cap = comm.inner.pool.cell_size();

            let path = select_path(&comm.inner, len, is_self, force);

            if is_self {
                prop_assert_ne!(path, SendPath::OneCopy);
            }
            match policy {
                Protocol::Auto => {
                    if len <= threshold {
                        prop_assert_eq!(
                            path,
                            if len <= cap { SendPath::EagerCell } else { SendPath::Pipeline }
                        );
                    } else if is_self {
                        prop_assert_eq!(path, SendPath::Pipeline);
                    } else {
                        prop_assert_eq!(path, SendPath::OneCopy);
                    }
                }
                Protocol::Eager => {
                    prop_assert_eq!(
                        path,
                        if len <= cap { SendPath::EagerCell } else { SendPath::Pipeline }
                    );
                }
                Protocol::OneCopy => {
                    if !is_self {
                        prop_assert_eq!(path, SendPath::OneCopy);
                    }
                }
                Protocol::Pipeline => {
                    prop_assert_ne!(path, SendPath::OneCopy);
                }
            }
            if path == SendPath::EagerCell {
                prop_assert!(len <= cap, "an eager cell cannot hold {len} bytes");
            }
            comm.free().unwrap();
        }
    }
}
