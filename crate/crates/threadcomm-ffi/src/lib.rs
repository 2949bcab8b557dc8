//! C ABI for the thread communicator.
//!
//! Every entry point returns a `tc_error_t` status code; results travel
//! through out-parameters. Communicators are opaque handles created by
//! [`tc_comm_create`] and released by [`tc_comm_free`]. The matching C
//! declarations live in `include/threadcomm.h`.
//!
//! Thread-safety follows the core library: a handle may be shared across
//! threads, each thread binds itself to a rank with [`tc_start`] /
//! [`tc_finish`], and communication calls are only legal between the two.
//! A failing call stores a thread-local description retrievable with
//! [`tc_last_error`]. Panics never unwind across the boundary; they are
//! reported as `TC_ERR_PANIC`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void};
use std::panic::{catch_unwind, AssertUnwindSafe};

use threadcomm::{
    BarrierVariant, Config, ElemKind, Error, MatchSpec, OpKind, ProcGroup, Protocol, ReduceOp,
    Threadcomm,
};

// ---------------------------------------------------------------------------
// Status codes and wire-able enums
// ---------------------------------------------------------------------------

pub const TC_OK: c_int = 0;
pub const TC_ERR_INVALID_ARGUMENT: c_int = 1;
pub const TC_ERR_INVALID_STATE: c_int = 2;
pub const TC_ERR_INVALID_HANDLE: c_int = 3;
pub const TC_ERR_TOO_MANY_THREADS: c_int = 4;
pub const TC_ERR_PENDING_OPERATIONS: c_int = 5;
pub const TC_ERR_TRUNCATION: c_int = 6;
pub const TC_ERR_TRANSPORT: c_int = 7;
pub const TC_ERR_PROTOCOL: c_int = 8;
pub const TC_ERR_PANIC: c_int = 9;

/// Wildcards accepted by [`tc_recv`] (match the core library's values).
pub const TC_ANY_SOURCE: c_int = -1;
pub const TC_ANY_TAG: c_int = -1;

// Protocol policies for `tc_config.protocol`.
pub const TC_PROTO_AUTO: c_int = 0;
pub const TC_PROTO_EAGER: c_int = 1;
pub const TC_PROTO_ONECOPY: c_int = 2;
pub const TC_PROTO_PIPELINE: c_int = 3;

// Barrier variants for `tc_barrier`.
pub const TC_BARRIER_MESSAGE: c_int = 0;
pub const TC_BARRIER_ATOMIC: c_int = 1;

// Reduction operators.
pub const TC_OP_SUM: c_int = 0;
pub const TC_OP_MIN: c_int = 1;
pub const TC_OP_MAX: c_int = 2;

// Element types.
pub const TC_ELEM_INT32: c_int = 0;
pub const TC_ELEM_INT64: c_int = 1;
pub const TC_ELEM_FLOAT64: c_int = 2;

/// Opaque communicator handle.
#[repr(C)]
pub struct tc_comm {
    _opaque: [u8; 0],
}

/// Tuning knobs accepted by [`tc_comm_create_with_config`]. Zero means
/// "library default" for every field except `protocol`, where 0 selects
/// the automatic policy.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct tc_config {
    /// Largest payload (bytes) sent eagerly under the automatic policy.
    pub eager_threshold: usize,
    /// Payload capacity (bytes) of one transport cell.
    pub cell_size: usize,
    /// Transport cells reserved per receiving thread.
    pub cells_per_rank: usize,
    /// One of the `TC_PROTO_*` policies.
    pub protocol: c_int,
}

/// Delivery record filled in by [`tc_recv`].
#[repr(C)]
#[derive(Clone, Copy)]
pub struct tc_envelope {
    /// Global rank the message came from.
    pub src_rank: c_int,
    /// Tag the message was sent with.
    pub tag: c_int,
    /// Payload length in bytes (may be shorter than the receive buffer).
    pub len: usize,
}

/// Per-thread counters filled in by [`tc_comm_stats`].
#[repr(C)]
#[derive(Clone, Copy)]
pub struct tc_stats {
    pub sends: u64,
    pub recvs: u64,
    pub eager_sends: u64,
    pub onecopy_sends: u64,
    pub pipeline_sends: u64,
    pub progress_events: u64,
}

// ---------------------------------------------------------------------------
// Error plumbing
// ---------------------------------------------------------------------------

thread_local! {
    /// Description of this thread's most recent failure, NUL-terminated.
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn record_error(code: c_int, msg: &str) -> c_int {
    LAST_ERROR.with(|slot| {
        let mut v = slot.borrow_mut();
        v.clear();
        // NUL bytes inside the message would truncate it on the C side.
        v.extend(msg.bytes().map(|b| if b == 0 { b' ' } else { b }));
        v.push(0);
    });
    code
}

fn code_of(e: &Error) -> c_int {
    match e {
        Error::InvalidArgument(_) => TC_ERR_INVALID_ARGUMENT,
        Error::InvalidState(_) => TC_ERR_INVALID_STATE,
        Error::InvalidHandle => TC_ERR_INVALID_HANDLE,
        Error::TooManyThreads { .. } => TC_ERR_TOO_MANY_THREADS,
        Error::PendingOperations(_) => TC_ERR_PENDING_OPERATIONS,
        Error::Truncation { .. } => TC_ERR_TRUNCATION,
        Error::Transport(_) => TC_ERR_TRANSPORT,
        Error::Protocol(_) => TC_ERR_PROTOCOL,
    }
}

fn fail(e: Error) -> c_int {
    record_error(code_of(&e), &e.to_string())
}

/// Run `f` behind the unwind boundary and fold its result to a status.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TC_OK,
        Ok(Err(e)) => fail(e),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in library call".into());
            record_error(TC_ERR_PANIC, &msg)
        }
    }
}

fn invalid(msg: &str) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Borrow the communicator behind a handle.
///
/// # Safety
/// `h` must be a pointer returned by `tc_comm_create*` that has not been
/// passed to a successful `tc_comm_free`.
unsafe fn comm_ref<'a>(h: *mut tc_comm) -> Result<&'a Threadcomm, Error> {
    if h.is_null() {
        return Err(Error::InvalidHandle);
    }
    Ok(&*(h as *const Threadcomm))
}

fn protocol_of(v: c_int) -> Result<Protocol, Error> {
    match v {
        TC_PROTO_AUTO => Ok(Protocol::Auto),
        TC_PROTO_EAGER => Ok(Protocol::Eager),
        TC_PROTO_ONECOPY => Ok(Protocol::OneCopy),
        TC_PROTO_PIPELINE => Ok(Protocol::Pipeline),
        other => Err(invalid(&format!("unknown protocol policy {other}"))),
    }
}

fn op_of(v: c_int) -> Result<OpKind, Error> {
    match v {
        TC_OP_SUM => Ok(OpKind::Sum),
        TC_OP_MIN => Ok(OpKind::Min),
        TC_OP_MAX => Ok(OpKind::Max),
        other => Err(invalid(&format!("unknown reduction operator {other}"))),
    }
}

fn elem_of(v: c_int) -> Result<ElemKind, Error> {
    match v {
        TC_ELEM_INT32 => Ok(ElemKind::Int32),
        TC_ELEM_INT64 => Ok(ElemKind::Int64),
        TC_ELEM_FLOAT64 => Ok(ElemKind::Float64),
        other => Err(invalid(&format!("unknown element type {other}"))),
    }
}

fn rank_arg(v: c_int, what: &str) -> Result<usize, Error> {
    usize::try_from(v).map_err(|_| invalid(&format!("{what} rank {v} is negative")))
}

// ---------------------------------------------------------------------------
// Lifecycle
// ---------------------------------------------------------------------------

/// Copy this thread's most recent error description into `buf` (always
/// NUL-terminated when `cap > 0`). Returns the full length including the
/// terminator, so callers can detect truncation.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn tc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let v = slot.borrow();
        let needed = v.len();
        if !buf.is_null() && cap > 0 {
            let n = needed.min(cap);
            std::ptr::copy_nonoverlapping(v.as_ptr() as *const c_char, buf, n);
            // Guarantee termination even when the message was cut short.
            *buf.add(n.max(1) - 1) = 0;
        }
        needed
    })
}

/// Short static description of a status code (never null).
#[no_mangle]
pub extern "C" fn tc_error_name(code: c_int) -> *const c_char {
    let s: &'static [u8] = match code {
        TC_OK => b"ok\0",
        TC_ERR_INVALID_ARGUMENT => b"invalid argument\0",
        TC_ERR_INVALID_STATE => b"invalid state\0",
        TC_ERR_INVALID_HANDLE => b"invalid handle\0",
        TC_ERR_TOO_MANY_THREADS => b"too many threads\0",
        TC_ERR_PENDING_OPERATIONS => b"pending operations\0",
        TC_ERR_TRUNCATION => b"message truncated\0",
        TC_ERR_TRANSPORT => b"transport error\0",
        TC_ERR_PROTOCOL => b"protocol error\0",
        TC_ERR_PANIC => b"panic in library call\0",
        _ => b"unknown status\0",
    };
    s.as_ptr() as *const c_char
}

/// Fill `out` with the library's default configuration.
///
/// # Safety
/// `out` must point to a writable `tc_config`.
#[no_mangle]
pub unsafe extern "C" fn tc_config_default(out: *mut tc_config) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(invalid("tc_config_default: out is null"));
        }
        let d = Config::default();
        *out = tc_config {
            eager_threshold: d.eager_threshold,
            cell_size: d.cell_size,
            cells_per_rank: d.cells_per_rank,
            protocol: TC_PROTO_AUTO,
        };
        Ok(())
    })
}

/// Create a communicator for `nthreads` threads of this process. Under the
/// multi-process launcher this joins the processes named by the launcher
/// environment; standalone it spans just this process. Collective across
/// processes.
///
/// # Safety
/// `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn tc_comm_create(nthreads: usize, out: *mut *mut tc_comm) -> c_int {
    tc_comm_create_with_config(nthreads, std::ptr::null(), out)
}

/// [`tc_comm_create`] with explicit tuning. `cfg` may be null for defaults.
///
/// # Safety
/// `cfg` must be null or point to a readable `tc_config`; `out` must point
/// to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn tc_comm_create_with_config(
    nthreads: usize,
    cfg: *const tc_config,
    out: *mut *mut tc_comm,
) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(invalid("tc_comm_create: out is null"));
        }
        *out = std::ptr::null_mut();
        let group = ProcGroup::from_env()?;
        let mut config = Config::default();
        if !cfg.is_null() {
            let c = *cfg;
            if c.eager_threshold != 0 {
                config.eager_threshold = c.eager_threshold;
            }
            if c.cell_size != 0 {
                config.cell_size = c.cell_size;
            }
            if c.cells_per_rank != 0 {
                config.cells_per_rank = c.cells_per_rank;
            }
            config.protocol = protocol_of(c.protocol)?;
        }
        let comm = Threadcomm::init_with_config(&group, nthreads, config)?;
        *out = Box::into_raw(Box::new(comm)) as *mut tc_comm;
        Ok(())
    })
}

/// Release a communicator. Collective across processes. On `TC_OK` the
/// handle is invalid; on error (for example, a window is still active) the
/// handle remains usable.
///
/// # Safety
/// `h` must be a live handle from `tc_comm_create*`.
#[no_mangle]
pub unsafe extern "C" fn tc_comm_free(h: *mut tc_comm) -> c_int {
    guard(|| {
        comm_ref(h)?.free()?;
        drop(Box::from_raw(h as *mut Threadcomm));
        Ok(())
    })
}

/// Enter an activation window: assigns this thread a rank. Collective over
/// all threads of the communicator.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_start(h: *mut tc_comm) -> c_int {
    guard(|| comm_ref(h)?.start())
}

/// Leave the activation window. Collective; fails while this thread still
/// has unfinished requests.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_finish(h: *mut tc_comm) -> c_int {
    guard(|| comm_ref(h)?.finish())
}

/// This thread's rank within the current activation window.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tc_comm_rank(h: *mut tc_comm, out: *mut c_int) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(invalid("tc_comm_rank: out is null"));
        }
        *out = comm_ref(h)?.comm_rank()? as c_int;
        Ok(())
    })
}

/// Total ranks (threads × processes) of the communicator.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tc_comm_size(h: *mut tc_comm, out: *mut c_int) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(invalid("tc_comm_size: out is null"));
        }
        *out = comm_ref(h)?.comm_size()? as c_int;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Point-to-point
// ---------------------------------------------------------------------------

/// Blocking send of `len` bytes to global rank `dst` with `tag`.
///
/// # Safety
/// `h` must be a live handle; `buf` must point to `len` readable bytes
/// (null is allowed when `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn tc_send(
    h: *mut tc_comm,
    buf: *const c_void,
    len: usize,
    dst: c_int,
    tag: c_int,
) -> c_int {
    guard(|| {
        if buf.is_null() && len != 0 {
            return Err(invalid("tc_send: buf is null"));
        }
        let data = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(buf as *const u8, len)
        };
        comm_ref(h)?.send(data, rank_arg(dst, "destination")?, tag)
    })
}

/// Blocking receive into `buf` (capacity `cap`) matching `src` and `tag`,
/// each either exact or the `TC_ANY_*` wildcard. On success `env`, if
/// non-null, reports the actual source, tag, and length.
///
/// # Safety
/// `h` must be a live handle; `buf` must point to `cap` writable bytes
/// (null allowed when `cap == 0`); `env` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn tc_recv(
    h: *mut tc_comm,
    buf: *mut c_void,
    cap: usize,
    src: c_int,
    tag: c_int,
    env: *mut tc_envelope,
) -> c_int {
    guard(|| {
        if buf.is_null() && cap != 0 {
            return Err(invalid("tc_recv: buf is null"));
        }
        let data = if cap == 0 {
            &mut [][..]
        } else {
            std::slice::from_raw_parts_mut(buf as *mut u8, cap)
        };
        let e = comm_ref(h)?.recv(data, MatchSpec::new(src, tag))?;
        if !env.is_null() {
            *env = tc_envelope {
                src_rank: e.src_rank as c_int,
                tag: e.tag,
                len: e.msg_len,
            };
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Collectives
// ---------------------------------------------------------------------------

/// Barrier over all ranks; `variant` is one of the `TC_BARRIER_*` values.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_barrier(h: *mut tc_comm, variant: c_int) -> c_int {
    guard(|| {
        let v = match variant {
            TC_BARRIER_MESSAGE => BarrierVariant::Message,
            TC_BARRIER_ATOMIC => BarrierVariant::Atomic,
            other => return Err(invalid(&format!("unknown barrier variant {other}"))),
        };
        comm_ref(h)?.barrier(v)
    })
}

/// Broadcast `len` bytes from `root` to every rank. All ranks must pass
/// the same `len`.
///
/// # Safety
/// `h` must be a live handle; `buf` must point to `len` read/writable
/// bytes (null allowed when `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn tc_bcast(
    h: *mut tc_comm,
    buf: *mut c_void,
    len: usize,
    root: c_int,
) -> c_int {
    guard(|| {
        if buf.is_null() && len != 0 {
            return Err(invalid("tc_bcast: buf is null"));
        }
        let data = if len == 0 {
            &mut [][..]
        } else {
            std::slice::from_raw_parts_mut(buf as *mut u8, len)
        };
        comm_ref(h)?.bcast(data, rank_arg(root, "root")?)
    })
}

/// Reduce `count` elements of type `elem` with operator `op` from every
/// rank's `send` into `root`'s `recv`. Non-root ranks may pass a null
/// `recv`.
///
/// # Safety
/// `h` must be a live handle; `send` must hold `count` elements; on the
/// root, `recv` must hold `count` writable elements.
#[no_mangle]
pub unsafe extern "C" fn tc_reduce(
    h: *mut tc_comm,
    send: *const c_void,
    recv: *mut c_void,
    count: usize,
    elem: c_int,
    op: c_int,
    root: c_int,
) -> c_int {
    guard(|| {
        let comm = comm_ref(h)?;
        let op = ReduceOp::new(op_of(op)?, elem_of(elem)?);
        let bytes = count * op.elem.size();
        if send.is_null() && bytes != 0 {
            return Err(invalid("tc_reduce: send is null"));
        }
        let sendbuf = if bytes == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(send as *const u8, bytes)
        };
        let recvbuf = if recv.is_null() {
            &mut [][..]
        } else {
            std::slice::from_raw_parts_mut(recv as *mut u8, bytes)
        };
        comm.reduce(sendbuf, recvbuf, count, op, rank_arg(root, "root")?)
    })
}

/// [`tc_reduce`] to rank 0 followed by a broadcast: every rank receives
/// the result in `recv`.
///
/// # Safety
/// `h` must be a live handle; `send` and `recv` must each hold `count`
/// elements, `recv` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_allreduce(
    h: *mut tc_comm,
    send: *const c_void,
    recv: *mut c_void,
    count: usize,
    elem: c_int,
    op: c_int,
) -> c_int {
    guard(|| {
        let comm = comm_ref(h)?;
        let op = ReduceOp::new(op_of(op)?, elem_of(elem)?);
        let bytes = count * op.elem.size();
        if (send.is_null() || recv.is_null()) && bytes != 0 {
            return Err(invalid("tc_allreduce: send/recv is null"));
        }
        let sendbuf = if bytes == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(send as *const u8, bytes)
        };
        let recvbuf = if bytes == 0 {
            &mut [][..]
        } else {
            std::slice::from_raw_parts_mut(recv as *mut u8, bytes)
        };
        comm.allreduce(sendbuf, recvbuf, count, op)
    })
}

// ---------------------------------------------------------------------------
// Attributes and stats
// ---------------------------------------------------------------------------

/// Attach `value` to this thread's rank under `key` for the duration of
/// the current activation window.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_attr_set(h: *mut tc_comm, key: u32, value: u64) -> c_int {
    guard(|| comm_ref(h)?.attr_set(key, value))
}

/// Look up this thread's attribute `key`. Sets `*present` to 1 and fills
/// `*value` when found, else sets `*present` to 0.
///
/// # Safety
/// `h` must be a live handle; `value` and `present` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tc_attr_get(
    h: *mut tc_comm,
    key: u32,
    value: *mut u64,
    present: *mut c_int,
) -> c_int {
    guard(|| {
        if value.is_null() || present.is_null() {
            return Err(invalid("tc_attr_get: value/present is null"));
        }
        match comm_ref(h)?.attr_get(key)? {
            Some(v) => {
                *value = v;
                *present = 1;
            }
            None => {
                *value = 0;
                *present = 0;
            }
        }
        Ok(())
    })
}

/// Copy this thread's traffic counters for the current window into `out`.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tc_comm_stats(h: *mut tc_comm, out: *mut tc_stats) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(invalid("tc_stats: out is null"));
        }
        let s = comm_ref(h)?.stats()?;
        *out = tc_stats {
            sends: s.sends,
            recvs: s.recvs,
            eager_sends: s.eager_sends,
            onecopy_sends: s.onecopy_sends,
            pipeline_sends: s.pipeline_sends,
            progress_events: s.progress_events,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Shuttle a raw handle between scoped threads (as an address, so the
    /// copy is trivially Send).
    #[derive(Clone, Copy)]
    struct H(usize);
    impl H {
        fn p(self) -> *mut tc_comm {
            self.0 as *mut tc_comm
        }
    }

    fn create(nthreads: usize) -> *mut tc_comm {
        let mut h: *mut tc_comm = std::ptr::null_mut();
        assert_eq!(unsafe { tc_comm_create(nthreads, &mut h) }, TC_OK);
        assert!(!h.is_null());
        h
    }

    #[test]
    fn ping_pong_and_collectives_through_the_abi() {
        let h = H(create(2) as usize);
        std::thread::scope(|s| {
            for t in 0..2 {
                s.spawn(move || unsafe {
                    assert_eq!(tc_start(h.p()), TC_OK);
                    let (mut me, mut n) = (-1, -1);
                    assert_eq!(tc_comm_rank(h.p(), &mut me), TC_OK);
                    assert_eq!(tc_comm_size(h.p(), &mut n), TC_OK);
                    assert_eq!(n, 2);
                    let peer = 1 - me;

                    // Ping-pong with envelope inspection.
                    let out = [me as u8; 32];
                    let mut inb = [0u8; 32];
                    let mut env = tc_envelope { src_rank: -1, tag: -1, len: 0 };
                    if me == 0 {
                        assert_eq!(tc_send(h.p(), out.as_ptr().cast(), 32, peer, 7), TC_OK);
                        assert_eq!(
                            tc_recv(h.p(), inb.as_mut_ptr().cast(), 32, peer, 7, &mut env),
                            TC_OK
                        );
                    } else {
                        assert_eq!(
                            tc_recv(h.p(), inb.as_mut_ptr().cast(), 32, TC_ANY_SOURCE, 7, &mut env),
                            TC_OK
                        );
                        assert_eq!(tc_send(h.p(), out.as_ptr().cast(), 32, peer, 7), TC_OK);
                    }
                    assert_eq!(env.src_rank, peer);
                    assert_eq!(env.tag, 7);
                    assert_eq!(env.len, 32);
                    assert!(inb.iter().all(|&b| b == peer as u8));

                    // Attributes live inside the window.
                    assert_eq!(tc_attr_set(h.p(), 4, 100 + me as u64), TC_OK);
                    let (mut v, mut p) = (0u64, 0);
                    assert_eq!(tc_attr_get(h.p(), 4, &mut v, &mut p), TC_OK);
                    assert_eq!((p, v), (1, 100 + me as u64));

                    // allreduce SUM over ranks: 0 + 1.
                    let send = [me as i64];
                    let mut recv = [0i64];
                    assert_eq!(
                        tc_allreduce(
                            h.p(),
                            send.as_ptr().cast(),
                            recv.as_mut_ptr().cast(),
                            1,
                            TC_ELEM_INT64,
                            TC_OP_SUM,
                        ),
                        TC_OK
                    );
                    assert_eq!(recv[0], 1);

                    // bcast from rank 1.
                    let mut blob = if me == 1 { [9u8; 16] } else { [0u8; 16] };
                    assert_eq!(tc_bcast(h.p(), blob.as_mut_ptr().cast(), 16, 1), TC_OK);
                    assert!(blob.iter().all(|&b| b == 9));

                    assert_eq!(tc_barrier(h.p(), TC_BARRIER_ATOMIC), TC_OK);
                    assert_eq!(tc_barrier(h.p(), TC_BARRIER_MESSAGE), TC_OK);

                    let mut st = tc_stats {
                        sends: 0,
                        recvs: 0,
                        eager_sends: 0,
                        onecopy_sends: 0,
                        pipeline_sends: 0,
                        progress_events: 0,
                    };
                    assert_eq!(tc_comm_stats(h.p(), &mut st), TC_OK);
                    assert!(st.sends >= 1 && st.recvs >= 1);

                    assert_eq!(tc_finish(h.p()), TC_OK);
                    let _ = t;
                });
            }
        });
        assert_eq!(unsafe { tc_comm_free(h.p()) }, TC_OK);
    }

    #[test]
    fn errors_carry_codes_and_messages() {
        unsafe {
            // Null handle.
            assert_eq!(tc_start(std::ptr::null_mut()), TC_ERR_INVALID_HANDLE);

            // Zero threads is rejected at creation.
            let mut h: *mut tc_comm = std::ptr::null_mut();
            assert_eq!(tc_comm_create(0, &mut h), TC_ERR_INVALID_ARGUMENT);
            assert!(h.is_null());
            let mut buf = [0i8; 128];
            let n = tc_last_error(buf.as_mut_ptr(), buf.len());
            assert!(n > 1 && n <= buf.len());
            let msg = std::ffi::CStr::from_ptr(buf.as_ptr()).to_string_lossy();
            assert!(msg.contains("thread"), "unexpected message: {msg}");

            // Communication outside a window; free-while-active keeps the
            // handle alive; truncation surfaces its own code.
            let h = create(1);
            assert_eq!(tc_send(h, std::ptr::null(), 0, 0, 0), TC_ERR_INVALID_STATE);
            assert_eq!(tc_start(h), TC_OK);
            assert_eq!(tc_comm_free(h), TC_ERR_INVALID_STATE);
            assert_eq!(tc_send(h, [1u8; 4].as_ptr().cast(), 4, 0, 3), TC_OK);
            let mut tiny = [0u8; 2];
            assert_eq!(
                tc_recv(h, tiny.as_mut_ptr().cast(), 2, 0, 3, std::ptr::null_mut()),
                TC_ERR_TRUNCATION
            );
            assert_eq!(tc_barrier(h, 99), TC_ERR_INVALID_ARGUMENT);
            assert_eq!(tc_finish(h), TC_OK);
            assert_eq!(tc_comm_free(h), TC_OK);

            // Status names are stable strings.
            let name = std::ffi::CStr::from_ptr(tc_error_name(TC_ERR_TRUNCATION));
            assert_eq!(name.to_str().unwrap(), "message truncated");
        }
    }

    #[test]
    fn config_reaches_the_core() {
        unsafe {
            let mut cfg = tc_config {
                eager_threshold: 0,
                cell_size: 0,
                cells_per_rank: 0,
                protocol: 0,
            };
            assert_eq!(tc_config_default(&mut cfg), TC_OK);
            assert!(cfg.eager_threshold > 0 && cfg.cell_size >= cfg.eager_threshold);

            // Force the eager policy and verify the counter moves.
            cfg.protocol = TC_PROTO_EAGER;
            let mut h: *mut tc_comm = std::ptr::null_mut();
            assert_eq!(tc_comm_create_with_config(1, &cfg, &mut h), TC_OK);
            assert_eq!(tc_start(h), TC_OK);
            let payload = [5u8; 64];
            assert_eq!(tc_send(h, payload.as_ptr().cast(), 64, 0, 0), TC_OK);
            let mut back = [0u8; 64];
            assert_eq!(
                tc_recv(h, back.as_mut_ptr().cast(), 64, 0, 0, std::ptr::null_mut()),
                TC_OK
            );
            assert_eq!(back, payload);
            let mut st = tc_stats {
                sends: 0,
                recvs: 0,
                eager_sends: 0,
                onecopy_sends: 0,
                pipeline_sends: 0,
                progress_events: 0,
            };
            assert_eq!(tc_comm_stats(h, &mut st), TC_OK);
            assert_eq!(st.eager_sends, 1);
            assert_eq!(tc_finish(h), TC_OK);
            assert_eq!(tc_comm_free(h), TC_OK);

            // Bad protocol value is rejected.
            cfg.protocol = 42;
            let mut h2: *mut tc_comm = std::ptr::null_mut();
            assert_eq!(
                tc_comm_create_with_config(1, &cfg, &mut h2),
                TC_ERR_INVALID_ARGUMENT
            );
            assert!(h2.is_null());
        }
    }
}
