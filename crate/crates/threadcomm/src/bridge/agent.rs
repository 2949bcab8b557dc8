//! Bridge agent thread: drains every peer connection, turns data frames
//! into inbox cells, and tallies control frames.
//!
//! The agent must never stall, or a peer blocked writing to us could
//! deadlock the mesh. Two rules guarantee that:
//!
//! * it only performs nonblocking reads, interleaved across endpoints;
//! * when a destination's cell pool is empty (or the frame is larger than
//!   a pool cell), it spills into a heap-allocated overflow cell instead
//!   of waiting for the receiver to catch up.

use std::io::Read;
use std::os::unix::net::UnixStream;
use std::ptr::NonNull;
use std::sync::Arc;
use std::time::Duration;

use crate::bridge::mesh::{CtrlOp, MeshShared};
use crate::bridge::wire::{FrameKind, WireHeader, HEADER_LEN};
use crate::cell::{Cell, CellKind};
use crate::comm::CommInner;
use crate::error::{Error, Result};

struct Reader {
    peer: usize,
    stream: UnixStream,
    hdr: [u8; HEADER_LEN],
    hdr_fill: usize,
    body: Option<Body>,
    dead: bool,
}

/// A frame whose header is parsed and whose payload is being read.
enum Body {
    /// Data frame landing in an inbox cell.
    Cell {
        cell: NonNull<Cell>,
        comm: Arc<CommInner>,
        dst_tid: usize,
        need: usize,
        filled: usize,
    },
    /// Control frame operand.
    Ctrl {
        op: CtrlOp,
        phase: u64,
        peer_proc: u32,
        buf: [u8; 8],
        filled: usize,
    },
    /// Payload we have no place for (communicator already gone); consumed
    /// and dropped to keep the stream parseable.
    Discard { remaining: usize },
}

pub(crate) fn spawn(
    shared: Arc<MeshShared>,
    readers: Vec<(usize, UnixStream)>,
) -> Result<std::thread::JoinHandle<()>> {
    std::thread::Builder::new()
        .name("tc-bridge".into())
        .spawn(move || run(shared, readers))
        .map_err(|e| Error::Transport(format!("spawning bridge agent: {e}")))
}

fn run(shared: Arc<MeshShared>, readers: Vec<(usize, UnixStream)>) {
    let mut readers: Vec<Reader> = readers
        .into_iter()
        .map(|(peer, stream)| Reader {
            peer,
            stream,
            hdr: [0u8; HEADER_LEN],
            hdr_fill: 0,
            body: None,
            dead: false,
        })
        .collect();

    let mut idle_polls = 0u32;
    loop {
        if shared.is_shutdown() {
            break;
        }
        let mut progressed = false;
        for r in &mut readers {
            match pump(&shared, r) {
                Ok(p) => progressed |= p,
                Err(e) => {
                    shared.record_agent_error(format!("peer {}: {e}", r.peer));
                    r.dead = true;
                }
            }
        }
        if progressed {
            idle_polls = 0;
        } else {
            if readers.iter().all(|r| r.dead) {
                break;
            }
            // Escalating back-off: stay hot briefly, then get out of the
            // way of worker threads on busy machines.
            idle_polls = idle_polls.saturating_add(1);
            if idle_polls < 64 {
                std::hint::spin_loop();
            } else if idle_polls < 1024 {
                std::thread::yield_now();
            } else {
                std::thread::sleep(Duration::from_micros(200));
            }
        }
    }

    // Return any half-filled cells so pool accounting stays exact.
    for r in &mut readers {
        if let Some(Body::Cell { cell, comm, .. }) = r.body.take() {
            comm.pool.release(cell);
        }
    }
}

/// Read whatever is available into `buf`. `Ok(None)` means the socket has
/// nothing right now; `Ok(Some(0))` is end-of-stream.
fn read_some(stream: &mut UnixStream, buf: &mut [u8]) -> Result<Option<usize>> {
    loop {
        match stream.read(buf) {
            Ok(n) => return Ok(Some(n)),
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => return Ok(None),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
}

/// Drive one endpoint until it has nothing more to give. Returns whether
/// any bytes moved.
fn pump(shared: &MeshShared, r: &mut Reader) -> Result<bool> {
    if r.dead {
        return Ok(false);
    }
    let mut progressed = false;
    loop {
        if r.body.is_none() {
            // Header phase.
            match read_some(&mut r.stream, &mut r.hdr[r.hdr_fill..])? {
                None => return Ok(progressed),
                Some(0) => {
                    if r.hdr_fill != 0 {
                        return Err(Error::Protocol("peer closed mid-header".into()));
                    }
                    // Clean EOF between frames: the peer exited.
                    r.dead = true;
                    return Ok(progressed);
                }
                Some(n) => {
                    progressed = true;
                    r.hdr_fill += n;
                    if r.hdr_fill == HEADER_LEN {
                        r.hdr_fill = 0;
                        let hdr = WireHeader::decode(&r.hdr)?;
                        r.body = begin_frame(shared, hdr)?;
                    }
                }
            }
            continue;
        }

        // Body phase.
        let mut body = r.body.take().expect("checked above");
        let result = fill_body(&mut r.stream, &mut body);
        match result {
            Ok(FillStatus::Done) => {
                progressed = true;
                dispatch(shared, body);
            }
            Ok(FillStatus::Progress) => {
                progressed = true;
                r.body = Some(body);
            }
            Ok(FillStatus::Stalled) => {
                r.body = Some(body);
                return Ok(progressed);
            }
            Err(e) => {
                // Put the body back so the cleanup pass can release its cell.
                r.body = Some(body);
                return Err(e);
            }
        }
    }
}

enum FillStatus {
    Done,
    Progress,
    Stalled,
}

fn fill_body(stream: &mut UnixStream, body: &mut Body) -> Result<FillStatus> {
    match body {
        Body::Cell {
            cell, need, filled, ..
        } => {
            // SAFETY: the cell is exclusively the agent's until enqueued;
            // `need` was bounds-checked against its capacity at selection.
            let dst = unsafe {
                std::slice::from_raw_parts_mut(
                    cell.as_ref().payload_mut_ptr().add(*filled),
                    *need - *filled,
                )
            };
            match read_some(stream, dst)? {
                None => Ok(FillStatus::Stalled),
                Some(0) => Err(Error::Protocol("peer closed mid-frame".into())),
                Some(n) => {
                    *filled += n;
                    if filled == need {
                        Ok(FillStatus::Done)
                    } else {
                        Ok(FillStatus::Progress)
                    }
                }
            }
        }
        Body::Ctrl { buf, filled, .. } => match read_some(stream, &mut buf[*filled..])? {
            None => Ok(FillStatus::Stalled),
            Some(0) => Err(Error::Protocol("peer closed mid-frame".into())),
            Some(n) => {
                *filled += n;
                if *filled == buf.len() {
                    Ok(FillStatus::Done)
                } else {
                    Ok(FillStatus::Progress)
                }
            }
        },
        Body::Discard { remaining } => {
            let mut scratch = [0u8; 4096];
            let want = (*remaining).min(scratch.len());
            match read_some(stream, &mut scratch[..want])? {
                None => Ok(FillStatus::Stalled),
                Some(0) => Err(Error::Protocol("peer closed mid-frame".into())),
                Some(n) => {
                    *remaining -= n;
                    if *remaining == 0 {
                        Ok(FillStatus::Done)
                    } else {
                        Ok(FillStatus::Progress)
                    }
                }
            }
        }
    }
}

fn dispatch(shared: &MeshShared, body: Body) {
    match body {
        Body::Cell {
            cell,
            comm,
            dst_tid,
            need,
            ..
        } => {
            // SAFETY: still exclusively ours; enqueue publishes the writes.
            unsafe { cell.as_ref().msg_mut().payload_len = need };
            comm.slots[dst_tid].inbox.enqueue(cell);
        }
        Body::Ctrl {
            op,
            phase,
            peer_proc,
            buf,
            ..
        } => {
            shared.deliver_ctrl(op, phase, peer_proc, u64::from_le_bytes(buf));
        }
        Body::Discard { .. } => {}
    }
}

/// Parse a header into the state needed to consume its payload. Returns
/// `None` when the frame is fully handled by the header alone.
fn begin_frame(shared: &MeshShared, hdr: WireHeader) -> Result<Option<Body>> {
    match hdr.kind {
        // Bootstrap acks are consumed during connect(); one arriving here
        // is stale but harmless.
        FrameKind::Ack => Ok(None),
        FrameKind::Ctrl => {
            let op = CtrlOp::from_tag(hdr.tag)
                .ok_or_else(|| Error::Protocol(format!("unknown control op {}", hdr.tag)))?;
            match hdr.msg_len {
                0 => {
                    shared.deliver_ctrl(op, hdr.seq, hdr.src_rank, 0);
                    Ok(None)
                }
                8 => Ok(Some(Body::Ctrl {
                    op,
                    phase: hdr.seq,
                    peer_proc: hdr.src_rank,
                    buf: [0u8; 8],
                    filled: 0,
                })),
                n => Err(Error::Protocol(format!(
                    "control frame with {n}-byte operand (expected 8)"
                ))),
            }
        }
        FrameKind::Eager | FrameKind::PipelineChunk => {
            let need = hdr.frame_payload_len();
            let comm = match shared.routed_comm() {
                Some(c) => c,
                None => {
                    shared.record_agent_error(format!(
                        "data frame for rank {} arrived with no attached communicator",
                        hdr.dst_rank
                    ));
                    return Ok(if need == 0 {
                        None
                    } else {
                        Some(Body::Discard { remaining: need })
                    });
                }
            };
            if hdr.dst_rank as usize >= comm.table.total() {
                return Err(Error::Protocol(format!(
                    "destination rank {} outside the communicator",
                    hdr.dst_rank
                )));
            }
            let (proc_idx, dst_tid) = comm.table.route(hdr.dst_rank as usize);
            if proc_idx != comm.proc_rank {
                return Err(Error::Protocol(format!(
                    "frame for rank {} routed to the wrong process",
                    hdr.dst_rank
                )));
            }

            let cell = match comm.pool.acquire(dst_tid) {
                // SAFETY: freshly acquired cell, exclusively ours.
                Some(c) if unsafe { c.as_ref().payload_cap() } >= need => c,
                Some(c) => {
                    // Pool cells are too small for this frame (peer runs a
                    // larger cell size); spill to the heap.
                    comm.pool.release(c);
                    Cell::new_overflow(need)
                }
                None => Cell::new_overflow(need.max(comm.pool.cell_size())),
            };
            // SAFETY: exclusively ours until enqueue.
            unsafe {
                let msg = cell.as_ref().msg_mut();
                msg.kind = match hdr.kind {
                    FrameKind::Eager => CellKind::Eager,
                    _ => CellKind::PipelineChunk,
                };
                msg.src_rank = hdr.src_rank;
                msg.tag = hdr.tag;
                msg.msg_len = hdr.msg_len;
                msg.seq = hdr.seq;
                msg.chunk_index = hdr.chunk_index;
                msg.chunk_total = hdr.chunk_total;
                msg.src_buf = std::ptr::null();
                msg.src_done = std::ptr::null();
                msg.payload_len = 0;
            }
            if need == 0 {
                comm.slots[dst_tid].inbox.enqueue(cell);
                return Ok(None);
            }
            Ok(Some(Body::Cell {
                cell,
                comm,
                dst_tid,
                need,
                filled: 0,
            }))
        }
    }
}
