//! Full-mesh connection setup and the shared bridge state.
//!
//! Process `i` listens on `<rendezvous>/rank<i>.sock`. Every process first
//! binds its own listener, then dials every lower-indexed peer (sending a
//! hello record), then accepts one connection from every higher-indexed
//! peer (answering each valid hello with an `Ack` frame), and finally reads
//! the `Ack` from every peer it dialed. Connects are retried while peers
//! are still starting up; `connect()` therefore tolerates arbitrary launch
//! order.
//!
//! After bootstrap every stream is switched to nonblocking. The read half
//! moves into the bridge agent thread; the write half stays here, one mutex
//! per peer so concurrent senders produce whole frames.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::{Duration, Instant};

use crate::bridge::wire::{
    self, FrameKind, WireHeader, HEADER_LEN, HELLO_LEN,
};
use crate::comm::CommInner;
use crate::error::{Error, Result};

/// How long bootstrap steps wait for slow peers.
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
/// How long lifecycle handshakes wait before declaring a peer lost.
const CTRL_TIMEOUT: Duration = Duration::from_secs(120);

/// Lifecycle handshake operations carried in `Ctrl` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub(crate) enum CtrlOp {
    /// Thread-count exchange during communicator init; operand = count.
    Counts = 1,
    /// Activation handshake.
    Start = 2,
    /// Deactivation handshake.
    Finish = 3,
    /// Teardown handshake.
    Free = 4,
}

impl CtrlOp {
    pub(crate) fn from_tag(tag: i32) -> Option<CtrlOp> {
        match tag {
            1 => Some(CtrlOp::Counts),
            2 => Some(CtrlOp::Start),
            3 => Some(CtrlOp::Finish),
            4 => Some(CtrlOp::Free),
            _ => None,
        }
    }
}

struct Endpoint {
    writer: Mutex<UnixStream>,
}

#[derive(Default)]
struct CtrlState {
    /// (op, phase) → operands received so far, as (peer process, value).
    pending: HashMap<(u8, u64), Vec<(u32, u64)>>,
}

/// Bridge state shared by the process group, its communicators, and the
/// agent thread.
pub(crate) struct MeshShared {
    pub(crate) proc_rank: usize,
    pub(crate) proc_count: usize,
    /// Indexed by peer process; `None` at our own slot.
    endpoints: Vec<Option<Endpoint>>,
    ctrl: Mutex<CtrlState>,
    ctrl_cv: Condvar,
    /// The communicator currently routing data frames. One at a time: the
    /// wire header has no communicator field, so overlapping communicators
    /// over one process group cannot be demultiplexed.
    active_comm: Mutex<Option<(u64, Weak<CommInner>)>>,
    shutdown_flag: AtomicBool,
    /// First error the agent hit; surfaced by the next blocking call.
    agent_error: Mutex<Option<String>>,
    /// Monotonic phase counters for handshakes not tied to an activation
    /// generation (init's count exchange, free).
    init_phase: AtomicU64,
    free_phase: AtomicU64,
}

impl MeshShared {
    pub(crate) fn shutdown(&self) {
        self.shutdown_flag.store(true, Ordering::Release);
        self.ctrl_cv.notify_all();
    }

    pub(crate) fn is_shutdown(&self) -> bool {
        self.shutdown_flag.load(Ordering::Acquire)
    }

    pub(crate) fn record_agent_error(&self, msg: String) {
        let mut slot = self.agent_error.lock().unwrap();
        if slot.is_none() {
            *slot = Some(msg);
        }
        self.ctrl_cv.notify_all();
    }

    pub(crate) fn check_agent(&self) -> Result<()> {
        if let Some(msg) = self.agent_error.lock().unwrap().clone() {
            return Err(Error::Transport(format!("bridge agent failed: {msg}")));
        }
        Ok(())
    }

    /// Reserve the next phase number for `op` (Counts/Free only; Start and
    /// Finish derive their phase from the activation generation).
    pub(crate) fn next_phase(&self, op: CtrlOp) -> u64 {
        match op {
            CtrlOp::Counts => self.init_phase.fetch_add(1, Ordering::Relaxed),
            CtrlOp::Free => self.free_phase.fetch_add(1, Ordering::Relaxed),
            _ => unreachable!("start/finish phases come from the generation counter"),
        }
    }

    /// Send a control operand to every peer process.
    pub(crate) fn broadcast_ctrl(&self, op: CtrlOp, phase: u64, value: u64) -> Result<()> {
        for peer in 0..self.proc_count {
            if peer == self.proc_rank {
                continue;
            }
            let hdr = WireHeader {
                kind: FrameKind::Ctrl,
                src_rank: self.proc_rank as u32,
                dst_rank: peer as u32,
                tag: op as u8 as i32,
                msg_len: 8,
                seq: phase,
                chunk_index: 0,
                chunk_total: 1,
            };
            self.send_frame(peer, &hdr, &value.to_le_bytes())?;
        }
        Ok(())
    }

    /// Record an arrived control operand (called by the agent).
    pub(crate) fn deliver_ctrl(&self, op: CtrlOp, phase: u64, peer: u32, value: u64) {
        let mut st = self.ctrl.lock().unwrap();
        st.pending
            .entry((op as u8, phase))
            .or_default()
            .push((peer, value));
        drop(st);
        self.ctrl_cv.notify_all();
    }

    /// Block until `need` peers delivered their operand for `(op, phase)`
    /// and consume them.
    pub(crate) fn wait_ctrl(&self, op: CtrlOp, phase: u64, need: usize) -> Result<Vec<(u32, u64)>> {
        let deadline = Instant::now() + CTRL_TIMEOUT;
        let mut st = self.ctrl.lock().unwrap();
        loop {
            if st
                .pending
                .get(&(op as u8, phase))
                .is_some_and(|v| v.len() >= need)
            {
                let got = st.pending.remove(&(op as u8, phase)).unwrap();
                debug_assert_eq!(got.len(), need, "each peer hands in exactly one operand");
                return Ok(got);
            }
            if self.is_shutdown() {
                return Err(Error::Transport("process group is shutting down".into()));
            }
            self.check_agent()?;
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Transport(format!(
                    "timed out waiting for {op:?} handshake (phase {phase})"
                )));
            }
            let (guard, _) = self
                .ctrl_cv
                .wait_timeout(st, (deadline - now).min(Duration::from_millis(100)))
                .unwrap();
            st = guard;
        }
    }

    /// Attach `comm` as the communicator that data frames route to.
    pub(crate) fn attach_comm(&self, id: u64, comm: Weak<CommInner>) -> Result<()> {
        let mut slot = self.active_comm.lock().unwrap();
        if let Some((other, w)) = &*slot {
            if *other != id && w.upgrade().is_some() {
                return Err(Error::InvalidState(
                    "another live communicator is already attached to this process group \
                     (overlapping multi-process communicators are not supported)"
                        .into(),
                ));
            }
        }
        *slot = Some((id, comm));
        Ok(())
    }

    pub(crate) fn detach_comm(&self, id: u64) {
        let mut slot = self.active_comm.lock().unwrap();
        if matches!(&*slot, Some((other, _)) if *other == id) {
            *slot = None;
        }
    }

    /// Current data-frame target, if one is attached and alive.
    pub(crate) fn routed_comm(&self) -> Option<Arc<CommInner>> {
        self.active_comm
            .lock()
            .unwrap()
            .as_ref()
            .and_then(|(_, w)| w.upgrade())
    }

    /// Write one frame (header + payload) to `peer`, atomically with
    /// respect to other senders targeting the same peer.
    pub(crate) fn send_frame(&self, peer: usize, hdr: &WireHeader, payload: &[u8]) -> Result<()> {
        debug_assert_eq!(payload.len(), hdr.frame_payload_len());
        let ep = self.endpoints[peer]
            .as_ref()
            .expect("no endpoint for own process");
        let mut w = ep.writer.lock().unwrap();
        write_all_nonblocking(&mut w, &hdr.encode())?;
        write_all_nonblocking(&mut w, payload)
    }
}

/// Write the whole buffer to a nonblocking stream, yielding while the
/// socket buffer is full. The peer's agent drains continuously (it never
/// blocks on pools — it spills to heap cells), so this always terminates
/// unless the peer dies.
fn write_all_nonblocking(stream: &mut UnixStream, mut buf: &[u8]) -> Result<()> {
    let mut stalls = 0u32;
    while !buf.is_empty() {
        match stream.write(buf) {
            Ok(0) => return Err(Error::Transport("peer closed the connection".into())),
            Ok(n) => {
                buf = &buf[n..];
                stalls = 0;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                stalls += 1;
                if stalls < 64 {
                    std::thread::yield_now();
                } else {
                    std::thread::sleep(Duration::from_micros(50));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn read_exact_timeout(stream: &mut UnixStream, buf: &mut [u8], what: &str) -> Result<()> {
    stream.set_read_timeout(Some(CONNECT_TIMEOUT))?;
    stream.read_exact(buf).map_err(|e| {
        Error::Transport(format!("reading {what}: {e}"))
    })?;
    Ok(())
}

fn socket_path(dir: &Path, proc_rank: usize) -> std::path::PathBuf {
    dir.join(format!("rank{proc_rank}.sock"))
}

fn retry_connect(path: &Path, deadline: Instant) -> Result<UnixStream> {
    loop {
        match UnixStream::connect(path) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::Transport(format!(
                        "could not reach peer at {}: {e}",
                        path.display()
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

/// Establish the full mesh for `proc_rank` of `proc_count` processes
/// rendezvousing in `dir`, and spawn the bridge agent.
pub(crate) fn connect(
    proc_rank: usize,
    proc_count: usize,
    dir: &Path,
) -> Result<(Arc<MeshShared>, std::thread::JoinHandle<()>)> {
    debug_assert!(proc_count > 1 && proc_rank < proc_count);
    let deadline = Instant::now() + CONNECT_TIMEOUT;

    let own_path = socket_path(dir, proc_rank);
    let _ = std::fs::remove_file(&own_path);
    let listener = UnixListener::bind(&own_path)
        .map_err(|e| Error::Transport(format!("binding {}: {e}", own_path.display())))?;

    let mut streams: Vec<Option<UnixStream>> = (0..proc_count).map(|_| None).collect();

    // Dial every lower-indexed peer. Their listeners may not exist yet;
    // retry until the deadline. The connection completes via the listen
    // backlog even before the peer accepts, so this cannot deadlock with
    // the accept phase below.
    for peer in 0..proc_rank {
        let mut s = retry_connect(&socket_path(dir, peer), deadline)?;
        s.write_all(&wire::encode_hello(proc_rank as u32))
            .map_err(|e| Error::Transport(format!("sending hello to peer {peer}: {e}")))?;
        streams[peer] = Some(s);
    }

    // Accept one connection from every higher-indexed peer.
    listener.set_nonblocking(true)?;
    let mut expected = proc_count - 1 - proc_rank;
    while expected > 0 {
        match listener.accept() {
            Ok((mut s, _)) => {
                s.set_nonblocking(false)?;
                let mut hello = [0u8; HELLO_LEN];
                read_exact_timeout(&mut s, &mut hello, "hello record")?;
                let peer = match wire::decode_hello(&hello) {
                    Ok(p) => p as usize,
                    Err(e) => {
                        // Reject by closing; the dialer sees EOF instead of
                        // an Ack and gives up.
                        drop(s);
                        return Err(e);
                    }
                };
                if peer <= proc_rank || peer >= proc_count || streams[peer].is_some() {
                    drop(s);
                    return Err(Error::Protocol(format!(
                        "unexpected hello from process {peer}"
                    )));
                }
                let ack = WireHeader {
                    kind: FrameKind::Ack,
                    src_rank: proc_rank as u32,
                    dst_rank: peer as u32,
                    tag: 0,
                    msg_len: 0,
                    seq: 0,
                    chunk_index: 0,
                    chunk_total: 1,
                };
                s.write_all(&ack.encode())
                    .map_err(|e| Error::Transport(format!("acking peer {peer}: {e}")))?;
                streams[peer] = Some(s);
                expected -= 1;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Transport(format!(
                        "timed out waiting for {expected} peer connection(s)"
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }

    // Collect the Ack from every peer we dialed; only then is the link
    // known-good in both directions.
    for peer in 0..proc_rank {
        let s = streams[peer].as_mut().expect("dialed above");
        let mut buf = [0u8; HEADER_LEN];
        read_exact_timeout(s, &mut buf, "bootstrap ack")?;
        let hdr = WireHeader::decode(&buf)?;
        if hdr.kind != FrameKind::Ack || hdr.src_rank as usize != peer {
            return Err(Error::Protocol(format!(
                "peer {peer} answered bootstrap with {:?}",
                hdr.kind
            )));
        }
    }

    // Split each stream: writer clone kept here, reader half to the agent.
    // Nonblocking mode is a property of the shared file description, so
    // writers must handle WouldBlock from here on.
    let mut endpoints: Vec<Option<Endpoint>> = Vec::with_capacity(proc_count);
    let mut readers: Vec<(usize, UnixStream)> = Vec::with_capacity(proc_count - 1);
    for (peer, slot) in streams.into_iter().enumerate() {
        match slot {
            None => endpoints.push(None),
            Some(s) => {
                s.set_read_timeout(None)?;
                s.set_nonblocking(true)?;
                let writer = s.try_clone()?;
                endpoints.push(Some(Endpoint {
                    writer: Mutex::new(writer),
                }));
                readers.push((peer, s));
            }
        }
    }

    let shared = Arc::new(MeshShared {
        proc_rank,
        proc_count,
        endpoints,
        ctrl: Mutex::new(CtrlState::default()),
        ctrl_cv: Condvar::new(),
        active_comm: Mutex::new(None),
        shutdown_flag: AtomicBool::new(false),
        agent_error: Mutex::new(None),
        init_phase: AtomicU64::new(0),
        free_phase: AtomicU64::new(0),
    });

    let agent = crate::bridge::agent::spawn(Arc::clone(&shared), readers)?;
    Ok((shared, agent))
}
