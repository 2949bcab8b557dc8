//! Communicator lifecycle: rank assignment, activation windows, and the
//! per-thread bindings that carry matching state.
//!
//! A communicator is created *outside* parallel regions by one thread per
//! process ([`Threadcomm::init`]) and entered *inside* a region by every
//! participating thread ([`Threadcomm::start`]). Ranks are handed out by
//! arrival order within the process and offset by the process's slot in the
//! rank table, so the combined communicator spans `N × M` ranks for `N`
//! processes of `M` threads each. Ranks and attributes only live until the
//! matching [`Threadcomm::finish`]; a later activation may assign different
//! ranks to the same OS threads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};

use crate::bridge::mesh::{CtrlOp, MeshShared};
use crate::cell::CellPool;
use crate::collectives::BarrierState;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::p2p::{self, Binding};
use crate::queue::MpscQueue;
use crate::util::SpinWait;

/// Hard cap on communicator size; keeps ranks and collective round indices
/// comfortably inside the tag encoding.
pub const MAX_RANKS: usize = 256;

static NEXT_COMM_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    /// Per-thread map from communicator id to that thread's binding.
    static BINDINGS: RefCell<HashMap<u64, Rc<RefCell<Binding>>>> =
        RefCell::new(HashMap::new());
}

/// Maps between global ranks and (process, thread) coordinates.
///
/// Process `i` owns the contiguous rank block `[prefix[i], prefix[i+1])`,
/// in process-rank order, mirroring how the table is built from the
/// per-process thread counts exchanged at init.
#[derive(Debug, Clone)]
pub(crate) struct RankTable {
    counts: Vec<usize>,
    prefix: Vec<usize>,
}

impl RankTable {
    pub fn new(counts: Vec<usize>) -> RankTable {
        let mut prefix = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0usize;
        prefix.push(0);
        for &c in &counts {
            acc += c;
            prefix.push(acc);
        }
        RankTable { counts, prefix }
    }

    /// Total ranks across all processes.
    pub fn total(&self) -> usize {
        *self.prefix.last().unwrap()
    }

    /// First global rank owned by `proc_idx`.
    pub fn base(&self, proc_idx: usize) -> usize {
        self.prefix[proc_idx]
    }

    /// Thread count of `proc_idx`.
    pub fn count(&self, proc_idx: usize) -> usize {
        self.counts[proc_idx]
    }

    /// Resolve a global rank to (process index, thread index within it).
    pub fn route(&self, global: usize) -> (usize, usize) {
        debug_assert!(global < self.total());
        // partition_point returns the first prefix entry > global; the rank
        // block that contains `global` starts one entry earlier.
        let proc_idx = self.prefix.partition_point(|&p| p <= global) - 1;
        (proc_idx, global - self.prefix[proc_idx])
    }
}

/// The process-level parent a communicator is built over: this process's
/// index, the process count, and (for multi-process groups) the connected
/// bridge mesh.
pub struct ProcGroup {
    proc_rank: usize,
    proc_count: usize,
    mesh: Option<Arc<MeshShared>>,
    agent: Option<std::thread::JoinHandle<()>>,
}

impl ProcGroup {
    /// A group containing just this process.
    pub fn single() -> ProcGroup {
        ProcGroup {
            proc_rank: 0,
            proc_count: 1,
            mesh: None,
            agent: None,
        }
    }

    /// Build the group described by the launcher environment
    /// (`TC_PROC_RANK`, `TC_PROC_COUNT`, `TC_RENDEZVOUS`). Falls back to a
    /// single-process group when the variables are absent, so programs run
    /// unchanged with and without the launcher.
    pub fn from_env() -> Result<ProcGroup> {
        let count = match std::env::var("TC_PROC_COUNT") {
            Ok(v) => v.trim().parse::<usize>().map_err(|_| {
                Error::InvalidArgument(format!("TC_PROC_COUNT={v:?} is not a number"))
            })?,
            Err(_) => return Ok(ProcGroup::single()),
        };
        if count == 0 {
            return Err(Error::InvalidArgument("TC_PROC_COUNT must be >= 1".into()));
        }
        let rank = std::env::var("TC_PROC_RANK")
            .map_err(|_| Error::InvalidArgument("TC_PROC_RANK is not set".into()))?
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument("TC_PROC_RANK is not a number".into()))?;
        if rank >= count {
            return Err(Error::InvalidArgument(format!(
                "TC_PROC_RANK {rank} out of range for TC_PROC_COUNT {count}"
            )));
        }
        if count == 1 {
            return Ok(ProcGroup::single());
        }
        let dir = std::env::var("TC_RENDEZVOUS")
            .map_err(|_| Error::InvalidArgument("TC_RENDEZVOUS is not set".into()))?;
        let (mesh, agent) = crate::bridge::mesh::connect(rank, count, std::path::Path::new(&dir))?;
        Ok(ProcGroup {
            proc_rank: rank,
            proc_count: count,
            mesh: Some(mesh),
            agent: Some(agent),
        })
    }

    pub fn proc_rank(&self) -> usize {
        self.proc_rank
    }

    pub fn proc_count(&self) -> usize {
        self.proc_count
    }
}

impl Drop for ProcGroup {
    fn drop(&mut self) {
        if let Some(mesh) = &self.mesh {
            mesh.shutdown();
        }
        if let Some(agent) = self.agent.take() {
            let _ = agent.join();
        }
    }
}

/// Shared state of one local rank slot: the inbox other threads (and the
/// bridge agent) deliver cells into.
pub(crate) struct SlotShared {
    pub inbox: MpscQueue,
}

/// Communicator internals shared by every handle clone and every bound
/// thread.
pub(crate) struct CommInner {
    pub id: u64,
    pub table: RankTable,
    pub proc_rank: usize,
    pub proc_count: usize,
    pub config: Config,
    pub freed: AtomicBool,
    /// Bumped on every activation edge: even values are inactive windows,
    /// odd values active ones. Threads spin on this to leave start/finish
    /// together.
    pub generation: AtomicU64,
    arrivals: AtomicUsize,
    departures: AtomicUsize,
    pub slots: Box<[SlotShared]>,
    pub pool: CellPool,
    pub barrier: BarrierState,
    /// Bridge transport; `None` for single-process groups. Weak so that a
    /// dropped `ProcGroup` fails fast instead of hanging on a joined agent.
    pub mesh: Option<Weak<MeshShared>>,
}

impl CommInner {
    pub fn local_count(&self) -> usize {
        self.table.count(self.proc_rank)
    }

    pub fn rank_base(&self) -> usize {
        self.table.base(self.proc_rank)
    }

    pub fn mesh(&self) -> Result<Arc<MeshShared>> {
        match &self.mesh {
            None => Err(Error::InvalidState(
                "operation requires a multi-process group".into(),
            )),
            Some(w) => w.upgrade().ok_or_else(|| {
                Error::Transport("process group was dropped while the communicator is alive".into())
            }),
        }
    }

    /// Run `f` with this thread's binding. Errors if the thread is not
    /// inside a start/finish window on this communicator.
    pub fn with_binding<R>(
        self: &Arc<Self>,
        f: impl FnOnce(&Arc<CommInner>, &mut Binding) -> Result<R>,
    ) -> Result<R> {
        if self.freed.load(Ordering::Acquire) {
            return Err(Error::InvalidHandle);
        }
        let rc = BINDINGS.with(|m| m.borrow().get(&self.id).cloned());
        match rc {
            None => Err(Error::InvalidState(
                "calling thread is not bound to the communicator (no start() in effect)".into(),
            )),
            Some(rc) => {
                let mut b = rc.borrow_mut();
                f(self, &mut b)
            }
        }
    }
}

impl Drop for CommInner {
    fn drop(&mut self) {
        // Best effort: a communicator dropped without free() should not
        // leave itself attached to the bridge.
        if let Some(mesh) = self.mesh.as_ref().and_then(|w| w.upgrade()) {
            mesh.detach_comm(self.id);
        }
    }
}

/// Per-thread counters, exposed for harnesses that verify protocol
/// selection and message accounting.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Stats {
    /// Messages sent by this thread (all protocols).
    pub sends: u64,
    /// Messages received by this thread.
    pub recvs: u64,
    /// Sends that went through a single eager cell or eager wire frame.
    pub eager_sends: u64,
    /// Sends that handed the receiver a reference to the sender buffer.
    pub onecopy_sends: u64,
    /// Sends streamed through multiple cells or wire chunks.
    pub pipeline_sends: u64,
    /// Inbox cells and completions processed by this thread's progress.
    pub progress_events: u64,
}

/// Handle to a thread communicator. Cheap to clone; all clones refer to the
/// same communicator.
#[derive(Clone)]
pub struct Threadcomm {
    pub(crate) inner: Arc<CommInner>,
}

impl Threadcomm {
    /// Create a communicator over `parent` admitting `num_threads` threads
    /// from this process, with default [`Config`].
    ///
    /// Collective over the processes of `parent`: every process must call
    /// init the same number of times in the same order. Must be called
    /// outside parallel regions (one thread per process).
    pub fn init(parent: &ProcGroup, num_threads: usize) -> Result<Threadcomm> {
        Self::init_with_config(parent, num_threads, Config::default())
    }

    /// [`Threadcomm::init`] with explicit tuning parameters. Environment
    /// overrides (`TC_EAGER_THRESHOLD`, `TC_POOL_CELLS`, `TC_CELL_SIZE`)
    /// are applied on top of `config`.
    pub fn init_with_config(
        parent: &ProcGroup,
        num_threads: usize,
        config: Config,
    ) -> Result<Threadcomm> {
        if num_threads == 0 {
            return Err(Error::InvalidArgument(
                "a communicator needs at least one thread per process".into(),
            ));
        }
        let config = config.resolve()?;

        let id = NEXT_COMM_ID.fetch_add(1, Ordering::Relaxed);
        let counts = match &parent.mesh {
            None => vec![num_threads],
            Some(mesh) => {
                // Exchange per-process thread counts so every process can
                // build the same rank table. The phase counter keeps
                // repeated inits from colliding.
                let phase = mesh.next_phase(CtrlOp::Counts);
                mesh.broadcast_ctrl(CtrlOp::Counts, phase, num_threads as u64)?;
                let peers = mesh.wait_ctrl(CtrlOp::Counts, phase, parent.proc_count - 1)?;
                let mut counts = vec![0usize; parent.proc_count];
                counts[parent.proc_rank] = num_threads;
                for (proc_idx, value) in peers {
                    counts[proc_idx as usize] = value as usize;
                }
                if counts.iter().any(|&c| c == 0) {
                    return Err(Error::Protocol(
                        "thread-count exchange left a process unaccounted".into(),
                    ));
                }
                counts
            }
        };

        let table = RankTable::new(counts);
        if table.total() > MAX_RANKS {
            return Err(Error::InvalidArgument(format!(
                "communicator would span {} ranks; the limit is {MAX_RANKS}",
                table.total()
            )));
        }

        let local = table.count(parent.proc_rank);
        let slots: Vec<SlotShared> = (0..local)
            .map(|_| SlotShared {
                inbox: MpscQueue::new(),
            })
            .collect();
        let pool = CellPool::new(local, config.cells_per_rank, config.cell_size);
        let barrier = BarrierState::new(local);

        let inner = Arc::new(CommInner {
            id,
            table,
            proc_rank: parent.proc_rank,
            proc_count: parent.proc_count,
            config,
            freed: AtomicBool::new(false),
            generation: AtomicU64::new(0),
            arrivals: AtomicUsize::new(0),
            departures: AtomicUsize::new(0),
            slots: slots.into_boxed_slice(),
            pool,
            barrier,
            mesh: parent.mesh.as_ref().map(Arc::downgrade),
        });

        if let Some(mesh) = &parent.mesh {
            mesh.attach_comm(id, Arc::downgrade(&inner))?;
        }

        Ok(Threadcomm { inner })
    }

    /// Enter the communicator from inside a parallel region. Blocks until
    /// all `local threads × processes` participants have arrived, then
    /// returns with this thread bound to a rank.
    ///
    /// Collective over every thread of the communicator.
    pub fn start(&self) -> Result<()> {
        let inner = &self.inner;
        if inner.freed.load(Ordering::Acquire) {
            return Err(Error::InvalidHandle);
        }

        let already = BINDINGS.with(|m| m.borrow().contains_key(&inner.id));
        if already {
            return Err(Error::InvalidState(
                "thread is already bound to this communicator (start() called twice)".into(),
            ));
        }

        let gen0 = inner.generation.load(Ordering::Acquire);
        let local = inner.local_count();
        let ticket = inner.arrivals.fetch_add(1, Ordering::AcqRel);
        if ticket >= local {
            // Either more threads entered the region than the communicator
            // admits, or start() raced an active window. Undo the arrival.
            inner.arrivals.fetch_sub(1, Ordering::AcqRel);
            return Err(Error::TooManyThreads { expected: local });
        }

        let binding = Binding::new(inner, ticket, gen0.wrapping_add(1));
        BINDINGS.with(|m| {
            m.borrow_mut()
                .insert(inner.id, Rc::new(RefCell::new(binding)))
        });

        if ticket == local - 1 {
            // Last local arrival: synchronize with peer processes, then
            // open the activation window for the local spinners.
            if inner.proc_count > 1 {
                let mesh = inner.mesh()?;
                let phase = gen0 / 2;
                mesh.broadcast_ctrl(CtrlOp::Start, phase, 0)?;
                mesh.wait_ctrl(CtrlOp::Start, phase, inner.proc_count - 1)?;
            }
            inner.generation.fetch_add(1, Ordering::Release);
        } else {
            let mut spin = SpinWait::new(inner.config.poll_yield_every);
            while inner.generation.load(Ordering::Acquire) == gen0 {
                spin.idle();
            }
        }
        Ok(())
    }

    /// Leave the communicator at the end of a parallel phase. Blocks until
    /// every rank has called finish, then unbinds the thread: its rank,
    /// attributes, and matching state are discarded.
    ///
    /// Collective over every thread of the communicator. Errors without
    /// side effects if this thread still has incomplete requests.
    pub fn finish(&self) -> Result<()> {
        let inner = &self.inner;
        let rc = BINDINGS.with(|m| m.borrow().get(&inner.id).cloned());
        let rc = rc.ok_or_else(|| {
            Error::InvalidState("finish() without a matching start() on this thread".into())
        })?;

        p2p::check_quiescent(&mut rc.borrow_mut())?;

        let gen_enter = rc.borrow().gen;
        let local = inner.local_count();
        let dep = inner.departures.fetch_add(1, Ordering::AcqRel) + 1;
        if dep == local {
            if inner.proc_count > 1 {
                // Peers stop sending into this process once all of them
                // reach finish; per-connection FIFO then guarantees every
                // data frame is already routed before the tally completes.
                let mesh = inner.mesh()?;
                let phase = gen_enter / 2;
                mesh.broadcast_ctrl(CtrlOp::Finish, phase, 0)?;
                mesh.wait_ctrl(CtrlOp::Finish, phase, inner.proc_count - 1)?;
            }
            inner.departures.store(0, Ordering::Relaxed);
            inner.arrivals.store(0, Ordering::Relaxed);
            inner.generation.fetch_add(1, Ordering::Release);
        } else {
            let mut spin = SpinWait::new(inner.config.poll_yield_every);
            while inner.generation.load(Ordering::Acquire) == gen_enter {
                spin.idle();
            }
        }

        // Every participant has left the window; no new cells can land in
        // this slot. Drop whatever the activation left behind.
        {
            let mut b = rc.borrow_mut();
            p2p::drain_at_finish(inner, &mut b);
        }
        BINDINGS.with(|m| m.borrow_mut().remove(&inner.id));
        Ok(())
    }

    /// Release the communicator. Must be called outside activation windows
    /// (one thread per process); the handle and its clones become invalid.
    ///
    /// Collective over the processes of the parent group.
    pub fn free(&self) -> Result<()> {
        let inner = &self.inner;
        if inner.generation.load(Ordering::Acquire) % 2 == 1 {
            return Err(Error::InvalidState(
                "free() while the communicator is active".into(),
            ));
        }
        if inner.freed.swap(true, Ordering::AcqRel) {
            return Err(Error::InvalidHandle);
        }
        if inner.proc_count > 1 {
            let mesh = inner.mesh()?;
            let phase = mesh.next_phase(CtrlOp::Free);
            mesh.broadcast_ctrl(CtrlOp::Free, phase, 0)?;
            mesh.wait_ctrl(CtrlOp::Free, phase, inner.proc_count - 1)?;
            mesh.detach_comm(inner.id);
        }
        Ok(())
    }

    /// This thread's rank within the communicator. Valid only between
    /// start and finish.
    pub fn comm_rank(&self) -> Result<usize> {
        self.inner.with_binding(|_, b| Ok(b.global_rank))
    }

    /// Total ranks (threads across all processes). Valid only between
    /// start and finish.
    pub fn comm_size(&self) -> Result<usize> {
        self.inner.with_binding(|c, _| Ok(c.table.total()))
    }

    /// Total ranks, queryable outside activation windows (for harnesses
    /// and launch-time sizing).
    pub fn total_ranks(&self) -> usize {
        self.inner.table.total()
    }

    /// Threads this process contributes.
    pub fn local_threads(&self) -> usize {
        self.inner.local_count()
    }

    pub fn proc_rank(&self) -> usize {
        self.inner.proc_rank
    }

    pub fn proc_count(&self) -> usize {
        self.inner.proc_count
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    /// Attach a `u64` value to `key` for the duration of the current
    /// activation window. Attributes are per thread and vanish at finish.
    pub fn attr_set(&self, key: u32, value: u64) -> Result<()> {
        self.inner.with_binding(|_, b| {
            b.attrs.insert(key, value);
            Ok(())
        })
    }

    /// Read an attribute set earlier in the same activation window.
    pub fn attr_get(&self, key: u32) -> Result<Option<u64>> {
        self.inner.with_binding(|_, b| Ok(b.attrs.get(&key).copied()))
    }

    /// Message counters for the calling thread's current binding.
    pub fn stats(&self) -> Result<Stats> {
        self.inner.with_binding(|_, b| Ok(b.stats.clone()))
    }
}

impl std::fmt::Debug for Threadcomm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Threadcomm")
            .field("id", &self.inner.id)
            .field("total_ranks", &self.inner.table.total())
            .field("proc_rank", &self.inner.proc_rank)
            .field("proc_count", &self.inner.proc_count)
            .finish()
    }
}
