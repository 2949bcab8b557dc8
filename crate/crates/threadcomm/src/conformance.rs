//! Deterministic, self-verifying workloads.
//!
//! These routines generate a seeded schedule that every rank derives
//! independently, execute it with blocking verbs, and verify payload bytes
//! and protocol-counter accounting as they go. They back both the
//! `tcbench conformance` subcommand and the integration tests, so a failure
//! reproduces from just the seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comm::Threadcomm;
use crate::error::{Error, Result};
use crate::p2p::{MatchSpec, SendPath};
use crate::queue::MpscQueue;

/// Message sizes exercised when the caller does not pick their own. Small
/// sizes repeat so the draw is skewed toward them; the 4095/4096/4097 run
/// brackets the eager threshold and 8192/8193 brackets the cell capacity
/// (at the default configuration).
pub const DEFAULT_SIZES: &[usize] = &[
    0,
    1,
    1,
    7,
    64,
    64,
    256,
    1024,
    4095,
    4096,
    4097,
    8192,
    8193,
    65_536,
    1 << 20,
    4 << 20,
];

/// Options for [`p2p_schedule`].
pub struct P2pOpts {
    /// Number of transfers in the schedule.
    pub messages: usize,
    /// Seed shared by all ranks.
    pub seed: u64,
    /// Candidate message sizes, drawn uniformly.
    pub sizes: Vec<usize>,
}

impl P2pOpts {
    pub fn new(messages: usize, seed: u64) -> P2pOpts {
        P2pOpts {
            messages,
            seed,
            sizes: DEFAULT_SIZES.to_vec(),
        }
    }
}

/// What one rank saw while executing a schedule.
#[derive(Debug, Default, Clone)]
pub struct P2pReport {
    pub sent: u64,
    pub received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Clone, Copy)]
struct Entry {
    src: usize,
    dst: usize,
    tag: i32,
    size: usize,
}

fn build_schedule(opts: &P2pOpts, nranks: usize) -> Vec<Entry> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.messages)
        .map(|_| Entry {
            src: rng.gen_range(0..nranks),
            dst: rng.gen_range(0..nranks),
            tag: rng.gen_range(0..1024),
            size: opts.sizes[rng.gen_range(0..opts.sizes.len())],
        })
        .collect()
}

/// Each transfer's payload is a ChaCha stream keyed by (seed, entry index),
/// so the receiver can regenerate and compare without any side channel.
fn fill_pattern(buf: &mut [u8], seed: u64, entry_idx: u64) {
    ChaCha8Rng::seed_from_u64(seed ^ entry_idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)).fill_bytes(buf);
}

/// Run a seeded all-pairs schedule on the calling rank.
///
/// Must be called inside an activation window, by every rank, with
/// identical `opts`. Each entry is one blocking transfer; ranks process
/// their involvements in schedule order, which makes the whole schedule
/// deadlock-free (the globally oldest unfinished transfer always has its
/// receiver's next action be that receive).
///
/// Verifies, per rank:
/// * payload bytes of every received message against the seeded pattern;
/// * the envelope (source, tag, length);
/// * the protocol counters in [`crate::Stats`] against an independent
///   prediction of which path each send must take.
pub fn p2p_schedule(comm: &Threadcomm, opts: &P2pOpts) -> Result<P2pReport> {
    let me = comm.comm_rank()?;
    let nranks = comm.comm_size()?;
    let schedule = build_schedule(opts, nranks);

    let max_size = opts.sizes.iter().copied().max().unwrap_or(0);
    let mut sbuf = vec![0u8; max_size];
    let mut rbuf = vec![0u8; max_size];
    let mut expect = vec![0u8; max_size];

    let base = comm.stats()?;
    let mut predicted = PathCounts::default();
    let mut report = P2pReport::default();

    for (i, e) in schedule.iter().enumerate() {
        if e.src == me {
            fill_pattern(&mut sbuf[..e.size], opts.seed, i as u64);
            predicted.add(comm.predict_send_path(e.size, e.dst)?);
            comm.send(&sbuf[..e.size], e.dst, e.tag)?;
            report.sent += 1;
            report.bytes_sent += e.size as u64;
        }
        if e.dst == me {
            rbuf[..e.size].fill(0xAA);
            let env = comm.recv(&mut rbuf[..e.size], MatchSpec::from_rank(e.src, e.tag))?;
            if env.src_rank != e.src || env.tag != e.tag || env.msg_len != e.size {
                return Err(Error::Protocol(format!(
                    "entry {i}: envelope ({}, tag {}, {} B) does not match the schedule \
                     ({}, tag {}, {} B)",
                    env.src_rank, env.tag, env.msg_len, e.src, e.tag, e.size
                )));
            }
            fill_pattern(&mut expect[..e.size], opts.seed, i as u64);
            if rbuf[..e.size] != expect[..e.size] {
                let off = rbuf[..e.size]
                    .iter()
                    .zip(&expect[..e.size])
                    .position(|(a, b)| a != b)
                    .unwrap_or(0);
                return Err(Error::Protocol(format!(
                    "entry {i}: payload corrupt at byte {off} of {} (rank {} from {})",
                    e.size, me, e.src
                )));
            }
            report.received += 1;
            report.bytes_received += e.size as u64;
        }
    }

    let end = comm.stats()?;
    let actual = PathCounts {
        eager: end.eager_sends - base.eager_sends,
        onecopy: end.onecopy_sends - base.onecopy_sends,
        pipeline: end.pipeline_sends - base.pipeline_sends,
    };
    if actual != predicted {
        return Err(Error::Protocol(format!(
            "rank {me}: protocol counters (eager/1-copy/pipeline) were \
             {}/{}/{} but the configuration predicts {}/{}/{}",
            actual.eager,
            actual.onecopy,
            actual.pipeline,
            predicted.eager,
            predicted.onecopy,
            predicted.pipeline
        )));
    }
    if end.sends - base.sends != report.sent || end.recvs - base.recvs != report.received {
        return Err(Error::Protocol(format!(
            "rank {me}: send/recv totals ({}/{}) disagree with the schedule ({}/{})",
            end.sends - base.sends,
            end.recvs - base.recvs,
            report.sent,
            report.received
        )));
    }
    Ok(report)
}

#[derive(Debug, Default, PartialEq, Eq)]
struct PathCounts {
    eager: u64,
    onecopy: u64,
    pipeline: u64,
}

impl PathCounts {
    fn add(&mut self, path: SendPath) {
        match path {
            SendPath::EagerCell => self.eager += 1,
            SendPath::OneCopy => self.onecopy += 1,
            SendPath::Pipeline => self.pipeline += 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Inbox stress
// ---------------------------------------------------------------------------

/// Result of [`queue_stress`].
#[derive(Debug)]
pub struct QueueStressReport {
    pub delivered: u64,
    /// Times the consumer found the queue (transiently) empty.
    pub empty_polls: u64,
}

/// Hammer one inbox queue with `producers` threads enqueueing
/// `per_producer` cells each (drawn from a shared pool, so exhaustion and
/// refill paths are exercised), while the caller's thread consumes.
///
/// Verifies per-producer FIFO order, exactly-once delivery, and that every
/// pool cell is back on a free list afterwards. The seed perturbs each
/// producer's pacing so interleavings differ run to run while staying
/// reproducible.
pub fn queue_stress(producers: usize, per_producer: usize, seed: u64) -> Result<QueueStressReport> {
    use std::sync::atomic::{AtomicBool, Ordering};

    if producers == 0 || producers > 64 {
        return Err(Error::InvalidArgument(
            "queue_stress wants 1..=64 producers".into(),
        ));
    }
    // A deliberately small pool keeps acquire/release contended.
    let pool = crate::cell::CellPool::new(1, 64, 64);
    let queue = MpscQueue::new();
    let failed = AtomicBool::new(false);

    let report = std::thread::scope(|s| -> Result<QueueStressReport> {
        for p in 0..producers {
            let pool = &pool;
            let queue = &queue;
            let failed = &failed;
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64) << 32);
                for i in 0..per_producer {
                    let cell = loop {
                        if failed.load(Ordering::Relaxed) {
                            return;
                        }
                        match pool.acquire(0) {
                            Some(c) => break c,
                            None => std::thread::yield_now(),
                        }
                    };
                    // SAFETY: acquired cells are exclusively ours until
                    // enqueued.
                    unsafe {
                        let msg = cell.as_ref().msg_mut();
                        msg.src_rank = p as u32;
                        msg.seq = i as u64;
                    }
                    queue.enqueue(cell);
                    // Occasional pauses shake up the interleaving.
                    if rng.gen_ratio(1, 64) {
                        std::thread::yield_now();
                    }
                }
            });
        }

        let total = (producers * per_producer) as u64;
        let mut next_seq = vec![0u64; producers];
        let mut delivered = 0u64;
        let mut empty_polls = 0u64;
        let mut idle = 0u32;
        while delivered < total {
            match queue.dequeue() {
                None => {
                    // The queue can transiently read empty while a producer
                    // is mid-enqueue; keep polling.
                    empty_polls += 1;
                    idle += 1;
                    if idle > 10_000 {
                        idle = 0;
                        std::thread::yield_now();
                    }
                }
                Some(cell) => {
                    idle = 0;
                    // SAFETY: dequeued cells are exclusively ours.
                    let (p, seq) = unsafe {
                        let msg = cell.as_ref().msg_mut();
                        (msg.src_rank as usize, msg.seq)
                    };
                    pool.release(cell);
                    if p >= producers || seq != next_seq[p] {
                        failed.store(true, Ordering::Relaxed);
                        return Err(Error::Protocol(format!(
                            "producer {p} delivered seq {seq}, expected {}",
                            next_seq.get(p).copied().unwrap_or(0)
                        )));
                    }
                    next_seq[p] += 1;
                    delivered += 1;
                }
            }
        }
        Ok(QueueStressReport {
            delivered,
            empty_polls,
        })
    })?;

    if queue.dequeue().is_some() {
        return Err(Error::Protocol("cells left in the queue after the count completed".into()));
    }
    if pool.free_total() != pool.total_cells() {
        return Err(Error::Protocol(format!(
            "pool leaked cells: {} free of {}",
            pool.free_total(),
            pool.total_cells()
        )));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Collectives oracles
// ---------------------------------------------------------------------------

/// What one rank's collective-oracle run verified.
#[derive(Debug, Default)]
pub struct CollReport {
    pub checks: u64,
}

/// Rank `r`'s contribution for element `i`: small, signed, deterministic.
fn contribution(seed: u64, r: usize, i: usize) -> i64 {
    let mut x = seed ^ (r as u64) << 40 ^ (i as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
    // splitmix-style avalanche
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ((x >> 33) as i64 % 1000) - 500
}

/// Verify reduce/allreduce/bcast against sequential-fold oracles computed
/// independently on every rank. Must be called inside an activation
/// window by all ranks with identical arguments.
///
/// Integer operators must match the fold exactly; FLOAT64 SUM is allowed
/// 1e-9 *relative* error because the binomial combine order differs from
/// the sequential fold. Roots rotate across calls.
pub fn collectives_oracle(comm: &Threadcomm, seed: u64, counts: &[usize]) -> Result<CollReport> {
    let me = comm.comm_rank()?;
    let n = comm.comm_size()?;
    let mut report = CollReport::default();
    fn check(me: usize, ok: bool, what: &str, count: usize) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "rank {me}: {what} oracle mismatch at count {count}"
            )))
        }
    }

    for (ci, &count) in counts.iter().enumerate() {
        let root = ci % n;

        // Integer allreduce: exact for every operator.
        for op in [crate::OpKind::Sum, crate::OpKind::Min, crate::OpKind::Max] {
            let send: Vec<i64> = (0..count).map(|i| contribution(seed, me, i)).collect();
            let mut recv = vec![0i64; count];
            comm.allreduce_i64(&send, &mut recv, op)?;
            let ok = (0..count).all(|i| {
                let oracle = (0..n)
                    .map(|r| contribution(seed, r, i))
                    .reduce(|a, b| match op {
                        crate::OpKind::Sum => a.wrapping_add(b),
                        crate::OpKind::Min => a.min(b),
                        crate::OpKind::Max => a.max(b),
                    })
                    .expect("n >= 1");
                recv[i] == oracle
            });
            check(me, ok, &format!("allreduce i64 {op:?}"), count)?;
            report.checks += 1;
        }

        // i32 reduce to a rotating root.
        {
            let send: Vec<i32> = (0..count)
                .map(|i| contribution(seed, me, i) as i32)
                .collect();
            let mut recv = vec![0i32; if me == root { count } else { 0 }];
            comm.reduce_i32(&send, &mut recv, crate::OpKind::Sum, root)?;
            if me == root {
                let ok = (0..count).all(|i| {
                    let oracle: i32 = (0..n)
                        .map(|r| contribution(seed, r, i) as i32)
                        .fold(0i32, |a, b| a.wrapping_add(b));
                    recv[i] == oracle
                });
                check(me, ok, "reduce i32 Sum", count)?;
                report.checks += 1;
            } else {
                report.checks += 1;
            }
        }

        // f64 SUM within 1e-9 relative error.
        {
            let send: Vec<f64> = (0..count)
                .map(|i| contribution(seed, me, i) as f64 / 7.0)
                .collect();
            let mut recv = vec![0f64; count];
            comm.allreduce_f64(&send, &mut recv, crate::OpKind::Sum)?;
            let ok = (0..count).all(|i| {
                let oracle: f64 = (0..n).map(|r| contribution(seed, r, i) as f64 / 7.0).sum();
                let tol = 1e-9 * oracle.abs().max(1.0);
                (recv[i] - oracle).abs() <= tol
            });
            check(me, ok, "allreduce f64 Sum", count)?;
            report.checks += 1;
        }

        // bcast from the rotating root.
        {
            let mut buf = vec![0u8; count.max(1)];
            if me == root {
                fill_pattern(&mut buf, seed, (ci as u64) << 16 | root as u64);
            }
            comm.bcast(&mut buf, root)?;
            let mut expect = vec![0u8; count.max(1)];
            fill_pattern(&mut expect, seed, (ci as u64) << 16 | root as u64);
            check(me, buf == expect, "bcast", count)?;
            report.checks += 1;
        }
    }
    Ok(report)
}

/// Run `iters` barriers, checking after each that every *local* rank had
/// arrived before anyone left (an early exit shows up as a stale stamp).
///
/// `stamps` must be shared by all threads of this process and have one
/// slot per local rank; the caller zeroes it before the window starts.
pub fn barrier_soak(
    comm: &Threadcomm,
    variant: crate::BarrierVariant,
    iters: usize,
    stamps: &[std::sync::atomic::AtomicU64],
) -> Result<()> {
    use std::sync::atomic::Ordering;

    let me = comm.comm_rank()?;
    let base = comm.inner.rank_base();
    let ltid = me - base;
    if stamps.len() != comm.inner.local_count() {
        return Err(Error::InvalidArgument(format!(
            "stamp array has {} slots for {} local ranks",
            stamps.len(),
            comm.inner.local_count()
        )));
    }
    for k in 0..iters {
        stamps[ltid].store(k as u64 + 1, Ordering::Release);
        comm.barrier(variant)?;
        for (r, s) in stamps.iter().enumerate() {
            let seen = s.load(Ordering::Acquire);
            if seen < k as u64 + 1 {
                return Err(Error::Protocol(format!(
                    "barrier {variant:?} early exit at iteration {k}: rank {me} left \
                     while local rank {} was still at {seen}",
                    base + r
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Lifecycle cases
// ---------------------------------------------------------------------------

/// One lifecycle case: a name and what happened.
pub type CaseResult = (&'static str, std::result::Result<(), String>);

fn case(
    out: &mut Vec<CaseResult>,
    name: &'static str,
    run: impl FnOnce() -> std::result::Result<(), String>,
) {
    out.push((name, run()));
}

fn expect_err<T>(what: &str, r: Result<T>, want: fn(&Error) -> bool) -> std::result::Result<(), String> {
    match r {
        Ok(_) => Err(format!("{what}: succeeded but an error was required")),
        Err(e) if want(&e) => Ok(()),
        Err(e) => Err(format!("{what}: wrong error kind: {e}")),
    }
}

/// The enumerated misuse cases: every one must fail with the documented
/// error kind, and the attribute-lifetime case must show attributes dying
/// at finish. Single-process by design (misuse semantics are identical
/// across the bridge, and several cases need a second live communicator).
pub fn lifecycle_cases() -> Vec<CaseResult> {
    use crate::{ProcGroup, Threadcomm};
    let mut out = Vec::new();
    let group = ProcGroup::single();

    case(&mut out, "init-zero-threads", || {
        expect_err(
            "init with 0 threads",
            Threadcomm::init(&group, 0),
            |e| matches!(e, Error::InvalidArgument(_)),
        )
    });

    case(&mut out, "double-start", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.start().map_err(|e| e.to_string())?;
        let r = expect_err("second start on a bound thread", comm.start(), |e| {
            matches!(e, Error::InvalidState(_))
        });
        comm.finish().map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "finish-without-start", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        let r = expect_err("finish while unbound", comm.finish(), |e| {
            matches!(e, Error::InvalidState(_))
        });
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "free-while-active", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.start().map_err(|e| e.to_string())?;
        let r = expect_err("free inside a window", comm.free(), |e| {
            matches!(e, Error::InvalidState(_))
        });
        comm.finish().map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "double-free", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        expect_err("second free", comm.free(), |e| {
            matches!(e, Error::InvalidHandle)
        })
    });

    case(&mut out, "send-outside-window", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        let r = expect_err("send while unbound", comm.send(b"x", 0, 0), |e| {
            matches!(e, Error::InvalidState(_))
        });
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "recv-outside-window", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        let mut buf = [0u8; 1];
        let r = expect_err(
            "recv while unbound",
            comm.recv(&mut buf, MatchSpec::any()),
            |e| matches!(e, Error::InvalidState(_)),
        );
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "rank-outside-window", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        let r = expect_err("comm_rank while unbound", comm.comm_rank(), |e| {
            matches!(e, Error::InvalidState(_))
        });
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "send-rank-out-of-range", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.start().map_err(|e| e.to_string())?;
        let r = expect_err("send to rank 1 of 1", comm.send(b"x", 1, 0), |e| {
            matches!(e, Error::InvalidArgument(_))
        });
        comm.finish().map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "tag-out-of-range", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.start().map_err(|e| e.to_string())?;
        let r = expect_err(
            "send with a reserved tag",
            comm.send(b"x", 0, crate::MAX_TAG + 1),
            |e| matches!(e, Error::InvalidArgument(_)),
        )
        .and(expect_err(
            "send with a negative tag",
            comm.send(b"x", 0, -3),
            |e| matches!(e, Error::InvalidArgument(_)),
        ));
        comm.finish().map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "reduce-wrong-buffer-size", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.start().map_err(|e| e.to_string())?;
        let send = [0u8; 7]; // not a multiple of the element size
        let mut recv = [0u8; 8];
        let r = expect_err(
            "reduce with a short sendbuf",
            comm.reduce(&send, &mut recv, 1, crate::ReduceOp::new(crate::OpKind::Sum, crate::ElemKind::Int64), 0),
            |e| matches!(e, Error::InvalidArgument(_)),
        );
        comm.finish().map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "finish-with-pending-request", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.start().map_err(|e| e.to_string())?;
        let mut buf = [0u8; 8];
        let req = comm
            .irecv(&mut buf, MatchSpec::any())
            .map_err(|e| e.to_string())?;
        let r = expect_err("finish with a posted receive", comm.finish(), |e| {
            matches!(e, Error::PendingOperations(_))
        });
        // Satisfy the receive so the window can close.
        comm.send(b"bye.....", 0, 5).map_err(|e| e.to_string())?;
        req.wait().map_err(|e| e.to_string())?;
        comm.finish().map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "recv-truncation", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.start().map_err(|e| e.to_string())?;
        comm.send(&[7u8; 16], 0, 1).map_err(|e| e.to_string())?;
        let mut small = [0u8; 8];
        let r = expect_err(
            "recv into a short buffer",
            comm.recv(&mut small, MatchSpec::from_rank(0, 1)),
            |e| matches!(e, Error::Truncation { received: 16, capacity: 8 }),
        );
        // The truncated message must have been consumed: a fresh exchange
        // works and yields the new payload.
        comm.send(&[9u8; 4], 0, 2).map_err(|e| e.to_string())?;
        let mut buf = [0u8; 4];
        comm.recv(&mut buf, MatchSpec::from_rank(0, 2))
            .map_err(|e| e.to_string())?;
        let r = r.and(if buf == [9u8; 4] {
            Ok(())
        } else {
            Err("post-truncation exchange returned stale bytes".into())
        });
        comm.finish().map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        r
    });

    case(&mut out, "attributes-die-at-finish", || {
        let comm = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        comm.start().map_err(|e| e.to_string())?;
        comm.attr_set(3, 77).map_err(|e| e.to_string())?;
        if comm.attr_get(3).map_err(|e| e.to_string())? != Some(77) {
            return Err("attribute not visible inside its window".into());
        }
        comm.finish().map_err(|e| e.to_string())?;
        let outside = expect_err("attr_get outside any window", comm.attr_get(3), |e| {
            matches!(e, Error::InvalidState(_))
        });
        comm.start().map_err(|e| e.to_string())?;
        let next_window = if comm.attr_get(3).map_err(|e| e.to_string())?.is_none() {
            Ok(())
        } else {
            Err("attribute survived into the next window".to_string())
        };
        comm.finish().map_err(|e| e.to_string())?;
        comm.free().map_err(|e| e.to_string())?;
        outside.and(next_window)
    });

    // A second communicator's handle must stay independent: freeing one
    // does not disturb the other.
    case(&mut out, "independent-handles", || {
        let a = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        let b = Threadcomm::init(&group, 1).map_err(|e| e.to_string())?;
        a.free().map_err(|e| e.to_string())?;
        b.start().map_err(|e| e.to_string())?;
        b.finish().map_err(|e| e.to_string())?;
        b.free().map_err(|e| e.to_string())
    });

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_are_deterministic_in_the_seed() {
        let opts = P2pOpts::new(512, 42);
        let a = build_schedule(&opts, 8);
        let b = build_schedule(&opts, 8);
        assert_eq!(a.len(), 512);
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.src == y.src && x.dst == y.dst && x.tag == y.tag && x.size == y.size));
    }

    #[test]
    fn pattern_differs_by_entry() {
        let mut a = vec![0u8; 64];
        let mut b = vec![0u8; 64];
        fill_pattern(&mut a, 7, 0);
        fill_pattern(&mut b, 7, 1);
        assert_ne!(a, b);
        let mut a2 = vec![0u8; 64];
        fill_pattern(&mut a2, 7, 0);
        assert_eq!(a, a2);
    }

    #[test]
    fn queue_stress_small_run() {
        let r = queue_stress(4, 2_000, 1).unwrap();
        assert_eq!(r.delivered, 8_000);
    }
}
