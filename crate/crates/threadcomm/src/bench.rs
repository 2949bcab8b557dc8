//! Benchmark kernels and their orchestration.
//!
//! Each benchmark spawns one thread per local rank, opens an activation
//! window, runs a timed kernel, and reports a CSV row per configuration.
//! The reported statistic is the *median* over a fixed number of timed
//! batches — robust against scheduler noise on shared desk machines.
//! Result aggregation happens after the threads join; nothing but the
//! communicator is shared during the timed loops.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Barrier;
use std::time::Instant;

use crate::collectives::{BarrierVariant, OpKind};
use crate::comm::{ProcGroup, Threadcomm};
use crate::config::{Config, Protocol};
use crate::error::{Error, Result};
use crate::p2p::MatchSpec;

/// The exact header line every CSV emitter writes.
pub const CSV_HEADER: &str =
    "benchmark,nprocs,nthreads,msg_size,variant,iterations,latency_us,bandwidth_MBps";

/// Timed batches per configuration; the row reports their median.
pub const SAMPLES: usize = 5;

/// One result row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub benchmark: &'static str,
    pub nprocs: usize,
    pub nthreads: usize,
    pub msg_size: usize,
    pub variant: String,
    pub iterations: usize,
    pub latency_us: f64,
    /// Only bandwidth runs derive a rate.
    pub bandwidth_mbps: Option<f64>,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        let bw = self
            .bandwidth_mbps
            .map(|b| format!("{b:.3}"))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.4},{}",
            self.benchmark,
            self.nprocs,
            self.nthreads,
            self.msg_size,
            self.variant,
            self.iterations,
            self.latency_us,
            bw
        )
    }
}

/// Median of the recorded samples, cross-checked against an independent
/// selection so a sorting bug cannot silently skew reports.
pub fn median(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "median of no samples");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaNs in timings"));
    let mid = sorted.len() / 2;
    let m = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    let mut check = samples.to_vec();
    let (_, nth, _) =
        check.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("no NaNs in timings"));
    assert!(
        (sorted.len() % 2 == 0) || (*nth == m),
        "median cross-check failed: {m} vs {nth}"
    );
    m
}

/// Common benchmark parameters (one struct so the CLI maps onto it 1:1).
#[derive(Debug, Clone)]
pub struct BenchOpts {
    /// Threads per process.
    pub threads: usize,
    /// Message sizes in bytes (reduce interprets them as element counts ×8).
    pub sizes: Vec<usize>,
    pub protocol: Protocol,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Verify payloads/results every iteration.
    pub verify: bool,
    /// Pin thread i to core i (mod cores).
    pub bind: bool,
}

impl Default for BenchOpts {
    fn default() -> BenchOpts {
        BenchOpts {
            threads: 2,
            sizes: default_sizes(),
            protocol: Protocol::Auto,
            iters: 1000,
            warmup: 1000,
            seed: 1,
            verify: false,
            bind: false,
        }
    }
}

/// Powers of two, 1 B through 4 MiB.
pub fn default_sizes() -> Vec<usize> {
    (0..=22).map(|p| 1usize << p).collect()
}

/// Large transfers get proportionally fewer iterations so sweeps stay
/// desk-sized; explicit `--iters` still sets the 8 KiB-and-under count.
fn scaled_iters(base: usize, size: usize) -> usize {
    let scale = match size {
        0..=8192 => 1,
        8193..=262_144 => 8,
        _ => 64,
    };
    (base / scale).max(8)
}

fn pin_to_core(idx: usize) {
    // SAFETY: plain affinity syscall on this thread; failure is harmless
    // (the benchmark simply runs unpinned).
    unsafe {
        let cores = libc::sysconf(libc::_SC_NPROCESSORS_ONLN).max(1) as usize;
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(idx % cores, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
}

/// Spawn `threads` workers, run `f(thread_idx)` inside an activation
/// window on each, and collect the per-thread results in index order.
fn run_region<R, F>(comm: &Threadcomm, opts: &BenchOpts, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    let results = std::thread::scope(|s| {
        let handles: Vec<_> = (0..opts.threads)
            .map(|t| {
                let f = &f;
                let bind = opts.bind;
                s.spawn(move || {
                    if bind {
                        pin_to_core(t);
                    }
                    comm.start()?;
                    let out = f(t);
                    // Close the window even on error so peers can finish.
                    let fin = comm.finish();
                    let r = out?;
                    fin?;
                    Ok(r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::InvalidState("benchmark thread panicked".into()))?)
            .collect::<Result<Vec<R>>>()
    })?;
    Ok(results)
}

fn comm_for(group: &ProcGroup, opts: &BenchOpts) -> Result<Threadcomm> {
    let mut cfg = Config::default();
    cfg.protocol = opts.protocol;
    Threadcomm::init_with_config(group, opts.threads, cfg)
}

fn pattern_byte(seed: u64, i: usize) -> u8 {
    (seed as usize)
        .wrapping_mul(0x9E37)
        .wrapping_add(i.wrapping_mul(0x85EB))
        .to_le_bytes()[0]
}

// ---------------------------------------------------------------------------
// Latency: ping-pong between global ranks 0 and 1
// ---------------------------------------------------------------------------

/// Ping-pong latency sweep. Rank 0 sends, rank 1 echoes; the row reports
/// the median half round-trip per size. Needs at least two ranks; ranks
/// beyond the pair sit the window out.
pub fn latency(group: &ProcGroup, opts: &BenchOpts) -> Result<Vec<BenchRow>> {
    let total = opts.threads * group.proc_count();
    if total < 2 {
        return Err(Error::InvalidArgument(
            "latency needs at least 2 ranks (threads × processes)".into(),
        ));
    }
    let comm = comm_for(group, opts)?;
    let mut rows = Vec::new();
    for &size in &opts.sizes {
        let iters = scaled_iters(opts.iters, size);
        let warmup = scaled_iters(opts.warmup, size);
        let medians = run_region(&comm, opts, |_| {
            let me = comm.comm_rank()?;
            if me > 1 {
                return Ok(None);
            }
            let peer = 1 - me;
            let mut buf = vec![0u8; size];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = pattern_byte(opts.seed, i);
            }
            let spec = MatchSpec::from_rank(peer, 0);
            let mut samples = Vec::with_capacity(SAMPLES);
            for batch in 0..(SAMPLES + 1) {
                let n = if batch == 0 { warmup } else { iters };
                let t0 = Instant::now();
                for _ in 0..n {
                    if me == 0 {
                        comm.send(&buf, peer, 0)?;
                        comm.recv(&mut buf, spec)?;
                    } else {
                        comm.recv(&mut buf, spec)?;
                        comm.send(&buf, peer, 0)?;
                    }
                    if opts.verify {
                        for (i, b) in buf.iter().enumerate() {
                            if *b != pattern_byte(opts.seed, i) {
                                return Err(Error::Protocol(format!(
                                    "echo corrupted at byte {i}"
                                )));
                            }
                        }
                    }
                }
                let elapsed = t0.elapsed();
                if batch > 0 {
                    // Half round-trip, in microseconds.
                    samples.push(elapsed.as_secs_f64() * 1e6 / (2.0 * n as f64));
                }
            }
            Ok(Some(median(&samples)))
        })?;
        if let Some(lat) = medians.into_iter().flatten().next() {
            rows.push(BenchRow {
                benchmark: "latency",
                nprocs: group.proc_count(),
                nthreads: opts.threads,
                msg_size: size,
                variant: protocol_name(opts.protocol).into(),
                iterations: iters,
                latency_us: lat,
                bandwidth_mbps: None,
            });
        }
    }
    comm.free()?;
    Ok(rows)
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Auto => "auto",
        Protocol::Eager => "eager",
        Protocol::OneCopy => "onecopy",
        Protocol::Pipeline => "pipeline",
    }
}

// ---------------------------------------------------------------------------
// Bandwidth: windowed unidirectional stream, rank 0 → rank 1
// ---------------------------------------------------------------------------

/// Messages in flight before the receiver acknowledges.
pub const BW_WINDOW: usize = 64;

/// Windowed stream bandwidth. Rank 0 posts [`BW_WINDOW`] nonblocking sends,
/// waits for them, then waits for a 1-byte acknowledgement; the rate is
/// bytes moved over elapsed time, median across batches.
pub fn bandwidth(group: &ProcGroup, opts: &BenchOpts) -> Result<Vec<BenchRow>> {
    let total = opts.threads * group.proc_count();
    if total < 2 {
        return Err(Error::InvalidArgument(
            "bandwidth needs at least 2 ranks (threads × processes)".into(),
        ));
    }
    let comm = comm_for(group, opts)?;
    let mut rows = Vec::new();
    for &size in &opts.sizes {
        // One "iteration" is a whole window; keep totals desk-sized.
        let windows = (scaled_iters(opts.iters, size) / 16).clamp(2, 64);
        let warmup_windows = (windows / 4).max(1);
        let medians = run_region(&comm, opts, |_| {
            let me = comm.comm_rank()?;
            if me > 1 {
                return Ok(None);
            }
            let mut samples = Vec::with_capacity(SAMPLES);
            let mut buf = vec![0u8; size.max(1)];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = pattern_byte(opts.seed, i);
            }
            let mut ack = [0u8; 1];
            for batch in 0..(SAMPLES + 1) {
                let n = if batch == 0 { warmup_windows } else { windows };
                let t0 = Instant::now();
                for _ in 0..n {
                    if me == 0 {
                        let reqs = (0..BW_WINDOW)
                            .map(|_| comm.isend(&buf[..size], 1, 0))
                            .collect::<Result<Vec<_>>>()?;
                        for r in reqs {
                            r.wait()?;
                        }
                        comm.recv(&mut ack, MatchSpec::from_rank(1, 1))?;
                    } else {
                        for _ in 0..BW_WINDOW {
                            comm.recv(&mut buf[..size], MatchSpec::from_rank(0, 0))?;
                            if opts.verify {
                                for (i, b) in buf[..size].iter().enumerate() {
                                    if *b != pattern_byte(opts.seed, i) {
                                        return Err(Error::Protocol(format!(
                                            "stream corrupted at byte {i}"
                                        )));
                                    }
                                }
                            }
                        }
                        comm.send(&ack, 0, 1)?;
                    }
                }
                let elapsed = t0.elapsed().as_secs_f64();
                if batch > 0 {
                    let bytes = (size * BW_WINDOW * n) as f64;
                    samples.push((bytes / 1e6 / elapsed, elapsed * 1e6 / (BW_WINDOW * n) as f64));
                }
            }
            let rates: Vec<f64> = samples.iter().map(|s| s.0).collect();
            let lats: Vec<f64> = samples.iter().map(|s| s.1).collect();
            Ok(Some((median(&rates), median(&lats))))
        })?;
        if let Some((mbps, lat)) = medians.into_iter().flatten().next() {
            rows.push(BenchRow {
                benchmark: "bandwidth",
                nprocs: group.proc_count(),
                nthreads: opts.threads,
                msg_size: size,
                variant: protocol_name(opts.protocol).into(),
                iterations: windows * BW_WINDOW,
                latency_us: lat,
                bandwidth_mbps: Some(mbps),
            });
        }
    }
    comm.free()?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Barrier
// ---------------------------------------------------------------------------

/// Which barrier implementations a barrier run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierBench {
    Message,
    Atomic,
    /// The platform's built-in thread barrier, as the native baseline.
    Native,
}

impl BarrierBench {
    pub fn name(self) -> &'static str {
        match self {
            BarrierBench::Message => "message",
            BarrierBench::Atomic => "atomic",
            BarrierBench::Native => "native",
        }
    }
}

/// Per-barrier latency for one variant. The native baseline synchronizes
/// only this process's threads (it has no cross-process reach), so it is
/// reported with nprocs as seen — comparisons against it are only
/// meaningful single-process.
pub fn barrier(group: &ProcGroup, opts: &BenchOpts, which: BarrierBench) -> Result<BenchRow> {
    let iters = opts.iters.max(1);
    let warmup = opts.warmup.max(1);
    let lat = match which {
        BarrierBench::Native => {
            let bar = Barrier::new(opts.threads);
            let medians = std::thread::scope(|s| {
                let handles: Vec<_> = (0..opts.threads)
                    .map(|t| {
                        let bar = &bar;
                        let bind = opts.bind;
                        s.spawn(move || {
                            if bind {
                                pin_to_core(t);
                            }
                            let mut samples = Vec::with_capacity(SAMPLES);
                            for batch in 0..(SAMPLES + 1) {
                                let n = if batch == 0 { warmup } else { iters };
                                let t0 = Instant::now();
                                for _ in 0..n {
                                    bar.wait();
                                }
                                if batch > 0 {
                                    samples
                                        .push(t0.elapsed().as_secs_f64() * 1e6 / n as f64);
                                }
                            }
                            median(&samples)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("barrier thread panicked"))
                    .collect::<Vec<f64>>()
            });
            medians[0]
        }
        BarrierBench::Message | BarrierBench::Atomic => {
            let variant = match which {
                BarrierBench::Message => BarrierVariant::Message,
                _ => BarrierVariant::Atomic,
            };
            let comm = comm_for(group, opts)?;
            let medians = run_region(&comm, opts, |_| {
                let mut samples = Vec::with_capacity(SAMPLES);
                for batch in 0..(SAMPLES + 1) {
                    let n = if batch == 0 { warmup } else { iters };
                    let t0 = Instant::now();
                    for _ in 0..n {
                        comm.barrier(variant)?;
                    }
                    if batch > 0 {
                        samples.push(t0.elapsed().as_secs_f64() * 1e6 / n as f64);
                    }
                }
                Ok(median(&samples))
            })?;
            comm.free()?;
            medians[0]
        }
    };
    Ok(BenchRow {
        benchmark: "barrier",
        nprocs: group.proc_count(),
        nthreads: opts.threads,
        msg_size: 0,
        variant: which.name().into(),
        iterations: iters,
        latency_us: lat,
        bandwidth_mbps: None,
    })
}

// ---------------------------------------------------------------------------
// Reduce
// ---------------------------------------------------------------------------

/// Reduce-to-root latency at `count` i64 elements per rank, including the
/// per-iteration initialization of each rank's private array (so the
/// measurement covers what a compute loop would actually pay). Every rank
/// contributes its rank index per element; with verification on, the root
/// checks every element equals N(N−1)/2 every iteration.
pub fn reduce(group: &ProcGroup, opts: &BenchOpts, count: usize) -> Result<BenchRow> {
    let comm = comm_for(group, opts)?;
    let total = opts.threads * group.proc_count();
    let expect = (total * (total - 1) / 2) as i64;
    let iters = scaled_iters(opts.iters, count * 8);
    let warmup = scaled_iters(opts.warmup, count * 8);
    let medians = run_region(&comm, opts, |_| {
        let me = comm.comm_rank()?;
        let mut send = vec![0i64; count];
        let mut recv = vec![0i64; if me == 0 { count } else { 0 }];
        let mut samples = Vec::with_capacity(SAMPLES);
        for batch in 0..(SAMPLES + 1) {
            let n = if batch == 0 { warmup } else { iters };
            let t0 = Instant::now();
            for _ in 0..n {
                send.fill(me as i64);
                comm.reduce_i64(&send, &mut recv, OpKind::Sum, 0)?;
                if opts.verify && me == 0 {
                    if let Some(bad) = recv.iter().position(|&v| v != expect) {
                        return Err(Error::Protocol(format!(
                            "reduce element {bad} is {} (expected {expect})",
                            recv[bad]
                        )));
                    }
                }
            }
            if batch > 0 {
                samples.push(t0.elapsed().as_secs_f64() * 1e6 / n as f64);
            }
        }
        Ok(median(&samples))
    })?;
    comm.free()?;
    Ok(BenchRow {
        benchmark: "reduce",
        nprocs: group.proc_count(),
        nthreads: opts.threads,
        msg_size: count * 8,
        variant: "message".into(),
        iterations: iters,
        latency_us: medians[0],
        bandwidth_mbps: None,
    })
}

/// The native-threads baseline for [`reduce`]: each thread fills a private
/// array, a barrier closes the fill phase, thread 0 folds all partials,
/// and a second barrier releases everyone — the classic manual
/// parallel-reduction shape, no communicator involved.
pub fn reduce_native(opts: &BenchOpts, count: usize) -> Result<BenchRow> {
    let threads = opts.threads;
    let expect = (threads * (threads - 1) / 2) as i64;
    let iters = scaled_iters(opts.iters, count * 8);
    let warmup = scaled_iters(opts.warmup, count * 8);
    let bar = Barrier::new(threads);
    // One private array per thread, all visible to thread 0 for the fold.
    let partials: Vec<Vec<AtomicI64>> = (0..threads)
        .map(|_| (0..count).map(|_| AtomicI64::new(0)).collect())
        .collect();
    let result: Vec<AtomicI64> = (0..count).map(|_| AtomicI64::new(0)).collect();

    let medians = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let bar = &bar;
                let partials = &partials;
                let result = &result;
                let bind = opts.bind;
                let verify = opts.verify;
                s.spawn(move || -> Result<f64> {
                    if bind {
                        pin_to_core(t);
                    }
                    let mut samples = Vec::with_capacity(SAMPLES);
                    for batch in 0..(SAMPLES + 1) {
                        let n = if batch == 0 { warmup } else { iters };
                        let t0 = Instant::now();
                        for _ in 0..n {
                            for v in &partials[t] {
                                v.store(t as i64, Ordering::Relaxed);
                            }
                            bar.wait();
                            if t == 0 {
                                for i in 0..count {
                                    let mut acc = 0i64;
                                    for p in partials {
                                        acc += p[i].load(Ordering::Relaxed);
                                    }
                                    result[i].store(acc, Ordering::Relaxed);
                                }
                                if verify {
                                    if let Some(bad) = (0..count)
                                        .find(|&i| result[i].load(Ordering::Relaxed) != expect)
                                    {
                                        return Err(Error::Protocol(format!(
                                            "native reduce element {bad} wrong"
                                        )));
                                    }
                                }
                            }
                            bar.wait();
                        }
                        if batch > 0 {
                            samples.push(t0.elapsed().as_secs_f64() * 1e6 / n as f64);
                        }
                    }
                    Ok(median(&samples))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::InvalidState("benchmark thread panicked".into()))?)
            .collect::<Result<Vec<f64>>>()
    })?;

    Ok(BenchRow {
        benchmark: "reduce",
        nprocs: 1,
        nthreads: threads,
        msg_size: count * 8,
        variant: "native".into(),
        iterations: iters,
        latency_us: medians[0],
        bandwidth_mbps: None,
    })
}
