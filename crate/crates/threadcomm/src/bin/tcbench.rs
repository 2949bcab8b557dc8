//! Benchmark and conformance driver.
//!
//! Emits CSV benchmark rows (stdout, optionally appended to a file) and
//! runs the self-verifying conformance suites. Composes with `tcrun -n P`
//! for multi-process topologies: each process runs this binary unchanged
//! and the communicator spans all of them.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::AtomicU64;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use threadcomm::bench::{self, BenchOpts, BenchRow, BarrierBench, CSV_HEADER};
use threadcomm::conformance::{self, P2pOpts};
use threadcomm::{
    BarrierVariant, Config, Error, MatchSpec, ProcGroup, Protocol, Result, Threadcomm,
};

#[derive(Parser)]
#[command(
    name = "tcbench",
    about = "Benchmarks and conformance checks for the thread communicator",
    long_about = "Benchmarks and conformance checks for the thread communicator.\n\n\
        The `native` baselines use the platform's built-in thread barrier and a\n\
        manual per-thread partial-sum reduction; they stand in for a compiler\n\
        runtime's primitives without depending on one. Run under `tcrun -n P`\n\
        to span processes."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Threads per process (default 2; `reduce` defaults to 16).
    #[arg(long)]
    threads: Option<usize>,
    /// Comma-separated message sizes in bytes (`reduce`: element counts).
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Protocol policy: auto|eager|onecopy|pipeline.
    #[arg(long, default_value = "auto")]
    protocol: Protocol,
    /// Measured iterations per batch (scaled down for large sizes);
    /// message count for `conformance --suite p2p`.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Warmup iterations before the first timed batch.
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    /// Append rows to this CSV file as well as stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Seed for payload patterns and schedules.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Verify payloads/results on every iteration.
    #[arg(long)]
    verify: bool,
    /// Pin thread i to core i (mod available cores).
    #[arg(long)]
    bind: bool,
}

impl Common {
    fn bench_opts(&self, default_threads: usize) -> BenchOpts {
        BenchOpts {
            threads: self.threads.unwrap_or(default_threads),
            sizes: if self.sizes.is_empty() {
                bench::default_sizes()
            } else {
                self.sizes.clone()
            },
            protocol: self.protocol,
            iters: self.iters,
            warmup: self.warmup,
            seed: self.seed,
            verify: self.verify,
            bind: self.bind,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Ping-pong latency between ranks 0 and 1 (median half round-trip).
    Latency(Common),
    /// Windowed unidirectional bandwidth, rank 0 → rank 1.
    Bandwidth(Common),
    /// Per-barrier latency for the message/atomic/native variants.
    Barrier {
        #[command(flatten)]
        common: Common,
        /// Variants to run: message|atomic|native (default: all).
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
    },
    /// Reduce-to-root latency against the native-threads baseline.
    Reduce(Common),
    /// Self-verifying correctness suites; exit code 0 iff all pass.
    Conformance {
        #[command(flatten)]
        common: Common,
        /// ranks|queue|p2p|collectives|lifecycle|all
        #[arg(long, default_value = "all")]
        suite: String,
        /// Activation windows for the ranks suite.
        #[arg(long, default_value_t = 100)]
        activations: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("tcbench: {e}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    let group = ProcGroup::from_env()?;
    match cli.cmd {
        Cmd::Latency(common) => {
            let rows = bench::latency(&group, &common.bench_opts(2))?;
            emit(&group, &rows, &common.csv)?;
            Ok(0)
        }
        Cmd::Bandwidth(common) => {
            let rows = bench::bandwidth(&group, &common.bench_opts(2))?;
            emit(&group, &rows, &common.csv)?;
            Ok(0)
        }
        Cmd::Barrier { common, variant } => {
            let opts = common.bench_opts(2);
            let which = if variant.is_empty() {
                vec!["message".to_string(), "atomic".into(), "native".into()]
            } else {
                variant
            };
            let mut rows = Vec::new();
            for v in &which {
                let b = match v.as_str() {
                    "message" => BarrierBench::Message,
                    "atomic" => BarrierBench::Atomic,
                    "native" => BarrierBench::Native,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown barrier variant {other:?}"
                        )))
                    }
                };
                if b == BarrierBench::Native && group.proc_count() > 1 {
                    eprintln!(
                        "tcbench: skipping the native barrier baseline (it cannot span processes)"
                    );
                    continue;
                }
                rows.push(bench::barrier(&group, &opts, b)?);
            }
            emit(&group, &rows, &common.csv)?;
            Ok(0)
        }
        Cmd::Reduce(common) => {
            let opts = common.bench_opts(16);
            let counts = if common.sizes.is_empty() {
                vec![1, 8, 64, 512, 4096, 65_536]
            } else {
                common.sizes.clone()
            };
            let mut rows = Vec::new();
            for &count in &counts {
                if count == 0 {
                    return Err(Error::InvalidArgument("reduce count must be ≥ 1".into()));
                }
                rows.push(bench::reduce(&group, &opts, count)?);
                if group.proc_count() == 1 {
                    rows.push(bench::reduce_native(&opts, count)?);
                } else if group.proc_rank() == 0 {
                    eprintln!(
                        "tcbench: skipping the native reduce baseline (it cannot span processes)"
                    );
                }
            }
            emit(&group, &rows, &common.csv)?;
            Ok(0)
        }
        Cmd::Conformance {
            common,
            suite,
            activations,
        } => run_conformance(&group, &common, &suite, activations),
    }
}

fn emit(group: &ProcGroup, rows: &[BenchRow], csv: &Option<PathBuf>) -> Result<()> {
    if group.proc_rank() != 0 {
        return Ok(());
    }
    println!("{CSV_HEADER}");
    for r in rows {
        println!("{}", r.to_csv());
    }
    if let Some(path) = csv {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        for r in rows {
            writeln!(f, "{}", r.to_csv())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Conformance orchestration
// ---------------------------------------------------------------------------

/// Run `f(thread_idx)` on every local thread inside one activation window.
fn region<R, F>(comm: &Threadcomm, threads: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || {
                    comm.start()?;
                    let out = f(t);
                    let fin = comm.finish();
                    let r = out?;
                    fin?;
                    Ok(r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::InvalidState("worker thread panicked".into()))?
            })
            .collect()
    })
}

struct Tally {
    proc: usize,
    failures: usize,
}

impl Tally {
    fn report(&mut self, name: &str, r: Result<String>) {
        match r {
            Ok(detail) => println!("[p{}] PASS {name} {detail}", self.proc),
            Err(e) => {
                self.failures += 1;
                println!("[p{}] FAIL {name}: {e}", self.proc);
            }
        }
    }
}

fn run_conformance(
    group: &ProcGroup,
    common: &Common,
    suite: &str,
    activations: usize,
) -> Result<i32> {
    let threads = common.threads.unwrap_or(2);
    let known = ["all", "ranks", "queue", "p2p", "collectives", "lifecycle"];
    if !known.contains(&suite) {
        return Err(Error::InvalidArgument(format!(
            "unknown suite {suite:?} (expected one of {known:?})"
        )));
    }
    let all = suite == "all";
    let mut tally = Tally {
        proc: group.proc_rank(),
        failures: 0,
    };

    if all || suite == "ranks" {
        tally.report(
            "ranks",
            ranks_suite(group, threads, activations, common.seed)
                .map(|()| format!("({activations} activations × {} ranks)", threads * group.proc_count())),
        );
    }

    if all || suite == "queue" {
        for s in 0..3u64 {
            tally.report(
                "queue",
                conformance::queue_stress(8, 10_000, common.seed ^ s)
                    .map(|r| format!("(seed {}, {} cells)", common.seed ^ s, r.delivered)),
            );
        }
    }

    if all || suite == "p2p" {
        tally.report("p2p", p2p_suite(group, threads, common));
    }

    if all || suite == "collectives" {
        tally.report(
            "collectives",
            collectives_suite(group, threads, common.seed, common.iters),
        );
    }

    if all || suite == "lifecycle" {
        for (name, r) in conformance::lifecycle_cases() {
            tally.report(
                &format!("lifecycle/{name}"),
                r.map(|()| String::new()).map_err(Error::InvalidState),
            );
        }
    }

    Ok(if tally.failures == 0 { 0 } else { 1 })
}

fn p2p_suite(group: &ProcGroup, threads: usize, common: &Common) -> Result<String> {
    let mut cfg = Config::default();
    cfg.protocol = common.protocol;
    let comm = Threadcomm::init_with_config(group, threads, cfg)?;
    let opts = P2pOpts::new(common.iters.max(100), common.seed);
    let reports = region(&comm, threads, |_| conformance::p2p_schedule(&comm, &opts))?;
    comm.free()?;
    let sent: u64 = reports.iter().map(|r| r.sent).sum();
    let bytes: u64 = reports.iter().map(|r| r.bytes_sent).sum();
    Ok(format!(
        "({} messages, {} bytes, protocol {:?}, local share)",
        sent, bytes, common.protocol
    ))
}

fn collectives_suite(group: &ProcGroup, threads: usize, seed: u64, iters: usize) -> Result<String> {
    let comm = Threadcomm::init(group, threads)?;
    let counts = [1usize, 1000, 65_536];
    let soak_iters = iters.clamp(100, 100_000);
    let stamps_msg: Vec<AtomicU64> = (0..threads).map(|_| AtomicU64::new(0)).collect();
    let stamps_atomic: Vec<AtomicU64> = (0..threads).map(|_| AtomicU64::new(0)).collect();
    let checks = region(&comm, threads, |_| {
        let rep = conformance::collectives_oracle(&comm, seed, &counts)?;
        conformance::barrier_soak(&comm, BarrierVariant::Message, soak_iters, &stamps_msg)?;
        conformance::barrier_soak(&comm, BarrierVariant::Atomic, soak_iters, &stamps_atomic)?;
        Ok(rep.checks)
    })?;
    comm.free()?;
    Ok(format!(
        "({} oracle checks, 2×{} barrier soak)",
        checks.iter().sum::<u64>(),
        soak_iters
    ))
}

/// Criterion: every activation window assigns exactly the ranks
/// {0..size-1} in process-ordered blocks, for any thread arrival order.
/// Rank 0 audits the global set via one message from every rank; each
/// thread checks its own block locally. The first window prints the
/// classic `Rank k / n` lines.
fn ranks_suite(group: &ProcGroup, threads: usize, activations: usize, seed: u64) -> Result<()> {
    let comm = Threadcomm::init(group, threads)?;
    let total = threads * group.proc_count();
    let proc = group.proc_rank();
    let result = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let comm = &comm;
                s.spawn(move || -> Result<()> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((proc * 1024 + t) as u64));
                    for a in 0..activations {
                        // Jitter makes arrival (and thus rank) order differ
                        // across windows.
                        std::thread::sleep(Duration::from_micros(rng.gen_range(0..200)));
                        comm.start()?;
                        let me = comm.comm_rank()?;
                        let n = comm.comm_size()?;
                        if n != total {
                            return Err(Error::Protocol(format!(
                                "comm_size {n}, expected {total}"
                            )));
                        }
                        let base = proc * threads;
                        if !(base..base + threads).contains(&me) {
                            return Err(Error::Protocol(format!(
                                "rank {me} outside this process's block {base}..{}",
                                base + threads
                            )));
                        }
                        if a == 0 {
                            println!("Rank {me} / {n}");
                        }
                        comm.send(&(me as u64).to_le_bytes(), 0, 9)?;
                        if me == 0 {
                            let mut seen = vec![false; n];
                            for _ in 0..n {
                                let mut b = [0u8; 8];
                                let env = comm.recv(&mut b, MatchSpec::new(-1, 9))?;
                                let r = u64::from_le_bytes(b) as usize;
                                if r >= n || env.src_rank != r {
                                    return Err(Error::Protocol(format!(
                                        "rank report {r} arrived from rank {}",
                                        env.src_rank
                                    )));
                                }
                                if seen[r] {
                                    return Err(Error::Protocol(format!(
                                        "activation {a}: rank {r} reported twice"
                                    )));
                                }
                                seen[r] = true;
                            }
                            // All n reports seen once each ⇒ the rank set is
                            // exactly {0..n-1}.
                        }
                        comm.finish()?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::InvalidState("worker thread panicked".into()))?
            })
            .collect::<Result<Vec<()>>>()
    });
    comm.free()?;
    result.map(|_| ())
}
