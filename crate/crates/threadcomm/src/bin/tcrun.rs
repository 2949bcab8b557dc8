//! Multi-process launcher.
//!
//! `tcrun -n P -- prog args...` starts P copies of `prog` with the
//! environment the process bridge needs (process rank, process count,
//! and a fresh rendezvous directory), waits for all of them, and exits
//! with the first nonzero child status. `-n 1` still just runs the
//! program — a single process never opens a socket.

use std::ffi::OsString;
use std::time::Duration;

use clap::Parser;
use threadcomm::bridge::LaunchSpec;

#[derive(Parser)]
#[command(
    name = "tcrun",
    about = "Launch N cooperating processes sharing one thread communicator"
)]
struct Cli {
    /// Number of processes to launch.
    #[arg(short = 'n', long = "nprocs", default_value_t = 1)]
    nprocs: usize,
    /// Kill the whole job if it runs longer than this many seconds.
    #[arg(long, default_value_t = 600)]
    timeout: u64,
    /// Program to run, followed by its arguments.
    #[arg(trailing_var_arg = true, required = true)]
    command: Vec<OsString>,
}

fn main() {
    let cli = Cli::parse();
    let (program, args) = cli.command.split_first().expect("clap enforces non-empty");
    let spec = LaunchSpec {
        nprocs: cli.nprocs,
        program: program.clone(),
        args: args.to_vec(),
        timeout: Duration::from_secs(cli.timeout),
    };
    match threadcomm::bridge::launch(&spec) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("tcrun: {e}");
            std::process::exit(1);
        }
    }
}
