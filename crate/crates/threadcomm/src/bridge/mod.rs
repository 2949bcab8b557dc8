//! Process-spanning transport.
//!
//! A communicator built over several processes routes remote sends through
//! here: messages become [`wire`] frames, travel over the Unix-socket mesh
//! established by [`mesh::connect`], and are re-materialized as inbox cells
//! by the receiving process's agent thread. Everything above this module —
//! matching, collectives, the user API — is transport-agnostic.

pub(crate) mod agent;
pub(crate) mod mesh;
pub mod wire;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::comm::CommInner;
use crate::config::Protocol;
use crate::error::{Error, Result};
use crate::p2p::{self, Binding, SendPath};
use wire::{FrameKind, WireHeader};

/// Send one message to a rank hosted by another process.
///
/// Remote delivery is buffered by construction — the receiving agent owns
/// the landing cell — so a 1-copy selection degrades to the closest
/// buffered shape: one eager frame when the payload fits a cell, otherwise
/// the chunked stream.
pub(crate) fn wire_send_msg(
    comm: &CommInner,
    b: &mut Binding,
    buf: &[u8],
    dst: usize,
    tag: i32,
    seq: u64,
    force: Option<Protocol>,
) -> Result<()> {
    let mesh = comm.mesh()?;
    mesh.check_agent()?;
    let (peer, _) = comm.table.route(dst);
    let src = b.global_rank as u32;
    let cell_cap = comm.pool.cell_size();

    let path = match p2p::select_path(comm, buf.len(), false, force) {
        SendPath::OneCopy if buf.len() <= cell_cap => SendPath::EagerCell,
        SendPath::OneCopy => SendPath::Pipeline,
        p => p,
    };

    match path {
        SendPath::EagerCell => {
            let hdr = WireHeader {
                kind: FrameKind::Eager,
                src_rank: src,
                dst_rank: dst as u32,
                tag,
                msg_len: buf.len() as u64,
                seq,
                chunk_index: 0,
                chunk_total: 1,
            };
            mesh.send_frame(peer, &hdr, buf)?;
            b.stats.sends += 1;
            b.stats.eager_sends += 1;
        }
        SendPath::Pipeline => {
            let total = buf.len().div_ceil(cell_cap).max(1) as u32;
            let stride = wire::chunk_stride(buf.len(), total);
            for (i, chunk) in buf.chunks(stride).enumerate() {
                let hdr = WireHeader {
                    kind: FrameKind::PipelineChunk,
                    src_rank: src,
                    dst_rank: dst as u32,
                    tag,
                    msg_len: buf.len() as u64,
                    seq,
                    chunk_index: i as u32,
                    chunk_total: total,
                };
                mesh.send_frame(peer, &hdr, chunk)?;
                // Keep our own inbox moving while streaming a long message.
                p2p::progress(comm, b);
            }
            b.stats.sends += 1;
            b.stats.pipeline_sends += 1;
        }
        SendPath::OneCopy => unreachable!("remapped above"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Launcher
// ---------------------------------------------------------------------------

/// What [`launch`] runs: `nprocs` copies of `program args...`, each with
/// the rendezvous environment set.
pub struct LaunchSpec {
    pub nprocs: usize,
    pub program: std::ffi::OsString,
    pub args: Vec<std::ffi::OsString>,
    pub timeout: Duration,
}

fn fresh_rendezvous_dir() -> Result<PathBuf> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("tc-mesh-{}-{nanos:09}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Start `spec.nprocs` copies of a program, wire their environment so
/// [`crate::ProcGroup::from_env`] forms one group, and wait for all of
/// them. Returns the first nonzero exit code, or 0 when every process
/// succeeded. On timeout all children are killed and an error is returned.
pub fn launch(spec: &LaunchSpec) -> Result<i32> {
    if spec.nprocs == 0 {
        return Err(Error::InvalidArgument("launch needs at least 1 process".into()));
    }
    let dir = fresh_rendezvous_dir()?;
    let mut children = Vec::with_capacity(spec.nprocs);
    for rank in 0..spec.nprocs {
        let child = std::process::Command::new(&spec.program)
            .args(&spec.args)
            .env("TC_PROC_RANK", rank.to_string())
            .env("TC_PROC_COUNT", spec.nprocs.to_string())
            .env("TC_RENDEZVOUS", &dir)
            .spawn();
        match child {
            Ok(c) => children.push(c),
            Err(e) => {
                for mut c in children {
                    let _ = c.kill();
                    let _ = c.wait();
                }
                let _ = std::fs::remove_dir_all(&dir);
                return Err(Error::Transport(format!(
                    "spawning {}: {e}",
                    spec.program.to_string_lossy()
                )));
            }
        }
    }

    let deadline = Instant::now() + spec.timeout;
    let mut statuses: Vec<Option<i32>> = vec![None; spec.nprocs];
    let result = loop {
        let mut running = false;
        for (i, child) in children.iter_mut().enumerate() {
            if statuses[i].is_some() {
                continue;
            }
            match child.try_wait() {
                Ok(Some(status)) => {
                    // A signal death reports like a shell would: 128 + signo
                    // (or a generic failure when the signal is unknown).
                    statuses[i] = Some(
                        status
                            .code()
                            .or_else(|| {
                                std::os::unix::process::ExitStatusExt::signal(&status)
                                    .map(|s| 128 + s)
                            })
                            .unwrap_or(1),
                    );
                }
                Ok(None) => running = true,
                Err(_) => statuses[i] = Some(1),
            }
        }
        if !running {
            break Ok(statuses
                .iter()
                .flatten()
                .copied()
                .find(|&c| c != 0)
                .unwrap_or(0));
        }
        if Instant::now() >= deadline {
            for child in &mut children {
                let _ = child.kill();
            }
            for child in &mut children {
                let _ = child.wait();
            }
            break Err(Error::Transport(format!(
                "launch timed out after {:?}",
                spec.timeout
            )));
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    let _ = std::fs::remove_dir_all(&dir);
    result
}
