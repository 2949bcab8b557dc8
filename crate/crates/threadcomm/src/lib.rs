//! Rank-based message passing between the threads of a parallel region.
//!
//! A [`Threadcomm`] gives every thread of a parallel region its own rank,
//! its own lock-free inbox, and the usual messaging verbs on top: matched
//! point-to-point send/receive (blocking and nonblocking), barriers,
//! broadcast, and reductions. Ranks exist only inside an *activation
//! window* — between a collective [`Threadcomm::start`] and
//! [`Threadcomm::finish`] — which is what lets the same communicator be
//! reused across consecutive parallel regions with different thread
//! arrival orders.
//!
//! Communicators can also span processes: when launched under `tcrun` (or
//! any launcher that sets `TC_PROC_RANK`/`TC_PROC_COUNT`/`TC_RENDEZVOUS`),
//! [`ProcGroup::from_env`] connects a Unix-socket mesh and a communicator
//! built over it exposes all N×M threads as one flat rank space. The same
//! program text runs unchanged in both configurations.
//!
//! ```
//! use threadcomm::{MatchSpec, ProcGroup, Threadcomm};
//!
//! let group = ProcGroup::single();
//! let comm = Threadcomm::init(&group, 2).unwrap();
//! std::thread::scope(|s| {
//!     for _ in 0..2 {
//!         s.spawn(|| {
//!             comm.start().unwrap();
//!             let me = comm.comm_rank().unwrap();
//!             let peer = 1 - me;
//!             let mut buf = [0u8; 8];
//!             if me == 0 {
//!                 comm.send(b"ping\0\0\0\0", peer, 7).unwrap();
//!                 comm.recv(&mut buf, MatchSpec::from_rank(peer, 7)).unwrap();
//!                 assert_eq!(&buf[..4], b"pong");
//!             } else {
//!                 comm.recv(&mut buf, MatchSpec::from_rank(peer, 7)).unwrap();
//!                 comm.send(b"pong\0\0\0\0", peer, 7).unwrap();
//!             }
//!             comm.finish().unwrap();
//!         });
//!     }
//! });
//! comm.free().unwrap();
//! ```

mod cell;
mod collectives;
mod comm;
mod config;
mod error;
mod p2p;
mod queue;
mod util;

pub mod bench;
pub mod bridge;
pub mod conformance;

pub use cell::Envelope;
pub use collectives::{BarrierVariant, ElemKind, OpKind, ReduceOp};
pub use comm::{ProcGroup, Stats, Threadcomm};
pub use config::{Config, Protocol};
pub use error::{Error, Result};
pub use p2p::{MatchSpec, Request, ANY_SOURCE, ANY_TAG, MAX_TAG};
