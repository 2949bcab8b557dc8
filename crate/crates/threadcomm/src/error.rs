//! Error type shared across the crate.

use thiserror::Error;

/// Errors reported by communicator, point-to-point, collective, and bridge
/// operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is out of range (bad rank, negative tag, zero thread
    /// count, mismatched buffer length, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The operation is not legal in the communicator's current lifecycle
    /// state (e.g. communication outside start/finish, free while active).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// The handle refers to a communicator that has already been freed.
    #[error("invalid handle: communicator has been freed")]
    InvalidHandle,

    /// More threads entered the parallel region than the communicator was
    /// sized for.
    #[error("too many threads: communicator admits {expected} per process")]
    TooManyThreads { expected: usize },

    /// The lifecycle transition cannot proceed while requests are pending.
    #[error("pending operations: {0}")]
    PendingOperations(String),

    /// An incoming message is longer than the posted receive buffer. The
    /// message is consumed and the sender completes normally.
    #[error("message truncated: received {received} bytes into a {capacity}-byte buffer")]
    Truncation { received: usize, capacity: usize },

    /// An OS-level transport failure on the inter-process bridge.
    #[error("transport error: {0}")]
    Transport(String),

    /// A malformed or unexpected frame arrived on the bridge.
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Transport(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
