//! Runtime tuning knobs.

use crate::error::{Error, Result};

/// Protocol selection policy for point-to-point messages between threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Pick by message size: eager below the threshold, 1-copy above it.
    Auto,
    /// Always copy through pool cells (chunked above the cell capacity).
    Eager,
    /// Always hand the receiver a reference to the sender buffer.
    OneCopy,
    /// Always stream through a bounded window of pool cells.
    Pipeline,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Protocol::Auto),
            "eager" => Ok(Protocol::Eager),
            "onecopy" | "one-copy" | "1copy" => Ok(Protocol::OneCopy),
            "pipeline" => Ok(Protocol::Pipeline),
            other => Err(Error::InvalidArgument(format!(
                "unknown protocol {other:?} (expected auto|eager|onecopy|pipeline)"
            ))),
        }
    }
}

/// Tuning parameters fixed at communicator creation.
///
/// Environment variables override individual fields when the communicator is
/// created: `TC_EAGER_THRESHOLD`, `TC_POOL_CELLS`, `TC_CELL_SIZE`.
#[derive(Debug, Clone)]
pub struct Config {
    /// Messages at or below this many bytes go eager; larger ones switch to
    /// the 1-copy path (under `Protocol::Auto`).
    pub eager_threshold: usize,
    /// Payload capacity of one pool cell in bytes.
    pub cell_size: usize,
    /// Number of cells reserved for each receiving thread.
    pub cells_per_rank: usize,
    /// Protocol policy for intra-process messages.
    pub protocol: Protocol,
    /// Empty progress polls before a blocked thread starts yielding.
    pub poll_yield_every: u32,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            eager_threshold: 4096,
            cell_size: 8192,
            cells_per_rank: 64,
            protocol: Protocol::Auto,
            poll_yield_every: 1000,
        }
    }
}

impl Config {
    /// Apply environment overrides on top of `self` and validate the result.
    pub(crate) fn resolve(mut self) -> Result<Config> {
        if let Some(v) = read_env_usize("TC_EAGER_THRESHOLD")? {
            self.eager_threshold = v;
        }
        if let Some(v) = read_env_usize("TC_POOL_CELLS")? {
            self.cells_per_rank = v;
        }
        if let Some(v) = read_env_usize("TC_CELL_SIZE")? {
            self.cell_size = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.cell_size == 0 {
            return Err(Error::InvalidArgument("cell_size must be nonzero".into()));
        }
        if self.cells_per_rank < 2 {
            // The pipeline path needs at least two cells per receiver to make
            // progress while one is in flight.
            return Err(Error::InvalidArgument(
                "cells_per_rank must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

fn read_env_usize(name: &str) -> Result<Option<usize>> {
    match std::env::var(name) {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("{name}={s:?} is not a valid size"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = Config::default();
        assert_eq!(c.eager_threshold, 4096);
        assert_eq!(c.cell_size, 8192);
        assert_eq!(c.cells_per_rank, 64);
        assert_eq!(c.protocol, Protocol::Auto);
        assert_eq!(c.poll_yield_every, 1000);
    }

    #[test]
    fn protocol_parses() {
        assert_eq!("auto".parse::<Protocol>().unwrap(), Protocol::Auto);
        assert_eq!("Eager".parse::<Protocol>().unwrap(), Protocol::Eager);
        assert_eq!("onecopy".parse::<Protocol>().unwrap(), Protocol::OneCopy);
        assert_eq!("pipeline".parse::<Protocol>().unwrap(), Protocol::Pipeline);
        assert!("bogus".parse::<Protocol>().is_err());
    }

    #[test]
    fn validate_rejects_degenerate_pools() {
        let mut c = Config::default();
        c.cells_per_rank = 1;
        assert!(c.validate().is_err());
        c.cells_per_rank = 2;
        c.cell_size = 0;
        assert!(c.validate().is_err());
    }
}
