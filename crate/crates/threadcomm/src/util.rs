//! Small shared helpers.

use std::hint;
use std::thread;

/// Adaptive waiter for blocking loops: spins on the CPU for a bounded number
/// of empty polls, then starts yielding to the scheduler so that peers on an
/// oversubscribed machine can make progress.
pub(crate) struct SpinWait {
    empty_polls: u32,
    yield_after: u32,
}

impl SpinWait {
    pub fn new(yield_after: u32) -> Self {
        SpinWait {
            empty_polls: 0,
            yield_after: yield_after.max(1),
        }
    }

    /// Call after a poll that made no progress.
    pub fn idle(&mut self) {
        if self.empty_polls < self.yield_after {
            self.empty_polls += 1;
            hint::spin_loop();
        } else {
            thread::yield_now();
        }
    }

    /// Call after a poll that made progress.
    pub fn reset(&mut self) {
        self.empty_polls = 0;
    }
}

/// ⌈log2 n⌉ for n ≥ 1; 0 for n ≤ 1.
pub(crate) fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(4), 2);
        assert_eq!(ceil_log2(5), 3);
        assert_eq!(ceil_log2(8), 3);
        assert_eq!(ceil_log2(9), 4);
        assert_eq!(ceil_log2(16), 4);
    }
}
