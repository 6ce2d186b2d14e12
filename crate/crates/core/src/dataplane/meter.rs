// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::ids::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterConfig {
    /// Bytes per simulated second.
    pub rate: u64,
    /// Bucket depth in bytes.
    pub burst: u64,
}

/// Single-rate token bucket, drop only. Tokens are kept in byte-nanoseconds
/// so refill arithmetic is exact for integer simulated time.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    config: MeterConfig,
    tokens: u128,
    last: SimTime,
}

impl TokenBucket {
    /// Starts full.
    pub fn new(config: MeterConfig) -> Self {
        TokenBucket {
            config,
            tokens: Self::scale(config.burst),
            last: SimTime::ZERO,
        }
    }

    fn scale(bytes: u64) -> u128 {
        u128::from(bytes) * u128::from(SimTime::NANOS_PER_SEC)
    }

    pub fn config(&self) -> MeterConfig {
        self.config
    }

    fn refill(&mut self, now: SimTime) {
        if now > self.last {
            let dt = u128::from((now - self.last).as_nanos());
            let cap = Self::scale(self.config.burst);
            self.tokens = (self.tokens + dt * u128::from(self.config.rate)).min(cap);
            self.last = now;
        }
    }

    /// Takes `len` bytes of tokens if available. Non-conforming frames leave
    /// the bucket untouched.
    pub fn conform(&mut self, len: usize, now: SimTime) -> bool {
        self.refill(now);
        let need = Self::scale(len as u64);
        if need <= self.tokens {
            self.tokens -= need;
            true
        } else {
            false
        }
    }

    /// Whole bytes currently available.
    pub fn available(&self) -> u64 {
        (self.tokens / u128::from(SimTime::NANOS_PER_SEC)) as u64
    }
}
