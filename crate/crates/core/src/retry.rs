use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, PortError};

/// Bounded retries with exponential backoff for port calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or
    /// exhausts the retry budget.
    pub fn run<T>(
        &self,
        port: &'static str,
        mut op: impl FnMut() -> Result<T, PortError>,
    ) -> Result<T, Error> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempts <= self.max_retries => {
                    let delay = self.delay_for(attempts - 1);
                    log::warn!("{port}: {e}; retrying in {delay:?}");
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                }
                Err(source) => {
                    return Err(Error::Port {
                        port,
                        attempts,
                        source,
                    })
                }
            }
        }
    }
}
