use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use crate::backends::BackendError;
use crate::config::{EndpointSettings, Role};

const MAX_BACKOFF: Duration = Duration::from_secs(30);

/// Outcome of a single attempt.
#[derive(Debug)]
pub enum Attempt<T> {
    Done(T),
    /// Transient failure; worth another try.
    Retry(String),
    /// Permanent failure; returned as is.
    Fail(BackendError),
}

/// Bounded retries with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl RetryPolicy {
    pub fn from_settings(settings: &EndpointSettings) -> Self {
        RetryPolicy {
            max_retries: settings.max_retries,
            backoff: Duration::from_millis(settings.backoff_ms),
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(31)).unwrap_or(u32::MAX);
        self.backoff.saturating_mul(factor).min(MAX_BACKOFF)
    }

    pub fn run<T>(&self, role: Role, op: impl FnMut(u32) -> Attempt<T>) -> Result<T, BackendError> {
        self.run_with_sleep(role, op, thread::sleep)
    }

    /// Makes at most `max_retries + 1` attempts, sleeping between them.
    pub fn run_with_sleep<T>(
        &self,
        role: Role,
        mut op: impl FnMut(u32) -> Attempt<T>,
        mut sleep: impl FnMut(Duration),
    ) -> Result<T, BackendError> {
        let attempts = self.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                sleep(self.delay(attempt - 1));
            }
            match op(attempt) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) => {
                    log::debug!("{role} attempt {}/{attempts} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(BackendError::Unavailable {
            role,
            attempts,
            message: last,
        })
    }
}

/// Counting semaphore bounding in-flight requests per endpoint.
#[derive(Debug)]
pub struct InFlight {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlight);

impl InFlight {
    pub fn new(limit: usize) -> Self {
        InFlight {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self.freed.wait(available).unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.0.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn gives_up_after_max_retries_plus_one() {
        let policy = RetryPolicy {
            max_retries: 2,
            backoff: Duration::from_millis(100),
        };
        let mut calls = 0;
        let mut sleeps = Vec::new();
        let err = policy
            .run_with_sleep(
                Role::Generator,
                |_| {
                    calls += 1;
                    Attempt::<()>::Retry("connection refused".into())
                },
                |d| sleeps.push(d),
            )
            .unwrap_err();
        assert_eq!(calls, 3);
        assert_eq!(sleeps, vec![Duration::from_millis(100), Duration::from_millis(200)]);
        assert_eq!(
            err,
            BackendError::Unavailable {
                role: Role::Generator,
                attempts: 3,
                message: "connection refused".into()
            }
        );
    }

    #[test]
    fn permanent_failure_is_not_retried() {
        let policy = RetryPolicy {
            max_retries: 5,
            backoff: Duration::ZERO,
        };
        let mut calls = 0;
        let err = policy
            .run(Role::Generator, |_| {
                calls += 1;
                Attempt::<()>::Fail(BackendError::GenerationRejected("nsfw".into()))
            })
            .unwrap_err();
        assert_eq!(calls, 1);
        assert_eq!(err, BackendError::GenerationRejected("nsfw".into()));
    }

    #[test]
    fn succeeds_on_a_later_attempt() {
        let policy = RetryPolicy {
            max_retries: 2,
            backoff: Duration::ZERO,
        };
        let got = policy.run(Role::Vqa, |n| {
            if n < 2 {
                Attempt::Retry("503".into())
            } else {
                Attempt::Done(n)
            }
        });
        assert_eq!(got.unwrap(), 2);
    }

    #[test]
    fn backoff_is_capped() {
        let policy = RetryPolicy {
            max_retries: 40,
            backoff: Duration::from_millis(200),
        };
        assert_eq!(policy.delay(3), Duration::from_millis(1600));
        assert_eq!(policy.delay(39), MAX_BACKOFF);
    }

    #[test]
    fn in_flight_limit_is_respected() {
        let gate = Arc::new(InFlight::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (gate, active, peak) = (gate.clone(), active.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _permit = gate.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
