//! Background housekeeping: expired grants and sessions are swept on a
//! fixed interval, and an optional hook (terminal syncs, say) runs after
//! each sweep.

use std::io::Write;
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use nusa_core::als::{Als, SweepReport};
use parking_lot::Mutex;

use crate::{HarnessError, HarnessResult};

pub type TickHook = Box<dyn FnMut(&SweepReport) + Send>;

pub struct SweepDaemon {
    stop: Option<Sender<()>>,
    handle: Option<JoinHandle<u64>>,
}

impl SweepDaemon {
    /// Starts sweeping every `interval`; each tick appends one timestamped
    /// line to `log`.
    pub fn start(
        als: Arc<Als>,
        interval: Duration,
        log: Arc<Mutex<dyn Write + Send>>,
        mut hook: Option<TickHook>,
    ) -> HarnessResult<Self> {
        if interval.is_zero() {
            return Err(HarnessError::Invalid("sweep interval must be positive".into()));
        }
        let (tx, rx) = mpsc::channel::<()>();
        let handle = std::thread::spawn(move || {
            let mut ticks = 0;
            loop {
                match rx.recv_timeout(interval) {
                    Err(RecvTimeoutError::Timeout) => {}
                    _ => return ticks,
                }
                ticks += 1;
                let at = als.now().to_rfc3339();
                let line = match als.sweep() {
                    Ok(r) => {
                        if let Some(h) = hook.as_mut() {
                            h(&r);
                        }
                        format!(
                            "{at} sweep tick={ticks} grants_removed={} sessions_expired={}",
                            r.grants_removed, r.sessions_expired
                        )
                    }
                    Err(e) => format!("{at} sweep tick={ticks} error={}", e.code()),
                };
                let _ = writeln!(log.lock(), "{line}");
            }
        });
        Ok(Self {
            stop: Some(tx),
            handle: Some(handle),
        })
    }

    /// Stops the daemon and returns how many ticks ran. No sweep starts
    /// after this returns.
    pub fn stop(mut self) -> u64 {
        self.halt()
    }

    fn halt(&mut self) -> u64 {
        drop(self.stop.take());
        self.handle.take().map(|h| h.join().unwrap_or(0)).unwrap_or(0)
    }
}

impl Drop for SweepDaemon {
    fn drop(&mut self) {
        self.halt();
    }
}

#[cfg(test)]
mod tests {
    use chrono::{TimeZone, Utc};
    use nusa_core::als::AlsConfig;
    use nusa_core::clock::ManualClock;

    use super::*;

    fn als() -> Arc<Als> {
        let clock = ManualClock::new(Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap());
        Arc::new(Als::in_memory(AlsConfig::default(), Arc::new(clock)).unwrap())
    }

    #[test]
    fn zero_interval_is_rejected() {
        let log: Arc<Mutex<dyn Write + Send>> = Arc::new(Mutex::new(Vec::<u8>::new()));
        assert!(matches!(
            SweepDaemon::start(als(), Duration::ZERO, log, None),
            Err(HarnessError::Invalid(_))
        ));
    }

    #[test]
    fn ticks_log_and_stop_is_final() {
        let buf = Arc::new(Mutex::new(Vec::<u8>::new()));
        let log: Arc<Mutex<dyn Write + Send>> = buf.clone();
        let seen = Arc::new(Mutex::new(0u64));
        let counter = seen.clone();
        let hook: TickHook = Box::new(move |_| *counter.lock() += 1);
        let d = SweepDaemon::start(als(), Duration::from_millis(5), log, Some(hook)).unwrap();
        while *seen.lock() < 3 {
            std::thread::sleep(Duration::from_millis(2));
        }
        let ticks = d.stop();
        assert!(ticks >= 3);
        let after = buf.lock().len();
        std::thread::sleep(Duration::from_millis(30));
        assert_eq!(buf.lock().len(), after);
        let text = String::from_utf8(buf.lock().clone()).unwrap();
        assert_eq!(text.lines().count() as u64, ticks);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .starts_with("2026-01-01T00:00:00+00:00 sweep tick=1 "));
    }
}
