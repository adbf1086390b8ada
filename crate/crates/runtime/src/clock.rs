//! Shared simulation clock.
//!
//! Time only moves when something calls [`SimClock::advance`]: the plant
//! driver in real-time mode, the auto-stepper or a test in stepped mode.
//! Everything that waits on simulated time goes through [`SimClock::sleep`].

use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use twinloop_core::events::Millis;

/// Wall-clock period of the real-time driver.
pub const REALTIME_TICK_MS: u64 = 10;
pub const DEFAULT_STEP_S: f64 = 0.05;
pub const DEFAULT_PACE_MS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    RealtimeScaled,
    Stepped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockOptions {
    pub mode: ClockMode,
    /// Simulated seconds per wall second in real-time mode.
    pub scale: f64,
    /// Stepped mode only: advance by `step_s` every `pace_ms` of wall time
    /// instead of waiting for explicit steps.
    pub auto_step: bool,
    pub step_s: f64,
    pub pace_ms: u64,
}

impl Default for ClockOptions {
    fn default() -> Self {
        ClockOptions {
            mode: ClockMode::RealtimeScaled,
            scale: 1.0,
            auto_step: false,
            step_s: DEFAULT_STEP_S,
            pace_ms: DEFAULT_PACE_MS,
        }
    }
}

impl ClockOptions {
    pub fn realtime(scale: f64) -> Self {
        ClockOptions {
            scale,
            ..Default::default()
        }
    }

    /// Stepped clock that only moves on explicit steps.
    pub fn stepped() -> Self {
        ClockOptions {
            mode: ClockMode::Stepped,
            ..Default::default()
        }
    }

    /// Stepped clock advanced by a background stepper.
    pub fn fast_forward(step_s: f64, pace_ms: u64) -> Self {
        ClockOptions {
            mode: ClockMode::Stepped,
            auto_step: true,
            step_s,
            pace_ms,
            ..Default::default()
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(format!("clock scale must be positive, got {}", self.scale));
        }
        if !(self.step_s.is_finite() && self.step_s > 0.0) {
            return Err(format!("clock step must be positive, got {}", self.step_s));
        }
        Ok(())
    }

    /// Whether a background task has to drive the clock.
    pub fn needs_driver(&self) -> bool {
        self.mode == ClockMode::RealtimeScaled || self.auto_step
    }
}

#[derive(Debug)]
struct Inner {
    options: ClockOptions,
    /// Current time in microseconds.
    now: watch::Sender<u64>,
}

/// Cheap to clone; all clones share one timeline.
#[derive(Debug, Clone)]
pub struct SimClock {
    inner: Arc<Inner>,
}

fn epoch_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_micros() as u64)
}

fn to_us(s: f64) -> u64 {
    (s.max(0.0) * 1e6).round() as u64
}

impl SimClock {
    /// Real-time clocks start at the current epoch time, stepped clocks at 0.
    pub fn new(options: ClockOptions) -> Self {
        let start = match options.mode {
            ClockMode::RealtimeScaled => epoch_us(),
            ClockMode::Stepped => 0,
        };
        let (now, _) = watch::channel(start);
        SimClock {
            inner: Arc::new(Inner { options, now }),
        }
    }

    pub fn options(&self) -> &ClockOptions {
        &self.inner.options
    }

    pub fn mode(&self) -> ClockMode {
        self.inner.options.mode
    }

    pub fn now_us(&self) -> u64 {
        *self.inner.now.borrow()
    }

    pub fn now_ms(&self) -> Millis {
        self.now_us() / 1000
    }

    pub fn now_s(&self) -> f64 {
        self.now_us() as f64 / 1e6
    }

    /// Moves time forward by `dt_s`; never backwards.
    pub fn advance(&self, dt_s: f64) {
        let d = to_us(dt_s);
        if d > 0 {
            self.inner.now.send_modify(|t| *t += d);
        }
    }

    /// Resolves once simulated time reaches `t_us`.
    pub async fn sleep_until_us(&self, t_us: u64) {
        let mut rx = self.inner.now.subscribe();
        // The sender lives as long as any clone of the clock, including self.
        let _ = rx.wait_for(|&now| now >= t_us).await;
    }

    pub async fn sleep(&self, dt_s: f64) {
        let target = self.now_us() + to_us(dt_s).max(1);
        self.sleep_until_us(target).await
    }

    /// Wall time corresponding to `dt_s` simulated seconds, for pacing
    /// real I/O. Stepped clocks have no fixed ratio and report zero.
    pub fn wall_duration(&self, dt_s: f64) -> Duration {
        match self.mode() {
            ClockMode::RealtimeScaled => Duration::from_secs_f64((dt_s / self.inner.options.scale).max(0.0)),
            ClockMode::Stepped => Duration::ZERO,
        }
    }
}

/// Callback run on every driver step with the step length, before the
/// clock moves.
pub type StepHook = Box<dyn FnMut(f64) + Send>;

/// Spawns the background task that advances `clock` according to its
/// options. Returns `None` for manually stepped clocks.
pub fn spawn_driver(clock: &SimClock, mut hook: StepHook) -> Option<tokio::task::JoinHandle<()>> {
    let opts = *clock.options();
    if !opts.needs_driver() {
        return None;
    }
    let clock = clock.clone();
    Some(tokio::spawn(async move {
        match opts.mode {
            ClockMode::RealtimeScaled => {
                let mut tick = tokio::time::interval(Duration::from_millis(REALTIME_TICK_MS));
                tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                let mut last = tokio::time::Instant::now();
                loop {
                    tick.tick().await;
                    let now = tokio::time::Instant::now();
                    let dt = (now - last).as_secs_f64() * opts.scale;
                    last = now;
                    if dt > 0.0 {
                        hook(dt);
                        clock.advance(dt);
                    }
                }
            }
            ClockMode::Stepped => loop {
                tokio::time::sleep(Duration::from_millis(opts.pace_ms)).await;
                hook(opts.step_s);
                clock.advance(opts.step_s);
            },
        }
    }))
}
