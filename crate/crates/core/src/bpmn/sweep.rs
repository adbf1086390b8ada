//! Batch runners for conformance sweeps. With the `parallel` feature the
//! batch is split across rayon's pool; [`sweep_sequential`] is always
//! available for comparison.

use super::exec::{execute, ExecPolicy, InstantDispatcher};
use super::generate::Case;
use super::runlog::RunLog;
use crate::events::Mode;

pub fn sweep_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn sweep_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Parallel when the `parallel` feature is on, sequential otherwise.
pub fn sweep<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        sweep_parallel(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sweep_sequential(items, f)
    }
}

/// Runs one case to completion with every task finishing instantly.
pub fn run_instant(case: &Case, policy: &ExecPolicy) -> RunLog {
    let d = InstantDispatcher::default();
    futures::executor::block_on(execute(&case.process, &d, &case.vars, policy, "sweep", Mode::Virtual))
}

pub fn execute_batch(cases: &[Case], policy: &ExecPolicy) -> Vec<RunLog> {
    sweep(cases, |c| run_instant(c, policy))
}
