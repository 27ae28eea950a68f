//! Experiment harness: configs, training runs, metrics, the two-problem
//! didactic, sweeps and the command-line front end.

pub mod cli;
pub mod config;
pub mod didactic;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use config::{ExperimentConfig, Method};
pub use didactic::{didactic_two_problem, DidacticConfig, DidacticSummary, Variant};
pub use metrics::{export_trajectory, read_jsonl, MetricsRecord};
pub use sweep::{sweep, SweepSpec};
pub use train::{eval_solvability, prepare, run_experiment, run_prepared, Prepared, RunCheckpoint, RunOutput};

/// Maps `f` over `items` on up to `workers` threads. Results come back in
/// item order, so the output never depends on the worker count.
pub(crate) fn parallel_map<T, R, F>(workers: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers.min(items.len()));
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (ci, slots) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    let i = ci * chunk + j;
                    *slot = Some(f(i, &items[i]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every slot is filled")).collect()
}
