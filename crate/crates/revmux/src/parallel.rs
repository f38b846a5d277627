use revmux_core::adapters::RevMuxAdapters;
use revmux_core::backbone::EncoderModel;
use revmux_core::data::Encoded;
use revmux_core::evaluation::{evaluate_round, round_seeds, EvalReport, EvalSpec, RoundOutcome};
use revmux_core::numerics::Scalar;
use revmux_core::pipeline::PrefixCache;

use crate::error::{Error, Result};

pub const THREADS_VAR: &str = "RVMX_THREADS";

/// Worker count from `RVMX_THREADS`, else the available parallelism.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Same report as `evaluate_rounds`, with rounds spread over `threads`
/// workers sharing the read-only model.
pub fn evaluate_rounds_parallel<S: Scalar + Send + Sync>(
    model: &EncoderModel<S>,
    adapters: Option<&RevMuxAdapters<S>>,
    data: &[Encoded],
    spec: &EvalSpec,
    cache: Option<&PrefixCache<S>>,
    threads: usize,
) -> Result<EvalReport> {
    if spec.rounds == 0 {
        return Err(Error::config("at least one evaluation round is required"));
    }
    let seeds = round_seeds(spec.seed, spec.rounds);
    let threads = threads.clamp(1, seeds.len());
    let run = |w: usize| -> revmux_core::Result<Vec<(usize, RoundOutcome)>> {
        (w..seeds.len())
            .step_by(threads)
            .map(|r| {
                evaluate_round(
                    model,
                    adapters,
                    data,
                    spec.n,
                    spec.l,
                    seeds[r],
                    spec.batch_groups,
                    cache,
                )
                .map(|o| (r, o))
            })
            .collect()
    };
    let parts: Vec<_> = if threads == 1 {
        vec![run(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads).map(|w| s.spawn(move || run(w))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut outcomes = Vec::with_capacity(spec.rounds);
    for p in parts {
        outcomes.extend(p?);
    }
    Ok(EvalReport::from_rounds(spec, outcomes))
}
