//! Benchmark runs: decode a corpus under a list of configurations and
//! aggregate counters, timings and task quality.

use std::time::Instant;

use thiserror::Error;

use super::corpus::{Corpus, TaskKind};
use super::report::BenchRow;
use crate::engine::{blockwise_decode_combined, DecodeConfig, DecodeError, DecodeResult};
use crate::model::ScoringModel;
use crate::TokenId;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no decode configurations given")]
    NoConfigs,
    #[error("repeats must be >= 1")]
    NoRepeats,
    #[error("example {index} failed under `k={k} {criterion}`: {source}")]
    Decode { index: usize, k: usize, criterion: String, source: DecodeError },
    #[error("decode invariant violated on example {index}: {message}")]
    Accounting { index: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    /// Timed repetitions per configuration; the median is reported.
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { repeats: 3 }
    }
}

/// Decodes of the whole corpus under one configuration.
struct Pass {
    results: Vec<DecodeResult>,
    median_ns: u64,
}

fn check_accounting(index: usize, r: &DecodeResult) -> Result<(), BenchError> {
    let fail = |message: String| Err(BenchError::Accounting { index, message });
    let total: usize = r.accepted_sizes.iter().sum();
    if total != r.output.len() {
        return fail(format!("accepted sizes sum to {total}, output has {} tokens", r.output.len()));
    }
    if r.iterations != r.accepted_sizes.len() {
        return fail(format!("{} iterations but {} accepted sizes", r.iterations, r.accepted_sizes.len()));
    }
    if r.model_invocations != r.iterations + 1 {
        return fail(format!("{} invocations for {} iterations", r.model_invocations, r.iterations));
    }
    Ok(())
}

fn run_pass<M: ScoringModel + ?Sized>(
    corpus: &Corpus,
    model: &M,
    config: &DecodeConfig,
    repeats: usize,
) -> Result<Pass, BenchError> {
    let mut times = Vec::with_capacity(repeats);
    let mut first = None;
    for _ in 0..repeats {
        let mut results = Vec::with_capacity(corpus.pairs.len());
        let mut elapsed = 0u128;
        for (index, (x, _)) in corpus.pairs.iter().enumerate() {
            let start = Instant::now();
            let r = blockwise_decode_combined(model, x, config).map_err(|source| BenchError::Decode {
                index,
                k: config.block_size,
                criterion: config.criterion.to_string(),
                source,
            })?;
            elapsed += start.elapsed().as_nanos();
            check_accounting(index, &r)?;
            results.push(r);
        }
        times.push(u64::try_from(elapsed).unwrap_or(u64::MAX));
        first.get_or_insert(results);
    }
    times.sort_unstable();
    Ok(Pass { results: first.expect("repeats >= 1"), median_ns: times[times.len() / 2] })
}

fn strip_eos(output: &[TokenId], eos: Option<TokenId>) -> &[TokenId] {
    match (output.last(), eos) {
        (Some(&last), Some(e)) if last == e => &output[..output.len() - 1],
        _ => output,
    }
}

/// Name of the task-quality metric reported for `task`.
pub fn quality_metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::IntensityGrid => "mean_abs_intensity_error",
        _ => "exact_match",
    }
}

/// Task quality and token accuracy of `outputs` against the corpus targets.
///
/// Token accuracy counts aligned matches over the longer of each output and
/// target. Intensity error averages `|u - v|` over aligned positions and
/// charges 255 for every position present on one side only.
pub fn score_outputs(corpus: &Corpus, outputs: &[&[TokenId]]) -> (f64, f64) {
    let mut matches = 0usize;
    let mut positions = 0usize;
    let mut exact = 0usize;
    let mut abs_err = 0.0;
    for ((_, y), out) in corpus.pairs.iter().zip(outputs) {
        let aligned = y.len().min(out.len());
        let longer = y.len().max(out.len());
        matches += y.iter().zip(out.iter()).filter(|(a, b)| a == b).count();
        positions += longer;
        exact += usize::from(y[..] == out[..]);
        abs_err += y.iter().zip(out.iter()).map(|(&a, &b)| f64::from(a.abs_diff(b))).sum::<f64>();
        abs_err += 255.0 * (longer - aligned) as f64;
    }
    let n = corpus.pairs.len().max(1) as f64;
    let token_accuracy = if positions == 0 { 1.0 } else { matches as f64 / positions as f64 };
    let quality = match corpus.task_kind {
        TaskKind::IntensityGrid => {
            if positions == 0 {
                0.0
            } else {
                abs_err / positions as f64
            }
        }
        _ => exact as f64 / n,
    };
    (quality, token_accuracy)
}

fn is_greedy(config: &DecodeConfig) -> bool {
    config.block_size == 1 && config.criterion.is_exact() && config.min_block() == 1
}

/// Decode every corpus input under each configuration with the combined
/// decoder and aggregate one row per configuration.
///
/// The baseline is the k=1 exact configuration with the same length limit
/// and EOS; a configuration that is itself that baseline reuses its timings,
/// so its speedup is exactly 1.
pub fn run_bench<M: ScoringModel + ?Sized>(
    corpus: &Corpus,
    model: &M,
    regime: &str,
    configs: &[DecodeConfig],
    options: &BenchOptions,
) -> Result<Vec<BenchRow>, BenchError> {
    if configs.is_empty() {
        return Err(BenchError::NoConfigs);
    }
    if options.repeats == 0 {
        return Err(BenchError::NoRepeats);
    }
    let mut baselines: Vec<(DecodeConfig, Pass)> = Vec::new();
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let base_config = DecodeConfig { block_size: 1, criterion: Default::default(), ..*config };
        let base_idx = match baselines.iter().position(|(c, _)| *c == base_config) {
            Some(i) => i,
            None => {
                let pass = run_pass(corpus, model, &base_config, options.repeats)?;
                baselines.push((base_config, pass));
                baselines.len() - 1
            }
        };
        let fresh;
        let pass = if is_greedy(config) {
            &baselines[base_idx].1
        } else {
            fresh = run_pass(corpus, model, config, options.repeats)?;
            &fresh
        };
        let baseline = &baselines[base_idx].1;

        let iterations_total: usize = pass.results.iter().map(|r| r.iterations).sum();
        let invocations_total: usize = pass.results.iter().map(|r| r.model_invocations).sum();
        let output_tokens_total: usize = pass.results.iter().map(|r| r.output.len()).sum();
        let matched = pass.results.iter().zip(&baseline.results).filter(|(a, b)| a.output == b.output).count();
        let outputs: Vec<&[TokenId]> = pass.results.iter().map(|r| strip_eos(&r.output, config.eos)).collect();
        let (quality, token_accuracy) = score_outputs(corpus, &outputs);
        let examples = corpus.pairs.len();
        rows.push(BenchRow {
            regime: regime.to_string(),
            k: config.block_size,
            criterion: config.criterion.to_string(),
            examples,
            mean_accepted_block_size: if iterations_total == 0 {
                0.0
            } else {
                output_tokens_total as f64 / iterations_total as f64
            },
            iterations_total,
            invocations_total,
            output_tokens_total,
            wall_clock_ns_median: pass.median_ns,
            greedy_wall_clock_ns_median: baseline.median_ns,
            wall_clock_speedup_vs_greedy: if pass.median_ns == 0 {
                1.0
            } else {
                baseline.median_ns as f64 / pass.median_ns as f64
            },
            greedy_match_rate: if examples == 0 { 1.0 } else { matched as f64 / examples as f64 },
            quality_metric: quality_metric_name(corpus.task_kind).to_string(),
            task_quality_metric: quality,
            token_accuracy,
        });
    }
    Ok(rows)
}
