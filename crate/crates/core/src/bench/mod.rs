//! Benchmark harness: corpora, benchmark runs, reports.

pub mod corpus;
pub mod report;
pub mod run;

pub use corpus::{load_corpus, save_corpus, Corpus, CorpusError, PatternRule, PatternSpec, TaskKind, Vocab};
pub use report::{emit_report, render_report, BenchReport, BenchRow, ReportError, ReportFormat};
pub use run::{run_bench, BenchError, BenchOptions};
