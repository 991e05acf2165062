//! Corpora, benchmark runs, reports and the command-line tool.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use blockdec::bench::corpus::{format_corpus, parse_corpus};
use blockdec::bench::report::{to_csv, to_json, to_markdown};
use blockdec::bench::{
    load_corpus, run_bench, save_corpus, BenchOptions, BenchReport, Corpus, PatternRule, PatternSpec, TaskKind, Vocab,
};
use blockdec::model::synthetic::{make_synthetic_model, SyntheticKind, SyntheticSpec};
use blockdec::{AcceptanceCriterion, DecodeConfig, TokenId, TokenSpace};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blockdec"));
    c.env_remove("BLOCKDEC_SEED");
    c
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn blockdec");
    assert!(out.status.success(), "blockdec failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn pattern_corpus(seed: u64, pairs: usize) -> Corpus {
    PatternSpec { seed, pairs, alphabet: 16, min_len: 3, max_len: 6, rule: PatternRule::Copy, noise: 0.0 }
        .generate()
        .unwrap()
}

#[test]
fn intensity_grid_fixture_round_trips() {
    // Two 4x4x3 grids in raster order.
    let grid = |offset: u32| -> Vec<TokenId> { (0..48).map(|i| (i * 5 + offset) % 256).collect() };
    let corpus = Corpus::new(
        TaskKind::IntensityGrid,
        Vocab::for_task(TaskKind::IntensityGrid, 0),
        vec![(grid(0), grid(3)), (grid(100), grid(255))],
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grids.txt");
    save_corpus(&corpus, &path).unwrap();
    let back = load_corpus(&path, TaskKind::IntensityGrid).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(back.pairs[0].0.len(), 48);
    assert_eq!(back.vocab.size(), 257);
    assert_eq!(back.vocab.decode_eos(), None);
    assert_eq!(back.vocab.token_space(), TokenSpace::Intensity { levels: 256 });
}

#[test]
fn text_corpus_round_trips_and_reports_bad_lines() {
    let c = parse_corpus("hello\tworld\nab\tabab\n", TaskKind::TextChar).unwrap();
    assert_eq!(parse_corpus(&format_corpus(&c).unwrap(), TaskKind::TextChar).unwrap(), c);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "a\tb\nc\td\nbroken\n").unwrap();
    let err = load_corpus(&path, TaskKind::TextChar).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn pattern_spec_files_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.toml");
    std::fs::write(&path, "seed = 9\npairs = 50\nalphabet = 64\nmin_len = 2\nmax_len = 9\nrule = \"reverse\"\n")
        .unwrap();
    let a = load_corpus(&path, TaskKind::SyntheticPattern).unwrap();
    let b = load_corpus(&path, TaskKind::SyntheticPattern).unwrap();
    assert_eq!(a, b);
    assert!(a.pairs.iter().all(|(x, y)| x.iter().rev().eq(y.iter())));
}

#[test]
fn perfect_model_fixed_length_block_sizes() {
    let corpus = pattern_corpus(1, 8);
    let m = make_synthetic_model(SyntheticSpec::new(17, 4, 3, SyntheticKind::PerfectProposals));
    let configs: Vec<DecodeConfig> = [1, 2, 4].iter().map(|&k| DecodeConfig::new(k, 12)).collect();
    let rows = run_bench(&corpus, &m, "perfect", &configs, &BenchOptions::default()).unwrap();
    let sizes: Vec<f64> = rows.iter().map(|r| r.mean_accepted_block_size).collect();
    assert_eq!(sizes, vec![1.0, 2.0, 4.0]);
    let iterations: Vec<usize> = rows.iter().map(|r| r.iterations_total).collect();
    assert!(iterations.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(rows[0].wall_clock_speedup_vs_greedy, 1.0);
    for r in &rows {
        assert_eq!(r.greedy_match_rate, 1.0);
        assert_eq!(r.invocations_total, r.iterations_total + r.examples);
    }
}

#[test]
fn adversarial_model_gains_nothing() {
    let corpus = pattern_corpus(2, 8);
    let m = make_synthetic_model(SyntheticSpec::new(17, 4, 3, SyntheticKind::Adversarial));
    let rows = run_bench(&corpus, &m, "adversarial", &[DecodeConfig::new(4, 12)], &BenchOptions::default()).unwrap();
    assert_eq!(rows[0].mean_accepted_block_size, 1.0);
    assert!(rows[0].wall_clock_speedup_vs_greedy <= 1.0, "{}", rows[0].wall_clock_speedup_vs_greedy);
}

fn sample_report() -> BenchReport {
    let corpus = pattern_corpus(3, 6);
    let m = make_synthetic_model(SyntheticSpec::new(17, 3, 5, SyntheticKind::RandomTable));
    let configs = vec![
        DecodeConfig::new(1, 7).with_eos(Some(16)),
        DecodeConfig::new(3, 7).with_eos(Some(16)).with_criterion(AcceptanceCriterion::top_k(2)),
    ];
    BenchReport::new(
        4,
        TaskKind::SyntheticPattern,
        run_bench(&corpus, &m, "random", &configs, &BenchOptions::default()).unwrap(),
    )
}

fn close6(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 5e-6 * a.abs().max(b.abs())
}

#[test]
fn csv_projection_keeps_six_significant_digits() {
    let report = sample_report();
    let json: serde_json::Value = serde_json::from_str(&to_json(&report).unwrap()).unwrap();
    let csv = to_csv(&report).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(records.len(), rows.len());
    for (record, row) in records.iter().zip(rows) {
        for (name, field) in headers.iter().zip(record.iter()) {
            match &row[name] {
                serde_json::Value::Number(n) => {
                    let parsed: f64 = field.parse().unwrap();
                    assert!(close6(parsed, n.as_f64().unwrap()), "{name}: {field} vs {n}");
                }
                serde_json::Value::String(s) => assert_eq!(field, s),
                other => panic!("unexpected json value {other}"),
            }
        }
    }
}

#[test]
fn markdown_has_one_data_row_per_config() {
    let md = to_markdown(&sample_report());
    let table: Vec<&str> = md.lines().filter(|l| l.starts_with('|')).collect();
    assert_eq!(table.len(), 2 + 2, "{md}");
}

#[test]
fn empty_report_is_valid_json() {
    let r = BenchReport::new(0, TaskKind::TextChar, vec![]);
    let v: serde_json::Value = serde_json::from_str(&to_json(&r).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 0);
}

#[test]
fn report_identity_holds() {
    for row in sample_report().rows {
        let product = row.mean_accepted_block_size * row.iterations_total as f64;
        assert!((product - row.output_tokens_total as f64).abs() < 1e-9);
    }
}

fn write_spec(dir: &Path, name: &str, seed: u64, pairs: usize) -> String {
    let path = dir.join(name);
    std::fs::write(
        &path,
        format!("seed = {seed}\npairs = {pairs}\nalphabet = 12\nmin_len = 3\nmax_len = 5\nrule = \"copy\"\n"),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn train_small(dir: &Path, corpus: &str, out: &str, seed: &str, extra: &[&str]) -> Output {
    run_ok(
        bin()
            .current_dir(dir)
            .args(["--seed", seed, "train", "--corpus", corpus, "--task", "synthetic_pattern", "--model-out", out])
            .args(["--d-model", "16", "--d-hidden", "16", "--attn-heads", "2", "--steps", "60", "--batch-size", "4"])
            .args(extra),
    )
}

#[test]
fn cli_train_then_decode_is_reproducible_and_traces_sum() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_spec(dir.path(), "train.toml", 1, 40);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let ckpt = format!("m{run}.ckpt");
        train_small(dir.path(), &corpus, &ckpt, "11", &["--heads", "3"]);
        let out =
            run_ok(bin().current_dir(dir.path()).args(["decode", "--checkpoint", &ckpt, "--input", &corpus]).args([
                "--task",
                "synthetic_pattern",
                "--k",
                "3",
            ]));
        outputs.push(out.stdout);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(std::fs::read(dir.path().join("m0.ckpt")).unwrap(), std::fs::read(dir.path().join("m1.ckpt")).unwrap());

    let text = String::from_utf8(outputs.remove(0)).unwrap();
    let mut decoded = 0;
    for block in text.split("\n\n").filter(|b| !b.trim().is_empty()) {
        let steps: usize = block
            .lines()
            .filter_map(|l| l.strip_prefix("Step "))
            .map(|l| l.split(": ").nth(1).unwrap().split(' ').next().unwrap().parse::<usize>().unwrap())
            .sum();
        let output_line = block.lines().find(|l| l.starts_with("Output:")).unwrap();
        let total: usize = output_line.split('(').nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        assert_eq!(steps, total, "{block}");
        decoded += 1;
    }
    assert_eq!(decoded, 40);
}

#[test]
fn cli_eval_reproduces_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_spec(dir.path(), "train.toml", 2, 30);
    let val = write_spec(dir.path(), "val.toml", 3, 10);
    let train = train_small(dir.path(), &corpus, "m.ckpt", "4", &["--heads", "2", "--val-corpus", &val]);
    let trained: serde_json::Value = serde_json::from_slice(&train.stdout).unwrap();
    let eval = run_ok(bin().current_dir(dir.path()).args([
        "eval",
        "--checkpoint",
        "m.ckpt",
        "--corpus",
        &val,
        "--task",
        "synthetic_pattern",
    ]));
    let evaluated: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(trained["validation_loss"], evaluated["validation_loss"]);
    assert!(evaluated["head_1_loss"].is_number());
}

#[test]
fn cli_seed_env_fallback_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_spec(dir.path(), "train.toml", 5, 20);
    train_small(dir.path(), &corpus, "flag.ckpt", "77", &[]);
    run_ok(
        bin()
            .current_dir(dir.path())
            .env("BLOCKDEC_SEED", "77")
            .args(["train", "--corpus", &corpus, "--task", "synthetic_pattern", "--model-out", "env.ckpt"])
            .args(["--d-model", "16", "--d-hidden", "16", "--attn-heads", "2", "--steps", "60", "--batch-size", "4"]),
    );
    assert_eq!(
        std::fs::read(dir.path().join("flag.ckpt")).unwrap(),
        std::fs::read(dir.path().join("env.ckpt")).unwrap()
    );
}

#[test]
fn cli_distill_writes_a_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_spec(dir.path(), "train.toml", 6, 15);
    train_small(dir.path(), &corpus, "t.ckpt", "1", &[]);
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(["--out", "distilled.txt", "distill", "--teacher", "t.ckpt", "--corpus", &corpus])
            .args(["--task", "synthetic_pattern"]),
    );
    let distilled = load_corpus(dir.path().join("distilled.txt"), TaskKind::SyntheticPattern).unwrap();
    let original = load_corpus(&corpus, TaskKind::SyntheticPattern).unwrap();
    assert_eq!(distilled.inputs(), original.inputs());
    assert_eq!(distilled.vocab, original.vocab);
}

#[test]
fn cli_bench_k1_has_unit_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_spec(dir.path(), "eval.toml", 7, 10);
    let out = run_ok(bin().current_dir(dir.path()).args([
        "bench",
        "--corpus",
        &corpus,
        "--task",
        "synthetic_pattern",
        "--synthetic",
        "random",
        "--k",
        "1",
    ]));
    let report: BenchReport = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].wall_clock_speedup_vs_greedy, 1.0);
    assert_eq!(report.rows[0].greedy_match_rate, 1.0);
}

#[test]
fn cli_bench_formats() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_spec(dir.path(), "eval.toml", 8, 5);
    let out = run_ok(
        bin()
            .current_dir(dir.path())
            .args(["--report-format", "markdown", "--out", "r.md", "bench", "--corpus", &corpus])
            .args([
                "--task",
                "synthetic_pattern",
                "--synthetic",
                "perfect",
                "--k",
                "1,2",
                "--criterion",
                "kind=top_k,k=2",
            ]),
    );
    assert!(out.stdout.is_empty());
    let md = std::fs::read_to_string(dir.path().join("r.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 3, "{md}");
    let csv = stdout(&run_ok(
        bin()
            .current_dir(dir.path())
            .args(["--report-format", "csv", "bench", "--corpus", &corpus, "--task", "synthetic_pattern"])
            .args(["--synthetic", "adversarial", "--k", "2"]),
    ));
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("regime,k,criterion"));
}

#[test]
fn cli_errors_exit_nonzero_with_a_message() {
    let missing = bin()
        .args(["bench", "--corpus", "/nonexistent/x", "--task", "text_char", "--synthetic", "perfect"])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    let msg = String::from_utf8_lossy(&missing.stderr);
    assert!(msg.contains("/nonexistent/x"), "{msg}");

    let unknown = bin().args(["bench", "--no-such-flag"]).output().unwrap();
    assert!(!unknown.status.success());
    assert!(!unknown.stderr.is_empty());

    let bad_criterion = bin()
        .args(["decode", "--synthetic", "perfect", "--input", "x", "--task", "text_char", "--criterion", "kind=bogus"])
        .output()
        .unwrap();
    assert!(!bad_criterion.status.success());

    let dir = tempfile::tempdir().unwrap();
    let corpus = write_spec(dir.path(), "c.toml", 1, 3);
    let no_out = bin()
        .current_dir(dir.path())
        .args(["distill", "--teacher", "t.ckpt", "--corpus", &corpus, "--task", "synthetic_pattern"])
        .output()
        .unwrap();
    assert!(!no_out.status.success());
    assert!(String::from_utf8_lossy(&no_out.stderr).contains("--out"));
}
