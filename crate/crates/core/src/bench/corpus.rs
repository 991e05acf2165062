//! Corpus formats.
//!
//! - `text_char`: UTF-8 lines `input<TAB>target`, tokenized to bytes.
//! - `synthetic_pattern`: a TOML pattern spec generated in-process, or a
//!   token-id pair file (see below) with an optional `# alphabet=N` header.
//! - `intensity_grid`: token-id pair files whose values are intensities
//!   `0..=255`, one flattened grid per side in raster order.
//!
//! Token-id pair files hold one pair per line: whitespace-separated integers,
//! a TAB, more integers. Empty lines and `#` comments are skipped.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::TokenSpace;
use crate::{SequencePair, TokenId};

pub const INTENSITY_LEVELS: u32 = 256;
pub const DEFAULT_ALPHABET: usize = 64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: token {token} outside vocabulary of size {vocab}")]
    Vocab { line: usize, token: u64, vocab: usize },
    #[error("invalid pattern spec: {0}")]
    Spec(String),
    #[error("pair {index} cannot be written as {kind}: {reason}")]
    Unrepresentable { index: usize, kind: TaskKind, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TextChar,
    SyntheticPattern,
    IntensityGrid,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::TextChar => "text_char",
            TaskKind::SyntheticPattern => "synthetic_pattern",
            TaskKind::IntensityGrid => "intensity_grid",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text_char" => Ok(TaskKind::TextChar),
            "synthetic_pattern" => Ok(TaskKind::SyntheticPattern),
            "intensity_grid" => Ok(TaskKind::IntensityGrid),
            other => Err(format!("unknown task kind `{other}` (text_char, synthetic_pattern, intensity_grid)")),
        }
    }
}

/// Token-id space of a task. The last id is always the EOS control token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub kind: TaskKind,
    /// Number of content symbols: 256 bytes, the pattern alphabet, or 256
    /// intensity levels.
    pub symbols: usize,
}

impl Vocab {
    pub fn for_task(kind: TaskKind, alphabet: usize) -> Self {
        let symbols = match kind {
            TaskKind::TextChar => 256,
            TaskKind::SyntheticPattern => alphabet,
            TaskKind::IntensityGrid => INTENSITY_LEVELS as usize,
        };
        Self { kind, symbols }
    }

    pub fn size(&self) -> usize {
        self.symbols + 1
    }

    pub fn eos_token(&self) -> TokenId {
        self.symbols as TokenId
    }

    /// EOS used when decoding; intensity grids decode a fixed number of steps.
    pub fn decode_eos(&self) -> Option<TokenId> {
        (self.kind != TaskKind::IntensityGrid).then(|| self.eos_token())
    }

    pub fn token_space(&self) -> TokenSpace {
        match self.kind {
            TaskKind::IntensityGrid => TokenSpace::Intensity { levels: INTENSITY_LEVELS },
            _ => TokenSpace::Categorical,
        }
    }

    pub fn symbol(&self, t: TokenId) -> String {
        if t == self.eos_token() {
            return "<EOS>".into();
        }
        match self.kind {
            TaskKind::TextChar => match u8::try_from(t) {
                Ok(b) if b.is_ascii_graphic() => (b as char).to_string(),
                Ok(b) => format!("\\x{b:02x}"),
                Err(_) => format!("<{t}>"),
            },
            _ => t.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    /// Targets exclude EOS.
    pub pairs: Vec<SequencePair>,
    pub vocab: Vocab,
    pub task_kind: TaskKind,
}

impl Corpus {
    pub fn new(task_kind: TaskKind, vocab: Vocab, pairs: Vec<SequencePair>) -> Self {
        Self { pairs, vocab, task_kind }
    }

    pub fn inputs(&self) -> Vec<Vec<TokenId>> {
        self.pairs.iter().map(|(x, _)| x.clone()).collect()
    }

    /// Pairs as the model is trained on them: targets end in EOS unless the
    /// task decodes a fixed number of steps.
    pub fn training_pairs(&self) -> Vec<SequencePair> {
        self.pairs
            .iter()
            .map(|(x, y)| {
                let mut y = y.clone();
                y.extend(self.vocab.decode_eos());
                (x.clone(), y)
            })
            .collect()
    }

    pub fn max_input_len(&self) -> usize {
        self.pairs.iter().map(|(x, _)| x.len()).max().unwrap_or(0)
    }

    pub fn max_target_len(&self) -> usize {
        self.pairs.iter().map(|(_, y)| y.len()).max().unwrap_or(0)
    }

    /// Replace the targets with `outputs`, dropping a trailing EOS.
    pub fn with_targets(&self, outputs: Vec<Vec<TokenId>>) -> Self {
        let eos = self.vocab.eos_token();
        let pairs = self
            .pairs
            .iter()
            .zip(outputs)
            .map(|((x, _), mut y)| {
                if y.last() == Some(&eos) {
                    y.pop();
                }
                (x.clone(), y)
            })
            .collect();
        Self { pairs, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternRule {
    /// `y = x`
    Copy,
    /// `y = reverse(x)`
    Reverse,
    /// `y = x ++ x`
    Repeat,
}

impl PatternRule {
    fn apply(self, x: &[TokenId]) -> Vec<TokenId> {
        match self {
            PatternRule::Copy => x.to_vec(),
            PatternRule::Reverse => x.iter().rev().copied().collect(),
            PatternRule::Repeat => x.iter().chain(x).copied().collect(),
        }
    }
}

/// Seeded pattern-transduction corpus description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub seed: u64,
    pub pairs: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: PatternRule,
    /// Probability that a target token is replaced by a random symbol.
    #[serde(default)]
    pub noise: f64,
}

fn default_alphabet() -> usize {
    DEFAULT_ALPHABET
}

impl PatternSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.alphabet < 2 {
            return Err(CorpusError::Spec("alphabet must be >= 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CorpusError::Spec("need 1 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(CorpusError::Spec("noise must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Corpus, CorpusError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = self.alphabet as TokenId;
        let pairs = (0..self.pairs)
            .map(|_| {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let x: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..a)).collect();
                let mut y = self.rule.apply(&x);
                for t in &mut y {
                    if rng.gen::<f64>() < self.noise {
                        *t = rng.gen_range(0..a);
                    }
                }
                (x, y)
            })
            .collect();
        let vocab = Vocab::for_task(TaskKind::SyntheticPattern, self.alphabet);
        Ok(Corpus::new(TaskKind::SyntheticPattern, vocab, pairs))
    }
}

fn parse_ids(text: &str, line: usize, vocab_symbols: usize) -> Result<Vec<TokenId>, CorpusError> {
    text.split_whitespace()
        .map(|tok| {
            let v: u64 =
                tok.parse().map_err(|_| CorpusError::Parse { line, message: format!("`{tok}` is not a token id") })?;
            if v >= vocab_symbols as u64 {
                return Err(CorpusError::Vocab { line, token: v, vocab: vocab_symbols });
            }
            Ok(v as TokenId)
        })
        .collect()
}

fn parse_id_pairs(content: &str, symbols: usize) -> Result<Vec<SequencePair>, CorpusError> {
    let mut pairs = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        let text = raw.trim_end_matches('\r');
        if text.trim().is_empty() || text.trim_start().starts_with('#') {
            continue;
        }
        let (x, y) = text
            .split_once('\t')
            .ok_or_else(|| CorpusError::Parse { line, message: "expected `input<TAB>target`".into() })?;
        pairs.push((parse_ids(x, line, symbols)?, parse_ids(y, line, symbols)?));
    }
    Ok(pairs)
}

fn alphabet_header(content: &str) -> Result<Option<usize>, CorpusError> {
    for (i, raw) in content.lines().enumerate() {
        let Some(rest) = raw.trim().strip_prefix('#') else { continue };
        if let Some(value) = rest.trim().strip_prefix("alphabet=") {
            return value
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| CorpusError::Parse { line: i + 1, message: format!("bad alphabet header `{value}`") });
        }
    }
    Ok(None)
}

fn looks_like_spec(content: &str) -> bool {
    content
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .is_some_and(|l| l.contains('=') && !l.contains('\t'))
}

pub fn parse_corpus(content: &str, task_kind: TaskKind) -> Result<Corpus, CorpusError> {
    match task_kind {
        TaskKind::TextChar => {
            let mut pairs = Vec::new();
            for (i, raw) in content.lines().enumerate() {
                let text = raw.trim_end_matches('\r');
                if text.is_empty() {
                    continue;
                }
                let (x, y) = text
                    .split_once('\t')
                    .ok_or_else(|| CorpusError::Parse { line: i + 1, message: "expected `input<TAB>target`".into() })?;
                let bytes = |s: &str| s.bytes().map(TokenId::from).collect::<Vec<_>>();
                pairs.push((bytes(x), bytes(y)));
            }
            Ok(Corpus::new(task_kind, Vocab::for_task(task_kind, 0), pairs))
        }
        TaskKind::SyntheticPattern if looks_like_spec(content) => {
            let spec: PatternSpec = toml::from_str(content).map_err(|e| CorpusError::Spec(e.to_string()))?;
            spec.generate()
        }
        TaskKind::SyntheticPattern => {
            let alphabet = alphabet_header(content)?.unwrap_or(DEFAULT_ALPHABET);
            let pairs = parse_id_pairs(content, alphabet)?;
            Ok(Corpus::new(task_kind, Vocab::for_task(task_kind, alphabet), pairs))
        }
        TaskKind::IntensityGrid => {
            let pairs = parse_id_pairs(content, INTENSITY_LEVELS as usize)?;
            Ok(Corpus::new(task_kind, Vocab::for_task(task_kind, 0), pairs))
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, task_kind: TaskKind) -> Result<Corpus, CorpusError> {
    let bytes = fs::read(path)?;
    let content = String::from_utf8(bytes).map_err(|e| {
        let line = e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        CorpusError::Parse { line, message: "invalid UTF-8".into() }
    })?;
    parse_corpus(&content, task_kind)
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

pub fn format_corpus(corpus: &Corpus) -> Result<String, CorpusError> {
    let mut out = String::new();
    match corpus.task_kind {
        TaskKind::TextChar => {
            for (index, (x, y)) in corpus.pairs.iter().enumerate() {
                let text = |ids: &[TokenId]| -> Result<String, CorpusError> {
                    let bytes = ids.iter().map(|&t| u8::try_from(t)).collect::<Result<Vec<u8>, _>>().map_err(|_| {
                        CorpusError::Unrepresentable {
                            index,
                            kind: TaskKind::TextChar,
                            reason: "token is not a byte".into(),
                        }
                    })?;
                    let s = String::from_utf8(bytes).map_err(|_| CorpusError::Unrepresentable {
                        index,
                        kind: TaskKind::TextChar,
                        reason: "not valid UTF-8".into(),
                    })?;
                    if s.contains(['\t', '\n', '\r']) {
                        return Err(CorpusError::Unrepresentable {
                            index,
                            kind: TaskKind::TextChar,
                            reason: "contains a tab or line break".into(),
                        });
                    }
                    Ok(s)
                };
                out.push_str(&format!("{}\t{}\n", text(x)?, text(y)?));
            }
        }
        TaskKind::SyntheticPattern | TaskKind::IntensityGrid => {
            if corpus.task_kind == TaskKind::SyntheticPattern {
                out.push_str(&format!("# alphabet={}\n", corpus.vocab.symbols));
            }
            for (index, (x, y)) in corpus.pairs.iter().enumerate() {
                if let Some(&t) = x.iter().chain(y).find(|&&t| t as usize >= corpus.vocab.symbols) {
                    return Err(CorpusError::Unrepresentable {
                        index,
                        kind: corpus.task_kind,
                        reason: format!("token {t} is not a content symbol"),
                    });
                }
                out.push_str(&format!("{}\t{}\n", join_ids(x), join_ids(y)));
            }
        }
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    fs::write(path, format_corpus(corpus)?)?;
    Ok(())
}

/// Decode inputs for the `decode` command: the input side of each line (a
/// missing TAB means the whole line is input), or a generated pattern spec.
pub fn load_inputs(path: impl AsRef<Path>, task_kind: TaskKind) -> Result<(Vocab, Vec<Vec<TokenId>>), CorpusError> {
    let content = fs::read_to_string(path)?;
    if task_kind == TaskKind::SyntheticPattern && looks_like_spec(&content) {
        let c = parse_corpus(&content, task_kind)?;
        return Ok((c.vocab, c.inputs()));
    }
    let fixed: String = content
        .lines()
        .map(|l| {
            if l.contains('\t') || l.trim().is_empty() || l.trim_start().starts_with('#') {
                format!("{l}\n")
            } else {
                format!("{l}\t\n")
            }
        })
        .collect();
    let c = parse_corpus(&fixed, task_kind)?;
    Ok((c.vocab, c.inputs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_tokenization() {
        let c = parse_corpus("ab\tabab\n", TaskKind::TextChar).unwrap();
        assert_eq!(c.pairs, vec![(vec![97, 98], vec![97, 98, 97, 98])]);
        assert_eq!(c.vocab.size(), 257);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_corpus("a\tb\nno tab here\n", TaskKind::TextChar).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn intensity_out_of_range() {
        let err = parse_corpus("1 2\t3 256\n", TaskKind::IntensityGrid).unwrap_err();
        assert!(matches!(err, CorpusError::Vocab { line: 1, token: 256, .. }));
    }

    #[test]
    fn spec_generation_is_deterministic() {
        let text = "seed = 5\npairs = 20\nmin_len = 3\nmax_len = 6\nrule = \"repeat\"\nnoise = 0.1\n";
        let a = parse_corpus(text, TaskKind::SyntheticPattern).unwrap();
        let b = parse_corpus(text, TaskKind::SyntheticPattern).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs.len(), 20);
        assert_eq!(a.vocab.symbols, 64);
        assert!(a.pairs.iter().all(|(x, y)| y.len() == 2 * x.len()));
    }

    #[test]
    fn bad_spec() {
        let text = "seed = 5\npairs = 20\nmin_len = 0\nmax_len = 6\nrule = \"copy\"\n";
        assert!(matches!(parse_corpus(text, TaskKind::SyntheticPattern), Err(CorpusError::Spec(_))));
        let text = "seed = 5\npairs = 2\nmin_len = 1\nmax_len = 6\nrule = \"zigzag\"\n";
        assert!(matches!(parse_corpus(text, TaskKind::SyntheticPattern), Err(CorpusError::Spec(_))));
    }

    #[test]
    fn synthetic_pair_file_round_trip() {
        let spec = PatternSpec {
            seed: 1,
            pairs: 5,
            alphabet: 10,
            min_len: 2,
            max_len: 4,
            rule: PatternRule::Reverse,
            noise: 0.0,
        };
        let c = spec.generate().unwrap();
        let back = parse_corpus(&format_corpus(&c).unwrap(), TaskKind::SyntheticPattern).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn training_pairs_append_eos() {
        let c = parse_corpus("a\tb\n", TaskKind::TextChar).unwrap();
        assert_eq!(c.training_pairs()[0].1, vec![98, 256]);
        let g = parse_corpus("1\t2\n", TaskKind::IntensityGrid).unwrap();
        assert_eq!(g.training_pairs()[0].1, vec![2]);
    }

    #[test]
    fn text_writer_rejects_tabs() {
        let c = Corpus::new(TaskKind::TextChar, Vocab::for_task(TaskKind::TextChar, 0), vec![(vec![9], vec![97])]);
        assert!(matches!(format_corpus(&c), Err(CorpusError::Unrepresentable { index: 0, .. })));
    }
}
