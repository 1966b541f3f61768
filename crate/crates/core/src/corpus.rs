//! Dataset records, loading, quality filtering and seeded pool/test splits.
//!
//! Two on-disk formats are accepted:
//!
//! - JSONL: one object per line with keys `id`, `lang`, `task`, `script_text`,
//!   `ipa_text`, `roman_text`, `target_text` (`ipa_text` and `roman_text` optional).
//! - TSV: a header row naming the same columns in any order, UTF-8. Inside a
//!   field, `\t`, `\n`, `\r` and `\\` stand for tab, newline, carriage return
//!   and a literal backslash.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::rng::Xoshiro256StarStar;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("insufficient data: need at least {needed} examples after filtering, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("invalid quality filter: {0}")]
    InvalidFilter(String),
    #[error("example {id:?} has language {lang:?}, expected one of {allowed:?}")]
    UnexpectedLanguage {
        id: String,
        lang: String,
        allowed: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    AyaWiki,
    Flores,
    AyaMlqa,
    Other(String),
}

impl Task {
    pub fn as_str(&self) -> &str {
        match self {
            Task::AyaWiki => "aya-wiki",
            Task::Flores => "flores",
            Task::AyaMlqa => "aya-mlqa",
            Task::Other(s) => s,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Ok(match norm.as_str() {
            "aya-wiki" | "ayawiki" => Task::AyaWiki,
            "flores" => Task::Flores,
            "aya-mlqa" | "ayamlqa" | "mlqa" => Task::AyaMlqa,
            _ => Task::Other(s.trim().to_string()),
        })
    }
}

impl Serialize for Task {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Task {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

/// One aligned record: orthographic input, its transcriptions, and the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub lang: String,
    pub task: Task,
    pub script_text: String,
    #[serde(default)]
    pub ipa_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roman_text: Option<String>,
    pub target_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Tsv,
    Jsonl,
}

impl DatasetFormat {
    /// Guesses the format from a file extension (`.tsv` or anything else as JSONL).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tsv") => DatasetFormat::Tsv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(DatasetFormat::Tsv),
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    lang: Option<String>,
    task: Option<String>,
    script_text: Option<String>,
    ipa_text: Option<String>,
    roman_text: Option<String>,
    target_text: Option<String>,
}

impl RawRecord {
    fn into_example(self, line: usize) -> Result<Example, CorpusError> {
        fn req(v: Option<String>, name: &str, line: usize) -> Result<String, CorpusError> {
            v.ok_or_else(|| CorpusError::MalformedRecord {
                line,
                reason: format!("missing required field {name:?}"),
            })
        }
        Ok(Example {
            id: req(self.id, "id", line)?,
            lang: req(self.lang, "lang", line)?,
            task: req(self.task, "task", line)?.parse().expect("infallible"),
            script_text: req(self.script_text, "script_text", line)?,
            ipa_text: self.ipa_text.unwrap_or_default(),
            roman_text: self.roman_text.filter(|r| !r.is_empty()),
            target_text: req(self.target_text, "target_text", line)?,
        })
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<Example>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, format)
}

pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<Vec<Example>, CorpusError> {
    let examples = match format {
        DatasetFormat::Jsonl => parse_jsonl(text)?,
        DatasetFormat::Tsv => parse_tsv(text)?,
    };
    let mut seen = HashSet::new();
    for ex in &examples {
        if !seen.insert(ex.id.as_str()) {
            return Err(CorpusError::DuplicateId(ex.id.clone()));
        }
    }
    Ok(examples)
}

fn parse_jsonl(text: &str) -> Result<Vec<Example>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        out.push(raw.into_example(line_no)?);
    }
    Ok(out)
}

const COLUMNS: [&str; 7] = [
    "id",
    "lang",
    "task",
    "script_text",
    "ipa_text",
    "roman_text",
    "target_text",
];

fn parse_tsv(text: &str) -> Result<Vec<Example>, CorpusError> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let mut col = [None; COLUMNS.len()];
    for (pos, name) in names.iter().enumerate() {
        if let Some(k) = COLUMNS.iter().position(|c| c == name) {
            col[k] = Some(pos);
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |k: usize| -> Result<Option<String>, CorpusError> {
            match col[k] {
                None => Ok(None),
                Some(p) => match fields.get(p) {
                    Some(f) => unescape_tsv(f).map(Some).map_err(|reason| {
                        CorpusError::MalformedRecord {
                            line: line_no,
                            reason,
                        }
                    }),
                    None => Ok(None),
                },
            }
        };
        let raw = RawRecord {
            id: get(0)?,
            lang: get(1)?,
            task: get(2)?,
            script_text: get(3)?,
            ipa_text: get(4)?,
            roman_text: get(5)?,
            target_text: get(6)?,
        };
        out.push(raw.into_example(line_no)?);
    }
    Ok(out)
}

fn unescape_tsv(field: &str) -> Result<String, String> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".to_string()),
        }
    }
    Ok(out)
}

fn escape_tsv(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

pub fn to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn to_tsv(examples: &[Example]) -> String {
    let mut out = COLUMNS.join("\t");
    out.push('\n');
    for ex in examples {
        let row = [
            escape_tsv(&ex.id),
            escape_tsv(&ex.lang),
            escape_tsv(ex.task.as_str()),
            escape_tsv(&ex.script_text),
            escape_tsv(&ex.ipa_text),
            escape_tsv(ex.roman_text.as_deref().unwrap_or("")),
            escape_tsv(&ex.target_text),
        ];
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

/// Checks every example's language against the declared dataset languages.
pub fn check_languages(examples: &[Example], allowed: &[String]) -> Result<(), CorpusError> {
    for ex in examples {
        if !allowed.iter().any(|l| *l == ex.lang) {
            return Err(CorpusError::UnexpectedLanguage {
                id: ex.id.clone(),
                lang: ex.lang.clone(),
                allowed: allowed.to_vec(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityFilterConfig {
    pub reject_substrings: Vec<String>,
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for QualityFilterConfig {
    fn default() -> Self {
        Self {
            reject_substrings: vec!["<unk>".to_string()],
            min_chars: 1,
            max_chars: 100_000,
        }
    }
}

impl QualityFilterConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_chars == 0 {
            return Err(CorpusError::InvalidFilter("min_chars must be >= 1".into()));
        }
        if self.min_chars > self.max_chars {
            return Err(CorpusError::InvalidFilter(format!(
                "min_chars {} exceeds max_chars {}",
                self.min_chars, self.max_chars
            )));
        }
        Ok(())
    }

    pub fn accepts(&self, ex: &Example) -> bool {
        let len = ex.script_text.chars().count();
        if len < self.min_chars || len > self.max_chars {
            return false;
        }
        let fields = [
            ex.script_text.as_str(),
            ex.ipa_text.as_str(),
            ex.roman_text.as_deref().unwrap_or(""),
            ex.target_text.as_str(),
        ];
        !self
            .reject_substrings
            .iter()
            .filter(|s| !s.is_empty())
            .any(|bad| fields.iter().any(|f| f.contains(bad.as_str())))
    }

    pub fn apply(&self, examples: &[Example]) -> Vec<Example> {
        examples.iter().filter(|e| self.accepts(e)).cloned().collect()
    }
}

/// Disjoint retrieval pool and test set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
    pub seed: u64,
}

/// What is written next to a split so it can be audited and rebuilt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_size: usize,
    pub pool_size: usize,
    pub filter: QualityFilterConfig,
    pub available_after_filter: usize,
    pub test_ids: Vec<String>,
    pub pool_ids: Vec<String>,
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Filters, then draws `test_size` test examples and up to `pool_size` pool
/// examples from what remains.
///
/// A single permutation prefix is drawn with [`Xoshiro256StarStar`]: the first
/// `test_size` draws form the test set and the following draws form the pool.
/// Both partitions are returned in original dataset order.
pub fn make_split(
    examples: &[Example],
    test_size: usize,
    pool_size: usize,
    seed: u64,
    filter: &QualityFilterConfig,
) -> Result<(CorpusSplit, SplitManifest), CorpusError> {
    filter.validate()?;
    let clean = filter.apply(examples);
    if clean.len() < test_size + 1 {
        return Err(CorpusError::InsufficientData {
            needed: test_size + 1,
            available: clean.len(),
        });
    }
    let pool_n = pool_size.min(clean.len() - test_size);
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let drawn = rng.sample_indices(clean.len(), test_size + pool_n);
    let mut test_idx = drawn[..test_size].to_vec();
    let mut pool_idx = drawn[test_size..].to_vec();
    test_idx.sort_unstable();
    pool_idx.sort_unstable();
    let test: Vec<Example> = test_idx.iter().map(|&i| clean[i].clone()).collect();
    let pool: Vec<Example> = pool_idx.iter().map(|&i| clean[i].clone()).collect();
    let manifest = SplitManifest {
        seed,
        test_size,
        pool_size,
        filter: filter.clone(),
        available_after_filter: clean.len(),
        test_ids: test.iter().map(|e| e.id.clone()).collect(),
        pool_ids: pool.iter().map(|e| e.id.clone()).collect(),
    };
    Ok((CorpusSplit { pool, test, seed }, manifest))
}
