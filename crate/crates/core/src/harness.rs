//! End-to-end experiment runs and the analyses built on their outputs.
//!
//! A [`RunManifest`] names every input: datasets, split sizes, transliteration
//! profiles, tokenizer, BM25 constants, strategies, prompt layout, endpoint,
//! replay cache and metric settings. All randomness derives from its `seed`:
//!
//! - split of dataset `(task, lang)`: `derive_seed(seed, "split/<task>/<lang>")`
//! - `random` / `split-half:shuffle` without explicit seeds:
//!   `derive_seed(seed, "strategy")`, further split per query by the retriever
//!
//! A run executes prepare → index → retrieve → prompt → complete → score for
//! every dataset and writes, under `output_dir`:
//!
//! - `report.json`: the [`EvalReport`]
//! - `retrievals.jsonl`, `prompts.jsonl`, `completions.jsonl`
//! - `splits/<task>.<lang>.json`: split manifests
//!
//! Intermediate files are written even when a later stage fails.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, DatasetFormat, Example, QualityFilterConfig, SplitManifest, Task};
use crate::g2p;
use crate::inference::{fingerprint, CacheMode, ChatTransport, Client, EndpointConfig, HttpTransport, ReplayCache};
use crate::metrics::{self, MetricConfig};
use crate::promptkit::{self, PromptConfig, PromptTemplate};
use crate::retrieve::{Bm25Params, Channel, RetrievalResult, RetrieveOptions, Retriever, StrategyId, VectorStore};
use crate::rng::derive_seed;
use crate::tokenize::Tokenizer;
use crate::util::sha256_hex;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Tolerance of the internal relative-gain audit.
pub const AUDIT_TOLERANCE: f64 = 1e-9;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Index,
    Retrieve,
    Prompt,
    Complete,
    Score,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prepare => "prepare",
            Stage::Index => "index",
            Stage::Retrieve => "retrieve",
            Stage::Prompt => "prompt",
            Stage::Complete => "complete",
            Stage::Score => "score",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{stage} stage failed ({context}): {source}")]
    Stage {
        stage: Stage,
        context: String,
        #[source]
        source: BoxError,
    },
    #[error("result lists differ: {0}")]
    QueryMismatch(String),
    #[error("no scores for language group {0:?}")]
    MissingGroup(String),
    #[error("audit failed: {0}")]
    AuditFailed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn stage_err<E: Into<BoxError>>(stage: Stage, context: impl Into<String>) -> impl FnOnce(E) -> HarnessError {
    let context = context.into();
    move |e| HarnessError::Stage {
        stage,
        context,
        source: e.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Bleu,
    Chrf,
    F1,
}

impl MetricKind {
    pub fn for_task(task: &Task) -> Option<MetricKind> {
        match task {
            Task::AyaWiki => Some(MetricKind::Bleu),
            Task::Flores => Some(MetricKind::Chrf),
            Task::AyaMlqa => Some(MetricKind::F1),
            Task::Other(_) => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Bleu => "bleu",
            MetricKind::Chrf => "chrf",
            MetricKind::F1 => "f1",
        }
    }

    /// Score on a 0-100 scale.
    pub fn score(
        &self,
        hyps: &[String],
        refs: &[String],
        lang: &str,
        cfg: &MetricConfig,
    ) -> Result<f64, metrics::MetricError> {
        match self {
            MetricKind::Bleu => metrics::corpus_bleu_lang(hyps, refs, lang, cfg),
            MetricKind::Chrf => metrics::corpus_chrf(hyps, refs, cfg),
            MetricKind::F1 => metrics::corpus_f1(hyps, refs, lang, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: Task,
    pub lang: String,
    pub path: String,
    /// Defaults to the task's standard metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub test_size: usize,
    pub pool_size: usize,
    #[serde(default)]
    pub filter: QualityFilterConfig,
}

/// Directories of transliteration profiles used to fill empty IPA / romanization fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct G2pSpec {
    pub ipa_profiles: Option<String>,
    pub roman_profiles: Option<String>,
    /// Regenerate fields even when the dataset already provides them.
    pub overwrite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self {
            kind: "ws".into(),
            vocab: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSpec {
    pub path: String,
    pub mode: CacheMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageGroups {
    pub latin: Vec<String>,
    pub nonlatin: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub datasets: Vec<DatasetSpec>,
    pub split: SplitSpec,
    #[serde(default)]
    pub g2p: G2pSpec,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    #[serde(default)]
    pub bm25: Bm25Params,
    /// Min-max normalize channel scores before fusing them.
    #[serde(default)]
    pub normalize: bool,
    pub strategies: Vec<String>,
    pub k: usize,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<String>,
    #[serde(default)]
    pub endpoint: EndpointConfig,
    pub cache: CacheSpec,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub groups: LanguageGroups,
    /// Strategy pairs whose retrieved sets are compared with [`overlap_at_k`].
    #[serde(default)]
    pub overlap: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_vectors: Option<String>,
    pub output_dir: String,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Directory relative paths are resolved against; not part of the manifest.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_parallelism() -> usize {
    4
}

impl RunManifest {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut m: RunManifest =
            serde_json::from_str(text).map_err(|e| HarnessError::Manifest(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical JSON encoding, with `output_dir` blanked so
    /// the same experiment hashes equally wherever its outputs go.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.output_dir.clear();
        sha256_hex(&serde_json::to_vec(&m).expect("manifest serializes"))
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn strategy_seed(&self) -> u64 {
        derive_seed(self.seed, "strategy")
    }

    pub fn parse_strategy(&self, s: &str) -> Result<StrategyId, HarnessError> {
        StrategyId::parse_with_seed(s, self.strategy_seed())
            .map_err(|e| HarnessError::Manifest(format!("strategy {s:?}: {e}")))
    }

    pub fn strategy_ids(&self) -> Result<Vec<StrategyId>, HarnessError> {
        self.strategies.iter().map(|s| self.parse_strategy(s)).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Manifest(m));
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert((d.task.clone(), d.lang.clone())) {
                return bad(format!("dataset {}/{} listed twice", d.task, d.lang));
            }
            if d.metric.is_none() && MetricKind::for_task(&d.task).is_none() {
                return bad(format!("task {} needs an explicit metric", d.task));
            }
        }
        if self.strategies.is_empty() {
            return bad("no strategies".into());
        }
        let ids = self.strategy_ids()?;
        if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
            return bad("duplicate strategies".into());
        }
        for pair in &self.overlap {
            for s in pair {
                self.parse_strategy(s)?;
            }
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.prompt.k_shots != self.k {
            return bad(format!(
                "prompt.k_shots ({}) must equal k ({})",
                self.prompt.k_shots, self.k
            ));
        }
        if self.parallelism == 0 {
            return bad("parallelism must be >= 1".into());
        }
        self.prompt.validate().map_err(|e| HarnessError::Manifest(e.to_string()))?;
        self.endpoint.validate().map_err(|e| HarnessError::Manifest(e.to_string()))?;
        self.metrics.validate().map_err(|e| HarnessError::Manifest(e.to_string()))?;
        self.bm25.validate().map_err(|e| HarnessError::Manifest(e.to_string()))?;
        self.split
            .filter
            .validate()
            .map_err(|e| HarnessError::Manifest(e.to_string()))?;
        Ok(())
    }
}

// Report types ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub task: Task,
    pub lang: String,
    pub strategy: String,
    pub metric: MetricKind,
    pub value: f64,
    pub n_items: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub task: Task,
    pub group: String,
    pub strategy: String,
    pub mean: f64,
    pub langs: Vec<String>,
    /// `(mean - random_mean) / random_mean`; absent without a positive Random baseline.
    pub relative_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub task: Task,
    pub lang: String,
    pub a: String,
    pub b: String,
    pub k: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub k: usize,
    pub strategies: Vec<String>,
    pub tokenizer_id: String,
    pub bm25: Bm25Params,
    pub normalize: bool,
    pub prompt: PromptConfig,
    pub shot_order: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub metrics: MetricConfig,
    pub bleu_tokenization: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub config: ConfigEcho,
    pub scores: Vec<ScoreRow>,
    pub groups: Vec<GroupRow>,
    pub overlaps: Vec<OverlapRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Manifest(format!("report: {e}")))
    }

    pub fn score(&self, task: &Task, lang: &str, strategy: &str) -> Option<f64> {
        self.scores
            .iter()
            .find(|r| &r.task == task && r.lang == lang && r.strategy == strategy)
            .map(|r| r.value)
    }

    fn tasks(&self) -> Vec<Task> {
        let mut out: Vec<Task> = Vec::new();
        for r in &self.scores {
            if !out.contains(&r.task) {
                out.push(r.task.clone());
            }
        }
        out
    }

    fn strategies(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.scores {
            if !out.contains(&r.strategy) {
                out.push(r.strategy.clone());
            }
        }
        out
    }

    fn random_strategy(&self) -> Option<String> {
        self.strategies()
            .into_iter()
            .find(|s| matches!(s.parse::<StrategyId>(), Ok(StrategyId::Random(_))))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(s - base) / base`, or `None` when `base <= 0`.
pub fn relative_gain(score: f64, base: f64) -> Option<f64> {
    (base > 0.0).then(|| (score - base) / base)
}

fn group_mean(report: &EvalReport, task: &Task, strategy: &str, langs: &[String]) -> Option<(f64, Vec<String>)> {
    let mut vals = Vec::new();
    let mut present = Vec::new();
    for l in langs {
        if let Some(v) = report.score(task, l, strategy) {
            vals.push(v);
            present.push(l.clone());
        }
    }
    (!vals.is_empty()).then(|| (mean(&vals), present))
}

/// Per task, group and strategy: mean score over the group's languages and gain over Random.
pub fn group_rows(report: &EvalReport, groups: &LanguageGroups) -> Vec<GroupRow> {
    let random = report.random_strategy();
    let mut rows = Vec::new();
    for task in report.tasks() {
        for (name, langs) in [("latin", &groups.latin), ("non-latin", &groups.nonlatin)] {
            let base = random
                .as_ref()
                .and_then(|r| group_mean(report, &task, r, langs))
                .map(|(m, _)| m);
            for s in report.strategies() {
                if let Some((m, present)) = group_mean(report, &task, &s, langs) {
                    rows.push(GroupRow {
                        task: task.clone(),
                        group: name.to_string(),
                        strategy: s.clone(),
                        mean: m,
                        langs: present,
                        relative_gain: base.and_then(|b| relative_gain(m, b)),
                    });
                }
            }
        }
    }
    rows
}

/// Recompute every group mean and relative gain from the raw scores.
pub fn audit(report: &EvalReport) -> Result<(), HarnessError> {
    let random = report.random_strategy();
    for g in &report.groups {
        let vals: Vec<f64> = g
            .langs
            .iter()
            .map(|l| {
                report.score(&g.task, l, &g.strategy).ok_or_else(|| {
                    HarnessError::AuditFailed(format!("no score for {}/{}/{}", g.task, l, g.strategy))
                })
            })
            .collect::<Result<_, _>>()?;
        if vals.is_empty() {
            return Err(HarnessError::AuditFailed(format!("empty group row {}/{}", g.task, g.group)));
        }
        let m = mean(&vals);
        if (m - g.mean).abs() > AUDIT_TOLERANCE {
            return Err(HarnessError::AuditFailed(format!(
                "{}/{}/{} mean {} != recomputed {m}",
                g.task, g.group, g.strategy, g.mean
            )));
        }
        let expected = random.as_ref().and_then(|r| {
            let base: Option<Vec<f64>> = g.langs.iter().map(|l| report.score(&g.task, l, r)).collect();
            base.and_then(|b| relative_gain(m, mean(&b)))
        });
        let ok = match (expected, g.relative_gain) {
            (None, None) => true,
            (Some(a), Some(b)) => (a - b).abs() <= AUDIT_TOLERANCE,
            _ => false,
        };
        if !ok {
            return Err(HarnessError::AuditFailed(format!(
                "{}/{}/{} gain {:?} != recomputed {expected:?}",
                g.task, g.group, g.strategy, g.relative_gain
            )));
        }
    }
    Ok(())
}

// Analyses -------------------------------------------------------------------

/// Mean over queries of `|top-k(a) ∩ top-k(b)| / k × 100`.
pub fn overlap_at_k(a: &[RetrievalResult], b: &[RetrievalResult], k: usize) -> Result<f64, HarnessError> {
    if k == 0 {
        return Err(HarnessError::QueryMismatch("k must be >= 1".into()));
    }
    if a.len() != b.len() {
        return Err(HarnessError::QueryMismatch(format!("{} vs {} queries", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(HarnessError::QueryMismatch("no queries".into()));
    }
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        if ra.query_id != rb.query_id {
            return Err(HarnessError::QueryMismatch(format!(
                "query {:?} vs {:?}",
                ra.query_id, rb.query_id
            )));
        }
        let sa: BTreeSet<&str> = ra.selected.iter().take(k).map(|s| s.id.as_str()).collect();
        let sb: BTreeSet<&str> = rb.selected.iter().take(k).map(|s| s.id.as_str()).collect();
        total += sa.intersection(&sb).count() as f64 / k as f64;
    }
    Ok(100.0 * total / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub task: Task,
    pub strategy: String,
    pub latin_mean: f64,
    pub nonlatin_mean: f64,
    /// `latin_mean - nonlatin_mean`.
    pub abs_gap: f64,
    /// `abs_gap / latin_mean` (0 when the Latin mean is 0).
    pub rel_gap: f64,
    pub latin_gain: Option<f64>,
    pub nonlatin_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
    /// Per strategy, the relative gap macro-averaged over tasks (each task weighs equally).
    pub macro_rel_gap: BTreeMap<String, f64>,
}

impl GapTable {
    pub fn row(&self, task: &Task, strategy: &str) -> Option<&GapRow> {
        self.rows.iter().find(|r| &r.task == task && r.strategy == strategy)
    }
}

pub fn gap_report(report: &EvalReport, latin: &[String], nonlatin: &[String]) -> Result<GapTable, HarnessError> {
    let random = report.random_strategy();
    let mut rows = Vec::new();
    let mut per_strategy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for task in report.tasks() {
        let base_l = random.as_ref().and_then(|r| group_mean(report, &task, r, latin)).map(|x| x.0);
        let base_n = random.as_ref().and_then(|r| group_mean(report, &task, r, nonlatin)).map(|x| x.0);
        for s in report.strategies() {
            let l = group_mean(report, &task, &s, latin);
            let n = group_mean(report, &task, &s, nonlatin);
            let (Some((lm, _)), Some((nm, _))) = (l, n) else {
                continue;
            };
            let abs_gap = lm - nm;
            let rel_gap = if lm != 0.0 { abs_gap / lm } else { 0.0 };
            per_strategy.entry(s.clone()).or_default().push(rel_gap);
            rows.push(GapRow {
                task: task.clone(),
                strategy: s.clone(),
                latin_mean: lm,
                nonlatin_mean: nm,
                abs_gap,
                rel_gap,
                latin_gain: base_l.and_then(|b| relative_gain(lm, b)),
                nonlatin_gain: base_n.and_then(|b| relative_gain(nm, b)),
            });
        }
    }
    if rows.is_empty() {
        let has = |langs: &[String]| {
            report.scores.iter().any(|r| langs.contains(&r.lang))
        };
        let missing = if !has(latin) { "latin" } else if !has(nonlatin) { "non-latin" } else { "latin+non-latin" };
        return Err(HarnessError::MissingGroup(missing.into()));
    }
    let macro_rel_gap = per_strategy.into_iter().map(|(s, v)| (s, mean(&v))).collect();
    Ok(GapTable { rows, macro_rel_gap })
}

// Rendering ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |g| format!("{:+.2}%", 100.0 * g))
}

/// Human-readable score table: one block per task, languages × strategies.
pub fn render_report(report: &EvalReport, format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("task,lang,strategy,metric,value,n_items,n_failed\n");
            for r in &report.scores {
                out.push_str(&format!(
                    "{},{},{},{},{:.4},{},{}\n",
                    r.task,
                    r.lang,
                    r.strategy,
                    r.metric.as_str(),
                    r.value,
                    r.n_items,
                    r.n_failed
                ));
            }
            for g in &report.groups {
                out.push_str(&format!(
                    "{},{}-avg,{},,{:.4},,\n",
                    g.task, g.group, g.strategy, g.mean
                ));
            }
        }
        TableFormat::Text => {
            let strategies = report.strategies();
            let w = strategies.iter().map(String::len).max().unwrap_or(0).max(10);
            for task in report.tasks() {
                let metric = report
                    .scores
                    .iter()
                    .find(|r| r.task == task)
                    .map_or("", |r| r.metric.as_str());
                out.push_str(&format!("{task} ({metric})\n"));
                out.push_str(&format!("{:<14}", "lang"));
                for s in &strategies {
                    out.push_str(&format!(" {s:>w$}"));
                }
                out.push('\n');
                let mut langs: Vec<&str> = Vec::new();
                for r in report.scores.iter().filter(|r| r.task == task) {
                    if !langs.contains(&r.lang.as_str()) {
                        langs.push(&r.lang);
                    }
                }
                for l in langs {
                    out.push_str(&format!("{l:<14}"));
                    for s in &strategies {
                        match report.score(&task, l, s) {
                            Some(v) => out.push_str(&format!(" {v:>w$.2}")),
                            None => out.push_str(&format!(" {:>w$}", "-")),
                        }
                    }
                    out.push('\n');
                }
                for group in ["latin", "non-latin"] {
                    let rows: Vec<&GroupRow> = report
                        .groups
                        .iter()
                        .filter(|g| g.task == task && g.group == group)
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    for (label, gain) in [("avg", false), ("gain", true)] {
                        out.push_str(&format!("{:<14}", format!("{group} {label}")));
                        for s in &strategies {
                            let cell = rows.iter().find(|g| &g.strategy == s).map_or("-".to_string(), |g| {
                                if gain {
                                    pct(g.relative_gain)
                                } else {
                                    format!("{:.2}", g.mean)
                                }
                            });
                            out.push_str(&format!(" {cell:>w$}"));
                        }
                        out.push('\n');
                    }
                }
                out.push('\n');
            }
            if !report.overlaps.is_empty() {
                out.push_str("overlap@k\n");
                for o in &report.overlaps {
                    out.push_str(&format!(
                        "{:<10} {:<6} {} vs {} @{}: {:.2}%\n",
                        o.task, o.lang, o.a, o.b, o.k, o.percent
                    ));
                }
            }
        }
    }
    out
}

pub fn render_gap_table(table: &GapTable, format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("task,strategy,latin_mean,nonlatin_mean,abs_gap,rel_gap,latin_gain,nonlatin_gain\n");
            let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
            for r in &table.rows {
                out.push_str(&format!(
                    "{},{},{:.4},{:.4},{:.4},{:.6},{},{}\n",
                    r.task,
                    r.strategy,
                    r.latin_mean,
                    r.nonlatin_mean,
                    r.abs_gap,
                    r.rel_gap,
                    opt(r.latin_gain),
                    opt(r.nonlatin_gain)
                ));
            }
        }
        TableFormat::Text => {
            let w = table.rows.iter().map(|r| r.strategy.len()).max().unwrap_or(0).max(8);
            out.push_str(&format!(
                "{:<10} {:<w$} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
                "task", "strategy", "latin", "nonlat", "gap", "rel", "gain L", "gain NL"
            ));
            for r in &table.rows {
                out.push_str(&format!(
                    "{:<10} {:<w$} {:>8.2} {:>8.2} {:>8.2} {:>7.2}% {:>9} {:>9}\n",
                    r.task.as_str(),
                    r.strategy,
                    r.latin_mean,
                    r.nonlatin_mean,
                    r.abs_gap,
                    100.0 * r.rel_gap,
                    pct(r.latin_gain),
                    pct(r.nonlatin_gain)
                ));
            }
            out.push_str("macro-average relative gap over tasks:\n");
            for (s, g) in &table.macro_rel_gap {
                out.push_str(&format!("  {s}: {:.2}%\n", 100.0 * g));
            }
        }
    }
    out
}

// Pipeline -------------------------------------------------------------------

/// A dataset after loading, transliteration and splitting.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub spec: DatasetSpec,
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
    pub split_manifest: SplitManifest,
}

impl PreparedDataset {
    pub fn key(&self) -> String {
        format!("{}.{}", self.spec.task, self.spec.lang)
    }
}

fn fill_field(
    examples: &mut [Example],
    dir: &Path,
    lang: &str,
    overwrite: bool,
    channel: Channel,
) -> Result<(), g2p::G2pError> {
    let needs = |e: &Example| match channel {
        Channel::Ipa => overwrite || e.ipa_text.is_empty(),
        Channel::Roman => overwrite || e.roman_text.as_deref().is_none_or(str::is_empty),
        Channel::Script => false,
    };
    if !examples.iter().any(needs) {
        return Ok(());
    }
    let profile = g2p::load_profile(dir, lang)?;
    for e in examples.iter_mut() {
        if needs(e) {
            let t = profile.transliterate(&e.script_text);
            match channel {
                Channel::Ipa => e.ipa_text = t,
                Channel::Roman => e.roman_text = Some(t),
                Channel::Script => {}
            }
        }
    }
    Ok(())
}

/// Load, transliterate and split one dataset.
pub fn prepare_dataset(manifest: &RunManifest, spec: &DatasetSpec) -> Result<PreparedDataset, HarnessError> {
    let ctx = format!("{}/{}", spec.task, spec.lang);
    let path = manifest.resolve(&spec.path);
    let mut examples =
        corpus::load_dataset(&path, DatasetFormat::from_path(&path)).map_err(stage_err(Stage::Prepare, &ctx))?;
    corpus::check_languages(&examples, std::slice::from_ref(&spec.lang)).map_err(stage_err(Stage::Prepare, &ctx))?;
    for e in &mut examples {
        e.task = spec.task.clone();
    }
    if let Some(dir) = &manifest.g2p.ipa_profiles {
        fill_field(&mut examples, &manifest.resolve(dir), &spec.lang, manifest.g2p.overwrite, Channel::Ipa)
            .map_err(stage_err(Stage::Prepare, &ctx))?;
    }
    if let Some(dir) = &manifest.g2p.roman_profiles {
        fill_field(&mut examples, &manifest.resolve(dir), &spec.lang, manifest.g2p.overwrite, Channel::Roman)
            .map_err(stage_err(Stage::Prepare, &ctx))?;
    }
    let seed = derive_seed(manifest.seed, &format!("split/{}/{}", spec.task, spec.lang));
    let (split, split_manifest) = corpus::make_split(
        &examples,
        manifest.split.test_size,
        manifest.split.pool_size,
        seed,
        &manifest.split.filter,
    )
    .map_err(stage_err(Stage::Prepare, &ctx))?;
    Ok(PreparedDataset {
        spec: spec.clone(),
        pool: split.pool,
        test: split.test,
        split_manifest,
    })
}

pub fn build_tokenizer(manifest: &RunManifest) -> Result<Tokenizer, HarnessError> {
    let vocab = manifest.tokenizer.vocab.as_ref().map(|v| manifest.resolve(v));
    Tokenizer::from_kind(&manifest.tokenizer.kind, vocab.as_deref()).map_err(stage_err(Stage::Index, "tokenizer"))
}

fn load_templates(manifest: &RunManifest) -> Result<BTreeMap<Task, PromptTemplate>, HarnessError> {
    match &manifest.templates {
        Some(p) => promptkit::load_templates(&manifest.resolve(p)).map_err(stage_err(Stage::Prompt, "templates")),
        None => Ok(promptkit::default_templates()),
    }
}

#[derive(Serialize)]
struct RetrievalLine<'a> {
    task: &'a Task,
    lang: &'a str,
    strategy: String,
    query_id: &'a str,
    selected: Vec<(&'a str, f64)>,
}

#[derive(Serialize)]
struct PromptLine<'a> {
    task: &'a Task,
    lang: &'a str,
    strategy: &'a str,
    query_id: &'a str,
    fingerprint: &'a str,
    prompt: &'a str,
}

#[derive(Serialize)]
struct CompletionLine<'a> {
    task: &'a Task,
    lang: &'a str,
    strategy: &'a str,
    query_id: &'a str,
    fingerprint: &'a str,
    response: Option<&'a str>,
    error: Option<String>,
    reference: &'a str,
}

#[derive(Default)]
struct Artifacts {
    splits: Vec<(String, String)>,
    retrievals: String,
    prompts: String,
    completions: String,
}

fn push_json<T: Serialize>(buf: &mut String, v: &T) {
    buf.push_str(&serde_json::to_string(v).expect("artifact serializes"));
    buf.push('\n');
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl Artifacts {
    fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let splits = dir.join("splits");
        std::fs::create_dir_all(&splits).map_err(|source| HarnessError::Io {
            path: splits.display().to_string(),
            source,
        })?;
        for (key, json) in &self.splits {
            write_file(&splits.join(format!("{key}.json")), json)?;
        }
        write_file(&dir.join("retrievals.jsonl"), &self.retrievals)?;
        write_file(&dir.join("prompts.jsonl"), &self.prompts)?;
        write_file(&dir.join("completions.jsonl"), &self.completions)
    }
}

/// Retrieval results for every test query under every named strategy.
pub fn retrieve_all(
    manifest: &RunManifest,
    data: &PreparedDataset,
    retriever: &Retriever,
    strategies: &[StrategyId],
) -> Result<HashMap<StrategyId, Vec<RetrievalResult>>, HarnessError> {
    let mut out = HashMap::new();
    for s in strategies {
        let ctx = format!("{} {s}", data.key());
        let results = retriever
            .retrieve_batch(&data.test, s, manifest.k, manifest.parallelism)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(stage_err(Stage::Retrieve, &ctx))?;
        out.insert(s.clone(), results);
    }
    Ok(out)
}

fn run_inner<T: ChatTransport>(
    manifest: &RunManifest,
    client: &Client<T>,
    cache: &ReplayCache,
    art: &mut Artifacts,
) -> Result<EvalReport, HarnessError> {
    let strategies = manifest.strategy_ids()?;
    let overlap_pairs: Vec<[StrategyId; 2]> = manifest
        .overlap
        .iter()
        .map(|[a, b]| Ok([manifest.parse_strategy(a)?, manifest.parse_strategy(b)?]))
        .collect::<Result<_, HarnessError>>()?;
    let mut needed: Vec<StrategyId> = strategies.clone();
    for p in &overlap_pairs {
        for s in p {
            if !needed.contains(s) {
                needed.push(s.clone());
            }
        }
    }
    let channels: BTreeSet<Channel> = needed.iter().flat_map(|s| s.channels()).collect();
    let channels: Vec<Channel> = channels.into_iter().collect();
    let tokenizer = build_tokenizer(manifest)?;
    let templates = load_templates(manifest)?;
    let dense = match &manifest.dense_vectors {
        Some(p) => Some(VectorStore::load(&manifest.resolve(p)).map_err(stage_err(Stage::Index, "dense vectors"))?),
        None => None,
    };

    let mut scores = Vec::new();
    let mut overlaps = Vec::new();
    for spec in &manifest.datasets {
        let data = prepare_dataset(manifest, spec)?;
        art.splits.push((data.key(), data.split_manifest.to_json()));
        let key = data.key();

        let mut retriever = Retriever::build(&data.pool, &channels, tokenizer.clone(), manifest.bm25)
            .map_err(stage_err(Stage::Index, &key))?
            .with_options(RetrieveOptions {
                normalize: manifest.normalize,
            });
        if let Some(d) = &dense {
            retriever = retriever.with_dense(d.clone());
        }
        let results = retrieve_all(manifest, &data, &retriever, &needed)?;
        for s in &strategies {
            for r in &results[s] {
                push_json(
                    &mut art.retrievals,
                    &RetrievalLine {
                        task: &spec.task,
                        lang: &spec.lang,
                        strategy: s.to_string(),
                        query_id: &r.query_id,
                        selected: r.selected.iter().map(|x| (x.id.as_str(), x.score)).collect(),
                    },
                );
            }
        }
        for [a, b] in &overlap_pairs {
            overlaps.push(OverlapRow {
                task: spec.task.clone(),
                lang: spec.lang.clone(),
                a: a.to_string(),
                b: b.to_string(),
                k: manifest.k,
                percent: overlap_at_k(&results[a], &results[b], manifest.k)?,
            });
        }

        let template = templates
            .get(&spec.task)
            .ok_or_else(|| stage_err(Stage::Prompt, &key)(promptkit::PromptError::UnknownTask(spec.task.clone())))?;
        let metric = spec.metric.or_else(|| MetricKind::for_task(&spec.task)).expect("validated");
        for s in &strategies {
            let sname = s.to_string();
            let mut prompts = Vec::with_capacity(data.test.len());
            for (q, r) in data.test.iter().zip(&results[s]) {
                let shots: Vec<Example> = r.selected.iter().map(|x| data.pool[x.ordinal].clone()).collect();
                let p = promptkit::render_prompt(template, &manifest.prompt, &shots, q)
                    .map_err(stage_err(Stage::Prompt, format!("{key} {sname} {}", q.id)))?;
                prompts.push(p);
            }
            let fps: Vec<String> = prompts.iter().map(|p| fingerprint(client.config(), p)).collect();
            for ((q, p), fp) in data.test.iter().zip(&prompts).zip(&fps) {
                push_json(
                    &mut art.prompts,
                    &PromptLine {
                        task: &spec.task,
                        lang: &spec.lang,
                        strategy: &sname,
                        query_id: &q.id,
                        fingerprint: fp,
                        prompt: p,
                    },
                );
            }
            let outputs = client.complete_batch(&prompts, cache);
            let mut hyps = Vec::with_capacity(outputs.len());
            let mut n_failed = 0;
            for ((q, fp), out) in data.test.iter().zip(&fps).zip(&outputs) {
                let (response, error) = match out {
                    Ok(t) => (Some(t.as_str()), None),
                    Err(e) => {
                        n_failed += 1;
                        (None, Some(e.to_string()))
                    }
                };
                hyps.push(response.unwrap_or("").trim().to_string());
                push_json(
                    &mut art.completions,
                    &CompletionLine {
                        task: &spec.task,
                        lang: &spec.lang,
                        strategy: &sname,
                        query_id: &q.id,
                        fingerprint: fp,
                        response,
                        error,
                        reference: &q.target_text,
                    },
                );
            }
            let refs: Vec<String> = data.test.iter().map(|e| e.target_text.clone()).collect();
            let value = metric
                .score(&hyps, &refs, &spec.lang, &manifest.metrics)
                .map_err(stage_err(Stage::Score, format!("{key} {sname}")))?;
            scores.push(ScoreRow {
                task: spec.task.clone(),
                lang: spec.lang.clone(),
                strategy: sname,
                metric,
                value,
                n_items: hyps.len(),
                n_failed,
            });
        }
    }

    let charlevel: Vec<&str> = manifest.metrics.bleu_charlevel_langs.iter().map(String::as_str).collect();
    let mut report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        manifest_hash: manifest.hash(),
        config: ConfigEcho {
            seed: manifest.seed,
            k: manifest.k,
            strategies: strategies.iter().map(|s| s.to_string()).collect(),
            tokenizer_id: tokenizer.id().to_string(),
            bm25: manifest.bm25,
            normalize: manifest.normalize,
            prompt: manifest.prompt.clone(),
            shot_order: "retrieval order: descending score, ties by pool order; random: pool order".into(),
            model: manifest.endpoint.model.clone(),
            temperature: manifest.endpoint.temperature,
            max_tokens: manifest.endpoint.max_tokens,
            metrics: manifest.metrics.clone(),
            bleu_tokenization: format!("13a; characters for {}", charlevel.join(",")),
        },
        scores,
        groups: Vec::new(),
        overlaps,
    };
    report.groups = group_rows(&report, &manifest.groups);
    audit(&report)?;
    Ok(report)
}

/// Run a manifest against its configured endpoint (or purely from cache in Replay mode).
pub fn run_experiment(manifest: &RunManifest) -> Result<EvalReport, HarnessError> {
    let client = Client::with_transport(manifest.endpoint.clone(), HttpTransport)
        .map_err(|e| HarnessError::Manifest(e.to_string()))?;
    run_experiment_with(manifest, &client)
}

/// As [`run_experiment`] with a caller-supplied transport.
pub fn run_experiment_with<T: ChatTransport>(
    manifest: &RunManifest,
    client: &Client<T>,
) -> Result<EvalReport, HarnessError> {
    manifest.validate()?;
    let out_dir = manifest.resolve(&manifest.output_dir);
    std::fs::create_dir_all(&out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let cache_path = manifest.resolve(&manifest.cache.path);
    let cache = ReplayCache::open(&cache_path, manifest.cache.mode).map_err(stage_err(Stage::Complete, "cache"))?;

    let mut art = Artifacts::default();
    let result = run_inner(manifest, client, &cache, &mut art);
    // Persist whatever was produced, even on failure.
    let flushed = cache.flush().map_err(stage_err(Stage::Write, "cache"));
    let written = art.write(&out_dir);
    let report = result?;
    flushed?;
    written?;
    write_file(&out_dir.join("report.json"), &report.to_json())?;
    Ok(report)
}
