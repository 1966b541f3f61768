//! BM25 indexing, dense cosine retrieval, and in-context example selection.
//!
//! Scoring uses Okapi BM25 with the non-negative idf
//!
//! ```text
//! idf(t)    = max(idf_floor, ln((N - df + 0.5) / (df + 0.5) + 1))
//! score(d)  = Σ_{t ∈ q} idf(t) · tf · (k1 + 1) / (tf + k1 · (1 - b + b · len_d / avg_len))
//! ```
//!
//! where the sum runs over query token occurrences (a repeated query token
//! contributes once per occurrence).
//!
//! Every ranking orders by descending score and breaks ties by ascending
//! pool ordinal.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::Example;
use crate::rng::{derive_seed, Xoshiro256StarStar};
use crate::tokenize::{TokenStream, Tokenizer};

pub const SNAPSHOT_FORMAT: &str = "phonicl-bm25-index";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error("cannot build an index over an empty pool")]
    EmptyPool,
    #[error("every {0} text in the pool is empty")]
    EmptyChannel(Channel),
    #[error("query tokenized with {query:?} but index built with {index:?}")]
    TokenizerMismatch { index: String, query: String },
    #[error("no {0} index available")]
    MissingChannel(Channel),
    #[error("query {id:?} has no {channel} text")]
    MissingQueryText { id: String, channel: Channel },
    #[error("split-half needs an even k, got {0}")]
    OddKForSplitHalf(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no dense vector for {0:?}")]
    MissingVectors(String),
    #[error("indexes disagree on the pool")]
    PoolMismatch,
    #[error("snapshot version mismatch: expected {expected}, found {found}")]
    SnapshotVersionMismatch { expected: String, found: String },
    #[error("snapshot is corrupt: {0}")]
    SnapshotParse(String),
    #[error("bad vector file: {0}")]
    VectorParse(String),
    #[error("invalid strategy {0:?}")]
    InvalidStrategy(String),
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Script,
    Ipa,
    Roman,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Script, Channel::Ipa, Channel::Roman];

    pub fn text<'a>(&self, ex: &'a Example) -> &'a str {
        match self {
            Channel::Script => &ex.script_text,
            Channel::Ipa => &ex.ipa_text,
            Channel::Roman => ex.roman_text.as_deref().unwrap_or(""),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::Script => "script",
            Channel::Ipa => "ipa",
            Channel::Roman => "roman",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = RetrieveError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "script" => Ok(Channel::Script),
            "ipa" => Ok(Channel::Ipa),
            "roman" => Ok(Channel::Roman),
            other => Err(RetrieveError::InvalidStrategy(format!("unknown channel {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub idf_floor: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.5,
            b: 0.75,
            idf_floor: 0.0,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), RetrieveError> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(RetrieveError::InvalidParams(format!("k1 = {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrieveError::InvalidParams(format!("b = {}", self.b)));
        }
        if !(self.idf_floor >= 0.0 && self.idf_floor.is_finite()) {
            return Err(RetrieveError::InvalidParams(format!(
                "idf_floor = {}",
                self.idf_floor
            )));
        }
        Ok(())
    }

    pub fn idf(&self, n_docs: usize, df: usize) -> f64 {
        let n = n_docs as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln().max(self.idf_floor)
    }
}

/// Inverted index over one channel of a pool under one tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub channel: Channel,
    pub tokenizer_id: String,
    pub avg_len: f64,
    pub doc_ids: Vec<String>,
    pub doc_len: Vec<u32>,
    /// term → `(doc_ordinal, term_frequency)`, ordinals ascending.
    pub postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn n_docs(&self) -> usize {
        self.doc_len.len()
    }
}

pub fn build_index(
    pool: &[Example],
    channel: Channel,
    tokenizer: &Tokenizer,
) -> Result<Bm25Index, RetrieveError> {
    if pool.is_empty() {
        return Err(RetrieveError::EmptyPool);
    }
    if pool.iter().all(|e| channel.text(e).is_empty()) {
        return Err(RetrieveError::EmptyChannel(channel));
    }
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut doc_len = Vec::with_capacity(pool.len());
    for (ord, ex) in pool.iter().enumerate() {
        let ts = tokenizer.tokenize(channel.text(ex));
        doc_len.push(ts.len() as u32);
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &ts.tokens {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        for (term, f) in tf {
            postings
                .entry(term.to_string())
                .or_default()
                .push((ord as u32, f));
        }
    }
    let total: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
    Ok(Bm25Index {
        channel,
        tokenizer_id: tokenizer.id().to_string(),
        avg_len: total as f64 / pool.len() as f64,
        doc_ids: pool.iter().map(|e| e.id.clone()).collect(),
        doc_len,
        postings,
    })
}

/// Per-document scores, dense over the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

pub fn bm25_score(
    index: &Bm25Index,
    query: &TokenStream,
    params: &Bm25Params,
) -> Result<ScoreVector, RetrieveError> {
    if query.tokenizer_id != index.tokenizer_id {
        return Err(RetrieveError::TokenizerMismatch {
            index: index.tokenizer_id.clone(),
            query: query.tokenizer_id.clone(),
        });
    }
    let n = index.n_docs();
    let mut scores = vec![0.0; n];
    if index.avg_len <= 0.0 {
        return Ok(ScoreVector(scores));
    }
    for term in &query.tokens {
        let Some(plist) = index.postings.get(term) else {
            continue;
        };
        let idf = params.idf(n, plist.len());
        for &(doc, tf) in plist {
            let tf = f64::from(tf);
            let len_norm = 1.0 - params.b + params.b * f64::from(index.doc_len[doc as usize]) / index.avg_len;
            scores[doc as usize] += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * len_norm);
        }
    }
    Ok(ScoreVector(scores))
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    version: u32,
}

#[derive(Serialize)]
struct SnapshotOut<'a> {
    format: &'a str,
    version: u32,
    n_docs: usize,
    #[serde(flatten)]
    index: &'a Bm25Index,
}

#[derive(Deserialize)]
struct SnapshotIn {
    n_docs: usize,
    #[serde(flatten)]
    index: Bm25Index,
}

/// Serializes an index as a versioned JSON snapshot.
pub fn snapshot_bytes(index: &Bm25Index) -> Vec<u8> {
    let mut v = serde_json::to_vec(&SnapshotOut {
        format: SNAPSHOT_FORMAT,
        version: SNAPSHOT_VERSION,
        n_docs: index.n_docs(),
        index,
    })
    .expect("index serializes");
    v.push(b'\n');
    v
}

pub fn snapshot_from_bytes(bytes: &[u8]) -> Result<Bm25Index, RetrieveError> {
    let header: SnapshotHeader = serde_json::from_slice(bytes).map_err(|e| {
        RetrieveError::SnapshotParse(e.to_string())
    })?;
    if header.format != SNAPSHOT_FORMAT || header.version != SNAPSHOT_VERSION {
        return Err(RetrieveError::SnapshotVersionMismatch {
            expected: format!("{SNAPSHOT_FORMAT} v{SNAPSHOT_VERSION}"),
            found: format!("{} v{}", header.format, header.version),
        });
    }
    let snap: SnapshotIn =
        serde_json::from_slice(bytes).map_err(|e| RetrieveError::SnapshotParse(e.to_string()))?;
    let idx = snap.index;
    let corrupt = |m: &str| Err(RetrieveError::SnapshotParse(m.to_string()));
    if snap.n_docs != idx.doc_len.len() || idx.doc_ids.len() != idx.doc_len.len() {
        return corrupt("document counts disagree");
    }
    if idx
        .postings
        .values()
        .flatten()
        .any(|&(d, _)| d as usize >= snap.n_docs)
    {
        return corrupt("posting refers past the last document");
    }
    Ok(idx)
}

pub fn save_index(index: &Bm25Index, path: &Path) -> Result<(), RetrieveError> {
    std::fs::write(path, snapshot_bytes(index)).map_err(|source| RetrieveError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_index(path: &Path) -> Result<Bm25Index, RetrieveError> {
    let bytes = std::fs::read(path).map_err(|source| RetrieveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    snapshot_from_bytes(&bytes)
}

/// Precomputed sentence embeddings keyed by example id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorStore {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct VectorRow {
    id: String,
    vector: Vec<f64>,
}

impl VectorStore {
    pub fn parse_jsonl(text: &str) -> Result<Self, RetrieveError> {
        let mut store = VectorStore::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: VectorRow = serde_json::from_str(line)
                .map_err(|e| RetrieveError::VectorParse(format!("line {}: {e}", i + 1)))?;
            if row.vector.iter().any(|x| !x.is_finite()) {
                return Err(RetrieveError::VectorParse(format!(
                    "line {}: non-finite component",
                    i + 1
                )));
            }
            if store.vectors.is_empty() {
                store.dim = row.vector.len();
            } else if row.vector.len() != store.dim {
                return Err(RetrieveError::VectorParse(format!(
                    "line {}: dimension {} differs from {}",
                    i + 1,
                    row.vector.len(),
                    store.dim
                )));
            }
            if store.vectors.insert(row.id.clone(), row.vector).is_some() {
                return Err(RetrieveError::VectorParse(format!("duplicate id {:?}", row.id)));
            }
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, RetrieveError> {
        let text = std::fs::read_to_string(path).map_err(|source| RetrieveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_jsonl(&text)
    }

    fn get(&self, id: &str) -> Result<&[f64], RetrieveError> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| RetrieveError::MissingVectors(id.to_string()))
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitOrder {
    ScriptFirst,
    IpaFirst,
    Shuffle(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StrategyId {
    Random(u64),
    Script,
    Ipa,
    Roman,
    Mixed(Vec<Channel>),
    All,
    Harmonic,
    SplitHalf(SplitOrder),
    DivideConquer,
    Append,
    Dense(String),
}

impl StrategyId {
    /// Parses a strategy name. `random` and `split-half:shuffle` without an
    /// explicit seed take `default_seed`.
    pub fn parse_with_seed(s: &str, default_seed: u64) -> Result<Self, RetrieveError> {
        let bad = || RetrieveError::InvalidStrategy(s.to_string());
        let seed_of = |rest: Option<&str>| -> Result<u64, RetrieveError> {
            match rest {
                None => Ok(default_seed),
                Some(r) => r.parse().map_err(|_| bad()),
            }
        };
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        let strat = match head {
            "random" => StrategyId::Random(seed_of(rest)?),
            "script" if rest.is_none() => StrategyId::Script,
            "ipa" if rest.is_none() => StrategyId::Ipa,
            "roman" if rest.is_none() => StrategyId::Roman,
            "mixed" => match rest {
                None => StrategyId::Mixed(vec![Channel::Script, Channel::Ipa]),
                Some(list) => StrategyId::Mixed(
                    list.split('+')
                        .map(Channel::from_str)
                        .collect::<Result<_, _>>()?,
                ),
            },
            "all" if rest.is_none() => StrategyId::All,
            "harmonic" if rest.is_none() => StrategyId::Harmonic,
            "split-half" => {
                let rest = rest.ok_or_else(bad)?;
                let (order, seed) = match rest.split_once(':') {
                    Some((o, sd)) => (o, Some(sd)),
                    None => (rest, None),
                };
                StrategyId::SplitHalf(match order {
                    "script-first" if seed.is_none() => SplitOrder::ScriptFirst,
                    "ipa-first" if seed.is_none() => SplitOrder::IpaFirst,
                    "shuffle" => SplitOrder::Shuffle(seed_of(seed)?),
                    _ => return Err(bad()),
                })
            }
            "divide-conquer" if rest.is_none() => StrategyId::DivideConquer,
            "append" if rest.is_none() => StrategyId::Append,
            "dense" => StrategyId::Dense(rest.filter(|p| !p.is_empty()).ok_or_else(bad)?.to_string()),
            _ => return Err(bad()),
        };
        strat.validate()?;
        Ok(strat)
    }

    pub fn validate(&self) -> Result<(), RetrieveError> {
        if let StrategyId::Mixed(chs) = self {
            let mut d = chs.clone();
            d.sort();
            d.dedup();
            if d.len() < 2 || d.len() != chs.len() {
                return Err(RetrieveError::InvalidStrategy(format!(
                    "{self}: mixed needs at least two distinct channels"
                )));
            }
        }
        Ok(())
    }

    /// Channels whose BM25 scores the strategy consumes.
    pub fn channels(&self) -> Vec<Channel> {
        match self {
            StrategyId::Random(_) | StrategyId::Dense(_) => vec![],
            StrategyId::Script => vec![Channel::Script],
            StrategyId::Ipa => vec![Channel::Ipa],
            StrategyId::Roman => vec![Channel::Roman],
            StrategyId::Mixed(chs) => chs.clone(),
            StrategyId::All => Channel::ALL.to_vec(),
            StrategyId::Harmonic
            | StrategyId::SplitHalf(_)
            | StrategyId::DivideConquer
            | StrategyId::Append => vec![Channel::Script, Channel::Ipa],
        }
    }

    /// Stable name usable as a file-name fragment.
    pub fn slug(&self) -> String {
        self.to_string()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '+' { c } else { '_' })
            .collect()
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyId::Random(s) => write!(f, "random:{s}"),
            StrategyId::Script => f.write_str("script"),
            StrategyId::Ipa => f.write_str("ipa"),
            StrategyId::Roman => f.write_str("roman"),
            StrategyId::Mixed(chs) if chs == &[Channel::Script, Channel::Ipa] => f.write_str("mixed"),
            StrategyId::Mixed(chs) => {
                let names: Vec<&str> = chs.iter().map(Channel::as_str).collect();
                write!(f, "mixed:{}", names.join("+"))
            }
            StrategyId::All => f.write_str("all"),
            StrategyId::Harmonic => f.write_str("harmonic"),
            StrategyId::SplitHalf(SplitOrder::ScriptFirst) => f.write_str("split-half:script-first"),
            StrategyId::SplitHalf(SplitOrder::IpaFirst) => f.write_str("split-half:ipa-first"),
            StrategyId::SplitHalf(SplitOrder::Shuffle(s)) => write!(f, "split-half:shuffle:{s}"),
            StrategyId::DivideConquer => f.write_str("divide-conquer"),
            StrategyId::Append => f.write_str("append"),
            StrategyId::Dense(p) => write!(f, "dense:{p}"),
        }
    }
}

impl FromStr for StrategyId {
    type Err = RetrieveError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_with_seed(s, 0)
    }
}

impl Serialize for StrategyId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StrategyId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieveOptions {
    /// Min-max normalize each channel's scores over the pool before
    /// Mixed/All/Harmonic aggregation. Off by default.
    pub normalize: bool,
}

fn by_score_then_ordinal(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` best `(ordinal, score)` pairs.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    v.sort_by(by_score_then_ordinal);
    v.truncate(k);
    v
}

fn min_max(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// Per-query inputs to [`select`].
pub struct SelectionInput<'a> {
    pub n_docs: usize,
    pub scores: &'a BTreeMap<Channel, Vec<f64>>,
    /// Cosine similarity of the query to every pool doc (Dense only).
    pub dense: Option<&'a [f64]>,
    /// Mixed into Random / Shuffle seeds so each query draws independently.
    pub query_key: &'a str,
}

/// Applies a strategy to precomputed channel scores.
pub fn select(
    strategy: &StrategyId,
    k: usize,
    input: &SelectionInput<'_>,
    opts: &RetrieveOptions,
) -> Result<Vec<(usize, f64)>, RetrieveError> {
    if k == 0 {
        return Err(RetrieveError::ZeroK);
    }
    let n = input.n_docs;
    let channel = |c: Channel| -> Result<&Vec<f64>, RetrieveError> {
        input.scores.get(&c).ok_or(RetrieveError::MissingChannel(c))
    };
    let normalized = |c: Channel| -> Result<Vec<f64>, RetrieveError> {
        let s = channel(c)?;
        Ok(if opts.normalize { min_max(s) } else { s.clone() })
    };
    let mixed = |chs: &[Channel]| -> Result<Vec<(usize, f64)>, RetrieveError> {
        if chs.is_empty() {
            return Err(RetrieveError::InvalidStrategy("mixed over no channels".into()));
        }
        let cols: Vec<Vec<f64>> = chs.iter().map(|&c| normalized(c)).collect::<Result<_, _>>()?;
        let m = chs.len() as f64;
        let avg: Vec<f64> = (0..n).map(|d| cols.iter().map(|c| c[d]).sum::<f64>() / m).collect();
        Ok(top_k(&avg, k))
    };

    match strategy {
        StrategyId::Random(seed) => {
            let mut rng = Xoshiro256StarStar::seed_from_u64(derive_seed(*seed, input.query_key));
            let mut picked = rng.sample_indices(n, k);
            picked.sort_unstable();
            Ok(picked.into_iter().map(|d| (d, 0.0)).collect())
        }
        StrategyId::Script => Ok(top_k(channel(Channel::Script)?, k)),
        StrategyId::Ipa => Ok(top_k(channel(Channel::Ipa)?, k)),
        StrategyId::Roman => Ok(top_k(channel(Channel::Roman)?, k)),
        StrategyId::Mixed(chs) => mixed(chs),
        StrategyId::All => mixed(&Channel::ALL),
        StrategyId::Harmonic => {
            let a = normalized(Channel::Script)?;
            let b = normalized(Channel::Ipa)?;
            let h: Vec<f64> = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| if x + y == 0.0 { 0.0 } else { 2.0 * x * y / (x + y) })
                .collect();
            Ok(top_k(&h, k))
        }
        StrategyId::SplitHalf(order) => {
            if k % 2 != 0 {
                return Err(RetrieveError::OddKForSplitHalf(k));
            }
            let half = k / 2;
            let (first, second) = match order {
                SplitOrder::IpaFirst => (Channel::Ipa, Channel::Script),
                SplitOrder::ScriptFirst | SplitOrder::Shuffle(_) => (Channel::Script, Channel::Ipa),
            };
            let mut out = top_k(channel(first)?, half);
            let taken: Vec<usize> = out.iter().map(|p| p.0).collect();
            out.extend(
                top_k(channel(second)?, n)
                    .into_iter()
                    .filter(|(d, _)| !taken.contains(d))
                    .take(half),
            );
            if let SplitOrder::Shuffle(seed) = order {
                let mut rng = Xoshiro256StarStar::seed_from_u64(derive_seed(
                    *seed,
                    &format!("shuffle/{}", input.query_key),
                ));
                rng.shuffle(&mut out);
            }
            Ok(out)
        }
        StrategyId::DivideConquer => {
            let mut best: BTreeMap<usize, f64> = BTreeMap::new();
            for c in [Channel::Script, Channel::Ipa] {
                for (d, s) in top_k(channel(c)?, k) {
                    let e = best.entry(d).or_insert(s);
                    if s > *e {
                        *e = s;
                    }
                }
            }
            let mut v: Vec<(usize, f64)> = best.into_iter().collect();
            v.sort_by(by_score_then_ordinal);
            v.truncate(k);
            Ok(v)
        }
        StrategyId::Append => {
            let mut v = top_k(channel(Channel::Script)?, k);
            v.extend(top_k(channel(Channel::Ipa)?, k));
            v.sort_by(by_score_then_ordinal);
            v.truncate(k);
            Ok(v)
        }
        StrategyId::Dense(_) => {
            let sims = input
                .dense
                .ok_or_else(|| RetrieveError::MissingVectors(input.query_key.to_string()))?;
            Ok(top_k(sims, k))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub ordinal: usize,
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub strategy: StrategyId,
    pub selected: Vec<Selected>,
    /// Top entries of each consulted channel, `(ordinal, score)`.
    pub per_channel: BTreeMap<Channel, Vec<(usize, f64)>>,
}

impl RetrievalResult {
    pub fn ordinals(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.ordinal).collect()
    }
}

/// Indexes over one pool plus everything needed to answer queries.
#[derive(Debug, Clone)]
pub struct Retriever {
    indexes: BTreeMap<Channel, Bm25Index>,
    tokenizer: Tokenizer,
    params: Bm25Params,
    dense: Option<VectorStore>,
    options: RetrieveOptions,
}

impl Retriever {
    pub fn new(
        indexes: BTreeMap<Channel, Bm25Index>,
        tokenizer: Tokenizer,
        params: Bm25Params,
    ) -> Result<Self, RetrieveError> {
        params.validate()?;
        let mut it = indexes.values();
        if let Some(first) = it.next() {
            if it.any(|ix| ix.doc_ids != first.doc_ids) {
                return Err(RetrieveError::PoolMismatch);
            }
        }
        Ok(Self {
            indexes,
            tokenizer,
            params,
            dense: None,
            options: RetrieveOptions::default(),
        })
    }

    /// Builds one index per channel that has any text in the pool.
    pub fn build(
        pool: &[Example],
        channels: &[Channel],
        tokenizer: Tokenizer,
        params: Bm25Params,
    ) -> Result<Self, RetrieveError> {
        let mut indexes = BTreeMap::new();
        for &c in channels {
            indexes.insert(c, build_index(pool, c, &tokenizer)?);
        }
        if pool.is_empty() {
            return Err(RetrieveError::EmptyPool);
        }
        Self::new(indexes, tokenizer, params)
    }

    pub fn with_dense(mut self, store: VectorStore) -> Self {
        self.dense = Some(store);
        self
    }

    pub fn with_options(mut self, options: RetrieveOptions) -> Self {
        self.options = options;
        self
    }

    pub fn indexes(&self) -> &BTreeMap<Channel, Bm25Index> {
        &self.indexes
    }

    pub fn params(&self) -> &Bm25Params {
        &self.params
    }

    fn doc_ids(&self) -> Option<&[String]> {
        self.indexes.values().next().map(|ix| ix.doc_ids.as_slice())
    }

    /// BM25 scores of `query` against the pool on one channel.
    pub fn channel_scores(&self, query: &Example, channel: Channel) -> Result<Vec<f64>, RetrieveError> {
        let index = self
            .indexes
            .get(&channel)
            .ok_or(RetrieveError::MissingChannel(channel))?;
        let text = channel.text(query);
        if text.is_empty() {
            return Err(RetrieveError::MissingQueryText {
                id: query.id.clone(),
                channel,
            });
        }
        let ts = self.tokenizer.tokenize(text);
        Ok(bm25_score(index, &ts, &self.params)?.0)
    }

    pub fn retrieve(
        &self,
        query: &Example,
        strategy: &StrategyId,
        k: usize,
        pool_size_hint: Option<usize>,
    ) -> Result<RetrievalResult, RetrieveError> {
        let doc_ids: Vec<String> = match (self.doc_ids(), pool_size_hint) {
            (Some(ids), _) => ids.to_vec(),
            (None, Some(n)) => (0..n).map(|i| i.to_string()).collect(),
            (None, None) => return Err(RetrieveError::EmptyPool),
        };
        let n = doc_ids.len();
        let mut scores = BTreeMap::new();
        for c in strategy.channels() {
            scores.insert(c, self.channel_scores(query, c)?);
        }
        let dense_scores = match strategy {
            StrategyId::Dense(_) => {
                let store = self
                    .dense
                    .as_ref()
                    .ok_or_else(|| RetrieveError::MissingVectors(query.id.clone()))?;
                let q = store.get(&query.id)?;
                Some(
                    doc_ids
                        .iter()
                        .map(|id| store.get(id).map(|v| cosine(q, v)))
                        .collect::<Result<Vec<f64>, _>>()?,
                )
            }
            _ => None,
        };
        let input = SelectionInput {
            n_docs: n,
            scores: &scores,
            dense: dense_scores.as_deref(),
            query_key: &query.id,
        };
        let picked = select(strategy, k, &input, &self.options)?;
        Ok(RetrievalResult {
            query_id: query.id.clone(),
            strategy: strategy.clone(),
            selected: picked
                .into_iter()
                .map(|(ordinal, score)| Selected {
                    ordinal,
                    id: doc_ids[ordinal].clone(),
                    score,
                })
                .collect(),
            per_channel: scores.iter().map(|(&c, s)| (c, top_k(s, k))).collect(),
        })
    }

    /// Retrieves for many queries with at most `parallelism` worker threads.
    pub fn retrieve_batch(
        &self,
        queries: &[Example],
        strategy: &StrategyId,
        k: usize,
        parallelism: usize,
    ) -> Vec<Result<RetrievalResult, RetrieveError>> {
        crate::util::parallel_map(queries, parallelism, |q| self.retrieve(q, strategy, k, None))
    }
}

/// One-shot retrieval over prebuilt indexes.
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    query: &Example,
    strategy: &StrategyId,
    k: usize,
    indexes: &BTreeMap<Channel, Bm25Index>,
    tokenizer: &Tokenizer,
    params: &Bm25Params,
    dense: Option<&VectorStore>,
) -> Result<RetrievalResult, RetrieveError> {
    let mut r = Retriever::new(indexes.clone(), tokenizer.clone(), *params)?;
    if let Some(d) = dense {
        r = r.with_dense(d.clone());
    }
    let hint = dense.map(|_| 0).filter(|_| indexes.is_empty());
    r.retrieve(query, strategy, k, hint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Task;
    use proptest::prelude::*;

    fn ex(id: &str, script: &str, ipa: &str) -> Example {
        Example {
            id: id.into(),
            lang: "tst".into(),
            task: Task::Flores,
            script_text: script.into(),
            ipa_text: ipa.into(),
            roman_text: None,
            target_text: "t".into(),
        }
    }

    fn toy_pool() -> Vec<Example> {
        vec![ex("d0", "a b", "x"), ex("d1", "a a b", "y"), ex("d2", "c", "z")]
    }

    fn scores(script: &[f64], ipa: &[f64]) -> BTreeMap<Channel, Vec<f64>> {
        BTreeMap::from([(Channel::Script, script.to_vec()), (Channel::Ipa, ipa.to_vec())])
    }

    fn run(strategy: &StrategyId, k: usize, s: &BTreeMap<Channel, Vec<f64>>) -> Vec<(usize, f64)> {
        let n = s.values().next().unwrap().len();
        select(
            strategy,
            k,
            &SelectionInput {
                n_docs: n,
                scores: s,
                dense: None,
                query_key: "q",
            },
            &RetrieveOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn index_statistics() {
        let ix = build_index(&toy_pool(), Channel::Script, &Tokenizer::whitespace()).unwrap();
        assert_eq!(ix.n_docs(), 3);
        // Token counts 2 + 3 + 1 over three docs.
        assert_eq!(ix.avg_len, 2.0);
        assert_eq!(ix.postings["a"], vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn empty_pool() {
        assert!(matches!(
            build_index(&[], Channel::Script, &Tokenizer::whitespace()),
            Err(RetrieveError::EmptyPool)
        ));
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let t = Tokenizer::whitespace();
        let a = snapshot_bytes(&build_index(&toy_pool(), Channel::Script, &t).unwrap());
        let b = snapshot_bytes(&build_index(&toy_pool(), Channel::Script, &t).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn no_shared_terms_scores_zero() {
        let t = Tokenizer::whitespace();
        let ix = build_index(&toy_pool(), Channel::Script, &t).unwrap();
        let s = bm25_score(&ix, &t.tokenize("q r"), &Bm25Params::default()).unwrap();
        assert_eq!(s.0, vec![0.0; 3]);
    }

    #[test]
    fn toy_ranking_matches_frozen_scores() {
        // Frozen from an independent evaluation of the formula (k1=1.5, b=0.75).
        let t = Tokenizer::whitespace();
        let ix = build_index(&toy_pool(), Channel::Script, &t).unwrap();
        let s = bm25_score(&ix, &t.tokenize("a"), &Bm25Params::default()).unwrap().0;
        assert!((s[0] - 0.470_003_629_245_735_6).abs() < 1e-12, "{}", s[0]);
        assert!((s[1] - 0.578_466_005_225_520_7).abs() < 1e-12, "{}", s[1]);
        assert_eq!(s[2], 0.0);
        assert_eq!(top_k(&s, 3).iter().map(|p| p.0).collect::<Vec<_>>(), [1, 0, 2]);
    }

    #[test]
    fn tokenizer_mismatch() {
        let ix = build_index(&toy_pool(), Channel::Script, &Tokenizer::whitespace()).unwrap();
        let q = Tokenizer::per_character().tokenize("a");
        assert!(matches!(
            bm25_score(&ix, &q, &Bm25Params::default()),
            Err(RetrieveError::TokenizerMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_docs_tie_by_ordinal() {
        let pool = vec![ex("a", "x y", "x"), ex("b", "x y", "x"), ex("c", "z", "z")];
        let t = Tokenizer::whitespace();
        let ix = build_index(&pool, Channel::Script, &t).unwrap();
        let s = bm25_score(&ix, &t.tokenize("x"), &Bm25Params::default()).unwrap().0;
        assert_eq!(s[0], s[1]);
        assert_eq!(top_k(&s, 2).iter().map(|p| p.0).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn snapshot_round_trip() {
        let ix = build_index(&toy_pool(), Channel::Ipa, &Tokenizer::per_character()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ix.json");
        save_index(&ix, &p).unwrap();
        assert_eq!(load_index(&p).unwrap(), ix);
    }

    #[test]
    fn truncated_snapshot_rejected() {
        let ix = build_index(&toy_pool(), Channel::Script, &Tokenizer::whitespace()).unwrap();
        let bytes = snapshot_bytes(&ix);
        let r = snapshot_from_bytes(&bytes[..bytes.len() / 2]);
        assert!(matches!(
            r,
            Err(RetrieveError::SnapshotParse(_) | RetrieveError::SnapshotVersionMismatch { .. })
        ));
    }

    #[test]
    fn wrong_version_rejected() {
        let ix = build_index(&toy_pool(), Channel::Script, &Tokenizer::whitespace()).unwrap();
        let text = String::from_utf8(snapshot_bytes(&ix))
            .unwrap()
            .replace("\"version\":1", "\"version\":7");
        assert!(matches!(
            snapshot_from_bytes(text.as_bytes()),
            Err(RetrieveError::SnapshotVersionMismatch { .. })
        ));
    }

    #[test]
    fn snapshot_tokenizer_guard_at_retrieve() {
        let ix = build_index(&toy_pool(), Channel::Script, &Tokenizer::per_character()).unwrap();
        let indexes = BTreeMap::from([(Channel::Script, ix)]);
        let r = retrieve(
            &ex("q", "a", "x"),
            &StrategyId::Script,
            1,
            &indexes,
            &Tokenizer::whitespace(),
            &Bm25Params::default(),
            None,
        );
        assert!(matches!(r, Err(RetrieveError::TokenizerMismatch { .. })));
    }

    #[test]
    fn mixed_mean_example() {
        let s = scores(&[1.0, 0.0, 2.0], &[3.0, 1.0, 0.0]);
        let got = run(&StrategyId::Mixed(vec![Channel::Script, Channel::Ipa]), 2, &s);
        assert_eq!(got, vec![(0, 2.0), (2, 1.0)]);
    }

    #[test]
    fn mixed_equals_script_when_channels_coincide() {
        let v = [0.3, 2.0, 0.0, 2.0, 1.1];
        let s = scores(&v, &v);
        let mixed: Vec<usize> = run(&StrategyId::Mixed(vec![Channel::Script, Channel::Ipa]), 5, &s)
            .into_iter()
            .map(|p| p.0)
            .collect();
        let script: Vec<usize> = run(&StrategyId::Script, 5, &s).into_iter().map(|p| p.0).collect();
        assert_eq!(mixed, script);
    }

    #[test]
    fn append_can_repeat() {
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        a[5] = 3.0;
        b[5] = 3.0;
        a[1] = 1.0;
        b[2] = 1.0;
        let got: Vec<usize> = run(&StrategyId::Append, 2, &scores(&a, &b)).into_iter().map(|p| p.0).collect();
        assert_eq!(got, [5, 5]);
    }

    #[test]
    fn harmonic_zero_when_both_zero() {
        let got = run(&StrategyId::Harmonic, 3, &scores(&[0.0, 1.0, 4.0], &[0.0, 1.0, 1.0]));
        assert_eq!(got[0], (2, 1.6));
        assert_eq!(got[1], (1, 1.0));
        assert_eq!(got[2], (0, 0.0));
    }

    #[test]
    fn split_half_replaces_duplicates() {
        let s = scores(&[5.0, 4.0, 0.0, 0.0], &[5.0, 0.0, 4.0, 3.0]);
        let got: Vec<usize> = run(&StrategyId::SplitHalf(SplitOrder::ScriptFirst), 4, &s)
            .into_iter()
            .map(|p| p.0)
            .collect();
        assert_eq!(got, [0, 1, 2, 3]);
        let got: Vec<usize> = run(&StrategyId::SplitHalf(SplitOrder::IpaFirst), 2, &s)
            .into_iter()
            .map(|p| p.0)
            .collect();
        assert_eq!(got, [0, 1]);
    }

    #[test]
    fn split_half_odd_k() {
        let s = scores(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let r = select(
            &StrategyId::SplitHalf(SplitOrder::ScriptFirst),
            3,
            &SelectionInput { n_docs: 3, scores: &s, dense: None, query_key: "q" },
            &RetrieveOptions::default(),
        );
        assert!(matches!(r, Err(RetrieveError::OddKForSplitHalf(3))));
    }

    #[test]
    fn missing_channel() {
        let s = BTreeMap::from([(Channel::Script, vec![1.0])]);
        let r = select(
            &StrategyId::Ipa,
            1,
            &SelectionInput { n_docs: 1, scores: &s, dense: None, query_key: "q" },
            &RetrieveOptions::default(),
        );
        assert!(matches!(r, Err(RetrieveError::MissingChannel(Channel::Ipa))));
    }

    #[test]
    fn random_is_reproducible() {
        let s = scores(&[0.0; 20], &[0.0; 20]);
        let a = run(&StrategyId::Random(3), 5, &s);
        assert_eq!(a, run(&StrategyId::Random(3), 5, &s));
        assert_ne!(a, run(&StrategyId::Random(4), 5, &s));
    }

    #[test]
    fn random_is_roughly_uniform() {
        // Chi-square over first-pick frequencies, 10 docs, 5000 draws, df = 9.
        let n = 10;
        let mut counts = vec![0usize; n];
        let s = scores(&vec![0.0; n], &vec![0.0; n]);
        let draws = 5000;
        for seed in 0..draws {
            for (d, _) in run(&StrategyId::Random(seed), 3, &s) {
                counts[d] += 1;
            }
        }
        let expected = (draws * 3) as f64 / n as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 27.88, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in [
            "random:7",
            "script",
            "ipa",
            "roman",
            "mixed",
            "mixed:script+roman",
            "all",
            "harmonic",
            "split-half:script-first",
            "split-half:ipa-first",
            "split-half:shuffle:9",
            "divide-conquer",
            "append",
            "dense:vectors.jsonl",
        ] {
            let s: StrategyId = name.parse().unwrap();
            assert_eq!(s.to_string(), name);
        }
        assert!("mixed:script".parse::<StrategyId>().is_err());
        assert!("mixed:ipa+ipa".parse::<StrategyId>().is_err());
        assert!("nonsense".parse::<StrategyId>().is_err());
        assert_eq!(
            StrategyId::parse_with_seed("random", 11).unwrap(),
            StrategyId::Random(11)
        );
    }

    #[test]
    fn cosine_basics() {
        let q = [0.3, -1.0, 2.0];
        assert!((cosine(&q, &q) - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = q.iter().map(|x| x * 4.5).collect();
        assert!((cosine(&q, &scaled) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&q, &[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn vector_store_dimension_check() {
        let ok = "{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"b\",\"vector\":[0,1]}\n";
        assert_eq!(VectorStore::parse_jsonl(ok).unwrap().dim, 2);
        let bad = "{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"b\",\"vector\":[0,1,2]}\n";
        assert!(VectorStore::parse_jsonl(bad).is_err());
    }

    #[test]
    fn dense_missing_vectors() {
        let pool = toy_pool();
        let r = Retriever::build(&pool, &[Channel::Script], Tokenizer::whitespace(), Bm25Params::default())
            .unwrap()
            .with_dense(VectorStore::parse_jsonl("{\"id\":\"q\",\"vector\":[1,0]}").unwrap());
        assert!(matches!(
            r.retrieve(&ex("q", "a", "x"), &StrategyId::Dense("v".into()), 1, None),
            Err(RetrieveError::MissingVectors(id)) if id == "d0"
        ));
    }

    #[test]
    fn params_validation() {
        assert!(Bm25Params { b: 1.5, ..Default::default() }.validate().is_err());
        assert!(Bm25Params { k1: -1.0, ..Default::default() }.validate().is_err());
    }

    fn score_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0, (0u8..4).prop_map(f64::from)], n)
    }

    proptest! {
        #[test]
        fn scaling_preserves_selections(
            (a, b) in (1usize..12).prop_flat_map(|n| (score_vec(n), score_vec(n))),
            c in 0.01f64..100.0,
            k in 1usize..6,
        ) {
            // Powers of two keep the scaled arithmetic exact.
            let c = 2f64.powi(c.log2().round() as i32);
            let s1 = scores(&a, &b);
            let s2 = scores(
                &a.iter().map(|x| x * c).collect::<Vec<_>>(),
                &b.iter().map(|x| x * c).collect::<Vec<_>>(),
            );
            for st in [
                StrategyId::Mixed(vec![Channel::Script, Channel::Ipa]),
                StrategyId::Harmonic,
                StrategyId::DivideConquer,
                StrategyId::Append,
            ] {
                let x: Vec<usize> = run(&st, k, &s1).into_iter().map(|p| p.0).collect();
                let y: Vec<usize> = run(&st, k, &s2).into_iter().map(|p| p.0).collect();
                prop_assert_eq!(x, y, "{}", st);
            }
        }

        #[test]
        fn singleton_mixed_is_channel(a in score_vec(9), k in 1usize..9) {
            let s = scores(&a, &a);
            let x: Vec<usize> = run(&StrategyId::Mixed(vec![Channel::Script]), k, &s).into_iter().map(|p| p.0).collect();
            let y: Vec<usize> = run(&StrategyId::Script, k, &s).into_iter().map(|p| p.0).collect();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn selections_ordered_with_ordinal_tiebreak(a in score_vec(10), b in score_vec(10), k in 1usize..10) {
            let s = scores(&a, &b);
            for st in [StrategyId::Script, StrategyId::Mixed(vec![Channel::Script, Channel::Ipa]), StrategyId::Harmonic, StrategyId::DivideConquer, StrategyId::Append] {
                let v = run(&st, k, &s);
                prop_assert_eq!(v.len(), k);
                for w in v.windows(2) {
                    prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 <= w[1].0));
                }
            }
        }

        #[test]
        fn cosine_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 4), c in 0.1f64..10.0) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let w: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((cosine(&v, &w) - 1.0).abs() < 1e-9);
        }
    }
}
