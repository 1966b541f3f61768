//! Token streams for retrieval: whitespace, per-character and byte-pair encoding.
//!
//! The BPE tokenizer reads the `tokenizer.json` layout published with most
//! open LLM checkpoints (a `model` of type `BPE` with `vocab` and `merges`,
//! plus optional `normalizer` and `pre_tokenizer`). Supported components:
//!
//! - normalizers: `null`, `NFC`, `NFKC`, `Lowercase`, or a `Sequence` of these;
//! - pre-tokenizers: `null`, `Whitespace`, `WhitespaceSplit`, `ByteLevel`,
//!   `Split` (behaviors `Isolated` and `Removed`), `Digits`, `Sequence`.
//!
//! Anything else (including BPE dropout, byte fallback and subword
//! prefixes/suffixes) is rejected at load time. Special tokens, added tokens
//! and post-processors are ignored, so streams never contain BOS/EOS markers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fancy_regex::Regex;
use serde_json::Value;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error)]
pub enum TokenizeError {
    #[error("cannot load BPE vocabulary {path}: {reason}")]
    VocabParseError { path: String, reason: String },
    #[error("unknown tokenizer kind {0:?} (expected ws, cs or bpe)")]
    UnknownKind(String),
    #[error("tokenizer kind bpe needs a vocabulary path")]
    MissingVocab,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerKind {
    Whitespace,
    PerCharacter,
    Bpe(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<String>,
    /// Identifies the tokenizer that produced the stream.
    pub tokenizer_id: String,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    kind: TokenizerKind,
    bpe: Option<Arc<BpeModel>>,
    id: String,
}

impl Tokenizer {
    pub fn whitespace() -> Self {
        Self {
            kind: TokenizerKind::Whitespace,
            bpe: None,
            id: "ws".into(),
        }
    }

    pub fn per_character() -> Self {
        Self {
            kind: TokenizerKind::PerCharacter,
            bpe: None,
            id: "cs".into(),
        }
    }

    /// `ws`, `cs` or `bpe` (the latter with a vocabulary path).
    pub fn from_kind(kind: &str, vocab: Option<&Path>) -> Result<Self, TokenizeError> {
        match kind {
            "ws" | "whitespace" => Ok(Self::whitespace()),
            "cs" | "char" | "per-character" => Ok(Self::per_character()),
            "bpe" => load_bpe(vocab.ok_or(TokenizeError::MissingVocab)?),
            other => Err(TokenizeError::UnknownKind(other.to_string())),
        }
    }

    pub fn kind(&self) -> &TokenizerKind {
        &self.kind
    }

    /// `ws`, `cs`, or `bpe:` followed by the first 16 hex digits of the
    /// vocabulary file's SHA-256.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokenize(&self, text: &str) -> TokenStream {
        let tokens = match &self.kind {
            TokenizerKind::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            TokenizerKind::PerCharacter => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
            TokenizerKind::Bpe(_) => self
                .bpe
                .as_ref()
                .expect("bpe tokenizer has a model")
                .encode(text)
                .into_iter()
                .map(|(tok, _)| tok)
                .collect(),
        };
        TokenStream {
            tokens,
            tokenizer_id: self.id.clone(),
        }
    }

    /// Vocabulary ids for BPE tokenizers; `None` for WS/CS. Symbols missing
    /// from the vocabulary (with no `unk_token`) have no id and are skipped.
    pub fn encode_ids(&self, text: &str) -> Option<Vec<u32>> {
        self.bpe
            .as_ref()
            .map(|m| m.encode(text).into_iter().filter_map(|(_, id)| id).collect())
    }
}

pub fn tokenize(t: &Tokenizer, text: &str) -> TokenStream {
    t.tokenize(text)
}

pub fn load_bpe(path: &Path) -> Result<Tokenizer, TokenizeError> {
    let err = |reason: String| TokenizeError::VocabParseError {
        path: path.display().to_string(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let json: Value = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
    let model = BpeModel::from_json(&json).map_err(err)?;
    let hash = crate::util::sha256_hex(&bytes);
    Ok(Tokenizer {
        kind: TokenizerKind::Bpe(path.to_path_buf()),
        bpe: Some(Arc::new(model)),
        id: format!("bpe:{}", &hash[..16]),
    })
}

#[derive(Debug, Clone, Copy)]
enum Normalizer {
    Nfc,
    Nfkc,
    Lowercase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SplitBehavior {
    Isolated,
    Removed,
}

#[derive(Debug)]
enum PreTokenizer {
    Whitespace(Regex),
    WhitespaceSplit,
    ByteLevel {
        add_prefix_space: bool,
        regex: Option<Regex>,
    },
    Split {
        regex: Regex,
        behavior: SplitBehavior,
    },
    Digits {
        individual: bool,
    },
}

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

#[derive(Debug)]
struct BpeModel {
    vocab: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    unk_token: Option<String>,
    ignore_merges: bool,
    normalizers: Vec<Normalizer>,
    pre_tokenizers: Vec<PreTokenizer>,
    byte_map: [char; 256],
}

/// The GPT-2 reversible byte → printable character table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut n = 0u32;
    for b in 0..256u32 {
        let printable = (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).expect("latin-1")
        } else {
            let c = char::from_u32(256 + n).expect("valid");
            n += 1;
            c
        };
    }
    table
}

fn split_with(regex: &Regex, piece: &str, behavior: SplitBehavior) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut last = 0;
    for m in regex.find_iter(piece) {
        let m = m.map_err(|e| e.to_string())?;
        if m.start() > last {
            out.push(piece[last..m.start()].to_string());
        }
        if behavior == SplitBehavior::Isolated && !m.as_str().is_empty() {
            out.push(m.as_str().to_string());
        }
        last = m.end();
    }
    if last < piece.len() {
        out.push(piece[last..].to_string());
    }
    Ok(out)
}

fn parse_normalizer(v: &Value, out: &mut Vec<Normalizer>) -> Result<(), String> {
    if v.is_null() {
        return Ok(());
    }
    match v.get("type").and_then(Value::as_str) {
        Some("NFC") => out.push(Normalizer::Nfc),
        Some("NFKC") => out.push(Normalizer::Nfkc),
        Some("Lowercase") => out.push(Normalizer::Lowercase),
        Some("Sequence") => {
            for n in v
                .get("normalizers")
                .and_then(Value::as_array)
                .ok_or("Sequence normalizer without list")?
            {
                parse_normalizer(n, out)?;
            }
        }
        other => return Err(format!("unsupported normalizer {other:?}")),
    }
    Ok(())
}

fn compile(pattern: &str) -> Result<Regex, String> {
    Regex::new(pattern).map_err(|e| format!("bad pre-tokenizer regex: {e}"))
}

fn parse_pre_tokenizer(v: &Value, out: &mut Vec<PreTokenizer>) -> Result<(), String> {
    if v.is_null() {
        return Ok(());
    }
    match v.get("type").and_then(Value::as_str) {
        Some("Whitespace") => out.push(PreTokenizer::Whitespace(compile(r"\w+|[^\w\s]+")?)),
        Some("WhitespaceSplit") => out.push(PreTokenizer::WhitespaceSplit),
        Some("ByteLevel") => {
            let use_regex = v.get("use_regex").and_then(Value::as_bool).unwrap_or(true);
            out.push(PreTokenizer::ByteLevel {
                add_prefix_space: v
                    .get("add_prefix_space")
                    .and_then(Value::as_bool)
                    .unwrap_or(false),
                regex: if use_regex {
                    Some(compile(GPT2_PATTERN)?)
                } else {
                    None
                },
            });
        }
        Some("Split") => {
            if v.get("invert").and_then(Value::as_bool).unwrap_or(false) {
                return Err("inverted Split pre-tokenizer is not supported".into());
            }
            let pattern = v.get("pattern").ok_or("Split without pattern")?;
            let regex = if let Some(r) = pattern.get("Regex").and_then(Value::as_str) {
                compile(r)?
            } else if let Some(s) = pattern.get("String").and_then(Value::as_str) {
                compile(&fancy_regex::escape(s))?
            } else {
                return Err("Split pattern must be Regex or String".into());
            };
            let behavior = match v.get("behavior").and_then(Value::as_str) {
                Some("Isolated") => SplitBehavior::Isolated,
                Some("Removed") => SplitBehavior::Removed,
                other => return Err(format!("unsupported Split behavior {other:?}")),
            };
            out.push(PreTokenizer::Split { regex, behavior });
        }
        Some("Digits") => out.push(PreTokenizer::Digits {
            individual: v
                .get("individual_digits")
                .and_then(Value::as_bool)
                .unwrap_or(false),
        }),
        Some("Sequence") => {
            for p in v
                .get("pretokenizers")
                .and_then(Value::as_array)
                .ok_or("Sequence pre-tokenizer without list")?
            {
                parse_pre_tokenizer(p, out)?;
            }
        }
        other => return Err(format!("unsupported pre-tokenizer {other:?}")),
    }
    Ok(())
}

impl BpeModel {
    fn from_json(json: &Value) -> Result<Self, String> {
        let model = json.get("model").ok_or("missing model")?;
        match model.get("type").and_then(Value::as_str) {
            Some("BPE") | None => {}
            Some(other) => return Err(format!("model type {other} is not BPE")),
        }
        if model.get("dropout").is_some_and(|d| !d.is_null()) {
            return Err("BPE dropout is not supported".into());
        }
        for key in ["continuing_subword_prefix", "end_of_word_suffix"] {
            if model
                .get(key)
                .is_some_and(|d| d.as_str().is_some_and(|s| !s.is_empty()))
            {
                return Err(format!("{key} is not supported"));
            }
        }
        if model.get("byte_fallback").and_then(Value::as_bool) == Some(true) {
            return Err("byte_fallback is not supported".into());
        }

        let vocab_obj = model
            .get("vocab")
            .and_then(Value::as_object)
            .ok_or("model.vocab must be an object")?;
        let mut vocab = HashMap::with_capacity(vocab_obj.len());
        for (tok, id) in vocab_obj {
            let id = id
                .as_u64()
                .and_then(|i| u32::try_from(i).ok())
                .ok_or_else(|| format!("bad id for token {tok:?}"))?;
            vocab.insert(tok.clone(), id);
        }

        let merges = model
            .get("merges")
            .and_then(Value::as_array)
            .ok_or("model.merges must be an array")?;
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, m) in merges.iter().enumerate() {
            let pair = match m {
                Value::String(s) => {
                    let (a, b) = s
                        .split_once(' ')
                        .ok_or_else(|| format!("merge {s:?} is not a pair"))?;
                    (a.to_string(), b.to_string())
                }
                Value::Array(a) if a.len() == 2 => match (a[0].as_str(), a[1].as_str()) {
                    (Some(x), Some(y)) => (x.to_string(), y.to_string()),
                    _ => return Err(format!("merge {rank} is not a string pair")),
                },
                _ => return Err(format!("merge {rank} is malformed")),
            };
            ranks.entry(pair).or_insert(rank);
        }

        let mut normalizers = Vec::new();
        parse_normalizer(json.get("normalizer").unwrap_or(&Value::Null), &mut normalizers)?;
        let mut pre_tokenizers = Vec::new();
        parse_pre_tokenizer(
            json.get("pre_tokenizer").unwrap_or(&Value::Null),
            &mut pre_tokenizers,
        )?;

        Ok(Self {
            vocab,
            ranks,
            unk_token: model
                .get("unk_token")
                .and_then(Value::as_str)
                .map(str::to_string),
            ignore_merges: model
                .get("ignore_merges")
                .and_then(Value::as_bool)
                .unwrap_or(false),
            normalizers,
            pre_tokenizers,
            byte_map: bytes_to_unicode(),
        })
    }

    fn normalize(&self, text: &str) -> String {
        let mut s = text.to_string();
        for n in &self.normalizers {
            s = match n {
                Normalizer::Nfc => s.nfc().collect(),
                Normalizer::Nfkc => s.nfkc().collect(),
                Normalizer::Lowercase => s.to_lowercase(),
            };
        }
        s
    }

    fn pre_tokenize(&self, text: String) -> Vec<String> {
        let mut pieces = vec![text];
        for pt in &self.pre_tokenizers {
            let mut next = Vec::with_capacity(pieces.len());
            for piece in pieces {
                match pt {
                    PreTokenizer::Whitespace(re) => {
                        next.extend(re.find_iter(&piece).filter_map(Result::ok).map(|m| m.as_str().to_string()))
                    }
                    PreTokenizer::WhitespaceSplit => {
                        next.extend(piece.split_whitespace().map(str::to_string))
                    }
                    PreTokenizer::ByteLevel {
                        add_prefix_space,
                        regex,
                    } => {
                        let piece = if *add_prefix_space && !piece.starts_with(' ') {
                            format!(" {piece}")
                        } else {
                            piece
                        };
                        let parts = match regex {
                            Some(re) => split_with(re, &piece, SplitBehavior::Isolated)
                                .unwrap_or_else(|_| vec![piece.clone()]),
                            None => vec![piece],
                        };
                        next.extend(parts.into_iter().map(|p| {
                            p.bytes().map(|b| self.byte_map[b as usize]).collect::<String>()
                        }));
                    }
                    PreTokenizer::Split { regex, behavior } => next.extend(
                        split_with(regex, &piece, *behavior).unwrap_or_else(|_| vec![piece.clone()]),
                    ),
                    PreTokenizer::Digits { individual } => {
                        let mut cur = String::new();
                        let mut cur_digit = None;
                        for c in piece.chars() {
                            let d = c.is_numeric();
                            if cur_digit.is_some() && (cur_digit != Some(d) || (d && *individual)) {
                                next.push(std::mem::take(&mut cur));
                            }
                            cur.push(c);
                            cur_digit = Some(d);
                        }
                        if !cur.is_empty() {
                            next.push(cur);
                        }
                    }
                }
            }
            pieces = next;
        }
        pieces.retain(|p| !p.is_empty());
        pieces
    }

    /// Applies merges to one pre-token: repeatedly merges the leftmost
    /// occurrence of the lowest-ranked adjacent pair.
    fn merge_word(&self, word: &str) -> Vec<String> {
        if self.ignore_merges && self.vocab.contains_key(word) {
            return vec![word.to_string()];
        }
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        symbols
    }

    fn encode(&self, text: &str) -> Vec<(String, Option<u32>)> {
        let normalized = self.normalize(text);
        let mut out = Vec::new();
        for piece in self.pre_tokenize(normalized) {
            for sym in self.merge_word(&piece) {
                match self.vocab.get(&sym) {
                    Some(&id) => out.push((sym, Some(id))),
                    None => match &self.unk_token {
                        Some(unk) => out.push((unk.clone(), self.vocab.get(unk).copied())),
                        None => out.push((sym, None)),
                    },
                }
            }
        }
        out
    }
}
