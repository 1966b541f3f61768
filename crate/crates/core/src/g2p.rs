//! Rule-based grapheme-to-phoneme transduction.
//!
//! A profile for language `xxx` lives in one directory as up to four files:
//!
//! | file              | content                                              |
//! |-------------------|------------------------------------------------------|
//! | `xxx.map.csv`     | `orth,phon` pairs, no header                         |
//! | `xxx.pre.rules`   | rewrite rules applied before mapping                 |
//! | `xxx.post.rules`  | rewrite rules applied after mapping                  |
//! | `xxx.dict.csv`    | `word,ipa` pairs for logographic scripts             |
//!
//! Rule lines read `source -> target / left _ right`; the context part is
//! optional and lines starting with `#` are comments. Context patterns are a
//! sequence of literal characters, bracketed classes (`[aeiou]`, `[^aeiou]`,
//! ranges such as `[a-z]`) and the word-boundary marker `#`. Spaces inside a
//! pattern separate elements and are otherwise ignored.
//!
//! Romanization uses the same engine with Latin-target tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum G2pError {
    #[error("no profile for {lang:?} in {dir}")]
    ProfileNotFound { dir: PathBuf, lang: String },
    #[error("{file}:{line}: {reason}")]
    RuleParseError {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}: {reason}")]
    TableError { file: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Grapheme → phoneme pairs, kept sorted by descending key length, then key.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MappingTable {
    entries: Vec<(String, String)>,
}

impl MappingTable {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self, String> {
        let mut seen = HashMap::new();
        for (orth, _) in &pairs {
            if orth.is_empty() {
                return Err("empty orthographic key".into());
            }
            if seen.insert(orth.as_str(), ()).is_some() {
                return Err(format!("duplicate key {orth:?}"));
            }
        }
        let mut entries = pairs;
        entries.sort_by(|a, b| {
            b.0.chars()
                .count()
                .cmp(&a.0.chars().count())
                .then_with(|| a.0.cmp(&b.0))
        });
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LongestMatch {
    map: HashMap<String, String>,
    max_chars: usize,
}

impl LongestMatch {
    fn new<'a>(pairs: impl IntoIterator<Item = (&'a String, &'a String)>) -> Self {
        let mut map = HashMap::new();
        let mut max_chars = 0;
        for (k, v) in pairs {
            max_chars = max_chars.max(k.chars().count());
            map.insert(k.clone(), v.clone());
        }
        Self { map, max_chars }
    }

    /// Greedy leftmost-longest replacement; unmatched characters pass through.
    fn apply(&self, text: &str) -> String {
        if self.map.is_empty() {
            return text.to_string();
        }
        let mut bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
        bounds.push(text.len());
        let n = bounds.len() - 1;
        let mut out = String::with_capacity(text.len());
        let mut i = 0;
        'outer: while i < n {
            for len in (1..=self.max_chars.min(n - i)).rev() {
                if let Some(rep) = self.map.get(&text[bounds[i]..bounds[i + len]]) {
                    out.push_str(rep);
                    i += len;
                    continue 'outer;
                }
            }
            out.push_str(&text[bounds[i]..bounds[i + 1]]);
            i += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternElem {
    Literal(char),
    Class {
        items: Vec<(char, char)>,
        negated: bool,
    },
    Boundary,
}

impl PatternElem {
    fn matches(&self, c: char) -> bool {
        match self {
            PatternElem::Literal(l) => *l == c,
            PatternElem::Class { items, negated } => {
                items.iter().any(|&(lo, hi)| lo <= c && c <= hi) != *negated
            }
            PatternElem::Boundary => false,
        }
    }
}

impl fmt::Display for PatternElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternElem::Literal(c) => write!(f, "{c}"),
            PatternElem::Boundary => f.write_str("#"),
            PatternElem::Class { items, negated } => {
                f.write_str("[")?;
                if *negated {
                    f.write_str("^")?;
                }
                for &(lo, hi) in items {
                    if lo == hi {
                        write!(f, "{lo}")?;
                    } else {
                        write!(f, "{lo}-{hi}")?;
                    }
                }
                f.write_str("]")
            }
        }
    }
}

/// A context pattern: literals, classes and word boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pattern(pub Vec<PatternElem>);

impl Pattern {
    pub fn parse(src: &str) -> Result<Self, String> {
        let chars: Vec<char> = src.chars().collect();
        let mut elems = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            match c {
                c if c.is_whitespace() => i += 1,
                '#' => {
                    elems.push(PatternElem::Boundary);
                    i += 1;
                }
                '[' => {
                    let close = chars[i + 1..]
                        .iter()
                        .position(|&c| c == ']')
                        .ok_or_else(|| format!("unterminated class in {src:?}"))?
                        + i
                        + 1;
                    let mut body = &chars[i + 1..close];
                    let negated = body.first() == Some(&'^');
                    if negated {
                        body = &body[1..];
                    }
                    if body.is_empty() {
                        return Err(format!("empty class in {src:?}"));
                    }
                    let mut items = Vec::new();
                    let mut j = 0;
                    while j < body.len() {
                        if j + 2 < body.len() && body[j + 1] == '-' {
                            if body[j] > body[j + 2] {
                                return Err(format!("reversed range in {src:?}"));
                            }
                            items.push((body[j], body[j + 2]));
                            j += 3;
                        } else {
                            items.push((body[j], body[j]));
                            j += 1;
                        }
                    }
                    elems.push(PatternElem::Class { items, negated });
                    i = close + 1;
                }
                ']' | '_' => return Err(format!("unexpected {c:?} in {src:?}")),
                c => {
                    elems.push(PatternElem::Literal(c));
                    i += 1;
                }
            }
        }
        Ok(Pattern(elems))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Does the pattern match the text immediately before char position `pos`?
    fn matches_before(&self, chars: &[char], pos: usize) -> bool {
        let mut p = pos;
        for elem in self.0.iter().rev() {
            match elem {
                PatternElem::Boundary => {
                    if !(p == 0 || chars[p - 1].is_whitespace()) {
                        return false;
                    }
                }
                e => {
                    if p == 0 || !e.matches(chars[p - 1]) {
                        return false;
                    }
                    p -= 1;
                }
            }
        }
        true
    }

    /// Does the pattern match the text starting at char position `pos`?
    fn matches_after(&self, chars: &[char], pos: usize) -> bool {
        let mut p = pos;
        for elem in &self.0 {
            match elem {
                PatternElem::Boundary => {
                    if !(p == chars.len() || chars[p].is_whitespace()) {
                        return false;
                    }
                }
                e => {
                    if p >= chars.len() || !e.matches(chars[p]) {
                        return false;
                    }
                    p += 1;
                }
            }
        }
        true
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.0 {
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RulePhase {
    Pre,
    Post,
}

/// `source -> target / left _ right`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteRule {
    pub source: String,
    pub target: String,
    pub left_context: Pattern,
    pub right_context: Pattern,
    pub phase: RulePhase,
}

impl RewriteRule {
    pub fn parse(line: &str, phase: RulePhase) -> Result<Self, String> {
        let (source, rest) = line
            .split_once("->")
            .ok_or_else(|| "missing '->'".to_string())?;
        let source = source.trim();
        if source.is_empty() {
            return Err("empty source".into());
        }
        let (target, context) = match rest.split_once('/') {
            Some((t, c)) => (t.trim(), Some(c)),
            None => (rest.trim(), None),
        };
        let (left_context, right_context) = match context {
            None => (Pattern::default(), Pattern::default()),
            Some(c) => {
                let (l, r) = c
                    .split_once('_')
                    .ok_or_else(|| "context needs '_' marking the source position".to_string())?;
                (Pattern::parse(l)?, Pattern::parse(r)?)
            }
        };
        Ok(RewriteRule {
            source: source.to_string(),
            target: target.to_string(),
            left_context,
            right_context,
            phase,
        })
    }

    /// One leftmost, non-overlapping pass. Contexts are checked against the
    /// input of this pass, so replacements never feed the same rule again.
    pub fn apply(&self, text: &str) -> String {
        let chars: Vec<char> = text.chars().collect();
        let src: Vec<char> = self.source.chars().collect();
        let mut out = String::with_capacity(text.len());
        let mut i = 0;
        while i < chars.len() {
            if chars[i..].starts_with(&src)
                && self.left_context.matches_before(&chars, i)
                && self.right_context.matches_after(&chars, i + src.len())
            {
                out.push_str(&self.target);
                i += src.len();
            } else {
                out.push(chars[i]);
                i += 1;
            }
        }
        out
    }
}

impl fmt::Display for RewriteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.source, self.target)?;
        if !self.left_context.is_empty() || !self.right_context.is_empty() {
            write!(f, " / {} _ {}", self.left_context, self.right_context)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum G2pMode {
    Rules,
    Dictionary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct G2pProfile {
    pub lang: String,
    pub mode: G2pMode,
    pub mapping: MappingTable,
    pub pre_rules: Vec<RewriteRule>,
    pub post_rules: Vec<RewriteRule>,
    pub dictionary: Option<BTreeMap<String, String>>,
    matcher: LongestMatch,
}

impl G2pProfile {
    pub fn rules(
        lang: &str,
        mapping: MappingTable,
        pre_rules: Vec<RewriteRule>,
        post_rules: Vec<RewriteRule>,
    ) -> Self {
        let matcher = LongestMatch::new(mapping.entries().iter().map(|(a, b)| (a, b)));
        Self {
            lang: lang.to_string(),
            mode: G2pMode::Rules,
            mapping,
            pre_rules,
            post_rules,
            dictionary: None,
            matcher,
        }
    }

    pub fn dictionary(lang: &str, dictionary: BTreeMap<String, String>) -> Result<Self, String> {
        if dictionary.is_empty() {
            return Err("dictionary mode needs a non-empty dictionary".into());
        }
        if dictionary.keys().any(String::is_empty) {
            return Err("empty dictionary headword".into());
        }
        let matcher = LongestMatch::new(dictionary.iter());
        Ok(Self {
            lang: lang.to_string(),
            mode: G2pMode::Dictionary,
            mapping: MappingTable::default(),
            pre_rules: Vec::new(),
            post_rules: Vec::new(),
            dictionary: Some(dictionary),
            matcher,
        })
    }

    pub fn transliterate(&self, text: &str) -> String {
        match self.mode {
            G2pMode::Dictionary => self.matcher.apply(text),
            G2pMode::Rules => {
                let mut s = text.to_string();
                for r in &self.pre_rules {
                    s = r.apply(&s);
                }
                s = self.matcher.apply(&s);
                for r in &self.post_rules {
                    s = r.apply(&s);
                }
                s
            }
        }
    }
}

/// Convenience wrapper over [`G2pProfile::transliterate`].
pub fn transliterate(profile: &G2pProfile, text: &str) -> String {
    profile.transliterate(text)
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, G2pError> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| G2pError::TableError {
            file: file.clone(),
            reason: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| G2pError::TableError {
            file: file.clone(),
            reason: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 2 {
            return Err(G2pError::TableError {
                file,
                reason: format!("line {}: expected 2 columns, got {}", i + 1, rec.len()),
            });
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

fn read_rules(path: &Path, phase: RulePhase) -> Result<Vec<RewriteRule>, G2pError> {
    let text = std::fs::read_to_string(path).map_err(|source| G2pError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rule = RewriteRule::parse(trimmed, phase).map_err(|reason| G2pError::RuleParseError {
            file: path.display().to_string(),
            line: i + 1,
            reason,
        })?;
        rules.push(rule);
    }
    Ok(rules)
}

/// Loads `<lang>.*` profile files from `dir`.
///
/// The profile is in dictionary mode iff a dictionary is present and the
/// mapping table is absent.
pub fn load_profile(dir: &Path, lang: &str) -> Result<G2pProfile, G2pError> {
    let map_path = dir.join(format!("{lang}.map.csv"));
    let dict_path = dir.join(format!("{lang}.dict.csv"));
    let pre_path = dir.join(format!("{lang}.pre.rules"));
    let post_path = dir.join(format!("{lang}.post.rules"));

    if map_path.is_file() {
        let mapping =
            MappingTable::new(read_pairs(&map_path)?).map_err(|reason| G2pError::TableError {
                file: map_path.display().to_string(),
                reason,
            })?;
        let pre = if pre_path.is_file() {
            read_rules(&pre_path, RulePhase::Pre)?
        } else {
            Vec::new()
        };
        let post = if post_path.is_file() {
            read_rules(&post_path, RulePhase::Post)?
        } else {
            Vec::new()
        };
        Ok(G2pProfile::rules(lang, mapping, pre, post))
    } else if dict_path.is_file() {
        let mut dict = BTreeMap::new();
        for (w, ipa) in read_pairs(&dict_path)? {
            if dict.insert(w.clone(), ipa).is_some() {
                return Err(G2pError::TableError {
                    file: dict_path.display().to_string(),
                    reason: format!("duplicate headword {w:?}"),
                });
            }
        }
        G2pProfile::dictionary(lang, dict).map_err(|reason| G2pError::TableError {
            file: dict_path.display().to_string(),
            reason,
        })
    } else {
        Err(G2pError::ProfileNotFound {
            dir: dir.to_path_buf(),
            lang: lang.to_string(),
        })
    }
}

/// Writes a profile so that [`load_profile`] reads back an equal value.
pub fn save_profile(profile: &G2pProfile, dir: &Path) -> Result<(), G2pError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| G2pError::Io { path, source }
    };
    let write_pairs = |path: &Path, pairs: &mut dyn Iterator<Item = (&String, &String)>| {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| G2pError::TableError {
                file: path.display().to_string(),
                reason: e.to_string(),
            })?;
        for (a, b) in pairs {
            w.write_record([a, b]).map_err(|e| G2pError::TableError {
                file: path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
        w.flush().map_err(io(path))
    };
    let lang = &profile.lang;
    match profile.mode {
        G2pMode::Dictionary => {
            let dict = profile.dictionary.as_ref().expect("dictionary mode");
            write_pairs(&dir.join(format!("{lang}.dict.csv")), &mut dict.iter())?;
        }
        G2pMode::Rules => {
            write_pairs(
                &dir.join(format!("{lang}.map.csv")),
                &mut profile.mapping.entries().iter().map(|(a, b)| (a, b)),
            )?;
            for (rules, ext) in [(&profile.pre_rules, "pre"), (&profile.post_rules, "post")] {
                if rules.is_empty() {
                    continue;
                }
                let path = dir.join(format!("{lang}.{ext}.rules"));
                let body: String = rules.iter().map(|r| format!("{r}\n")).collect();
                std::fs::write(&path, body).map_err(io(&path))?;
            }
        }
    }
    Ok(())
}
