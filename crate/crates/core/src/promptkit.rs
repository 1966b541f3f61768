//! Few-shot prompt templates and rendering.
//!
//! A template file holds one section per task:
//!
//! ```text
//! === flores ===
//! --- header ---
//! Given the <script input> ...
//! --- example ---
//! <script input>: {{input}}
//! <ipa input>: {{input_ipa}}
//! <script output>: {{answer}}
//! --- query ---
//! <script input>: {{input}}
//! <ipa input>: {{input_ipa}}
//! <script output>:
//! ```
//!
//! Lines before the first `===` heading are a preamble; blank ones and ones
//! starting with `#` are ignored. Leading and trailing blank lines of every
//! subsection are trimmed. The header is copied verbatim (it may show
//! placeholders as documentation); only the example and query blocks are
//! substituted.
//!
//! A prompt is the header, a blank line, then each rendered example block
//! followed by a blank line, then the query block.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Task};
use crate::retrieve::Channel;

pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.txt");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template parse error at line {line}: {reason}")]
    TemplateParseError { line: usize, reason: String },
    #[error("example {id:?} has no {channel} text")]
    MissingField { channel: Channel, id: String },
    #[error("expected {expected} shots, got {got}")]
    ShotCountMismatch { expected: usize, got: usize },
    #[error("no template for task {0}")]
    UnknownTask(Task),
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Field {
    Input,
    InputIpa,
    InputRoman,
    Answer,
}

impl Field {
    fn parse(name: &str) -> Option<Field> {
        Some(match name {
            "input" => Field::Input,
            "input_ipa" => Field::InputIpa,
            "input_roman" => Field::InputRoman,
            "answer" => Field::Answer,
            _ => return None,
        })
    }

    fn channel(self) -> Option<Channel> {
        match self {
            Field::Input => Some(Channel::Script),
            Field::InputIpa => Some(Channel::Ipa),
            Field::InputRoman => Some(Channel::Roman),
            Field::Answer => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Field),
}

/// One template line, pre-split into literal text and placeholder slots.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Line(Vec<Piece>);

impl Line {
    fn parse(s: &str, allow_answer: bool, line_no: usize) -> Result<Line, PromptError> {
        let mut pieces = Vec::new();
        let mut rest = s;
        while let Some(start) = rest.find("{{") {
            let Some(len) = rest[start + 2..].find("}}") else {
                return Err(PromptError::TemplateParseError {
                    line: line_no,
                    reason: "unterminated placeholder".into(),
                });
            };
            if start > 0 {
                pieces.push(Piece::Text(rest[..start].to_string()));
            }
            let name = &rest[start + 2..start + 2 + len];
            let field = Field::parse(name.trim()).ok_or_else(|| PromptError::TemplateParseError {
                line: line_no,
                reason: format!("unknown placeholder {{{{{name}}}}}"),
            })?;
            if field == Field::Answer && !allow_answer {
                return Err(PromptError::TemplateParseError {
                    line: line_no,
                    reason: "{{answer}} is not allowed in the query block".into(),
                });
            }
            pieces.push(Piece::Slot(field));
            rest = &rest[start + 2 + len + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Line(pieces))
    }

    fn fields(&self) -> impl Iterator<Item = Field> + '_ {
        self.0.iter().filter_map(|p| match p {
            Piece::Slot(f) => Some(*f),
            Piece::Text(_) => None,
        })
    }
}

impl std::fmt::Display for Line {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.0 {
            match p {
                Piece::Text(t) => f.write_str(t)?,
                Piece::Slot(Field::Input) => f.write_str("{{input}}")?,
                Piece::Slot(Field::InputIpa) => f.write_str("{{input_ipa}}")?,
                Piece::Slot(Field::InputRoman) => f.write_str("{{input_roman}}")?,
                Piece::Slot(Field::Answer) => f.write_str("{{answer}}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task: Task,
    pub header: String,
    example_block: Vec<Line>,
    query_block: Vec<Line>,
}

impl PromptTemplate {
    pub fn new(task: Task, header: &str, example_block: &str, query_block: &str) -> Result<Self, PromptError> {
        let parse = |block: &str, allow_answer: bool| {
            block
                .lines()
                .enumerate()
                .map(|(i, l)| Line::parse(l, allow_answer, i + 1))
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(Self {
            task,
            header: header.to_string(),
            example_block: parse(example_block, true)?,
            query_block: parse(query_block, false)?,
        })
    }

    pub fn example_block(&self) -> String {
        join_lines(&self.example_block)
    }

    pub fn query_block(&self) -> String {
        join_lines(&self.query_block)
    }
}

fn join_lines(lines: &[Line]) -> String {
    lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlankMode {
    /// Drop lines whose field is excluded.
    #[default]
    Omit,
    /// Keep the line's label and leave the value empty.
    BlankField,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub k_shots: usize,
    pub include_script: bool,
    pub include_ipa: bool,
    pub include_roman: bool,
    pub blank_mode: BlankMode,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            k_shots: 3,
            include_script: true,
            include_ipa: true,
            include_roman: false,
            blank_mode: BlankMode::Omit,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if !(self.include_script || self.include_ipa || self.include_roman) {
            return Err(PromptError::InvalidConfig(
                "at least one of script/ipa/roman must be included".into(),
            ));
        }
        Ok(())
    }

    fn includes(&self, ch: Channel) -> bool {
        match ch {
            Channel::Script => self.include_script,
            Channel::Ipa => self.include_ipa,
            Channel::Roman => self.include_roman,
        }
    }
}

/// Parse a template file into task → template.
pub fn parse_templates(text: &str) -> Result<BTreeMap<Task, PromptTemplate>, PromptError> {
    #[derive(PartialEq)]
    enum Part {
        Header,
        Example,
        Query,
    }
    struct Section {
        task: Task,
        line: usize,
        parts: [Option<Vec<String>>; 3],
    }

    let mut sections: Vec<Section> = Vec::new();
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = raw.trim();
        if let Some(name) = trimmed.strip_prefix("===").and_then(|s| s.strip_suffix("===")) {
            let task: Task = name.trim().parse().unwrap();
            if sections.iter().any(|s| s.task == task) {
                return Err(PromptError::TemplateParseError {
                    line: line_no,
                    reason: format!("duplicate section for task {task}"),
                });
            }
            sections.push(Section {
                task,
                line: line_no,
                parts: [None, None, None],
            });
            current = None;
            continue;
        }
        if let Some(name) = trimmed.strip_prefix("---").and_then(|s| s.strip_suffix("---")) {
            let Some(sec) = sections.last_mut() else {
                return Err(PromptError::TemplateParseError {
                    line: line_no,
                    reason: "subsection outside of a task section".into(),
                });
            };
            let idx = match name.trim() {
                "header" => Part::Header as usize,
                "example" => Part::Example as usize,
                "query" => Part::Query as usize,
                other => {
                    return Err(PromptError::TemplateParseError {
                        line: line_no,
                        reason: format!("unknown subsection {other:?}"),
                    })
                }
            };
            if sec.parts[idx].is_some() {
                return Err(PromptError::TemplateParseError {
                    line: line_no,
                    reason: format!("repeated subsection {:?}", name.trim()),
                });
            }
            sec.parts[idx] = Some(Vec::new());
            current = Some(idx);
            continue;
        }
        match (sections.last_mut(), current) {
            (Some(sec), Some(idx)) => sec.parts[idx].as_mut().unwrap().push(raw.to_string()),
            (Some(_), None) if trimmed.is_empty() => {}
            (None, _) if trimmed.is_empty() || trimmed.starts_with('#') => {}
            _ => {
                return Err(PromptError::TemplateParseError {
                    line: line_no,
                    reason: "text outside of a subsection".into(),
                })
            }
        }
    }

    let mut out = BTreeMap::new();
    for sec in sections {
        let mut texts = Vec::with_capacity(3);
        for (idx, name) in ["header", "example", "query"].iter().enumerate() {
            let Some(lines) = &sec.parts[idx] else {
                return Err(PromptError::TemplateParseError {
                    line: sec.line,
                    reason: format!("task {} is missing its {name} subsection", sec.task),
                });
            };
            texts.push(trim_blank_lines(lines));
        }
        let tpl = PromptTemplate::new(sec.task.clone(), &texts[0], &texts[1], &texts[2]).map_err(|e| match e {
            PromptError::TemplateParseError { reason, .. } => PromptError::TemplateParseError {
                line: sec.line,
                reason: format!("task {}: {reason}", sec.task),
            },
            other => other,
        })?;
        out.insert(sec.task, tpl);
    }
    Ok(out)
}

fn trim_blank_lines(lines: &[String]) -> String {
    let start = lines.iter().position(|l| !l.trim().is_empty()).unwrap_or(lines.len());
    let end = lines.iter().rposition(|l| !l.trim().is_empty()).map_or(start, |e| e + 1);
    lines[start..end].join("\n")
}

/// Render a template set back to the file format.
pub fn dump_templates(templates: &BTreeMap<Task, PromptTemplate>) -> String {
    let mut out = String::new();
    for (task, t) in templates {
        out.push_str(&format!(
            "=== {task} ===\n--- header ---\n{}\n--- example ---\n{}\n--- query ---\n{}\n\n",
            t.header,
            t.example_block(),
            t.query_block()
        ));
    }
    out
}

pub fn default_templates() -> BTreeMap<Task, PromptTemplate> {
    parse_templates(DEFAULT_TEMPLATES).expect("embedded templates parse")
}

/// The built-in templates, with any task defined in `path` replacing the default.
pub fn load_templates(path: &Path) -> Result<BTreeMap<Task, PromptTemplate>, PromptError> {
    let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut all = default_templates();
    all.extend(parse_templates(&text)?);
    Ok(all)
}

fn render_block(
    lines: &[Line],
    cfg: &PromptConfig,
    ex: &Example,
    with_answer: bool,
    out: &mut String,
) -> Result<(), PromptError> {
    let mut first = true;
    for line in lines {
        let mut blank = false;
        let mut drop = false;
        for f in line.fields() {
            if let Some(ch) = f.channel() {
                if !cfg.includes(ch) {
                    // Roman lines are an extension of the two-field format and are
                    // never shown as blanks.
                    if cfg.blank_mode == BlankMode::BlankField && ch != Channel::Roman {
                        blank = true;
                    } else {
                        drop = true;
                    }
                }
            }
        }
        if drop {
            continue;
        }
        if !first {
            out.push('\n');
        }
        first = false;
        for p in &line.0 {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(Field::Answer) => {
                    if with_answer {
                        out.push_str(&ex.target_text);
                    }
                }
                Piece::Slot(f) => {
                    let ch = f.channel().unwrap();
                    if cfg.includes(ch) {
                        let v = match ch {
                            Channel::Roman => ex.roman_text.as_deref().unwrap_or(""),
                            _ => ch.text(ex),
                        };
                        if v.is_empty() {
                            return Err(PromptError::MissingField {
                                channel: ch,
                                id: ex.id.clone(),
                            });
                        }
                        out.push_str(v);
                    } else {
                        debug_assert!(blank);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Build the full prompt. Shots appear in the given order.
pub fn render_prompt(
    template: &PromptTemplate,
    cfg: &PromptConfig,
    shots: &[Example],
    query: &Example,
) -> Result<String, PromptError> {
    cfg.validate()?;
    if shots.len() != cfg.k_shots {
        return Err(PromptError::ShotCountMismatch {
            expected: cfg.k_shots,
            got: shots.len(),
        });
    }
    let mut out = String::new();
    out.push_str(&template.header);
    out.push_str("\n\n");
    for shot in shots {
        render_block(&template.example_block, cfg, shot, true, &mut out)?;
        out.push_str("\n\n");
    }
    render_block(&template.query_block, cfg, query, false, &mut out)?;
    Ok(out)
}
