//! KEGG flat-file parsing.
//!
//! Entries are keyword-indented: the keyword occupies the first 12 columns,
//! continuation lines leave that field blank, and sub-keywords sit indented
//! inside it. Every entry ends with a `///` line.

use thiserror::Error;

use crate::ingest::is_kegg_drug_code;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ParseError(String);

/// One DRUG entry, reduced to the link fields the embedding needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeggRecord {
    pub code: String,
    pub name: String,
    /// H-number codes from the DISEASE section.
    pub diseases: Vec<String>,
    /// Target identifiers (`HSA:…`, `KO:…`) plus pathway codes.
    pub targets_pathways: Vec<String>,
    /// Lowercased efficacy snippets, split on commas and semicolons.
    pub efficacy: Vec<String>,
    /// DG codes from the CLASS section, or lowercased class text for lines
    /// without one.
    pub drug_class: Vec<String>,
}

/// One DISEASE entry: just its code, name and linked drugs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiseaseRecord {
    pub code: String,
    pub name: String,
    pub drugs: Vec<String>,
}

pub fn is_disease_code(code: &str) -> bool {
    code.len() == 6 && code.starts_with('H') && code[1..].bytes().all(|b| b.is_ascii_digit())
}

const KEYWORD_WIDTH: usize = 12;

/// One content line tagged with its section and optional sub-section.
struct Line {
    top: String,
    sub: Option<String>,
    content: String,
}

fn split_lines(raw: &str) -> Result<Vec<Line>, ParseError> {
    let mut out = Vec::new();
    let mut top: Option<String> = None;
    let mut sub: Option<String> = None;
    let mut terminated = false;
    for line in raw.lines() {
        if line.starts_with("///") {
            terminated = true;
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cut = line
            .char_indices()
            .nth(KEYWORD_WIDTH)
            .map_or(line.len(), |(i, _)| i);
        let (field, content) = line.split_at(cut);
        let keyword = field.trim();
        if !keyword.is_empty() {
            if line.starts_with(' ') {
                sub = Some(keyword.to_string());
            } else {
                top = Some(keyword.to_string());
                sub = None;
            }
        }
        let Some(top_kw) = top.clone() else {
            return Err(ParseError(format!("content before any keyword: {line:?}")));
        };
        out.push(Line {
            top: top_kw,
            sub: sub.clone(),
            content: content.trim().to_string(),
        });
    }
    if !terminated {
        return Err(ParseError("missing /// terminator".into()));
    }
    Ok(out)
}

/// Codes inside `[PFX:a b]` groups for one prefix, without the prefix.
fn bracket_codes(text: &str, prefix: &str) -> Vec<String> {
    let marker = format!("[{prefix}:");
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(&marker) {
        let inner = &rest[start + marker.len()..];
        let Some(end) = inner.find(']') else { break };
        out.extend(inner[..end].split_whitespace().map(str::to_string));
        rest = &inner[end + 1..];
    }
    out
}

/// All `[PFX:a b]` groups, emitted as `PFX:a`, `PFX:b`.
fn bracket_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('[') {
        let inner = &rest[start + 1..];
        let Some(end) = inner.find(']') else { break };
        let group = &inner[..end];
        if let Some((prefix, ids)) = group.split_once(':') {
            if !prefix.is_empty() && !prefix.contains(char::is_whitespace) {
                out.extend(ids.split_whitespace().map(|id| format!("{prefix}:{id}")));
            }
        }
        rest = &inner[end + 1..];
    }
    out
}

/// First whitespace token with any trailing `(…)` cross-reference removed.
fn pathway_code(content: &str) -> Option<String> {
    let token = content.split_whitespace().next()?;
    let code = token.split('(').next().unwrap_or(token);
    if code.is_empty() {
        None
    } else {
        Some(code.to_string())
    }
}

fn entry_code(lines: &[Line]) -> Result<String, ParseError> {
    let entry = lines
        .iter()
        .find(|l| l.top == "ENTRY")
        .ok_or_else(|| ParseError("missing ENTRY line".into()))?;
    entry
        .content
        .split_whitespace()
        .next()
        .map(str::to_string)
        .ok_or_else(|| ParseError("empty ENTRY line".into()))
}

fn entry_name(lines: &[Line]) -> String {
    lines
        .iter()
        .find(|l| l.top == "NAME")
        .map(|l| l.content.trim_end_matches(';').trim().to_string())
        .unwrap_or_default()
}

/// Lowercases and splits free text on commas and semicolons.
fn efficacy_snippets(content: &str) -> impl Iterator<Item = String> + '_ {
    content
        .split([',', ';'])
        .map(|s| s.trim().to_lowercase())
        .filter(|s| !s.is_empty())
}

pub fn parse_drug_entry(raw: &str) -> Result<KeggRecord, ParseError> {
    let lines = split_lines(raw)?;
    let code = entry_code(&lines)?;
    if !is_kegg_drug_code(&code) {
        return Err(ParseError(format!(
            "ENTRY code {code:?} is not a D-number"
        )));
    }

    let mut record = KeggRecord {
        code,
        name: entry_name(&lines),
        diseases: Vec::new(),
        targets_pathways: Vec::new(),
        efficacy: Vec::new(),
        drug_class: Vec::new(),
    };

    for line in &lines {
        match (line.top.as_str(), line.sub.as_deref()) {
            ("DISEASE", None) => record.diseases.extend(bracket_codes(&line.content, "DS")),
            ("TARGET", None) => record.targets_pathways.extend(bracket_tokens(&line.content)),
            ("TARGET", Some("PATHWAY")) | ("PATHWAY", None) => {
                record.targets_pathways.extend(pathway_code(&line.content));
            }
            ("EFFICACY", None) => record.efficacy.extend(efficacy_snippets(&line.content)),
            ("CLASS", None) => {
                let dg: Vec<String> = line
                    .content
                    .split_whitespace()
                    .filter(|t| {
                        t.len() == 7
                            && t.starts_with("DG")
                            && t[2..].bytes().all(|b| b.is_ascii_digit())
                    })
                    .map(str::to_string)
                    .collect();
                if dg.is_empty() {
                    record.drug_class.push(line.content.to_lowercase());
                } else {
                    record.drug_class.extend(dg);
                }
            }
            _ => {}
        }
    }
    Ok(record)
}

pub fn parse_disease_entry(raw: &str) -> Result<DiseaseRecord, ParseError> {
    let lines = split_lines(raw)?;
    let code = entry_code(&lines)?;
    if !is_disease_code(&code) {
        return Err(ParseError(format!(
            "ENTRY code {code:?} is not an H-number"
        )));
    }
    let mut drugs = Vec::new();
    for line in &lines {
        if line.top == "DRUG" {
            drugs.extend(bracket_codes(&line.content, "DR"));
        }
    }
    Ok(DiseaseRecord {
        code,
        name: entry_name(&lines),
        drugs,
    })
}
