//! Splits raw eligibility text into ordered inclusion and exclusion criteria.
//!
//! The accepted shape is the usual registry layout: a section header
//! containing "inclusion criteria" or "exclusion criteria" (any casing,
//! optional prefix such as "Key"), followed by bullet items (`-`, `*`, `•`,
//! `1.`, `1)`, `(1)`) or plain lines. A bullet body continues on following
//! lines indented deeper than its marker; those are joined with one space.
//! One bullet is one criterion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text_encoder::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Inclusion,
    Exclusion,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Inclusion => "inclusion",
            Polarity::Exclusion => "exclusion",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inclusion" => Ok(Polarity::Inclusion),
            "exclusion" => Ok(Polarity::Exclusion),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    III,
    IV,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::I, Phase::II, Phase::III, Phase::IV];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
            Phase::IV => "IV",
        }
    }

    /// Lenient parse: accepts `"II"`, `"2"`, `"Phase 2"`, `"phase ii"`.
    pub fn parse(s: &str) -> Option<Phase> {
        let lower = s.trim().to_ascii_lowercase();
        let core = lower.strip_prefix("phase").unwrap_or(&lower).trim();
        match core {
            "i" | "1" => Some(Phase::I),
            "ii" | "2" => Some(Phase::II),
            "iii" | "3" => Some(Phase::III),
            "iv" | "4" => Some(Phase::IV),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Criterion {
    pub trial_id: String,
    pub index: usize,
    pub polarity: Polarity,
    pub text: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub trial_id: String,
    pub phase: Option<Phase>,
    pub cohort: Option<String>,
    pub inclusion: Vec<Criterion>,
    pub exclusion: Vec<Criterion>,
}

impl Trial {
    pub fn criteria(&self) -> impl Iterator<Item = &Criterion> {
        self.inclusion.iter().chain(&self.exclusion)
    }

    pub fn num_criteria(&self) -> usize {
        self.inclusion.len() + self.exclusion.len()
    }

    pub fn criterion(&self, polarity: Polarity, index: usize) -> Option<&Criterion> {
        match polarity {
            Polarity::Inclusion => self.inclusion.get(index),
            Polarity::Exclusion => self.exclusion.get(index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    NoSectionHeaders,
    DroppedItem { polarity: Polarity, text: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedEligibility {
    pub inclusion: Vec<String>,
    pub exclusion: Vec<String>,
    pub warnings: Vec<ParseWarning>,
}

fn strip_bullet(line: &str) -> Option<&str> {
    for marker in ['-', '*', '•', '–'] {
        if let Some(rest) = line.strip_prefix(marker) {
            if marker == '•' || rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return Some(rest.trim());
            }
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(body) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if body.is_empty() || body.starts_with(char::is_whitespace) {
                return Some(body.trim());
            }
        }
    }
    if let Some(inner) = line.strip_prefix('(') {
        let digits = inner.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 {
            if let Some(body) = inner[digits..].strip_prefix(')') {
                if body.is_empty() || body.starts_with(char::is_whitespace) {
                    return Some(body.trim());
                }
            }
        }
    }
    None
}

/// Recognizes a section header line, returning its polarity and any text
/// that follows the header's colon.
fn header(line: &str) -> Option<(Polarity, &str)> {
    if strip_bullet(line).is_some() {
        return None;
    }
    let (head, rest) = match line.find(':') {
        Some(i) => (&line[..i], Some(&line[i + 1..])),
        None => (line, None),
    };
    let words: Vec<String> = head.split_whitespace().map(str::to_lowercase).collect();
    let max_words = if rest.is_some() { 6 } else { 4 };
    if words.is_empty() || words.len() > max_words {
        return None;
    }
    let joined = words.join(" ");
    let inc = joined.find("inclusion criteria");
    let exc = joined.find("exclusion criteria");
    let polarity = match (inc, exc) {
        (Some(i), Some(e)) if e < i => Polarity::Exclusion,
        (Some(_), _) => Polarity::Inclusion,
        (None, Some(_)) => Polarity::Exclusion,
        (None, None) => return None,
    };
    Some((polarity, rest.map(str::trim).unwrap_or("")))
}

fn indent_of(line: &str) -> usize {
    line.chars()
        .take_while(|c| c.is_whitespace())
        .map(|c| if c == '\t' { 4 } else { 1 })
        .sum()
}

struct Pending {
    text: String,
    indent: usize,
    bullet: bool,
}

/// Parses raw eligibility text. Never fails; unrecognized input yields empty
/// lists and a [`ParseWarning::NoSectionHeaders`].
///
/// In a section that uses bullets, unbulleted paragraphs (lead-ins such as
/// "Patients must have:" or trailing boilerplate) are not criteria; they are
/// dropped and reported as [`ParseWarning::DroppedItem`].
pub fn parse_eligibility(raw: &str) -> ParsedEligibility {
    let mut out = ParsedEligibility::default();
    let mut section: Option<Polarity> = None;
    let mut saw_header = false;
    let mut bulleted = false;
    let mut pending: Option<Pending> = None;

    fn flush(pending: &mut Option<Pending>, section: Option<Polarity>, bulleted: bool, out: &mut ParsedEligibility) {
        if let (Some(p), Some(sec)) = (pending.take(), section) {
            let text = p.text.trim().to_string();
            if text.is_empty() {
                return;
            }
            if bulleted && !p.bullet {
                tracing::warn!(%sec, text, "dropping unbulleted paragraph");
                out.warnings.push(ParseWarning::DroppedItem { polarity: sec, text });
                return;
            }
            match sec {
                Polarity::Inclusion => out.inclusion.push(text),
                Polarity::Exclusion => out.exclusion.push(text),
            }
        }
    }

    for line in raw.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut pending, section, bulleted, &mut out);
            continue;
        }
        if let Some((polarity, rest)) = header(trimmed) {
            flush(&mut pending, section, bulleted, &mut out);
            section = Some(polarity);
            saw_header = true;
            bulleted = false;
            if !rest.is_empty() {
                // text on the header line itself is an item
                pending = Some(Pending {
                    text: rest.to_string(),
                    indent: indent_of(line),
                    bullet: true,
                });
            }
            continue;
        }
        if section.is_none() {
            continue;
        }
        let indent = indent_of(line);
        if let Some(body) = strip_bullet(trimmed) {
            bulleted = true;
            flush(&mut pending, section, bulleted, &mut out);
            pending = Some(Pending {
                text: body.to_string(),
                indent,
                bullet: true,
            });
            continue;
        }
        match pending.as_mut() {
            Some(p) if indent > p.indent => {
                p.text.push(' ');
                p.text.push_str(trimmed);
            }
            _ => {
                flush(&mut pending, section, bulleted, &mut out);
                pending = Some(Pending {
                    text: trimmed.to_string(),
                    indent,
                    bullet: false,
                });
            }
        }
    }
    flush(&mut pending, section, bulleted, &mut out);
    if !saw_header {
        tracing::warn!("eligibility text has no recognizable section headers");
        out.warnings.push(ParseWarning::NoSectionHeaders);
    }
    out
}

/// Canonical text form; [`parse_eligibility`] reads it back unchanged.
pub fn render_eligibility(inclusion: &[String], exclusion: &[String]) -> String {
    let mut s = String::from("Inclusion Criteria:\n");
    for item in inclusion {
        s.push_str("- ");
        s.push_str(item);
        s.push('\n');
    }
    s.push_str("Exclusion Criteria:\n");
    for item in exclusion {
        s.push_str("- ");
        s.push_str(item);
        s.push('\n');
    }
    s
}

/// Parses `raw` and tokenizes each criterion. In strict mode a trial without
/// any criteria is an error.
pub fn build_trial(trial_id: &str, phase: Option<Phase>, raw: &str, strict: bool) -> Result<Trial> {
    if trial_id.trim().is_empty() {
        return Err(Error::InvalidInput("trial_id must be non-empty".into()));
    }
    let parsed = parse_eligibility(raw);
    let make = |polarity: Polarity, items: Vec<String>| -> Vec<Criterion> {
        items
            .into_iter()
            .filter_map(|text| {
                let tokens = tokenize(&text);
                if tokens.is_empty() {
                    tracing::warn!(trial_id, %polarity, text, "dropping criterion without tokens");
                    None
                } else {
                    Some((text, tokens))
                }
            })
            .enumerate()
            .map(|(index, (text, tokens))| Criterion {
                trial_id: trial_id.to_string(),
                index,
                polarity,
                text,
                tokens,
            })
            .collect()
    };
    let trial = Trial {
        trial_id: trial_id.to_string(),
        phase,
        cohort: None,
        inclusion: make(Polarity::Inclusion, parsed.inclusion),
        exclusion: make(Polarity::Exclusion, parsed.exclusion),
    };
    if strict && trial.num_criteria() == 0 {
        return Err(Error::NoCriteria(trial_id.to_string()));
    }
    Ok(trial)
}
